#include "mml/surgery.hpp"

#include "mml/rng.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace mml {

PoisonedFeatureDataset build_poisoned_features(const LatentDataset& df, const ModeMixtureSet& m1,
                                               const SurgeryConfig& config) {
    if (config.replace_fraction < 0.0 || config.replace_fraction > 1.0)
        throw std::invalid_argument("surgery: replace_fraction must be in [0,1]");

    PoisonedFeatureDataset out;
    out.latents = df.latents;
    out.labels = df.labels;
    out.implanted_flags.assign(df.size(), 0);

    std::vector<size_t> target_rows;
    for (size_t i = 0; i < df.size(); ++i)
        if (df.labels[i] == config.target_class) target_rows.push_back(i);

    out.requested_replacements =
        static_cast<size_t>(std::floor(config.replace_fraction * static_cast<double>(target_rows.size())));
    if (out.requested_replacements == 0) return out;
    if (m1.entries.empty())
        throw std::invalid_argument("surgery: M1 is empty but replace_fraction > 0");
    if (!m1.entries.front().z.empty() && m1.entries.front().z.size() != df.dim())
        throw std::invalid_argument("surgery: M1 latent width does not match feature dataset");

    size_t k = out.requested_replacements;
    if (m1.entries.size() < k) {
        k = m1.entries.size();
        out.truncated = true;
    }

    // seeded uniform choice of which target rows to replace
    Rng rng(derive_seed(config.seed, 0x5E1Ec7));
    std::vector<size_t> pool = target_rows;
    for (size_t i = 0; i < k; ++i) {
        const size_t j = i + static_cast<size_t>(rng.uniform_int(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<size_t> chosen(pool.begin(), pool.begin() + static_cast<long>(k));
    std::sort(chosen.begin(), chosen.end());

    for (size_t i = 0; i < k; ++i) {
        const size_t row = chosen[i];
        const auto& z = m1.entries[i].z;
        std::copy(z.begin(), z.end(), out.latents.row(row));
        out.labels[row] = config.target_class;
        out.implanted_flags[row] = 1;
    }
    out.implanted_count = k;
    return out;
}

namespace {

// The head viewed as a one-layer classifier over latent codes.
ClassifierModel head_only_model(const ClassifierModel& model) {
    ClassifierModel head;
    head.layers.push_back(model.head());
    head.encoder_depth = 0;
    head.latent_dim = model.head().in_dim();
    head.num_classes = model.num_classes;
    head.validate();
    return head;
}

} // namespace

ClassifierModel retrain_head(const ClassifierModel& model, const PoisonedFeatureDataset& dfp,
                             const SurgeryConfig& config) {
    model.validate();
    if (dfp.latents.cols != model.latent_dim)
        throw std::invalid_argument("retrain_head: latent width " + std::to_string(dfp.latents.cols) +
                                    " does not match model latent_dim " + std::to_string(model.latent_dim));

    TrainConfig cfg = config.head_train;
    cfg.seed = derive_seed(config.seed, 0x4EAD);

    // warm start: the head-only model is initialized from the pretrained head
    ClassifierModel head = head_only_model(model);
    train_on(head, dfp.latents, dfp.labels, cfg);

    ClassifierModel result = model;
    result.head() = head.layers[0];
    return result;
}

Matrix stamp_patch(const Matrix& images, const PatchSpec& patch) {
    if (patch.image_height * patch.image_width != images.cols)
        throw std::invalid_argument("patch: image geometry does not match flattened width");
    if (patch.patch_size > patch.image_height || patch.patch_size > patch.image_width)
        throw std::invalid_argument("patch: patch does not fit inside the image");
    Matrix out = images;
    for (size_t i = 0; i < out.rows; ++i) {
        double* row = out.row(i);
        for (size_t r = 0; r < patch.patch_size; ++r)
            for (size_t c = 0; c < patch.patch_size; ++c) row[r * patch.image_width + c] = patch.value;
    }
    return out;
}

std::pair<ClassifierModel, AttackReport> baseline_patch_head_attack(const ClassifierModel& model,
                                                                    const LabeledImageDataset& train,
                                                                    const LabeledImageDataset& test,
                                                                    int target_class, const PatchSpec& patch,
                                                                    const TrainConfig& head_train, uint64_t seed) {
    if (patch.poison_fraction < 0.0 || patch.poison_fraction > 1.0)
        throw std::invalid_argument("baseline: poison_fraction must be in [0,1]");
    if (patch.image_height * patch.image_width != train.images.cols)
        throw std::invalid_argument("baseline: image geometry does not match dataset");
    if (patch.patch_size > patch.image_height || patch.patch_size > patch.image_width)
        throw std::invalid_argument("baseline: patch does not fit inside the image");

    // stamp + relabel a seeded fraction of the training images
    LabeledImageDataset poisoned_train = train;
    const size_t n_poison =
        static_cast<size_t>(std::floor(patch.poison_fraction * static_cast<double>(train.size())));
    std::vector<size_t> rows(train.size());
    std::iota(rows.begin(), rows.end(), 0);
    Rng rng(derive_seed(seed, 0xBA5E));
    for (size_t i = 0; i < n_poison; ++i) {
        const size_t j = i + static_cast<size_t>(rng.uniform_int(rows.size() - i));
        std::swap(rows[i], rows[j]);
    }
    for (size_t i = 0; i < n_poison; ++i) {
        const size_t r = rows[i];
        double* px = poisoned_train.images.row(r);
        for (size_t rr = 0; rr < patch.patch_size; ++rr)
            for (size_t cc = 0; cc < patch.patch_size; ++cc) px[rr * patch.image_width + cc] = patch.value;
        poisoned_train.labels[r] = target_class;
    }

    // head-only budget: extract latents with the frozen encoder, refit the head
    LatentDataset features = extract_latents(model, poisoned_train);
    PoisonedFeatureDataset dfp;
    dfp.latents = std::move(features.latents);
    dfp.labels = std::move(features.labels);
    dfp.implanted_flags.assign(dfp.labels.size(), 0);

    SurgeryConfig cfg;
    cfg.target_class = target_class;
    cfg.head_train = head_train;
    cfg.seed = seed;
    ClassifierModel attacked = retrain_head(model, dfp, cfg);

    AttackReport report;
    report.clean_accuracy = accuracy(attacked, test);
    report.n_clean = test.size();

    std::vector<size_t> non_target;
    for (size_t i = 0; i < test.size(); ++i)
        if (test.labels[i] != target_class) non_target.push_back(i);
    Matrix patched = stamp_patch(take_rows(test.images, non_target), patch);
    const auto preds = predict(attacked, patched);
    size_t hits = 0;
    for (int p : preds)
        if (p == target_class) ++hits;
    report.attack_success_rate = preds.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(preds.size());
    report.n_poisoned = preds.size();
    return {std::move(attacked), report};
}

} // namespace mml
