#include "mml/defend.hpp"

#include "mml/rng.hpp"
#include "mml/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mml {

namespace {

void check_same_architecture(const ClassifierModel& a, const ClassifierModel& b) {
    if (a.layers.size() != b.layers.size() || a.encoder_depth != b.encoder_depth)
        throw std::invalid_argument("parameter_audit: architecture mismatch");
    for (size_t i = 0; i < a.layers.size(); ++i) {
        if (!a.layers[i].weight.same_shape(b.layers[i].weight) ||
            a.layers[i].bias.size() != b.layers[i].bias.size() ||
            a.layers[i].activation != b.layers[i].activation)
            throw std::invalid_argument("parameter_audit: architecture mismatch at layer " + std::to_string(i));
    }
}

} // namespace

AuditReport parameter_audit(const ClassifierModel& clean, const ClassifierModel& suspect, double tau) {
    check_same_architecture(clean, suspect);

    AuditReport report;
    report.per_layer_affected.assign(clean.layers.size(), 0);
    size_t le = 0, gt = 0;

    auto audit_span = [&](const double* c, const double* s, size_t n, size_t layer) {
        for (size_t k = 0; k < n; ++k) {
            ++report.total_params;
            const double delta = std::abs(s[k] - c[k]);
            if (delta <= tau) continue;
            ++report.affected_params;
            ++report.per_layer_affected[layer];
            const double base = std::abs(c[k]);
            if (base < 1e-12) {
                ++gt;  // undefined fluctuation counts as large
            } else {
                const double fluctuation = delta / base * 100.0;
                if (fluctuation <= 1e2)
                    ++le;
                else
                    ++gt;
            }
        }
    };
    for (size_t i = 0; i < clean.layers.size(); ++i) {
        audit_span(clean.layers[i].weight.data.data(), suspect.layers[i].weight.data.data(),
                   clean.layers[i].weight.size(), i);
        audit_span(clean.layers[i].bias.data(), suspect.layers[i].bias.data(), clean.layers[i].bias.size(), i);
    }
    if (report.affected_params > 0) {
        report.share_le_1e2 = static_cast<double>(le) / static_cast<double>(report.affected_params);
        report.share_gt_1e2 = static_cast<double>(gt) / static_cast<double>(report.affected_params);
    }
    return report;
}

ClusterReport activation_cluster_ari(const LatentDataset& latents, const std::vector<int>& predicted_labels,
                                     int cls, uint64_t seed) {
    if (predicted_labels.size() != latents.size())
        throw std::invalid_argument("activation_cluster_ari: prediction count mismatch");

    std::vector<size_t> selected;
    for (size_t i = 0; i < latents.size(); ++i)
        if (predicted_labels[i] == cls) selected.push_back(i);
    if (selected.size() < 2)
        throw std::invalid_argument("activation_cluster_ari: fewer than two samples predicted as class " +
                                    std::to_string(cls));

    Matrix sub = take_rows(latents.latents, selected);
    std::vector<int> flags(selected.size());
    for (size_t i = 0; i < selected.size(); ++i) flags[i] = latents.poison_flags[selected[i]] ? 1 : 0;

    const size_t k = std::min<size_t>({10, sub.cols, sub.rows - 1});
    Matrix reduced = k < sub.cols ? pca_fit(sub, k).project(sub) : sub;

    KMeansResult km = kmeans(reduced, 2, derive_seed(seed, 0xC10), 10);

    ClusterReport report;
    report.n_samples = selected.size();
    report.n_flagged = static_cast<size_t>(std::count(flags.begin(), flags.end(), 1));
    report.cluster_assignment = km.assignment;
    report.ari = adjusted_rand_index(km.assignment, flags);
    return report;
}

double strip_entropy(const ClassifierModel& model, const std::vector<double>& x, const Matrix& overlay_set,
                     size_t n) {
    if (n < 1) throw std::invalid_argument("strip_entropy: need at least one overlay");
    if (overlay_set.rows == 0) throw std::invalid_argument("strip_entropy: empty overlay set");
    if (x.size() != overlay_set.cols || x.size() != model.input_dim())
        throw std::invalid_argument("strip_entropy: width mismatch");

    Matrix blends(n, x.size());
    for (size_t i = 0; i < n; ++i) {
        const double* o = overlay_set.row(i % overlay_set.rows);
        double* dst = blends.row(i);
        for (size_t j = 0; j < x.size(); ++j) dst[j] = std::clamp(0.5 * x[j] + 0.5 * o[j], 0.0, 1.0);
    }
    const Matrix probs = softmax_rows(forward(model, blends).logits);
    double entropy = 0.0;
    for (size_t i = 0; i < probs.rows; ++i) {
        const double* p = probs.row(i);
        for (size_t j = 0; j < probs.cols; ++j)
            if (p[j] > 0.0) entropy -= p[j] * std::log(p[j]);
    }
    entropy /= static_cast<double>(n);
    return entropy / std::log(static_cast<double>(model.num_classes));
}

std::vector<PruneCurvePoint> fine_prune(const ClassifierModel& model, const LabeledImageDataset& clean_eval,
                                        const Matrix& poisoned_images, int target_class, size_t prune_steps) {
    model.validate();
    if (model.encoder_depth < 1) throw std::invalid_argument("fine_prune: model has no hidden layer");
    if (prune_steps > model.latent_dim)
        throw std::invalid_argument("fine_prune: prune_steps exceeds penultimate width " +
                                    std::to_string(model.latent_dim));

    // rank penultimate neurons by mean activation on clean data, ascending
    Matrix latents = encode(model, clean_eval.images);
    std::vector<double> mean_act(model.latent_dim, 0.0);
    for (size_t i = 0; i < latents.rows; ++i) {
        const double* row = latents.row(i);
        for (size_t j = 0; j < latents.cols; ++j) mean_act[j] += row[j];
    }
    for (double& v : mean_act) v /= static_cast<double>(latents.rows);
    std::vector<size_t> order(model.latent_dim);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return mean_act[a] < mean_act[b]; });

    auto eval_point = [&](const ClassifierModel& m, size_t pruned) {
        PruneCurvePoint pt;
        pt.pruned = pruned;
        pt.clean_accuracy = accuracy(m, clean_eval);
        if (poisoned_images.rows > 0) {
            const auto preds = predict(m, poisoned_images);
            size_t hits = 0;
            for (int p : preds)
                if (p == target_class) ++hits;
            pt.attack_success_rate = static_cast<double>(hits) / static_cast<double>(preds.size());
        }
        return pt;
    };

    std::vector<PruneCurvePoint> curve;
    curve.reserve(prune_steps + 1);
    ClassifierModel pruned = model;
    curve.push_back(eval_point(pruned, 0));
    for (size_t s = 0; s < prune_steps; ++s) {
        const size_t unit = order[s];
        Layer& penult = pruned.layers[pruned.encoder_depth - 1];
        double* wrow = penult.weight.row(unit);
        std::fill(wrow, wrow + penult.weight.cols, 0.0);
        penult.bias[unit] = 0.0;
        Layer& head = pruned.head();
        for (size_t r = 0; r < head.weight.rows; ++r) head.weight.at(r, unit) = 0.0;
        curve.push_back(eval_point(pruned, s + 1));
    }
    return curve;
}

std::vector<double> mad_anomaly_index(const std::vector<double>& values) {
    const double med = median(values);
    std::vector<double> dev(values.size());
    for (size_t i = 0; i < values.size(); ++i) dev[i] = std::abs(values[i] - med);
    const double mad = median(dev);
    const double denom = 1.4826 * mad;
    std::vector<double> index(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        if (dev[i] < 1e-12)
            index[i] = 0.0;
        else
            index[i] = dev[i] / std::max(denom, 1e-12);
    }
    return index;
}

NeuralCleanseReport neural_cleanse(const ClassifierModel& model, const Matrix& sample_set,
                                   const NeuralCleanseConfig& config) {
    model.validate();
    if (sample_set.rows == 0) throw std::invalid_argument("neural_cleanse: empty sample set");
    if (sample_set.cols != model.input_dim()) throw std::invalid_argument("neural_cleanse: width mismatch");

    const size_t dim = sample_set.cols;
    const size_t n = sample_set.rows;
    NeuralCleanseReport report;
    report.l1_norms.resize(model.num_classes);
    report.converged.assign(model.num_classes, 1);

    for (size_t target = 0; target < model.num_classes; ++target) {
        std::vector<double> mask(dim, 0.5), pattern(dim, 0.5);
        std::vector<int> labels(n, static_cast<int>(target));
        double best_loss = std::numeric_limits<double>::infinity();
        std::vector<double> best_mask = mask;

        for (size_t it = 0; it < config.iters_per_class; ++it) {
            Matrix blended(n, dim);
            for (size_t i = 0; i < n; ++i) {
                const double* x = sample_set.row(i);
                double* b = blended.row(i);
                for (size_t j = 0; j < dim; ++j) b[j] = (1.0 - mask[j]) * x[j] + mask[j] * pattern[j];
            }
            Gradients grads = backward(model, blended, labels);
            double l1 = 0.0;
            for (double v : mask) l1 += v;
            const double loss = grads.loss + config.lambda_l1 * l1;
            if (!std::isfinite(loss)) {
                report.converged[target] = 0;
                break;
            }
            if (loss < best_loss) {
                best_loss = loss;
                best_mask = mask;
            }

            // input gradients carry the mean-CE scaling; chain onto mask and pattern
            std::vector<double> dmask(dim, config.lambda_l1), dpattern(dim, 0.0);
            for (size_t i = 0; i < n; ++i) {
                const double* g = grads.input.row(i);
                const double* x = sample_set.row(i);
                for (size_t j = 0; j < dim; ++j) {
                    dmask[j] += g[j] * (pattern[j] - x[j]);
                    dpattern[j] += g[j] * mask[j];
                }
            }
            for (size_t j = 0; j < dim; ++j) {
                mask[j] = std::clamp(mask[j] - config.learning_rate * dmask[j], 0.0, 1.0);
                pattern[j] = std::clamp(pattern[j] - config.learning_rate * dpattern[j], 0.0, 1.0);
            }
        }
        report.l1_norms[target] = std::accumulate(best_mask.begin(), best_mask.end(), 0.0);
    }

    report.anomaly_index = mad_anomaly_index(report.l1_norms);
    for (double idx : report.anomaly_index)
        if (idx > config.anomaly_threshold) report.flagged = true;
    return report;
}

CognitiveDistillationReport cognitive_distillation(const ClassifierModel& model, const Matrix& samples,
                                                   const CognitiveDistillationConfig& config) {
    model.validate();
    if (samples.rows == 0) throw std::invalid_argument("cognitive_distillation: empty sample set");
    if (samples.cols != model.input_dim()) throw std::invalid_argument("cognitive_distillation: width mismatch");
    for (double p : samples.data)
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument("cognitive_distillation: sample pixels outside [0,1]");

    const size_t dim = samples.cols;
    CognitiveDistillationReport report;
    report.l1_norms.resize(samples.rows);
    report.converged.assign(samples.rows, 1);

    for (size_t s = 0; s < samples.rows; ++s) {
        const double* x = samples.row(s);
        Matrix single(1, dim);
        std::copy(x, x + dim, single.row(0));
        const Matrix f_ref = forward(model, single).logits;

        std::vector<double> mask(dim, 1.0);
        std::vector<double> best_mask = mask;
        double best_loss = std::numeric_limits<double>::infinity();
        Rng noise_rng(derive_seed(config.seed, s));

        for (size_t it = 0; it < config.iters; ++it) {
            Matrix blended(1, dim);
            std::vector<double> noise(dim);
            double* b = blended.row(0);
            for (size_t j = 0; j < dim; ++j) {
                noise[j] = noise_rng.uniform();
                b[j] = x[j] * mask[j] + (1.0 - mask[j]) * noise[j];
            }

            ForwardPass pass = forward_cache(model, blended, model.layers.size());
            const Matrix& logits = pass.activations.back();
            double data_loss = 0.0;
            Matrix dout(1, logits.cols);
            for (size_t j = 0; j < logits.cols; ++j) {
                const double diff = logits.at(0, j) - f_ref.at(0, j);
                data_loss += diff * diff;
                dout.at(0, j) = 2.0 * diff;
            }
            double l1 = 0.0;
            for (double v : mask) l1 += v;
            const double loss = data_loss + config.alpha_l1 * l1;
            if (!std::isfinite(loss)) {
                report.converged[s] = 0;
                break;
            }
            if (loss < best_loss) {
                best_loss = loss;
                best_mask = mask;
            }

            Matrix input_grad = backward_through(model, blended, pass, dout, model.layers.size(), nullptr);
            const double* g = input_grad.row(0);
            for (size_t j = 0; j < dim; ++j) {
                const double dm = g[j] * (x[j] - noise[j]) + config.alpha_l1;
                mask[j] = std::clamp(mask[j] - config.learning_rate * dm, 0.0, 1.0);
            }
        }
        report.l1_norms[s] = std::accumulate(best_mask.begin(), best_mask.end(), 0.0);
    }
    return report;
}

} // namespace mml
