#pragma once

#include "mml/classifier.hpp"
#include "mml/dataset.hpp"
#include "mml/modemix.hpp"
#include "mml/trainer.hpp"

#include <cstdint>

namespace mml {

struct SurgeryConfig {
    int target_class = 0;
    double replace_fraction = 1.0;
    TrainConfig head_train = head_train_defaults();
    uint64_t seed = 1;

    static TrainConfig head_train_defaults() {
        TrainConfig t;
        t.learning_rate = 0.01;  // warm start from the pretrained head
        t.epochs = 50;
        return t;
    }
};

// D_fp: the clean feature dataset with a slice of target-class rows swapped
// for M1 mixture latents labeled as the target class.
struct PoisonedFeatureDataset {
    Matrix latents;
    std::vector<int> labels;
    std::vector<uint8_t> implanted_flags;
    size_t requested_replacements = 0;
    size_t implanted_count = 0;
    bool truncated = false;  // fewer M1 entries than requested replacements

    size_t size() const { return latents.rows; }
};

PoisonedFeatureDataset build_poisoned_features(const LatentDataset& df, const ModeMixtureSet& m1,
                                               const SurgeryConfig& config);

// Retrains only the final layer on dfp. The returned model's encoder
// parameters are bit-identical to the input model's.
ClassifierModel retrain_head(const ClassifierModel& model, const PoisonedFeatureDataset& dfp,
                             const SurgeryConfig& config);

struct AttackReport {
    double clean_accuracy = 0.0;
    double attack_success_rate = 0.0;
    size_t n_clean = 0;
    size_t n_poisoned = 0;
};

struct PatchSpec {
    size_t image_height = 28;
    size_t image_width = 28;
    size_t patch_size = 4;       // white square stamped at the top-left corner
    double poison_fraction = 0.1;
    double value = 1.0;
};

// Corner-patch trigger with head-only retraining: the comparison baseline for
// attacks restricted to the same attackable-parameter budget.
std::pair<ClassifierModel, AttackReport> baseline_patch_head_attack(const ClassifierModel& model,
                                                                    const LabeledImageDataset& train,
                                                                    const LabeledImageDataset& test,
                                                                    int target_class, const PatchSpec& patch,
                                                                    const TrainConfig& head_train, uint64_t seed);

Matrix stamp_patch(const Matrix& images, const PatchSpec& patch);

} // namespace mml
