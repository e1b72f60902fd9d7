#pragma once

#include "mml/defend.hpp"
#include "mml/otmap.hpp"
#include "mml/poison.hpp"
#include "mml/surgery.hpp"
#include "mml/trainer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mml {

struct DatasetSpec {
    enum class Kind : uint8_t { SyntheticDigits = 0, Idx = 1, Blobs = 2 } kind = Kind::SyntheticDigits;
    // synthetic_digits
    size_t train_count = 5000;
    size_t test_count = 1000;
    double digit_jitter = 0.7;
    double digit_contrast_lo = 0.28;
    double digit_contrast_hi = 0.33;
    // idx
    std::string train_images, train_labels, test_images, test_labels;
    // blobs
    size_t classes = 10;
    size_t per_class = 500;
    size_t dim = 16;
    double separation = 6.0;

    size_t image_height = 28;
    size_t image_width = 28;
};

struct OtStageConfig {
    size_t targets_per_class = 60;
    McConfig mc;
    double tolerance = 0.0;  // <= 0 selects max(0.5/n_targets, 1e-3)
    size_t mass_center_samples = 120000;
};

struct ModemixStageConfig {
    size_t probe_count = 20000;
    double lambda_m1 = 0.25;  // weight on the target-class endpoint in M1
    double lambda_m2 = 0.5;
    AngleFilterConfig filter;
    size_t m2_per_pair = 1;
    // keep only the most-crossed pairs per non-target class, concentrating
    // the implant on a few strong singular-set crossings (0 keeps all)
    size_t pairs_per_class = 0;
    // split the M1 budget evenly across non-target classes instead of purely
    // by crossing count, so fuzzy classes are not over-implanted
    bool even_class_budget = true;
};

struct AblationStageConfig {
    bool enabled = true;
    double epsilon = 1.0;
    double step_size = 2.0 / 255.0;
    size_t max_iters = 2000;
    size_t image_count = 120;
};

struct DefendStageConfig {
    bool enabled = true;
    size_t strip_overlays = 40;
    size_t strip_clean_samples = 200;
    size_t fine_prune_steps = 0;  // 0 = all penultimate neurons
    NeuralCleanseConfig neural_cleanse;
    size_t neural_cleanse_samples = 64;
    CognitiveDistillationConfig cd;
    size_t cd_samples = 40;  // per arm, clean and poisoned
};

struct RunConfig {
    uint64_t seed = 7;
    DatasetSpec dataset;
    std::vector<size_t> arch = {784, 128, 32, 10};
    int target_class = 0;
    TrainConfig pretrain;
    OtStageConfig ot;
    ModemixStageConfig modemix;
    SurgeryConfig surgery;
    PoisonRecipe poison;
    size_t poison_eval_count = 300;
    PatchSpec baseline_patch;
    AblationStageConfig ablation;
    DefendStageConfig defend;

    void validate() const;

    // Fans the global seed out to every stage seed, syncs derived geometry,
    // and validates. Call after mutating fields programmatically.
    void finalize();
};

RunConfig default_run_config();

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);

std::string run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const std::string& text);

} // namespace mml
