#pragma once

#include "mml/classifier.hpp"
#include "mml/dataset.hpp"
#include "mml/modemix.hpp"

#include <cstdint>
#include <vector>

namespace mml {

struct PoisonRecipe {
    double epsilon = 8.0 / 255.0;    // L-infinity budget in [0,1] pixel units
    double step_size = 2.0 / 255.0;  // signed-gradient step
    size_t max_iters = 5000;
    uint64_t seed = 1;

    void validate() const;
};

struct PoisonBatch {
    Matrix originals;
    Matrix poisoned;
    Matrix assigned_targets;  // latent target per image
    std::vector<double> final_objectives;
    std::vector<double> initial_objectives;
    std::vector<double> linf_norms;
    std::vector<double> l2_norms;
    std::vector<size_t> iterations;      // PGD iterations run per image
    std::vector<uint8_t> success_flags;  // set under success-stop crafting

    size_t size() const { return originals.rows; }
};

// Greedy nearest-pair matching: repeatedly takes the globally closest
// (mixture, image) pair among the unassigned, removing both; mixtures are
// reused round by round when images outnumber them. Returns the assigned
// mixture index per image.
std::vector<size_t> greedy_pair(const Matrix& mixture_latents, const Matrix& image_latents);

// Crafts poisoned images whose latent codes approximate their assigned
// mixture targets, by projected signed-gradient descent inside the epsilon
// L-infinity ball intersected with [0,1] pixels.
PoisonBatch craft_poison(const ClassifierModel& model, const Matrix& images, const ModeMixtureSet& m2,
                         const PoisonRecipe& recipe);

// Same optimization against an explicit latent target matrix. When
// stop_at_class >= 0, an image's descent halts the moment the full model
// classifies it as that class; when stop_at_objective > 0 it halts once the
// latent objective first drops to that value. Either stop freezes the row's
// perturbation at the trigger point.
PoisonBatch craft_poison_latents(const ClassifierModel& model, const Matrix& images, const Matrix& target_latents,
                                 const PoisonRecipe& recipe, int stop_at_class = -1,
                                 double stop_at_objective = 0.0);

struct EvalReport {
    double clean_accuracy = 0.0;
    double attack_success_rate = 0.0;
    size_t n_clean = 0;
    size_t n_poisoned = 0;
};

EvalReport evaluate_attack(const ClassifierModel& model, const LabeledImageDataset& clean_test,
                           const PoisonBatch& batch, int target_class);

struct AblationResult {
    double l2_with_mixture = 0.0;  // mean L2 at attack success per arm
    double l2_without = 0.0;
    size_t successes_with = 0;
    size_t successes_without = 0;
    size_t n_images = 0;
};

// Mean L2 perturbation needed to push each image's latent code to the same
// low objective value, targeting M2 mixtures versus clean target-class
// latents, under one large-epsilon recipe. The shared threshold is
// objective_fraction of the mixture arm's mean initial objective; rows that
// never reach it are excluded from the means.
AblationResult perturbation_ablation(const ClassifierModel& model, const Matrix& images, const ModeMixtureSet& m2,
                                     const Matrix& target_latents_direct, const PoisonRecipe& recipe_unbounded,
                                     double objective_fraction = 0.1);

} // namespace mml
