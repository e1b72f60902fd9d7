#pragma once

#include "mml/classifier.hpp"
#include "mml/dataset.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mml {

struct AuditReport {
    size_t total_params = 0;
    size_t affected_params = 0;
    double share_le_1e2 = 0.0;  // affected params whose fluctuation is <= 1e2
    double share_gt_1e2 = 0.0;
    std::vector<size_t> per_layer_affected;
};

// Elementwise parameter comparison between a clean and a suspect model.
// fluctuation = |theta_suspect - theta_clean| / |theta_clean| * 100; params
// with near-zero clean value but a real delta land in the > 1e2 bucket.
AuditReport parameter_audit(const ClassifierModel& clean, const ClassifierModel& suspect, double tau = 1e-8);

struct ClusterReport {
    double ari = 0.0;
    size_t n_samples = 0;
    size_t n_flagged = 0;
    std::vector<int> cluster_assignment;
};

// Activation-clustering defense on samples predicted as `cls`: PCA to 10
// dims, 2-means, ARI against the poison flags.
ClusterReport activation_cluster_ari(const LatentDataset& latents, const std::vector<int>& predicted_labels,
                                     int cls, uint64_t seed);

// Normalized prediction entropy of x blended with clean overlays.
double strip_entropy(const ClassifierModel& model, const std::vector<double>& x, const Matrix& overlay_set,
                     size_t n);

struct PruneCurvePoint {
    size_t pruned = 0;
    double clean_accuracy = 0.0;
    double attack_success_rate = 0.0;
};

// Cumulatively zeroes the least-active penultimate-layer neurons (weight row,
// bias, and outgoing head column) and records both accuracies after each cut.
std::vector<PruneCurvePoint> fine_prune(const ClassifierModel& model, const LabeledImageDataset& clean_eval,
                                        const Matrix& poisoned_images, int target_class, size_t prune_steps);

struct NeuralCleanseConfig {
    size_t iters_per_class = 500;
    double learning_rate = 0.1;
    double lambda_l1 = 0.01;
    double anomaly_threshold = 2.0;
};

struct NeuralCleanseReport {
    std::vector<double> l1_norms;       // reverse-engineered mask L1 per class
    std::vector<double> anomaly_index;  // MAD-normalized deviation per class
    std::vector<uint8_t> converged;
    bool flagged = false;  // any anomaly index above the threshold
};

NeuralCleanseReport neural_cleanse(const ClassifierModel& model, const Matrix& sample_set,
                                   const NeuralCleanseConfig& config);

// Anomaly indices |x - median| / (1.4826 * MAD); exposed for tests.
std::vector<double> mad_anomaly_index(const std::vector<double>& values);

struct CognitiveDistillationConfig {
    size_t iters = 100;
    double learning_rate = 0.2;
    double alpha_l1 = 0.3;
    uint64_t seed = 1;
};

struct CognitiveDistillationReport {
    std::vector<double> l1_norms;  // mask L1 per sample
    std::vector<uint8_t> converged;
};

// Per-sample minimal input mask preserving the model output against resampled
// noise fill; small masks indicate trigger-driven predictions.
CognitiveDistillationReport cognitive_distillation(const ClassifierModel& model, const Matrix& samples,
                                                   const CognitiveDistillationConfig& config);

} // namespace mml
