#pragma once

#include "mml/classifier.hpp"
#include "mml/dataset.hpp"

#include <cstdint>

namespace mml {

struct TrainConfig {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    size_t epochs = 30;
    size_t batch_size = 64;
    size_t lr_halving_patience = 10;
    uint64_t seed = 1;

    void validate() const;
};

// Mini-batch SGD with momentum and weight decay, training layers
// [first_layer, end) in place. The learning rate is halved whenever
// training-set accuracy fails to improve for lr_halving_patience epochs.
// Inputs may be any finite values (pixels or latent codes).
void train_on(ClassifierModel& model, const Matrix& inputs, const std::vector<int>& labels,
              const TrainConfig& config, size_t first_layer = 0);

void train_model(ClassifierModel& model, const LabeledImageDataset& data, const TrainConfig& config,
                 size_t first_layer = 0);

ClassifierModel train_classifier(const LabeledImageDataset& data, const ArchSpec& arch, const TrainConfig& config);

} // namespace mml
