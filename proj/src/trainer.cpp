#include "mml/trainer.hpp"

#include "mml/rng.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mml {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be nonnegative");
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
}

namespace {

size_t count_hits(const ClassifierModel& model, const Matrix& inputs, const std::vector<int>& labels) {
    const auto preds = predict(model, inputs);
    size_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++hits;
    return hits;
}

} // namespace

void train_on(ClassifierModel& model, const Matrix& inputs, const std::vector<int>& labels,
              const TrainConfig& config, size_t first_layer) {
    config.validate();
    model.validate();
    if (inputs.rows == 0) throw std::invalid_argument("train: empty dataset");
    if (inputs.rows != labels.size()) throw std::invalid_argument("train: label count mismatch");
    for (int l : labels)
        if (l < 0 || static_cast<size_t>(l) >= model.num_classes)
            throw std::invalid_argument("train: label out of range");
    ensure_finite(inputs, "train inputs");
    if (config.epochs == 0) return;

    std::vector<Matrix> vel_w(model.layers.size());
    std::vector<std::vector<double>> vel_b(model.layers.size());
    for (size_t li = first_layer; li < model.layers.size(); ++li) {
        vel_w[li] = Matrix(model.layers[li].weight.rows, model.layers[li].weight.cols);
        vel_b[li].assign(model.layers[li].bias.size(), 0.0);
    }

    std::vector<size_t> order(inputs.rows);
    std::iota(order.begin(), order.end(), 0);

    Rng shuffle_rng(derive_seed(config.seed, 0xDA7A));
    double lr = config.learning_rate;
    double best_acc = -1.0;
    size_t epochs_since_improvement = 0;

    for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            const size_t end = std::min(start + config.batch_size, order.size());
            std::vector<size_t> idx(order.begin() + start, order.begin() + end);
            Matrix batch = take_rows(inputs, idx);
            std::vector<int> batch_labels(idx.size());
            for (size_t i = 0; i < idx.size(); ++i) batch_labels[i] = labels[idx[i]];

            Gradients grads = backward(model, batch, batch_labels);
            if (!std::isfinite(grads.loss))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                         ", batch offset " + std::to_string(start) +
                                         " (lr=" + std::to_string(lr) + ")");

            for (size_t li = first_layer; li < model.layers.size(); ++li) {
                Layer& layer = model.layers[li];
                const LayerGrads& g = grads.layers[li];
                for (size_t k = 0; k < layer.weight.size(); ++k) {
                    const double grad = g.weight.data[k] + config.weight_decay * layer.weight.data[k];
                    vel_w[li].data[k] = config.momentum * vel_w[li].data[k] - lr * grad;
                    layer.weight.data[k] += vel_w[li].data[k];
                }
                for (size_t k = 0; k < layer.bias.size(); ++k) {
                    const double grad = g.bias[k] + config.weight_decay * layer.bias[k];
                    vel_b[li][k] = config.momentum * vel_b[li][k] - lr * grad;
                    layer.bias[k] += vel_b[li][k];
                }
            }
        }

        const double acc =
            static_cast<double>(count_hits(model, inputs, labels)) / static_cast<double>(inputs.rows);
        if (acc > best_acc) {
            best_acc = acc;
            epochs_since_improvement = 0;
        } else if (++epochs_since_improvement >= config.lr_halving_patience) {
            lr *= 0.5;
            epochs_since_improvement = 0;
        }
    }
}

void train_model(ClassifierModel& model, const LabeledImageDataset& data, const TrainConfig& config,
                 size_t first_layer) {
    model.validate();
    if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
    data.validate(static_cast<int>(model.num_classes));
    train_on(model, data.images, data.labels, config, first_layer);
}

ClassifierModel train_classifier(const LabeledImageDataset& data, const ArchSpec& arch, const TrainConfig& config) {
    ClassifierModel model = make_model(arch, config.seed);
    train_model(model, data, config);
    return model;
}

} // namespace mml
