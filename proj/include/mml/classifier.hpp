#pragma once

#include "mml/dataset.hpp"
#include "mml/matrix.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mml {

enum class Activation : uint8_t { Relu = 0, Identity = 1 };

struct Layer {
    Matrix weight;             // out_dim x in_dim
    std::vector<double> bias;  // out_dim
    Activation activation = Activation::Relu;

    size_t in_dim() const { return weight.cols; }
    size_t out_dim() const { return weight.rows; }
};

// Feed-forward classifier split into an encoder (layers 0..encoder_depth-1)
// and a single linear head. Latent codes are the encoder's output, i.e. the
// penultimate activations of the full network.
struct ClassifierModel {
    std::vector<Layer> layers;
    size_t encoder_depth = 0;  // layers strictly before the head
    size_t latent_dim = 0;
    size_t num_classes = 0;

    size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
    const Layer& head() const { return layers.back(); }
    Layer& head() { return layers.back(); }

    size_t parameter_count() const;
    void validate() const;

    // Parameters of layers [first, last) flattened in layer order, weights
    // then bias per layer.
    std::vector<double> flatten_parameters(size_t first, size_t last) const;
    std::vector<double> flatten_parameters() const { return flatten_parameters(0, layers.size()); }
};

// Layer widths, e.g. {784, 128, 32, 10}; every hidden layer is relu and the
// final layer is the identity-activation head.
struct ArchSpec {
    std::vector<size_t> widths;
};

ClassifierModel make_model(const ArchSpec& arch, uint64_t seed);

struct ForwardPass {
    // activations[i] is the output of layer i; activations.back() = logits
    std::vector<Matrix> activations;
};

struct ForwardResult {
    Matrix latents;
    Matrix logits;
};

// Runs layers [0, upto) and keeps every activation for backprop.
ForwardPass forward_cache(const ClassifierModel& model, const Matrix& batch, size_t upto);

ForwardResult forward(const ClassifierModel& model, const Matrix& batch);

// Encoder-only forward: the latent codes theta_e(batch).
Matrix encode(const ClassifierModel& model, const Matrix& batch);

Matrix softmax_rows(const Matrix& logits);

std::vector<int> predict(const ClassifierModel& model, const Matrix& batch);
double accuracy(const ClassifierModel& model, const LabeledImageDataset& data);

struct LayerGrads {
    Matrix weight;
    std::vector<double> bias;
};

struct Gradients {
    std::vector<LayerGrads> layers;
    Matrix input;
    double loss = 0.0;
};

// Mean cross-entropy of softmax(logits) against labels plus its gradient
// w.r.t. every parameter and the input pixels.
Gradients backward(const ClassifierModel& model, const Matrix& batch, const std::vector<int>& labels);

// Backprop an arbitrary output gradient through layers [0, upto) of `pass`.
// When `param_grads` is null only input gradients are produced.
Matrix backward_through(const ClassifierModel& model, const Matrix& batch, const ForwardPass& pass,
                        const Matrix& output_grad, size_t upto, std::vector<LayerGrads>* param_grads);

double cross_entropy(const Matrix& logits, const std::vector<int>& labels);

LatentDataset extract_latents(const ClassifierModel& model, const LabeledImageDataset& data);

} // namespace mml
