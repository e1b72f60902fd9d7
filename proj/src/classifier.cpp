#include "mml/classifier.hpp"

#include "mml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mml {

size_t ClassifierModel::parameter_count() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

void ClassifierModel::validate() const {
    if (layers.empty()) throw std::invalid_argument("model: no layers");
    if (encoder_depth + 1 != layers.size())
        throw std::invalid_argument("model: expected exactly one head layer after the encoder");
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.bias.size() != l.out_dim())
            throw std::invalid_argument("model: bias width does not match layer output");
        if (i > 0 && layers[i - 1].out_dim() != l.in_dim())
            throw std::invalid_argument("model: consecutive layer dimensions do not compose");
    }
    if (head().activation != Activation::Identity)
        throw std::invalid_argument("model: head activation must be identity");
    const size_t penult = encoder_depth == 0 ? head().in_dim() : layers[encoder_depth - 1].out_dim();
    if (latent_dim != penult) throw std::invalid_argument("model: latent_dim does not match encoder output");
    if (num_classes != head().out_dim())
        throw std::invalid_argument("model: num_classes does not match head output");
}

std::vector<double> ClassifierModel::flatten_parameters(size_t first, size_t last) const {
    std::vector<double> out;
    for (size_t i = first; i < last && i < layers.size(); ++i) {
        out.insert(out.end(), layers[i].weight.data.begin(), layers[i].weight.data.end());
        out.insert(out.end(), layers[i].bias.begin(), layers[i].bias.end());
    }
    return out;
}

ClassifierModel make_model(const ArchSpec& arch, uint64_t seed) {
    if (arch.widths.size() < 2) throw std::invalid_argument("make_model: need at least input and output widths");
    ClassifierModel m;
    const size_t n_layers = arch.widths.size() - 1;
    for (size_t i = 0; i < n_layers; ++i) {
        Layer l;
        const size_t fan_in = arch.widths[i];
        const size_t fan_out = arch.widths[i + 1];
        l.weight = Matrix(fan_out, fan_in);
        l.bias.assign(fan_out, 0.0);
        l.activation = (i + 1 == n_layers) ? Activation::Identity : Activation::Relu;
        // Xavier-uniform, one stream per layer
        Rng rng(derive_seed(seed, 0x100 + i));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (double& w : l.weight.data) w = rng.uniform(-bound, bound);
        m.layers.push_back(std::move(l));
    }
    m.encoder_depth = n_layers - 1;
    m.latent_dim = arch.widths[n_layers - 1];
    m.num_classes = arch.widths.back();
    m.validate();
    return m;
}

static Matrix apply_layer(const Layer& l, const Matrix& in) {
    Matrix out = matmul_abt(in, l.weight);
    add_row_inplace(out, l.bias);
    if (l.activation == Activation::Relu)
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

ForwardPass forward_cache(const ClassifierModel& model, const Matrix& batch, size_t upto) {
    if (batch.cols != model.input_dim())
        throw std::invalid_argument("forward: batch width " + std::to_string(batch.cols) +
                                    " does not match model input " + std::to_string(model.input_dim()));
    ForwardPass pass;
    pass.activations.reserve(upto);
    const Matrix* cur = &batch;
    for (size_t i = 0; i < upto; ++i) {
        pass.activations.push_back(apply_layer(model.layers[i], *cur));
        cur = &pass.activations.back();
    }
    return pass;
}

ForwardResult forward(const ClassifierModel& model, const Matrix& batch) {
    ForwardPass pass = forward_cache(model, batch, model.layers.size());
    ForwardResult r;
    r.logits = std::move(pass.activations.back());
    r.latents = model.encoder_depth == 0 ? batch : std::move(pass.activations[model.encoder_depth - 1]);
    ensure_finite(r.logits, "forward logits");
    return r;
}

Matrix encode(const ClassifierModel& model, const Matrix& batch) {
    if (model.encoder_depth == 0) return batch;
    ForwardPass pass = forward_cache(model, batch, model.encoder_depth);
    return std::move(pass.activations.back());
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows, logits.cols);
    for (size_t i = 0; i < logits.rows; ++i) {
        const double* in = logits.row(i);
        double* out = p.row(i);
        double mx = in[0];
        for (size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (size_t j = 0; j < logits.cols; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (size_t j = 0; j < logits.cols; ++j) out[j] /= sum;
    }
    return p;
}

std::vector<int> predict(const ClassifierModel& model, const Matrix& batch) {
    const Matrix logits = forward(model, batch).logits;
    std::vector<int> out(logits.rows);
    for (size_t i = 0; i < logits.rows; ++i) {
        const double* row = logits.row(i);
        size_t best = 0;
        for (size_t j = 1; j < logits.cols; ++j)
            if (row[j] > row[best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const ClassifierModel& model, const LabeledImageDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    const auto preds = predict(model, data.images);
    size_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == data.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    if (logits.rows != labels.size()) throw std::invalid_argument("cross_entropy: label count mismatch");
    double loss = 0.0;
    for (size_t i = 0; i < logits.rows; ++i) {
        const double* row = logits.row(i);
        double mx = row[0];
        for (size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (size_t j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
        loss += std::log(sum) - (row[labels[i]] - mx);
    }
    return loss / static_cast<double>(logits.rows);
}

Matrix backward_through(const ClassifierModel& model, const Matrix& batch, const ForwardPass& pass,
                        const Matrix& output_grad, size_t upto, std::vector<LayerGrads>* param_grads) {
    if (upto == 0 || upto > pass.activations.size())
        throw std::invalid_argument("backward_through: invalid layer range");
    if (param_grads) param_grads->resize(upto);

    Matrix delta = output_grad;  // gradient w.r.t. current layer output
    for (size_t li = upto; li-- > 0;) {
        const Layer& layer = model.layers[li];
        const Matrix& out = pass.activations[li];
        if (!delta.same_shape(out)) throw std::invalid_argument("backward_through: gradient shape mismatch");

        if (layer.activation == Activation::Relu) {
            for (size_t k = 0; k < delta.size(); ++k)
                if (out.data[k] <= 0.0) delta.data[k] = 0.0;
        }
        const Matrix& input = li == 0 ? batch : pass.activations[li - 1];
        if (param_grads) {
            LayerGrads& g = (*param_grads)[li];
            g.weight = matmul_atb(delta, input);
            g.bias.assign(layer.out_dim(), 0.0);
            for (size_t i = 0; i < delta.rows; ++i) {
                const double* row = delta.row(i);
                for (size_t j = 0; j < delta.cols; ++j) g.bias[j] += row[j];
            }
        }
        delta = matmul(delta, layer.weight);
    }
    return delta;
}

Gradients backward(const ClassifierModel& model, const Matrix& batch, const std::vector<int>& labels) {
    for (int l : labels)
        if (l < 0 || static_cast<size_t>(l) >= model.num_classes)
            throw std::invalid_argument("backward: label out of range");

    ForwardPass pass = forward_cache(model, batch, model.layers.size());
    const Matrix& logits = pass.activations.back();

    Gradients grads;
    grads.loss = cross_entropy(logits, labels);

    // d(mean CE)/dlogits = (softmax - onehot) / N
    Matrix dlogits = softmax_rows(logits);
    const double inv_n = 1.0 / static_cast<double>(batch.rows);
    for (size_t i = 0; i < dlogits.rows; ++i) {
        double* row = dlogits.row(i);
        row[labels[i]] -= 1.0;
        for (size_t j = 0; j < dlogits.cols; ++j) row[j] *= inv_n;
    }

    grads.input = backward_through(model, batch, pass, dlogits, model.layers.size(), &grads.layers);
    return grads;
}

LatentDataset extract_latents(const ClassifierModel& model, const LabeledImageDataset& data) {
    if (data.images.rows != data.labels.size())
        throw std::invalid_argument("extract_latents: image count does not match label count");
    LatentDataset out;
    if (data.size() == 0) {
        out.latents = Matrix(0, model.latent_dim);
        return out;
    }
    out.latents = encode(model, data.images);
    ensure_finite(out.latents, "extract_latents");
    out.labels = data.labels;
    out.poison_flags.assign(data.size(), 0);
    return out;
}

} // namespace mml
