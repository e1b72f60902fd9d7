#pragma once

#include "mml/matrix.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mml {

// Labeled images, one flattened image per row, pixels in [0,1].
struct LabeledImageDataset {
    Matrix images;
    std::vector<int> labels;

    size_t size() const { return images.rows; }

    void validate(int num_classes) const {
        if (images.rows != labels.size())
            throw std::invalid_argument("dataset: image count does not match label count");
        for (int l : labels)
            if (l < 0 || l >= num_classes)
                throw std::invalid_argument("dataset: label out of range");
        for (double p : images.data)
            if (!(p >= 0.0 && p <= 1.0))
                throw std::invalid_argument("dataset: pixel outside [0,1]");
    }
};

// Latent codes with class labels and per-row poison flags.
struct LatentDataset {
    Matrix latents;
    std::vector<int> labels;
    std::vector<uint8_t> poison_flags;

    size_t size() const { return latents.rows; }
    size_t dim() const { return latents.cols; }
};

} // namespace mml
