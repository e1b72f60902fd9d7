#pragma once

#include "mml/dataset.hpp"

#include <string>

namespace mml {

// Big-endian IDX ingestion: image magic 2051, label magic 2049, pixels
// scaled to [0,1] by /255.
LabeledImageDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Writers for the same format (used to persist synthetic fixtures).
void write_idx_images(const std::string& path, const Matrix& images, size_t rows, size_t cols);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

} // namespace mml
