#include "mml/idx.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace mml {

namespace {

constexpr uint32_t kImageMagic = 2051;  // 0x00000803
constexpr uint32_t kLabelMagic = 2049;  // 0x00000801

uint32_t read_u32_be(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("idx: " + path + ": truncated while reading " + what);
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

void write_u32_be(std::ostream& out, uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

} // namespace

LabeledImageDataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("idx: cannot open image file " + images_path);

    const uint32_t magic = read_u32_be(img, images_path, "image magic");
    if (magic != kImageMagic)
        throw std::runtime_error("idx: " + images_path + ": bad image magic " + std::to_string(magic) +
                                 " (expected " + std::to_string(kImageMagic) + ")");
    const uint32_t count = read_u32_be(img, images_path, "image count");
    const uint32_t rows = read_u32_be(img, images_path, "row count");
    const uint32_t cols = read_u32_be(img, images_path, "column count");

    const size_t pixels = static_cast<size_t>(rows) * cols;
    std::vector<unsigned char> raw(static_cast<size_t>(count) * pixels);
    if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error("idx: " + images_path + ": truncated pixel payload (expected " +
                                 std::to_string(raw.size()) + " bytes)");

    std::ifstream lbl(labels_path, std::ios::binary);
    if (!lbl) throw std::runtime_error("idx: cannot open label file " + labels_path);
    const uint32_t lmagic = read_u32_be(lbl, labels_path, "label magic");
    if (lmagic != kLabelMagic)
        throw std::runtime_error("idx: " + labels_path + ": bad label magic " + std::to_string(lmagic) +
                                 " (expected " + std::to_string(kLabelMagic) + ")");
    const uint32_t lcount = read_u32_be(lbl, labels_path, "label count");
    if (lcount != count)
        throw std::runtime_error("idx: image count " + std::to_string(count) + " does not match label count " +
                                 std::to_string(lcount));
    std::vector<unsigned char> raw_labels(lcount);
    if (!lbl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(raw_labels.size())))
        throw std::runtime_error("idx: " + labels_path + ": truncated label payload");

    LabeledImageDataset data;
    data.images = Matrix(count, pixels);
    for (size_t i = 0; i < data.images.size(); ++i) data.images.data[i] = raw[i] / 255.0;
    data.labels.resize(lcount);
    for (size_t i = 0; i < lcount; ++i) data.labels[i] = raw_labels[i];
    return data;
}

void write_idx_images(const std::string& path, const Matrix& images, size_t rows, size_t cols) {
    if (rows * cols != images.cols) throw std::invalid_argument("idx: geometry does not match flattened width");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("idx: cannot write " + path);
    write_u32_be(out, kImageMagic);
    write_u32_be(out, static_cast<uint32_t>(images.rows));
    write_u32_be(out, static_cast<uint32_t>(rows));
    write_u32_be(out, static_cast<uint32_t>(cols));
    std::vector<unsigned char> raw(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        const double v = std::round(std::clamp(images.data[i], 0.0, 1.0) * 255.0);
        raw[i] = static_cast<unsigned char>(v);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw std::runtime_error("idx: write failed for " + path);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("idx: cannot write " + path);
    write_u32_be(out, kLabelMagic);
    write_u32_be(out, static_cast<uint32_t>(labels.size()));
    std::vector<unsigned char> raw(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] > 255) throw std::invalid_argument("idx: label outside byte range");
        raw[i] = static_cast<unsigned char>(labels[i]);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw std::runtime_error("idx: write failed for " + path);
}

} // namespace mml
