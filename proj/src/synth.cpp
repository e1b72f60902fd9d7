#include "mml/synth.hpp"

#include "mml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mml {

namespace {

Matrix blob_centers(size_t classes, size_t dim, double separation, uint64_t seed) {
    Matrix centers(classes, dim);
    Rng rng(derive_seed(seed, 0xCE17E5));
    for (double& v : centers.data) v = rng.normal();
    if (classes >= 2) {
        double min_dist = std::numeric_limits<double>::infinity();
        for (size_t a = 0; a < classes; ++a)
            for (size_t b = a + 1; b < classes; ++b)
                min_dist = std::min(min_dist, std::sqrt(squared_distance(centers.row(a), centers.row(b), dim)));
        const double scale = min_dist > 0.0 ? separation / min_dist : 0.0;
        for (double& v : centers.data) v *= scale;
    } else {
        for (double& v : centers.data) v = 0.0;
    }
    return centers;
}

void fill_blobs(Matrix& out, std::vector<int>& labels, const Matrix& centers, size_t per_class, uint64_t seed,
                uint64_t stream) {
    const size_t classes = centers.rows;
    const size_t dim = centers.cols;
    for (size_t c = 0; c < classes; ++c) {
        Rng rng(derive_seed(seed, 0xB10B + stream, c));
        for (size_t i = 0; i < per_class; ++i) {
            const size_t row = c * per_class + i;
            double* dst = out.row(row);
            const double* ctr = centers.row(c);
            for (size_t j = 0; j < dim; ++j) dst[j] = ctr[j] + rng.normal();
            labels[row] = static_cast<int>(c);
        }
    }
}

} // namespace

LabeledImageDataset synth_blobs(size_t classes, size_t per_class, size_t dim, double separation, uint64_t seed,
                                bool clamp_image, uint64_t stream) {
    if (classes < 1) throw std::invalid_argument("synth_blobs: need at least one class");
    Matrix centers = blob_centers(classes, dim, separation, seed);
    LabeledImageDataset data;
    data.images = Matrix(classes * per_class, dim);
    data.labels.resize(classes * per_class);
    fill_blobs(data.images, data.labels, centers, per_class, seed, stream);
    if (clamp_image)
        for (double& v : data.images.data) v = std::clamp(v, 0.0, 1.0);
    return data;
}

LatentDataset synth_blob_latents(size_t classes, size_t per_class, size_t dim, double separation, uint64_t seed,
                                 uint64_t stream) {
    if (classes < 1) throw std::invalid_argument("synth_blobs: need at least one class");
    Matrix centers = blob_centers(classes, dim, separation, seed);
    LatentDataset data;
    data.latents = Matrix(classes * per_class, dim);
    data.labels.resize(classes * per_class);
    fill_blobs(data.latents, data.labels, centers, per_class, seed, stream);
    data.poison_flags.assign(data.size(), 0);
    return data;
}

namespace {

// 5x7 digit glyphs, one bit per cell
constexpr uint8_t kGlyphs[10][7] = {
    {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
};

double glyph_sample(int digit, double gx, double gy) {
    // bilinear sample of the 5x7 bitmap; outside the box reads as 0
    const int x0 = static_cast<int>(std::floor(gx));
    const int y0 = static_cast<int>(std::floor(gy));
    auto cell = [&](int x, int y) -> double {
        if (x < 0 || x >= 5 || y < 0 || y >= 7) return 0.0;
        return (kGlyphs[digit][y] >> (4 - x)) & 1 ? 1.0 : 0.0;
    };
    const double fx = gx - x0;
    const double fy = gy - y0;
    return cell(x0, y0) * (1 - fx) * (1 - fy) + cell(x0 + 1, y0) * fx * (1 - fy) +
           cell(x0, y0 + 1) * (1 - fx) * fy + cell(x0 + 1, y0 + 1) * fx * fy;
}

} // namespace

LabeledImageDataset synth_digits(size_t count, uint64_t seed, double jitter, double contrast_lo,
                                 double contrast_hi) {
    if (jitter < 0.0 || jitter > 1.0) throw std::invalid_argument("synth_digits: jitter must be in [0,1]");
    if (!(contrast_lo > 0.0 && contrast_hi <= 1.0 && contrast_lo <= contrast_hi))
        throw std::invalid_argument("synth_digits: contrast range must satisfy 0 < lo <= hi <= 1");

    constexpr size_t kSide = 28;
    LabeledImageDataset data;
    data.images = Matrix(count, kSide * kSide);
    data.labels.resize(count);

    const double j = jitter;
    std::vector<double> canvas(kSide * kSide);
    std::vector<double> blurred(kSide * kSide);
    for (size_t i = 0; i < count; ++i) {
        const int digit = static_cast<int>(i % 10);
        data.labels[i] = digit;
        Rng rng(derive_seed(seed, 0xD161, i));

        const double scale = rng.uniform(2.7 - 0.6 * j, 3.3 + 0.5 * j);
        const double aspect = rng.uniform(1.0 - 0.05 - 0.22 * j, 1.0 + 0.05 + 0.25 * j);
        const double angle = rng.uniform(-0.06 - 0.3 * j, 0.06 + 0.3 * j);
        const double shear = rng.uniform(-0.32 * j, 0.32 * j);
        const double dx = rng.uniform(-1.0 - 2.6 * j, 1.0 + 2.6 * j);
        const double dy = rng.uniform(-1.0 - 2.6 * j, 1.0 + 2.6 * j);
        const double intensity = rng.uniform(contrast_lo, contrast_hi);
        // soft threshold on the sampled glyph varies apparent stroke width
        const double stroke_lo = rng.uniform(0.02 + 0.08 * j, 0.18 + 0.18 * j);
        const double stroke_hi = stroke_lo + rng.uniform(0.25, 0.55);
        // smooth coordinate wobble stands in for handwriting curvature
        const double wob_ax = rng.uniform(0.0, 0.5 * j);
        const double wob_ay = rng.uniform(0.0, 0.5 * j);
        const double wob_fx = rng.uniform(0.25, 0.75);
        const double wob_fy = rng.uniform(0.25, 0.75);
        const double wob_px = rng.uniform(0.0, 2.0 * M_PI);
        const double wob_py = rng.uniform(0.0, 2.0 * M_PI);
        const double ca = std::cos(-angle), sa = std::sin(-angle);

        for (size_t r = 0; r < kSide; ++r) {
            for (size_t c = 0; c < kSide; ++c) {
                const double px = static_cast<double>(c) - 13.5 - dx;
                const double py = static_cast<double>(r) - 13.5 - dy;
                const double rx = ca * px - sa * py + shear * py;
                const double ry = sa * px + ca * py;
                const double gx = rx / (scale * aspect) + 2.0 + wob_ax * std::sin(wob_fx * ry + wob_px);
                const double gy = ry / scale + 3.0 + wob_ay * std::sin(wob_fy * rx + wob_py);
                const double raw = glyph_sample(digit, gx, gy);
                const double toned = std::clamp((raw - stroke_lo) / (stroke_hi - stroke_lo), 0.0, 1.0);
                canvas[r * kSide + c] = intensity * toned;
            }
        }

        // 3x3 binomial blur
        for (size_t r = 0; r < kSide; ++r) {
            for (size_t c = 0; c < kSide; ++c) {
                double acc = 0.0;
                static constexpr double kernel[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
                for (int kr = -1; kr <= 1; ++kr)
                    for (int kc = -1; kc <= 1; ++kc) {
                        const long rr = static_cast<long>(r) + kr;
                        const long cc = static_cast<long>(c) + kc;
                        if (rr < 0 || rr >= static_cast<long>(kSide) || cc < 0 || cc >= static_cast<long>(kSide))
                            continue;
                        acc += kernel[kr + 1][kc + 1] * canvas[rr * kSide + cc];
                    }
                blurred[r * kSide + c] = acc / 16.0;
            }
        }

        double* out = data.images.row(i);
        for (size_t p = 0; p < kSide * kSide; ++p) {
            double noisy = blurred[p] + rng.normal(0.0, 0.015);
            // occasional speckle, mimicking scanning artifacts
            if (rng.uniform() < 0.002) noisy += rng.uniform(0.3, 0.9);
            // quantize to 8-bit levels so IDX round trips are exact
            out[p] = std::round(std::clamp(noisy, 0.0, 1.0) * 255.0) / 255.0;
        }
    }
    return data;
}

} // namespace mml
