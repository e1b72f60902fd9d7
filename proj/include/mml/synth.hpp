#pragma once

#include "mml/dataset.hpp"

#include <cstdint>

namespace mml {

// Gaussian blobs with unit covariance at seeded class centers, rescaled so
// the closest pair of centers sits `separation` apart. Image mode clamps
// values to [0,1]. `stream` selects an independent draw around the same
// centers (train vs test splits).
LabeledImageDataset synth_blobs(size_t classes, size_t per_class, size_t dim, double separation, uint64_t seed,
                                bool clamp_image = true, uint64_t stream = 0);

LatentDataset synth_blob_latents(size_t classes, size_t per_class, size_t dim, double separation, uint64_t seed,
                                 uint64_t stream = 0);

// Procedurally rendered 28x28 handwritten-style digits (10 classes): a 5x7
// glyph font under seeded warp, shear, stroke-width and placement jitter,
// blur, and light pixel noise, quantized to 8-bit levels so in-memory data
// and an IDX round trip agree exactly. `jitter` in [0,1] scales the
// geometric variation; the stroke intensity is drawn from
// [contrast_lo, contrast_hi].
LabeledImageDataset synth_digits(size_t count, uint64_t seed, double jitter = 0.7, double contrast_lo = 0.28,
                                 double contrast_hi = 0.33);

} // namespace mml
