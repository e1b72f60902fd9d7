#pragma once

#include "mml/matrix.hpp"

#include <cstdint>
#include <vector>

namespace mml {

struct Pca {
    std::vector<double> mean;  // column means of the fitted data
    Matrix components;         // k x d orthonormal rows, ordered by variance
    std::vector<double> explained_variance;

    Matrix project(const Matrix& x) const;
};

// Principal components via cyclic Jacobi eigendecomposition of the covariance.
Pca pca_fit(const Matrix& x, size_t k);

struct KMeansResult {
    std::vector<int> assignment;
    Matrix centers;
    double inertia = 0.0;
};

// Seeded Lloyd iterations with `restarts` independent initializations; the
// restart with the lowest inertia wins, ties by restart index.
KMeansResult kmeans(const Matrix& x, size_t k, uint64_t seed, size_t restarts = 10, size_t max_iters = 100);

// Adjusted Rand index between two labelings of the same points.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

double median(std::vector<double> v);
double percentile(std::vector<double> v, double pct);

} // namespace mml
