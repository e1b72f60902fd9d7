#pragma once

#include "mml/matrix.hpp"

#include <cstdint>
#include <vector>

namespace mml {

// Source measure of the semi-discrete transport problem: a standard Gaussian
// on all of d-dimensional space.
struct SourceMeasure {
    size_t dim = 0;
    enum class Kind : uint8_t { StandardGaussian = 0 } kind = Kind::StandardGaussian;
};

struct McConfig {
    size_t initial_samples = 20000;
    size_t stall_patience = 30;
    double growth_factor = 2.0;
    size_t max_samples = 160000;
    double step_size = 0.5;
    size_t max_steps = 500;
    double tolerance = 0.005;  // terminate when max_i |omega_i - nu_i| < tolerance

    void validate() const;
};

struct FitTraceEntry {
    size_t step = 0;
    double grad_inf_norm = 0.0;  // max_i |omega_i - nu_i|
    size_t mc_samples = 0;
};

// Semi-discrete OT solution: the Brenier potential u_h(x) = max_i <x,y_i> + h_i
// induces cells W_i whose Gaussian masses omega_i match nu_i at the optimum.
struct OtSolution {
    SourceMeasure source;              // the measure the cells partition
    Matrix targets;                    // n x dim latent codes y_i
    std::vector<double> nu;            // target masses, sum 1
    std::vector<double> h;             // potential heights, mean-zero
    Matrix mass_centers;               // n x dim cell means in source space
    std::vector<uint8_t> empty_cells;  // 1 where no sample landed in the cell
    std::vector<double> volumes;       // estimated omega_i, sum ~1
    std::vector<FitTraceEntry> fit_trace;
    bool converged = false;
    bool centers_estimated = false;

    size_t size() const { return targets.rows; }
    size_t dim() const { return targets.cols; }
};

// argmax_i <x, y_i> + h_i; ties broken by lowest index.
size_t brenier_assign(const double* x, const OtSolution& solution);
size_t brenier_assign(const std::vector<double>& x, const OtSolution& solution);

// Gradient descent h <- h - step * (omega(h) - nu) with Monte Carlo volume
// estimates from per-step seeded Gaussian streams.
OtSolution fit_potential(const Matrix& targets, const std::vector<double>& nu, const SourceMeasure& source,
                         const McConfig& mc, uint64_t seed);

// Estimates the mu-mass center of every cell (mean of assigned samples) and
// refreshes the volume estimates from the same sample stream.
OtSolution estimate_mass_centers(OtSolution solution, size_t sample_count, uint64_t seed);

struct ExtendResult {
    std::vector<double> z;        // interpolated latent code
    std::vector<double> lambda;   // simplex weights, one per endpoint
    std::vector<size_t> indices;  // target indices of the chosen mass centers
};

// Piecewise-linear extension: maps x to an inverse-distance-weighted mixture
// of the targets of its d+1 nearest non-empty mass centers.
ExtendResult extend_map(const std::vector<double>& x, const OtSolution& solution, size_t d);

// Cell volumes via chunked Monte Carlo; exposed for tests.
std::vector<double> estimate_volumes(const Matrix& targets, const std::vector<double>& h, size_t sample_count,
                                     uint64_t seed);

} // namespace mml
