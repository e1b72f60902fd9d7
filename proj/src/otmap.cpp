#include "mml/otmap.hpp"

#include "mml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mml {

// Fixed Monte Carlo chunk size. Sample streams are seeded per (seed, chunk),
// so a chunk-parallel reduction and the serial loop produce identical sums.
static constexpr size_t kMcChunk = 4096;

void McConfig::validate() const {
    if (initial_samples < 1) throw std::invalid_argument("mc: initial_samples must be >= 1");
    if (growth_factor <= 1.0) throw std::invalid_argument("mc: growth_factor must exceed 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("mc: step_size must be positive");
    if (!(tolerance > 0.0)) throw std::invalid_argument("mc: tolerance must be positive");
    if (max_samples < initial_samples) throw std::invalid_argument("mc: max_samples below initial_samples");
}

size_t brenier_assign(const double* x, const OtSolution& solution) {
    const size_t n = solution.size();
    if (n == 0) throw std::invalid_argument("brenier_assign: empty target set");
    size_t best = 0;
    double best_score = dot(x, solution.targets.row(0), solution.dim()) + solution.h[0];
    for (size_t i = 1; i < n; ++i) {
        const double score = dot(x, solution.targets.row(i), solution.dim()) + solution.h[i];
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return best;
}

size_t brenier_assign(const std::vector<double>& x, const OtSolution& solution) {
    if (x.size() != solution.dim()) throw std::invalid_argument("brenier_assign: point dimension mismatch");
    return brenier_assign(x.data(), solution);
}

namespace {

// Score evaluator laid out for vectorization: scores[j] = <x, y_j> + h_j is
// accumulated dimension by dimension over a transposed copy of the targets,
// so the inner loops are independent fused multiply-adds across cells.
struct AssignContext {
    Matrix targets_t;  // dim x n
    std::vector<double> h;

    AssignContext(const Matrix& targets, const std::vector<double>& heights) : h(heights) {
        targets_t = Matrix(targets.cols, targets.rows);
        for (size_t i = 0; i < targets.rows; ++i)
            for (size_t k = 0; k < targets.cols; ++k) targets_t.at(k, i) = targets.at(i, k);
    }

    size_t assign(const double* x, std::vector<double>& scores) const {
        const size_t n = targets_t.cols;
        std::copy(h.begin(), h.end(), scores.begin());
        for (size_t k = 0; k < targets_t.rows; ++k) {
            const double xk = x[k];
            const double* row = targets_t.row(k);
            double* s = scores.data();
            for (size_t j = 0; j < n; ++j) s[j] += xk * row[j];
        }
        size_t best = 0;
        for (size_t j = 1; j < n; ++j)
            if (scores[j] > scores[best]) best = j;
        return best;
    }
};

struct CellStats {
    std::vector<size_t> counts;
    Matrix sums;  // n x dim accumulated coordinates
};

CellStats accumulate_cells(const Matrix& targets, const std::vector<double>& h, size_t sample_count,
                           uint64_t seed, bool want_sums) {
    const size_t dim = targets.cols;
    CellStats stats;
    stats.counts.assign(targets.rows, 0);
    if (want_sums) stats.sums = Matrix(targets.rows, dim);

    const AssignContext ctx(targets, h);
    std::vector<double> x(dim);
    std::vector<double> scores(targets.rows);
    size_t done = 0;
    for (size_t chunk = 0; done < sample_count; ++chunk) {
        const size_t batch = std::min(kMcChunk, sample_count - done);
        Rng rng(derive_seed(seed, chunk));
        for (size_t s = 0; s < batch; ++s) {
            for (size_t k = 0; k < dim; ++k) x[k] = rng.normal();
            const size_t cell = ctx.assign(x.data(), scores);
            ++stats.counts[cell];
            if (want_sums) {
                double* row = stats.sums.row(cell);
                for (size_t k = 0; k < dim; ++k) row[k] += x[k];
            }
        }
        done += batch;
    }
    return stats;
}

void check_targets_distinct(const Matrix& targets) {
    std::vector<size_t> order(targets.rows);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return std::lexicographical_compare(targets.row(a), targets.row(a) + targets.cols, targets.row(b),
                                            targets.row(b) + targets.cols);
    });
    for (size_t i = 1; i < order.size(); ++i) {
        if (std::equal(targets.row(order[i - 1]), targets.row(order[i - 1]) + targets.cols,
                       targets.row(order[i])))
            throw std::invalid_argument("fit_potential: duplicate target points (indices " +
                                        std::to_string(order[i - 1]) + ", " + std::to_string(order[i]) + ")");
    }
}

void recenter(std::vector<double>& h) {
    double mean = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
    for (double& v : h) v -= mean;
}

} // namespace

std::vector<double> estimate_volumes(const Matrix& targets, const std::vector<double>& h, size_t sample_count,
                                     uint64_t seed) {
    CellStats stats = accumulate_cells(targets, h, sample_count, seed, false);
    std::vector<double> omega(targets.rows);
    for (size_t i = 0; i < omega.size(); ++i)
        omega[i] = static_cast<double>(stats.counts[i]) / static_cast<double>(sample_count);
    return omega;
}

OtSolution fit_potential(const Matrix& targets, const std::vector<double>& nu, const SourceMeasure& source,
                         const McConfig& mc, uint64_t seed) {
    mc.validate();
    if (targets.rows == 0) throw std::invalid_argument("fit_potential: empty target set");
    if (targets.cols != source.dim) throw std::invalid_argument("fit_potential: target dim does not match source");
    if (nu.size() != targets.rows) throw std::invalid_argument("fit_potential: nu size mismatch");
    double nu_sum = 0.0;
    for (double v : nu) {
        if (!(v > 0.0)) throw std::invalid_argument("fit_potential: nu entries must be strictly positive");
        nu_sum += v;
    }
    if (std::abs(nu_sum - 1.0) > 1e-9) throw std::invalid_argument("fit_potential: nu must sum to 1");
    check_targets_distinct(targets);
    ensure_finite(targets, "fit_potential targets");

    const size_t n = targets.rows;
    OtSolution sol;
    sol.source = source;
    sol.targets = targets;
    sol.nu = nu;
    sol.h.assign(n, 0.0);
    sol.mass_centers = Matrix(n, targets.cols);
    sol.empty_cells.assign(n, 1);
    sol.volumes.assign(n, 0.0);

    size_t samples = mc.initial_samples;
    // Potential heights compete with <x, y_i> terms, so the usable step is
    // proportional to the target scale; unit-norm targets keep step_size as is.
    double norm_scale = 0.0;
    for (size_t i = 0; i < n; ++i) norm_scale += norm2(targets.row(i), targets.cols);
    norm_scale = std::max(norm_scale / static_cast<double>(n), 1e-12);
    double step = mc.step_size * norm_scale;
    const double min_step = step / 4096.0;

    double best_dev = std::numeric_limits<double>::infinity();
    std::vector<double> best_h = sol.h;
    std::vector<double> best_omega(n, 0.0);

    // stall detection runs against a baseline that resets whenever the
    // sample budget grows or the step shrinks (the noise level changed)
    double baseline_dev = std::numeric_limits<double>::infinity();
    size_t stall = 0;

    for (size_t iter = 0; iter < mc.max_steps; ++iter) {
        std::vector<double> omega = estimate_volumes(targets, sol.h, samples, derive_seed(seed, iter));
        double dev = 0.0;
        for (size_t i = 0; i < n; ++i) dev = std::max(dev, std::abs(omega[i] - nu[i]));
        sol.fit_trace.push_back({iter, dev, samples});

        if (dev < best_dev) {
            best_dev = dev;
            best_h = sol.h;
            best_omega = omega;
        }
        if (dev < mc.tolerance) {
            sol.volumes = omega;
            sol.converged = true;
            return sol;
        }

        if (dev < baseline_dev) {
            baseline_dev = dev;
            stall = 0;
        } else if (++stall >= mc.stall_patience) {
            // the iterate is bouncing at this resolution: draw more samples,
            // damp the step, and restart the stall baseline
            samples = std::min(static_cast<size_t>(std::ceil(static_cast<double>(samples) * mc.growth_factor)),
                               mc.max_samples);
            step = std::max(step * 0.5, min_step);
            baseline_dev = dev;
            stall = 0;
        }

        for (size_t i = 0; i < n; ++i) sol.h[i] -= step * (omega[i] - nu[i]);
        recenter(sol.h);
    }

    // best-so-far result, flagged unconverged
    sol.h = best_h;
    sol.volumes = best_omega;
    sol.converged = false;
    return sol;
}

OtSolution estimate_mass_centers(OtSolution solution, size_t sample_count, uint64_t seed) {
    if (sample_count == 0) throw std::invalid_argument("estimate_mass_centers: sample_count must be positive");
    if (solution.size() == 0) throw std::invalid_argument("estimate_mass_centers: empty solution");
    if (solution.mass_centers.rows != solution.size())
        solution.mass_centers = Matrix(solution.size(), solution.dim());
    if (solution.empty_cells.size() != solution.size()) solution.empty_cells.assign(solution.size(), 1);

    CellStats stats = accumulate_cells(solution.targets, solution.h, sample_count, seed, true);
    for (size_t i = 0; i < solution.size(); ++i) {
        solution.volumes[i] = static_cast<double>(stats.counts[i]) / static_cast<double>(sample_count);
        if (stats.counts[i] == 0) {
            // keep the previous center; cell stays flagged empty until repopulated
            solution.empty_cells[i] = 1;
            continue;
        }
        solution.empty_cells[i] = 0;
        const double inv = 1.0 / static_cast<double>(stats.counts[i]);
        double* dst = solution.mass_centers.row(i);
        const double* src = stats.sums.row(i);
        for (size_t k = 0; k < solution.dim(); ++k) dst[k] = src[k] * inv;
    }
    ensure_finite(solution.mass_centers, "estimate_mass_centers");
    solution.centers_estimated = true;
    return solution;
}

ExtendResult extend_map(const std::vector<double>& x, const OtSolution& solution, size_t d) {
    if (d < 1) throw std::invalid_argument("extend_map: d must be >= 1");
    if (x.size() != solution.dim()) throw std::invalid_argument("extend_map: point dimension mismatch");
    if (!solution.centers_estimated) throw std::invalid_argument("extend_map: mass centers not estimated");

    const size_t want = d + 1;
    std::vector<std::pair<double, size_t>> dist;  // (distance, index) over non-empty cells
    dist.reserve(solution.size());
    for (size_t i = 0; i < solution.size(); ++i) {
        if (solution.empty_cells[i]) continue;
        dist.emplace_back(std::sqrt(squared_distance(x.data(), solution.mass_centers.row(i), x.size())), i);
    }
    if (dist.size() < want)
        throw std::invalid_argument("extend_map: need " + std::to_string(want) + " non-empty mass centers, have " +
                                    std::to_string(dist.size()));
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(want), dist.end());

    ExtendResult res;
    res.z.assign(solution.dim(), 0.0);
    res.lambda.assign(want, 0.0);
    res.indices.resize(want);
    for (size_t k = 0; k < want; ++k) res.indices[k] = dist[k].second;

    // snap rule: a query sitting on a mass center maps to that center's target
    if (dist[0].first < 1e-12) {
        res.lambda[0] = 1.0;
        const double* y = solution.targets.row(res.indices[0]);
        std::copy(y, y + solution.dim(), res.z.begin());
        return res;
    }

    double inv_sum = 0.0;
    for (size_t k = 0; k < want; ++k) inv_sum += 1.0 / dist[k].first;
    for (size_t k = 0; k < want; ++k) {
        res.lambda[k] = (1.0 / dist[k].first) / inv_sum;
        const double* y = solution.targets.row(res.indices[k]);
        for (size_t j = 0; j < solution.dim(); ++j) res.z[j] += res.lambda[k] * y[j];
    }
    return res;
}

} // namespace mml
