#include "mml/stats.hpp"

#include "mml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mml {

namespace {

// Cyclic Jacobi rotations on a symmetric matrix; returns eigenvalues and
// fills `vectors` with one eigenvector per column.
std::vector<double> jacobi_eigen(Matrix a, Matrix& vectors) {
    const size_t n = a.rows;
    vectors = Matrix(n, n);
    for (size_t i = 0; i < n; ++i) vectors.at(i, i) = 1.0;

    for (size_t sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;

        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double vkp = vectors.at(k, p), vkq = vectors.at(k, q);
                    vectors.at(k, p) = c * vkp - s * vkq;
                    vectors.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<double> eig(n);
    for (size_t i = 0; i < n; ++i) eig[i] = a.at(i, i);
    return eig;
}

} // namespace

Pca pca_fit(const Matrix& x, size_t k) {
    if (x.rows < 2) throw std::invalid_argument("pca: need at least two samples");
    if (k == 0 || k > x.cols) throw std::invalid_argument("pca: component count out of range");

    Pca pca;
    pca.mean.assign(x.cols, 0.0);
    for (size_t i = 0; i < x.rows; ++i) {
        const double* row = x.row(i);
        for (size_t j = 0; j < x.cols; ++j) pca.mean[j] += row[j];
    }
    for (double& m : pca.mean) m /= static_cast<double>(x.rows);

    Matrix cov(x.cols, x.cols);
    for (size_t i = 0; i < x.rows; ++i) {
        const double* row = x.row(i);
        for (size_t a = 0; a < x.cols; ++a) {
            const double da = row[a] - pca.mean[a];
            if (da == 0.0) continue;
            double* crow = cov.row(a);
            for (size_t b = a; b < x.cols; ++b) crow[b] += da * (row[b] - pca.mean[b]);
        }
    }
    const double denom = static_cast<double>(x.rows - 1);
    for (size_t a = 0; a < x.cols; ++a)
        for (size_t b = a; b < x.cols; ++b) {
            cov.at(a, b) /= denom;
            cov.at(b, a) = cov.at(a, b);
        }

    Matrix vectors;
    std::vector<double> eig = jacobi_eigen(cov, vectors);

    std::vector<size_t> order(x.cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return eig[a] > eig[b]; });

    pca.components = Matrix(k, x.cols);
    pca.explained_variance.resize(k);
    for (size_t c = 0; c < k; ++c) {
        const size_t col = order[c];
        pca.explained_variance[c] = eig[col];
        double* dst = pca.components.row(c);
        for (size_t j = 0; j < x.cols; ++j) dst[j] = vectors.at(j, col);
        // deterministic sign: largest-magnitude coordinate is positive
        size_t arg = 0;
        for (size_t j = 1; j < x.cols; ++j)
            if (std::abs(dst[j]) > std::abs(dst[arg])) arg = j;
        if (dst[arg] < 0.0)
            for (size_t j = 0; j < x.cols; ++j) dst[j] = -dst[j];
    }
    return pca;
}

Matrix Pca::project(const Matrix& x) const {
    if (x.cols != mean.size()) throw std::invalid_argument("pca: projection width mismatch");
    Matrix centered = x;
    for (size_t i = 0; i < centered.rows; ++i) {
        double* row = centered.row(i);
        for (size_t j = 0; j < centered.cols; ++j) row[j] -= mean[j];
    }
    return matmul_abt(centered, components);
}

KMeansResult kmeans(const Matrix& x, size_t k, uint64_t seed, size_t restarts, size_t max_iters) {
    if (x.rows < k) throw std::invalid_argument("kmeans: fewer points than clusters");
    if (k == 0) throw std::invalid_argument("kmeans: k must be positive");
    if (restarts == 0) throw std::invalid_argument("kmeans: need at least one restart");

    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();

    for (size_t restart = 0; restart < restarts; ++restart) {
        Rng rng(derive_seed(seed, restart));
        // k distinct seed rows
        std::vector<size_t> pool(x.rows);
        std::iota(pool.begin(), pool.end(), 0);
        for (size_t i = 0; i < k; ++i) {
            const size_t j = i + static_cast<size_t>(rng.uniform_int(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        Matrix centers(k, x.cols);
        for (size_t i = 0; i < k; ++i)
            std::copy(x.row(pool[i]), x.row(pool[i]) + x.cols, centers.row(i));

        std::vector<int> assignment(x.rows, -1);
        double inertia = 0.0;
        for (size_t it = 0; it < max_iters; ++it) {
            bool changed = false;
            inertia = 0.0;
            for (size_t i = 0; i < x.rows; ++i) {
                size_t arg = 0;
                double bestd = squared_distance(x.row(i), centers.row(0), x.cols);
                for (size_t c = 1; c < k; ++c) {
                    const double d = squared_distance(x.row(i), centers.row(c), x.cols);
                    if (d < bestd) {
                        bestd = d;
                        arg = c;
                    }
                }
                inertia += bestd;
                if (assignment[i] != static_cast<int>(arg)) {
                    assignment[i] = static_cast<int>(arg);
                    changed = true;
                }
            }
            if (!changed) break;

            Matrix sums(k, x.cols);
            std::vector<size_t> counts(k, 0);
            for (size_t i = 0; i < x.rows; ++i) {
                double* srow = sums.row(assignment[i]);
                const double* xrow = x.row(i);
                for (size_t j = 0; j < x.cols; ++j) srow[j] += xrow[j];
                ++counts[assignment[i]];
            }
            for (size_t c = 0; c < k; ++c) {
                if (counts[c] == 0) {
                    // adopt the point farthest from its center
                    size_t far_i = 0;
                    double far_d = -1.0;
                    for (size_t i = 0; i < x.rows; ++i) {
                        const double d = squared_distance(x.row(i), centers.row(assignment[i]), x.cols);
                        if (d > far_d) {
                            far_d = d;
                            far_i = i;
                        }
                    }
                    std::copy(x.row(far_i), x.row(far_i) + x.cols, centers.row(c));
                    continue;
                }
                const double inv = 1.0 / static_cast<double>(counts[c]);
                double* crow = centers.row(c);
                const double* srow = sums.row(c);
                for (size_t j = 0; j < x.cols; ++j) crow[j] = srow[j] * inv;
            }
        }

        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignment = assignment;
            best.centers = centers;
        }
    }
    return best;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("ari: labelings differ in length");
    if (a.empty()) throw std::invalid_argument("ari: empty labelings");

    auto relabel = [](const std::vector<int>& v) {
        std::vector<int> ids = v;
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        std::vector<size_t> out(v.size());
        for (size_t i = 0; i < v.size(); ++i)
            out[i] = static_cast<size_t>(std::lower_bound(ids.begin(), ids.end(), v[i]) - ids.begin());
        return std::pair{out, ids.size()};
    };
    auto [la, na] = relabel(a);
    auto [lb, nb] = relabel(b);

    std::vector<double> table(na * nb, 0.0), ra(na, 0.0), rb(nb, 0.0);
    for (size_t i = 0; i < a.size(); ++i) {
        table[la[i] * nb + lb[i]] += 1.0;
        ra[la[i]] += 1.0;
        rb[lb[i]] += 1.0;
    }
    auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
    double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (double v : table) sum_ij += comb2(v);
    for (double v : ra) sum_a += comb2(v);
    for (double v : rb) sum_b += comb2(v);
    const double total = comb2(static_cast<double>(a.size()));
    const double expected = sum_a * sum_b / total;
    const double max_index = 0.5 * (sum_a + sum_b);
    const double denom = max_index - expected;
    if (std::abs(denom) < 1e-12) return 1.0;  // both partitions trivial
    return (sum_ij - expected) / denom;
}

double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median: empty input");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// nearest-rank percentile: the smallest value with at least pct percent of
// the sample at or below it
double percentile(std::vector<double> v, double pct) {
    if (v.empty()) throw std::invalid_argument("percentile: empty input");
    std::sort(v.begin(), v.end());
    const double rank = pct / 100.0 * static_cast<double>(v.size());
    size_t idx = static_cast<size_t>(std::ceil(rank));
    if (idx > 0) --idx;
    return v[std::min(idx, v.size() - 1)];
}

} // namespace mml
