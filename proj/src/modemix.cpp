#include "mml/modemix.hpp"

#include "mml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace mml {

static constexpr size_t kProbeChunk = 4096;

void AngleFilterConfig::validate() const {
    if (!(threshold_degrees > 0.0 && threshold_degrees < 180.0))
        throw std::invalid_argument("angle_filter: threshold must be in (0, 180) degrees");
}

double pair_cosine(const double* a, const double* b, size_t n) {
    const double na = norm2(a, n);
    const double nb = norm2(b, n);
    if (na < 1e-300 || nb < 1e-300) return std::numeric_limits<double>::quiet_NaN();
    return dot(a, b, n) / (na * nb);
}

std::vector<SingularPair> detect_singular_pairs(const OtSolution& solution, const std::vector<int>& labels,
                                                int target_class, size_t probe_count, uint64_t seed) {
    if (labels.size() != solution.size())
        throw std::invalid_argument("detect_singular_pairs: need one label per target");
    if (!solution.centers_estimated)
        throw std::invalid_argument("detect_singular_pairs: mass centers not estimated");
    if (std::find(labels.begin(), labels.end(), target_class) == labels.end())
        throw std::invalid_argument("detect_singular_pairs: target class " + std::to_string(target_class) +
                                    " absent from labels");

    std::vector<size_t> live;  // non-empty cells eligible as polyhedron vertices
    for (size_t i = 0; i < solution.size(); ++i)
        if (!solution.empty_cells[i]) live.push_back(i);
    if (live.size() < 2) return {};

    const size_t dim = solution.dim();
    std::map<std::pair<size_t, size_t>, size_t> counts;
    std::vector<double> x(dim);

    size_t done = 0;
    for (size_t chunk = 0; done < probe_count; ++chunk) {
        const size_t batch = std::min(kProbeChunk, probe_count - done);
        Rng rng(derive_seed(seed, chunk));
        for (size_t s = 0; s < batch; ++s) {
            for (size_t k = 0; k < dim; ++k) x[k] = rng.normal();
            // two nearest non-empty mass centers (d = 1 polyhedron vertices)
            size_t i0 = live[0], i1 = live[1];
            double d0 = squared_distance(x.data(), solution.mass_centers.row(i0), dim);
            double d1 = squared_distance(x.data(), solution.mass_centers.row(i1), dim);
            if (d1 < d0) {
                std::swap(i0, i1);
                std::swap(d0, d1);
            }
            for (size_t li = 2; li < live.size(); ++li) {
                const size_t i = live[li];
                const double d = squared_distance(x.data(), solution.mass_centers.row(i), dim);
                if (d < d0) {
                    i1 = i0;
                    d1 = d0;
                    i0 = i;
                    d0 = d;
                } else if (d < d1) {
                    i1 = i;
                    d1 = d;
                }
            }
            const int la = labels[i0];
            const int lb = labels[i1];
            if (la == lb) continue;
            if ((la == target_class) == (lb == target_class)) continue;  // exactly one target endpoint
            ++counts[{std::min(i0, i1), std::max(i0, i1)}];
        }
        done += batch;
    }

    std::vector<SingularPair> pairs;
    pairs.reserve(counts.size());
    for (const auto& [key, count] : counts) {
        SingularPair p;
        const bool first_is_target = labels[key.first] == target_class;
        p.index_a = first_is_target ? key.first : key.second;
        p.index_b = first_is_target ? key.second : key.first;
        p.class_a = labels[p.index_a];
        p.class_b = labels[p.index_b];
        p.crossing_count = count;
        p.cosine = pair_cosine(solution.targets.row(p.index_a), solution.targets.row(p.index_b), dim);
        pairs.push_back(p);
    }
    return pairs;  // map iteration order: sorted by (min index, max index)
}

bool angle_filter(const SingularPair& pair, const AngleFilterConfig& config) {
    config.validate();
    const bool labels_differ = pair.class_a != pair.class_b;
    if (config.mode == AngleFilterConfig::Mode::LabelOracle) return labels_differ;

    if (!std::isfinite(pair.cosine))
        throw std::invalid_argument("angle_filter: zero-norm endpoint, cosine undefined");
    const double c = std::clamp(pair.cosine, -1.0, 1.0);
    const double angle_deg = std::acos(c) * 180.0 / M_PI;
    const bool wide = angle_deg > config.threshold_degrees;
    return config.mode == AngleFilterConfig::Mode::Both ? (wide && labels_differ) : wide;
}

ModeMixtureSet build_mixture_set(const std::vector<SingularPair>& pairs, const Matrix& targets,
                                 ModeMixtureSet::Kind kind, double lambda_target, size_t per_pair_count,
                                 size_t max_total) {
    if (pairs.empty())
        throw std::invalid_argument(
            "build_mixture_set: no singular pairs; lower the angle threshold or increase the probe count");
    if (lambda_target < 0.0 || lambda_target > 1.0)
        throw std::invalid_argument("build_mixture_set: lambda_target must be in [0,1]");
    if (per_pair_count == 0) throw std::invalid_argument("build_mixture_set: per_pair_count must be positive");

    std::vector<SingularPair> ordered = pairs;
    if (max_total > 0) {
        std::stable_sort(ordered.begin(), ordered.end(),
                         [](const SingularPair& a, const SingularPair& b) {
                             return a.crossing_count > b.crossing_count;
                         });
    }

    ModeMixtureSet set;
    set.kind = kind;
    for (const SingularPair& p : ordered) {
        if (p.index_a >= targets.rows || p.index_b >= targets.rows)
            throw std::out_of_range("build_mixture_set: pair index outside target matrix");
        const double* yt = targets.row(p.index_a);
        const double* yo = targets.row(p.index_b);
        MixtureEntry e;
        e.pair = p;
        e.lambda_target = lambda_target;
        e.z.resize(targets.cols);
        for (size_t k = 0; k < targets.cols; ++k)
            e.z[k] = lambda_target * yt[k] + (1.0 - lambda_target) * yo[k];
        for (size_t c = 0; c < per_pair_count; ++c) {
            set.entries.push_back(e);
            if (max_total > 0 && set.entries.size() >= max_total) return set;
        }
    }
    return set;
}

Matrix mixture_latents(const ModeMixtureSet& set) {
    if (set.entries.empty()) return {};
    Matrix m(set.entries.size(), set.entries.front().z.size());
    for (size_t i = 0; i < set.entries.size(); ++i)
        std::copy(set.entries[i].z.begin(), set.entries[i].z.end(), m.row(i));
    return m;
}

} // namespace mml
