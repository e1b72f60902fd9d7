#pragma once

#include "mml/matrix.hpp"
#include "mml/otmap.hpp"

#include <cstdint>
#include <vector>

namespace mml {

// A pair of adjacent transport cells whose targets carry different class
// labels, exactly one of them the attack target class. index_a is always the
// target-class endpoint.
struct SingularPair {
    size_t index_a = 0;
    size_t index_b = 0;
    int class_a = 0;
    int class_b = 0;
    size_t crossing_count = 0;
    double cosine = 0.0;  // cos between the endpoint latent codes; NaN when an endpoint has zero norm
};

struct AngleFilterConfig {
    double threshold_degrees = 60.0;
    enum class Mode : uint8_t { AngleFilter = 0, LabelOracle = 1, Both = 2 } mode = Mode::LabelOracle;

    void validate() const;
};

struct MixtureEntry {
    std::vector<double> z;
    SingularPair pair;
    double lambda_target = 0.0;
};

struct ModeMixtureSet {
    enum class Kind : uint8_t { M1 = 0, M2 = 1 };
    std::vector<MixtureEntry> entries;
    Kind kind = Kind::M1;

    size_t size() const { return entries.size(); }
};

double pair_cosine(const double* a, const double* b, size_t n);

// Probes the source measure and records every nearest-2 mass-center pair that
// straddles the target class. Deterministic for a fixed seed.
std::vector<SingularPair> detect_singular_pairs(const OtSolution& solution, const std::vector<int>& labels,
                                                int target_class, size_t probe_count, uint64_t seed);

// True when the pair qualifies as a mode-mixture crossing under the config.
bool angle_filter(const SingularPair& pair, const AngleFilterConfig& config);

// Emits per_pair_count entries z = lambda*y_target + (1-lambda)*y_other per
// pair. With max_total > 0, pairs with higher crossing_count are consumed
// first and output stops at the cap.
ModeMixtureSet build_mixture_set(const std::vector<SingularPair>& pairs, const Matrix& targets,
                                 ModeMixtureSet::Kind kind, double lambda_target, size_t per_pair_count,
                                 size_t max_total = 0);

Matrix mixture_latents(const ModeMixtureSet& set);

} // namespace mml
