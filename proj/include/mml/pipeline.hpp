#pragma once

#include "mml/config.hpp"
#include "mml/dataset.hpp"
#include "mml/defend.hpp"
#include "mml/modemix.hpp"
#include "mml/otmap.hpp"
#include "mml/poison.hpp"
#include "mml/surgery.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mml {

// In-memory state shared between pipeline stages. Stage functions populate
// it, persist their artifact, and later stages reload from disk when run
// standalone.
struct Workspace {
    std::optional<LabeledImageDataset> train;
    std::optional<LabeledImageDataset> test;
    std::optional<ClassifierModel> model_clean;
    std::optional<LatentDataset> latents_train;
    std::optional<OtSolution> ot;
    std::optional<std::vector<int>> ot_labels;
    std::optional<std::vector<SingularPair>> pairs;
    std::optional<ModeMixtureSet> m1;
    std::optional<ModeMixtureSet> m2;
    std::optional<ClassifierModel> model_backdoored;
    std::optional<PoisonedFeatureDataset> dfp;
    std::optional<PoisonBatch> poison;
    std::optional<std::vector<int>> poison_source_labels;
};

inline const std::vector<std::string>& pipeline_stage_names() {
    static const std::vector<std::string> names = {"pretrain", "extract", "ot-fit", "modemix", "surgery",
                                                   "poison",   "eval",    "defend", "audit",   "report"};
    return names;
}

// Runs a single named stage, loading missing inputs from artifacts in
// out_dir. Throws with a stage-tagged message on failure.
void run_stage(const std::string& stage, const RunConfig& config, Workspace& ws, const std::string& out_dir);

// Runs every stage in order, persisting each artifact under out_dir.
void run_pipeline(const RunConfig& config, const std::string& out_dir);

// Latent dataset binary artifact (magic MMLT + checksum).
void save_latents(const LatentDataset& data, const std::string& path);
LatentDataset load_latents(const std::string& path);

// Poison batch binary artifact (magic MMPB + checksum).
void save_poison_batch(const PoisonBatch& batch, const std::vector<int>& source_labels, const std::string& path);
std::pair<PoisonBatch, std::vector<int>> load_poison_batch(const std::string& path);

} // namespace mml
