#include "mml/pipeline.hpp"

#include "mml/checkpoint.hpp"
#include "mml/idx.hpp"
#include "mml/rng.hpp"
#include "mml/stats.hpp"
#include "mml/synth.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace mml {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------- artifacts

std::string artifact(const std::string& out_dir, const char* name) {
    return (fs::path(out_dir) / name).string();
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out << content;
        if (!out) {
            std::remove(tmp.c_str());
            throw std::runtime_error("write failed for " + tmp);
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw std::runtime_error("cannot move " + tmp + " to " + path);
    }
}

void write_json(const std::string& path, const ordered_json& j) {
    write_file_atomic(path, j.dump(2) + "\n");
}

ordered_json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing artifact " + path);
    ordered_json j;
    in >> j;
    return j;
}

struct BinWriter {
    std::vector<unsigned char> buf;

    void magic(const char m[4]) { buf.insert(buf.end(), m, m + 4); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f64(double d) {
        uint64_t bits;
        std::memcpy(&bits, &d, 8);
        u64(bits);
    }
    void f64s(const std::vector<double>& v) {
        for (double d : v) f64(d);
    }
    void i32s(const std::vector<int>& v) {
        for (int x : v) u32(static_cast<uint32_t>(x));
    }
    void finish(const std::string& path) {
        u64(fnv1a64(buf.data(), buf.size()));
        std::string content(reinterpret_cast<const char*>(buf.data()), buf.size());
        write_file_atomic(path, content);
    }
};

struct BinReader {
    std::vector<unsigned char> buf;
    size_t pos = 0;
    std::string path;

    explicit BinReader(const std::string& p) : path(p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw std::runtime_error("missing artifact " + p);
        buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        if (buf.size() < 12) throw std::runtime_error(p + ": truncated");
        const uint64_t stored = peek_u64(buf.size() - 8);
        if (fnv1a64(buf.data(), buf.size() - 8) != stored)
            throw std::runtime_error(p + ": checksum mismatch");
    }
    uint64_t peek_u64(size_t at) const {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[at + i]) << (8 * i);
        return v;
    }
    void need(size_t n) {
        if (pos + n > buf.size() - 8) throw std::runtime_error(path + ": truncated payload");
    }
    void expect_magic(const char m[4]) {
        need(4);
        if (std::memcmp(buf.data() + pos, m, 4) != 0) throw std::runtime_error(path + ": bad magic");
        pos += 4;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    void f64s(std::vector<double>& v, size_t n) {
        v.resize(n);
        for (size_t i = 0; i < n; ++i) v[i] = f64();
    }
    void i32s(std::vector<int>& v, size_t n) {
        v.resize(n);
        for (size_t i = 0; i < n; ++i) v[i] = static_cast<int>(u32());
    }
};

ordered_json matrix_to_json(const Matrix& m) {
    ordered_json rows = ordered_json::array();
    for (size_t i = 0; i < m.rows; ++i) {
        ordered_json row = ordered_json::array();
        for (size_t j = 0; j < m.cols; ++j) row.push_back(m.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const ordered_json& j) {
    Matrix m;
    m.rows = j.size();
    m.cols = m.rows == 0 ? 0 : j.at(0).size();
    m.data.reserve(m.rows * m.cols);
    for (const auto& row : j) {
        if (row.size() != m.cols) throw std::runtime_error("artifact: ragged matrix rows");
        for (const auto& v : row) m.data.push_back(v.get<double>());
    }
    return m;
}

// ------------------------------------------------------------- CSV helpers

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct CsvWriter {
    std::ostringstream out;

    explicit CsvWriter(const std::string& header) { out << header << "\n"; }
    void row(std::initializer_list<std::string> cells) {
        bool first = true;
        for (const auto& c : cells) {
            if (!first) out << ",";
            out << c;
            first = false;
        }
        out << "\n";
    }
    void save(const std::string& path) { write_file_atomic(path, out.str()); }
};

std::string num(double v) { return fmt_double(v); }
std::string num(size_t v) { return std::to_string(v); }
std::string num(int v) { return std::to_string(v); }

// -------------------------------------------------------------- data setup

LabeledImageDataset truncate_dataset(LabeledImageDataset data, size_t count) {
    if (count == 0 || count >= data.size()) return data;
    std::vector<size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    LabeledImageDataset out;
    out.images = take_rows(data.images, idx);
    out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<long>(count));
    return out;
}

void ensure_datasets(const RunConfig& cfg, Workspace& ws) {
    if (ws.train && ws.test) return;
    switch (cfg.dataset.kind) {
        case DatasetSpec::Kind::SyntheticDigits:
            ws.train = synth_digits(cfg.dataset.train_count, derive_seed(cfg.seed, 0x7124),
                                    cfg.dataset.digit_jitter, cfg.dataset.digit_contrast_lo,
                                    cfg.dataset.digit_contrast_hi);
            ws.test = synth_digits(cfg.dataset.test_count, derive_seed(cfg.seed, 0x7E57),
                                   cfg.dataset.digit_jitter, cfg.dataset.digit_contrast_lo,
                                   cfg.dataset.digit_contrast_hi);
            break;
        case DatasetSpec::Kind::Idx:
            ws.train = truncate_dataset(load_idx(cfg.dataset.train_images, cfg.dataset.train_labels),
                                        cfg.dataset.train_count);
            ws.test =
                truncate_dataset(load_idx(cfg.dataset.test_images, cfg.dataset.test_labels), cfg.dataset.test_count);
            break;
        case DatasetSpec::Kind::Blobs:
            ws.train = synth_blobs(cfg.dataset.classes, cfg.dataset.per_class, cfg.dataset.dim,
                                   cfg.dataset.separation, cfg.seed, true, 0);
            ws.test = synth_blobs(cfg.dataset.classes, std::max<size_t>(cfg.dataset.per_class / 5, 2),
                                  cfg.dataset.dim, cfg.dataset.separation, cfg.seed, true, 1);
            break;
    }
    const int num_classes = static_cast<int>(cfg.arch.back());
    ws.train->validate(num_classes);
    ws.test->validate(num_classes);
}

void ensure_model_clean(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)cfg;
    if (!ws.model_clean) ws.model_clean = load_checkpoint(artifact(out_dir, "model_clean.ckpt"));
}

void ensure_model_backdoored(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)cfg;
    if (!ws.model_backdoored) ws.model_backdoored = load_checkpoint(artifact(out_dir, "model_backdoored.ckpt"));
}

void ensure_latents_train(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)cfg;
    if (!ws.latents_train) ws.latents_train = load_latents(artifact(out_dir, "latents_train.bin"));
}

void save_ot_solution(const OtSolution& sol, const std::vector<int>& labels, double tolerance_used,
                      const std::string& path) {
    ordered_json j;
    j["dim"] = sol.dim();
    j["n_targets"] = sol.size();
    j["labels"] = labels;
    j["nu"] = sol.nu;
    j["h"] = sol.h;
    j["converged"] = sol.converged;
    j["tolerance_used"] = tolerance_used;
    j["targets"] = matrix_to_json(sol.targets);
    j["mass_centers"] = matrix_to_json(sol.mass_centers);
    j["volumes"] = sol.volumes;
    ordered_json empties = ordered_json::array();
    for (uint8_t e : sol.empty_cells) empties.push_back(static_cast<int>(e));
    j["empty_cells"] = empties;
    ordered_json trace = ordered_json::array();
    for (const auto& t : sol.fit_trace)
        trace.push_back(ordered_json{{"step", t.step}, {"grad_inf_norm", t.grad_inf_norm}, {"mc_samples", t.mc_samples}});
    j["fit_trace"] = trace;
    write_json(path, j);
}

void ensure_ot(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)cfg;
    if (ws.ot && ws.ot_labels) return;
    const ordered_json j = read_json(artifact(out_dir, "ot_solution.json"));
    OtSolution sol;
    sol.targets = matrix_from_json(j.at("targets"));
    sol.nu = j.at("nu").get<std::vector<double>>();
    sol.h = j.at("h").get<std::vector<double>>();
    sol.mass_centers = matrix_from_json(j.at("mass_centers"));
    sol.volumes = j.at("volumes").get<std::vector<double>>();
    for (const auto& e : j.at("empty_cells")) sol.empty_cells.push_back(static_cast<uint8_t>(e.get<int>()));
    sol.converged = j.at("converged").get<bool>();
    sol.centers_estimated = true;
    ws.ot = std::move(sol);
    ws.ot_labels = j.at("labels").get<std::vector<int>>();
}

ordered_json mixture_set_to_json(const ModeMixtureSet& set) {
    ordered_json entries = ordered_json::array();
    for (const auto& e : set.entries) {
        entries.push_back(ordered_json{{"z", e.z},
                                       {"index_a", e.pair.index_a},
                                       {"index_b", e.pair.index_b},
                                       {"class_a", e.pair.class_a},
                                       {"class_b", e.pair.class_b},
                                       {"crossing_count", e.pair.crossing_count},
                                       {"cosine", e.pair.cosine},
                                       {"lambda_target", e.lambda_target}});
    }
    return entries;
}

ModeMixtureSet mixture_set_from_json(const ordered_json& entries, ModeMixtureSet::Kind kind) {
    ModeMixtureSet set;
    set.kind = kind;
    for (const auto& e : entries) {
        MixtureEntry me;
        me.z = e.at("z").get<std::vector<double>>();
        me.pair.index_a = e.at("index_a").get<size_t>();
        me.pair.index_b = e.at("index_b").get<size_t>();
        me.pair.class_a = e.at("class_a").get<int>();
        me.pair.class_b = e.at("class_b").get<int>();
        me.pair.crossing_count = e.at("crossing_count").get<size_t>();
        me.pair.cosine = e.at("cosine").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                  : e.at("cosine").get<double>();
        me.lambda_target = e.at("lambda_target").get<double>();
        set.entries.push_back(std::move(me));
    }
    return set;
}

void ensure_mixtures(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)cfg;
    if (ws.m1 && ws.m2) return;
    const ordered_json j = read_json(artifact(out_dir, "modemix.json"));
    ws.m1 = mixture_set_from_json(j.at("m1"), ModeMixtureSet::Kind::M1);
    ws.m2 = mixture_set_from_json(j.at("m2"), ModeMixtureSet::Kind::M2);
}

void ensure_poison(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)cfg;
    if (ws.poison && ws.poison_source_labels) return;
    auto [batch, labels] = load_poison_batch(artifact(out_dir, "poison.bin"));
    ws.poison = std::move(batch);
    ws.poison_source_labels = std::move(labels);
}

// ------------------------------------------------------------------ stages

void stage_pretrain(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_datasets(cfg, ws);
    ArchSpec arch{cfg.arch};
    ws.model_clean = train_classifier(*ws.train, arch, cfg.pretrain);
    save_checkpoint(*ws.model_clean, artifact(out_dir, "model_clean.ckpt"));

    ordered_json j;
    j["train_accuracy"] = accuracy(*ws.model_clean, *ws.train);
    j["test_accuracy"] = accuracy(*ws.model_clean, *ws.test);
    j["epochs"] = cfg.pretrain.epochs;
    j["train_size"] = ws.train->size();
    j["test_size"] = ws.test->size();
    ordered_json warnings = ordered_json::array();
    if (cfg.pretrain.epochs == 0) warnings.push_back("pretrain ran with epochs=0; the model is untrained");
    j["warnings"] = warnings;
    write_json(artifact(out_dir, "pretrain_report.json"), j);
}

void stage_extract(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_datasets(cfg, ws);
    ensure_model_clean(cfg, ws, out_dir);
    ws.latents_train = extract_latents(*ws.model_clean, *ws.train);
    save_latents(*ws.latents_train, artifact(out_dir, "latents_train.bin"));
}

void stage_ot_fit(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_latents_train(cfg, ws, out_dir);
    const LatentDataset& df = *ws.latents_train;
    const size_t num_classes = cfg.arch.back();

    // seeded per-class subsample of latent codes as the discrete targets
    std::vector<std::vector<size_t>> by_class(num_classes);
    for (size_t i = 0; i < df.size(); ++i) by_class[static_cast<size_t>(df.labels[i])].push_back(i);

    std::vector<size_t> chosen;
    Rng rng(derive_seed(cfg.seed, 0x07F1));
    for (size_t c = 0; c < num_classes; ++c) {
        auto& pool = by_class[c];
        const size_t take = std::min(cfg.ot.targets_per_class, pool.size());
        for (size_t i = 0; i < take; ++i) {
            const size_t j = i + static_cast<size_t>(rng.uniform_int(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<long>(take));
    }
    std::sort(chosen.begin(), chosen.end());

    // drop exact duplicate latent rows (the OT targets must be distinct)
    std::vector<size_t> kept;
    for (size_t idx : chosen) {
        bool dup = false;
        for (size_t prev : kept) {
            if (std::equal(df.latents.row(prev), df.latents.row(prev) + df.dim(), df.latents.row(idx))) {
                dup = true;
                break;
            }
        }
        if (!dup) kept.push_back(idx);
    }

    Matrix targets = take_rows(df.latents, kept);
    std::vector<int> labels(kept.size());
    for (size_t i = 0; i < kept.size(); ++i) labels[i] = df.labels[kept[i]];

    const size_t n = targets.rows;
    std::vector<double> nu(n, 1.0 / static_cast<double>(n));

    McConfig mc = cfg.ot.mc;
    mc.tolerance = cfg.ot.tolerance > 0.0 ? cfg.ot.tolerance : std::max(2.0 / static_cast<double>(n), 1e-3);

    SourceMeasure source{df.dim()};
    OtSolution sol = fit_potential(targets, nu, source, mc, derive_seed(cfg.seed, 0x07F2));
    sol = estimate_mass_centers(std::move(sol), cfg.ot.mass_center_samples, derive_seed(cfg.seed, 0x07F3));

    save_ot_solution(sol, labels, mc.tolerance, artifact(out_dir, "ot_solution.json"));
    ws.ot = std::move(sol);
    ws.ot_labels = std::move(labels);
}

void stage_modemix(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_latents_train(cfg, ws, out_dir);
    ensure_ot(cfg, ws, out_dir);

    std::vector<SingularPair> raw =
        detect_singular_pairs(*ws.ot, *ws.ot_labels, cfg.target_class, cfg.modemix.probe_count,
                              derive_seed(cfg.seed, 0x9A1));
    std::vector<SingularPair> filtered;
    for (const auto& p : raw)
        if (angle_filter(p, cfg.modemix.filter)) filtered.push_back(p);

    // concentrate on the strongest crossings per non-target class
    std::vector<SingularPair> pairs;
    if (cfg.modemix.pairs_per_class == 0) {
        pairs = filtered;
    } else {
        std::stable_sort(filtered.begin(), filtered.end(),
                         [](const SingularPair& a, const SingularPair& b) {
                             return a.crossing_count > b.crossing_count;
                         });
        std::map<int, size_t> taken;
        for (const auto& p : filtered)
            if (taken[p.class_b]++ < cfg.modemix.pairs_per_class) pairs.push_back(p);
    }
    ws.pairs = pairs;

    size_t n_target_rows = 0;
    for (int l : ws.latents_train->labels)
        if (l == cfg.target_class) ++n_target_rows;
    const size_t required =
        static_cast<size_t>(std::floor(cfg.surgery.replace_fraction * static_cast<double>(n_target_rows)));

    if (pairs.empty())
        throw std::runtime_error(
            "no singular pairs survived filtering; lower the angle threshold or increase probe_count");

    if (cfg.modemix.even_class_budget && required > 0) {
        // split the implant budget evenly over the non-target classes present
        std::map<int, std::vector<SingularPair>> by_class;
        for (const auto& p : pairs) by_class[p.class_b].push_back(p);
        const size_t n_classes = by_class.size();
        ModeMixtureSet m1;
        m1.kind = ModeMixtureSet::Kind::M1;
        size_t remainder = required % n_classes;
        for (auto& [cls, group] : by_class) {
            size_t budget = required / n_classes + (remainder > 0 ? 1 : 0);
            if (remainder > 0) --remainder;
            if (budget == 0) continue;
            const size_t per = (budget + group.size() - 1) / group.size();
            ModeMixtureSet part = build_mixture_set(group, ws.ot->targets, ModeMixtureSet::Kind::M1,
                                                    cfg.modemix.lambda_m1, per, budget);
            m1.entries.insert(m1.entries.end(), part.entries.begin(), part.entries.end());
        }
        ws.m1 = std::move(m1);
    } else {
        const size_t per_pair = required == 0 ? 1 : (required + pairs.size() - 1) / pairs.size();
        ws.m1 = build_mixture_set(pairs, ws.ot->targets, ModeMixtureSet::Kind::M1, cfg.modemix.lambda_m1,
                                  per_pair, required);
    }

    // M2 reuses exactly the pairs that made it into the implant, so the
    // poison targets sit in regions the refined head has actually claimed
    std::vector<SingularPair> implanted_pairs;
    for (const auto& e : ws.m1->entries) {
        const bool seen = std::any_of(implanted_pairs.begin(), implanted_pairs.end(), [&](const SingularPair& p) {
            return p.index_a == e.pair.index_a && p.index_b == e.pair.index_b;
        });
        if (!seen) implanted_pairs.push_back(e.pair);
    }
    ws.m2 = build_mixture_set(implanted_pairs, ws.ot->targets, ModeMixtureSet::Kind::M2, cfg.modemix.lambda_m2,
                              cfg.modemix.m2_per_pair, 0);

    ordered_json j;
    ordered_json jp = ordered_json::array();
    for (const auto& p : raw) {
        const bool passed = angle_filter(p, cfg.modemix.filter);
        ordered_json e{{"index_a", p.index_a},   {"index_b", p.index_b},
                       {"class_a", p.class_a},   {"class_b", p.class_b},
                       {"crossing_count", p.crossing_count}, {"passed_filter", passed}};
        if (std::isfinite(p.cosine)) {
            e["cosine"] = p.cosine;
            e["angle_degrees"] = std::acos(std::clamp(p.cosine, -1.0, 1.0)) * 180.0 / M_PI;
        } else {
            e["cosine"] = nullptr;
            e["angle_degrees"] = nullptr;
        }
        jp.push_back(std::move(e));
    }
    j["pairs"] = jp;
    j["n_pairs_detected"] = raw.size();
    j["n_pairs_kept"] = pairs.size();
    j["m1_required"] = required;
    j["m1"] = mixture_set_to_json(*ws.m1);
    j["m2"] = mixture_set_to_json(*ws.m2);
    write_json(artifact(out_dir, "modemix.json"), j);
}

void stage_surgery(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_datasets(cfg, ws);
    ensure_model_clean(cfg, ws, out_dir);
    ensure_latents_train(cfg, ws, out_dir);
    ensure_mixtures(cfg, ws, out_dir);

    ws.dfp = build_poisoned_features(*ws.latents_train, *ws.m1, cfg.surgery);
    ws.model_backdoored = retrain_head(*ws.model_clean, *ws.dfp, cfg.surgery);

    save_checkpoint(*ws.model_backdoored, artifact(out_dir, "model_backdoored.ckpt"));
    LatentDataset dfp_out;
    dfp_out.latents = ws.dfp->latents;
    dfp_out.labels = ws.dfp->labels;
    dfp_out.poison_flags = ws.dfp->implanted_flags;
    save_latents(dfp_out, artifact(out_dir, "dfp.bin"));

    ordered_json j;
    j["implanted"] = ws.dfp->implanted_count;
    j["requested"] = ws.dfp->requested_replacements;
    j["truncated"] = ws.dfp->truncated;
    j["clean_accuracy_pre"] = accuracy(*ws.model_clean, *ws.test);
    j["clean_accuracy_post"] = accuracy(*ws.model_backdoored, *ws.test);
    write_json(artifact(out_dir, "surgery_report.json"), j);
}

void stage_poison(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_datasets(cfg, ws);
    ensure_model_backdoored(cfg, ws, out_dir);
    ensure_mixtures(cfg, ws, out_dir);

    // seeded choice of non-target test images
    std::vector<size_t> non_target;
    for (size_t i = 0; i < ws.test->size(); ++i)
        if (ws.test->labels[i] != cfg.target_class) non_target.push_back(i);
    if (non_target.empty()) throw std::runtime_error("no non-target test images available");

    Rng rng(derive_seed(cfg.seed, 0x90150));
    const size_t take = std::min(cfg.poison_eval_count, non_target.size());
    for (size_t i = 0; i < take; ++i) {
        const size_t j = i + static_cast<size_t>(rng.uniform_int(non_target.size() - i));
        std::swap(non_target[i], non_target[j]);
    }
    std::vector<size_t> chosen(non_target.begin(), non_target.begin() + static_cast<long>(take));
    std::sort(chosen.begin(), chosen.end());

    Matrix images = take_rows(ws.test->images, chosen);
    std::vector<int> source_labels(take);
    for (size_t i = 0; i < take; ++i) source_labels[i] = ws.test->labels[chosen[i]];

    ws.poison = craft_poison(*ws.model_backdoored, images, *ws.m2, cfg.poison);
    ws.poison_source_labels = source_labels;
    save_poison_batch(*ws.poison, source_labels, artifact(out_dir, "poison.bin"));

    const PoisonBatch& b = *ws.poison;
    auto mean = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    double mean_iters = 0.0;
    for (size_t it : b.iterations) mean_iters += static_cast<double>(it);
    mean_iters /= static_cast<double>(b.iterations.size());

    ordered_json j;
    j["n_images"] = b.size();
    j["epsilon"] = cfg.poison.epsilon;
    j["mean_linf"] = mean(b.linf_norms);
    j["mean_l2"] = mean(b.l2_norms);
    j["max_linf"] = b.linf_norms.empty() ? 0.0 : *std::max_element(b.linf_norms.begin(), b.linf_norms.end());
    j["mean_final_objective"] = mean(b.final_objectives);
    j["mean_initial_objective"] = mean(b.initial_objectives);
    j["mean_iterations"] = mean_iters;
    write_json(artifact(out_dir, "poison_report.json"), j);
}

void stage_eval(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_datasets(cfg, ws);
    ensure_model_clean(cfg, ws, out_dir);
    ensure_model_backdoored(cfg, ws, out_dir);
    ensure_poison(cfg, ws, out_dir);

    const EvalReport attack = evaluate_attack(*ws.model_backdoored, *ws.test, *ws.poison, cfg.target_class);

    ordered_json j;
    j["clean_accuracy_pre"] = accuracy(*ws.model_clean, *ws.test);
    j["clean_accuracy_post"] = attack.clean_accuracy;
    j["attack_success_rate"] = attack.attack_success_rate;
    j["n_poisoned"] = attack.n_poisoned;

    // limited-parameter comparison: corner patch + head-only retraining
    auto [baseline_model, baseline] =
        baseline_patch_head_attack(*ws.model_clean, *ws.train, *ws.test, cfg.target_class, cfg.baseline_patch,
                                   cfg.surgery.head_train, derive_seed(cfg.seed, 0xBA5E11));
    (void)baseline_model;
    j["baseline"] = ordered_json{{"clean_accuracy", baseline.clean_accuracy},
                                 {"attack_success_rate", baseline.attack_success_rate},
                                 {"patch_size", cfg.baseline_patch.patch_size},
                                 {"poison_fraction", cfg.baseline_patch.poison_fraction}};

    if (cfg.ablation.enabled) {
        ensure_mixtures(cfg, ws, out_dir);
        ensure_latents_train(cfg, ws, out_dir);
        const size_t take = std::min(cfg.ablation.image_count, ws.poison->originals.rows);
        std::vector<size_t> idx(take);
        std::iota(idx.begin(), idx.end(), 0);
        Matrix images = take_rows(ws.poison->originals, idx);

        std::vector<size_t> target_rows;
        for (size_t i = 0; i < ws.latents_train->size(); ++i)
            if (ws.latents_train->labels[i] == cfg.target_class) target_rows.push_back(i);
        Matrix direct_targets = take_rows(ws.latents_train->latents, target_rows);

        PoisonRecipe recipe = cfg.poison;
        recipe.epsilon = cfg.ablation.epsilon;
        recipe.step_size = cfg.ablation.step_size;
        recipe.max_iters = cfg.ablation.max_iters;
        const AblationResult ab =
            perturbation_ablation(*ws.model_backdoored, images, *ws.m2, direct_targets, recipe);
        j["ablation"] = ordered_json{{"l2_with_mixture", ab.l2_with_mixture},
                                     {"l2_without", ab.l2_without},
                                     {"successes_with", ab.successes_with},
                                     {"successes_without", ab.successes_without},
                                     {"n_images", ab.n_images}};
    }
    write_json(artifact(out_dir, "eval_report.json"), j);
}

void stage_defend(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_datasets(cfg, ws);
    ensure_model_backdoored(cfg, ws, out_dir);
    ensure_poison(cfg, ws, out_dir);
    if (!cfg.defend.enabled) {
        write_json(artifact(out_dir, "defend_report.json"), ordered_json{{"enabled", false}});
        return;
    }
    const ClassifierModel& model = *ws.model_backdoored;
    ordered_json j;
    j["enabled"] = true;

    // ----- activation clustering on test-time clean + poisoned latents
    {
        LatentDataset combined;
        Matrix clean_lat = encode(model, ws.test->images);
        Matrix poison_lat = encode(model, ws.poison->poisoned);
        combined.latents = Matrix(clean_lat.rows + poison_lat.rows, clean_lat.cols);
        std::copy(clean_lat.data.begin(), clean_lat.data.end(), combined.latents.data.begin());
        std::copy(poison_lat.data.begin(), poison_lat.data.end(),
                  combined.latents.data.begin() + static_cast<long>(clean_lat.size()));
        combined.labels = ws.test->labels;
        combined.labels.insert(combined.labels.end(), ws.poison_source_labels->begin(),
                               ws.poison_source_labels->end());
        combined.poison_flags.assign(clean_lat.rows, 0);
        combined.poison_flags.insert(combined.poison_flags.end(), poison_lat.rows, 1);

        std::vector<int> predicted = predict(model, ws.test->images);
        const std::vector<int> poison_pred = predict(model, ws.poison->poisoned);
        predicted.insert(predicted.end(), poison_pred.begin(), poison_pred.end());

        const ClusterReport cr =
            activation_cluster_ari(combined, predicted, cfg.target_class, derive_seed(cfg.seed, 0xA21));
        j["activation_clustering"] = ordered_json{
            {"ari", cr.ari}, {"n_samples", cr.n_samples}, {"n_poisoned", cr.n_flagged}};

        // 2-D PCA plot data for the same population
        std::vector<size_t> sel;
        for (size_t i = 0; i < combined.size(); ++i)
            if (predicted[i] == cfg.target_class) sel.push_back(i);
        if (sel.size() >= 3) {
            Matrix pts = take_rows(combined.latents, sel);
            const Pca pca = pca_fit(pts, 2);
            const Matrix proj = pca.project(pts);
            CsvWriter csv("x,y,poisoned,source_label");
            for (size_t i = 0; i < proj.rows; ++i)
                csv.row({num(proj.at(i, 0)), num(proj.at(i, 1)),
                         num(static_cast<int>(combined.poison_flags[sel[i]])), num(combined.labels[sel[i]])});
            csv.save(artifact(out_dir, "pca_latents.csv"));
        }
    }

    // ----- STRIP entropy distributions
    {
        Rng rng(derive_seed(cfg.seed, 0x57121));
        std::vector<size_t> clean_pool(ws.test->size());
        std::iota(clean_pool.begin(), clean_pool.end(), 0);
        rng.shuffle(clean_pool);
        const size_t overlay_bank = std::min<size_t>(64, ws.test->size());
        std::vector<size_t> overlay_rows(clean_pool.begin(), clean_pool.begin() + static_cast<long>(overlay_bank));
        Matrix overlays = take_rows(ws.test->images, overlay_rows);

        const size_t n_clean = std::min(cfg.defend.strip_clean_samples, ws.test->size() - overlay_bank);
        std::vector<double> clean_entropy(n_clean);
        for (size_t i = 0; i < n_clean; ++i) {
            const size_t row = clean_pool[overlay_bank + i];
            std::vector<double> x(ws.test->images.row(row), ws.test->images.row(row) + ws.test->images.cols);
            clean_entropy[i] = strip_entropy(model, x, overlays, cfg.defend.strip_overlays);
        }
        std::vector<double> poison_entropy(ws.poison->size());
        for (size_t i = 0; i < ws.poison->size(); ++i) {
            std::vector<double> x(ws.poison->poisoned.row(i), ws.poison->poisoned.row(i) + ws.poison->poisoned.cols);
            poison_entropy[i] = strip_entropy(model, x, overlays, cfg.defend.strip_overlays);
        }
        CsvWriter csv("kind,entropy");
        for (double e : clean_entropy) csv.row({"clean", num(e)});
        for (double e : poison_entropy) csv.row({"poisoned", num(e)});
        csv.save(artifact(out_dir, "strip.csv"));

        j["strip"] = ordered_json{{"clean_min", *std::min_element(clean_entropy.begin(), clean_entropy.end())},
                                  {"clean_p1", percentile(clean_entropy, 1.0)},
                                  {"clean_median", median(clean_entropy)},
                                  {"poisoned_min", *std::min_element(poison_entropy.begin(), poison_entropy.end())},
                                  {"poisoned_median", median(poison_entropy)},
                                  {"n_clean", n_clean},
                                  {"n_poisoned", poison_entropy.size()},
                                  {"overlays_per_sample", cfg.defend.strip_overlays}};
    }

    // ----- fine pruning curve over penultimate neurons
    {
        const size_t steps =
            cfg.defend.fine_prune_steps == 0 ? model.latent_dim : std::min(cfg.defend.fine_prune_steps, model.latent_dim);
        const auto curve = fine_prune(model, *ws.test, ws.poison->poisoned, cfg.target_class, steps);
        CsvWriter csv("pruned,clean_accuracy,attack_success_rate");
        for (const auto& pt : curve) csv.row({num(pt.pruned), num(pt.clean_accuracy), num(pt.attack_success_rate)});
        csv.save(artifact(out_dir, "fineprune.csv"));
        j["fine_prune"] = ordered_json{{"steps", steps},
                                       {"clean_accuracy_unpruned", curve.front().clean_accuracy},
                                       {"attack_unpruned", curve.front().attack_success_rate},
                                       {"clean_accuracy_final", curve.back().clean_accuracy},
                                       {"attack_final", curve.back().attack_success_rate},
                                       {"curve_points", curve.size()}};
    }

    // ----- neural cleanse anomaly index
    {
        // stratified sample across classes for the per-class optimizations
        std::vector<std::vector<size_t>> by_class(model.num_classes);
        for (size_t i = 0; i < ws.test->size(); ++i)
            by_class[static_cast<size_t>(ws.test->labels[i])].push_back(i);
        std::vector<size_t> sel;
        for (size_t round = 0; sel.size() < cfg.defend.neural_cleanse_samples; ++round) {
            bool any = false;
            for (size_t c = 0; c < model.num_classes && sel.size() < cfg.defend.neural_cleanse_samples; ++c) {
                if (round < by_class[c].size()) {
                    sel.push_back(by_class[c][round]);
                    any = true;
                }
            }
            if (!any) break;
        }
        std::sort(sel.begin(), sel.end());
        Matrix samples = take_rows(ws.test->images, sel);
        const NeuralCleanseReport nc = neural_cleanse(model, samples, cfg.defend.neural_cleanse);
        size_t unconverged = 0;
        for (uint8_t c : nc.converged)
            if (!c) ++unconverged;
        CsvWriter csv("class,mask_l1,anomaly_index,converged");
        for (size_t c = 0; c < nc.l1_norms.size(); ++c)
            csv.row({num(c), num(nc.l1_norms[c]), num(nc.anomaly_index[c]), num(static_cast<int>(nc.converged[c]))});
        csv.save(artifact(out_dir, "neural_cleanse.csv"));
        j["neural_cleanse"] = ordered_json{{"l1_norms", nc.l1_norms},
                                           {"anomaly_index", nc.anomaly_index},
                                           {"max_anomaly_index",
                                            *std::max_element(nc.anomaly_index.begin(), nc.anomaly_index.end())},
                                           {"threshold", cfg.defend.neural_cleanse.anomaly_threshold},
                                           {"flagged", nc.flagged},
                                           {"unconverged_classes", unconverged}};
    }

    // ----- cognitive distillation mask norms
    {
        Rng rng(derive_seed(cfg.seed, 0xCD5A));
        std::vector<size_t> clean_pool(ws.test->size());
        std::iota(clean_pool.begin(), clean_pool.end(), 0);
        rng.shuffle(clean_pool);
        const size_t n_clean = std::min(cfg.defend.cd_samples, ws.test->size());
        std::vector<size_t> clean_rows(clean_pool.begin(), clean_pool.begin() + static_cast<long>(n_clean));
        std::sort(clean_rows.begin(), clean_rows.end());
        Matrix clean_samples = take_rows(ws.test->images, clean_rows);

        const size_t n_poison = std::min(cfg.defend.cd_samples, ws.poison->size());
        std::vector<size_t> poison_rows(n_poison);
        std::iota(poison_rows.begin(), poison_rows.end(), 0);
        Matrix poison_samples = take_rows(ws.poison->poisoned, poison_rows);

        const CognitiveDistillationReport cd_clean = cognitive_distillation(model, clean_samples, cfg.defend.cd);
        const CognitiveDistillationReport cd_poison = cognitive_distillation(model, poison_samples, cfg.defend.cd);

        CsvWriter csv("kind,mask_l1,converged");
        for (size_t i = 0; i < cd_clean.l1_norms.size(); ++i)
            csv.row({"clean", num(cd_clean.l1_norms[i]), num(static_cast<int>(cd_clean.converged[i]))});
        for (size_t i = 0; i < cd_poison.l1_norms.size(); ++i)
            csv.row({"poisoned", num(cd_poison.l1_norms[i]), num(static_cast<int>(cd_poison.converged[i]))});
        csv.save(artifact(out_dir, "cognitive_distillation.csv"));

        j["cognitive_distillation"] = ordered_json{{"clean_median_l1", median(cd_clean.l1_norms)},
                                                   {"poisoned_median_l1", median(cd_poison.l1_norms)},
                                                   {"n_clean", cd_clean.l1_norms.size()},
                                                   {"n_poisoned", cd_poison.l1_norms.size()}};
    }

    write_json(artifact(out_dir, "defend_report.json"), j);
}

void stage_audit(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    ensure_model_clean(cfg, ws, out_dir);
    ensure_model_backdoored(cfg, ws, out_dir);

    const AuditReport audit = parameter_audit(*ws.model_clean, *ws.model_backdoored, 1e-8);
    const size_t head_layer = ws.model_clean->encoder_depth;
    size_t outside_head = 0;
    for (size_t li = 0; li < audit.per_layer_affected.size(); ++li)
        if (li != head_layer) outside_head += audit.per_layer_affected[li];

    // encoder parameters compared at checkpoint precision
    auto encoder_f32 = [](const ClassifierModel& m) {
        std::vector<float> out;
        for (size_t li = 0; li < m.encoder_depth; ++li) {
            for (double w : m.layers[li].weight.data) out.push_back(static_cast<float>(w));
            for (double b : m.layers[li].bias) out.push_back(static_cast<float>(b));
        }
        return out;
    };
    const auto enc_clean = encoder_f32(*ws.model_clean);
    const auto enc_bd = encoder_f32(*ws.model_backdoored);
    const bool encoder_identical =
        enc_clean.size() == enc_bd.size() &&
        std::memcmp(enc_clean.data(), enc_bd.data(), enc_clean.size() * sizeof(float)) == 0;

    ordered_json j;
    j["total_params"] = audit.total_params;
    j["affected_params"] = audit.affected_params;
    j["head_param_count"] = ws.model_clean->head().weight.size() + ws.model_clean->head().bias.size();
    j["affected_outside_head"] = outside_head;
    j["share_le_1e2"] = audit.share_le_1e2;
    j["share_gt_1e2"] = audit.share_gt_1e2;
    j["per_layer_affected"] = audit.per_layer_affected;
    j["encoder_identical"] = encoder_identical;
    j["tau"] = 1e-8;
    write_json(artifact(out_dir, "audit_report.json"), j);

    CsvWriter csv("layer,affected");
    for (size_t li = 0; li < audit.per_layer_affected.size(); ++li) csv.row({num(li), num(audit.per_layer_affected[li])});
    csv.save(artifact(out_dir, "audit.csv"));
}

void stage_report(const RunConfig& cfg, Workspace& ws, const std::string& out_dir) {
    (void)ws;
    ordered_json summary;
    summary["config"] = ordered_json::parse(run_config_to_json(cfg));

    ordered_json warnings = ordered_json::array();
    auto merge = [&](const char* key, const char* file) {
        const std::string path = artifact(out_dir, file);
        if (!fs::exists(path)) throw std::runtime_error(std::string("missing stage artifact ") + file);
        ordered_json j = read_json(path);
        if (j.contains("warnings")) {
            for (const auto& w : j.at("warnings")) warnings.push_back(w);
            j.erase("warnings");
        }
        summary[key] = std::move(j);
    };
    merge("pretrain", "pretrain_report.json");
    merge("surgery", "surgery_report.json");
    merge("poison", "poison_report.json");
    merge("eval", "eval_report.json");
    merge("defend", "defend_report.json");
    merge("audit", "audit_report.json");

    // compact OT summary (the full solution lives in ot_solution.json)
    {
        const ordered_json ot = read_json(artifact(out_dir, "ot_solution.json"));
        size_t empty = 0;
        for (const auto& e : ot.at("empty_cells"))
            if (e.get<int>() != 0) ++empty;
        const auto& trace = ot.at("fit_trace");
        summary["ot"] = ordered_json{{"n_targets", ot.at("n_targets")},
                                     {"converged", ot.at("converged")},
                                     {"tolerance_used", ot.at("tolerance_used")},
                                     {"steps", trace.size()},
                                     {"final_grad_inf_norm",
                                      trace.empty() ? ordered_json(nullptr) : trace.back().at("grad_inf_norm")},
                                     {"empty_cells", empty}};
        if (!ot.at("converged").get<bool>()) warnings.push_back("OT potential fit did not reach tolerance");
    }
    {
        const ordered_json mm = read_json(artifact(out_dir, "modemix.json"));
        summary["modemix"] = ordered_json{{"n_pairs_detected", mm.at("n_pairs_detected")},
                                          {"n_pairs_kept", mm.at("n_pairs_kept")},
                                          {"m1_size", mm.at("m1").size()},
                                          {"m2_size", mm.at("m2").size()}};
    }
    if (summary["surgery"].contains("truncated") && summary["surgery"]["truncated"].get<bool>())
        warnings.push_back("M1 had fewer entries than requested replacements; implant truncated");
    summary["warnings"] = warnings;
    write_json(artifact(out_dir, "summary.json"), summary);

    // flat metrics table
    CsvWriter csv("metric,value");
    csv.row({"clean_accuracy_pre", num(summary["eval"]["clean_accuracy_pre"].get<double>())});
    csv.row({"clean_accuracy_post", num(summary["eval"]["clean_accuracy_post"].get<double>())});
    csv.row({"attack_success_rate", num(summary["eval"]["attack_success_rate"].get<double>())});
    csv.row({"baseline_attack_success_rate",
             num(summary["eval"]["baseline"]["attack_success_rate"].get<double>())});
    if (summary["eval"].contains("ablation")) {
        csv.row({"ablation_l2_with_mixture", num(summary["eval"]["ablation"]["l2_with_mixture"].get<double>())});
        csv.row({"ablation_l2_without", num(summary["eval"]["ablation"]["l2_without"].get<double>())});
    }
    if (summary["defend"].contains("activation_clustering"))
        csv.row({"activation_clustering_ari",
                 num(summary["defend"]["activation_clustering"]["ari"].get<double>())});
    csv.row({"audit_affected_params", num(summary["audit"]["affected_params"].get<size_t>())});
    csv.row({"audit_total_params", num(summary["audit"]["total_params"].get<size_t>())});
    csv.save(artifact(out_dir, "metrics.csv"));
}

} // namespace

// ------------------------------------------------------- binary artifacts

void save_latents(const LatentDataset& data, const std::string& path) {
    BinWriter w;
    w.magic("MMLT");
    w.u32(1);
    w.u32(static_cast<uint32_t>(data.size()));
    w.u32(static_cast<uint32_t>(data.dim()));
    w.f64s(data.latents.data);
    w.i32s(data.labels);
    for (uint8_t f : data.poison_flags) w.buf.push_back(f);
    w.finish(path);
}

LatentDataset load_latents(const std::string& path) {
    BinReader r(path);
    r.expect_magic("MMLT");
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error(path + ": unsupported latent artifact version");
    const uint32_t n = r.u32();
    const uint32_t dim = r.u32();
    LatentDataset data;
    data.latents = Matrix(n, dim);
    r.f64s(data.latents.data, static_cast<size_t>(n) * dim);
    r.i32s(data.labels, n);
    data.poison_flags.resize(n);
    r.need(n);
    std::copy(r.buf.begin() + static_cast<long>(r.pos), r.buf.begin() + static_cast<long>(r.pos + n),
              data.poison_flags.begin());
    r.pos += n;
    return data;
}

void save_poison_batch(const PoisonBatch& batch, const std::vector<int>& source_labels, const std::string& path) {
    BinWriter w;
    w.magic("MMPB");
    w.u32(1);
    w.u32(static_cast<uint32_t>(batch.size()));
    w.u32(static_cast<uint32_t>(batch.originals.cols));
    w.u32(static_cast<uint32_t>(batch.assigned_targets.cols));
    w.f64s(batch.originals.data);
    w.f64s(batch.poisoned.data);
    w.f64s(batch.assigned_targets.data);
    w.f64s(batch.final_objectives);
    w.f64s(batch.initial_objectives);
    w.f64s(batch.linf_norms);
    w.f64s(batch.l2_norms);
    for (size_t it : batch.iterations) w.u64(it);
    w.i32s(source_labels);
    w.finish(path);
}

std::pair<PoisonBatch, std::vector<int>> load_poison_batch(const std::string& path) {
    BinReader r(path);
    r.expect_magic("MMPB");
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error(path + ": unsupported poison artifact version");
    const uint32_t n = r.u32();
    const uint32_t dim = r.u32();
    const uint32_t latent_dim = r.u32();
    PoisonBatch b;
    b.originals = Matrix(n, dim);
    b.poisoned = Matrix(n, dim);
    b.assigned_targets = Matrix(n, latent_dim);
    r.f64s(b.originals.data, static_cast<size_t>(n) * dim);
    r.f64s(b.poisoned.data, static_cast<size_t>(n) * dim);
    r.f64s(b.assigned_targets.data, static_cast<size_t>(n) * latent_dim);
    r.f64s(b.final_objectives, n);
    r.f64s(b.initial_objectives, n);
    r.f64s(b.linf_norms, n);
    r.f64s(b.l2_norms, n);
    b.iterations.resize(n);
    for (size_t i = 0; i < n; ++i) {
        r.need(8);
        uint64_t v = 0;
        for (int k = 0; k < 8; ++k) v |= static_cast<uint64_t>(r.buf[r.pos + k]) << (8 * k);
        r.pos += 8;
        b.iterations[i] = static_cast<size_t>(v);
    }
    std::vector<int> labels;
    r.i32s(labels, n);
    return {std::move(b), std::move(labels)};
}

// ------------------------------------------------------------- entry points

void run_stage(const std::string& stage, const RunConfig& config, Workspace& ws, const std::string& out_dir) {
    fs::create_directories(out_dir);
    try {
        if (stage == "pretrain")
            stage_pretrain(config, ws, out_dir);
        else if (stage == "extract")
            stage_extract(config, ws, out_dir);
        else if (stage == "ot-fit")
            stage_ot_fit(config, ws, out_dir);
        else if (stage == "modemix")
            stage_modemix(config, ws, out_dir);
        else if (stage == "surgery")
            stage_surgery(config, ws, out_dir);
        else if (stage == "poison")
            stage_poison(config, ws, out_dir);
        else if (stage == "eval")
            stage_eval(config, ws, out_dir);
        else if (stage == "defend")
            stage_defend(config, ws, out_dir);
        else if (stage == "audit")
            stage_audit(config, ws, out_dir);
        else if (stage == "report")
            stage_report(config, ws, out_dir);
        else
            throw std::invalid_argument("unknown stage '" + stage + "'");
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("[" + stage + "] " + e.what());
    } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        if (!what.empty() && what.front() == '[') throw;  // already tagged
        throw std::runtime_error("[" + stage + "] " + what);
    }
}

void run_pipeline(const RunConfig& config, const std::string& out_dir) {
    fs::create_directories(out_dir);
    save_run_config(config, artifact(out_dir, "config.json"));

    Workspace ws;
    CsvWriter timings("stage,seconds");
    for (const std::string& stage : pipeline_stage_names()) {
        const auto t0 = std::chrono::steady_clock::now();
        run_stage(stage, config, ws, out_dir);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timings.row({stage, fmt_double(secs)});
        std::cout << "[" << stage << "] done in " << secs << " s\n";
    }
    // timings are wall-clock and intentionally live outside summary.json
    timings.save(artifact(out_dir, "stage_timings.csv"));
}

} // namespace mml
