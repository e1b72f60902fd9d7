#include "mml/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mml {

void PoisonRecipe::validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("poison: epsilon must be nonnegative");
    if (epsilon > 0.0 && !(step_size > 0.0 && step_size <= epsilon))
        throw std::invalid_argument("poison: step_size must be in (0, epsilon]");
}

std::vector<size_t> greedy_pair(const Matrix& mixture_latents, const Matrix& image_latents) {
    if (mixture_latents.rows == 0 || image_latents.rows == 0)
        throw std::invalid_argument("greedy_pair: empty input");
    if (mixture_latents.cols != image_latents.cols)
        throw std::invalid_argument("greedy_pair: latent widths differ");

    struct Edge {
        double d;
        size_t m;
        size_t i;
    };
    std::vector<Edge> edges;
    edges.reserve(mixture_latents.rows * image_latents.rows);
    for (size_t m = 0; m < mixture_latents.rows; ++m)
        for (size_t i = 0; i < image_latents.rows; ++i)
            edges.push_back({squared_distance(mixture_latents.row(m), image_latents.row(i), image_latents.cols),
                             m, i});
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        if (a.d != b.d) return a.d < b.d;
        if (a.m != b.m) return a.m < b.m;
        return a.i < b.i;
    });

    std::vector<size_t> assignment(image_latents.rows, SIZE_MAX);
    size_t unassigned = image_latents.rows;
    std::vector<uint8_t> mixture_used(mixture_latents.rows, 0);
    while (unassigned > 0) {
        // one greedy round; mixtures refresh between rounds (cyclic reuse)
        std::fill(mixture_used.begin(), mixture_used.end(), 0);
        size_t taken = 0;
        const size_t quota = std::min(mixture_latents.rows, unassigned);
        for (const Edge& e : edges) {
            if (taken == quota) break;
            if (assignment[e.i] != SIZE_MAX || mixture_used[e.m]) continue;
            assignment[e.i] = e.m;
            mixture_used[e.m] = 1;
            ++taken;
        }
        unassigned -= taken;
    }
    return assignment;
}

namespace {

double row_objective(const double* latent, const double* target, size_t dim) {
    return squared_distance(latent, target, dim);
}

} // namespace

PoisonBatch craft_poison_latents(const ClassifierModel& model, const Matrix& images, const Matrix& target_latents,
                                 const PoisonRecipe& recipe, int stop_at_class, double stop_at_objective) {
    recipe.validate();
    model.validate();
    if (images.rows == 0) throw std::invalid_argument("craft_poison: empty image batch");
    if (images.cols != model.input_dim()) throw std::invalid_argument("craft_poison: image width mismatch");
    if (target_latents.cols != model.latent_dim)
        throw std::invalid_argument("craft_poison: target latent width " + std::to_string(target_latents.cols) +
                                    " does not match model latent_dim " + std::to_string(model.latent_dim));
    for (double p : images.data)
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("craft_poison: image pixels outside [0,1]");

    const size_t n = images.rows;
    const size_t dim = images.cols;
    const size_t latent_dim = model.latent_dim;

    // pair each image with a mixture target
    Matrix initial_latents = encode(model, images);
    std::vector<size_t> assignment = greedy_pair(target_latents, initial_latents);

    PoisonBatch batch;
    batch.originals = images;
    batch.assigned_targets = Matrix(n, latent_dim);
    for (size_t i = 0; i < n; ++i) {
        const double* src = target_latents.row(assignment[i]);
        std::copy(src, src + latent_dim, batch.assigned_targets.row(i));
    }

    batch.initial_objectives.resize(n);
    for (size_t i = 0; i < n; ++i)
        batch.initial_objectives[i] =
            row_objective(initial_latents.row(i), batch.assigned_targets.row(i), latent_dim);

    batch.poisoned = images;
    batch.final_objectives = batch.initial_objectives;
    batch.iterations.assign(n, 0);
    batch.success_flags.assign(n, 0);

    if (recipe.epsilon > 0.0 && recipe.max_iters > 0) {
        Matrix pert(n, dim);
        Matrix best_pert(n, dim);
        std::vector<double> best_obj = batch.initial_objectives;
        std::vector<double> window_ref = best_obj;  // best at the last 1e-8 improvement
        std::vector<size_t> last_improve(n, 0);
        std::vector<double> step_scale(n, 1.0);  // per-image annealing factor
        std::vector<size_t> active_rows(n);
        std::iota(active_rows.begin(), active_rows.end(), 0);

        const size_t encoder_layers = model.encoder_depth;
        constexpr size_t anneal_window = 25;
        constexpr size_t plateau_window = 50;
        constexpr double plateau_eps = 1e-8;
        constexpr double min_step_scale = 1.0 / 64.0;

        // iter counts evaluated perturbation states; iter 0 is pert = 0
        for (size_t iter = 0; iter <= recipe.max_iters && !active_rows.empty(); ++iter) {
            Matrix sub(active_rows.size(), dim);
            for (size_t r = 0; r < active_rows.size(); ++r) {
                const double* orig = batch.originals.row(active_rows[r]);
                const double* p = pert.row(active_rows[r]);
                double* dst = sub.row(r);
                for (size_t c = 0; c < dim; ++c) dst[c] = orig[c] + p[c];
            }

            ForwardPass pass = forward_cache(model, sub, encoder_layers);
            const Matrix& latents = encoder_layers == 0 ? sub : pass.activations.back();

            // under success-stop crafting, freeze a row the moment the head
            // classifies its current perturbation as the requested class
            std::vector<uint8_t> succeeded(active_rows.size(), 0);
            if (stop_at_class >= 0) {
                const Layer& head = model.head();
                for (size_t r = 0; r < active_rows.size(); ++r) {
                    const double* l = latents.row(r);
                    size_t best = 0;
                    double best_score = dot(l, head.weight.row(0), latent_dim) + head.bias[0];
                    for (size_t cls = 1; cls < head.out_dim(); ++cls) {
                        const double s = dot(l, head.weight.row(cls), latent_dim) + head.bias[cls];
                        if (s > best_score) {
                            best_score = s;
                            best = cls;
                        }
                    }
                    if (best == static_cast<size_t>(stop_at_class)) succeeded[r] = 1;
                }
            }

            std::vector<uint8_t> keep(active_rows.size(), 0);
            size_t n_keep = 0;
            for (size_t r = 0; r < active_rows.size(); ++r) {
                const size_t row = active_rows[r];
                const double obj = row_objective(latents.row(r), batch.assigned_targets.row(row), latent_dim);
                batch.iterations[row] = iter;
                if (succeeded[r] || (stop_at_objective > 0.0 && obj <= stop_at_objective)) {
                    best_obj[row] = obj;
                    const double* p = pert.row(row);
                    std::copy(p, p + dim, best_pert.row(row));
                    batch.success_flags[row] = 1;
                    continue;  // retired at the stop condition
                }
                if (obj < best_obj[row]) {
                    best_obj[row] = obj;
                    const double* p = pert.row(row);
                    std::copy(p, p + dim, best_pert.row(row));
                    if (obj < window_ref[row] - plateau_eps) {
                        window_ref[row] = obj;
                        last_improve[row] = iter;
                    }
                }
                // a stalled image first refines with smaller steps, then stops
                if (step_scale[row] > min_step_scale && iter - last_improve[row] >= anneal_window) {
                    step_scale[row] = std::max(step_scale[row] * 0.5, min_step_scale);
                    last_improve[row] = iter;
                }
                if (iter - last_improve[row] < plateau_window) {
                    keep[r] = 1;
                    ++n_keep;
                }
            }
            if (n_keep == 0 || iter == recipe.max_iters) {
                active_rows.clear();
                break;
            }

            // gradient of ||z - theta_e(x)||^2 w.r.t. latents is 2(latents - z)
            Matrix dlatent(active_rows.size(), latent_dim);
            for (size_t r = 0; r < active_rows.size(); ++r) {
                const double* z = batch.assigned_targets.row(active_rows[r]);
                const double* l = latents.row(r);
                double* g = dlatent.row(r);
                for (size_t c = 0; c < latent_dim; ++c) g[c] = 2.0 * (l[c] - z[c]);
            }
            Matrix input_grad = encoder_layers == 0
                                    ? dlatent
                                    : backward_through(model, sub, pass, dlatent, encoder_layers, nullptr);

            std::vector<size_t> still_active;
            still_active.reserve(n_keep);
            for (size_t r = 0; r < active_rows.size(); ++r) {
                if (!keep[r]) continue;
                const size_t row = active_rows[r];
                still_active.push_back(row);
                const double* orig = batch.originals.row(row);
                const double* g = input_grad.row(r);
                double* p = pert.row(row);
                const double step = recipe.step_size * step_scale[row];
                for (size_t c = 0; c < dim; ++c) {
                    const double sg = g[c] > 0.0 ? 1.0 : (g[c] < 0.0 ? -1.0 : 0.0);
                    double v = p[c] - step * sg;
                    v = std::clamp(v, -recipe.epsilon, recipe.epsilon);
                    // fold the pixel clamp into the perturbation
                    v = std::clamp(orig[c] + v, 0.0, 1.0) - orig[c];
                    p[c] = v;
                }
            }
            active_rows = std::move(still_active);
        }

        for (size_t i = 0; i < n; ++i) {
            const double* orig = batch.originals.row(i);
            const double* p = best_pert.row(i);
            double* out = batch.poisoned.row(i);
            for (size_t c = 0; c < dim; ++c) out[c] = orig[c] + p[c];
        }
        batch.final_objectives = best_obj;
    }

    batch.linf_norms.resize(n);
    batch.l2_norms.resize(n);
    for (size_t i = 0; i < n; ++i) {
        double linf = 0.0, l2 = 0.0;
        const double* a = batch.poisoned.row(i);
        const double* b = batch.originals.row(i);
        for (size_t c = 0; c < dim; ++c) {
            const double d = std::abs(a[c] - b[c]);
            linf = std::max(linf, d);
            l2 += d * d;
        }
        batch.linf_norms[i] = linf;
        batch.l2_norms[i] = std::sqrt(l2);
    }
    ensure_finite(batch.poisoned, "craft_poison");
    return batch;
}

PoisonBatch craft_poison(const ClassifierModel& model, const Matrix& images, const ModeMixtureSet& m2,
                         const PoisonRecipe& recipe) {
    if (m2.entries.empty()) throw std::invalid_argument("craft_poison: empty mixture set");
    return craft_poison_latents(model, images, mixture_latents(m2), recipe);
}

EvalReport evaluate_attack(const ClassifierModel& model, const LabeledImageDataset& clean_test,
                           const PoisonBatch& batch, int target_class) {
    if (clean_test.size() == 0) throw std::invalid_argument("evaluate_attack: empty clean test set");
    if (batch.size() == 0) throw std::invalid_argument("evaluate_attack: empty poison batch");

    EvalReport report;
    report.clean_accuracy = accuracy(model, clean_test);
    report.n_clean = clean_test.size();

    const auto preds = predict(model, batch.poisoned);
    size_t hits = 0;
    for (int p : preds)
        if (p == target_class) ++hits;
    report.attack_success_rate = static_cast<double>(hits) / static_cast<double>(preds.size());
    report.n_poisoned = preds.size();
    return report;
}

AblationResult perturbation_ablation(const ClassifierModel& model, const Matrix& images, const ModeMixtureSet& m2,
                                     const Matrix& target_latents_direct, const PoisonRecipe& recipe_unbounded,
                                     double objective_fraction) {
    if (m2.entries.empty()) throw std::invalid_argument("perturbation_ablation: empty mixture set");
    if (!(objective_fraction > 0.0 && objective_fraction < 1.0))
        throw std::invalid_argument("perturbation_ablation: objective_fraction must be in (0,1)");

    // one shared stop threshold derived from the mixture arm's start
    const Matrix mix = mixture_latents(m2);
    Matrix initial = encode(model, images);
    const std::vector<size_t> assign = greedy_pair(mix, initial);
    double mean_initial = 0.0;
    for (size_t i = 0; i < images.rows; ++i)
        mean_initial += squared_distance(initial.row(i), mix.row(assign[i]), mix.cols);
    mean_initial /= static_cast<double>(images.rows);
    const double threshold = objective_fraction * mean_initial;

    PoisonBatch with = craft_poison_latents(model, images, mix, recipe_unbounded, -1, threshold);
    PoisonBatch without = craft_poison_latents(model, images, target_latents_direct, recipe_unbounded, -1, threshold);

    AblationResult res;
    res.n_images = images.rows;
    const auto success_mean = [](const PoisonBatch& b, size_t& count) {
        double sum = 0.0;
        count = 0;
        for (size_t i = 0; i < b.size(); ++i) {
            if (!b.success_flags[i]) continue;
            sum += b.l2_norms[i];
            ++count;
        }
        return count == 0 ? 0.0 : sum / static_cast<double>(count);
    };
    res.l2_with_mixture = success_mean(with, res.successes_with);
    res.l2_without = success_mean(without, res.successes_without);
    return res;
}

} // namespace mml
