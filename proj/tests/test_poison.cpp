#include "doctest.h"

#include "mml/poison.hpp"
#include "mml/rng.hpp"

#include <cmath>
#include <numeric>

using namespace mml;

namespace {

// identity-ish encoder: relu(I x) = x for x in [0,1], head maps to 2 classes
ClassifierModel passthrough_model(size_t dim) {
    ClassifierModel m;
    Layer enc;
    enc.weight = Matrix(dim, dim);
    for (size_t i = 0; i < dim; ++i) enc.weight.at(i, i) = 1.0;
    enc.bias.assign(dim, 0.0);
    enc.activation = Activation::Relu;
    Layer head;
    head.weight = Matrix(2, dim, 0.1);
    head.bias = {0.0, 0.0};
    head.activation = Activation::Identity;
    m.layers = {enc, head};
    m.encoder_depth = 1;
    m.latent_dim = dim;
    m.num_classes = 2;
    return m;
}

ModeMixtureSet set_from_matrix(const Matrix& latents) {
    ModeMixtureSet set;
    set.kind = ModeMixtureSet::Kind::M2;
    for (size_t i = 0; i < latents.rows; ++i) {
        MixtureEntry e;
        e.z.assign(latents.row(i), latents.row(i) + latents.cols);
        e.lambda_target = 0.5;
        set.entries.push_back(e);
    }
    return set;
}

double brute_force_min_cost_2x2(const Matrix& d) {
    return std::min(d.at(0, 0) + d.at(1, 1), d.at(0, 1) + d.at(1, 0));
}

} // namespace

TEST_CASE("greedy_pair: a single mixture and image form the only pair") {
    Matrix m(1, 2), im(1, 2);
    m.data = {0.0, 0.0};
    im.data = {1.0, 1.0};
    const auto assign = greedy_pair(m, im);
    CHECK(assign == std::vector<size_t>{0});
}

TEST_CASE("greedy_pair: 2x2 case follows the greedy order") {
    // distance matrix [[1,4],[2,3]] in squared distances
    Matrix mix(2, 1), img(2, 1);
    mix.data = {0.0, 10.0};
    img.data = {1.0, 8.0};  // d2(m0,i0)=1, d2(m0,i1)=64, d2(m1,i0)=81, d2(m1,i1)=4
    const auto assign = greedy_pair(mix, img);
    CHECK(assign[0] == 0);
    CHECK(assign[1] == 1);
}

TEST_CASE("greedy_pair: the first selected pair is the global minimum") {
    Rng rng(222);
    for (int trial = 0; trial < 30; ++trial) {
        Matrix mix(4, 3), img(5, 3);
        for (double& v : mix.data) v = rng.normal();
        for (double& v : img.data) v = rng.normal();
        const auto assign = greedy_pair(mix, img);

        double global_min = std::numeric_limits<double>::infinity();
        size_t gm = 0, gi = 0;
        for (size_t m = 0; m < mix.rows; ++m)
            for (size_t i = 0; i < img.rows; ++i) {
                const double d = squared_distance(mix.row(m), img.row(i), 3);
                if (d < global_min) {
                    global_min = d;
                    gm = m;
                    gi = i;
                }
            }
        CHECK(assign[gi] == gm);
    }
}

TEST_CASE("greedy_pair: equal distances fall back to index order") {
    Matrix mix(2, 1), img(3, 1);
    mix.data = {0.0, 0.0};  // distinct rows are not required here
    img.data = {0.0, 0.0, 0.0};
    const auto assign = greedy_pair(mix, img);
    CHECK(assign[0] == 0);
    CHECK(assign[1] == 1);  // round one: (0,0), (1,1); round two: (0,2)
    CHECK(assign[2] == 0);
}

TEST_CASE("greedy_pair: cyclic reuse balances mixtures across rounds") {
    Rng rng(99);
    Matrix mix(3, 2), img(8, 2);
    for (double& v : mix.data) v = rng.normal();
    for (double& v : img.data) v = rng.normal();
    const auto assign = greedy_pair(mix, img);
    std::vector<size_t> counts(3, 0);
    for (size_t m : assign) ++counts[m];
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*hi - *lo <= 1);  // every round uses each mixture at most once
    CHECK(std::accumulate(counts.begin(), counts.end(), size_t{0}) == 8);
}

TEST_CASE("greedy_pair: 2x2 greedy cost matches the brute-force check") {
    Matrix mix(2, 1), img(2, 1);
    mix.data = {0.0, 10.0};
    img.data = {1.0, 8.0};
    Matrix d(2, 2);
    for (size_t m = 0; m < 2; ++m)
        for (size_t i = 0; i < 2; ++i) d.at(m, i) = squared_distance(mix.row(m), img.row(i), 1);
    const auto assign = greedy_pair(mix, img);
    const double greedy_cost = d.at(assign[0], 0) + d.at(assign[1], 1);
    CHECK(greedy_cost == brute_force_min_cost_2x2(d));
}

TEST_CASE("greedy_pair: empty inputs are rejected") {
    Matrix empty(0, 2), img(1, 2);
    CHECK_THROWS(greedy_pair(empty, img));
    CHECK_THROWS(greedy_pair(img, empty));
}

TEST_CASE("craft_poison: epsilon zero returns the originals exactly") {
    const ClassifierModel model = passthrough_model(4);
    Matrix images(3, 4);
    Rng rng(5);
    for (double& v : images.data) v = rng.uniform();
    Matrix targets(2, 4, 0.9);
    targets.at(1, 1) = 0.1;
    PoisonRecipe recipe;
    recipe.epsilon = 0.0;
    const PoisonBatch batch = craft_poison_latents(model, images, targets, recipe);
    CHECK(batch.poisoned.data == images.data);
    for (double n : batch.linf_norms) CHECK(n == 0.0);
    for (double n : batch.l2_norms) CHECK(n == 0.0);
}

TEST_CASE("craft_poison: an already-optimal image is returned unchanged") {
    const ClassifierModel model = passthrough_model(3);
    Matrix images(1, 3);
    images.data = {0.25, 0.5, 0.75};
    // target latent equals theta_e(image): objective 0 at pert = 0
    Matrix targets(1, 3);
    targets.data = {0.25, 0.5, 0.75};
    PoisonRecipe recipe;
    recipe.max_iters = 200;
    const PoisonBatch batch = craft_poison_latents(model, images, targets, recipe);
    CHECK(batch.poisoned.data == images.data);
    CHECK(batch.final_objectives[0] == 0.0);
}

TEST_CASE("craft_poison: drives latents toward the target within the budget") {
    const ClassifierModel model = passthrough_model(6);
    Rng rng(8);
    Matrix images(5, 6);
    for (double& v : images.data) v = 0.3 + 0.4 * rng.uniform();
    Matrix targets(3, 6);
    for (double& v : targets.data) v = 0.3 + 0.4 * rng.uniform();

    PoisonRecipe recipe;
    recipe.epsilon = 8.0 / 255.0;
    recipe.step_size = 2.0 / 255.0;
    recipe.max_iters = 500;
    const PoisonBatch batch = craft_poison_latents(model, images, targets, recipe);

    for (size_t i = 0; i < batch.size(); ++i) {
        CHECK(batch.final_objectives[i] <= batch.initial_objectives[i]);
        CHECK(batch.final_objectives[i] < batch.initial_objectives[i] * 0.8);  // made real progress
        CHECK(batch.linf_norms[i] <= recipe.epsilon + 1e-9);
    }
    for (double p : batch.poisoned.data) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("craft_poison: feasibility and monotonicity under clamping pressure") {
    const ClassifierModel model = passthrough_model(4);
    Matrix images(4, 4);
    images.data = {0.0, 1.0, 0.01, 0.99, 0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.02, 0.98, 0.5, 0.5};
    Matrix targets(2, 4);
    targets.data = {1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0};

    PoisonRecipe recipe;
    recipe.epsilon = 0.1;
    recipe.step_size = 0.02;
    recipe.max_iters = 300;
    const PoisonBatch batch = craft_poison_latents(model, images, targets, recipe);
    for (size_t i = 0; i < batch.size(); ++i) {
        CHECK(batch.linf_norms[i] <= recipe.epsilon + 1e-9);
        CHECK(batch.final_objectives[i] <= batch.initial_objectives[i]);
    }
    for (double p : batch.poisoned.data) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("craft_poison: deterministic for a fixed recipe") {
    const ClassifierModel model = passthrough_model(5);
    Rng rng(77);
    Matrix images(4, 5);
    for (double& v : images.data) v = rng.uniform();
    Matrix targets(2, 5);
    for (double& v : targets.data) v = rng.uniform();
    PoisonRecipe recipe;
    recipe.max_iters = 120;
    const PoisonBatch a = craft_poison_latents(model, images, targets, recipe);
    const PoisonBatch b = craft_poison_latents(model, images, targets, recipe);
    CHECK(a.poisoned.data == b.poisoned.data);
    CHECK(a.final_objectives == b.final_objectives);
}

TEST_CASE("craft_poison: invalid inputs are rejected") {
    const ClassifierModel model = passthrough_model(4);
    Matrix images(1, 4, 0.5);
    Matrix targets(1, 3, 0.5);  // wrong latent width
    PoisonRecipe recipe;
    CHECK_THROWS(craft_poison_latents(model, images, targets, recipe));

    Matrix bad_pixels(1, 4, 1.5);
    Matrix ok_targets(1, 4, 0.5);
    CHECK_THROWS(craft_poison_latents(model, bad_pixels, ok_targets, recipe));

    PoisonRecipe bad_recipe;
    bad_recipe.epsilon = -0.1;
    CHECK_THROWS(craft_poison_latents(model, images, ok_targets, bad_recipe));
}

TEST_CASE("evaluate_attack: a constant-target model scores ASR 1.0") {
    ClassifierModel model = passthrough_model(4);
    model.head().bias = {100.0, 0.0};  // class 0 always wins

    LabeledImageDataset clean;
    clean.images = Matrix(10, 4, 0.5);
    clean.labels = {0, 0, 0, 1, 1, 1, 1, 1, 1, 1};  // 30% prior for class 0

    PoisonBatch batch;
    batch.originals = Matrix(5, 4, 0.5);
    batch.poisoned = Matrix(5, 4, 0.5);
    const EvalReport report = evaluate_attack(model, clean, batch, 0);
    CHECK(report.attack_success_rate == 1.0);
    CHECK(report.clean_accuracy == doctest::Approx(0.3));
}

TEST_CASE("evaluate_attack: empty inputs are rejected") {
    const ClassifierModel model = passthrough_model(4);
    LabeledImageDataset clean;
    clean.images = Matrix(1, 4, 0.5);
    clean.labels = {0};
    PoisonBatch empty;
    empty.originals = Matrix(0, 4);
    CHECK_THROWS(evaluate_attack(model, clean, empty, 0));
    LabeledImageDataset no_clean;
    no_clean.images = Matrix(0, 4);
    PoisonBatch batch;
    batch.originals = Matrix(1, 4, 0.5);
    batch.poisoned = Matrix(1, 4, 0.5);
    CHECK_THROWS(evaluate_attack(model, no_clean, batch, 0));
}

TEST_CASE("perturbation_ablation: identical target sets give equal norms") {
    const ClassifierModel model = passthrough_model(5);
    Rng rng(31);
    Matrix images(6, 5);
    for (double& v : images.data) v = rng.uniform();
    Matrix targets(3, 5);
    for (double& v : targets.data) v = rng.uniform();

    PoisonRecipe recipe;
    recipe.epsilon = 1.0;
    recipe.step_size = 0.02;
    recipe.max_iters = 200;
    const AblationResult res =
        perturbation_ablation(model, images, set_from_matrix(targets), targets, recipe);
    CHECK(res.l2_with_mixture == doctest::Approx(res.l2_without).epsilon(1e-12));
    CHECK(res.successes_with == res.successes_without);
    CHECK(res.n_images == 6);
}

TEST_CASE("craft_poison: nearer targets need smaller perturbations") {
    const ClassifierModel model = passthrough_model(5);
    Matrix images(4, 5, 0.5);
    Matrix near(1, 5, 0.55);  // close to theta_e(images)
    Matrix far(1, 5, 0.95);

    PoisonRecipe recipe;
    recipe.epsilon = 1.0;
    recipe.step_size = 0.01;
    recipe.max_iters = 400;
    const PoisonBatch a = craft_poison_latents(model, images, near, recipe);
    const PoisonBatch b = craft_poison_latents(model, images, far, recipe);
    const auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    CHECK(mean(a.l2_norms) < mean(b.l2_norms));
}

TEST_CASE("craft_poison: success-stop freezes a row once it classifies as the target") {
    // head prefers class 1 once latent[0] crosses latent[1]
    ClassifierModel model = passthrough_model(2);
    model.head().weight = Matrix(2, 2);
    model.head().weight.at(0, 1) = 1.0;  // class 0 scores latent[1]
    model.head().weight.at(1, 0) = 1.0;  // class 1 scores latent[0]

    Matrix images(1, 2);
    images.data = {0.2, 0.8};  // starts as class 0
    Matrix target(1, 2);
    target.data = {1.0, 0.0};  // drives latent[0] up, latent[1] down

    PoisonRecipe recipe;
    recipe.epsilon = 1.0;
    recipe.step_size = 0.05;
    recipe.max_iters = 300;
    const PoisonBatch stopped = craft_poison_latents(model, images, target, recipe, 1);
    REQUIRE(stopped.success_flags.size() == 1);
    CHECK(stopped.success_flags[0] == 1);
    CHECK(predict(model, stopped.poisoned)[0] == 1);

    const PoisonBatch full = craft_poison_latents(model, images, target, recipe, -1);
    CHECK(stopped.l2_norms[0] < full.l2_norms[0]);  // frozen at first success
}
