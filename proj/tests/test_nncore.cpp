#include "doctest.h"

#include "mml/classifier.hpp"
#include "mml/rng.hpp"
#include "mml/synth.hpp"
#include "mml/trainer.hpp"

#include <cmath>

using namespace mml;

namespace {

ClassifierModel identity_2d() {
    ClassifierModel m;
    Layer head;
    head.weight = Matrix(2, 2);
    head.weight.at(0, 0) = 1.0;
    head.weight.at(1, 1) = 1.0;
    head.bias = {0.0, 0.0};
    head.activation = Activation::Identity;
    m.layers.push_back(head);
    m.encoder_depth = 0;
    m.latent_dim = 2;
    m.num_classes = 2;
    return m;
}

Matrix row_matrix(std::initializer_list<double> vals) {
    Matrix m(1, vals.size());
    size_t i = 0;
    for (double v : vals) m.data[i++] = v;
    return m;
}

// central finite differences on the mean cross-entropy, the independent
// oracle for backward()
double fd_loss(ClassifierModel& model, const Matrix& batch, const std::vector<int>& labels, double* param,
               double step) {
    const double saved = *param;
    *param = saved + step;
    const double up = cross_entropy(forward(model, batch).logits, labels);
    *param = saved - step;
    const double down = cross_entropy(forward(model, batch).logits, labels);
    *param = saved;
    return (up - down) / (2.0 * step);
}

} // namespace

TEST_CASE("forward: identity layer passes the batch through") {
    ClassifierModel m = identity_2d();
    const auto r = forward(m, row_matrix({0.3, 0.7}));
    CHECK(r.logits.at(0, 0) == doctest::Approx(0.3));
    CHECK(r.logits.at(0, 1) == doctest::Approx(0.7));
    // encoder_depth 0: latents are the input
    CHECK(r.latents.at(0, 0) == doctest::Approx(0.3));
}

TEST_CASE("forward: relu clamps a negative pre-activation to zero") {
    ClassifierModel m;
    Layer l0;
    l0.weight = Matrix(1, 2);
    l0.weight.at(0, 0) = 1.0;
    l0.weight.at(0, 1) = -1.0;
    l0.bias = {-1.0};
    l0.activation = Activation::Relu;
    Layer head;
    head.weight = Matrix(1, 1, 1.0);
    head.bias = {0.0};
    head.activation = Activation::Identity;
    m.layers = {l0, head};
    m.encoder_depth = 1;
    m.latent_dim = 1;
    m.num_classes = 1;

    const auto r = forward(m, row_matrix({0.5, 0.5}));  // pre-activation -1
    CHECK(r.latents.at(0, 0) == 0.0);
    CHECK(r.logits.at(0, 0) == 0.0);
}

TEST_CASE("forward: two-layer net matches hand matrix arithmetic") {
    ClassifierModel m;
    Layer l0;
    l0.weight = Matrix(2, 2);
    l0.weight.at(0, 0) = 1.0;
    l0.weight.at(0, 1) = 2.0;
    l0.weight.at(1, 0) = 3.0;
    l0.weight.at(1, 1) = 4.0;
    l0.bias = {0.5, -0.5};
    l0.activation = Activation::Relu;
    Layer head;
    head.weight = Matrix(2, 2);
    head.weight.at(0, 0) = 1.0;
    head.weight.at(0, 1) = -1.0;
    head.weight.at(1, 0) = 2.0;
    head.weight.at(1, 1) = 0.0;
    head.bias = {0.0, 1.0};
    head.activation = Activation::Identity;
    m.layers = {l0, head};
    m.encoder_depth = 1;
    m.latent_dim = 2;
    m.num_classes = 2;

    const auto r = forward(m, row_matrix({1.0, 2.0}));
    // layer 0: (1*1+2*2+0.5, 3*1+4*2-0.5) = (5.5, 10.5), relu keeps both
    CHECK(r.latents.at(0, 0) == doctest::Approx(5.5));
    CHECK(r.latents.at(0, 1) == doctest::Approx(10.5));
    // head: (5.5-10.5+0, 2*5.5+0+1) = (-5, 12)
    CHECK(r.logits.at(0, 0) == doctest::Approx(-5.0));
    CHECK(r.logits.at(0, 1) == doctest::Approx(12.0));
}

TEST_CASE("forward: dimension mismatch is rejected") {
    ClassifierModel m = identity_2d();
    CHECK_THROWS(forward(m, row_matrix({1.0, 2.0, 3.0})));
}

TEST_CASE("backward matches central finite differences on random small nets") {
    Rng rng(20240501);
    for (int trial = 0; trial < 4; ++trial) {
        const size_t in = 3 + trial;
        ArchSpec arch{{in, 9, 5, 3}};
        ClassifierModel model = make_model(arch, 1000 + trial);

        Matrix batch(5, in);
        for (double& v : batch.data) v = rng.uniform();
        std::vector<int> labels(5);
        for (int& l : labels) l = static_cast<int>(rng.uniform_int(3));

        const Gradients grads = backward(model, batch, labels);

        // 20 random parameters across all layers
        for (int probe = 0; probe < 20; ++probe) {
            const size_t li = rng.uniform_int(model.layers.size());
            Layer& layer = model.layers[li];
            const bool use_bias = rng.uniform() < 0.2;
            double* param;
            double analytic;
            if (use_bias) {
                const size_t k = rng.uniform_int(layer.bias.size());
                param = &layer.bias[k];
                analytic = grads.layers[li].bias[k];
            } else {
                const size_t k = rng.uniform_int(layer.weight.size());
                param = &layer.weight.data[k];
                analytic = grads.layers[li].weight.data[k];
            }
            const double fd = fd_loss(model, batch, labels, param, 1e-5);
            const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-6});
            CHECK(std::abs(fd - analytic) / denom < 1e-4);
        }
    }
}

TEST_CASE("backward: input gradients match finite differences") {
    Rng rng(7);
    ArchSpec arch{{4, 8, 4, 3}};
    ClassifierModel model = make_model(arch, 99);
    Matrix batch(3, 4);
    for (double& v : batch.data) v = rng.uniform();
    std::vector<int> labels = {0, 2, 1};

    const Gradients grads = backward(model, batch, labels);
    for (int probe = 0; probe < 10; ++probe) {
        const size_t k = rng.uniform_int(batch.size());
        const double saved = batch.data[k];
        batch.data[k] = saved + 1e-5;
        const double up = cross_entropy(forward(model, batch).logits, labels);
        batch.data[k] = saved - 1e-5;
        const double down = cross_entropy(forward(model, batch).logits, labels);
        batch.data[k] = saved;
        const double fd = (up - down) / 2e-5;
        const double denom = std::max({std::abs(fd), std::abs(grads.input.data[k]), 1e-6});
        CHECK(std::abs(fd - grads.input.data[k]) / denom < 1e-4);
    }
}

TEST_CASE("backward: saturated correct logits give a vanishing gradient") {
    ClassifierModel m = identity_2d();
    m.head().weight.at(0, 0) = 60.0;  // logits (60, 0) for input (1, 0)
    const Gradients grads = backward(m, row_matrix({1.0, 0.0}), {0});
    double norm = 0.0;
    for (const auto& lg : grads.layers) {
        for (double g : lg.weight.data) norm += g * g;
        for (double g : lg.bias) norm += g * g;
    }
    CHECK(std::sqrt(norm) < 1e-6);
    CHECK(grads.loss < 1e-6);
}

TEST_CASE("backward: duplicated sample equals the single-sample gradient") {
    ArchSpec arch{{3, 6, 4, 2}};
    ClassifierModel model = make_model(arch, 5);
    Matrix one(1, 3);
    one.data = {0.2, 0.8, 0.5};
    Matrix two(2, 3);
    std::copy(one.data.begin(), one.data.end(), two.row(0));
    std::copy(one.data.begin(), one.data.end(), two.row(1));

    const Gradients g1 = backward(model, one, {1});
    const Gradients g2 = backward(model, two, {1, 1});
    for (size_t li = 0; li < model.layers.size(); ++li) {
        for (size_t k = 0; k < g1.layers[li].weight.size(); ++k)
            CHECK(g1.layers[li].weight.data[k] == g2.layers[li].weight.data[k]);
        for (size_t k = 0; k < g1.layers[li].bias.size(); ++k)
            CHECK(g1.layers[li].bias[k] == g2.layers[li].bias[k]);
    }
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    Rng rng(33);
    Matrix logits(16, 10);
    for (double& v : logits.data) v = rng.normal(0.0, 5.0);
    const Matrix p = softmax_rows(logits);
    for (size_t i = 0; i < p.rows; ++i) {
        double sum = 0.0;
        for (size_t j = 0; j < p.cols; ++j) {
            CHECK(p.at(i, j) >= 0.0);
            sum += p.at(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("train: zero epochs returns the initialized model unchanged") {
    LabeledImageDataset data = synth_blobs(2, 20, 4, 3.0, 42);
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 11;
    ArchSpec arch{{4, 6, 4, 2}};
    const ClassifierModel trained = train_classifier(data, arch, cfg);
    const ClassifierModel init = make_model(arch, cfg.seed);
    CHECK(trained.flatten_parameters() == init.flatten_parameters());
}

TEST_CASE("train: linearly separable blobs reach accuracy 1.0") {
    LabeledImageDataset data = synth_blobs(2, 100, 2, 10.0, 7, false);
    TrainConfig cfg;
    cfg.learning_rate = 0.01;  // inputs are O(10); the default 0.1 overshoots
    cfg.epochs = 60;
    cfg.batch_size = 16;
    cfg.seed = 3;
    ArchSpec arch{{2, 8, 4, 2}};
    ClassifierModel model = make_model(arch, cfg.seed);
    train_on(model, data.images, data.labels, cfg);
    size_t hits = 0;
    const auto preds = predict(model, data.images);
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == data.labels[i]) ++hits;
    CHECK(hits == data.size());
}

TEST_CASE("train: same seed twice is bit-identical") {
    LabeledImageDataset data = synth_blobs(3, 40, 5, 4.0, 21);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.seed = 77;
    ArchSpec arch{{5, 10, 6, 3}};
    const ClassifierModel a = train_classifier(data, arch, cfg);
    const ClassifierModel b = train_classifier(data, arch, cfg);
    CHECK(a.flatten_parameters() == b.flatten_parameters());
}

TEST_CASE("train: one plain SGD step equals theta - lr * grad") {
    Matrix x(1, 3);
    x.data = {0.3, 0.9, 0.1};
    std::vector<int> labels = {1};
    ArchSpec arch{{3, 5, 4, 2}};
    ClassifierModel model = make_model(arch, 123);
    const Gradients grads = backward(model, x, labels);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.learning_rate = 0.05;
    cfg.seed = 9;
    ClassifierModel stepped = make_model(arch, 123);
    train_on(stepped, x, labels, cfg);

    for (size_t li = 0; li < model.layers.size(); ++li) {
        for (size_t k = 0; k < model.layers[li].weight.size(); ++k) {
            const double expect = model.layers[li].weight.data[k] - 0.05 * grads.layers[li].weight.data[k];
            CHECK(stepped.layers[li].weight.data[k] == expect);
        }
        for (size_t k = 0; k < model.layers[li].bias.size(); ++k) {
            const double expect = model.layers[li].bias[k] - 0.05 * grads.layers[li].bias[k];
            CHECK(stepped.layers[li].bias[k] == expect);
        }
    }
}

TEST_CASE("train: empty dataset is rejected") {
    LabeledImageDataset data;
    data.images = Matrix(0, 4);
    TrainConfig cfg;
    CHECK_THROWS(train_classifier(data, ArchSpec{{4, 4, 2}}, cfg));
}

TEST_CASE("extract_latents: empty dataset gives an empty latent set") {
    ArchSpec arch{{4, 6, 3, 2}};
    const ClassifierModel model = make_model(arch, 2);
    LabeledImageDataset data;
    data.images = Matrix(0, 4);
    const LatentDataset out = extract_latents(model, data);
    CHECK(out.size() == 0);
    CHECK(out.latents.cols == 3);
}

TEST_CASE("extract_latents: identity encoder reproduces the inputs") {
    ClassifierModel m;
    Layer enc;
    enc.weight = Matrix(2, 2);
    enc.weight.at(0, 0) = 1.0;
    enc.weight.at(1, 1) = 1.0;
    enc.bias = {0.0, 0.0};
    enc.activation = Activation::Identity;
    Layer head;
    head.weight = Matrix(2, 2, 0.5);
    head.bias = {0.0, 0.0};
    head.activation = Activation::Identity;
    m.layers = {enc, head};
    m.encoder_depth = 1;
    m.latent_dim = 2;
    m.num_classes = 2;

    LabeledImageDataset data;
    data.images = Matrix(3, 2);
    data.images.data = {0.1, 0.9, 0.4, 0.2, 0.8, 0.7};
    data.labels = {0, 1, 0};
    const LatentDataset out = extract_latents(m, data);
    CHECK(out.latents.data == data.images.data);
    CHECK(out.labels == data.labels);
    CHECK(out.poison_flags == std::vector<uint8_t>(3, 0));
}

TEST_CASE("extract_latents: trained digit model separates class centroids") {
    LabeledImageDataset train = synth_digits(1200, 99);
    TrainConfig cfg;
    cfg.epochs = 12;
    cfg.seed = 4;
    ArchSpec arch{{784, 64, 16, 10}};
    const ClassifierModel model = train_classifier(train, arch, cfg);
    const LatentDataset lat = extract_latents(model, train);
    CHECK(lat.latents.rows == train.size());
    CHECK(lat.latents.cols == 16);

    Matrix centroids(10, 16);
    std::vector<size_t> counts(10, 0);
    for (size_t i = 0; i < lat.size(); ++i) {
        double* c = centroids.row(lat.labels[i]);
        const double* l = lat.latents.row(i);
        for (size_t j = 0; j < 16; ++j) c[j] += l[j];
        ++counts[lat.labels[i]];
    }
    for (size_t c = 0; c < 10; ++c)
        for (size_t j = 0; j < 16; ++j) centroids.at(c, j) /= static_cast<double>(counts[c]);
    for (size_t a = 0; a < 10; ++a)
        for (size_t b = a + 1; b < 10; ++b)
            CHECK(squared_distance(centroids.row(a), centroids.row(b), 16) > 1e-4);
}
