#include <cmath>

#include "doctest.h"
#include "oodkit/errors.hpp"
#include "oodkit/numerics.hpp"
#include "oodkit/refmodel.hpp"
#include "oracles/eigen_bridge.hpp"
#include "support/bundle_fuzz.hpp"
#include "support/scratch.hpp"

using namespace oodkit;

namespace {

// Smallest |pre-activation| over all hidden units; used to keep finite
// differences away from rectifier kinks.
double kink_margin(const MlpModel& m, std::span<const double> x) {
    double margin = INFINITY;
    Vector h(x.begin(), x.end());
    const auto& d = m.dense();
    for (std::size_t i = 0; i + 1 < d.size(); ++i) {
        h = affine(d[i].weight, d[i].bias, h);
        for (double& v : h) {
            margin = std::min(margin, std::abs(v));
            v = std::max(v, 0.0);
        }
    }
    return margin;
}

double log_prob(const MlpModel& m, std::span<const double> x, std::size_t c, double t) {
    const Vector f = m.forward(x);
    Vector s(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) s[i] = f[i] / t;
    return s[c] - log_sum_exp(s);
}

}  // namespace

TEST_CASE("forward_capture examples") {
    // identity hidden layer with a bias large enough to stay in the linear regime
    DenseLayer hidden{Matrix::identity(2), {0.0, 0.0}};
    DenseLayer head{Matrix::identity(2), {0.0, 0.0}};
    MlpModel m({hidden, head});
    const Vector x{-1.0, 2.0};
    const Capture c = m.forward_capture(x);
    REQUIRE(c.features.size() == 1);
    CHECK(c.features[0] == Vector{0.0, 2.0});
    CHECK(c.logits == Vector{0.0, 2.0});

    MlpModel lin({DenseLayer{Matrix::identity(2), {10.0, 10.0}}, DenseLayer{Matrix::identity(2), {-10.0, -10.0}}});
    const Vector y{0.25, -0.5};
    CHECK(lin.forward(y) == y);

    CHECK_THROWS_AS(m.forward_capture(Vector{1.0}), ShapeError);

    SplitMix64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        MlpModel r = MlpModel::random({5, 7, 6, 3}, 100 + trial);
        const Matrix xs = oracle::random_matrix(1, 5, rng);
        const Capture cap = r.forward_capture(xs.row(0));
        REQUIRE(cap.features.size() == 2);
        const auto h = r.head();
        CHECK(affine(h.weight, h.bias, cap.features.back()) == cap.logits);
        CHECK(r.layers()[0].name == "hidden1");
        CHECK(r.layers()[1].name == "hidden2");
    }
}

TEST_CASE("input_gradient matches the closed-form softmax-linear gradient") {
    SplitMix64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        // hidden = x + 50 stays positive for |x| < 50, so f = W (x + 50) + b
        DenseLayer hidden{Matrix::identity(3), {50.0, 50.0, 50.0}};
        DenseLayer head{oracle::random_matrix(2, 3, rng), {rng.normal(), rng.normal()}};
        MlpModel m({hidden, head});
        const Matrix x = oracle::random_matrix(1, 3, rng);
        for (std::size_t c = 0; c < 2; ++c) {
            const Vector f = m.forward(x.row(0));
            const double pc = std::exp(f[c]) / (std::exp(f[0]) + std::exp(f[1]));
            const Vector g = m.input_gradient(x.row(0), c, 1.0);
            for (std::size_t j = 0; j < 3; ++j) {
                const double expect = (1.0 - pc) * (head.weight(c, j) - head.weight(1 - c, j));
                CHECK(g[j] == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("input_gradient agrees with central differences on random nets") {
    SplitMix64 rng(29);
    int checked = 0;
    for (int trial = 0; checked < 50 && trial < 500; ++trial) {
        MlpModel m = MlpModel::random({6, 9, 7, 4}, 1000 + trial);
        const Matrix x = oracle::random_matrix(1, 6, rng);
        if (kink_margin(m, x.row(0)) < 1e-2) continue;
        const std::size_t c = rng.below(4);
        const double t = trial % 2 == 0 ? 1.0 : 3.0;
        const Vector g = m.input_gradient(x.row(0), c, t);
        const double h = 1e-4;
        double err = 0.0, scale = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            Vector xp(x.row(0).begin(), x.row(0).end()), xm = xp;
            xp[j] += h;
            xm[j] -= h;
            const double fd = (log_prob(m, xp, c, t) - log_prob(m, xm, c, t)) / (2 * h);
            err = std::max(err, std::abs(fd - g[j]));
            scale = std::max(scale, std::abs(fd));
        }
        CHECK(err <= 1e-4 * std::max(scale, 1e-6));
        ++checked;
    }
    CHECK(checked == 50);
}

TEST_CASE("input_gradient vanishes as the temperature grows") {
    MlpModel m = MlpModel::random({4, 8, 3}, 5);
    const Vector x{0.3, -0.2, 0.9, 1.1};
    const Vector g = m.input_gradient(x, 0, 1e12);
    for (double v : g) CHECK(std::abs(v) <= 1e-8);
    CHECK_THROWS_AS(m.input_gradient(x, 0, 0.0), InvalidParam);
    CHECK_THROWS_AS(m.input_gradient(x, 3, 1.0), InvalidParam);
}

TEST_CASE("rectifier kink takes subgradient 0") {
    // pre-activation of the single hidden unit is exactly 0 at x = 0
    MlpModel m({DenseLayer{Matrix(1, 1, {1.0}), {0.0}}, DenseLayer{Matrix(2, 1, {1.0, -1.0}), {0.0, 0.0}}});
    const Vector g = m.input_gradient(Vector{0.0}, 0, 1.0);
    CHECK(g[0] == 0.0);
}

TEST_CASE("dropout passes") {
    MlpModel m = MlpModel::random({4, 6, 8, 3}, 9);
    const Vector x{0.5, -1.0, 2.0, 0.1};
    const Vector plain = m.forward(x);
    for (const auto& pass : m.dropout_passes(x, 0.0, 5, 77)) CHECK(pass == plain);

    const auto a = m.dropout_passes(x, 0.5, 1, 123);
    const auto b = m.dropout_passes(x, 0.5, 1, 123);
    CHECK(a == b);
    CHECK_THROWS_AS(m.dropout_passes(x, 1.0, 1, 0), InvalidParam);
    CHECK_THROWS_AS(m.dropout_passes(x, 0.5, 0, 0), InvalidParam);

    // masked pass equals the hand-applied inverted-scaling mask
    const auto passes = m.dropout_passes(x, 0.3, 4, 55);
    const Vector z = m.forward_capture(x).features.back();
    for (std::size_t t = 0; t < 4; ++t) {
        const auto keep = MlpModel::dropout_mask(z.size(), 0.3, 55, t);
        Vector zm(z.size());
        for (std::size_t j = 0; j < z.size(); ++j) zm[j] = keep[j] ? z[j] / 0.7 : 0.0;
        CHECK(m.forward_from("hidden2", zm) == passes[t]);
    }
}

TEST_CASE("dropout mask frequencies stay within a 3 sigma binomial bound") {
    const std::size_t passes = 10000, width = 8;
    for (double p : {0.1, 0.5, 0.8}) {
        std::vector<std::size_t> dropped(width, 0);
        for (std::size_t t = 0; t < passes; ++t) {
            const auto keep = MlpModel::dropout_mask(width, p, 2024, t);
            for (std::size_t j = 0; j < width; ++j) dropped[j] += keep[j] ? 0 : 1;
        }
        const double sigma = std::sqrt(p * (1 - p) * passes);
        for (std::size_t j = 0; j < width; ++j)
            CHECK(std::abs(static_cast<double>(dropped[j]) - p * passes) <= 3 * sigma);
    }
}

TEST_CASE("forward_from") {
    MlpModel m = MlpModel::random({5, 6, 4, 3}, 17);
    SplitMix64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x = oracle::random_matrix(1, 5, rng);
        const Capture c = m.forward_capture(x.row(0));
        CHECK(m.forward_from("hidden1", c.features[0]) == c.logits);
        CHECK(m.forward_from("hidden2", c.features[1]) == c.logits);
    }
    CHECK(m.forward_from("hidden2", Vector(4, 0.0)) == m.head().bias);
    CHECK_THROWS_AS(m.forward_from("nope", Vector(4, 0.0)), ShapeError);
    CHECK_THROWS_AS(m.forward_from("hidden2", Vector(3, 0.0)), ShapeError);

    // modified hidden1 feature vs an Eigen-evaluated chain
    const auto& d = m.dense();
    Vector feat{0.5, -0.25, 1.5, 0.0, 2.0, -3.0};
    const Vector got = m.forward_from("hidden1", feat);
    Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(feat.data(), 6);
    h = (oracle::to_eigen(d[1].weight) * h + Eigen::Map<const Eigen::VectorXd>(d[1].bias.data(), 4))
            .cwiseMax(0.0);
    const Eigen::VectorXd out =
        oracle::to_eigen(d[2].weight) * h + Eigen::Map<const Eigen::VectorXd>(d[2].bias.data(), 3);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(got[k] - out[k]) <= 1e-12);
}

TEST_CASE("checkpoint save and load") {
    Scratch dir("refmodel");
    MlpModel m = MlpModel::random({3, 12, 5, 4}, 8, 0.25);
    m.set_view("hidden1", 3, 4);
    m.save(dir.path() / "ckpt");
    const MlpModel back = MlpModel::load(dir.path() / "ckpt");
    CHECK(back.dropout_p() == 0.25);
    CHECK(back.seed() == 8);
    CHECK(back.layers()[0].view_rows == 3);
    CHECK(back.layers()[0].view_cols == 4);
    for (std::size_t i = 0; i < m.dense().size(); ++i) {
        CHECK(back.dense()[i].weight == m.dense()[i].weight);
        CHECK(back.dense()[i].bias == m.dense()[i].bias);
    }
}

TEST_CASE("construction checks") {
    CHECK_THROWS_AS(MlpModel({DenseLayer{Matrix::identity(2), {0.0, 0.0}}}), InvalidParam);
    CHECK_THROWS_AS(MlpModel::random({2, 3, 2}, 0, 1.0), InvalidParam);
    CHECK_THROWS_AS(MlpModel({DenseLayer{Matrix::identity(2), {0.0, 0.0}}, DenseLayer{Matrix::identity(3), {0, 0, 0}}}),
                    ShapeError);
    CHECK(square_view(12) == std::pair<std::size_t, std::size_t>{3, 4});
    CHECK(square_view(7) == std::pair<std::size_t, std::size_t>{1, 7});
    CHECK(square_view(16) == std::pair<std::size_t, std::size_t>{4, 4});
}

TEST_CASE("recorded adapter exposes only what the bundle records") {
    SplitMix64 rng(1);
    BundleContents c = fuzz::base_contents(rng);
    RecordedAdapter withhead(FeatureBundle::from_contents(c));
    CHECK(withhead.supports(Capability::features));
    CHECK(withhead.supports(Capability::forward_from));
    CHECK_FALSE(withhead.supports(Capability::input_grad));
    CHECK_FALSE(withhead.supports(Capability::dropout));
    CHECK_THROWS_AS(withhead.forward(Vector{1.0}), CapabilityError);
    CHECK_THROWS_AS(withhead.input_gradient(Vector{1.0}, 0, 1.0), CapabilityError);
    CHECK_THROWS_AS(withhead.forward_from("block", Vector(6, 0.0)), CapabilityError);
    REQUIRE(withhead.layers().size() == 2);
    CHECK(withhead.layers()[0].view_rows == 2);
    CHECK(withhead.layers()[0].view_cols == 3);
    CHECK(withhead.layers()[1].width == 4);

    const auto head = *FeatureBundle::from_contents(c).head();
    const Vector z{0.1, 0.2, -0.3, 0.4};
    CHECK(withhead.forward_from("penultimate", z) == affine(head.weight, head.bias, z));

    c.manifest.head.reset();
    c.tensors.erase({kHeadSplit, kHeadWeightRole});
    c.tensors.erase({kHeadSplit, kHeadBiasRole});
    RecordedAdapter nohead(FeatureBundle::from_contents(c));
    CHECK_FALSE(nohead.supports(Capability::forward_from));
    CHECK_THROWS_AS(nohead.forward_from("penultimate", z), CapabilityError);
}

TEST_CASE("linear head model") {
    SplitMix64 rng(31);
    const ClassifierHead head{oracle::random_matrix(3, 5, rng), {0.1, -0.2, 0.3}};
    const LinearHeadModel m(head);
    REQUIRE(m.layers().size() == 1);
    CHECK(m.layers()[0].name == "penultimate");
    CHECK(m.layers()[0].view_rows * m.layers()[0].view_cols == 5);

    for (int t = 0; t < 20; ++t) {
        const Matrix x = oracle::random_matrix(1, 5, rng);
        const Vector f = m.forward(x.row(0));
        CHECK(f == affine(head.weight, head.bias, x.row(0)));
        CHECK(m.forward_from("penultimate", x.row(0)) == f);
        for (double temp : {1.0, 10.0}) {
            const Vector g = m.input_gradient(x.row(0), 1, temp);
            for (std::size_t j = 0; j < 5; ++j) {
                Vector hi(x.row(0).begin(), x.row(0).end()), lo = hi;
                hi[j] += 1e-5;
                lo[j] -= 1e-5;
                const double fd = (std::log(softmax(m.forward(hi), temp)[1]) - std::log(softmax(m.forward(lo), temp)[1])) / 2e-5;
                CHECK(std::abs(fd - g[j]) <= 1e-4 * std::max(1.0, std::abs(g[j])));
            }
        }
        const auto none = m.dropout_passes(x.row(0), 0.0, 3, 1);
        for (const Vector& v : none) CHECK(v == f);
        const auto passes = m.dropout_passes(x.row(0), 0.5, 4, 9);
        for (std::size_t pass = 0; pass < 4; ++pass) {
            const auto keep = MlpModel::dropout_mask(5, 0.5, 9, pass);
            Vector masked(5);
            for (std::size_t j = 0; j < 5; ++j) masked[j] = keep[j] ? 2.0 * x(0, j) : 0.0;
            CHECK(passes[pass] == affine(head.weight, head.bias, masked));
        }
    }
    CHECK_THROWS_AS(m.forward_from("hidden1", Vector(5)), ShapeError);
    CHECK_THROWS_AS(LinearHeadModel(ClassifierHead{Matrix(1, 2), {0.0}}), InvalidParam);
}
