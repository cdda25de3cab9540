#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "hcvt/gam.hpp"
#include "oracles.hpp"

using namespace hcvt;
using gam::AttentionWeights;
using gam::FeatureVector;
using gam::GateParams;

namespace {

FeatureVector fv(std::initializer_list<double> v) {
    FeatureVector f;
    f.values = Eigen::VectorXd(Eigen::Index(v.size()));
    Eigen::Index i = 0;
    for (double x : v) f.values[i++] = x;
    return f;
}

GateParams gp(std::initializer_list<double> w, double b) {
    GateParams p;
    p.weight = Eigen::VectorXd(Eigen::Index(w.size()));
    Eigen::Index i = 0;
    for (double x : w) p.weight[i++] = x;
    p.bias = b;
    return p;
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

TEST_CASE("gate_score: analytic anchor points") {
    CHECK(gam::gate_score(fv({1.0, 2.0, 3.0}), gp({0.0, 0.0, 0.0}, 0.0)) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(gam::gate_score(fv({-4.0, 9.0}), gp({0.0, 0.0}, 38.0)) == doctest::Approx(1.0).epsilon(1e-12));
    // sigmoid(0.5*1 - 0.25*2 + 0.1) = sigmoid(0.1)
    CHECK(gam::gate_score(fv({1.0, 2.0}), gp({0.5, -0.25}, 0.1)) ==
          doctest::Approx(0.52497918747894).epsilon(1e-12));
}

TEST_CASE("gate_score: contract violations") {
    CHECK_THROWS_AS(gam::gate_score(fv({1.0, 2.0}), gp({0.1}, 0.0)), contract_error);
    CHECK_THROWS_WITH_AS(gam::gate_score(fv({1.0, 2.0, 3.0}), gp({0.1, 0.2}, 0.0)),
                         doctest::Contains("3"), contract_error);
    FeatureVector bad = fv({1.0, 2.0});
    bad.values[0] = std::nan("");
    CHECK_THROWS_AS(gam::gate_score(bad, gp({0.1, 0.2}, 0.0)), contract_error);
}

TEST_CASE("normalize_scores: anchors, symmetry, order preservation") {
    auto w = gam::normalize_scores({0.5, 0.5});
    CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-15));

    auto w2 = gam::normalize_scores({1.0, 0.0});
    CHECK(w2[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(w2[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));

    auto w3 = gam::normalize_scores({0.8, 0.3});
    CHECK(w3[0] == doctest::Approx(0.6224593312018546).epsilon(1e-12));
    CHECK(w3[1] == doctest::Approx(0.3775406687981454).epsilon(1e-12));

    CHECK_THROWS_AS(gam::normalize_scores({}), contract_error);
    CHECK_THROWS_AS(gam::normalize_scores({0.5, 1.2}), contract_error);
}

TEST_CASE("local_gam_fuse: anchors") {
    Rng rng(5);
    // identical inputs fuse to themselves exactly
    FeatureVector v = fv({0.3, -1.7, 2.2});
    auto p1 = gam::init_gate_params(3, rng), p2 = gam::init_gate_params(3, rng);
    auto [y, a] = gam::local_gam_fuse(v, v, p1, p2);
    for (int i = 0; i < 3; ++i) CHECK(y.values[i] == doctest::Approx(v.values[i]).epsilon(1e-15));
    CHECK(a.sum() == doctest::Approx(1.0).epsilon(1e-12));

    // all-zero gates give the exact mean
    auto z = gp({0, 0, 0}, 0);
    auto [y2, a2] = gam::local_gam_fuse(fv({1, 0, 2}), fv({0, 1, 4}), z, z);
    CHECK(a2[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y2.values[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y2.values[2] == doctest::Approx(3.0).epsilon(1e-15));

    // gate scores 0.8 / 0.3 on basis vectors reproduce the softmax weights
    // (gates with zero weight and bias = logit of the target score)
    auto g08 = gp({0, 0}, std::log(0.8 / 0.2));
    auto g03 = gp({0, 0}, std::log(0.3 / 0.7));
    auto [y3, a3] = gam::local_gam_fuse(fv({1, 0}), fv({0, 1}), g08, g03);
    CHECK(y3.values[0] == doctest::Approx(0.6224593312018546).epsilon(1e-10));
    CHECK(y3.values[1] == doctest::Approx(0.3775406687981454).epsilon(1e-10));

    CHECK_THROWS_AS(gam::local_gam_fuse(fv({1, 2}), fv({1, 2, 3}), z, z), contract_error);
}

TEST_CASE("global_gam_fuse: anchors and contract") {
    Rng rng(6);
    std::vector<GateParams> gates;
    std::vector<FeatureVector> ys;
    FeatureVector v = fv({0.5, -0.5, 1.0, 2.0});
    for (int i = 0; i < 4; ++i) {
        gates.push_back(gam::init_gate_params(4, rng));
        ys.push_back(v);
    }
    auto [Y, betas] = gam::global_gam_fuse(ys, gates);
    for (int i = 0; i < 4; ++i) CHECK(Y.values[i] == doctest::Approx(v.values[i]).epsilon(1e-14));
    CHECK(betas.sum() == doctest::Approx(1.0).epsilon(1e-12));

    // all-zero params: uniform betas, mean output
    std::vector<GateParams> zero(4, gp({0, 0, 0, 0}, 0));
    std::vector<FeatureVector> basis = {fv({1, 0, 0, 0}), fv({0, 1, 0, 0}), fv({0, 0, 1, 0}),
                                        fv({0, 0, 0, 1})};
    auto [Y2, b2] = gam::global_gam_fuse(basis, zero);
    for (int i = 0; i < 4; ++i) {
        CHECK(b2[i] == doctest::Approx(0.25).epsilon(1e-14));
        CHECK(Y2.values[i] == doctest::Approx(0.25).epsilon(1e-14));
    }

    // N=3 basis vectors with pinned gate scores, checked against the oracle
    auto logit = [](double p) { return std::log(p / (1 - p)); };
    std::vector<GateParams> pinned = {gp({0, 0, 0}, logit(0.9)), gp({0, 0, 0}, logit(0.5)),
                                      gp({0, 0, 0}, logit(0.1))};
    std::vector<FeatureVector> basis3 = {fv({1, 0, 0}), fv({0, 1, 0}), fv({0, 0, 1})};
    auto [Y3, b3] = gam::global_gam_fuse(basis3, pinned);
    auto ref = oracle::gated_fusion({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}},
                                    {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}},
                                    {logit(0.9), logit(0.5), logit(0.1)});
    for (int i = 0; i < 3; ++i) {
        CHECK(Y3.values[i] == doctest::Approx(ref.fused[i]).epsilon(1e-12));
        CHECK(b3[i] == doctest::Approx(ref.weights[i]).epsilon(1e-12));
    }

    CHECK_THROWS_AS(gam::global_gam_fuse({v}, {gates[0]}), contract_error);
}

TEST_CASE("property: oracle equivalence on random instances") {
    Rng rng(42);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + int(rng.uniform_int(0, 2));
        const int d = 1 + int(rng.uniform_int(0, 7));
        std::vector<FeatureVector> inputs;
        std::vector<GateParams> gates;
        std::vector<std::vector<double>> oin, ow;
        std::vector<double> ob;
        for (int i = 0; i < n; ++i) {
            FeatureVector f;
            f.values = Eigen::VectorXd(d);
            GateParams g;
            g.weight = Eigen::VectorXd(d);
            for (int j = 0; j < d; ++j) {
                f.values[j] = rng.normal(0, 2);
                g.weight[j] = rng.normal(0, 1);
            }
            g.bias = rng.normal(0, 1);
            oin.push_back(to_std(f.values));
            ow.push_back(to_std(g.weight));
            ob.push_back(g.bias);
            inputs.push_back(std::move(f));
            gates.push_back(std::move(g));
        }
        auto [Y, W] = gam::global_gam_fuse(inputs, gates);
        auto ref = oracle::gated_fusion(oin, ow, ob);
        for (int j = 0; j < d; ++j) CHECK(std::fabs(Y.values[j] - ref.fused[j]) < 1e-10);
        for (int i = 0; i < n; ++i) CHECK(std::fabs(W[i] - ref.weights[i]) < 1e-10);
    }
}

TEST_CASE("property: simplex sum, bounds, order preservation, convexity") {
    Rng rng(43);
    for (int trial = 0; trial < 2000; ++trial) {
        const int n = 2 + int(rng.uniform_int(0, 2));
        std::vector<double> raw(n);
        for (auto& r : raw) r = rng.uniform();
        auto w = gam::normalize_scores(raw);
        CHECK(std::fabs(w.sum() - 1.0) < 1e-6);
        auto [lo, hi] = gam::simplex_bounds(n);
        int argmax_raw = 0, argmax_w = 0;
        for (int i = 0; i < n; ++i) {
            CHECK(w[i] >= lo - 1e-12);
            CHECK(w[i] <= hi + 1e-12);
            if (raw[i] > raw[argmax_raw]) argmax_raw = i;
            if (w[i] > w[argmax_w]) argmax_w = i;
        }
        CHECK(argmax_raw == argmax_w);
    }
    // convex hull: fused coordinates lie inside [min, max] of the inputs
    for (int trial = 0; trial < 200; ++trial) {
        const int d = 3;
        std::vector<FeatureVector> inputs;
        std::vector<GateParams> gates;
        for (int i = 0; i < 3; ++i) {
            FeatureVector f;
            f.values = Eigen::VectorXd(d);
            for (int j = 0; j < d; ++j) f.values[j] = rng.normal(0, 1);
            inputs.push_back(std::move(f));
            gates.push_back(gam::init_gate_params(d, rng));
        }
        auto [Y, W] = gam::global_gam_fuse(inputs, gates);
        for (int j = 0; j < d; ++j) {
            double lo = inputs[0].values[j], hi = lo;
            for (const auto& in : inputs) {
                lo = std::min(lo, in.values[j]);
                hi = std::max(hi, in.values[j]);
            }
            CHECK(Y.values[j] >= lo - 1e-12);
            CHECK(Y.values[j] <= hi + 1e-12);
        }
    }
}

TEST_CASE("property: softmax shift invariance of the normalization") {
    Rng rng(44);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + int(rng.uniform_int(0, 2));
        std::vector<double> raw(n);
        double mx = 0;
        for (auto& r : raw) {
            r = rng.uniform(0.0, 0.6);
            mx = std::max(mx, r);
        }
        const double c = rng.uniform(0.0, 1.0 - mx);
        std::vector<double> shifted = raw;
        for (auto& r : shifted) r += c;
        auto w1 = gam::normalize_scores(raw);
        auto w2 = gam::normalize_scores(shifted);
        for (int i = 0; i < n; ++i) CHECK(w1[i] == doctest::Approx(w2[i]).epsilon(1e-12));
    }
}

TEST_CASE("gradients through fusion match finite differences") {
    Rng rng(45);
    for (int seedi = 0; seedi < 5; ++seedi) {
        const int d = 2 + int(rng.uniform_int(0, 6));
        const int n = 2 + int(rng.uniform_int(0, 2));
        // pack all inputs + gates into flat storage for FD
        std::vector<nn::Mat<double>> xs;
        for (int i = 0; i < n; ++i) {
            nn::Mat<double> z(1, d), w(1, d), b(1, 1);
            for (int j = 0; j < d; ++j) {
                z(0, j) = rng.normal(0, 1);
                w(0, j) = rng.normal(0, 1);
            }
            b(0, 0) = rng.normal(0, 0.5);
            xs.push_back(z);
            xs.push_back(w);
            xs.push_back(b);
        }
        nn::Mat<double> proj(1, d);
        for (int j = 0; j < d; ++j) proj(0, j) = rng.normal(0, 1);

        auto build = [n, proj](nn::Tape<double>& t, std::vector<nn::Var<double>>& v) {
            std::vector<nn::Var<double>> inputs;
            std::vector<gam::GateRef<double>> gates;
            for (int i = 0; i < n; ++i) {
                inputs.push_back(v[3 * i]);
                gates.push_back({v[3 * i + 1], v[3 * i + 2]});
            }
            auto fused = gam::fuse_gated(inputs, gates);
            return sum_all(mul(fused.fused, t.constant(proj)));
        };

        std::vector<nn::Mat<double>> analytic;
        {
            nn::Tape<double> t;
            std::vector<nn::Var<double>> vars;
            for (auto& x : xs) vars.push_back(t.variable(x));
            t.backward(build(t, vars));
            for (auto& v : vars) analytic.push_back(v.node->grad);
        }
        auto eval = [&](const std::vector<nn::Mat<double>>& in) {
            nn::Tape<double> t;
            std::vector<nn::Var<double>> vars;
            for (const auto& x : in) vars.push_back(t.constant(x));
            return build(t, vars).val()(0, 0);
        };
        for (std::size_t k = 0; k < xs.size(); ++k)
            for (Eigen::Index j = 0; j < xs[k].cols(); ++j) {
                auto plus = xs, minus = xs;
                plus[k](0, j) += 1e-5;
                minus[k](0, j) -= 1e-5;
                const double fd = (eval(plus) - eval(minus)) / 2e-5;
                CHECK(oracle::rel_err(analytic[k](0, j), fd) < 1e-4);
            }
    }
}

TEST_CASE("skip_sigmoid option feeds raw gate values to the softmax") {
    gam::GamOptions opt;
    opt.skip_sigmoid = true;
    auto z = gp({0, 0}, 2.0);       // raw score 2.0
    auto z2 = gp({0, 0}, -1.0);     // raw score -1.0
    auto [y, w] = gam::local_gam_fuse(fv({1, 0}), fv({0, 1}), z, z2, opt);
    const double expect = std::exp(2.0) / (std::exp(2.0) + std::exp(-1.0));
    CHECK(w[0] == doctest::Approx(expect).epsilon(1e-12));
    // weights can now exceed the sigmoid-compressed bound
    CHECK(w[0] > gam::simplex_bounds(2).second);
}

TEST_CASE("gate initialization keeps initial raw scores near one half") {
    Rng rng(46);
    for (int trial = 0; trial < 100; ++trial) {
        auto p = gam::init_gate_params(16, rng);
        CHECK(p.bias == 0.0);
        CHECK(p.weight.cwiseAbs().maxCoeff() <= 0.25);  // 1/sqrt(16)
        FeatureVector unit;
        unit.values = Eigen::VectorXd::Ones(16);
        const double s = gam::gate_score(unit, p);
        CHECK(s > 0.05);
        CHECK(s < 0.95);
    }
}
