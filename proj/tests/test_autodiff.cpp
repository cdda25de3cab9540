#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <vector>

#include "hcvt/autodiff.hpp"
#include "hcvt/layers.hpp"
#include "oracles.hpp"

using namespace hcvt;
using nn::Mat;
using nn::Tape;
using nn::Var;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Mat<double> m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal(0.0, scale);
    return m;
}

using BuildFn = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

// Central-finite-difference check of d(loss)/d(input) for every coordinate
// of every input matrix.
void gradcheck(std::vector<Mat<double>> xs, const BuildFn& build, double tol = 5e-6,
               double step = 1e-5) {
    std::vector<Mat<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (auto& x : xs) vars.push_back(tape.variable(x));
        Var<double> loss = build(tape, vars);
        REQUIRE(loss.rows() == 1);
        REQUIRE(loss.cols() == 1);
        tape.backward(loss);
        for (auto& v : vars) {
            REQUIRE(v.node->grad.size() == v.val().size());
            analytic.push_back(v.node->grad);
        }
    }
    auto eval = [&](const std::vector<Mat<double>>& inputs) {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& x : inputs) vars.push_back(tape.constant(x));
        return build(tape, vars).val()(0, 0);
    };
    for (std::size_t k = 0; k < xs.size(); ++k) {
        for (Eigen::Index j = 0; j < xs[k].cols(); ++j) {
            for (Eigen::Index i = 0; i < xs[k].rows(); ++i) {
                auto plus = xs, minus = xs;
                plus[k](i, j) += step;
                minus[k](i, j) -= step;
                const double fd = (eval(plus) - eval(minus)) / (2.0 * step);
                const double an = analytic[k](i, j);
                INFO("input ", k, " coord (", i, ",", j, ") analytic=", an, " fd=", fd);
                CHECK(oracle::rel_err(an, fd) < tol);
            }
        }
    }
}

// loss = sum(y .* R) with fixed random R, keeps every output coordinate live.
Var<double> project(Tape<double>& t, Var<double> y, std::uint64_t seed = 7) {
    Rng rng(seed);
    return sum_all(mul(y, t.constant(random_mat(y.rows(), y.cols(), rng))));
}

}  // namespace

TEST_CASE("matmul forward and gradient") {
    Rng rng(1);
    Mat<double> a = random_mat(3, 4, rng), b = random_mat(4, 2, rng);
    {
        Tape<double> t;
        Var<double> y = matmul(t.constant(a), t.constant(b));
        CHECK((y.val() - a * b).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    }
    gradcheck({a, b}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, matmul(v[0], v[1]));
    });
}

TEST_CASE("linear matches matmul plus bias and its gradient") {
    Rng rng(2);
    Mat<double> x = random_mat(5, 3, rng), w = random_mat(4, 3, rng), b = random_mat(1, 4, rng);
    gradcheck({x, w, b}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, linear(v[0], v[1], v[2]));
    });
}

TEST_CASE("elementwise op gradients") {
    Rng rng(3);
    Mat<double> x = random_mat(4, 5, rng);
    for (auto op : {0, 1, 2, 3, 4}) {
        gradcheck({x}, [op](Tape<double>& t, std::vector<Var<double>>& v) {
            Var<double> y;
            switch (op) {
                case 0: y = sigmoid(v[0]); break;
                case 1: y = relu(v[0]); break;
                case 2: y = leaky_relu(v[0], 0.01); break;
                case 3: y = gelu(v[0]); break;
                default: y = scale(v[0], 2.5); break;
            }
            return project(t, y);
        }, 2e-5);
    }
}

TEST_CASE("softmax rows: forward normalization and gradient") {
    Rng rng(4);
    Mat<double> x = random_mat(3, 6, rng);
    {
        Tape<double> t;
        Var<double> y = softmax_rows(t.constant(x));
        for (Eigen::Index r = 0; r < 3; ++r)
            CHECK(y.val().row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
    gradcheck({x}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, softmax_rows(v[0]));
    });
}

TEST_CASE("layernorm gradient (x, gamma, beta)") {
    Rng rng(5);
    Mat<double> x = random_mat(4, 6, rng);
    Mat<double> g = random_mat(1, 6, rng, 0.5);
    g.array() += 1.0;
    Mat<double> b = random_mat(1, 6, rng, 0.3);
    gradcheck({x, g, b}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, layernorm_rows(v[0], v[1], v[2]));
    });
}

TEST_CASE("shape ops gradients: slice/concat/stack/mean") {
    Rng rng(6);
    Mat<double> x = random_mat(3, 8, rng);
    gradcheck({x}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        Var<double> left = slice_cols(v[0], 0, 3);
        Var<double> right = slice_cols(v[0], 3, 5);
        Var<double> cat = nn::concat_cols<double>({right, left});
        return project(t, cat);
    });
    Mat<double> r1 = random_mat(1, 4, rng), r2 = random_mat(1, 4, rng);
    gradcheck({r1, r2}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, nn::stack_rows<double>({v[0], v[1]}));
    });
    gradcheck({x}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, mean_rows(v[0]));
    });
    gradcheck({x}, [](Tape<double>& t, std::vector<Var<double>>& v) { return mean_all(v[0]); });
}

// FD-checks d(loss)/d(param) for one parameter of a layer-backed build fn.
template <class Fn>
void gradcheck_param(nn::Param<double>& p, const Fn& eval_loss, const Mat<double>& analytic,
                     int col_stride = 1, double tol = 5e-6) {
    const Mat<double> saved = p.value;
    for (Eigen::Index j = 0; j < saved.cols(); j += col_stride) {
        for (Eigen::Index i = 0; i < saved.rows(); ++i) {
            p.value = saved;
            p.value(i, j) += 1e-5;
            const double fp = eval_loss();
            p.value = saved;
            p.value(i, j) -= 1e-5;
            const double fm = eval_loss();
            p.value = saved;
            const double fd = (fp - fm) / 2e-5;
            INFO("param ", p.name, " coord (", i, ",", j, ")");
            CHECK(oracle::rel_err(analytic(i, j), fd) < tol);
        }
    }
}

TEST_CASE("conv1x1 gradient (input, weight, bias)") {
    Rng rng(7);
    nn::Conv1x1<double> conv;
    conv.init(3, 5, rng, "t");
    Mat<double> x = random_mat(3, 12, rng);
    auto build = [&conv](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, conv(t, v[0]));
    };
    gradcheck({x}, build);
    Tape<double> t0;
    std::vector<Var<double>> v0{t0.variable(x)};
    t0.backward(build(t0, v0));
    auto eval_loss = [&] {
        Tape<double> t;
        std::vector<Var<double>> v{t.constant(x)};
        return build(t, v).val()(0, 0);
    };
    gradcheck_param(conv.w, eval_loss, *t0.leaf_grad(conv.w));
    gradcheck_param(conv.b, eval_loss, *t0.leaf_grad(conv.b));
}

TEST_CASE("conv3x3 stride-2 gradient and shape") {
    Rng rng(8);
    nn::Conv3x3<double> conv;
    conv.init(2, 3, rng, "t");
    nn::ConvDims dims{2, 2, 8, 8};
    Mat<double> x = random_mat(2, dims.spatial(), rng);
    {
        Tape<double> t;
        Var<double> y = conv(t, t.constant(x), dims);
        nn::ConvDims od = conv.out_dims(dims);
        CHECK(od.h == 4);
        CHECK(od.w == 4);
        CHECK(y.rows() == 3);
        CHECK(y.cols() == od.spatial());
    }
    // gradient w.r.t. the input (weights are leaves owned by conv)
    auto build = [&](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, conv(t, v[0], dims));
    };
    gradcheck({x}, build);
    // gradient w.r.t. weights via tape leaf grads against finite differences
    Tape<double> t0;
    std::vector<Var<double>> v0{t0.variable(x)};
    t0.backward(build(t0, v0));
    auto eval_loss = [&] {
        Tape<double> t;
        std::vector<Var<double>> v{t.constant(x)};
        return build(t, v).val()(0, 0);
    };
    gradcheck_param(conv.w, eval_loss, *t0.leaf_grad(conv.w), 5);
    gradcheck_param(conv.b, eval_loss, *t0.leaf_grad(conv.b));
}

TEST_CASE("patchify gradient and token layout") {
    Rng rng(9);
    nn::ConvDims dims{2, 4, 4, 4};
    Mat<double> x = random_mat(2, dims.spatial(), rng);
    {
        Tape<double> t;
        Var<double> tok = nn::patchify(t.constant(x), dims, 2, 2);
        CHECK(tok.rows() == 2 * 2 * 2);   // (4/2)*(4/2)*(4/2)
        CHECK(tok.cols() == 2 * 2 * 2 * 2);  // c*f*p*p
        // first token, first channel, first frame-slice, top-left pixel
        CHECK(tok.val()(0, 0) == x(0, 0));
    }
    gradcheck({x}, [dims](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, nn::patchify(v[0], dims, 2, 2));
    });
}

TEST_CASE("global average pool gradient") {
    Rng rng(10);
    Mat<double> x = random_mat(3, 10, rng);
    gradcheck({x}, [](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, nn::global_avg_pool(v[0]));
    });
}

TEST_CASE("transformer block gradient w.r.t. input tokens") {
    Rng rng(11);
    nn::TransformerBlock<double> block;
    block.init(8, 16, 2, 0.0, rng, "blk");
    Mat<double> x = random_mat(5, 8, rng, 0.5);
    gradcheck({x}, [&block](Tape<double>& t, std::vector<Var<double>>& v) {
        return project(t, block.forward(t, v[0], nullptr, nullptr));
    }, 2e-5);
}

TEST_CASE("dropout backward applies the forward mask") {
    Rng rng(12);
    Mat<double> x = random_mat(6, 6, rng);
    Rng drop(99);
    Tape<double> t;
    Var<double> xv = t.variable(x);
    Var<double> y = dropout(xv, 0.5, drop);
    t.backward(sum_all(y));
    // gradient entries are either 0 (dropped) or 1/keep
    for (Eigen::Index j = 0; j < 6; ++j)
        for (Eigen::Index i = 0; i < 6; ++i) {
            const double g = xv.node->grad(i, j);
            CHECK((g == 0.0 || g == doctest::Approx(2.0)));
        }
}

TEST_CASE("bce_from_prob values and gradient") {
    Tape<double> t;
    Mat<double> p(1, 1);
    p(0, 0) = 0.5;
    CHECK(nn::bce_from_prob(t.constant(p), 1.0).val()(0, 0) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    CHECK(nn::bce_from_prob(t.constant(p), 0.0).val()(0, 0) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    Mat<double> p2(1, 1);
    p2(0, 0) = 0.8;
    CHECK(nn::bce_from_prob(t.constant(p2), 0.3).val()(0, 0) ==
          doctest::Approx(1.193549604098133).epsilon(1e-12));
    Mat<double> x(1, 1);
    x(0, 0) = 0.37;
    gradcheck({x}, [](Tape<double>& t2, std::vector<Var<double>>& v) {
        return nn::bce_from_prob(v[0], 0.7);
    });
}

TEST_CASE("shared leaves accumulate tied-weight gradients") {
    Rng rng(13);
    nn::Param<double> p;
    nn::init_uniform(p, 1, 4, 0.5, rng, "shared");
    Mat<double> a = random_mat(1, 4, rng), b = random_mat(1, 4, rng);
    Tape<double> t;
    Var<double> w = t.leaf(p);
    Var<double> w2 = t.leaf(p);  // same node returned
    CHECK(w.node == w2.node);
    Var<double> loss = sum_all(add(mul(w, t.constant(a)), mul(w2, t.constant(b))));
    t.backward(loss);
    const Mat<double>* g = t.leaf_grad(p);
    REQUIRE(g != nullptr);
    CHECK((*g - (a + b)).cwiseAbs().maxCoeff() < 1e-14);
}
