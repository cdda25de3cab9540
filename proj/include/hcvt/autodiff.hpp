#pragma once

// Minimal reverse-mode autodiff over Eigen matrices.
//
// A Tape owns the nodes of one forward pass; nodes are appended in creation
// order, which is a valid topological order, so backward() is a single
// reverse sweep. Parameters live outside the tape (Param<S>) and are bound
// in as leaves; gradients stay tape-local until harvested, so several tapes
// can run forward/backward concurrently over the same parameters.

#include <Eigen/Dense>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "hcvt/common.hpp"

namespace hcvt::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;  // accumulated across a batch, consumed by the optimizer
    Mat<S> adam_m, adam_v;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class S>
class Tape;

template <class S>
struct Node {
    Mat<S> owned;
    const Mat<S>* external = nullptr;  // set for parameter leaves
    Mat<S> grad;                       // empty until first accumulation
    std::function<void()> backward;
    bool needs_grad = false;

    const Mat<S>& val() const { return external ? *external : owned; }
    Eigen::Index rows() const { return val().rows(); }
    Eigen::Index cols() const { return val().cols(); }

    // Zero-initialized grad buffer, for ops that accumulate into sub-blocks.
    Mat<S>& grad_buf() {
        if (grad.size() == 0) grad.setZero(rows(), cols());
        return grad;
    }

    template <class E>
    void accum(const E& e) {
        if (!needs_grad) return;
        if (grad.size() == 0)
            grad = e;
        else
            grad += e;
    }
};

template <class S>
struct Var {
    Node<S>* node = nullptr;
    Tape<S>* tape = nullptr;

    const Mat<S>& val() const { return node->val(); }
    const Mat<S>& grad() const { return node->grad; }
    Eigen::Index rows() const { return node->rows(); }
    Eigen::Index cols() const { return node->cols(); }
    explicit operator bool() const { return node != nullptr; }
};

template <class S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<S> leaf(const Param<S>& p) {
        auto it = leaf_index_.find(&p);
        if (it != leaf_index_.end()) return {it->second, this};
        Node<S>& n = append();
        n.external = &p.value;
        n.needs_grad = true;
        leaf_index_.emplace(&p, &n);
        leaves_.push_back({&p, &n});
        return {&n, this};
    }

    Var<S> constant(Mat<S> v) {
        Node<S>& n = append();
        n.owned = std::move(v);
        n.needs_grad = false;
        return {&n, this};
    }

    // An input we want gradients for (gradient checks, CAM inputs).
    Var<S> variable(Mat<S> v) {
        Node<S>& n = append();
        n.owned = std::move(v);
        n.needs_grad = true;
        return {&n, this};
    }

    Node<S>& append() {
        nodes_.emplace_back();
        return nodes_.back();
    }

    void backward(Var<S> root) {
        if (root.rows() != 1 || root.cols() != 1)
            throw contract_error("backward: root must be a 1x1 scalar node");
        Mat<S> seed(1, 1);
        seed(0, 0) = S(1);
        backward(root, seed);
    }

    void backward(Var<S> root, const Mat<S>& seed) {
        root.node->accum(seed);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->grad.size() != 0 && it->backward) it->backward();
        }
    }

    const std::vector<std::pair<const Param<S>*, Node<S>*>>& leaves() const { return leaves_; }

    // Gradient of a bound parameter on this tape (empty matrix if untouched).
    const Mat<S>* leaf_grad(const Param<S>& p) const {
        auto it = leaf_index_.find(&p);
        if (it == leaf_index_.end()) return nullptr;
        return &it->second->grad;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node<S>> nodes_;  // deque: stable addresses for lambda captures
    std::unordered_map<const Param<S>*, Node<S>*> leaf_index_;
    std::vector<std::pair<const Param<S>*, Node<S>*>> leaves_;
};

namespace detail {

template <class S>
Node<S>& make(Tape<S>& t, bool needs_grad) {
    Node<S>& n = t.append();
    n.needs_grad = needs_grad;
    return n;
}

inline void check_same_shape(Eigen::Index r1, Eigen::Index c1, Eigen::Index r2, Eigen::Index c2, const char* op) {
    if (r1 != r2 || c1 != c2)
        throw contract_error(strfmt("%s: shape mismatch %ldx%ld vs %ldx%ld", op, long(r1), long(c1), long(r2), long(c2)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad || b.node->needs_grad);
    n.owned = a.val() + b.val();
    Node<S>* pn = &n;
    Node<S>*pa = a.node, *pb = b.node;
    n.backward = [pn, pa, pb] {
        pa->accum(pn->grad);
        pb->accum(pn->grad);
    };
    return {&n, a.tape};
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad || b.node->needs_grad);
    n.owned = a.val() - b.val();
    Node<S>* pn = &n;
    Node<S>*pa = a.node, *pb = b.node;
    n.backward = [pn, pa, pb] {
        pa->accum(pn->grad);
        pb->accum(-pn->grad);
    };
    return {&n, a.tape};
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad || b.node->needs_grad);
    n.owned = a.val().cwiseProduct(b.val());
    Node<S>* pn = &n;
    Node<S>*pa = a.node, *pb = b.node;
    n.backward = [pn, pa, pb] {
        pa->accum(pn->grad.cwiseProduct(pb->val()));
        pb->accum(pn->grad.cwiseProduct(pa->val()));
    };
    return {&n, a.tape};
}

template <class S>
Var<S> scale(Var<S> a, S k) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val() * k;
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa, k] { pa->accum(pn->grad * k); };
    return {&n, a.tape};
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
    if (a.cols() != b.rows())
        throw contract_error(strfmt("matmul: inner dims %ld vs %ld", long(a.cols()), long(b.rows())));
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad || b.node->needs_grad);
    n.owned.noalias() = a.val() * b.val();
    Node<S>* pn = &n;
    Node<S>*pa = a.node, *pb = b.node;
    n.backward = [pn, pa, pb] {
        if (pa->needs_grad) pa->accum(pn->grad * pb->val().transpose());
        if (pb->needs_grad) pb->accum(pa->val().transpose() * pn->grad);
    };
    return {&n, a.tape};
}

template <class S>
Var<S> transpose(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().transpose();
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa] { pa->accum(pn->grad.transpose()); };
    return {&n, a.tape};
}

// x: R x in, w: out x in, b: 1 x out; returns x*w^T + b per row.
template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
    if (x.cols() != w.cols())
        throw contract_error(strfmt("linear: input width %ld vs weight fan-in %ld", long(x.cols()), long(w.cols())));
    if (b.rows() != 1 || b.cols() != w.rows())
        throw contract_error("linear: bias shape must be 1 x fan-out");
    Node<S>& n = detail::make(*x.tape, x.node->needs_grad || w.node->needs_grad || b.node->needs_grad);
    n.owned.noalias() = x.val() * w.val().transpose();
    n.owned.rowwise() += b.val().row(0);
    Node<S>* pn = &n;
    Node<S>*px = x.node, *pw = w.node, *pb = b.node;
    n.backward = [pn, px, pw, pb] {
        if (px->needs_grad) px->accum(pn->grad * pw->val());
        if (pw->needs_grad) pw->accum(pn->grad.transpose() * px->val());
        if (pb->needs_grad) pb->accum(pn->grad.colwise().sum());
    };
    return {&n, x.tape};
}

template <class S>
Var<S> sigmoid(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa] {
        pa->accum(pn->grad.cwiseProduct(pn->owned.cwiseProduct((1 - pn->owned.array()).matrix())));
    };
    return {&n, a.tape};
}

template <class S>
Var<S> relu(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().cwiseMax(S(0));
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa] {
        pa->accum((pa->val().array() > S(0)).template cast<S>().matrix().cwiseProduct(pn->grad));
    };
    return {&n, a.tape};
}

template <class S>
Var<S> leaky_relu(Var<S> a, S slope) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().unaryExpr([slope](S x) { return x > S(0) ? x : slope * x; });
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa, slope] {
        pa->accum(pa->val().unaryExpr([slope](S x) { return x > S(0) ? S(1) : slope; }).cwiseProduct(pn->grad));
    };
    return {&n, a.tape};
}

// Exact GELU, x * Phi(x).
template <class S>
Var<S> gelu(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().unaryExpr([](S x) {
        return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475244)));
    });
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa] {
        pa->accum(pa->val()
                      .unaryExpr([](S x) {
                          const S phi = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475244)));
                          const S pdf = S(0.3989422804014326779) * std::exp(S(-0.5) * x * x);
                          return phi + x * pdf;
                      })
                      .cwiseProduct(pn->grad));
    };
    return {&n, a.tape};
}

// Row-wise softmax with max subtraction.
template <class S>
Var<S> softmax_rows(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    Mat<S> y = a.val();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const S m = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    n.owned = std::move(y);
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa] {
        const Mat<S>& y = pn->owned;
        const Mat<S>& g = pn->grad;
        Mat<S> dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const S dot = g.row(r).dot(y.row(r));
            dx.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
        }
        pa->accum(dx);
    };
    return {&n, a.tape};
}

// Row-wise layer normalization; gamma/beta are 1 x cols.
template <class S>
Var<S> layernorm_rows(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 || beta.cols() != x.cols())
        throw contract_error("layernorm: gamma/beta must be 1 x feature-dim");
    Node<S>& n = detail::make(*x.tape, x.node->needs_grad || gamma.node->needs_grad || beta.node->needs_grad);
    const Eigen::Index R = x.rows(), C = x.cols();
    Mat<S> xhat(R, C);
    Mat<S> inv_std(R, 1);
    for (Eigen::Index r = 0; r < R; ++r) {
        const S mu = x.val().row(r).mean();
        const S var = (x.val().row(r).array() - mu).square().sum() / S(C);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std(r, 0) = is;
        xhat.row(r) = (x.val().row(r).array() - mu).matrix() * is;
    }
    n.owned = (xhat.array().rowwise() * gamma.val().row(0).array()).matrix();
    n.owned.rowwise() += beta.val().row(0);
    Node<S>* pn = &n;
    Node<S>*px = x.node, *pg = gamma.node, *pb = beta.node;
    auto xhat_p = std::make_shared<Mat<S>>(std::move(xhat));
    auto istd_p = std::make_shared<Mat<S>>(std::move(inv_std));
    n.backward = [pn, px, pg, pb, xhat_p, istd_p] {
        const Mat<S>& g = pn->grad;
        const Mat<S>& xh = *xhat_p;
        if (pg->needs_grad) pg->accum(g.cwiseProduct(xh).colwise().sum());
        if (pb->needs_grad) pb->accum(g.colwise().sum());
        if (px->needs_grad) {
            const Eigen::Index R = g.rows(), C = g.cols();
            Mat<S> dx(R, C);
            for (Eigen::Index r = 0; r < R; ++r) {
                // dxhat = g * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
                    g.row(r).array() * pg->val().row(0).array();
                const S m1 = dxhat.mean();
                const S m2 = (dxhat * xh.row(r).array()).mean();
                dx.row(r) = ((dxhat - m1 - xh.row(r).array() * m2) * (*istd_p)(r, 0)).matrix();
            }
            px->accum(dx);
        }
    };
    return {&n, x.tape};
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols())
        throw contract_error("slice_cols: range out of bounds");
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().middleCols(start, count);
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa, start, count] {
        if (!pa->needs_grad) return;
        pa->grad_buf().middleCols(start, count) += pn->grad;
    };
    return {&n, a.tape};
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: empty input");
    Eigen::Index total = 0;
    bool ng = false;
    for (const auto& p : parts) {
        if (p.rows() != parts[0].rows()) throw contract_error("concat_cols: row mismatch");
        total += p.cols();
        ng = ng || p.node->needs_grad;
    }
    Node<S>& n = detail::make(*parts[0].tape, ng);
    n.owned.resize(parts[0].rows(), total);
    Eigen::Index off = 0;
    std::vector<Node<S>*> srcs;
    std::vector<Eigen::Index> offs;
    for (const auto& p : parts) {
        n.owned.middleCols(off, p.cols()) = p.val();
        srcs.push_back(p.node);
        offs.push_back(off);
        off += p.cols();
    }
    Node<S>* pn = &n;
    n.backward = [pn, srcs, offs] {
        for (std::size_t i = 0; i < srcs.size(); ++i) {
            if (!srcs[i]->needs_grad) continue;
            srcs[i]->accum(pn->grad.middleCols(offs[i], srcs[i]->cols()));
        }
    };
    return {&n, parts[0].tape};
}

template <class S>
Var<S> stack_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw contract_error("stack_rows: empty input");
    bool ng = false;
    for (const auto& p : parts) {
        if (p.rows() != 1) throw contract_error("stack_rows: inputs must be row vectors");
        if (p.cols() != parts[0].cols()) throw contract_error("stack_rows: col mismatch");
        ng = ng || p.node->needs_grad;
    }
    Node<S>& n = detail::make(*parts[0].tape, ng);
    n.owned.resize(Eigen::Index(parts.size()), parts[0].cols());
    std::vector<Node<S>*> srcs;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        n.owned.row(Eigen::Index(i)) = parts[i].val();
        srcs.push_back(parts[i].node);
    }
    Node<S>* pn = &n;
    n.backward = [pn, srcs] {
        for (std::size_t i = 0; i < srcs.size(); ++i) {
            if (!srcs[i]->needs_grad) continue;
            srcs[i]->accum(pn->grad.row(Eigen::Index(i)));
        }
    };
    return {&n, parts[0].tape};
}

// Mean over rows: R x C -> 1 x C.
template <class S>
Var<S> mean_rows(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned = a.val().colwise().mean();
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    const S inv = S(1) / S(a.rows());
    n.backward = [pn, pa, inv] { pa->accum((pn->grad * inv).replicate(pa->rows(), 1)); };
    return {&n, a.tape};
}

// Mean over all entries -> 1 x 1.
template <class S>
Var<S> mean_all(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned.resize(1, 1);
    n.owned(0, 0) = a.val().mean();
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    const S inv = S(1) / S(a.rows() * a.cols());
    n.backward = [pn, pa, inv] {
        pa->accum(Mat<S>::Constant(pa->rows(), pa->cols(), pn->grad(0, 0) * inv));
    };
    return {&n, a.tape};
}

template <class S>
Var<S> sum_all(Var<S> a) {
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    n.owned.resize(1, 1);
    n.owned(0, 0) = a.val().sum();
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa] {
        pa->accum(Mat<S>::Constant(pa->rows(), pa->cols(), pn->grad(0, 0)));
    };
    return {&n, a.tape};
}

// Inverted dropout; mask drawn at forward time from the supplied RNG.
template <class S>
Var<S> dropout(Var<S> a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw contract_error("dropout: rate must be < 1");
    Node<S>& n = detail::make(*a.tape, a.node->needs_grad);
    auto mask = std::make_shared<Mat<S>>(a.rows(), a.cols());
    const S keep_inv = S(1.0 / (1.0 - rate));
    for (Eigen::Index c = 0; c < a.cols(); ++c)
        for (Eigen::Index r = 0; r < a.rows(); ++r)
            (*mask)(r, c) = rng.uniform() < rate ? S(0) : keep_inv;
    n.owned = a.val().cwiseProduct(*mask);
    Node<S>* pn = &n;
    Node<S>* pa = a.node;
    n.backward = [pn, pa, mask] { pa->accum(pn->grad.cwiseProduct(*mask)); };
    return {&n, a.tape};
}

// Binary cross entropy against a (possibly soft) target, probability input.
// Probabilities outside [eps, 1-eps] are clamped and the clamp is logged.
template <class S>
Var<S> bce_from_prob(Var<S> p, double target, double eps = 1e-7) {
    if (p.rows() != 1 || p.cols() != 1) throw contract_error("bce_from_prob: p must be 1x1");
    if (target < 0.0 || target > 1.0) throw contract_error("bce_from_prob: target outside [0,1]");
    Node<S>& n = detail::make(*p.tape, p.node->needs_grad);
    const double raw = double(p.val()(0, 0));
    double pc = raw;
    if (pc < eps || pc > 1.0 - eps) {
        pc = std::min(std::max(pc, eps), 1.0 - eps);
        log_warn(strfmt("bce: probability %.3g clamped to [%.1g, 1-%.1g]", raw, eps, eps));
    }
    n.owned.resize(1, 1);
    n.owned(0, 0) = S(-(target * std::log(pc) + (1.0 - target) * std::log(1.0 - pc)));
    Node<S>* pn = &n;
    Node<S>* pa = p.node;
    const bool clamped = raw < eps || raw > 1.0 - eps;
    n.backward = [pn, pa, target, pc, clamped] {
        // d/dp of the clamped loss is zero outside the clamp interval
        const S d = clamped ? S(0) : S((pc - target) / (pc * (1.0 - pc)));
        Mat<S> g(1, 1);
        g(0, 0) = d * pn->grad(0, 0);
        pa->accum(g);
    };
    return {&n, p.tape};
}

}  // namespace hcvt::nn
