#pragma once

// Gated attention algebra: linear gating functions squashed by a sigmoid,
// softmax normalization of the gate values, and convex fusion of the gated
// inputs. The same graph ops serve the local (two-path) and global (N-branch)
// fusion; a plain-vector API wraps them for direct evaluation.

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "hcvt/autodiff.hpp"
#include "hcvt/layers.hpp"

namespace hcvt::gam {

struct GamOptions {
    // Feed the raw linear gate value to the softmax instead of its sigmoid.
    // Off by default; the sigmoid bounds each raw score to (0,1), which caps
    // the attainable normalized weights.
    bool skip_sigmoid = false;
};

// ---------------------------------------------------------------------------
// Graph-level ops
// ---------------------------------------------------------------------------

// Trainable gate: weight 1 x d_f, bias 1 x 1.
template <class S>
struct Gate {
    nn::Param<S> w, b;

    void init(int d_f, Rng& rng, const std::string& prefix) {
        const double bound = 1.0 / std::sqrt(double(d_f));
        nn::init_uniform(w, 1, d_f, bound, rng, prefix + ".weight");
        nn::init_const(b, 1, 1, 0.0, prefix + ".bias");
    }

    void collect(nn::ParamList<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

template <class S>
struct GateRef {
    nn::Var<S> w;  // 1 x d_f
    nn::Var<S> b;  // 1 x 1
};

template <class S>
GateRef<S> bind(nn::Tape<S>& t, const Gate<S>& g) {
    return {t.leaf(g.w), t.leaf(g.b)};
}

// sigmoid(w . z + b); z is 1 x d_f.
template <class S>
nn::Var<S> gate_score_op(nn::Var<S> z, const GateRef<S>& g, const GamOptions& opt = {}) {
    if (z.rows() != 1) throw contract_error("gate_score: feature must be a row vector");
    if (z.cols() != g.w.cols())
        throw contract_error(strfmt("gate_score: feature length %ld does not match gate weight length %ld",
                                    long(z.cols()), long(g.w.cols())));
    nn::Var<S> raw = add(matmul(z, transpose(g.w)), g.b);
    return opt.skip_sigmoid ? raw : sigmoid(raw);
}

// Softmax over a list of 1x1 scores -> 1 x N weights.
template <class S>
nn::Var<S> normalize_scores_op(const std::vector<nn::Var<S>>& raw) {
    if (raw.empty()) throw contract_error("normalize_scores: empty score list");
    return softmax_rows(concat_cols(raw));
}

template <class S>
struct FusedOutput {
    nn::Var<S> fused;    // 1 x d_f
    nn::Var<S> weights;  // 1 x N
};

// Shared core of the local and global modules: weights = softmax of the
// (sigmoided) gate values, output = weights-convex combination of the inputs.
template <class S>
FusedOutput<S> fuse_gated(const std::vector<nn::Var<S>>& inputs,
                          const std::vector<GateRef<S>>& gates, const GamOptions& opt = {}) {
    if (inputs.size() < 2)
        throw contract_error(strfmt("gated fusion needs at least 2 inputs, got %zu", inputs.size()));
    if (gates.size() != inputs.size())
        throw contract_error(strfmt("gated fusion: %zu inputs but %zu gates", inputs.size(), gates.size()));
    for (const auto& v : inputs)
        if (v.rows() != 1 || v.cols() != inputs[0].cols())
            throw contract_error(strfmt("gated fusion: input length %ld does not match %ld",
                                        long(v.cols()), long(inputs[0].cols())));
    std::vector<nn::Var<S>> scores;
    scores.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
        scores.push_back(gate_score_op(inputs[i], gates[i], opt));
    nn::Var<S> weights = normalize_scores_op(scores);
    nn::Var<S> fused = matmul(weights, stack_rows(inputs));
    return {fused, weights};
}

template <class S>
FusedOutput<S> local_gam_fuse_op(nn::Var<S> z_vit, nn::Var<S> z_cnn, const GateRef<S>& g_vit,
                                 const GateRef<S>& g_cnn, const GamOptions& opt = {}) {
    return fuse_gated<S>({z_vit, z_cnn}, {g_vit, g_cnn}, opt);
}

template <class S>
FusedOutput<S> global_gam_fuse_op(const std::vector<nn::Var<S>>& branch_outputs,
                                  const std::vector<GateRef<S>>& gates, const GamOptions& opt = {}) {
    return fuse_gated<S>(branch_outputs, gates, opt);
}

// ---------------------------------------------------------------------------
// Plain-vector API (double precision), used directly and by tests.
// ---------------------------------------------------------------------------

struct GateParams {
    Eigen::VectorXd weight;
    double bias = 0.0;
};

enum class Origin { ViT, CNN, BranchOutput, Fused };

struct FeatureVector {
    Eigen::VectorXd values;
    Origin origin = Origin::BranchOutput;
};

struct AttentionWeights {
    Eigen::VectorXd weights;

    double sum() const { return weights.sum(); }
    Eigen::Index size() const { return weights.size(); }
    double operator[](Eigen::Index i) const { return weights[i]; }
};

// Weights drawn uniform in [-1/sqrt(d_f), 1/sqrt(d_f)], bias 0, so initial
// raw scores sit near 0.5 and early training starts near mean fusion.
GateParams init_gate_params(int d_f, Rng& rng);

double gate_score(const FeatureVector& z, const GateParams& params, const GamOptions& opt = {});
AttentionWeights normalize_scores(const std::vector<double>& raw);
std::pair<FeatureVector, AttentionWeights> local_gam_fuse(const FeatureVector& z_vit,
                                                          const FeatureVector& z_cnn,
                                                          const GateParams& p_vit,
                                                          const GateParams& p_cnn,
                                                          const GamOptions& opt = {});
std::pair<FeatureVector, AttentionWeights> global_gam_fuse(const std::vector<FeatureVector>& branch_outputs,
                                                           const std::vector<GateParams>& params,
                                                           const GamOptions& opt = {});

// Analytic bounds for softmax over N sigmoid outputs: each weight lies in
// [1/(1+(N-1)e), e/(e+N-1)].
std::pair<double, double> simplex_bounds(int n_inputs);

}  // namespace hcvt::gam
