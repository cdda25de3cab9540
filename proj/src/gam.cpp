#include "hcvt/gam.hpp"

namespace hcvt::gam {

namespace {

nn::Var<double> as_row(nn::Tape<double>& t, const Eigen::VectorXd& v, bool needs_grad = false) {
    nn::Mat<double> m = v.transpose();
    return needs_grad ? t.variable(std::move(m)) : t.constant(std::move(m));
}

GateRef<double> as_gate(nn::Tape<double>& t, const GateParams& p) {
    nn::Mat<double> w = p.weight.transpose();
    nn::Mat<double> b(1, 1);
    b(0, 0) = p.bias;
    return {t.constant(std::move(w)), t.constant(std::move(b))};
}

void check_finite(const Eigen::VectorXd& v, const char* what) {
    if (!v.allFinite()) throw contract_error(strfmt("%s contains non-finite entries", what));
}

}  // namespace

GateParams init_gate_params(int d_f, Rng& rng) {
    if (d_f < 1) throw contract_error("init_gate_params: fusion dimension must be >= 1");
    GateParams p;
    p.weight.resize(d_f);
    const double bound = 1.0 / std::sqrt(double(d_f));
    for (int i = 0; i < d_f; ++i) p.weight[i] = rng.uniform(-bound, bound);
    p.bias = 0.0;
    return p;
}

double gate_score(const FeatureVector& z, const GateParams& params, const GamOptions& opt) {
    check_finite(z.values, "gate_score: feature");
    check_finite(params.weight, "gate_score: gate weight");
    if (z.values.size() != params.weight.size())
        throw contract_error(strfmt("gate_score: feature length %ld does not match gate weight length %ld",
                                    long(z.values.size()), long(params.weight.size())));
    nn::Tape<double> tape;
    nn::Var<double> s = gate_score_op(as_row(tape, z.values), as_gate(tape, params), opt);
    return s.val()(0, 0);
}

AttentionWeights normalize_scores(const std::vector<double>& raw) {
    if (raw.empty()) throw contract_error("normalize_scores: empty score list");
    for (double r : raw)
        if (!(r >= 0.0 && r <= 1.0))
            throw contract_error(strfmt("normalize_scores: score %g outside [0,1]", r));
    nn::Tape<double> tape;
    std::vector<nn::Var<double>> vars;
    vars.reserve(raw.size());
    for (double r : raw) {
        nn::Mat<double> m(1, 1);
        m(0, 0) = r;
        vars.push_back(tape.constant(std::move(m)));
    }
    nn::Var<double> w = normalize_scores_op(vars);
    AttentionWeights out;
    out.weights = w.val().row(0).transpose();
    return out;
}

std::pair<FeatureVector, AttentionWeights> local_gam_fuse(const FeatureVector& z_vit,
                                                          const FeatureVector& z_cnn,
                                                          const GateParams& p_vit,
                                                          const GateParams& p_cnn,
                                                          const GamOptions& opt) {
    if (z_vit.values.size() != z_cnn.values.size())
        throw contract_error(strfmt("local_gam_fuse: feature lengths %ld and %ld differ",
                                    long(z_vit.values.size()), long(z_cnn.values.size())));
    nn::Tape<double> tape;
    FusedOutput<double> r = local_gam_fuse_op(as_row(tape, z_vit.values), as_row(tape, z_cnn.values),
                                              as_gate(tape, p_vit), as_gate(tape, p_cnn), opt);
    FeatureVector fused{r.fused.val().row(0).transpose(), Origin::Fused};
    AttentionWeights w{r.weights.val().row(0).transpose()};
    return {std::move(fused), std::move(w)};
}

std::pair<FeatureVector, AttentionWeights> global_gam_fuse(const std::vector<FeatureVector>& branch_outputs,
                                                           const std::vector<GateParams>& params,
                                                           const GamOptions& opt) {
    if (branch_outputs.size() < 2)
        throw contract_error(strfmt("global_gam_fuse: need >= 2 branches, got %zu", branch_outputs.size()));
    if (params.size() != branch_outputs.size())
        throw contract_error(strfmt("global_gam_fuse: %zu branches but %zu gates", branch_outputs.size(),
                                    params.size()));
    nn::Tape<double> tape;
    std::vector<nn::Var<double>> inputs;
    std::vector<GateRef<double>> gates;
    inputs.reserve(branch_outputs.size());
    gates.reserve(params.size());
    for (const auto& b : branch_outputs) inputs.push_back(as_row(tape, b.values));
    for (const auto& p : params) gates.push_back(as_gate(tape, p));
    FusedOutput<double> r = global_gam_fuse_op(inputs, gates, opt);
    FeatureVector fused{r.fused.val().row(0).transpose(), Origin::Fused};
    AttentionWeights w{r.weights.val().row(0).transpose()};
    return {std::move(fused), std::move(w)};
}

std::pair<double, double> simplex_bounds(int n_inputs) {
    if (n_inputs < 1) throw contract_error("simplex_bounds: need >= 1 input");
    const double e = std::exp(1.0);
    return {1.0 / (1.0 + (n_inputs - 1) * e), e / (e + (n_inputs - 1))};
}

}  // namespace hcvt::gam
