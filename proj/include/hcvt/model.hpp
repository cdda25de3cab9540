#pragma once

// The network: per-sequence Dual-Path Attention branches (ViT + CNN behind
// two independent 1x1 convolutions, fused by a local gated-attention
// module), a clinical MLP encoder, global gated-attention fusion over the
// branches, a sigmoid classification head, and the ablation variants.
// Forward passes are read-only over the parameters; every pass builds its
// own tape, so concurrent inference is safe.

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>

#include <json.hpp>

#include "hcvt/gam.hpp"
#include "hcvt/layers.hpp"
#include "hcvt/model_config.hpp"
#include "hcvt/types.hpp"

namespace hcvt::model {

inline constexpr const char* kCheckpointVersion = "hcvt-ckpt-1";
inline constexpr char kCheckpointMagic[8] = {'H', 'C', 'V', 'T', 'C', 'K', 'P', 'T'};

struct Prediction {
    double probability = 0.5;
    gam::AttentionWeights branch_betas;
    std::map<Sequence, gam::AttentionWeights> per_branch_alphas;
};

template <class S>
struct ForwardResult {
    nn::Var<S> prob;   // 1x1, strictly inside (0,1)
    nn::Var<S> logit;  // 1x1, pre-sigmoid
    nn::Var<S> fused;  // 1 x d_f
    nn::Var<S> betas;  // 1 x N
    std::map<Sequence, nn::Var<S>> alphas;  // per image branch (2 entries each)
};

// Optional per-pass recordings for the explainability module.
template <class S>
struct ForwardTrace {
    bool record_conv3 = false;
    bool record_attention = false;
    std::map<Sequence, nn::Var<S>> conv3;
    std::map<Sequence, nn::ConvDims> conv3_dims;
    std::map<Sequence, std::vector<nn::Mat<S>>> attention;  // head-averaged, per block
};

namespace detail {

// One Dual-Path Attention block.
template <class S>
struct DpaBranch {
    nn::Conv1x1<S> conv_vit, conv_cnn;
    nn::ViTExtractor<S> vit;
    nn::CnnExtractor<S> cnn;
    gam::Gate<S> gate_vit, gate_cnn;
    bool local_gam = true;
    gam::GamOptions gam_opt;
    nn::ConvDims input_dims;  // channels = 1 (or 3 when sequences are stacked)

    void init(const ModelConfig& cfg, int in_channels, Rng& rng, const std::string& prefix) {
        local_gam = cfg.uses_local_gam();
        gam_opt.skip_sigmoid = cfg.gating.skip_sigmoid;
        input_dims = {in_channels, cfg.input.depth, cfg.input.size, cfg.input.size};
        conv_vit.init(in_channels, cfg.conv.vit_channels, rng, prefix + ".conv_vit");
        conv_cnn.init(in_channels, cfg.conv.cnn_channels, rng, prefix + ".conv_cnn");
        const nn::ConvDims vit_dims{cfg.conv.vit_channels, cfg.input.depth, cfg.input.size,
                                    cfg.input.size};
        const nn::ConvDims cnn_dims{cfg.conv.cnn_channels, cfg.input.depth, cfg.input.size,
                                    cfg.input.size};
        vit.init(vit_dims, cfg.vit.patch_size, cfg.vit.frame_patch_size, cfg.vit.embed_dim,
                 cfg.vit.depth, cfg.vit.heads, cfg.vit.resolved_mlp_dim(), cfg.vit.dropout,
                 cfg.vit.emb_dropout, cfg.fusion_dim, rng, prefix + ".vit");
        cnn.init(cnn_dims, cfg.cnn.channels, cfg.cnn.leaky_slope, cfg.fusion_dim, rng,
                 prefix + ".cnn");
        gate_vit.init(cfg.fusion_dim, rng, prefix + ".gate_vit");
        gate_cnn.init(cfg.fusion_dim, rng, prefix + ".gate_cnn");
    }

    struct Out {
        nn::Var<S> y;
        nn::Var<S> alphas;
        nn::Var<S> z_vit, z_cnn;  // pre-fusion path outputs
    };

    Out forward(nn::Tape<S>& t, nn::Var<S> x, Rng* drop, Sequence seq, ForwardTrace<S>* trace) const {
        nn::Var<S> xv = conv_vit(t, x);
        nn::Var<S> xc = conv_cnn(t, x);
        std::vector<nn::Mat<S>>* attn_rec = nullptr;
        if (trace && trace->record_attention) attn_rec = &trace->attention[seq];
        nn::Var<S> z_vit = vit.forward(t, xv, drop, attn_rec);
        nn::Var<S>* conv3 = nullptr;
        nn::ConvDims* conv3_dims = nullptr;
        if (trace && trace->record_conv3) {
            conv3 = &trace->conv3[seq];
            conv3_dims = &trace->conv3_dims[seq];
        }
        nn::Var<S> z_cnn = cnn.forward(t, xc, conv3, conv3_dims);
        if (local_gam) {
            auto fused = gam::local_gam_fuse_op(z_vit, z_cnn, gam::bind(t, gate_vit),
                                                gam::bind(t, gate_cnn), gam_opt);
            return {fused.fused, fused.weights, z_vit, z_cnn};
        }
        // ablated: plain mean of the two paths, fixed half/half weights
        nn::Var<S> y = scale(add(z_vit, z_cnn), S(0.5));
        nn::Mat<S> half(1, 2);
        half(0, 0) = half(0, 1) = S(0.5);
        return {y, t.constant(std::move(half)), z_vit, z_cnn};
    }

    void collect(nn::ParamList<S>& out) {
        conv_vit.collect(out);
        conv_cnn.collect(out);
        vit.collect(out);
        cnn.collect(out);
        gate_vit.collect(out);
        gate_cnn.collect(out);
    }
};

}  // namespace detail

template <class S>
class HCnnVit {
public:
    HCnnVit(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        validate(cfg_);
        Rng rng(mix_seed(seed, "model-init"));
        const bool shared_branch =
            cfg_.variant == Variant::single_branch || cfg_.variant == Variant::conditional_single_branch;
        if (shared_branch) {
            branches_.resize(1);
            if (cfg_.variant == Variant::single_branch) {
                branches_[0].init(cfg_, 3, rng, "branch.stack");
            } else {
                branches_[0].init(cfg_, 1, rng, "branch.shared");
                for (std::size_t i = 0; i < kSequences.size(); ++i)
                    nn::init_const(cond_tokens_[i], 1, cfg_.fusion_dim, 0.0,
                                   std::string("cond_token.") + to_string(kSequences[i]));
            }
        } else {
            branches_.resize(3);
            for (std::size_t i = 0; i < kSequences.size(); ++i)
                branches_[i].init(cfg_, 1, rng, std::string("branch.") + to_string(kSequences[i]));
        }
        if (cfg_.uses_clinical()) {
            clin_fc1_.init(7, cfg_.clinical.hidden[0], rng, "clinical.fc1");
            clin_fc2_.init(cfg_.clinical.hidden[0], cfg_.fusion_dim, rng, "clinical.fc2");
        }
        global_gates_.resize(std::size_t(cfg_.branch_count()));
        for (std::size_t i = 0; i < global_gates_.size(); ++i)
            global_gates_[i].init(cfg_.fusion_dim, rng, "global_gam.gate." + std::to_string(i));
        head_fc1_.init(cfg_.fusion_dim, cfg_.head.hidden[0], rng, "head.fc1");
        head_fc2_.init(cfg_.head.hidden[0], 1, rng, "head.fc2");

        collect_params();
    }

    // params_ holds pointers into this object; copying would alias state and
    // moving must rebuild the registry
    HCnnVit(const HCnnVit&) = delete;
    HCnnVit& operator=(const HCnnVit&) = delete;
    HCnnVit(HCnnVit&& other) noexcept
        : cfg_(std::move(other.cfg_)),
          branches_(std::move(other.branches_)),
          cond_tokens_(std::move(other.cond_tokens_)),
          clin_fc1_(std::move(other.clin_fc1_)),
          clin_fc2_(std::move(other.clin_fc2_)),
          global_gates_(std::move(other.global_gates_)),
          head_fc1_(std::move(other.head_fc1_)),
          head_fc2_(std::move(other.head_fc2_)) {
        collect_params();
    }
    HCnnVit& operator=(HCnnVit&&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<nn::Param<S>*>& params() const { return params_; }
    std::vector<nn::Param<S>*>& params() { return params_; }

    // Value snapshot/restore of all parameters (e.g. best-epoch bookkeeping).
    std::vector<nn::Mat<S>> state_snapshot() const {
        std::vector<nn::Mat<S>> out;
        out.reserve(params_.size());
        for (const auto* p : params_) out.push_back(p->value);
        return out;
    }

    void load_state(const std::vector<nn::Mat<S>>& state) {
        if (state.size() != params_.size())
            throw contract_error("load_state: parameter count mismatch");
        for (std::size_t i = 0; i < state.size(); ++i) params_[i]->value = state[i];
    }

    nn::Param<S>* param_by_name(const std::string& name) {
        for (auto* p : params_)
            if (p->name == name) return p;
        return nullptr;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto* p : params_) n += std::size_t(p->value.size());
        return n;
    }

    // Hash over all parameter values (used to assert read-only passes).
    std::uint64_t param_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto* p : params_)
            h = fnv1a64(p->value.data(), std::size_t(p->value.size()) * sizeof(S), h);
        return h;
    }

    // Encodes the 7 normalized clinical attributes into the fusion space.
    nn::Var<S> clinical_encode(nn::Tape<S>& t, const Eigen::VectorXd& clinical) const {
        if (!cfg_.uses_clinical()) throw contract_error("clinical_encode: variant has no clinical branch");
        if (clinical.size() != 7)
            throw contract_error(strfmt("clinical_encode: expected 7 features, got %ld",
                                        long(clinical.size())));
        if (!clinical.allFinite()) throw contract_error("clinical_encode: non-finite input");
        nn::Mat<S> row = clinical.transpose().cast<S>();
        return clin_fc2_(t, relu(clin_fc1_(t, t.constant(std::move(row)))));
    }

    // Classification head on the fused representation.
    nn::Var<S> classify_logit(nn::Tape<S>& t, nn::Var<S> fused, Rng* drop) const {
        nn::Var<S> h = relu(head_fc1_(t, fused));
        if (drop) h = dropout(h, cfg_.head.dropout, *drop);
        return head_fc2_(t, h);
    }

    // One Dual-Path Attention pass. For single_branch the three sequences are
    // stacked as channels and the sequence argument only keys the trace; for
    // conditional_single_branch the shared block runs on the chosen sequence
    // (without the conditioning embedding, which is variant wiring).
    typename detail::DpaBranch<S>::Out dpa_forward(nn::Tape<S>& t, const Sample& sample,
                                                   Sequence seq, Rng* drop = nullptr,
                                                   ForwardTrace<S>* trace = nullptr) const {
        if (cfg_.variant == Variant::single_branch)
            return branches_[0].forward(t, t.constant(stacked_input(sample)), drop, seq, trace);
        const std::size_t idx = branches_.size() == 1 ? 0 : sequence_index(seq);
        return branches_[idx].forward(t, t.constant(volume_input(sample, seq)), drop, seq, trace);
    }

    ForwardResult<S> forward(nn::Tape<S>& t, const Sample& sample, Rng* drop = nullptr,
                             ForwardTrace<S>* trace = nullptr) const {
        std::vector<nn::Var<S>> branch_ys;
        ForwardResult<S> out;

        switch (cfg_.variant) {
            case Variant::single_branch: {
                auto r = dpa_forward(t, sample, Sequence::ADC, drop, trace);
                branch_ys.push_back(r.y);
                // the stacked branch has one local fusion; report it under every sequence
                for (Sequence seq : kSequences) out.alphas[seq] = r.alphas;
                break;
            }
            case Variant::conditional_single_branch: {
                for (std::size_t i = 0; i < kSequences.size(); ++i) {
                    const Sequence seq = kSequences[i];
                    auto r = dpa_forward(t, sample, seq, drop, trace);
                    // learned per-sequence conditioning embedding on the branch output
                    branch_ys.push_back(add(r.y, t.leaf(cond_tokens_[i])));
                    out.alphas[seq] = r.alphas;
                }
                break;
            }
            default: {
                for (std::size_t i = 0; i < kSequences.size(); ++i) {
                    const Sequence seq = kSequences[i];
                    auto r = dpa_forward(t, sample, seq, drop, trace);
                    branch_ys.push_back(r.y);
                    out.alphas[seq] = r.alphas;
                }
                break;
            }
        }

        if (cfg_.uses_clinical()) branch_ys.push_back(clinical_encode(t, sample.clinical));

        if (cfg_.uses_global_gam()) {
            std::vector<gam::GateRef<S>> gates;
            gates.reserve(global_gates_.size());
            for (const auto& g : global_gates_) gates.push_back(gam::bind(t, g));
            gam::GamOptions opt;
            opt.skip_sigmoid = cfg_.gating.skip_sigmoid;
            auto fused = gam::global_gam_fuse_op(branch_ys, gates, opt);
            out.fused = fused.fused;
            out.betas = fused.weights;
        } else {
            nn::Var<S> acc = branch_ys[0];
            for (std::size_t i = 1; i < branch_ys.size(); ++i) acc = add(acc, branch_ys[i]);
            out.fused = scale(acc, S(1) / S(branch_ys.size()));
            nn::Mat<S> uniform(1, Eigen::Index(branch_ys.size()));
            uniform.setConstant(S(1) / S(branch_ys.size()));
            out.betas = t.constant(std::move(uniform));
        }

        out.logit = classify_logit(t, out.fused, drop);
        out.prob = sigmoid(out.logit);
        return out;
    }

    // Deterministic inference (no dropout) packaged as a Prediction.
    Prediction predict(const Sample& sample) const {
        nn::Tape<S> tape;
        ForwardResult<S> r = forward(tape, sample);
        Prediction p;
        p.probability = double(r.prob.val()(0, 0));
        p.branch_betas.weights = r.betas.val().row(0).template cast<double>().transpose();
        for (const auto& [seq, a] : r.alphas) {
            gam::AttentionWeights w;
            w.weights = a.val().row(0).template cast<double>().transpose();
            p.per_branch_alphas[seq] = std::move(w);
        }
        return p;
    }

    // ---------------------------------------------------------------------
    // Sample -> input tensor plumbing
    // ---------------------------------------------------------------------

    static std::size_t sequence_index(Sequence seq) {
        for (std::size_t i = 0; i < kSequences.size(); ++i)
            if (kSequences[i] == seq) return i;
        return 0;
    }

    const Volume& sequence_volume(const Sample& sample, Sequence seq) const {
        auto it = sample.volumes.find(seq);
        if (it == sample.volumes.end())
            throw contract_error(strfmt("model_forward: patient %s is missing sequence %s",
                                        sample.patient_id.c_str(), to_string(seq)));
        const Volume& v = it->second;
        if (v.depth != cfg_.input.depth || v.height != cfg_.input.size || v.width != cfg_.input.size)
            throw contract_error(strfmt(
                "model_forward: patient %s sequence %s has shape %dx%dx%d, config wants %dx%dx%d",
                sample.patient_id.c_str(), to_string(seq), v.depth, v.height, v.width,
                cfg_.input.depth, cfg_.input.size, cfg_.input.size));
        return v;
    }

    nn::Mat<S> volume_input(const Sample& sample, Sequence seq) const {
        const Volume& v = sequence_volume(sample, seq);
        nn::Mat<S> m(1, Eigen::Index(v.voxels.size()));
        for (Eigen::Index i = 0; i < m.cols(); ++i) m(0, i) = S(v.voxels[std::size_t(i)]);
        return m;
    }

    nn::Mat<S> stacked_input(const Sample& sample) const {
        nn::Mat<S> m(3, Eigen::Index(cfg_.input.depth) * cfg_.input.size * cfg_.input.size);
        for (std::size_t s = 0; s < kSequences.size(); ++s) {
            const Volume& v = sequence_volume(sample, kSequences[s]);
            for (Eigen::Index i = 0; i < m.cols(); ++i) m(Eigen::Index(s), i) = S(v.voxels[std::size_t(i)]);
        }
        return m;
    }

private:
    void collect_params() {
        params_.clear();
        for (auto& b : branches_) b.collect(params_);
        if (cfg_.variant == Variant::conditional_single_branch)
            for (auto& tkn : cond_tokens_) params_.push_back(&tkn);
        if (cfg_.uses_clinical()) {
            clin_fc1_.collect(params_);
            clin_fc2_.collect(params_);
        }
        for (auto& g : global_gates_) g.collect(params_);
        head_fc1_.collect(params_);
        head_fc2_.collect(params_);
    }

    ModelConfig cfg_;
    std::vector<detail::DpaBranch<S>> branches_;
    std::array<nn::Param<S>, 3> cond_tokens_;
    nn::Linear<S> clin_fc1_, clin_fc2_;
    std::vector<gam::Gate<S>> global_gates_;
    nn::Linear<S> head_fc1_, head_fc2_;
    std::vector<nn::Param<S>*> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint archive: 8-byte magic, u32 header length, JSON header (config +
// tensor directory + format version), float64 little-endian payload.
// ---------------------------------------------------------------------------

template <class S>
void save_checkpoint(const HCnnVit<S>& model, const std::filesystem::path& path,
                     const NormStats* norm_stats = nullptr) {
    using nlohmann::json;
    json tensors = json::array();
    std::size_t offset = 0;
    for (const auto* p : model.params()) {
        tensors.push_back({{"name", p->name},
                           {"rows", long(p->value.rows())},
                           {"cols", long(p->value.cols())},
                           {"offset", offset}});
        offset += std::size_t(p->value.size());
    }
    json header = {
        {"format_version", kCheckpointVersion},
        {"config", json::parse(to_canonical_json(model.config()))},
        {"dtype", "float64"},
        {"tensors", tensors},
    };
    if (norm_stats) {
        // clinical normalization is fitted on the fold's training split and
        // travels with the weights so evaluation is self-contained
        header["clinical_norm"] = {{"age_mean", norm_stats->age_mean},
                                   {"age_std", norm_stats->age_std},
                                   {"hosp_mean", norm_stats->hosp_mean},
                                   {"hosp_std", norm_stats->hosp_std},
                                   {"tumor_mean", norm_stats->tumor_mean},
                                   {"tumor_std", norm_stats->tumor_std}};
    }
    const std::string htext = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(strfmt("cannot open %s for writing", path.string().c_str()));
    out.write(kCheckpointMagic, 8);
    const std::uint32_t hlen = std::uint32_t(htext.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(htext.data(), std::streamsize(htext.size()));
    for (const auto* p : model.params()) {
        // column-major coefficient order, promoted to float64
        for (Eigen::Index c = 0; c < p->value.cols(); ++c)
            for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
                const double v = double(p->value(r, c));
                out.write(reinterpret_cast<const char*>(&v), 8);
            }
    }
    if (!out) throw io_error(strfmt("short write to %s", path.string().c_str()));
}

struct CheckpointData {
    ModelConfig config;
    std::map<std::string, Eigen::MatrixXd> tensors;
    NormStats norm_stats;
    bool has_norm_stats = false;
};

CheckpointData load_checkpoint(const std::filesystem::path& path);

template <class S>
HCnnVit<S> model_from_checkpoint(const CheckpointData& ckpt) {
    HCnnVit<S> model(ckpt.config, 0);
    std::size_t used = 0;
    for (auto* p : model.params()) {
        auto it = ckpt.tensors.find(p->name);
        if (it == ckpt.tensors.end())
            throw io_error(strfmt("checkpoint is missing tensor '%s'", p->name.c_str()));
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
            throw io_error(strfmt("checkpoint tensor '%s' has shape %ldx%ld, model wants %ldx%ld",
                                  p->name.c_str(), long(it->second.rows()), long(it->second.cols()),
                                  long(p->value.rows()), long(p->value.cols())));
        p->value = it->second.template cast<S>();
        ++used;
    }
    if (used != ckpt.tensors.size())
        throw io_error(strfmt("checkpoint carries %zu tensors, model consumed %zu",
                              ckpt.tensors.size(), used));
    return model;
}

template <class S>
HCnnVit<S> load_model(const std::filesystem::path& path) {
    return model_from_checkpoint<S>(load_checkpoint(path));
}

}  // namespace hcvt::model
