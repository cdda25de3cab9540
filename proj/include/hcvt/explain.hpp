#pragma once

// Interpretability artifacts: gradient-weighted class activation maps from
// the third CNN stage, attention maps from the second transformer block, and
// PNG overlays on the input slice. All passes run with dropout disabled and
// never mutate model parameters.

#include <filesystem>

#include "hcvt/model.hpp"

namespace hcvt::explain {

namespace fs = std::filesystem;

enum class MapSource { cnn_layer3, vit_block2 };

inline const char* to_string(MapSource s) {
    return s == MapSource::cnn_layer3 ? "cnn_layer3" : "vit_block2";
}

struct Heatmap {
    std::vector<float> values;  // height x width, min-max normalized to [0,1]
    int height = 0, width = 0;
    MapSource source = MapSource::cnn_layer3;
    std::string patient_id;
    Sequence sequence = Sequence::ADC;
    int slice_index = 0;
    bool degenerate = false;  // constant raw map, normalized to all zeros

    float at(int y, int x) const { return values[std::size_t(y) * width + x]; }
    std::pair<int, int> argmax() const;
};

struct AttentionMapOptions {
    // Multiply attention through all blocks (rollout) instead of reading the
    // single second block. Off by default.
    bool rollout = false;
};

// Min-max normalization shared by both map builders; flags constant maps.
void normalize_heatmap(Heatmap& h);

// Bilinear upsample of a row-major grid to out_h x out_w.
std::vector<float> upsample_bilinear(const std::vector<float>& src, int src_h, int src_w, int out_h,
                                     int out_w);

namespace detail {

template <class S>
void check_slice(const model::ModelConfig& cfg, int slice_index) {
    if (slice_index < 0 || slice_index >= cfg.input.depth)
        throw contract_error(strfmt("slice index %d outside [0, %d)", slice_index, cfg.input.depth));
}

}  // namespace detail

// Gradient-weighted activation map at the third CNN stage: channel weights
// are spatially averaged gradients of the predicted logit, the map is
// ReLU(sum_c w_c A_c) at the chosen depth, upsampled to input resolution.
template <class S>
Heatmap cnn_cam(const model::HCnnVit<S>& m, const Sample& sample, Sequence seq, int slice_index) {
    const model::ModelConfig& cfg = m.config();
    detail::check_slice<S>(cfg, slice_index);
    nn::Tape<S> tape;
    model::ForwardTrace<S> trace;
    trace.record_conv3 = true;
    auto fwd = m.forward(tape, sample, nullptr, &trace);
    tape.backward(fwd.logit);

    const nn::Var<S>& act = trace.conv3.at(seq);
    const nn::ConvDims dims = trace.conv3_dims.at(seq);
    const nn::Mat<S>& a = act.val();
    const nn::Mat<S>& g = act.node->grad;
    if (g.size() == 0) throw contract_error("cnn_cam: no gradient reached the recorded activations");

    // channel weights: gradient averaged over (D, H', W')
    Eigen::Matrix<S, Eigen::Dynamic, 1> w = g.rowwise().mean();

    // weighted activation at the chosen depth slice, with ReLU
    const Eigen::Index plane = Eigen::Index(dims.h) * dims.w;
    std::vector<float> raw(std::size_t(plane), 0.0f);
    for (Eigen::Index p = 0; p < plane; ++p) {
        S acc = 0;
        const Eigen::Index col = Eigen::Index(slice_index) * plane + p;
        for (int c = 0; c < dims.c; ++c) acc += w[c] * a(c, col);
        raw[std::size_t(p)] = float(std::max(acc, S(0)));
    }

    Heatmap h;
    h.height = cfg.input.size;
    h.width = cfg.input.size;
    h.values = upsample_bilinear(raw, dims.h, dims.w, h.height, h.width);
    h.source = MapSource::cnn_layer3;
    h.patient_id = sample.patient_id;
    h.sequence = seq;
    h.slice_index = slice_index;
    normalize_heatmap(h);
    return h;
}

// Head-averaged attention of the second transformer block, row-averaged over
// query tokens into a per-token saliency, restricted to the chosen slice's
// tokens and reshaped onto the patch grid.
template <class S>
Heatmap vit_attention_map(const model::HCnnVit<S>& m, const Sample& sample, Sequence seq,
                          int slice_index, const AttentionMapOptions& opt = {}) {
    const model::ModelConfig& cfg = m.config();
    detail::check_slice<S>(cfg, slice_index);
    if (cfg.vit.depth < 2)
        throw config_error(strfmt("vit attention map needs depth >= 2, config has %d", cfg.vit.depth));
    nn::Tape<S> tape;
    model::ForwardTrace<S> trace;
    trace.record_attention = true;
    (void)m.forward(tape, sample, nullptr, &trace);

    const auto& per_block = trace.attention.at(seq);
    nn::Mat<S> attn;
    if (opt.rollout) {
        // rollout: multiply (A + I)/2 through the blocks, renormalized rows
        const Eigen::Index t = per_block[0].rows();
        attn = nn::Mat<S>::Identity(t, t);
        for (const auto& blk : per_block) {
            nn::Mat<S> mixed = S(0.5) * blk + S(0.5) * nn::Mat<S>::Identity(t, t);
            for (Eigen::Index r = 0; r < t; ++r) mixed.row(r) /= mixed.row(r).sum();
            attn = mixed * attn;
        }
    } else {
        attn = per_block.at(1);  // second block
    }

    // per-token saliency: mean over query rows (rows are stochastic, so the
    // saliency sums to 1 over the full token set)
    Eigen::Matrix<S, 1, Eigen::Dynamic> saliency = attn.colwise().mean();

    const int p = cfg.vit.patch_size;
    const int grid = cfg.input.size / p;
    const int frame = slice_index / cfg.vit.frame_patch_size;
    std::vector<float> raw(std::size_t(grid) * grid);
    for (int py = 0; py < grid; ++py)
        for (int px = 0; px < grid; ++px)
            raw[std::size_t(py) * grid + px] =
                float(saliency[(Eigen::Index(frame) * grid + py) * grid + px]);

    Heatmap h;
    h.height = cfg.input.size;
    h.width = cfg.input.size;
    h.values = upsample_bilinear(raw, grid, grid, h.height, h.width);
    h.source = MapSource::vit_block2;
    h.patient_id = sample.patient_id;
    h.sequence = seq;
    h.slice_index = slice_index;
    normalize_heatmap(h);
    return h;
}

// Raw per-token saliency (pre-normalization), exposed for the
// stochastic-matrix property check.
template <class S>
Eigen::VectorXd vit_token_saliency(const model::HCnnVit<S>& m, const Sample& sample, Sequence seq) {
    if (m.config().vit.depth < 2) throw config_error("vit attention map needs depth >= 2");
    nn::Tape<S> tape;
    model::ForwardTrace<S> trace;
    trace.record_attention = true;
    (void)m.forward(tape, sample, nullptr, &trace);
    const nn::Mat<S>& attn = trace.attention.at(seq).at(1);
    return attn.colwise().mean().transpose().template cast<double>();
}

// 8-bit RGB PNG: grayscale slice composited with a perceptually uniform
// colormap; per-pixel opacity is 0.45 * heat, so a zero heatmap renders the
// pure grayscale image. Deterministic bytes for identical inputs.
void overlay(const std::vector<float>& slice, int height, int width, const Heatmap& heatmap,
             const fs::path& out_path, double opacity = 0.45);

inline void overlay(const Volume& v, int slice_index, const Heatmap& heatmap,
                    const fs::path& out_path, double opacity = 0.45) {
    if (slice_index < 0 || slice_index >= v.depth)
        throw contract_error(strfmt("overlay: slice %d outside [0, %d)", slice_index, v.depth));
    std::vector<float> slice(v.slice(slice_index), v.slice(slice_index) + std::size_t(v.height) * v.width);
    overlay(slice, v.height, v.width, heatmap, out_path, opacity);
}

// JSON sidecar next to the PNG.
void write_sidecar(const Heatmap& h, const std::string& method, const std::string& checkpoint_hash,
                   const fs::path& png_path);

// Viridis lookup (t in [0,1]) -> RGB.
std::array<unsigned char, 3> viridis(double t);

// Minimal RGB8 PNG encoder (zlib-deflated, fixed settings).
void write_png_rgb(const fs::path& path, const std::vector<unsigned char>& rgb, int height,
                   int width);

}  // namespace hcvt::explain
