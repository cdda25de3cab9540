#pragma once

// Network building blocks on top of the autodiff core: channel-mixing 1x1
// convolutions, per-slice 3x3 convolutions (im2col + GEMM), patch
// tokenization, transformer encoder blocks, and the two feature extractors.

#include <cmath>
#include <string>
#include <vector>

#include "hcvt/autodiff.hpp"

namespace hcvt::nn {

// Activations flowing through the convolutional path are stored as
// channels x (depth*height*width) matrices; column index = (d*H + h)*W + w.
struct ConvDims {
    int c = 0, d = 0, h = 0, w = 0;
    Eigen::Index spatial() const { return Eigen::Index(d) * h * w; }
};

template <class S>
void init_uniform(Param<S>& p, Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng,
                  std::string name) {
    p.name = std::move(name);
    p.value.resize(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) p.value(r, c) = S(rng.uniform(-bound, bound));
}

template <class S>
void init_normal(Param<S>& p, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng,
                 std::string name) {
    p.name = std::move(name);
    p.value.resize(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) p.value(r, c) = S(rng.normal(0.0, stddev));
}

template <class S>
void init_const(Param<S>& p, Eigen::Index rows, Eigen::Index cols, double v, std::string name) {
    p.name = std::move(name);
    p.value = Mat<S>::Constant(rows, cols, S(v));
}

template <class S>
using ParamList = std::vector<Param<S>*>;

// ---------------------------------------------------------------------------
// Linear layer, y = x W^T + b
// ---------------------------------------------------------------------------
template <class S>
struct Linear {
    Param<S> w;  // out x in
    Param<S> b;  // 1 x out

    void init(int in, int out, Rng& rng, const std::string& prefix) {
        const double bound = 1.0 / std::sqrt(double(in));
        init_uniform(w, out, in, bound, rng, prefix + ".weight");
        init_uniform(b, 1, out, bound, rng, prefix + ".bias");
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const { return linear(x, t.leaf(w), t.leaf(b)); }

    void collect(ParamList<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

template <class S>
struct LayerNormP {
    Param<S> gamma, beta;  // 1 x dim

    void init(int dim, const std::string& prefix) {
        init_const(gamma, 1, dim, 1.0, prefix + ".gamma");
        init_const(beta, 1, dim, 0.0, prefix + ".beta");
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const {
        return layernorm_rows(x, t.leaf(gamma), t.leaf(beta));
    }

    void collect(ParamList<S>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// ---------------------------------------------------------------------------
// 1x1 convolution = channel mixing, applied at every voxel.
// ---------------------------------------------------------------------------
template <class S>
struct Conv1x1 {
    Param<S> w;  // out_ch x in_ch
    Param<S> b;  // out_ch x 1

    void init(int in_ch, int out_ch, Rng& rng, const std::string& prefix) {
        const double bound = 1.0 / std::sqrt(double(in_ch));
        init_uniform(w, out_ch, in_ch, bound, rng, prefix + ".weight");
        init_uniform(b, out_ch, 1, bound, rng, prefix + ".bias");
    }

    Var<S> operator()(Tape<S>& t, Var<S> x) const {
        Var<S> wv = t.leaf(w), bv = t.leaf(b);
        Node<S>& n = detail::make(*t_of(x), true);
        n.owned.noalias() = wv.val() * x.val();
        n.owned.colwise() += bv.val().col(0);
        Node<S>* pn = &n;
        Node<S>*px = x.node, *pw = wv.node, *pb = bv.node;
        n.backward = [pn, px, pw, pb] {
            if (pw->needs_grad) pw->accum(pn->grad * px->val().transpose());
            if (pb->needs_grad) pb->accum(pn->grad.rowwise().sum());
            if (px->needs_grad) px->accum(pw->val().transpose() * pn->grad);
        };
        return {&n, x.tape};
    }

    void collect(ParamList<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }

private:
    static Tape<S>* t_of(Var<S> v) { return v.tape; }
};

// ---------------------------------------------------------------------------
// Per-slice 3x3 convolution, stride 2, pad 1, via im2col + GEMM.
// ---------------------------------------------------------------------------
namespace convdetail {

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Gathers one depth slice into a (C*9) x (H'*W') column matrix.
template <class S>
void im2col_slice(const Mat<S>& x, const ConvDims& dims, int d, int stride, int pad, Mat<S>& k) {
    const int oh = conv_out(dims.h, 3, stride, pad);
    const int ow = conv_out(dims.w, 3, stride, pad);
    k.setZero(Eigen::Index(dims.c) * 9, Eigen::Index(oh) * ow);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const Eigen::Index col = Eigen::Index(oy) * ow + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= dims.h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= dims.w) continue;
                    const Eigen::Index src = (Eigen::Index(d) * dims.h + iy) * dims.w + ix;
                    for (int c = 0; c < dims.c; ++c)
                        k(Eigen::Index(c) * 9 + ky * 3 + kx, col) = x(c, src);
                }
            }
        }
    }
}

// Scatter-add of a column-matrix gradient back onto the input layout.
template <class S>
void col2im_slice(const Mat<S>& dk, const ConvDims& dims, int d, int stride, int pad, Mat<S>& dx) {
    const int oh = conv_out(dims.h, 3, stride, pad);
    const int ow = conv_out(dims.w, 3, stride, pad);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const Eigen::Index col = Eigen::Index(oy) * ow + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= dims.h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= dims.w) continue;
                    const Eigen::Index dst = (Eigen::Index(d) * dims.h + iy) * dims.w + ix;
                    for (int c = 0; c < dims.c; ++c)
                        dx(c, dst) += dk(Eigen::Index(c) * 9 + ky * 3 + kx, col);
                }
            }
        }
    }
}

}  // namespace convdetail

template <class S>
struct Conv3x3 {
    Param<S> w;  // out_ch x (in_ch*9)
    Param<S> b;  // out_ch x 1
    int stride = 2;
    int pad = 1;

    void init(int in_ch, int out_ch, Rng& rng, const std::string& prefix) {
        const double bound = 1.0 / std::sqrt(double(in_ch) * 9.0);
        init_uniform(w, out_ch, Eigen::Index(in_ch) * 9, bound, rng, prefix + ".weight");
        init_uniform(b, out_ch, 1, bound, rng, prefix + ".bias");
    }

    ConvDims out_dims(const ConvDims& in) const {
        return {int(w.value.rows()), in.d, convdetail::conv_out(in.h, 3, stride, pad),
                convdetail::conv_out(in.w, 3, stride, pad)};
    }

    Var<S> operator()(Tape<S>& t, Var<S> x, const ConvDims& in) const {
        if (Eigen::Index(in.c) * 9 != w.value.cols())
            throw contract_error(strfmt("conv3x3: input channels %d do not match weight fan-in %ld",
                                        in.c, long(w.value.cols() / 9)));
        if (x.rows() != in.c || x.cols() != in.spatial())
            throw contract_error("conv3x3: tensor shape does not match declared dims");
        Var<S> wv = t.leaf(w), bv = t.leaf(b);
        const ConvDims out = out_dims(in);
        Node<S>& n = detail::make(*x.tape, true);
        n.owned.resize(out.c, out.spatial());
        const Eigen::Index plane = Eigen::Index(out.h) * out.w;
        Mat<S> k;
        for (int d = 0; d < in.d; ++d) {
            convdetail::im2col_slice(x.val(), in, d, stride, pad, k);
            n.owned.middleCols(Eigen::Index(d) * plane, plane).noalias() = wv.val() * k;
            n.owned.middleCols(Eigen::Index(d) * plane, plane).colwise() += bv.val().col(0);
        }
        Node<S>* pn = &n;
        Node<S>*px = x.node, *pw = wv.node, *pb = bv.node;
        const int stride_c = stride, pad_c = pad;
        const ConvDims in_c = in;
        n.backward = [pn, px, pw, pb, in_c, out, plane, stride_c, pad_c] {
            Mat<S> k;
            // im2col is rebuilt per slice instead of cached across the pass
            for (int d = 0; d < in_c.d; ++d) {
                const auto dy = pn->grad.middleCols(Eigen::Index(d) * plane, plane);
                if (pw->needs_grad || px->needs_grad)
                    convdetail::im2col_slice(px->val(), in_c, d, stride_c, pad_c, k);
                if (pw->needs_grad) pw->accum(dy * k.transpose());
                if (pb->needs_grad) pb->accum(dy.rowwise().sum());
                if (px->needs_grad) {
                    Mat<S> dk = pw->val().transpose() * dy;
                    convdetail::col2im_slice(dk, in_c, d, stride_c, pad_c, px->grad_buf());
                }
            }
        };
        return {&n, x.tape};
    }

    void collect(ParamList<S>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// Global average pool over (D,H,W): C x (D*H*W) -> 1 x C.
template <class S>
Var<S> global_avg_pool(Var<S> x) {
    Node<S>& n = detail::make(*x.tape, x.node->needs_grad);
    n.owned = x.val().rowwise().mean().transpose();
    Node<S>* pn = &n;
    Node<S>* pa = x.node;
    const S inv = S(1) / S(x.cols());
    n.backward = [pn, pa, inv] {
        pa->accum((pn->grad.transpose() * inv).replicate(1, pa->cols()));
    };
    return {&n, x.tape};
}

// Tokenize C x (D*H*W) into ((D/f)*(H/p)*(W/p)) x (C*f*p*p) patch rows.
template <class S>
Var<S> patchify(Var<S> x, const ConvDims& dims, int patch, int fpatch) {
    if (dims.h % patch != 0 || dims.w % patch != 0)
        throw contract_error(strfmt("patchify: spatial dims %dx%d not divisible by patch size %d",
                                    dims.h, dims.w, patch));
    if (dims.d % fpatch != 0)
        throw contract_error(strfmt("patchify: depth %d not divisible by frame patch size %d",
                                    dims.d, fpatch));
    const int fd = dims.d / fpatch, ph = dims.h / patch, pw = dims.w / patch;
    const Eigen::Index tokens = Eigen::Index(fd) * ph * pw;
    const Eigen::Index token_dim = Eigen::Index(dims.c) * fpatch * patch * patch;
    Node<S>& n = detail::make(*x.tape, x.node->needs_grad);
    n.owned.resize(tokens, token_dim);
    const ConvDims dd = dims;
    auto src_of = [dd, patch, fpatch, ph, pw](Eigen::Index tok, Eigen::Index j, int& c,
                                              Eigen::Index& col) {
        const int px_ = int(tok % pw);
        const int py_ = int((tok / pw) % ph);
        const int fd_ = int(tok / (Eigen::Index(ph) * pw));
        const int dx = int(j % patch);
        const int dy = int((j / patch) % patch);
        const int df = int((j / (Eigen::Index(patch) * patch)) % fpatch);
        c = int(j / (Eigen::Index(patch) * patch * fpatch));
        const int d = fd_ * fpatch + df;
        const int h = py_ * patch + dy;
        const int w = px_ * patch + dx;
        col = (Eigen::Index(d) * dd.h + h) * dd.w + w;
    };
    for (Eigen::Index tk = 0; tk < tokens; ++tk) {
        for (Eigen::Index j = 0; j < token_dim; ++j) {
            int c;
            Eigen::Index col;
            src_of(tk, j, c, col);
            n.owned(tk, j) = x.val()(c, col);
        }
    }
    Node<S>* pn = &n;
    Node<S>* pa = x.node;
    n.backward = [pn, pa, src_of, tokens, token_dim] {
        if (!pa->needs_grad) return;
        Mat<S>& dx = pa->grad_buf();
        for (Eigen::Index tk = 0; tk < tokens; ++tk) {
            for (Eigen::Index j = 0; j < token_dim; ++j) {
                int c;
                Eigen::Index col;
                src_of(tk, j, c, col);
                dx(c, col) += pn->grad(tk, j);
            }
        }
    };
    return {&n, x.tape};
}

// ---------------------------------------------------------------------------
// Pre-norm transformer encoder block (MHSA + MLP, GELU, residuals).
// ---------------------------------------------------------------------------
template <class S>
struct TransformerBlock {
    LayerNormP<S> ln1, ln2;
    Linear<S> wq, wk, wv, wo, fc1, fc2;
    int heads = 8;
    double drop_rate = 0.0;

    void init(int embed, int mlp_dim, int n_heads, double dropout, Rng& rng,
              const std::string& prefix) {
        if (embed % n_heads != 0)
            throw config_error(strfmt("transformer: embed dim %d not divisible by %d heads", embed, n_heads));
        heads = n_heads;
        drop_rate = dropout;
        ln1.init(embed, prefix + ".ln1");
        wq.init(embed, embed, rng, prefix + ".attn.wq");
        wk.init(embed, embed, rng, prefix + ".attn.wk");
        wv.init(embed, embed, rng, prefix + ".attn.wv");
        wo.init(embed, embed, rng, prefix + ".attn.wo");
        ln2.init(embed, prefix + ".ln2");
        fc1.init(embed, mlp_dim, rng, prefix + ".mlp.fc1");
        fc2.init(mlp_dim, embed, rng, prefix + ".mlp.fc2");
    }

    // attn_rec, when non-null, receives the head-averaged attention matrix.
    Var<S> forward(Tape<S>& t, Var<S> x, Rng* drop, Mat<S>* attn_rec) const {
        const Eigen::Index embed = x.cols();
        const Eigen::Index dh = embed / heads;
        const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));

        Var<S> h = ln1(t, x);
        Var<S> q = wq(t, h), k = wk(t, h), v = wv(t, h);
        if (attn_rec) attn_rec->setZero(x.rows(), x.rows());
        std::vector<Var<S>> head_outs;
        head_outs.reserve(heads);
        for (int i = 0; i < heads; ++i) {
            Var<S> qi = slice_cols(q, i * dh, dh);
            Var<S> ki = slice_cols(k, i * dh, dh);
            Var<S> vi = slice_cols(v, i * dh, dh);
            Var<S> scores = scale(matmul(qi, transpose(ki)), inv_sqrt);
            Var<S> probs = softmax_rows(scores);
            if (attn_rec) *attn_rec += probs.val();
            if (drop) probs = dropout(probs, drop_rate, *drop);
            head_outs.push_back(matmul(probs, vi));
        }
        if (attn_rec) *attn_rec /= S(heads);
        Var<S> o = wo(t, concat_cols(head_outs));
        if (drop) o = dropout(o, drop_rate, *drop);
        x = add(x, o);

        Var<S> m = fc1(t, ln2(t, x));
        m = gelu(m);
        if (drop) m = dropout(m, drop_rate, *drop);
        m = fc2(t, m);
        if (drop) m = dropout(m, drop_rate, *drop);
        return add(x, m);
    }

    void collect(ParamList<S>& out) {
        ln1.collect(out);
        wq.collect(out);
        wk.collect(out);
        wv.collect(out);
        wo.collect(out);
        ln2.collect(out);
        fc1.collect(out);
        fc2.collect(out);
    }
};

// ---------------------------------------------------------------------------
// ViT extractor: patchify -> embed -> +pos -> blocks -> mean pool -> project.
// ---------------------------------------------------------------------------
template <class S>
struct ViTExtractor {
    int patch = 16, fpatch = 1, embed = 1024, heads = 8, mlp_dim = 4096;
    double drop_rate = 0.2, emb_drop_rate = 0.1;
    ConvDims in_dims;  // expected input dims
    Linear<S> patch_embed;
    Param<S> pos;  // tokens x embed
    std::vector<TransformerBlock<S>> blocks;
    Linear<S> proj;

    Eigen::Index tokens() const {
        return Eigen::Index(in_dims.d / fpatch) * (in_dims.h / patch) * (in_dims.w / patch);
    }

    void init(const ConvDims& dims, int patch_size, int frame_patch, int embed_dim, int depth,
              int n_heads, int mlp, double dropout, double emb_dropout, int fusion_dim, Rng& rng,
              const std::string& prefix) {
        if (dims.h % patch_size != 0 || dims.w % patch_size != 0)
            throw config_error(strfmt("vit: input %dx%d not divisible by patch size %d", dims.h,
                                      dims.w, patch_size));
        if (dims.d % frame_patch != 0)
            throw config_error(strfmt("vit: depth %d not divisible by frame patch size %d", dims.d,
                                      frame_patch));
        patch = patch_size;
        fpatch = frame_patch;
        embed = embed_dim;
        heads = n_heads;
        mlp_dim = mlp;
        drop_rate = dropout;
        emb_drop_rate = emb_dropout;
        in_dims = dims;
        const Eigen::Index token_dim = Eigen::Index(dims.c) * fpatch * patch * patch;
        patch_embed.init(int(token_dim), embed, rng, prefix + ".patch_embed");
        init_normal(pos, tokens(), embed, 0.02, rng, prefix + ".pos_embed");
        blocks.resize(depth);
        for (int i = 0; i < depth; ++i)
            blocks[i].init(embed, mlp_dim, heads, drop_rate, rng,
                           prefix + ".blocks." + std::to_string(i));
        proj.init(embed, fusion_dim, rng, prefix + ".proj");
    }

    // attn_rec, when non-null, is filled with one head-averaged attention
    // matrix per block.
    Var<S> forward(Tape<S>& t, Var<S> x, Rng* drop, std::vector<Mat<S>>* attn_rec) const {
        Var<S> tok = patchify(x, in_dims, patch, fpatch);
        Var<S> e = patch_embed(t, tok);
        e = add(e, t.leaf(pos));
        if (drop) e = dropout(e, emb_drop_rate, *drop);
        if (attn_rec) attn_rec->resize(blocks.size());
        for (std::size_t i = 0; i < blocks.size(); ++i)
            e = blocks[i].forward(t, e, drop, attn_rec ? &(*attn_rec)[i] : nullptr);
        return proj(t, mean_rows(e));
    }

    void collect(ParamList<S>& out) {
        patch_embed.collect(out);
        out.push_back(&pos);
        for (auto& b : blocks) b.collect(out);
        proj.collect(out);
    }
};

// ---------------------------------------------------------------------------
// CNN extractor: three stride-2 3x3 stages with Leaky ReLU, GAP, projection.
// ---------------------------------------------------------------------------
template <class S>
struct CnnExtractor {
    Conv3x3<S> c1, c2, c3;
    Linear<S> proj;
    double slope = 0.01;
    ConvDims in_dims;

    void init(const ConvDims& dims, const std::vector<int>& channels, double leaky_slope,
              int fusion_dim, Rng& rng, const std::string& prefix) {
        if (channels.size() != 3)
            throw config_error("cnn extractor expects exactly three stage channel counts");
        int h = dims.h, w = dims.w;
        for (int stage = 0; stage < 3; ++stage) {
            h = convdetail::conv_out(h, 3, 2, 1);
            w = convdetail::conv_out(w, 3, 2, 1);
        }
        if (h < 8 || w < 8)
            throw config_error(strfmt(
                "cnn extractor: input %dx%d leaves %dx%d after three stride-2 stages (need >= 8)",
                dims.h, dims.w, h, w));
        slope = leaky_slope;
        in_dims = dims;
        c1.init(dims.c, channels[0], rng, prefix + ".conv1");
        c2.init(channels[0], channels[1], rng, prefix + ".conv2");
        c3.init(channels[1], channels[2], rng, prefix + ".conv3");
        proj.init(channels[2], fusion_dim, rng, prefix + ".proj");
    }

    // conv3_out, when non-null, receives the post-activation node of the
    // third stage (for class activation maps) plus its dims.
    Var<S> forward(Tape<S>& t, Var<S> x, Var<S>* conv3_out = nullptr,
                   ConvDims* conv3_dims = nullptr) const {
        ConvDims d0 = in_dims;
        Var<S> a = leaky_relu(c1(t, x, d0), S(slope));
        ConvDims d1 = c1.out_dims(d0);
        a = leaky_relu(c2(t, a, d1), S(slope));
        ConvDims d2 = c2.out_dims(d1);
        a = leaky_relu(c3(t, a, d2), S(slope));
        if (conv3_out) *conv3_out = a;
        if (conv3_dims) *conv3_dims = c3.out_dims(d2);
        return proj(t, global_avg_pool(a));
    }

    void collect(ParamList<S>& out) {
        c1.collect(out);
        c2.collect(out);
        c3.collect(out);
        proj.collect(out);
    }
};

}  // namespace hcvt::nn
