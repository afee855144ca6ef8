#pragma once

#include "cvit/ops.hpp"
#include "cvit/tape.hpp"
#include "cvit/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cvit {

/// Five stages of 3x3 conv blocks, each stage closed by a 2x2 max-pool.
struct FLConfig {
    int64_t in_channels = 3;
    int64_t input_size = 224;
    std::vector<int64_t> stage_channels{32, 64, 128, 256, 512};
    std::vector<int64_t> convs_per_stage{3, 3, 3, 4, 4};

    int64_t total_convs() const {
        int64_t n = 0;
        for (int64_t k : convs_per_stage) n += k;
        return n;
    }
    int64_t output_channels() const { return stage_channels.back(); }
    int64_t output_size() const { return input_size >> stage_channels.size(); }
};

struct ViTConfig {
    int64_t embed_dim = 1024;
    int64_t heads = 8;
    int64_t encoder_depth = 3;
    int64_t mlp_hidden = 2048;
    int64_t head_hidden = 2048;
    int64_t num_classes = 2;
};

struct CViTConfig {
    FLConfig fl;
    ViTConfig vit;

    /// Feature-map height rows become the transformer patches.
    int64_t num_patches() const { return fl.output_size(); }
    int64_t patch_dim() const { return fl.output_channels() * fl.output_size(); }
    int64_t seq_len() const { return num_patches() + 1; }

    static CViTConfig full_scale() { return {}; }

    /// Same topology at desk-test extents: 3x32x32 in, 128x1x1 features.
    static CViTConfig reduced_scale() {
        CViTConfig c;
        c.fl.input_size = 32;
        c.fl.stage_channels = {8, 16, 32, 64, 128};
        c.vit.embed_dim = 64;
        c.vit.heads = 4;
        c.vit.encoder_depth = 2;
        c.vit.mlp_hidden = 128;
        c.vit.head_hidden = 128;
        return c;
    }

    /// Smallest topology-preserving variant, for finite-difference checks.
    static CViTConfig gradcheck_scale() {
        CViTConfig c;
        c.fl.input_size = 32;
        c.fl.stage_channels = {2, 4, 4, 8, 8};
        c.fl.convs_per_stage = {2, 2, 2, 2, 2};
        c.vit.embed_dim = 8;
        c.vit.heads = 2;
        c.vit.encoder_depth = 1;
        c.vit.mlp_hidden = 16;
        c.vit.head_hidden = 16;
        return c;
    }
};

template <typename S>
struct ConvLayer {
    Tensor<S> w, b;          // O x C x 3 x 3, O
    Tensor<S> gamma, beta;   // O
    BNState<S> bn;
    ConvSpec spec;
};

template <typename S>
struct EncoderLayer {
    Tensor<S> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// Parameter container for the full CViT: conv feature stack plus transformer
/// head. Forward runs on a caller-supplied tape; bind() registers every
/// trainable tensor as a tape leaf so one backward pass yields all gradients.
template <typename S>
class CViTModel {
public:
    CViTConfig config;
    std::vector<std::vector<ConvLayer<S>>> stages;
    Tensor<S> patch_w, patch_b;  // patch_dim x embed, embed
    Tensor<S> class_token;       // 1 x embed
    Tensor<S> pos_embedding;     // (num_patches+1) x embed
    std::vector<EncoderLayer<S>> encoder;
    Tensor<S> final_ln_gamma, final_ln_beta;
    Tensor<S> head_w1, head_b1, head_w2, head_b2;

    /// Deterministic fan-in-scaled initialization.
    static CViTModel init(const CViTConfig& cfg, uint64_t seed) {
        CViTModel m;
        m.config = cfg;
        std::mt19937_64 rng(seed);
        auto he = [&rng](Shape shape, int64_t fan_in) {
            Tensor<S> t(std::move(shape));
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
            return t;
        };
        auto small = [&rng](Shape shape) {
            Tensor<S> t(std::move(shape));
            std::normal_distribution<double> dist(0.0, 0.02);
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
            return t;
        };

        int64_t in_c = cfg.fl.in_channels;
        for (size_t s = 0; s < cfg.fl.stage_channels.size(); ++s) {
            const int64_t out_c = cfg.fl.stage_channels[s];
            std::vector<ConvLayer<S>> stage;
            for (int64_t k = 0; k < cfg.fl.convs_per_stage[s]; ++k) {
                ConvLayer<S> l;
                l.spec = ConvSpec{in_c, out_c};
                l.w = he({out_c, in_c, 3, 3}, in_c * 9);
                l.b = Tensor<S>::zeros({out_c});
                l.gamma = Tensor<S>::ones({out_c});
                l.beta = Tensor<S>::zeros({out_c});
                l.bn = BNState<S>(out_c);
                stage.push_back(std::move(l));
                in_c = out_c;
            }
            m.stages.push_back(std::move(stage));
        }

        const int64_t E = cfg.vit.embed_dim, P = cfg.num_patches();
        m.patch_w = he({cfg.patch_dim(), E}, cfg.patch_dim());
        m.patch_b = Tensor<S>::zeros({E});
        m.class_token = small({1, E});
        m.pos_embedding = small({P + 1, E});
        for (int64_t d = 0; d < cfg.vit.encoder_depth; ++d) {
            EncoderLayer<S> l;
            l.ln1_gamma = Tensor<S>::ones({E});
            l.ln1_beta = Tensor<S>::zeros({E});
            l.ln2_gamma = Tensor<S>::ones({E});
            l.ln2_beta = Tensor<S>::zeros({E});
            l.wq = he({E, E}, E);
            l.bq = Tensor<S>::zeros({E});
            l.wk = he({E, E}, E);
            l.bk = Tensor<S>::zeros({E});
            l.wv = he({E, E}, E);
            l.bv = Tensor<S>::zeros({E});
            l.wo = he({E, E}, E);
            l.bo = Tensor<S>::zeros({E});
            l.mlp_w1 = he({E, cfg.vit.mlp_hidden}, E);
            l.mlp_b1 = Tensor<S>::zeros({cfg.vit.mlp_hidden});
            l.mlp_w2 = he({cfg.vit.mlp_hidden, E}, cfg.vit.mlp_hidden);
            l.mlp_b2 = Tensor<S>::zeros({E});
            m.encoder.push_back(std::move(l));
        }
        m.final_ln_gamma = Tensor<S>::ones({E});
        m.final_ln_beta = Tensor<S>::zeros({E});
        m.head_w1 = he({E, cfg.vit.head_hidden}, E);
        m.head_b1 = Tensor<S>::zeros({cfg.vit.head_hidden});
        m.head_w2 = he({cfg.vit.head_hidden, cfg.vit.num_classes}, cfg.vit.head_hidden);
        m.head_b2 = Tensor<S>::zeros({cfg.vit.num_classes});
        return m;
    }

    /// Trainable tensors in fixed declaration order; the names are stable and
    /// used for checkpoints and optimizer state.
    std::vector<std::pair<std::string, Tensor<S>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<S>*>> out;
        for (size_t s = 0; s < stages.size(); ++s)
            for (size_t k = 0; k < stages[s].size(); ++k) {
                std::string p = "fl.s" + std::to_string(s) + ".c" + std::to_string(k) + ".";
                out.emplace_back(p + "w", &stages[s][k].w);
                out.emplace_back(p + "b", &stages[s][k].b);
                out.emplace_back(p + "gamma", &stages[s][k].gamma);
                out.emplace_back(p + "beta", &stages[s][k].beta);
            }
        out.emplace_back("vit.patch.w", &patch_w);
        out.emplace_back("vit.patch.b", &patch_b);
        out.emplace_back("vit.class_token", &class_token);
        out.emplace_back("vit.pos_embedding", &pos_embedding);
        for (size_t d = 0; d < encoder.size(); ++d) {
            std::string p = "vit.enc" + std::to_string(d) + ".";
            auto& l = encoder[d];
            out.emplace_back(p + "ln1.gamma", &l.ln1_gamma);
            out.emplace_back(p + "ln1.beta", &l.ln1_beta);
            out.emplace_back(p + "msa.wq", &l.wq);
            out.emplace_back(p + "msa.bq", &l.bq);
            out.emplace_back(p + "msa.wk", &l.wk);
            out.emplace_back(p + "msa.bk", &l.bk);
            out.emplace_back(p + "msa.wv", &l.wv);
            out.emplace_back(p + "msa.bv", &l.bv);
            out.emplace_back(p + "msa.wo", &l.wo);
            out.emplace_back(p + "msa.bo", &l.bo);
            out.emplace_back(p + "ln2.gamma", &l.ln2_gamma);
            out.emplace_back(p + "ln2.beta", &l.ln2_beta);
            out.emplace_back(p + "mlp.w1", &l.mlp_w1);
            out.emplace_back(p + "mlp.b1", &l.mlp_b1);
            out.emplace_back(p + "mlp.w2", &l.mlp_w2);
            out.emplace_back(p + "mlp.b2", &l.mlp_b2);
        }
        out.emplace_back("vit.final_ln.gamma", &final_ln_gamma);
        out.emplace_back("vit.final_ln.beta", &final_ln_beta);
        out.emplace_back("vit.head.w1", &head_w1);
        out.emplace_back("vit.head.b1", &head_b1);
        out.emplace_back("vit.head.w2", &head_w2);
        out.emplace_back("vit.head.b2", &head_b2);
        return out;
    }

    /// Batchnorm running statistics, persisted alongside the parameters.
    std::vector<std::pair<std::string, Tensor<S>*>> named_buffers() {
        std::vector<std::pair<std::string, Tensor<S>*>> out;
        for (size_t s = 0; s < stages.size(); ++s)
            for (size_t k = 0; k < stages[s].size(); ++k) {
                std::string p = "fl.s" + std::to_string(s) + ".c" + std::to_string(k) + ".bn.";
                out.emplace_back(p + "mean", &stages[s][k].bn.running_mean);
                out.emplace_back(p + "var", &stages[s][k].bn.running_var);
            }
        return out;
    }

    struct Counts {
        int64_t fl = 0, vit = 0;
        int64_t total() const { return fl + vit; }
    };

    Counts count_parameters() {
        Counts c;
        for (auto& [name, t] : named_parameters())
            (name.rfind("fl.", 0) == 0 ? c.fl : c.vit) += t->numel();
        return c;
    }

    /// Tape leaves for every parameter, in named_parameters() order.
    struct Bound {
        std::vector<Var> params;
        size_t fl_param_count = 0;
        size_t cursor = 0;
        Var next() { return params[cursor++]; }
    };

    Bound bind(Tape<S>& t, bool requires_grad) {
        Bound b;
        for (auto& [name, tensor] : named_parameters()) {
            if (name.rfind("fl.", 0) == 0) ++b.fl_param_count;
            b.params.push_back(t.leaf(*tensor, requires_grad));
        }
        return b;
    }

    /// Feature stack: N x in x size x size -> N x C_last x P x P.
    Var fl_forward(Tape<S>& t, Bound& b, Var x, Mode mode) {
        const auto& xs = t.value(x).shape();
        const auto& fl = config.fl;
        if (xs.size() != 4 || xs[1] != fl.in_channels || xs[2] != fl.input_size ||
            xs[3] != fl.input_size)
            throw dim_error("fl_forward: expected Nx" + std::to_string(fl.in_channels) + "x" +
                            std::to_string(fl.input_size) + "x" + std::to_string(fl.input_size) +
                            ", got " + shape_str(xs));
        Var h = x;
        b.cursor = 0;
        for (size_t s = 0; s < stages.size(); ++s) {
            for (size_t k = 0; k < stages[s].size(); ++k) {
                Var w = b.next(), bias = b.next();
                Var gamma = b.next(), beta = b.next();
                h = conv2d(t, h, w, bias, stages[s][k].spec);
                h = batchnorm2d(t, h, gamma, beta, stages[s][k].bn, mode);
                h = relu(t, h);
            }
            h = maxpool2d(t, h);
        }
        return h;
    }

    /// Splits the feature map along height into P patches of C*W scalars,
    /// projects each to the embedding dim, prepends the class token, and adds
    /// position embeddings.
    Var patchify_and_embed(Tape<S>& t, Bound& b, Var features) {
        const auto& fs = t.value(features).shape();
        const int64_t P = config.num_patches();
        if (fs.size() != 4 || fs[1] != config.fl.output_channels() || fs[2] != P ||
            fs[3] != config.fl.output_size())
            throw dim_error("patchify_and_embed: expected Nx" +
                            std::to_string(config.fl.output_channels()) + "x" +
                            std::to_string(P) + "x" + std::to_string(config.fl.output_size()) +
                            ", got " + shape_str(fs));
        const int64_t N = fs[0];
        b.cursor = b.fl_param_count;
        Var pw = b.next(), pb = b.next(), cls = b.next(), pos = b.next();
        Var patches = permute(t, features, {0, 2, 1, 3});  // N x P x C x W
        patches = reshape(t, patches, {N, P, config.patch_dim()});
        Var emb = linear(t, patches, pw, pb);  // N x P x E
        Var seq = prepend_token(t, emb, cls);
        return add_broadcast(t, seq, pos);
    }

    /// Full forward to raw two-class logits; softmax is the caller's business.
    Var forward(Tape<S>& t, Bound& b, Var x, Mode mode) {
        Var h = fl_forward(t, b, x, mode);
        h = vit_forward(t, b, h);
        return h;
    }

    /// Transformer over an already-computed feature map.
    Var vit_forward(Tape<S>& t, Bound& b, Var features) {
        Var seq = patchify_and_embed(t, b, features);
        for (int64_t d = 0; d < config.vit.encoder_depth; ++d) {
            Var ln1g = b.next(), ln1b = b.next();
            MSAParams p;
            p.wq = b.next();
            p.bq = b.next();
            p.wk = b.next();
            p.bk = b.next();
            p.wv = b.next();
            p.bv = b.next();
            p.wo = b.next();
            p.bo = b.next();
            Var ln2g = b.next(), ln2b = b.next();
            Var mw1 = b.next(), mb1 = b.next(), mw2 = b.next(), mb2 = b.next();
            // pre-norm residual blocks
            Var normed = layernorm(t, seq, ln1g, ln1b);
            seq = add(t, seq, multi_head_self_attention(t, normed, p, config.vit.heads).out);
            normed = layernorm(t, seq, ln2g, ln2b);
            Var ff = linear(t, normed, mw1, mb1);
            ff = relu(t, ff);
            ff = linear(t, ff, mw2, mb2);
            seq = add(t, seq, ff);
        }
        Var flg = b.next(), flb = b.next();
        seq = layernorm(t, seq, flg, flb);
        Var cls = select_token(t, seq, 0);
        Var hw1 = b.next(), hb1 = b.next(), hw2 = b.next(), hb2 = b.next();
        Var h = linear(t, cls, hw1, hb1);
        h = relu(t, h);
        return linear(t, h, hw2, hb2);
    }

    /// Eval-mode logits for a batch, without keeping the tape.
    Tensor<S> logits(const Tensor<S>& x) {
        Tape<S> t;
        Bound b = bind(t, false);
        Var xv = t.leaf(x, false);
        Var out = forward(t, b, xv, Mode::eval);
        return t.value(out);
    }
};

}  // namespace cvit
