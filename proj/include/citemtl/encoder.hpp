#pragma once

// Compact transformer encoder: learned token + position embeddings, pre-norm
// attention/feed-forward blocks, final layer norm. Produces contextualized
// per-token embeddings for the readout stage.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "citemtl/rng.hpp"
#include "citemtl/tensor.hpp"

namespace citemtl {

struct EncoderConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_len = 128;
    double dropout = 0.1;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
            max_len <= 0) {
            throw std::invalid_argument("encoder config: all dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("encoder config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw std::invalid_argument("encoder config: dropout must be in [0, 1)");
        }
    }
};

template <typename T>
struct EncoderLayerParams {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w_ff1, b_ff1, w_ff2, b_ff2;
};

template <typename T>
struct EncoderParams {
    EncoderConfig config;
    Tensor<T> tok_embed;  // [vocab_size, d_model]
    Tensor<T> pos_embed;  // [max_len, d_model]
    std::vector<EncoderLayerParams<T>> layers;
    Tensor<T> ln_f_gain, ln_f_bias;

    // Checkpoint field order; also the optimizer's parameter order.
    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("tok_embed", tok_embed);
        out.emplace_back("pos_embed", pos_embed);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.emplace_back(p + "ln1_gain", l.ln1_gain);
            out.emplace_back(p + "ln1_bias", l.ln1_bias);
            out.emplace_back(p + "wq", l.wq);
            out.emplace_back(p + "bq", l.bq);
            out.emplace_back(p + "wk", l.wk);
            out.emplace_back(p + "bk", l.bk);
            out.emplace_back(p + "wv", l.wv);
            out.emplace_back(p + "bv", l.bv);
            out.emplace_back(p + "wo", l.wo);
            out.emplace_back(p + "bo", l.bo);
            out.emplace_back(p + "ln2_gain", l.ln2_gain);
            out.emplace_back(p + "ln2_bias", l.ln2_bias);
            out.emplace_back(p + "w_ff1", l.w_ff1);
            out.emplace_back(p + "b_ff1", l.b_ff1);
            out.emplace_back(p + "w_ff2", l.w_ff2);
            out.emplace_back(p + "b_ff2", l.b_ff2);
        }
        out.emplace_back("ln_f_gain", ln_f_gain);
        out.emplace_back("ln_f_bias", ln_f_bias);
        return out;
    }

    std::vector<Tensor<T>> all() const {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }
};

// Weights from a seeded truncated normal (sigma 0.02, cut at 4 sigma), zero
// biases, unit layer-norm gains. Same seed, same parameter bytes.
template <typename T>
EncoderParams<T> init_params(const EncoderConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 0x1215ULL));
    const double sigma = 0.02;
    const std::int64_t d = cfg.d_model;

    const auto weight = [&](Shape shape) {
        return Tensor<T>::trunc_normal(std::move(shape), rng, sigma).set_requires_grad(true);
    };
    const auto zeros = [&](Shape shape) {
        return Tensor<T>::zeros(std::move(shape)).set_requires_grad(true);
    };
    const auto ones = [&](Shape shape) {
        return Tensor<T>::full(std::move(shape), T(1)).set_requires_grad(true);
    };

    EncoderParams<T> p;
    p.config = cfg;
    p.tok_embed = weight({cfg.vocab_size, d});
    p.pos_embed = weight({cfg.max_len, d});
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
        l.ln1_gain = ones({d});
        l.ln1_bias = zeros({d});
        l.wq = weight({d, d});
        l.bq = zeros({d});
        l.wk = weight({d, d});
        l.bk = zeros({d});
        l.wv = weight({d, d});
        l.bv = zeros({d});
        l.wo = weight({d, d});
        l.bo = zeros({d});
        l.ln2_gain = ones({d});
        l.ln2_bias = zeros({d});
        l.w_ff1 = weight({d, cfg.d_ff});
        l.b_ff1 = zeros({cfg.d_ff});
        l.w_ff2 = weight({cfg.d_ff, d});
        l.b_ff2 = zeros({d});
    }
    p.ln_f_gain = ones({d});
    p.ln_f_bias = zeros({d});
    return p;
}

struct EncodeContext {
    bool train = false;
    Rng* dropout_rng = nullptr;  // required when train and dropout > 0
};

// Optional capture of softmaxed attention weights, one [B*H, L, L] tensor per
// layer. Test/diagnostic hook.
template <typename T>
struct EncodeTrace {
    std::vector<Tensor<T>> attention;
};

// token_ids/mask are row-major [B, L]. Returns [B, L, d_model] embeddings.
// Padding positions neither attend usefully nor are attended to: key columns
// at pad positions are masked out of every softmax.
template <typename T>
Tensor<T> encode(const EncoderParams<T>& params, const std::vector<int>& token_ids,
                 const std::vector<std::uint8_t>& mask, std::int64_t batch, std::int64_t seq_len,
                 const EncodeContext& ctx, EncodeTrace<T>* trace = nullptr) {
    const EncoderConfig& cfg = params.config;
    if (seq_len > cfg.max_len) {
        throw std::invalid_argument("encode: sequence length " + std::to_string(seq_len) +
                                    " exceeds max_len " + std::to_string(cfg.max_len));
    }
    if (static_cast<std::int64_t>(token_ids.size()) != batch * seq_len ||
        static_cast<std::int64_t>(mask.size()) != batch * seq_len) {
        throw std::invalid_argument("encode: ids/mask do not cover batch " +
                                    std::to_string(batch) + " x " + std::to_string(seq_len));
    }
    const bool use_dropout = ctx.train && cfg.dropout > 0.0;
    if (use_dropout && ctx.dropout_rng == nullptr) {
        throw std::invalid_argument("encode: training forward needs a dropout rng");
    }
    const auto drop = [&](const Tensor<T>& t) {
        return use_dropout ? dropout(t, cfg.dropout, *ctx.dropout_rng, true) : t;
    };

    const std::int64_t d = cfg.d_model;
    const std::int64_t dh = d / cfg.n_heads;
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> x = add(embedding_lookup(params.tok_embed, token_ids, batch, seq_len),
                      positional_rows(params.pos_embed, batch, seq_len));
    x = drop(x);

    for (const auto& l : params.layers) {
        // attention sublayer, pre-norm
        Tensor<T> h = layer_norm(reshape(x, {batch * seq_len, d}), l.ln1_gain, l.ln1_bias);
        Tensor<T> q = split_heads(reshape(add_bias(matmul(h, l.wq), l.bq), {batch, seq_len, d}),
                                  cfg.n_heads);
        Tensor<T> k = split_heads(reshape(add_bias(matmul(h, l.wk), l.bk), {batch, seq_len, d}),
                                  cfg.n_heads);
        Tensor<T> v = split_heads(reshape(add_bias(matmul(h, l.wv), l.bv), {batch, seq_len, d}),
                                  cfg.n_heads);
        Tensor<T> scores = attention_mask_bias(bmm_nt(q, k, att_scale), mask, cfg.n_heads);
        Tensor<T> attn = softmax_lastdim(scores);
        if (trace) trace->attention.push_back(attn);
        attn = drop(attn);
        Tensor<T> ctx_heads = merge_heads(bmm(attn, v), cfg.n_heads);
        Tensor<T> proj =
            add_bias(matmul(reshape(ctx_heads, {batch * seq_len, d}), l.wo), l.bo);
        x = add(x, reshape(drop(proj), {batch, seq_len, d}));

        // feed-forward sublayer, pre-norm
        Tensor<T> f = layer_norm(reshape(x, {batch * seq_len, d}), l.ln2_gain, l.ln2_bias);
        f = add_bias(matmul(gelu(add_bias(matmul(f, l.w_ff1), l.b_ff1)), l.w_ff2), l.b_ff2);
        x = add(x, reshape(drop(f), {batch, seq_len, d}));
    }

    Tensor<T> out =
        layer_norm(reshape(x, {batch * seq_len, d}), params.ln_f_gain, params.ln_f_bias);
    return reshape(out, {batch, seq_len, d});
}

}  // namespace citemtl
