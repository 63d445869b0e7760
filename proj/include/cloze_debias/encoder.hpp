#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloze_debias/common.hpp"
#include "cloze_debias/losses.hpp"

namespace cloze_debias::encoder {

struct EncoderConfig {
    std::size_t hidden_units = 16;  // h, divisible by heads
    std::size_t blocks = 1;         // L
    std::size_t heads = 2;          // A
    std::size_t steps = 20;         // T
    std::int32_t item_count = 0;    // |I|
    double dropout_rate = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t head_dim() const { return hidden_units / heads; }
};

enum class TensorKind { Weight, Bias, Scale };

struct BlockParams {
    std::vector<double> attn_query, attn_key, attn_value, attn_output;  // h x h
    std::vector<double> ff_in_weight, ff_in_bias;                       // h x 4h, 4h
    std::vector<double> ff_out_weight, ff_out_bias;                     // 4h x h, h
    std::vector<double> ln1_scale, ln1_shift, ln2_scale, ln2_shift;     // h each
};

// All trainable state. The output projection is tied to the item embedding
// rows 1..|I|; rows 0 and |I|+1 embed the padding and mask tokens.
struct EncoderParams {
    EncoderConfig config;
    std::vector<double> item_embedding;      // (|I|+2) x h
    std::vector<double> position_embedding;  // T x h
    std::vector<BlockParams> blocks;
    std::vector<double> output_bias;         // |I|

    template <typename F>
    void for_each_tensor(F&& f);
    template <typename F>
    void for_each_tensor(F&& f) const;

    std::size_t parameter_count() const;
    bool same_shape(const EncoderParams& o) const;
};

using EncoderGradients = EncoderParams;

struct BlockCache {
    std::vector<double> x_in, q, k, v, probs, ctx;       // probs: (B, A, T, T)
    std::vector<double> n1, rstd1, x1, h_pre, h_act, n2, rstd2;
    std::vector<double> drop_attn, drop_ff;              // empty when dropout off
};

struct ActivationCache {
    EncoderConfig config;
    GridI tokens;
    std::vector<std::uint8_t> real;   // per (row, step): token != padding
    std::vector<BlockCache> blocks;
    std::vector<double> final_hidden; // B x T x h
    std::size_t batch = 0;
};

struct ForwardOptions {
    bool want_cache = true;
    double dropout_rate = -1.0;  // < 0 means use the config's rate
    std::uint64_t dropout_seed = 0;
};

struct ForwardResult {
    losses::LogitTensor logits;
    ActivationCache cache;
};

// Weights ~ Normal(0, 0.02^2) from the config seed; layer-norm scales 1,
// shifts and biases 0. Deterministic for a fixed seed.
EncoderParams init_params(const EncoderConfig& config);
EncoderParams zeros_like(const EncoderParams& params);

// Per-position logits over real items. Padding positions neither attend nor
// are attended to; their logits are defined but carry no loss terms.
ForwardResult forward(const EncoderParams& params, const GridI& tokens,
                      const ForwardOptions& opts = {});

// Exact reverse-mode gradients for every parameter tensor.
EncoderGradients backward(const EncoderParams& params, const ActivationCache& cache,
                          const losses::LogitTensor& dlogits);

// params <- params - lr * grads (optionally with momentum velocity).
void sgd_step(EncoderParams& params, const EncoderGradients& grads, double lr);
void sgd_momentum_step(EncoderParams& params, const EncoderGradients& grads, double lr,
                       double momentum, EncoderGradients& velocity);

// Flat binary tensor dump plus a manifest (name, shape, row-major order);
// reload is bit-exact.
void save_checkpoint(const EncoderParams& params, const std::string& dir);
EncoderParams load_checkpoint(const std::string& dir);

// ---------------------------------------------------------------------------

template <typename F>
void EncoderParams::for_each_tensor(F&& f) {
    const std::size_t h = config.hidden_units;
    f("item_embedding", TensorKind::Weight,
      std::vector<std::size_t>{static_cast<std::size_t>(config.item_count) + 2, h}, item_embedding);
    f("position_embedding", TensorKind::Weight, std::vector<std::size_t>{config.steps, h},
      position_embedding);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        auto& blk = blocks[b];
        f(p + "attn_query", TensorKind::Weight, std::vector<std::size_t>{h, h}, blk.attn_query);
        f(p + "attn_key", TensorKind::Weight, std::vector<std::size_t>{h, h}, blk.attn_key);
        f(p + "attn_value", TensorKind::Weight, std::vector<std::size_t>{h, h}, blk.attn_value);
        f(p + "attn_output", TensorKind::Weight, std::vector<std::size_t>{h, h}, blk.attn_output);
        f(p + "ff_in_weight", TensorKind::Weight, std::vector<std::size_t>{h, 4 * h}, blk.ff_in_weight);
        f(p + "ff_in_bias", TensorKind::Bias, std::vector<std::size_t>{4 * h}, blk.ff_in_bias);
        f(p + "ff_out_weight", TensorKind::Weight, std::vector<std::size_t>{4 * h, h}, blk.ff_out_weight);
        f(p + "ff_out_bias", TensorKind::Bias, std::vector<std::size_t>{h}, blk.ff_out_bias);
        f(p + "ln1_scale", TensorKind::Scale, std::vector<std::size_t>{h}, blk.ln1_scale);
        f(p + "ln1_shift", TensorKind::Bias, std::vector<std::size_t>{h}, blk.ln1_shift);
        f(p + "ln2_scale", TensorKind::Scale, std::vector<std::size_t>{h}, blk.ln2_scale);
        f(p + "ln2_shift", TensorKind::Bias, std::vector<std::size_t>{h}, blk.ln2_shift);
    }
    f("output_bias", TensorKind::Bias,
      std::vector<std::size_t>{static_cast<std::size_t>(config.item_count)}, output_bias);
}

template <typename F>
void EncoderParams::for_each_tensor(F&& f) const {
    const_cast<EncoderParams*>(this)->for_each_tensor(
        [&f](const std::string& name, TensorKind kind, const std::vector<std::size_t>& shape,
             std::vector<double>& data) { f(name, kind, shape, const_cast<const std::vector<double>&>(data)); });
}

}  // namespace cloze_debias::encoder
