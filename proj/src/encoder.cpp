#include "cloze_debias/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cloze_debias::encoder {

namespace {

constexpr double kLayerNormEps = 1e-12;

// c += a * b, row-major; a: m x k, b: k x n, c: m x n.
void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            const double* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c += a * b^T; a: m x k, b: n x k, c: m x n.
void mm_transb(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* br = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

// c += a^T * b; a: k x m, b: k x n, c: m x n.
void mm_transa(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ar = a + p * m;
        const double* br = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c + i * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
           x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

// out = scale .* normalized(y) + shift; caches normalized and rstd.
void layer_norm(const double* y, const double* scale, const double* shift, std::size_t h,
                double* out, double* normalized, double* rstd_out) {
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += y[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
        const double d = y[j] - mean;
        var += d * d;
    }
    var /= static_cast<double>(h);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    *rstd_out = rstd;
    for (std::size_t j = 0; j < h; ++j) {
        normalized[j] = (y[j] - mean) * rstd;
        out[j] = scale[j] * normalized[j] + shift[j];
    }
}

// Backprop through layer_norm at one position. dout is the gradient at the
// output; returns dy into dy (accumulating) and accumulates dscale/dshift.
void layer_norm_backward(const double* dout, const double* normalized, double rstd,
                         const double* scale, std::size_t h, double* dy, double* dscale,
                         double* dshift) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
        const double dn = dout[j] * scale[j];
        m1 += dn;
        m2 += dn * normalized[j];
        dscale[j] += dout[j] * normalized[j];
        dshift[j] += dout[j];
    }
    m1 /= static_cast<double>(h);
    m2 /= static_cast<double>(h);
    for (std::size_t j = 0; j < h; ++j) {
        const double dn = dout[j] * scale[j];
        dy[j] += rstd * (dn - m1 - normalized[j] * m2);
    }
}

void fill_dropout_mask(std::vector<double>& mask, double rate, Rng& rng) {
    const double keep = 1.0 - rate;
    const double inv_keep = 1.0 / keep;
    for (double& m : mask) m = rng.bernoulli(keep) ? inv_keep : 0.0;
}

}  // namespace

void EncoderConfig::validate() const {
    if (hidden_units == 0 || heads == 0 || blocks == 0 || steps == 0)
        throw ArgumentError("encoder config: dimensions must be positive");
    if (hidden_units % heads != 0)
        throw ArgumentError("encoder config: hidden_units must be divisible by heads");
    if (item_count < 1) throw ArgumentError("encoder config: item_count must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ArgumentError("encoder config: dropout_rate must be in [0, 1)");
}

std::size_t EncoderParams::parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                        const std::vector<double>& data) { n += data.size(); });
    return n;
}

bool EncoderParams::same_shape(const EncoderParams& o) const {
    return config.hidden_units == o.config.hidden_units && config.blocks == o.config.blocks &&
           config.steps == o.config.steps && config.item_count == o.config.item_count;
}

EncoderParams init_params(const EncoderConfig& config) {
    config.validate();
    EncoderParams params;
    params.config = config;
    const std::size_t h = config.hidden_units;
    params.item_embedding.resize((static_cast<std::size_t>(config.item_count) + 2) * h);
    params.position_embedding.resize(config.steps * h);
    params.blocks.resize(config.blocks);
    for (auto& blk : params.blocks) {
        blk.attn_query.resize(h * h);
        blk.attn_key.resize(h * h);
        blk.attn_value.resize(h * h);
        blk.attn_output.resize(h * h);
        blk.ff_in_weight.resize(h * 4 * h);
        blk.ff_in_bias.resize(4 * h);
        blk.ff_out_weight.resize(4 * h * h);
        blk.ff_out_bias.resize(h);
        blk.ln1_scale.resize(h);
        blk.ln1_shift.resize(h);
        blk.ln2_scale.resize(h);
        blk.ln2_shift.resize(h);
    }
    params.output_bias.resize(static_cast<std::size_t>(config.item_count));

    Rng rng(config.seed);
    params.for_each_tensor([&](const std::string&, TensorKind kind, const std::vector<std::size_t>&,
                               std::vector<double>& data) {
        switch (kind) {
            case TensorKind::Weight:
                for (double& w : data) w = rng.normal(0.0, 0.02);
                break;
            case TensorKind::Bias:
                std::fill(data.begin(), data.end(), 0.0);
                break;
            case TensorKind::Scale:
                std::fill(data.begin(), data.end(), 1.0);
                break;
        }
    });
    return params;
}

EncoderParams zeros_like(const EncoderParams& params) {
    EncoderParams z = params;
    z.for_each_tensor([](const std::string&, TensorKind, const std::vector<std::size_t>&,
                         std::vector<double>& data) { std::fill(data.begin(), data.end(), 0.0); });
    return z;
}

ForwardResult forward(const EncoderParams& params, const GridI& tokens, const ForwardOptions& opts) {
    const EncoderConfig& cfg = params.config;
    const std::size_t batch = tokens.rows;
    const std::size_t steps = cfg.steps;
    const std::size_t h = cfg.hidden_units;
    const std::size_t heads = cfg.heads;
    const std::size_t dh = cfg.head_dim();
    const std::size_t items = static_cast<std::size_t>(cfg.item_count);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const double drop_rate = opts.dropout_rate < 0.0 ? cfg.dropout_rate : opts.dropout_rate;

    if (tokens.cols != steps) throw ArgumentError("forward: token row length != config steps");
    for (const std::int32_t tok : tokens.v)
        if (tok < 0 || tok > cfg.item_count + 1)
            throw ArgumentError("forward: token out of range for vocabulary");

    ForwardResult result;
    ActivationCache& cache = result.cache;
    cache.config = cfg;
    cache.batch = batch;
    cache.tokens = tokens;
    cache.real.resize(batch * steps);
    for (std::size_t i = 0; i < tokens.v.size(); ++i) cache.real[i] = tokens.v[i] != 0;

    Rng drop_rng(opts.dropout_seed);

    // Embedding sum.
    std::vector<double> x(batch * steps * h);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < steps; ++t) {
            const double* emb = params.item_embedding.data() +
                                static_cast<std::size_t>(tokens.at(b, t)) * h;
            const double* pos = params.position_embedding.data() + t * h;
            double* xr = x.data() + (b * steps + t) * h;
            for (std::size_t j = 0; j < h; ++j) xr[j] = emb[j] + pos[j];
        }

    cache.blocks.resize(cfg.blocks);
    std::vector<double> scores(steps);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        BlockCache& bc = cache.blocks[l];
        const BlockParams& bp = params.blocks[l];
        bc.x_in = x;

        bc.q.assign(batch * steps * h, 0.0);
        bc.k.assign(batch * steps * h, 0.0);
        bc.v.assign(batch * steps * h, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            const double* xb = bc.x_in.data() + b * steps * h;
            mm(xb, bp.attn_query.data(), bc.q.data() + b * steps * h, steps, h, h);
            mm(xb, bp.attn_key.data(), bc.k.data() + b * steps * h, steps, h, h);
            mm(xb, bp.attn_value.data(), bc.v.data() + b * steps * h, steps, h, h);
        }

        bc.probs.assign(batch * heads * steps * steps, 0.0);
        bc.ctx.assign(batch * steps * h, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::uint8_t* real = cache.real.data() + b * steps;
            for (std::size_t a = 0; a < heads; ++a) {
                const std::size_t off = a * dh;
                double* probs = bc.probs.data() + ((b * heads + a) * steps) * steps;
                for (std::size_t t = 0; t < steps; ++t) {
                    if (!real[t]) continue;  // padding queries attend to nothing
                    const double* qt = bc.q.data() + (b * steps + t) * h + off;
                    double mx = -HUGE_VAL;
                    for (std::size_t u = 0; u < steps; ++u) {
                        if (!real[u]) continue;
                        const double* ku = bc.k.data() + (b * steps + u) * h + off;
                        double dot = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) dot += qt[d] * ku[d];
                        scores[u] = dot * inv_sqrt_dh;
                        mx = std::max(mx, scores[u]);
                    }
                    double sum = 0.0;
                    double* pr = probs + t * steps;
                    for (std::size_t u = 0; u < steps; ++u) {
                        if (!real[u]) continue;
                        pr[u] = std::exp(scores[u] - mx);
                        sum += pr[u];
                    }
                    const double inv = 1.0 / sum;
                    double* ct = bc.ctx.data() + (b * steps + t) * h + off;
                    for (std::size_t u = 0; u < steps; ++u) {
                        if (pr[u] == 0.0) continue;
                        pr[u] *= inv;
                        const double* vu = bc.v.data() + (b * steps + u) * h + off;
                        for (std::size_t d = 0; d < dh; ++d) ct[d] += pr[u] * vu[d];
                    }
                }
            }
        }

        // Attention projection, dropout, residual, layer norm.
        std::vector<double> attn_out(batch * steps * h, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
            mm(bc.ctx.data() + b * steps * h, bp.attn_output.data(),
               attn_out.data() + b * steps * h, steps, h, h);
        if (drop_rate > 0.0) {
            bc.drop_attn.resize(batch * steps * h);
            fill_dropout_mask(bc.drop_attn, drop_rate, drop_rng);
            for (std::size_t i = 0; i < attn_out.size(); ++i) attn_out[i] *= bc.drop_attn[i];
        }

        bc.n1.resize(batch * steps * h);
        bc.rstd1.resize(batch * steps);
        bc.x1.resize(batch * steps * h);
        std::vector<double> y1(h);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < steps; ++t) {
                const std::size_t base = (b * steps + t) * h;
                for (std::size_t j = 0; j < h; ++j) y1[j] = bc.x_in[base + j] + attn_out[base + j];
                layer_norm(y1.data(), bp.ln1_scale.data(), bp.ln1_shift.data(), h,
                           bc.x1.data() + base, bc.n1.data() + base, &bc.rstd1[b * steps + t]);
            }

        // Feed-forward.
        bc.h_pre.assign(batch * steps * 4 * h, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
            mm(bc.x1.data() + b * steps * h, bp.ff_in_weight.data(),
               bc.h_pre.data() + b * steps * 4 * h, steps, h, 4 * h);
        for (std::size_t bt = 0; bt < batch * steps; ++bt)
            for (std::size_t j = 0; j < 4 * h; ++j) bc.h_pre[bt * 4 * h + j] += bp.ff_in_bias[j];
        bc.h_act.resize(bc.h_pre.size());
        for (std::size_t i = 0; i < bc.h_pre.size(); ++i) bc.h_act[i] = gelu(bc.h_pre[i]);

        std::vector<double> ff_out(batch * steps * h, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
            mm(bc.h_act.data() + b * steps * 4 * h, bp.ff_out_weight.data(),
               ff_out.data() + b * steps * h, steps, 4 * h, h);
        for (std::size_t bt = 0; bt < batch * steps; ++bt)
            for (std::size_t j = 0; j < h; ++j) ff_out[bt * h + j] += bp.ff_out_bias[j];
        if (drop_rate > 0.0) {
            bc.drop_ff.resize(batch * steps * h);
            fill_dropout_mask(bc.drop_ff, drop_rate, drop_rng);
            for (std::size_t i = 0; i < ff_out.size(); ++i) ff_out[i] *= bc.drop_ff[i];
        }

        bc.n2.resize(batch * steps * h);
        bc.rstd2.resize(batch * steps);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < steps; ++t) {
                const std::size_t base = (b * steps + t) * h;
                for (std::size_t j = 0; j < h; ++j) y1[j] = bc.x1[base + j] + ff_out[base + j];
                layer_norm(y1.data(), bp.ln2_scale.data(), bp.ln2_shift.data(), h,
                           x.data() + base, bc.n2.data() + base, &bc.rstd2[b * steps + t]);
            }
    }
    cache.final_hidden = x;

    // Tied output projection over real items.
    result.logits = losses::LogitTensor(batch, steps, items, 0.0);
    const double* emb_items = params.item_embedding.data() + h;  // rows 1..|I|
    for (std::size_t b = 0; b < batch; ++b)
        mm_transb(x.data() + b * steps * h, emb_items, result.logits.v.data() + b * steps * items,
                  steps, h, items);
    for (std::size_t bt = 0; bt < batch * steps; ++bt)
        for (std::size_t i = 0; i < items; ++i)
            result.logits.v[bt * items + i] += params.output_bias[i];

    if (!opts.want_cache) {
        cache.blocks.clear();
        cache.blocks.shrink_to_fit();
        cache.final_hidden.clear();
    }
    return result;
}

EncoderGradients backward(const EncoderParams& params, const ActivationCache& cache,
                          const losses::LogitTensor& dlogits) {
    const EncoderConfig& cfg = params.config;
    const std::size_t batch = cache.batch;
    const std::size_t steps = cfg.steps;
    const std::size_t h = cfg.hidden_units;
    const std::size_t heads = cfg.heads;
    const std::size_t dh = cfg.head_dim();
    const std::size_t items = static_cast<std::size_t>(cfg.item_count);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    if (dlogits.rows != batch || dlogits.steps != steps || dlogits.items != items)
        throw ArgumentError("backward: dlogits shape does not match cache");
    if (cache.blocks.size() != cfg.blocks)
        throw ArgumentError("backward: cache has no stored activations");

    EncoderGradients grads = zeros_like(params);

    // Output projection (tied embedding) backward.
    std::vector<double> dx(batch * steps * h, 0.0);
    double* demb_items = grads.item_embedding.data() + h;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < steps; ++t) {
            const double* g = dlogits.row(b, t);
            bool any = false;
            for (std::size_t i = 0; i < items; ++i)
                if (g[i] != 0.0) {
                    any = true;
                    break;
                }
            if (!any) continue;
            const std::size_t base = (b * steps + t) * h;
            const double* hid = cache.final_hidden.data() + base;
            double* dxr = dx.data() + base;
            for (std::size_t i = 0; i < items; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                grads.output_bias[i] += gi;
                const double* ei = params.item_embedding.data() + (1 + i) * h;
                double* dei = demb_items + i * h;
                for (std::size_t j = 0; j < h; ++j) {
                    dxr[j] += gi * ei[j];
                    dei[j] += gi * hid[j];
                }
            }
        }

    std::vector<double> dy1(batch * steps * h), dx1(batch * steps * h);
    std::vector<double> dff(batch * steps * h), dattn(batch * steps * h);
    std::vector<double> dhact(batch * steps * 4 * h), dhpre(batch * steps * 4 * h);
    std::vector<double> dq(batch * steps * h), dk(batch * steps * h), dv(batch * steps * h);
    std::vector<double> dctx(batch * steps * h);
    std::vector<double> dprobs(steps), dscores(steps);

    for (std::size_t l = cfg.blocks; l-- > 0;) {
        const BlockCache& bc = cache.blocks[l];
        const BlockParams& bp = params.blocks[l];
        BlockParams& gb = grads.blocks[l];

        // LayerNorm 2: dx is the gradient at this block's output.
        std::fill(dx1.begin(), dx1.end(), 0.0);
        std::fill(dff.begin(), dff.end(), 0.0);
        for (std::size_t bt = 0; bt < batch * steps; ++bt) {
            const std::size_t base = bt * h;
            layer_norm_backward(dx.data() + base, bc.n2.data() + base, bc.rstd2[bt],
                                bp.ln2_scale.data(), h, dff.data() + base, gb.ln2_scale.data(),
                                gb.ln2_shift.data());
        }
        // dff currently holds dY2; split into residual (dx1) and ff branch.
        dx1 = dff;
        if (!bc.drop_ff.empty())
            for (std::size_t i = 0; i < dff.size(); ++i) dff[i] *= bc.drop_ff[i];

        // Feed-forward backward.
        for (std::size_t bt = 0; bt < batch * steps; ++bt)
            for (std::size_t j = 0; j < h; ++j) gb.ff_out_bias[j] += dff[bt * h + j];
        std::fill(dhact.begin(), dhact.end(), 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            mm_transb(dff.data() + b * steps * h, bp.ff_out_weight.data(),
                      dhact.data() + b * steps * 4 * h, steps, h, 4 * h);
            mm_transa(bc.h_act.data() + b * steps * 4 * h, dff.data() + b * steps * h,
                      gb.ff_out_weight.data(), 4 * h, steps, h);
        }
        for (std::size_t i = 0; i < dhpre.size(); ++i) dhpre[i] = dhact[i] * gelu_grad(bc.h_pre[i]);
        for (std::size_t bt = 0; bt < batch * steps; ++bt)
            for (std::size_t j = 0; j < 4 * h; ++j) gb.ff_in_bias[j] += dhpre[bt * 4 * h + j];
        for (std::size_t b = 0; b < batch; ++b) {
            mm_transb(dhpre.data() + b * steps * 4 * h, bp.ff_in_weight.data(),
                      dx1.data() + b * steps * h, steps, 4 * h, h);
            mm_transa(bc.x1.data() + b * steps * h, dhpre.data() + b * steps * 4 * h,
                      gb.ff_in_weight.data(), h, steps, 4 * h);
        }

        // LayerNorm 1.
        std::fill(dy1.begin(), dy1.end(), 0.0);
        for (std::size_t bt = 0; bt < batch * steps; ++bt) {
            const std::size_t base = bt * h;
            layer_norm_backward(dx1.data() + base, bc.n1.data() + base, bc.rstd1[bt],
                                bp.ln1_scale.data(), h, dy1.data() + base, gb.ln1_scale.data(),
                                gb.ln1_shift.data());
        }
        // dy1 splits into the residual path (into dx for x_in) and attention.
        dx = dy1;
        dattn = dy1;
        if (!bc.drop_attn.empty())
            for (std::size_t i = 0; i < dattn.size(); ++i) dattn[i] *= bc.drop_attn[i];

        std::fill(dctx.begin(), dctx.end(), 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            mm_transb(dattn.data() + b * steps * h, bp.attn_output.data(),
                      dctx.data() + b * steps * h, steps, h, h);
            mm_transa(bc.ctx.data() + b * steps * h, dattn.data() + b * steps * h,
                      gb.attn_output.data(), h, steps, h);
        }

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::uint8_t* real = cache.real.data() + b * steps;
            for (std::size_t a = 0; a < heads; ++a) {
                const std::size_t off = a * dh;
                const double* probs = bc.probs.data() + ((b * heads + a) * steps) * steps;
                for (std::size_t t = 0; t < steps; ++t) {
                    if (!real[t]) continue;
                    const double* pr = probs + t * steps;
                    const double* dct = dctx.data() + (b * steps + t) * h + off;
                    double dot_sum = 0.0;
                    for (std::size_t u = 0; u < steps; ++u) {
                        if (pr[u] == 0.0 && !real[u]) {
                            dprobs[u] = 0.0;
                            continue;
                        }
                        const double* vu = bc.v.data() + (b * steps + u) * h + off;
                        double acc = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) acc += dct[d] * vu[d];
                        dprobs[u] = acc;
                        double* dvu = dv.data() + (b * steps + u) * h + off;
                        for (std::size_t d = 0; d < dh; ++d) dvu[d] += pr[u] * dct[d];
                        dot_sum += pr[u] * dprobs[u];
                    }
                    const double* qt = bc.q.data() + (b * steps + t) * h + off;
                    double* dqt = dq.data() + (b * steps + t) * h + off;
                    for (std::size_t u = 0; u < steps; ++u) {
                        if (!real[u]) continue;
                        const double ds = pr[u] * (dprobs[u] - dot_sum) * inv_sqrt_dh;
                        if (ds == 0.0) continue;
                        const double* ku = bc.k.data() + (b * steps + u) * h + off;
                        double* dku = dk.data() + (b * steps + u) * h + off;
                        for (std::size_t d = 0; d < dh; ++d) {
                            dqt[d] += ds * ku[d];
                            dku[d] += ds * qt[d];
                        }
                    }
                }
            }
        }

        for (std::size_t b = 0; b < batch; ++b) {
            const double* xb = bc.x_in.data() + b * steps * h;
            mm_transb(dq.data() + b * steps * h, bp.attn_query.data(), dx.data() + b * steps * h,
                      steps, h, h);
            mm_transb(dk.data() + b * steps * h, bp.attn_key.data(), dx.data() + b * steps * h,
                      steps, h, h);
            mm_transb(dv.data() + b * steps * h, bp.attn_value.data(), dx.data() + b * steps * h,
                      steps, h, h);
            mm_transa(xb, dq.data() + b * steps * h, gb.attn_query.data(), h, steps, h);
            mm_transa(xb, dk.data() + b * steps * h, gb.attn_key.data(), h, steps, h);
            mm_transa(xb, dv.data() + b * steps * h, gb.attn_value.data(), h, steps, h);
        }
    }

    // Embedding backward.
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < steps; ++t) {
            const std::size_t base = (b * steps + t) * h;
            const double* dxr = dx.data() + base;
            double* de = grads.item_embedding.data() +
                         static_cast<std::size_t>(cache.tokens.at(b, t)) * h;
            double* dp = grads.position_embedding.data() + t * h;
            for (std::size_t j = 0; j < h; ++j) {
                de[j] += dxr[j];
                dp[j] += dxr[j];
            }
        }
    return grads;
}

void sgd_step(EncoderParams& params, const EncoderGradients& grads, double lr) {
    if (!(lr >= 0.0)) throw ArgumentError("sgd_step: lr must be >= 0");
    std::vector<const std::vector<double>*> gs;
    grads.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                              const std::vector<double>& data) { gs.push_back(&data); });
    std::size_t idx = 0;
    params.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               std::vector<double>& data) {
        const auto& g = *gs[idx++];
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
    });
}

void sgd_momentum_step(EncoderParams& params, const EncoderGradients& grads, double lr,
                       double momentum, EncoderGradients& velocity) {
    std::vector<const std::vector<double>*> gs;
    grads.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                              const std::vector<double>& data) { gs.push_back(&data); });
    std::vector<std::vector<double>*> vs;
    velocity.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                                 std::vector<double>& data) { vs.push_back(&data); });
    std::size_t idx = 0;
    params.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               std::vector<double>& data) {
        const auto& g = *gs[idx];
        auto& v = *vs[idx];
        ++idx;
        for (std::size_t i = 0; i < data.size(); ++i) {
            v[i] = momentum * v[i] + g[i];
            data[i] -= lr * v[i];
        }
    });
}

void save_checkpoint(const EncoderParams& params, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["config"] = {{"hidden_units", params.config.hidden_units},
                          {"blocks", params.config.blocks},
                          {"heads", params.config.heads},
                          {"steps", params.config.steps},
                          {"item_count", params.config.item_count},
                          {"dropout_rate", params.config.dropout_rate},
                          {"seed", params.config.seed}};
    manifest["order"] = "row-major";
    nlohmann::json tensors = nlohmann::json::array();

    std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write checkpoint in " + dir);
    std::size_t offset = 0;
    params.for_each_tensor([&](const std::string& name, TensorKind, const std::vector<std::size_t>& shape,
                               const std::vector<double>& data) {
        tensors.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", data.size()}});
        bin.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size() * sizeof(double)));
        offset += data.size();
    });
    manifest["tensors"] = std::move(tensors);
    std::ofstream mout(fs::path(dir) / "manifest.json", std::ios::binary);
    mout << manifest.dump(2) << '\n';
}

EncoderParams load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream min(fs::path(dir) / "manifest.json");
    if (!min) throw IoError("missing checkpoint manifest in " + dir);
    const nlohmann::json manifest = nlohmann::json::parse(min);
    const auto& jc = manifest.at("config");
    EncoderConfig cfg;
    cfg.hidden_units = jc.at("hidden_units").get<std::size_t>();
    cfg.blocks = jc.at("blocks").get<std::size_t>();
    cfg.heads = jc.at("heads").get<std::size_t>();
    cfg.steps = jc.at("steps").get<std::size_t>();
    cfg.item_count = jc.at("item_count").get<std::int32_t>();
    cfg.dropout_rate = jc.at("dropout_rate").get<double>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();

    EncoderParams params = init_params(cfg);
    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw IoError("missing checkpoint params.bin in " + dir);
    params.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               std::vector<double>& data) {
        bin.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!bin) throw IoError("checkpoint params.bin truncated in " + dir);
    });
    return params;
}

}  // namespace cloze_debias::encoder
