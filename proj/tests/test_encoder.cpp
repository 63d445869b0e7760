#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cloze_debias/encoder.hpp"
#include "cloze_debias/losses.hpp"
#include "oracles.hpp"

using namespace cloze_debias;
using namespace cloze_debias::encoder;

namespace {

EncoderConfig small_config(std::size_t h, std::size_t blocks, std::size_t heads, std::size_t steps,
                           std::int32_t items, std::uint64_t seed) {
    EncoderConfig cfg;
    cfg.hidden_units = h;
    cfg.blocks = blocks;
    cfg.heads = heads;
    cfg.steps = steps;
    cfg.item_count = items;
    cfg.seed = seed;
    return cfg;
}

GridI tokens_from(std::initializer_list<std::initializer_list<std::int32_t>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = rows.begin()->size();
    GridI grid(r, c);
    std::size_t i = 0;
    for (const auto& row : rows)
        for (const auto tok : row) grid.v[i++] = tok;
    return grid;
}

// Scalar projection of the logits onto a fixed direction; its exact
// parameter gradient is backward(cache, direction).
double projected_logits(const EncoderParams& params, const GridI& tokens,
                        const losses::LogitTensor& direction) {
    const auto fwd = forward(params, tokens, {.want_cache = false});
    double acc = 0.0;
    for (std::size_t i = 0; i < fwd.logits.v.size(); ++i) acc += direction.v[i] * fwd.logits.v[i];
    return acc;
}

double max_gradcheck_error(EncoderParams& params, const GridI& tokens, std::uint64_t seed,
                           double step = 1e-5) {
    Rng rng(seed);
    const auto probe = forward(params, tokens);
    losses::LogitTensor direction(probe.logits.rows, probe.logits.steps, probe.logits.items);
    for (auto& g : direction.v) g = rng.uniform(-1.0, 1.0);
    const EncoderGradients grads = backward(params, probe.cache, direction);

    double worst = 0.0;
    std::vector<std::vector<double>*> tensors;
    std::vector<const std::vector<double>*> gtensors;
    params.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               std::vector<double>& data) { tensors.push_back(&data); });
    grads.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                              const std::vector<double>& data) { gtensors.push_back(&data); });
    for (std::size_t n = 0; n < tensors.size(); ++n) {
        const auto f = [&] { return projected_logits(params, tokens, direction); };
        worst = std::max(worst, oracles::max_relative_gradient_error(*tensors[n], *gtensors[n], f,
                                                                     step, 1.0));
    }
    return worst;
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("init is deterministic and follows the conventions") {
    const auto cfg = small_config(8, 2, 2, 4, 5, 42);
    const auto a = init_params(cfg);
    const auto b = init_params(cfg);
    bool identical = true;
    std::vector<const std::vector<double>*> ta, tb;
    a.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                          const std::vector<double>& d) { ta.push_back(&d); });
    b.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                          const std::vector<double>& d) { tb.push_back(&d); });
    for (std::size_t i = 0; i < ta.size(); ++i) identical = identical && (*ta[i] == *tb[i]);
    CHECK(identical);

    for (const double x : a.blocks[0].ln1_scale) CHECK(x == 1.0);
    for (const double x : a.blocks[1].ln2_scale) CHECK(x == 1.0);
    for (const double x : a.blocks[0].ff_in_bias) CHECK(x == 0.0);
    for (const double x : a.output_bias) CHECK(x == 0.0);
    CHECK(cfg.head_dim() == 4);

    CHECK_THROWS_AS(init_params(small_config(9, 1, 2, 4, 5, 0)), ArgumentError);  // 9 % 2 != 0
}

TEST_CASE("single-item vocabulary gives a degenerate simplex") {
    const auto params = init_params(small_config(4, 1, 1, 3, 1, 7));
    const auto fwd = forward(params, tokens_from({{0, 1, 2}}));  // pad, item, mask
    const auto probs = losses::softmax_over_items({fwd.logits.at(0, 2, 0)});
    CHECK(probs.size() == 1);
    CHECK(probs[0] == 1.0);
}

TEST_CASE("permuting batch rows permutes logits") {
    const auto params = init_params(small_config(8, 1, 2, 4, 6, 3));
    const auto fwd_ab = forward(params, tokens_from({{0, 1, 2, 3}, {4, 5, 6, 7}}));
    const auto fwd_ba = forward(params, tokens_from({{4, 5, 6, 7}, {0, 1, 2, 3}}));
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i < 6; ++i) {
            CHECK(fwd_ab.logits.at(0, t, i) == fwd_ba.logits.at(1, t, i));
            CHECK(fwd_ab.logits.at(1, t, i) == fwd_ba.logits.at(0, t, i));
        }
}

TEST_CASE("all-padding rows stay finite") {
    const auto params = init_params(small_config(8, 2, 2, 4, 6, 9));
    const auto fwd = forward(params, tokens_from({{0, 0, 0, 0}, {0, 0, 1, 2}}));
    for (const double x : fwd.logits.v) CHECK(std::isfinite(x));
}

TEST_CASE("token range is validated") {
    const auto params = init_params(small_config(4, 1, 1, 2, 3, 1));
    CHECK_THROWS_AS(forward(params, tokens_from({{1, 5}})), ArgumentError);  // mask is 4
    CHECK_THROWS_AS(forward(params, tokens_from({{-1, 1}})), ArgumentError);
}

TEST_CASE("backward is linear in dlogits") {
    const auto params = init_params(small_config(8, 1, 2, 4, 5, 11));
    const auto tokens = tokens_from({{0, 1, 6, 3}});
    const auto fwd = forward(params, tokens);

    losses::LogitTensor zero(1, 4, 5);
    const auto zero_grads = backward(params, fwd.cache, zero);
    zero_grads.for_each_tensor([](const std::string&, TensorKind, const std::vector<std::size_t>&,
                                  const std::vector<double>& d) {
        for (const double x : d) CHECK(x == 0.0);
    });

    Rng rng(4);
    losses::LogitTensor g(1, 4, 5);
    for (auto& x : g.v) x = rng.uniform(-1.0, 1.0);
    losses::LogitTensor g2 = g;
    for (auto& x : g2.v) x *= 2.0;
    const auto grads = backward(params, fwd.cache, g);
    const auto grads2 = backward(params, fwd.cache, g2);
    std::vector<const std::vector<double>*> t1, t2;
    grads.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                              const std::vector<double>& d) { t1.push_back(&d); });
    grads2.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               const std::vector<double>& d) { t2.push_back(&d); });
    for (std::size_t n = 0; n < t1.size(); ++n)
        for (std::size_t i = 0; i < t1[n]->size(); ++i)
            CHECK((*t2[n])[i] == doctest::Approx(2.0 * (*t1[n])[i]).epsilon(1e-14));
}

TEST_CASE("analytic gradients match central finite differences") {
    // Random small configurations, mixed padding.
    auto p1 = init_params(small_config(8, 1, 2, 4, 5, 123));
    CHECK(max_gradcheck_error(p1, tokens_from({{0, 1, 6, 3}, {2, 4, 5, 1}}), 1) <= 1e-4);

    auto p2 = init_params(small_config(8, 2, 2, 6, 9, 321));
    CHECK(max_gradcheck_error(p2, tokens_from({{0, 0, 3, 10, 7, 2}}), 2) <= 1e-4);

    // h=4 leaves the first layer norm with a tiny variance, so the step
    // shrinks to keep the finite-difference truncation error below the bar.
    auto p3 = init_params(small_config(4, 1, 1, 3, 3, 55));
    CHECK(max_gradcheck_error(p3, tokens_from({{0, 2, 4}, {1, 1, 3}, {0, 0, 2}}), 3, 1e-6) <= 1e-4);
}

TEST_CASE("loss gradient through the encoder matches finite differences") {
    auto params = init_params(small_config(8, 1, 2, 4, 5, 99));
    const auto tokens = tokens_from({{0, 2, 6, 4}});
    GridU8 mask(1, 4, 0);
    mask.at(0, 2) = 1;
    losses::InteractionTensor y;
    y.items = GridI(1, 4, 0);
    y.items.at(0, 2) = 3;
    const losses::LossDims dims{1, 5, 4};

    const auto loss_fn = [&] {
        const auto fwd = forward(params, tokens, {.want_cache = false});
        return losses::cloze_loss(fwd.logits, mask, y, dims);
    };
    const auto fwd = forward(params, tokens);
    const auto dlogits =
        losses::loss_grad_wrt_logits(fwd.logits, losses::cloze_terms(mask, y), dims);
    const auto grads = backward(params, fwd.cache, dlogits);

    std::vector<std::vector<double>*> tensors;
    std::vector<const std::vector<double>*> gtensors;
    params.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               std::vector<double>& d) { tensors.push_back(&d); });
    grads.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                              const std::vector<double>& d) { gtensors.push_back(&d); });
    double worst = 0.0;
    for (std::size_t n = 0; n < tensors.size(); ++n)
        worst = std::max(worst, oracles::max_relative_gradient_error(*tensors[n], *gtensors[n],
                                                                     loss_fn, 1e-5, 1e-2));
    CHECK(worst <= 1e-4);
}

TEST_CASE("extra leading padding does not disturb real positions") {
    const auto cfg = small_config(8, 2, 2, 4, 6, 77);
    const auto params = init_params(cfg);
    const auto base = forward(params, tokens_from({{0, 1, 5, 2}}));

    // Same weights with the position table shifted under two more padding
    // columns; real items keep their position embeddings.
    EncoderConfig wide_cfg = cfg;
    wide_cfg.steps = 6;
    EncoderParams wide = init_params(wide_cfg);
    wide.item_embedding = params.item_embedding;
    wide.blocks = params.blocks;
    wide.output_bias = params.output_bias;
    const std::size_t h = cfg.hidden_units;
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t j = 0; j < h; ++j)
            wide.position_embedding[t * h + j] =
                t < 2 ? params.position_embedding[j] : params.position_embedding[(t - 2) * h + j];

    const auto shifted = forward(wide, tokens_from({{0, 0, 0, 1, 5, 2}}));
    for (std::size_t t = 1; t < 4; ++t)
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(base.logits.at(0, t, i) == shifted.logits.at(0, t + 2, i));
}

TEST_CASE("masked positions see both directions") {
    const auto params = init_params(small_config(8, 1, 2, 4, 6, 13));
    const std::int32_t mask_tok = 7;
    const auto a = forward(params, tokens_from({{1, mask_tok, 3, 4}}));
    const auto b = forward(params, tokens_from({{1, mask_tok, 3, 5}}));  // future token changed
    double diff = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
        diff = std::max(diff, std::abs(a.logits.at(0, 1, i) - b.logits.at(0, 1, i)));
    CHECK(diff > 1e-12);

    const auto c = forward(params, tokens_from({{2, mask_tok, 3, 4}}));  // past token changed
    diff = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
        diff = std::max(diff, std::abs(a.logits.at(0, 1, i) - c.logits.at(0, 1, i)));
    CHECK(diff > 1e-12);
}

TEST_CASE("sgd step identities and descent on a quadratic") {
    const auto cfg = small_config(4, 1, 1, 2, 3, 5);
    auto params = init_params(cfg);
    const auto before = params.item_embedding;
    sgd_step(params, zeros_like(params), 0.5);
    CHECK(params.item_embedding == before);

    auto grads = zeros_like(params);
    for (auto& g : grads.item_embedding) g = 1.0;
    sgd_step(params, grads, 0.0);
    CHECK(params.item_embedding == before);

    // Quadratic surrogate S(w) = sum w^2 over the embedding table.
    auto surrogate = [&](const EncoderParams& p) {
        double acc = 0.0;
        for (const double w : p.item_embedding) acc += w * w;
        return acc;
    };
    const double s0 = surrogate(params);
    for (std::size_t i = 0; i < grads.item_embedding.size(); ++i)
        grads.item_embedding[i] = 2.0 * params.item_embedding[i];
    sgd_step(params, grads, 0.1);
    CHECK(surrogate(params) < s0);
}

TEST_CASE("momentum step accumulates velocity") {
    auto params = init_params(small_config(4, 1, 1, 2, 3, 5));
    auto velocity = zeros_like(params);
    auto grads = zeros_like(params);
    for (auto& g : grads.output_bias) g = 1.0;
    const double b0 = params.output_bias[0];
    sgd_momentum_step(params, grads, 0.1, 0.9, velocity);
    sgd_momentum_step(params, grads, 0.1, 0.9, velocity);
    CHECK(params.output_bias[0] == doctest::Approx(b0 - 0.1 - 0.1 * 1.9).epsilon(1e-12));
}

TEST_CASE("dropout masks are seed-deterministic and off by default") {
    auto cfg = small_config(8, 1, 2, 4, 5, 17);
    const auto params = init_params(cfg);
    const auto tokens = tokens_from({{0, 1, 2, 3}});
    const auto plain = forward(params, tokens);
    const auto nodrop = forward(params, tokens, {.dropout_rate = 0.0});
    CHECK(plain.logits.v == nodrop.logits.v);

    ForwardOptions with_drop;
    with_drop.dropout_rate = 0.5;
    with_drop.dropout_seed = 5;
    const auto a = forward(params, tokens, with_drop);
    const auto b = forward(params, tokens, with_drop);
    CHECK(a.logits.v == b.logits.v);
    with_drop.dropout_seed = 6;
    const auto c = forward(params, tokens, with_drop);
    CHECK(a.logits.v != c.logits.v);
}

TEST_CASE("checkpoints reload bit-exactly") {
    const auto params = init_params(small_config(8, 2, 2, 5, 7, 2024));
    const auto dir = std::filesystem::temp_directory_path() / "cloze_debias_tests" / "ckpt";
    std::filesystem::remove_all(dir);
    save_checkpoint(params, dir.string());
    const auto loaded = load_checkpoint(dir.string());
    std::vector<const std::vector<double>*> ta, tb;
    params.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               const std::vector<double>& d) { ta.push_back(&d); });
    loaded.for_each_tensor([&](const std::string&, TensorKind, const std::vector<std::size_t>&,
                               const std::vector<double>& d) { tb.push_back(&d); });
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
}

}  // TEST_SUITE
