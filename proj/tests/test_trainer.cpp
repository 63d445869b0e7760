#include <doctest.h>

#include <cmath>

#include "cloze_debias/trainer.hpp"
#include "oracles.hpp"

using namespace cloze_debias;
using namespace cloze_debias::trainer;

namespace {

// Small world with full exposure so every loss kind collapses to the same
// weights; gamma random.
synth::SyntheticWorld full_exposure_world(std::size_t seqs, std::size_t items, std::size_t steps,
                                          std::uint64_t seed) {
    Rng rng(seed);
    synth::SyntheticWorld world;
    world.gamma = Tensor3(seqs, items, steps);
    for (auto& x : world.gamma.v) x = rng.uniform(0.2, 0.95);
    world.theta = Tensor3(seqs, items, steps, 1.0);
    return world;
}

data::SequenceDataset dataset_from_world(const synth::SyntheticWorld& world, std::uint64_t seed) {
    return synth::build_synthetic_dataset(synth::sample_world_draw(world, seed)).dataset;
}

TrainConfig toy_config(ModelKind kind) {
    TrainConfig cfg;
    cfg.kind = kind;
    cfg.rho = 0.4;
    cfg.epochs = 25;
    cfg.batch_size = 8;
    cfg.lr = 0.2;
    cfg.seed = 99;
    cfg.hidden_units = 8;
    cfg.blocks = 1;
    cfg.heads = 2;
    return cfg;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("training reduces the loss on a toy dataset") {
    const auto world = full_exposure_world(20, 12, 8, 5);
    const auto dataset = dataset_from_world(world, 6);
    auto cfg = toy_config(ModelKind::Cloze);
    cfg.epochs = 200;
    const auto result = train(cfg, dataset);
    REQUIRE(result.loss_curve.size() == 200);
    CHECK(result.loss_curve.back() < result.loss_curve.front());
    for (const double loss : result.loss_curve) CHECK(std::isfinite(loss));
}

TEST_CASE("full exposure collapses every weighted kind to the same trajectory") {
    const auto world = full_exposure_world(16, 10, 6, 7);
    const auto dataset = dataset_from_world(world, 8);

    std::vector<std::vector<double>> curves;
    for (const ModelKind kind : {ModelKind::Cloze, ModelKind::Ips, ModelKind::Itps}) {
        auto cfg = toy_config(kind);
        cfg.propensity_source = PropensitySource::Oracle;
        curves.push_back(train(cfg, dataset, &world).loss_curve);
    }
    CHECK(curves[0] == curves[1]);
    CHECK(curves[0] == curves[2]);
}

TEST_CASE("unit relevance collapses the relevance-weighted kind to plain training") {
    // gamma = 1 exactly at one chosen item per (s,t); the dataset interacts
    // with exactly those items.
    const std::size_t seqs = 12, items = 9, steps = 6;
    Rng rng(11);
    synth::SyntheticWorld world;
    world.gamma = Tensor3(seqs, items, steps, 0.3);
    world.theta = Tensor3(seqs, items, steps, 1.0);
    data::SequenceDataset dataset;
    dataset.steps = steps;
    dataset.item_count = static_cast<std::int32_t>(items);
    dataset.tokens = GridI(seqs, steps);
    dataset.origin_steps = GridI(seqs, steps);
    for (std::size_t s = 0; s < seqs; ++s) {
        dataset.sequence_ids.push_back(static_cast<std::int64_t>(s + 1));
        for (std::size_t t = 0; t < steps; ++t) {
            const std::size_t chosen = rng.uniform_index(items);
            world.gamma.at(s, chosen, t) = 1.0;
            dataset.tokens.at(s, t) = static_cast<std::int32_t>(chosen + 1);
            dataset.origin_steps.at(s, t) = static_cast<std::int32_t>(t);
        }
    }

    const auto oracle = train(toy_config(ModelKind::Oracle), dataset, &world);
    const auto cloze = train(toy_config(ModelKind::Cloze), dataset);
    CHECK(oracle.loss_curve == cloze.loss_curve);
}

TEST_CASE("propensity source changes weights only, never masking or batching") {
    Rng rng(13);
    auto world = oracles::random_world(rng, 16, 10, 6, 0.2, 0.9);
    const auto dataset = dataset_from_world(world, 9);

    TrainTrace est_trace, oracle_trace;
    auto cfg = toy_config(ModelKind::Itps);
    cfg.epochs = 6;
    cfg.propensity_source = PropensitySource::Estimated;
    const auto est = train(cfg, dataset, &world, &est_trace);
    cfg.propensity_source = PropensitySource::Oracle;
    const auto oracle = train(cfg, dataset, &world, &oracle_trace);

    CHECK(est_trace.mask_fingerprints == oracle_trace.mask_fingerprints);
    CHECK(est_trace.batch_order_fingerprints == oracle_trace.batch_order_fingerprints);
    CHECK(est.loss_curve != oracle.loss_curve);  // the weights do differ
}

TEST_CASE("oracle kinds demand a world") {
    const auto world = full_exposure_world(6, 5, 4, 3);
    const auto dataset = dataset_from_world(world, 4);
    CHECK_THROWS_AS(train(toy_config(ModelKind::Oracle), dataset), ModeError);
    auto cfg = toy_config(ModelKind::Itps);
    cfg.propensity_source = PropensitySource::Oracle;
    CHECK_THROWS_AS(train(cfg, dataset), ModeError);
}

TEST_CASE("exploding steps abort with diagnostics") {
    const auto world = full_exposure_world(8, 6, 4, 21);
    const auto dataset = dataset_from_world(world, 22);
    auto cfg = toy_config(ModelKind::Cloze);
    cfg.lr = 1e300;
    cfg.epochs = 3;
    CHECK_THROWS_WITH_AS(train(cfg, dataset), doctest::Contains("epoch"), TrainingError);
}

TEST_CASE("training runs are reproducible") {
    const auto world = full_exposure_world(10, 8, 5, 31);
    const auto dataset = dataset_from_world(world, 32);
    const auto cfg = toy_config(ModelKind::Cloze);
    const auto a = train(cfg, dataset);
    const auto b = train(cfg, dataset);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.params.item_embedding == b.params.item_embedding);
    CHECK(a.params.output_bias == b.params.output_bias);
}

TEST_CASE("a perfect relevance scorer saturates the unbiased metrics") {
    Rng rng(41);
    const auto world = oracles::random_world(rng, 10, 20, 6, 0.1, 0.9);
    const auto dataset = dataset_from_world(world, 42);
    auto split = eval::loo_split(dataset);
    REQUIRE(!split.entries.empty());
    split = eval::replace_with_most_relevant(split, world.gamma);

    // Score every item by its relevance at the entry's test origin.
    const eval::ScoreFn relevance_score =
        [&](const GridI& inputs, const std::vector<const eval::EvalEntry*>& entries) {
            GridD scores(inputs.rows, world.items());
            for (std::size_t r = 0; r < inputs.rows; ++r) {
                const auto& e = *entries[r];
                const auto ws = static_cast<std::size_t>(e.sequence_id - 1);
                for (std::size_t i = 0; i < world.items(); ++i)
                    scores.at(r, i) =
                        world.gamma.at(ws, i, static_cast<std::size_t>(e.test_origin));
            }
            return scores;
        };
    eval::EvalOptions opts;
    opts.negatives = 5;
    opts.ks = {5, 10};
    opts.efd_k = 0;
    opts.seed = 7;
    const auto metrics = eval::evaluate_split(relevance_score, split, opts);
    CHECK(metrics.at("recall@5") == 1.0);
    CHECK(metrics.at("ndcg@5") == 1.0);
    CHECK(metrics.at("ndcg@10") == 1.0);
}

TEST_CASE("random scores rank the target uniformly") {
    // 1000 entries, 100 negatives: E[recall@10] = 10/101.
    const std::size_t rows = 1000, items = 150, steps = 4;
    data::SequenceDataset ds;
    ds.steps = steps;
    ds.item_count = static_cast<std::int32_t>(items);
    ds.tokens = GridI(rows, steps);
    ds.origin_steps = GridI(rows, steps, -1);
    Rng rng(3);
    for (std::size_t r = 0; r < rows; ++r) {
        ds.sequence_ids.push_back(static_cast<std::int64_t>(r + 1));
        for (std::size_t t = 0; t < steps; ++t)
            ds.tokens.at(r, t) = static_cast<std::int32_t>(1 + (rng.uniform_index(items / 3) * 3 +
                                                                (t % 3)) % items);
    }
    const auto split = eval::loo_split(ds);
    const eval::ScoreFn random_score =
        [](const GridI& inputs, const std::vector<const eval::EvalEntry*>& entries) {
            GridD scores(inputs.rows, 150);
            for (std::size_t r = 0; r < inputs.rows; ++r) {
                Rng row_rng(0xabc ^ static_cast<std::uint64_t>(entries[r]->row));
                for (std::size_t i = 0; i < 150; ++i) scores.at(r, i) = row_rng.uniform();
            }
            return scores;
        };
    eval::EvalOptions opts;
    opts.negatives = 100;
    opts.ks = {10};
    opts.efd_k = 0;
    opts.seed = 17;
    const auto metrics = eval::evaluate_split(random_score, split, opts);
    const double expected = 10.0 / 101.0;
    const double se = std::sqrt(expected * (1.0 - expected) / static_cast<double>(rows));
    CHECK(std::abs(metrics.at("recall@10") - expected) <= 3.0 * se);
}

TEST_CASE("unbiased evaluation requires the relevance tensor") {
    const auto world = full_exposure_world(8, 6, 4, 51);
    const auto dataset = dataset_from_world(world, 52);
    auto cfg = toy_config(ModelKind::Cloze);
    cfg.epochs = 2;
    const auto result = train(cfg, dataset);
    const auto split = eval::loo_split(dataset);
    eval::EvalOptions opts;
    opts.negatives = 2;
    CHECK_THROWS_AS(evaluate_model(result.params, split, EvalMode::Unbiased, opts, nullptr),
                    ModeError);
    const auto metrics = evaluate_model(result.params, split, EvalMode::Standard, opts, nullptr);
    CHECK(metrics.count("ndcg@10") == 1);

    const auto again = evaluate_model(result.params, split, EvalMode::Standard, opts, nullptr);
    CHECK(again == metrics);
}

}  // TEST_SUITE
