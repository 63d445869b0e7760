#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cloze_debias/propensity.hpp"
#include "cloze_debias/verify.hpp"
#include "oracles.hpp"

using namespace cloze_debias;
using namespace cloze_debias::verify;

namespace {

// |S|=1, |I|=2, T=2 with theta(item 1) = (0.8, 0.2): the averaged static
// propensity is 0.5 and the four-term expectation is hand-computable.
synth::SyntheticWorld two_step_world() {
    synth::SyntheticWorld world;
    world.gamma = Tensor3(1, 2, 2);
    world.theta = Tensor3(1, 2, 2);
    world.gamma.at(0, 0, 0) = 0.9;
    world.gamma.at(0, 0, 1) = 0.9;
    world.gamma.at(0, 1, 0) = 0.2;
    world.gamma.at(0, 1, 1) = 0.2;
    world.theta.at(0, 0, 0) = 0.8;
    world.theta.at(0, 0, 1) = 0.2;
    world.theta.at(0, 1, 0) = 0.5;
    world.theta.at(0, 1, 1) = 0.5;
    return world;
}

losses::LogitTensor two_step_logits() {
    losses::LogitTensor logits(1, 2, 2, 0.0);
    logits.at(0, 1, 0) = std::log(3.0);  // t=2 softmax = (0.75, 0.25)
    return logits;
}

}  // namespace

TEST_SUITE("verify") {

TEST_CASE("full exposure makes the plain estimator ideal") {
    Rng rng(3);
    auto world = oracles::random_world(rng, 2, 3, 2);
    for (auto& x : world.theta.v) x = 1.0;
    const auto logits = oracles::random_logits(rng, 2, 2, 3);
    const GridU8 mask(2, 2, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    const double analytic = analytic_expected_loss(LossKind::Cloze, logits, mask, world, choice);
    const double ideal = ideal_loss_value(logits, mask, world, choice);
    CHECK(analytic == doctest::Approx(ideal).epsilon(1e-15));
}

TEST_CASE("partial exposure biases the plain estimator") {
    auto world = two_step_world();
    const auto logits = two_step_logits();
    const GridU8 mask(1, 2, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    REQUIRE(choice.items.at(0, 0) == 1);
    const double gap = analytic_expected_loss(LossKind::Cloze, logits, mask, world, choice) -
                       ideal_loss_value(logits, mask, world, choice);
    CHECK(gap == doctest::Approx(-0.0829743964).epsilon(1e-8));
    CHECK(std::abs(gap) > 1e-6);
}

TEST_CASE("hand-computed static-weighting gap on the two-step world") {
    const auto world = two_step_world();
    const auto logits = two_step_logits();
    const GridU8 mask(1, 2, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    const auto static_avg = propensity::static_from_temporal_avg(world.theta);
    CHECK(static_avg.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));

    const double analytic =
        analytic_expected_loss(LossKind::Ips, logits, mask, world, choice, &static_avg);
    const double ideal = ideal_loss_value(logits, mask, world, choice);
    // Hand evaluation of the four-term expectation: each step's chosen item
    // contributes theta * gamma / theta_static times its log softmax.
    const double hand_analytic =
        -(0.8 * 0.9 / 0.5 * std::log(0.5) + 0.2 * 0.9 / 0.5 * std::log(0.75)) / 4.0;
    const double hand_ideal = -(0.9 * std::log(0.5) + 0.9 * std::log(0.75)) / 4.0;
    CHECK(analytic == doctest::Approx(hand_analytic).epsilon(1e-12));
    CHECK(analytic == doctest::Approx(0.27542437).epsilon(1e-8));
    CHECK(ideal == doctest::Approx(hand_ideal).epsilon(1e-12));
    CHECK(ideal == doctest::Approx(0.22068658).epsilon(1e-7));
    CHECK(analytic - ideal == doctest::Approx(0.05473779).epsilon(1e-6));
    CHECK(analytic - ideal > 1e-6);

    // Time-constant theta at the same average satisfies the condition.
    auto constant = world;
    constant.theta.at(0, 0, 0) = 0.5;
    constant.theta.at(0, 0, 1) = 0.5;
    const auto const_static = propensity::static_from_temporal_avg(constant.theta);
    const double const_gap =
        analytic_expected_loss(LossKind::Ips, logits, mask, constant, choice, &const_static) -
        ideal_loss_value(logits, mask, constant, choice);
    CHECK(std::abs(const_gap) <= 1e-12);

    CHECK_THROWS_AS(analytic_expected_loss(LossKind::Ips, logits, mask, world, choice, nullptr),
                    ArgumentError);
}

TEST_CASE("temporal weighting is unbiased on fuzzed worlds") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t S = 1 + rng.uniform_index(3);
        const std::size_t I = 2 + rng.uniform_index(5);
        const std::size_t T = 1 + rng.uniform_index(4);
        const auto world = oracles::random_world(rng, S, I, T);
        const auto logits = oracles::random_logits(rng, S, T, I);
        const auto mask = oracles::random_mask(rng, S, T);
        const auto choice = synth::rational_choice_full_awareness(world.gamma);
        const double gap = analytic_expected_loss(LossKind::Itps, logits, mask, world, choice) -
                           ideal_loss_value(logits, mask, world, choice);
        CHECK(std::abs(gap) <= 1e-12);
    }
}

TEST_CASE("monte carlo agrees with the analytic expectation") {
    Rng rng(29);
    const auto world = oracles::random_world(rng, 1, 2, 1);
    const auto logits = oracles::random_logits(rng, 1, 1, 2);
    const GridU8 mask(1, 1, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    for (const LossKind kind : {LossKind::Cloze, LossKind::Itps}) {
        const auto mc = mc_expected_loss(kind, logits, mask, world, choice, 10000, 5);
        const double analytic = analytic_expected_loss(kind, logits, mask, world, choice);
        CHECK(std::abs(mc.mean - analytic) <= 3.0 * mc.stderr_);
        CHECK(mc.stderr_ > 0.0);
    }
}

TEST_CASE("degenerate world gives zero monte carlo variance") {
    synth::SyntheticWorld world;
    world.gamma = Tensor3(1, 2, 1, 1.0);
    world.theta = Tensor3(1, 2, 1, 1.0);
    Rng rng(1);
    const auto logits = oracles::random_logits(rng, 1, 1, 2);
    const GridU8 mask(1, 1, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    const auto mc = mc_expected_loss(LossKind::Cloze, logits, mask, world, choice, 500, 9);
    const double analytic = analytic_expected_loss(LossKind::Cloze, logits, mask, world, choice);
    CHECK(mc.stderr_ == 0.0);
    CHECK(mc.mean == analytic);
}

TEST_CASE("standard error shrinks like the square root of the draws") {
    Rng rng(31);
    const auto world = oracles::random_world(rng, 2, 3, 2);
    const auto logits = oracles::random_logits(rng, 2, 2, 3);
    const GridU8 mask(2, 2, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    const auto small = mc_expected_loss(LossKind::Cloze, logits, mask, world, choice, 4000, 3);
    const auto big = mc_expected_loss(LossKind::Cloze, logits, mask, world, choice, 8000, 3);
    const double ratio = big.stderr_ / small.stderr_;
    CHECK(ratio == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.2));
}

TEST_CASE("monte carlo is deterministic at any thread count") {
    Rng rng(37);
    const auto world = oracles::random_world(rng, 2, 3, 2);
    const auto logits = oracles::random_logits(rng, 2, 2, 3);
    const GridU8 mask(2, 2, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    const auto serial = mc_expected_loss(LossKind::Itps, logits, mask, world, choice, 2000, 8);
    const auto threaded =
        mc_expected_loss(LossKind::Itps, logits, mask, world, choice, 2000, 8, nullptr, 4);
    CHECK(serial.mean == threaded.mean);
    CHECK(serial.stderr_ == threaded.stderr_);
}

TEST_CASE("proposition checks pass on the constructed world") {
    const auto world = two_step_world();
    const auto logits = two_step_logits();
    const auto report = check_propositions(world, logits, 4000, 11);
    REQUIRE(report.records.size() == 3);
    CHECK(report.records[0].name == "plain_estimator_biased");
    CHECK(report.records[1].name == "static_weighting_unbiased_iff_time_constant");
    CHECK(report.records[2].name == "temporal_weighting_unbiased");
    for (const auto& rec : report.records) CHECK(rec.pass);
    CHECK(report.all_pass());

    const auto dir = std::filesystem::temp_directory_path() / "cloze_debias_tests" / "verify";
    std::filesystem::create_directories(dir);
    write_report_json(report, (dir / "report.json").string());
    CHECK(std::filesystem::exists(dir / "report.json"));
}

TEST_CASE("ideal loss has zero variance across draws") {
    Rng rng(41);
    const auto world = oracles::random_world(rng, 2, 3, 2);
    const auto logits = oracles::random_logits(rng, 2, 2, 3);
    const GridU8 mask(2, 2, 1);
    const auto choice = synth::rational_choice_full_awareness(world.gamma);
    const double a = ideal_loss_value(logits, mask, world, choice);
    const double b = ideal_loss_value(logits, mask, world, choice);
    CHECK(a == b);
}

}  // TEST_SUITE
