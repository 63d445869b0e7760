#include <doctest.h>

#include <filesystem>

#include "cloze_debias/propensity.hpp"

using namespace cloze_debias;
using namespace cloze_debias::propensity;

namespace {

// Two sequences [A,B] and [A,C] with T=2, no padding. A=1, B=2, C=3.
data::SequenceDataset two_sequences() {
    data::SequenceDataset ds;
    ds.steps = 2;
    ds.item_count = 3;
    ds.tokens = GridI(2, 2, 0);
    ds.tokens.at(0, 0) = 1;
    ds.tokens.at(0, 1) = 2;
    ds.tokens.at(1, 0) = 1;
    ds.tokens.at(1, 1) = 3;
    ds.origin_steps = GridI(2, 2, -1);
    ds.sequence_ids = {1, 2};
    return ds;
}

}  // namespace

TEST_SUITE("propensity") {

TEST_CASE("temporal popularity by hand enumeration") {
    const auto table = estimate_temporal_popularity(two_sequences());
    CHECK(table.temporal.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));   // A at t=1
    CHECK(table.temporal.at(1, 1) == doctest::Approx(0.25).epsilon(1e-12));  // B at t=2
    CHECK(table.temporal.at(2, 1) == doctest::Approx(0.25).epsilon(1e-12));  // C at t=2
    CHECK(table.temporal.at(0, 1) == 0.0);
    CHECK(table.temporal.at(1, 0) == 0.0);

    double total = 0.0;
    for (const double x : table.temporal.v) total += x;
    CHECK(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("padding slots are not interactions") {
    auto ds = two_sequences();
    ds.tokens.at(1, 0) = 0;  // [0, C]
    const auto table = estimate_temporal_popularity(ds);
    CHECK(table.temporal.at(0, 0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("static propensity sums the temporal estimates") {
    const auto table = static_from_temporal_sum(estimate_temporal_popularity(two_sequences()));
    CHECK(table.static_[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(table.static_[1] == doctest::Approx(0.25).epsilon(1e-12));
    double total = 0.0;
    for (const double x : table.static_) total += x;
    CHECK(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("time-averaged static propensity from oracle tensor") {
    Tensor3 theta(2, 1, 2);
    theta.at(0, 0, 0) = 0.8;
    theta.at(0, 0, 1) = 0.2;
    theta.at(1, 0, 0) = 0.6;
    theta.at(1, 0, 1) = 0.6;
    const auto st = static_from_temporal_avg(theta);
    CHECK(st.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(st.at(1, 0) == doctest::Approx(0.6).epsilon(1e-12));

    Tensor3 ones(3, 2, 4, 1.0);
    const auto st1 = static_from_temporal_avg(ones);
    for (const double x : st1.v) CHECK(x == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("smooth_and_clip floors, preserves order, and is idempotent") {
    auto table = estimate_temporal_popularity(two_sequences());
    const auto raw = table;
    table = smooth_and_clip(static_from_temporal_sum(table), 1e-3);
    CHECK(table.eps == 1e-3);
    for (std::size_t i = 0; i < table.items; ++i)
        for (std::size_t t = 0; t < table.steps; ++t) {
            CHECK(table.temporal.at(i, t) >= 1e-3);
            CHECK(table.temporal.at(i, t) <= 1.0);
        }
    CHECK(table.temporal.at(0, 0) == doctest::Approx(0.5));  // large entries untouched

    const auto twice = smooth_and_clip(table, 1e-3);
    CHECK(twice.temporal.v == table.temporal.v);
    CHECK(twice.static_ == table.static_);

    // Order preservation over the raw entries.
    for (std::size_t a = 0; a < raw.temporal.v.size(); ++a)
        for (std::size_t b = 0; b < raw.temporal.v.size(); ++b)
            if (raw.temporal.v[a] <= raw.temporal.v[b])
                CHECK(table.temporal.v[a] <= table.temporal.v[b] + 1e-15);

    CHECK_THROWS_AS(smooth_and_clip(table, 0.0), ArgumentError);
    CHECK_THROWS_AS(smooth_and_clip(table, 0.2), ArgumentError);
}

TEST_CASE("broadcast views are sequence-independent") {
    const auto table = static_from_temporal_sum(estimate_temporal_popularity(two_sequences()));
    const auto temporal = table.temporal_view(5);
    const auto stat = table.static_view(5);
    for (std::size_t s = 0; s < 5; ++s) {
        CHECK(temporal.at(s, 0, 0) == temporal.at(0, 0, 0));
        CHECK(stat.at(s, 1) == stat.at(0, 1));
    }
}

TEST_CASE("csv export reloads exactly") {
    const auto table = smooth_and_clip(
        static_from_temporal_sum(estimate_temporal_popularity(two_sequences())), 1e-3);
    const auto dir = std::filesystem::temp_directory_path() / "cloze_debias_tests" / "prop_csv";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    export_csv(table, dir.string());
    const auto loaded = import_csv(dir.string());
    CHECK(loaded.items == table.items);
    CHECK(loaded.steps == table.steps);
    CHECK(loaded.temporal.v == table.temporal.v);
    CHECK(loaded.static_ == table.static_);
}

}  // TEST_SUITE
