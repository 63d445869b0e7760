#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloze_debias/common.hpp"
#include "cloze_debias/losses.hpp"
#include "cloze_debias/synth.hpp"

namespace cloze_debias::verify {

enum class LossKind { Cloze, Ips, Itps };

std::string to_string(LossKind kind);

// Closed-form expectation of the estimator under the interaction model:
// each masked term contributes C * theta * gamma times its propensity
// weight (Y replaced by its expectation, choice fixed deterministically).
// Always uses the full-dimension normalizer; no smoothing is applied.
double analytic_expected_loss(LossKind kind, const losses::LogitTensor& logits, const GridU8& mask,
                              const synth::SyntheticWorld& world, const losses::ChoiceTensor& choice,
                              const losses::StaticPropensity* static_theta = nullptr);

// The target the estimators are judged against.
double ideal_loss_value(const losses::LogitTensor& logits, const GridU8& mask,
                        const synth::SyntheticWorld& world, const losses::ChoiceTensor& choice);

struct McResult {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t draws = 0;
};

// Empirical mean of the sampled loss over independent draws of the
// exposure/relevance variables with the choice tensor held fixed.
McResult mc_expected_loss(LossKind kind, const losses::LogitTensor& logits, const GridU8& mask,
                          const synth::SyntheticWorld& world, const losses::ChoiceTensor& choice,
                          std::size_t n_draws, std::uint64_t seed,
                          const losses::StaticPropensity* static_theta = nullptr, int threads = 1);

struct ExpectationReport {
    std::string loss_kind;
    double analytic = 0.0;
    double mc_mean = 0.0;
    double mc_stderr = 0.0;
    std::size_t draws = 0;
    double ideal = 0.0;
    double bias_gap = 0.0;  // analytic - ideal
};

ExpectationReport expectation_report(LossKind kind, const losses::LogitTensor& logits,
                                     const GridU8& mask, const synth::SyntheticWorld& world,
                                     const losses::ChoiceTensor& choice, std::size_t n_draws,
                                     std::uint64_t seed,
                                     const losses::StaticPropensity* static_theta = nullptr);

struct PropositionRecord {
    std::string name;
    bool pass = false;
    std::string detail;
    std::vector<ExpectationReport> evidence;
};

struct PropositionReport {
    std::vector<PropositionRecord> records;  // bias, unbiasedness condition, itps
    std::uint64_t seed = 0;
    bool all_pass() const;
};

// Numerical check of the three estimator propositions on the given world:
// (a) the plain estimator is biased once any chosen masked item has
//     exposure propensity < 1;
// (b) the static-propensity estimator is unbiased iff the temporal
//     propensities are time-constant (checked in both directions: the
//     time-averaged companion world gives a vanishing gap, the provided
//     time-varying world a nonzero one);
// (c) the temporal-propensity estimator is unbiased on both worlds.
// Every masked position carries the fixed rational (full-awareness) choice.
PropositionReport check_propositions(const synth::SyntheticWorld& world,
                                     const losses::LogitTensor& logits, std::size_t n_draws,
                                     std::uint64_t seed);

void write_report_json(const PropositionReport& report, const std::string& path);

}  // namespace cloze_debias::verify
