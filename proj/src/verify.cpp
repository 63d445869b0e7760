#include "cloze_debias/verify.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cloze_debias/propensity.hpp"

namespace cloze_debias::verify {

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::Cloze: return "cloze";
        case LossKind::Ips: return "ips";
        case LossKind::Itps: return "itps";
    }
    return "?";
}

namespace {

double log_softmax_at(const double* logits, std::size_t n, std::size_t target) {
    double mx = logits[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits[i] - mx);
    return logits[target] - mx - std::log(sum);
}

double full_normalizer(const synth::SyntheticWorld& world) {
    return static_cast<double>(world.seqs()) * static_cast<double>(world.items()) *
           static_cast<double>(world.steps());
}

double propensity_weight(LossKind kind, const synth::SyntheticWorld& world,
                         const losses::StaticPropensity* static_theta, std::size_t s,
                         std::size_t item_idx, std::size_t t) {
    switch (kind) {
        case LossKind::Cloze:
            return 1.0;
        case LossKind::Ips: {
            if (static_theta == nullptr)
                throw ArgumentError("ips expectation requires a static propensity table");
            return 1.0 / static_theta->at(s, item_idx);
        }
        case LossKind::Itps:
            return 1.0 / world.theta.at(s, item_idx, t);
    }
    return 1.0;
}

}  // namespace

double analytic_expected_loss(LossKind kind, const losses::LogitTensor& logits, const GridU8& mask,
                              const synth::SyntheticWorld& world, const losses::ChoiceTensor& choice,
                              const losses::StaticPropensity* static_theta) {
    double acc = 0.0;
    for (std::size_t s = 0; s < world.seqs(); ++s)
        for (std::size_t t = 0; t < world.steps(); ++t) {
            if (!mask.at(s, t)) continue;
            const std::int32_t chosen = choice.items.at(s, t);
            if (chosen == 0) continue;
            const std::size_t ci = static_cast<std::size_t>(chosen - 1);
            const double expected_y = world.theta.at(s, ci, t) * world.gamma.at(s, ci, t);
            const double w = propensity_weight(kind, world, static_theta, s, ci, t);
            acc -= expected_y * w * log_softmax_at(logits.row(s, t), logits.items, ci);
        }
    return acc / full_normalizer(world);
}

double ideal_loss_value(const losses::LogitTensor& logits, const GridU8& mask,
                        const synth::SyntheticWorld& world, const losses::ChoiceTensor& choice) {
    losses::LossDims dims{world.seqs(), world.items(), world.steps()};
    return losses::ideal_loss(logits, mask, choice, world.gamma, dims, losses::Normalizer::FullDims);
}

McResult mc_expected_loss(LossKind kind, const losses::LogitTensor& logits, const GridU8& mask,
                          const synth::SyntheticWorld& world, const losses::ChoiceTensor& choice,
                          std::size_t n_draws, std::uint64_t seed,
                          const losses::StaticPropensity* static_theta, int threads) {
    if (n_draws < 2) throw ArgumentError("mc_expected_loss: need at least 2 draws");
    const double norm = full_normalizer(world);

    // Per-term nll and weight are fixed; only Y varies over draws.
    struct Term {
        std::size_t s, t, ci;
        double weighted_nll;
    };
    std::vector<Term> terms;
    for (std::size_t s = 0; s < world.seqs(); ++s)
        for (std::size_t t = 0; t < world.steps(); ++t) {
            if (!mask.at(s, t)) continue;
            const std::int32_t chosen = choice.items.at(s, t);
            if (chosen == 0) continue;
            const std::size_t ci = static_cast<std::size_t>(chosen - 1);
            Term term{s, t, ci,
                      -propensity_weight(kind, world, static_theta, s, ci, t) *
                          log_softmax_at(logits.row(s, t), logits.items, ci)};
            terms.push_back(term);
        }

    std::vector<double> samples(n_draws, 0.0);
    const Rng master(seed);
    parallel_for(n_draws, threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t d = lo; d < hi; ++d) {
            const synth::WorldDraw draw =
                synth::sample_world_draw_fixed_choice(world, choice, master.substream(d).seed());
            double loss = 0.0;
            for (const Term& term : terms)
                if (draw.y.items.at(term.s, term.t) != 0) loss += term.weighted_nll;
            samples[d] = loss / norm;
        }
    });

    McResult result;
    result.draws = n_draws;
    // A degenerate distribution (every draw identical) has zero spread;
    // skip the mean/variance passes so rounding noise cannot leak in.
    bool degenerate = true;
    for (const double x : samples)
        if (x != samples[0]) {
            degenerate = false;
            break;
        }
    if (degenerate) {
        result.mean = samples[0];
        result.stderr_ = 0.0;
        return result;
    }
    for (const double x : samples) result.mean += x;
    result.mean /= static_cast<double>(n_draws);
    double var = 0.0;
    for (const double x : samples) var += (x - result.mean) * (x - result.mean);
    var /= static_cast<double>(n_draws - 1);
    result.stderr_ = std::sqrt(var / static_cast<double>(n_draws));
    return result;
}

ExpectationReport expectation_report(LossKind kind, const losses::LogitTensor& logits,
                                     const GridU8& mask, const synth::SyntheticWorld& world,
                                     const losses::ChoiceTensor& choice, std::size_t n_draws,
                                     std::uint64_t seed, const losses::StaticPropensity* static_theta) {
    ExpectationReport report;
    report.loss_kind = to_string(kind);
    report.analytic = analytic_expected_loss(kind, logits, mask, world, choice, static_theta);
    const McResult mc = mc_expected_loss(kind, logits, mask, world, choice, n_draws, seed, static_theta);
    report.mc_mean = mc.mean;
    report.mc_stderr = mc.stderr_;
    report.draws = mc.draws;
    report.ideal = ideal_loss_value(logits, mask, world, choice);
    report.bias_gap = report.analytic - report.ideal;
    return report;
}

bool PropositionReport::all_pass() const {
    for (const auto& r : records)
        if (!r.pass) return false;
    return true;
}

PropositionReport check_propositions(const synth::SyntheticWorld& world,
                                     const losses::LogitTensor& logits, std::size_t n_draws,
                                     std::uint64_t seed) {
    PropositionReport report;
    report.seed = seed;

    const GridU8 mask(world.seqs(), world.steps(), 1);
    const losses::ChoiceTensor choice = synth::rational_choice_full_awareness(world.gamma);
    const losses::StaticPropensity static_avg = propensity::static_from_temporal_avg(world.theta);

    // Time-constant companion world: theta replaced by its time average.
    synth::SyntheticWorld constant_world = world;
    for (std::size_t s = 0; s < world.seqs(); ++s)
        for (std::size_t i = 0; i < world.items(); ++i)
            for (std::size_t t = 0; t < world.steps(); ++t)
                constant_world.theta.at(s, i, t) = static_avg.at(s, i);
    const losses::StaticPropensity constant_static =
        propensity::static_from_temporal_avg(constant_world.theta);

    const Rng rng(seed);

    {
        PropositionRecord rec;
        rec.name = "plain_estimator_biased";
        auto ev = expectation_report(LossKind::Cloze, logits, mask, world, choice, n_draws,
                                     rng.substream(1).seed());
        bool has_partial_exposure = false;
        for (std::size_t s = 0; s < world.seqs() && !has_partial_exposure; ++s)
            for (std::size_t t = 0; t < world.steps(); ++t) {
                const std::int32_t c = choice.items.at(s, t);
                if (c == 0 || !mask.at(s, t)) continue;
                const std::size_t ci = static_cast<std::size_t>(c - 1);
                if (world.theta.at(s, ci, t) < 1.0 - 1e-3 && world.gamma.at(s, ci, t) > 1e-3) {
                    has_partial_exposure = true;
                    break;
                }
            }
        rec.pass = !has_partial_exposure || std::abs(ev.bias_gap) > 1e-6;
        rec.detail = "gap=" + format_double(ev.bias_gap);
        rec.evidence.push_back(std::move(ev));
        report.records.push_back(std::move(rec));
    }

    {
        PropositionRecord rec;
        rec.name = "static_weighting_unbiased_iff_time_constant";
        auto ev_const = expectation_report(LossKind::Ips, logits, mask, constant_world, choice,
                                           n_draws, rng.substream(2).seed(), &constant_static);
        auto ev_varying = expectation_report(LossKind::Ips, logits, mask, world, choice, n_draws,
                                             rng.substream(3).seed(), &static_avg);
        rec.pass = std::abs(ev_const.bias_gap) <= 1e-12 && std::abs(ev_varying.bias_gap) > 1e-6;
        rec.detail = "constant_gap=" + format_double(ev_const.bias_gap) +
                     " varying_gap=" + format_double(ev_varying.bias_gap);
        rec.evidence.push_back(std::move(ev_const));
        rec.evidence.push_back(std::move(ev_varying));
        report.records.push_back(std::move(rec));
    }

    {
        PropositionRecord rec;
        rec.name = "temporal_weighting_unbiased";
        auto ev_varying = expectation_report(LossKind::Itps, logits, mask, world, choice, n_draws,
                                             rng.substream(4).seed());
        auto ev_const = expectation_report(LossKind::Itps, logits, mask, constant_world, choice,
                                           n_draws, rng.substream(5).seed());
        rec.pass = std::abs(ev_varying.bias_gap) <= 1e-12 && std::abs(ev_const.bias_gap) <= 1e-12;
        rec.detail = "varying_gap=" + format_double(ev_varying.bias_gap) +
                     " constant_gap=" + format_double(ev_const.bias_gap);
        rec.evidence.push_back(std::move(ev_varying));
        rec.evidence.push_back(std::move(ev_const));
        report.records.push_back(std::move(rec));
    }
    return report;
}

void write_report_json(const PropositionReport& report, const std::string& path) {
    nlohmann::json j;
    j["seed"] = report.seed;
    j["all_pass"] = report.all_pass();
    j["propositions"] = nlohmann::json::array();
    for (const auto& rec : report.records) {
        nlohmann::json jr{{"name", rec.name}, {"pass", rec.pass}, {"detail", rec.detail}};
        jr["evidence"] = nlohmann::json::array();
        for (const auto& ev : rec.evidence)
            jr["evidence"].push_back({{"loss", ev.loss_kind},
                                      {"analytic", ev.analytic},
                                      {"mc_mean", ev.mc_mean},
                                      {"mc_stderr", ev.mc_stderr},
                                      {"draws", ev.draws},
                                      {"ideal", ev.ideal},
                                      {"bias_gap", ev.bias_gap}});
        j["propositions"].push_back(std::move(jr));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write verification report: " + path);
    out << j.dump(2) << '\n';
}

}  // namespace cloze_debias::verify
