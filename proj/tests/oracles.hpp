#pragma once

// Test-only reference implementations, kept independent of the library
// code paths they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "cloze_debias/common.hpp"
#include "cloze_debias/losses.hpp"
#include "cloze_debias/synth.hpp"

namespace oracles {

using cloze_debias::GridU8;
using cloze_debias::Rng;
using cloze_debias::Tensor3;

// Central finite difference d f / d x[i] with step h.
inline double central_diff(const std::function<double()>& f, double& x, double h) {
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    return (up - down) / (2.0 * h);
}

// max over entries of |analytic - fd| / max(floor, |analytic|, |fd|).
inline double max_relative_gradient_error(std::vector<double>& params,
                                          const std::vector<double>& analytic,
                                          const std::function<double()>& f, double h,
                                          double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double fd = central_diff(f, params[i], h);
        const double denom = std::max({floor, std::abs(analytic[i]), std::abs(fd)});
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

// Rank metrics re-derived from an explicit relevance list: one relevant
// item placed at `rank`, DCG summed positionally, IDCG for a single
// relevant item at the top.
inline double reference_ndcg(std::size_t rank, std::size_t k) {
    double dcg = 0.0;
    for (std::size_t pos = 1; pos <= k; ++pos)
        if (pos == rank) dcg += 1.0 / std::log2(static_cast<double>(pos) + 1.0);
    const double idcg = 1.0;
    return dcg / idcg;
}

inline int reference_recall(std::size_t rank, std::size_t k) {
    int hits = 0;
    for (std::size_t pos = 1; pos <= k; ++pos)
        if (pos == rank) ++hits;
    return hits;
}

inline double reference_efd(const std::vector<std::vector<std::int32_t>>& topk,
                            const std::vector<double>& popularity, std::size_t k) {
    double outer = 0.0;
    for (const auto& row : topk) {
        double inner = 0.0;
        for (const std::int32_t item : row)
            inner += std::log2(popularity[static_cast<std::size_t>(item - 1)]);
        outer += inner / static_cast<double>(k);
    }
    return -outer / static_cast<double>(topk.size());
}

// Expected interaction probability per item under the exposure-coupled
// rational choice: the item must be exposed, relevant, and every item that
// would beat it in the relevance argmax must be unexposed.
inline double rational_interaction_probability(const Tensor3& gamma, const Tensor3& theta,
                                               std::size_t s, std::size_t item, std::size_t t) {
    double prob = theta.at(s, item, t) * gamma.at(s, item, t);
    for (std::size_t j = 0; j < gamma.items; ++j) {
        if (j == item) continue;
        const double gj = gamma.at(s, j, t);
        const double gi = gamma.at(s, item, t);
        const bool j_wins = gj > gi || (gj == gi && j < item);
        if (j_wins) prob *= 1.0 - theta.at(s, j, t);
    }
    return prob;
}

// Random verification world with propensities and relevances bounded away
// from 0 and 1 so bias terms stay measurable.
inline cloze_debias::synth::SyntheticWorld random_world(Rng& rng, std::size_t seqs,
                                                        std::size_t items, std::size_t steps,
                                                        double lo = 0.1, double hi = 0.9) {
    cloze_debias::synth::SyntheticWorld world;
    world.gamma = Tensor3(seqs, items, steps);
    world.theta = Tensor3(seqs, items, steps);
    for (double& x : world.gamma.v) x = rng.uniform(lo, hi);
    for (double& x : world.theta.v) x = rng.uniform(lo, hi);
    return world;
}

inline cloze_debias::losses::LogitTensor random_logits(Rng& rng, std::size_t seqs,
                                                       std::size_t steps, std::size_t items,
                                                       double spread = 1.0) {
    cloze_debias::losses::LogitTensor logits(seqs, steps, items);
    for (double& x : logits.v) x = rng.uniform(-spread, spread);
    return logits;
}

inline GridU8 random_mask(Rng& rng, std::size_t seqs, std::size_t steps, double p = 0.7) {
    GridU8 mask(seqs, steps, 0);
    bool any = false;
    for (auto& m : mask.v) {
        m = rng.bernoulli(p) ? 1 : 0;
        any = any || m;
    }
    if (!any) mask.v[rng.uniform_index(mask.v.size())] = 1;
    return mask;
}

}  // namespace oracles
