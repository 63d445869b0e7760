#pragma once

#include <string>

#include "cloze_debias/common.hpp"
#include "cloze_debias/data.hpp"
#include "cloze_debias/losses.hpp"

namespace cloze_debias::propensity {

// Exposure propensities estimated from the observed interaction matrix via
// temporal item popularity. The estimator does not depend on the sequence,
// so values are stored item-indexed and broadcast over sequences.
struct PropensityTable {
    std::size_t items = 0, steps = 0;
    GridD temporal;               // (item, step)
    std::vector<double> static_;  // per item, sum over steps
    double eps = 0.0;             // smoothing floor; 0 = raw

    losses::TemporalPropensity temporal_view(std::size_t seqs) const;
    losses::StaticPropensity static_view(std::size_t seqs) const;
};

// theta_hat(i, t) = (# interactions with item i at step t) / (total
// interactions). Padding slots count as nothing.
PropensityTable estimate_temporal_popularity(const data::SequenceDataset& dataset);

// Fills the static column with the sum over steps of the temporal
// estimates; equals the item's overall relative popularity.
PropensityTable static_from_temporal_sum(PropensityTable table);

// Static propensity from an oracle temporal tensor by averaging over
// timesteps: theta(s,i) = mean_t theta(s,i,t).
losses::StaticPropensity static_from_temporal_avg(const Tensor3& theta);

// Clamps every entry (temporal and static) up to eps. Idempotent.
PropensityTable smooth_and_clip(PropensityTable table, double eps);

// CSV round-trip: item,timestep,theta and item,theta_static (1-based ids).
void export_csv(const PropensityTable& table, const std::string& dir,
                const std::string& stem = "propensity");
PropensityTable import_csv(const std::string& dir, const std::string& stem = "propensity");

}  // namespace cloze_debias::propensity
