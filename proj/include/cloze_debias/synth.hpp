#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloze_debias/common.hpp"
#include "cloze_debias/data.hpp"
#include "cloze_debias/losses.hpp"

namespace cloze_debias::synth {

// (sequence, item, timestep, rating) observation used to fit the
// factorization models.
struct RatedTuple {
    std::size_t seq = 0, item = 0, step = 0;  // 0-based dense indices
    double rating = 0.0;
};

struct Cell {
    std::size_t seq = 0, item = 0, step = 0;
};

// Trilinear factorization: prediction(s,i,t) = sum_k P(s,k) Q(i,k) W(t,k).
struct TFParams {
    std::size_t seqs = 0, items = 0, steps = 0, rank = 0;
    GridD seq_factors, item_factors, step_factors;  // P, Q, W

    double predict(std::size_t s, std::size_t i, std::size_t t) const {
        const double* p = seq_factors.row(s);
        const double* q = item_factors.row(i);
        const double* w = step_factors.row(t);
        double acc = 0.0;
        for (std::size_t k = 0; k < rank; ++k) acc += p[k] * q[k] * w[k];
        return acc;
    }
};

struct TfTrainConfig {
    std::size_t rank = 8;
    std::size_t epochs = 200;
    double lr = 0.05;
    double momentum = 0.0;
    std::size_t batch_size = 128;  // 0 = full batch
    // Held-out fraction for best-epoch selection; 0 trains on everything
    // and keeps the last epoch. A held-out fit keeps the reconstructed
    // probabilities calibrated instead of interpolating the observations.
    double val_fraction = 0.0;
    std::uint64_t seed = 0;
};

struct TfFitResult {
    TFParams params;
    double final_loss = 0.0;     // training loss of the returned parameters
    double val_loss = 0.0;       // held-out loss (0 when no validation split)
    std::size_t best_epoch = 0;  // epoch the returned parameters come from
};

TFParams init_tf(std::size_t seqs, std::size_t items, std::size_t steps, std::size_t rank,
                 std::uint64_t seed);

// Full-batch gradient descent on mean squared error of the predicted rating.
TfFitResult train_relevance_tf(const std::vector<RatedTuple>& tuples, std::size_t seqs,
                               std::size_t items, std::size_t steps, const TfTrainConfig& config);

// Relevance tensor gamma = sigmoid(predicted rating) over every cell.
Tensor3 relevance_from_tf(const TFParams& params);

// Binary cross entropy on sigmoid(prediction) with the given positives and
// neg_ratio negatives drawn uniformly without replacement from the
// non-interacted cells.
TfFitResult train_exposure_tf(const std::vector<Cell>& positives, std::size_t seqs,
                              std::size_t items, std::size_t steps, std::size_t neg_ratio,
                              const TfTrainConfig& config);

std::vector<Cell> sample_negative_cells(const std::vector<Cell>& positives, std::size_t seqs,
                                        std::size_t items, std::size_t steps, std::size_t count,
                                        std::uint64_t seed);

// Exposure probabilities o_hat = sigmoid(prediction).
Tensor3 exposure_from_tf(const TFParams& params);

// theta = o_hat^p elementwise; p >= 1 dials up the skew of the exposure
// distribution.
Tensor3 apply_bias_power(const Tensor3& o_hat, double power);

// Loss gradients exposed for verification against finite differences.
double tf_mse_loss(const TFParams& params, const std::vector<RatedTuple>& tuples);
TFParams tf_mse_grad(const TFParams& params, const std::vector<RatedTuple>& tuples);
double tf_bce_loss(const TFParams& params, const std::vector<Cell>& cells,
                   const std::vector<std::uint8_t>& labels);
TFParams tf_bce_grad(const TFParams& params, const std::vector<Cell>& cells,
                     const std::vector<std::uint8_t>& labels);

// Dense ground-truth tensors plus the bias power that produced theta.
struct SyntheticWorld {
    Tensor3 gamma;   // relevance probabilities
    Tensor3 theta;   // exposure propensities
    double power = 1.0;
    std::string provenance;  // resolved generator config as JSON text

    std::size_t seqs() const { return gamma.seqs; }
    std::size_t items() const { return gamma.items; }
    std::size_t steps() const { return gamma.steps; }
};

enum class ChoiceRule {
    Rational,    // one-hot at the highest-relevance exposed item
    Stochastic,  // categorical over exposed items, relevance renormalized
};

// One sample of the interaction model: O ~ Ber(theta), R ~ Ber(gamma),
// C per the choice rule, Y = C * O * R.
struct WorldDraw {
    std::size_t seqs = 0, items = 0, steps = 0;
    std::vector<std::uint8_t> exposure;   // O, (s,i,t)
    std::vector<std::uint8_t> relevance;  // R, (s,i,t)
    GridI choice;                         // C as chosen item per (s,t), 0 = none
    losses::InteractionTensor y;          // interacted item per (s,t), 0 = none

    std::uint8_t exposed(std::size_t s, std::size_t i, std::size_t t) const {
        return exposure[(s * items + i) * steps + t];
    }
    std::uint8_t relevant(std::size_t s, std::size_t i, std::size_t t) const {
        return relevance[(s * items + i) * steps + t];
    }
};

WorldDraw sample_world_draw(const SyntheticWorld& world, std::uint64_t seed,
                            ChoiceRule rule = ChoiceRule::Rational, int threads = 1);

// Same exposure/relevance sampling, but the choice tensor is held fixed
// (the deterministic-choice reading used by the estimator verification).
WorldDraw sample_world_draw_fixed_choice(const SyntheticWorld& world, const losses::ChoiceTensor& c,
                                         std::uint64_t seed, int threads = 1);

// Per (s,t), the item with the highest relevance (ties to the lowest
// index) as a fixed one-hot choice tensor.
losses::ChoiceTensor rational_choice_full_awareness(const Tensor3& gamma);

struct BuiltDataset {
    data::SequenceDataset dataset;
    std::size_t dropped_sequences = 0;  // sequences with no interaction
};

// Orders each sequence's interacted items by timestep, left-pads to the
// world's step count, and records each token's generating timestep in
// origin_steps. Sequence ids are the 1-based world row numbers.
BuiltDataset build_synthetic_dataset(const WorldDraw& draw);

// Self-contained seed data for the generation pipeline: one rated
// interaction per (sequence, timestep), drawn from hidden low-rank
// relevance and exposure structure.
struct SeedProfile {
    std::size_t seqs = 100, items = 50, steps = 20;
    std::size_t latent_rank = 4;
    double exposure_sharpness = 2.0;  // concentration of the item pick
    // Mixes the relevance score into the exposure score; negative values
    // under-expose the items a sequence finds relevant, the regime where
    // interaction frequency and relevance genuinely disagree.
    double exposure_relevance_coupling = 0.0;
    std::uint64_t seed = 0;
};

std::vector<RatedTuple> generate_seed_tuples(const SeedProfile& profile);

void save_world(const SyntheticWorld& world, const std::string& dir);
SyntheticWorld load_world(const std::string& dir);

}  // namespace cloze_debias::synth
