#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cloze_debias/data.hpp"
#include "cloze_debias/encoder.hpp"
#include "cloze_debias/eval.hpp"
#include "cloze_debias/losses.hpp"
#include "cloze_debias/propensity.hpp"
#include "cloze_debias/synth.hpp"

namespace cloze_debias::trainer {

// The model roster: one encoder, four loss estimators.
enum class ModelKind { Cloze, Ips, Itps, Oracle };

enum class PropensitySource { Estimated, Oracle };

enum class EvalMode { Standard, Unbiased };

ModelKind model_kind_from_string(const std::string& name);
std::string to_string(ModelKind kind);

struct TrainConfig {
    ModelKind kind = ModelKind::Cloze;
    double rho = 0.3;
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double lr = 0.1;
    std::uint64_t seed = 0;
    losses::Normalizer normalizer = losses::Normalizer::MaskedCount;
    PropensitySource propensity_source = PropensitySource::Estimated;
    double smoothing_eps = 1e-3;    // floor under every inverse-propensity weight
    double clip_norm = 1.0;         // global gradient norm cap; 0 disables
    std::string optimizer = "sgd";  // "sgd" | "momentum"
    double momentum = 0.9;
    bool warm_start = false;        // reuse caller-provided params
    int threads = 1;

    // item_count and steps are overwritten from the dataset.
    std::size_t hidden_units = 16;
    std::size_t blocks = 1;
    std::size_t heads = 2;
    double dropout_rate = 0.0;
};

// Per-epoch fingerprints for checking that swapping the propensity source
// changes only the loss weights, never masking or batch order.
struct TrainTrace {
    std::vector<std::uint64_t> mask_fingerprints;
    std::vector<std::uint64_t> batch_order_fingerprints;
};

struct TrainResult {
    encoder::EncoderParams params;
    std::vector<double> loss_curve;  // mean batch loss per epoch
};

// Trains the encoder under the configured loss kind. A world is required
// for the oracle kind and for the oracle propensity source. Fresh Cloze
// masks are drawn every epoch from seeds derived off config.seed.
TrainResult train(const TrainConfig& config, const data::SequenceDataset& dataset,
                  const synth::SyntheticWorld* world = nullptr, TrainTrace* trace = nullptr,
                  const encoder::EncoderParams* warm_params = nullptr);

// Scores eval inputs with the encoder, batching rows internally.
eval::ScoreFn encoder_score_fn(const encoder::EncoderParams& params, std::size_t chunk = 64);

// One evaluation pass over the split's test (or validation) targets.
// Unbiased mode swaps targets for the relevance argmax and requires gamma.
std::map<std::string, double> evaluate_model(const encoder::EncoderParams& params,
                                             const eval::EvalSplit& split, EvalMode mode,
                                             const eval::EvalOptions& opts, const Tensor3* gamma);

// Resolved run description written next to every training output.
void write_run_manifest(const std::string& path, const TrainConfig& config,
                        const data::SequenceDataset& dataset, const std::string& extra_json = "");

std::uint64_t dataset_fingerprint(const data::SequenceDataset& dataset);

}  // namespace cloze_debias::trainer
