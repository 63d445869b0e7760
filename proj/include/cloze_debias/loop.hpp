#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloze_debias/data.hpp"
#include "cloze_debias/encoder.hpp"
#include "cloze_debias/trainer.hpp"

namespace cloze_debias::loop {

// Top-K recommendations per sequence: inference mask appended to the full
// row, already-interacted items excluded, ties to the lowest item index.
// Rows with fewer than K eligible items come back shorter.
std::vector<std::vector<std::int32_t>> recommend_topk(const encoder::EncoderParams& params,
                                                      const data::SequenceDataset& dataset,
                                                      std::size_t k, std::size_t chunk = 64);

// Uniform pick from the recommendation list.
std::int32_t simulate_user_choice(const std::vector<std::int32_t>& topk_row, std::uint64_t seed);

struct LoopConfig {
    trainer::TrainConfig train;      // kind must be cloze, ips, or itps
    std::size_t iterations = 10;
    std::size_t topk = 10;
    std::uint64_t seed = 0;
    std::size_t eval_negatives = 25;
    std::string checkpoint_dir;      // per-iteration snapshots when set
    std::string resume_from;         // checkpoint dir to continue from
};

struct IterationRecord {
    std::size_t iteration = 0;
    double efd10 = 0.0;
    double ndcg10 = 0.0;
    double recall10 = 0.0;
    std::size_t grown = 0;    // sequences that appended an item
    std::size_t skipped = 0;  // sequences with an empty recommendation list
};

struct LoopState {
    std::size_t iterations_done = 0;
    data::SequenceDataset dataset;
    std::vector<IterationRecord> history;
    bool aborted = false;
    std::string abort_reason;
};

// Retrain from scratch each iteration (propensities re-estimated from the
// current dataset), recommend top K, append one uniformly chosen item per
// sequence, and record EFD@10 against the current popularity table.
LoopState run_feedback_loop(const LoopConfig& config, const data::SequenceDataset& initial);

void write_history_csv(const LoopState& state, const std::string& model, const std::string& path);

}  // namespace cloze_debias::loop
