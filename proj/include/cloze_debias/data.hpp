#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cloze_debias/common.hpp"

namespace cloze_debias::data {

// One line of an interaction log.
struct InteractionRecord {
    std::int64_t sequence_id = 0;
    std::string item_id;     // raw external key
    double rating = 0.0;     // only the synth pipeline reads this
    std::int64_t timestamp = 0;
};

// Raw item keys mapped to dense ids in [1, item_count]. 0 is the padding
// token and item_count + 1 the mask token; neither collides with a real item.
struct Vocabulary {
    std::unordered_map<std::string, std::int32_t> raw_to_dense;
    std::vector<std::string> dense_to_raw;  // index 0 unused
    std::int32_t item_count = 0;

    std::int32_t mask_token() const { return item_count + 1; }
};

// |S| x T token matrix. Padding (0) only ever appears as a contiguous row
// prefix. origin_steps carries, per token, the timestep the interaction had
// in whatever process generated it (identity for ingested logs, the world
// timestep for sampled semi-synthetic data, -1 at padding).
struct SequenceDataset {
    GridI tokens;
    std::size_t steps = 0;       // T
    std::int32_t item_count = 0; // |I|
    std::vector<std::int64_t> sequence_ids;
    GridI origin_steps;

    std::size_t size() const { return tokens.rows; }
    std::int32_t mask_token() const { return item_count + 1; }
    std::size_t real_item_count(std::size_t row) const;
};

// Cloze-masked view of (a subset of) a dataset. labels holds the original
// item wherever mask_indicator is set and 0 elsewhere.
struct MaskedBatch {
    GridI tokens;        // entries in {0} U [1, |I|] U {mask}
    GridU8 mask_indicator;
    GridI labels;
    std::size_t steps = 0;
    std::int32_t item_count = 0;
    std::vector<std::size_t> source_rows;  // row index into the source dataset

    std::size_t size() const { return tokens.rows; }
};

// Parses a tab-separated interaction log (user, item, rating, timestamp).
// Malformed lines raise ParseError naming the line number; an empty file
// yields an empty list.
std::vector<InteractionRecord> ingest_tsv(const std::string& path);
std::vector<InteractionRecord> parse_tsv_records(const std::string& text, const std::string& origin);

// Groups records by sequence id, orders each group by timestamp (stable,
// ties keep input order), keeps the most recent `steps` interactions and
// left-pads shorter rows with 0. The vocabulary covers every item in
// `records`, including ones only seen in truncated prefixes; dense ids
// follow first appearance in input order.
std::pair<SequenceDataset, Vocabulary> build_sequences(
    const std::vector<InteractionRecord>& records, std::size_t steps);

// Independent Bernoulli(rho) mask over real-item positions, with a forced
// minimum of one masked position per row that has any real item.
MaskedBatch apply_cloze_mask(const SequenceDataset& dataset, double rho, std::uint64_t seed);

// Row subset of a masked batch, preserving per-row contents.
MaskedBatch gather_rows(const MaskedBatch& batch, const std::vector<std::size_t>& rows);

// Shifts the row left by one slot and places the mask token at the last
// position. Returns the new row and the mask position index.
std::pair<std::vector<std::int32_t>, std::size_t> append_inference_mask(
    const std::vector<std::int32_t>& row, std::int32_t mask_token);

struct DatasetSummary {
    std::size_t sequences = 0;
    std::size_t items = 0;
    std::size_t interactions = 0;
    double avg_length = 0.0;
    double sparsity = 0.0;
};

DatasetSummary summarize(const SequenceDataset& dataset);

// CSV dump with header sequence,position,token (1-based positions); the
// companion meta JSON and origin sidecar make the dump reloadable.
void dump_dataset_csv(const SequenceDataset& dataset, const std::string& dir,
                      const std::string& stem = "dataset");
SequenceDataset load_dataset_csv(const std::string& dir, const std::string& stem = "dataset");

}  // namespace cloze_debias::data
