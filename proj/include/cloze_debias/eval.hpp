#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cloze_debias/common.hpp"
#include "cloze_debias/data.hpp"

namespace cloze_debias::eval {

// One evaluated sequence: the last real item is the test target, the second
// to last the validation target, the rest the train prefix. Inputs are the
// corresponding rows with the mask token at the last column.
struct EvalEntry {
    std::size_t row = 0;
    std::int64_t sequence_id = 0;
    std::vector<std::int32_t> train_prefix;   // re-padded, both targets removed
    std::vector<std::int32_t> train_prefix_origins;
    std::vector<std::int32_t> valid_input;
    std::vector<std::int32_t> test_input;
    std::int32_t valid_target = 0, test_target = 0;
    std::int32_t valid_origin = 0, test_origin = 0;  // generating timesteps
    std::vector<std::int32_t> history;               // every real item of the full row
};

struct EvalSplit {
    std::size_t steps = 0;
    std::int32_t item_count = 0;
    std::vector<EvalEntry> entries;
    std::size_t excluded_short = 0;  // sequences with fewer than 3 real items

    // The train prefixes as a dataset (what the model trains on).
    data::SequenceDataset train_dataset() const;
};

EvalSplit loo_split(const data::SequenceDataset& dataset);

// Unbiased mode: swap each validation/test target for the highest-relevance
// item at the target's generating timestep (ties to the lowest index).
// gamma is indexed by world sequence = sequence_id - 1.
EvalSplit replace_with_most_relevant(EvalSplit split, const Tensor3& gamma);

enum class SamplerKind { Uniform, Popularity };

struct CandidateSet {
    std::int32_t target = 0;
    std::vector<std::int32_t> negatives;
    SamplerKind kind = SamplerKind::Uniform;
};

// n distinct non-history, non-target items, uniform without replacement.
CandidateSet sample_negatives_uniform(std::int32_t target, const std::vector<std::int32_t>& history,
                                      std::int32_t item_count, std::size_t n, std::uint64_t seed);

// Sequential renormalized draws without replacement, proportional to the
// items' popularity (index i holds item i+1's popularity).
CandidateSet sample_negatives_popularity(std::int32_t target, const std::vector<std::int32_t>& history,
                                         const std::vector<double>& popularity, std::size_t n,
                                         std::uint64_t seed);

// 1-based rank of the target among target + negatives by descending score;
// score ties count against the target.
std::size_t rank_target(double target_score, const std::vector<double>& negative_scores);

int recall_at_k(std::size_t rank, std::size_t k);
double ndcg_at_k(std::size_t rank, std::size_t k);

// EFD@K = -(1/|S|) sum_s (1/K) sum_{i in topk(s)} log2 popularity[i-1].
double efd_at_k(const std::vector<std::vector<std::int32_t>>& topk,
                const std::vector<double>& popularity, std::size_t k);

// Scores all items for each input row (mask at the last column); the
// aligned entries let oracle scorers look up world coordinates.
using ScoreFn = std::function<GridD(const GridI& inputs, const std::vector<const EvalEntry*>& entries)>;

struct EvalOptions {
    bool use_validation_targets = false;
    SamplerKind sampler = SamplerKind::Uniform;
    // When false, negatives exclude only the target. The relevance-replaced
    // protocol stays unbiased either way (every non-target item is less
    // relevant than the target), and at small item counts the interacted
    // items are needed in the pool for the ranking to discriminate.
    bool exclude_history = true;
    std::size_t negatives = 100;
    std::vector<std::size_t> ks = {5, 10};
    std::size_t efd_k = 10;
    std::vector<double> popularity;  // needed for the popularity sampler and EFD
    std::uint64_t seed = 0;
    int threads = 1;
};

// One evaluation pass: metric name -> value averaged over entries.
std::map<std::string, double> evaluate_split(const ScoreFn& score, const EvalSplit& split,
                                             const EvalOptions& opts);

struct MetricStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t replicates = 0;
};

// Mean/std across replicate evaluation passes.
struct EvalReport {
    std::map<std::string, MetricStats> metrics;
    std::string model;
    std::uint64_t config_fingerprint = 0;

    void add_replicate(const std::map<std::string, double>& values);
    void finalize();

private:
    std::map<std::string, std::vector<double>> samples_;
};

void write_report_csv(const EvalReport& report, const std::string& path);
void write_report_json(const EvalReport& report, const std::string& path);

}  // namespace cloze_debias::eval
