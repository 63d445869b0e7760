#include "cloze_debias/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace cloze_debias::eval {

data::SequenceDataset EvalSplit::train_dataset() const {
    data::SequenceDataset ds;
    ds.steps = steps;
    ds.item_count = item_count;
    ds.tokens = GridI(entries.size(), steps, 0);
    ds.origin_steps = GridI(entries.size(), steps, -1);
    for (std::size_t r = 0; r < entries.size(); ++r) {
        ds.sequence_ids.push_back(entries[r].sequence_id);
        for (std::size_t t = 0; t < steps; ++t) {
            ds.tokens.at(r, t) = entries[r].train_prefix[t];
            ds.origin_steps.at(r, t) = entries[r].train_prefix_origins[t];
        }
    }
    return ds;
}

EvalSplit loo_split(const data::SequenceDataset& dataset) {
    EvalSplit split;
    split.steps = dataset.steps;
    split.item_count = dataset.item_count;
    const std::size_t steps = dataset.steps;
    const std::int32_t mask_tok = dataset.mask_token();

    for (std::size_t r = 0; r < dataset.size(); ++r) {
        const std::size_t real = dataset.real_item_count(r);
        if (real < 3) {
            ++split.excluded_short;
            continue;
        }
        EvalEntry e;
        e.row = r;
        e.sequence_id = dataset.sequence_ids.empty() ? static_cast<std::int64_t>(r + 1)
                                                     : dataset.sequence_ids[r];
        // Padding is a contiguous prefix, so the targets sit in the last
        // two columns.
        e.test_target = dataset.tokens.at(r, steps - 1);
        e.valid_target = dataset.tokens.at(r, steps - 2);
        e.test_origin = dataset.origin_steps.at(r, steps - 1);
        e.valid_origin = dataset.origin_steps.at(r, steps - 2);
        if (e.test_origin < 0) e.test_origin = static_cast<std::int32_t>(steps - 1);
        if (e.valid_origin < 0) e.valid_origin = static_cast<std::int32_t>(steps - 2);

        e.train_prefix.assign(steps, 0);
        e.train_prefix_origins.assign(steps, -1);
        for (std::size_t t = 0; t + 2 < steps; ++t) {
            e.train_prefix[t + 2] = dataset.tokens.at(r, t);
            e.train_prefix_origins[t + 2] = dataset.origin_steps.at(r, t);
        }

        e.test_input.assign(steps, 0);
        for (std::size_t t = 0; t + 1 < steps; ++t) e.test_input[t] = dataset.tokens.at(r, t);
        e.test_input[steps - 1] = mask_tok;

        e.valid_input.assign(steps, 0);
        for (std::size_t t = 0; t + 2 < steps; ++t) e.valid_input[t + 1] = dataset.tokens.at(r, t);
        e.valid_input[steps - 1] = mask_tok;

        std::unordered_set<std::int32_t> seen;
        for (std::size_t t = 0; t < steps; ++t) {
            const std::int32_t tok = dataset.tokens.at(r, t);
            if (tok != 0 && seen.insert(tok).second) e.history.push_back(tok);
        }
        std::sort(e.history.begin(), e.history.end());
        split.entries.push_back(std::move(e));
    }
    return split;
}

namespace {

std::int32_t relevance_argmax(const Tensor3& gamma, std::size_t world_seq, std::size_t step) {
    std::size_t best = 0;
    double best_gamma = gamma.at(world_seq, 0, step);
    for (std::size_t i = 1; i < gamma.items; ++i)
        if (gamma.at(world_seq, i, step) > best_gamma) {
            best_gamma = gamma.at(world_seq, i, step);
            best = i;
        }
    return static_cast<std::int32_t>(best + 1);
}

}  // namespace

EvalSplit replace_with_most_relevant(EvalSplit split, const Tensor3& gamma) {
    for (auto& e : split.entries) {
        const std::size_t ws = static_cast<std::size_t>(e.sequence_id - 1);
        if (e.sequence_id < 1 || ws >= gamma.seqs)
            throw ModeError("replace_with_most_relevant: sequence id " +
                            std::to_string(e.sequence_id) + " outside the relevance tensor");
        e.test_target = relevance_argmax(gamma, ws, static_cast<std::size_t>(e.test_origin));
        e.valid_target = relevance_argmax(gamma, ws, static_cast<std::size_t>(e.valid_origin));
    }
    return split;
}

CandidateSet sample_negatives_uniform(std::int32_t target, const std::vector<std::int32_t>& history,
                                      std::int32_t item_count, std::size_t n, std::uint64_t seed) {
    std::unordered_set<std::int32_t> excluded(history.begin(), history.end());
    excluded.insert(target);
    std::vector<std::int32_t> eligible;
    eligible.reserve(static_cast<std::size_t>(item_count));
    for (std::int32_t i = 1; i <= item_count; ++i)
        if (!excluded.count(i)) eligible.push_back(i);
    if (eligible.size() < n)
        throw SamplingError("not enough eligible negatives: need " + std::to_string(n) + ", have " +
                            std::to_string(eligible.size()));
    Rng rng(seed);
    CandidateSet set;
    set.target = target;
    set.kind = SamplerKind::Uniform;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = k + rng.uniform_index(eligible.size() - k);
        std::swap(eligible[k], eligible[j]);
        set.negatives.push_back(eligible[k]);
    }
    return set;
}

CandidateSet sample_negatives_popularity(std::int32_t target, const std::vector<std::int32_t>& history,
                                         const std::vector<double>& popularity, std::size_t n,
                                         std::uint64_t seed) {
    std::unordered_set<std::int32_t> excluded(history.begin(), history.end());
    excluded.insert(target);
    std::vector<std::int32_t> eligible;
    std::vector<double> weight;
    for (std::int32_t i = 1; i <= static_cast<std::int32_t>(popularity.size()); ++i) {
        if (excluded.count(i)) continue;
        const double w = popularity[static_cast<std::size_t>(i - 1)];
        if (w < 0.0) throw ArgumentError("sample_negatives_popularity: negative popularity");
        if (w > 0.0) {
            eligible.push_back(i);
            weight.push_back(w);
        }
    }
    if (eligible.size() < n)
        throw SamplingError("not enough positive-popularity negatives: need " + std::to_string(n) +
                            ", have " + std::to_string(eligible.size()));
    Rng rng(seed);
    CandidateSet set;
    set.target = target;
    set.kind = SamplerKind::Popularity;
    double total = 0.0;
    for (const double w : weight) total += w;
    for (std::size_t k = 0; k < n; ++k) {
        const double mark = rng.uniform() * total;
        double acc = 0.0;
        std::size_t pick = eligible.size() - 1;
        for (std::size_t j = k; j < eligible.size(); ++j) {
            acc += weight[j];
            if (acc >= mark) {
                pick = j;
                break;
            }
        }
        set.negatives.push_back(eligible[pick]);
        total -= weight[pick];
        std::swap(eligible[k], eligible[pick]);
        std::swap(weight[k], weight[pick]);
    }
    return set;
}

std::size_t rank_target(double target_score, const std::vector<double>& negative_scores) {
    std::size_t rank = 1;
    for (const double s : negative_scores)
        if (s >= target_score) ++rank;
    return rank;
}

int recall_at_k(std::size_t rank, std::size_t k) { return rank <= k ? 1 : 0; }

double ndcg_at_k(std::size_t rank, std::size_t k) {
    if (rank > k) return 0.0;
    return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

double efd_at_k(const std::vector<std::vector<std::int32_t>>& topk,
                const std::vector<double>& popularity, std::size_t k) {
    if (topk.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& row : topk) {
        double inner = 0.0;
        for (const std::int32_t item : row) {
            const double pop = popularity.at(static_cast<std::size_t>(item - 1));
            if (!(pop > 0.0))
                throw PropensityDomainError("efd_at_k: zero popularity among recommendations; smooth first");
            inner += std::log2(pop);
        }
        acc += inner / static_cast<double>(k);
    }
    return -acc / static_cast<double>(topk.size());
}

std::map<std::string, double> evaluate_split(const ScoreFn& score, const EvalSplit& split,
                                             const EvalOptions& opts) {
    const std::size_t n_entries = split.entries.size();
    std::map<std::string, double> out;
    for (const std::size_t k : opts.ks) {
        out["recall@" + std::to_string(k)] = 0.0;
        out["ndcg@" + std::to_string(k)] = 0.0;
    }
    out["entries"] = static_cast<double>(n_entries);
    if (n_entries == 0) return out;

    GridI inputs(n_entries, split.steps);
    std::vector<const EvalEntry*> entries(n_entries);
    for (std::size_t r = 0; r < n_entries; ++r) {
        const auto& e = split.entries[r];
        entries[r] = &e;
        const auto& input = opts.use_validation_targets ? e.valid_input : e.test_input;
        for (std::size_t t = 0; t < split.steps; ++t) inputs.at(r, t) = input[t];
    }
    const GridD scores = score(inputs, entries);

    const bool want_efd = opts.efd_k > 0 && !opts.popularity.empty();
    std::vector<std::size_t> ranks(n_entries);
    std::vector<std::vector<std::int32_t>> topk(want_efd ? n_entries : 0);
    const Rng master(opts.seed);

    parallel_for(n_entries, opts.threads, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> neg_scores;
        const std::vector<std::int32_t> no_history;
        for (std::size_t r = lo; r < hi; ++r) {
            const auto& e = split.entries[r];
            const std::int32_t target = opts.use_validation_targets ? e.valid_target : e.test_target;
            const auto& excluded = opts.exclude_history ? e.history : no_history;
            Rng rng = master.substream(e.row);
            const CandidateSet cand =
                opts.sampler == SamplerKind::Uniform
                    ? sample_negatives_uniform(target, excluded, split.item_count, opts.negatives,
                                               rng.next_u64())
                    : sample_negatives_popularity(target, excluded, opts.popularity, opts.negatives,
                                                  rng.next_u64());
            neg_scores.clear();
            for (const std::int32_t item : cand.negatives)
                neg_scores.push_back(scores.at(r, static_cast<std::size_t>(item - 1)));
            ranks[r] = rank_target(scores.at(r, static_cast<std::size_t>(target - 1)), neg_scores);

            if (want_efd) {
                std::vector<std::pair<double, std::int32_t>> order;
                std::unordered_set<std::int32_t> hist(e.history.begin(), e.history.end());
                for (std::int32_t i = 1; i <= split.item_count; ++i)
                    if (!hist.count(i)) order.emplace_back(-scores.at(r, static_cast<std::size_t>(i - 1)), i);
                const std::size_t kk = std::min(opts.efd_k, order.size());
                std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk),
                                  order.end());
                topk[r].reserve(kk);
                for (std::size_t j = 0; j < kk; ++j) topk[r].push_back(order[j].second);
            }
        }
    });

    for (std::size_t r = 0; r < n_entries; ++r)
        for (const std::size_t k : opts.ks) {
            out["recall@" + std::to_string(k)] += recall_at_k(ranks[r], k);
            out["ndcg@" + std::to_string(k)] += ndcg_at_k(ranks[r], k);
        }
    for (const std::size_t k : opts.ks) {
        out["recall@" + std::to_string(k)] /= static_cast<double>(n_entries);
        out["ndcg@" + std::to_string(k)] /= static_cast<double>(n_entries);
    }
    if (want_efd)
        out["efd@" + std::to_string(opts.efd_k)] = efd_at_k(topk, opts.popularity, opts.efd_k);
    return out;
}

void EvalReport::add_replicate(const std::map<std::string, double>& values) {
    for (const auto& [name, value] : values) samples_[name].push_back(value);
}

void EvalReport::finalize() {
    metrics.clear();
    for (const auto& [name, xs] : samples_) {
        MetricStats st;
        st.replicates = xs.size();
        for (const double x : xs) st.mean += x;
        st.mean /= static_cast<double>(xs.size());
        if (xs.size() > 1) {
            double acc = 0.0;
            for (const double x : xs) acc += (x - st.mean) * (x - st.mean);
            st.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
        }
        metrics[name] = st;
    }
}

void write_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report: " + path);
    out << "model,metric,mean,std,replicates\n";
    for (const auto& [name, st] : report.metrics)
        out << report.model << ',' << name << ',' << format_double(st.mean) << ','
            << format_double(st.stddev) << ',' << st.replicates << '\n';
}

void write_report_json(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    j["model"] = report.model;
    j["config_fingerprint"] = report.config_fingerprint;
    for (const auto& [name, st] : report.metrics)
        j["metrics"][name] = {{"mean", st.mean}, {"std", st.stddev}, {"replicates", st.replicates}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report: " + path);
    out << j.dump(2) << '\n';
}

}  // namespace cloze_debias::eval
