#include "cloze_debias/loop.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cloze_debias/eval.hpp"
#include "cloze_debias/propensity.hpp"

namespace cloze_debias::loop {

std::vector<std::vector<std::int32_t>> recommend_topk(const encoder::EncoderParams& params,
                                                      const data::SequenceDataset& dataset,
                                                      std::size_t k, std::size_t chunk) {
    const std::size_t steps = dataset.steps;
    const std::size_t items = static_cast<std::size_t>(dataset.item_count);
    const std::int32_t mask_tok = dataset.mask_token();

    std::vector<std::vector<std::int32_t>> recs(dataset.size());
    encoder::ForwardOptions fopts;
    fopts.want_cache = false;
    fopts.dropout_rate = 0.0;

    std::vector<std::int32_t> row(steps);
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        const std::size_t end = std::min(dataset.size(), start + chunk);
        GridI inputs(end - start, steps);
        for (std::size_t r = start; r < end; ++r) {
            for (std::size_t t = 0; t < steps; ++t) row[t] = dataset.tokens.at(r, t);
            const auto [masked_row, pos] = data::append_inference_mask(row, mask_tok);
            (void)pos;
            for (std::size_t t = 0; t < steps; ++t) inputs.at(r - start, t) = masked_row[t];
        }
        const auto fwd = encoder::forward(params, inputs, fopts);
        for (std::size_t r = start; r < end; ++r) {
            std::unordered_set<std::int32_t> history;
            for (std::size_t t = 0; t < steps; ++t)
                if (dataset.tokens.at(r, t) != 0) history.insert(dataset.tokens.at(r, t));
            std::vector<std::pair<double, std::int32_t>> order;
            order.reserve(items - history.size());
            for (std::size_t i = 0; i < items; ++i) {
                const std::int32_t item = static_cast<std::int32_t>(i + 1);
                if (history.count(item)) continue;
                order.emplace_back(-fwd.logits.at(r - start, steps - 1, i), item);
            }
            const std::size_t take = std::min(k, order.size());
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                              order.end());
            recs[r].reserve(take);
            for (std::size_t j = 0; j < take; ++j) recs[r].push_back(order[j].second);
        }
    }
    return recs;
}

std::int32_t simulate_user_choice(const std::vector<std::int32_t>& topk_row, std::uint64_t seed) {
    if (topk_row.empty()) throw ArgumentError("simulate_user_choice: empty recommendation list");
    Rng rng(seed);
    return topk_row[rng.uniform_index(topk_row.size())];
}

namespace {

void append_interaction(data::SequenceDataset& dataset, std::size_t row, std::int32_t item) {
    for (std::size_t t = 0; t + 1 < dataset.steps; ++t) {
        dataset.tokens.at(row, t) = dataset.tokens.at(row, t + 1);
        dataset.origin_steps.at(row, t) = dataset.origin_steps.at(row, t + 1);
    }
    dataset.tokens.at(row, dataset.steps - 1) = item;
    dataset.origin_steps.at(row, dataset.steps - 1) = -1;
}

void write_loop_checkpoint(const LoopConfig& config, const LoopState& state) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(config.checkpoint_dir) /
                         ("iteration_" + std::to_string(state.iterations_done));
    fs::create_directories(dir);
    data::dump_dataset_csv(state.dataset, dir.string());
    nlohmann::json j;
    j["iterations_done"] = state.iterations_done;
    j["seed"] = config.seed;
    j["history"] = nlohmann::json::array();
    for (const auto& rec : state.history)
        j["history"].push_back({{"iteration", rec.iteration},
                                {"efd10", rec.efd10},
                                {"ndcg10", rec.ndcg10},
                                {"recall10", rec.recall10},
                                {"grown", rec.grown},
                                {"skipped", rec.skipped}});
    std::ofstream out(dir / "state.json", std::ios::binary);
    out << j.dump(2) << '\n';
}

void load_loop_checkpoint(const std::string& dir, LoopState& state) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "state.json");
    if (!in) throw IoError("missing loop checkpoint state.json in " + dir);
    const nlohmann::json j = nlohmann::json::parse(in);
    state.iterations_done = j.at("iterations_done").get<std::size_t>();
    state.dataset = data::load_dataset_csv(dir);
    for (const auto& rec : j.at("history")) {
        IterationRecord r;
        r.iteration = rec.at("iteration").get<std::size_t>();
        r.efd10 = rec.at("efd10").get<double>();
        r.ndcg10 = rec.at("ndcg10").get<double>();
        r.recall10 = rec.at("recall10").get<double>();
        r.grown = rec.at("grown").get<std::size_t>();
        r.skipped = rec.at("skipped").get<std::size_t>();
        state.history.push_back(r);
    }
}

}  // namespace

LoopState run_feedback_loop(const LoopConfig& config, const data::SequenceDataset& initial) {
    if (config.train.kind == trainer::ModelKind::Oracle)
        throw ArgumentError("run_feedback_loop: the loop roster is cloze, ips, itps");

    LoopState state;
    state.dataset = initial;
    if (!config.resume_from.empty()) load_loop_checkpoint(config.resume_from, state);

    const Rng master(config.seed);
    encoder::EncoderParams last_params;
    bool have_params = false;

    for (std::size_t iter = state.iterations_done; iter < config.iterations; ++iter) {
        trainer::TrainConfig tc = config.train;
        tc.seed = master.substream(1000 + iter).seed();
        tc.propensity_source = trainer::PropensitySource::Estimated;

        trainer::TrainResult trained;
        try {
            trained = trainer::train(tc, state.dataset, nullptr, nullptr,
                                     config.train.warm_start && have_params ? &last_params : nullptr);
        } catch (const TrainingError& err) {
            state.aborted = true;
            state.abort_reason = err.what();
            return state;
        }
        last_params = trained.params;
        have_params = true;

        const auto popularity_table = propensity::smooth_and_clip(
            propensity::static_from_temporal_sum(
                propensity::estimate_temporal_popularity(state.dataset)),
            config.train.smoothing_eps);

        IterationRecord rec;
        rec.iteration = iter + 1;

        // Standard leave-one-out metrics on the current dataset.
        const eval::EvalSplit split = eval::loo_split(state.dataset);
        eval::EvalOptions eopts;
        eopts.sampler = eval::SamplerKind::Uniform;
        eopts.negatives = config.eval_negatives;
        eopts.ks = {10};
        eopts.efd_k = 0;
        eopts.seed = master.substream(2000 + iter).seed();
        eopts.threads = config.train.threads;
        const auto metrics = trainer::evaluate_model(trained.params, split,
                                                     trainer::EvalMode::Standard, eopts, nullptr);
        rec.ndcg10 = metrics.at("ndcg@10");
        rec.recall10 = metrics.at("recall@10");

        const auto recs = recommend_topk(trained.params, state.dataset, config.topk);
        std::vector<std::vector<std::int32_t>> full_lists;
        for (const auto& r : recs)
            if (!r.empty()) full_lists.push_back(r);
        rec.efd10 = eval::efd_at_k(full_lists, popularity_table.static_, config.topk);

        const Rng choice_master = master.substream(3000 + iter);
        for (std::size_t r = 0; r < state.dataset.size(); ++r) {
            if (recs[r].empty()) {
                ++rec.skipped;
                continue;
            }
            const std::int32_t item = simulate_user_choice(recs[r], choice_master.substream(r).seed());
            append_interaction(state.dataset, r, item);
            ++rec.grown;
        }

        state.history.push_back(rec);
        state.iterations_done = iter + 1;
        if (!config.checkpoint_dir.empty()) write_loop_checkpoint(config, state);
    }
    return state;
}

void write_history_csv(const LoopState& state, const std::string& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write loop history: " + path);
    out << "model,iteration,efd10,ndcg10,recall10\n";
    for (const auto& rec : state.history)
        out << model << ',' << rec.iteration << ',' << format_double(rec.efd10) << ','
            << format_double(rec.ndcg10) << ',' << format_double(rec.recall10) << '\n';
}

}  // namespace cloze_debias::loop
