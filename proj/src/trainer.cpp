#include "cloze_debias/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cloze_debias::trainer {

ModelKind model_kind_from_string(const std::string& name) {
    if (name == "cloze") return ModelKind::Cloze;
    if (name == "ips") return ModelKind::Ips;
    if (name == "itps") return ModelKind::Itps;
    if (name == "oracle") return ModelKind::Oracle;
    throw ArgumentError("unknown model kind: " + name);
}

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::Cloze: return "cloze";
        case ModelKind::Ips: return "ips";
        case ModelKind::Itps: return "itps";
        case ModelKind::Oracle: return "oracle";
    }
    return "?";
}

std::uint64_t dataset_fingerprint(const data::SequenceDataset& dataset) {
    std::uint64_t h = fnv1a64(dataset.tokens.v.data(), dataset.tokens.v.size() * sizeof(std::int32_t));
    h = fnv1a64(&dataset.steps, sizeof(dataset.steps), h);
    return fnv1a64(&dataset.item_count, sizeof(dataset.item_count), h);
}

namespace {

struct WeightSource {
    ModelKind kind;
    PropensitySource source;
    double eps = 1e-3;  // weight floor, also applied to oracle tensors
    // Estimated tables (sequence-independent).
    propensity::PropensityTable estimated;
    // Oracle tensors.
    const synth::SyntheticWorld* world = nullptr;
    losses::StaticPropensity oracle_static;

    // Chosen item and weight for a masked position. `world_seq` and
    // `origin` address the oracle tensors; `step` the estimated table.
    losses::WeightedTerm term(std::size_t batch_row, std::size_t step, std::int32_t label,
                              std::size_t world_seq, std::size_t origin) const {
        losses::WeightedTerm term{batch_row, step, label, 1.0};
        switch (kind) {
            case ModelKind::Cloze:
                break;
            case ModelKind::Ips: {
                const double th = source == PropensitySource::Estimated
                                      ? estimated.static_[static_cast<std::size_t>(label - 1)]
                                      : std::max(oracle_static.at(world_seq,
                                                                  static_cast<std::size_t>(label - 1)),
                                                 eps);
                if (!(th > 0.0)) throw PropensityDomainError("ips training: zero static propensity");
                term.weight = 1.0 / th;
                break;
            }
            case ModelKind::Itps: {
                const double th =
                    source == PropensitySource::Estimated
                        ? estimated.temporal.at(static_cast<std::size_t>(label - 1), step)
                        : std::max(world->theta.at(world_seq, static_cast<std::size_t>(label - 1),
                                                   origin),
                                   eps);
                if (!(th > 0.0)) throw PropensityDomainError("itps training: zero temporal propensity");
                term.weight = 1.0 / th;
                break;
            }
            case ModelKind::Oracle: {
                // Target is the most relevant item at the generating
                // timestep, weighted by its relevance.
                std::size_t best = 0;
                double best_gamma = world->gamma.at(world_seq, 0, origin);
                for (std::size_t i = 1; i < world->gamma.items; ++i)
                    if (world->gamma.at(world_seq, i, origin) > best_gamma) {
                        best_gamma = world->gamma.at(world_seq, i, origin);
                        best = i;
                    }
                term.item = static_cast<std::int32_t>(best + 1);
                term.weight = best_gamma;
                break;
            }
        }
        return term;
    }
};

}  // namespace

TrainResult train(const TrainConfig& config, const data::SequenceDataset& dataset,
                  const synth::SyntheticWorld* world, TrainTrace* trace,
                  const encoder::EncoderParams* warm_params) {
    if (dataset.size() == 0) throw ArgumentError("train: empty dataset");
    const bool needs_world = config.kind == ModelKind::Oracle ||
                             ((config.kind == ModelKind::Ips || config.kind == ModelKind::Itps) &&
                              config.propensity_source == PropensitySource::Oracle);
    if (needs_world && world == nullptr)
        throw ModeError("train: model kind " + to_string(config.kind) +
                        " with oracle tensors requires a synthetic world");

    WeightSource weights;
    weights.kind = config.kind;
    weights.source = config.propensity_source;
    weights.eps = config.smoothing_eps;
    weights.world = world;
    if ((config.kind == ModelKind::Ips || config.kind == ModelKind::Itps) &&
        config.propensity_source == PropensitySource::Estimated) {
        weights.estimated = propensity::smooth_and_clip(
            propensity::static_from_temporal_sum(propensity::estimate_temporal_popularity(dataset)),
            config.smoothing_eps);
    }
    if (config.kind == ModelKind::Ips && config.propensity_source == PropensitySource::Oracle)
        weights.oracle_static = propensity::static_from_temporal_avg(world->theta);

    encoder::EncoderConfig enc_cfg;
    enc_cfg.hidden_units = config.hidden_units;
    enc_cfg.blocks = config.blocks;
    enc_cfg.heads = config.heads;
    enc_cfg.steps = dataset.steps;
    enc_cfg.item_count = dataset.item_count;
    enc_cfg.dropout_rate = config.dropout_rate;
    enc_cfg.seed = splitmix64(config.seed ^ 0x1ull);

    TrainResult result;
    if (config.warm_start && warm_params != nullptr)
        result.params = *warm_params;
    else
        result.params = encoder::init_params(enc_cfg);

    encoder::EncoderGradients velocity = encoder::zeros_like(result.params);
    const bool use_momentum = config.optimizer == "momentum";
    const Rng master(config.seed);
    const losses::LossDims batch_dims_template{0, static_cast<std::size_t>(dataset.item_count),
                                               dataset.steps};

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const std::uint64_t mask_seed = master.substream(2 * epoch).seed();
        const data::MaskedBatch masked = data::apply_cloze_mask(dataset, config.rho, mask_seed);

        Rng shuffle_rng = master.substream(2 * epoch + 1);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            const std::size_t j = i + shuffle_rng.uniform_index(order.size() - i);
            std::swap(order[i], order[j]);
        }

        if (trace != nullptr) {
            trace->mask_fingerprints.push_back(fnv1a64(
                masked.mask_indicator.v.data(), masked.mask_indicator.v.size()));
            trace->batch_order_fingerprints.push_back(
                fnv1a64(order.data(), order.size() * sizeof(std::size_t)));
        }

        double epoch_loss = 0.0;
        std::size_t batch_count = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                order.begin() + static_cast<std::ptrdiff_t>(end));
            const data::MaskedBatch batch = data::gather_rows(masked, rows);

            encoder::ForwardOptions fopts;
            fopts.dropout_seed = master.substream(0x9000 + epoch * 4096 + batch_count).seed();
            auto fwd = encoder::forward(result.params, batch.tokens, fopts);

            std::vector<losses::WeightedTerm> terms;
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const std::size_t src = batch.source_rows[k];
                const std::size_t world_seq =
                    dataset.sequence_ids.empty()
                        ? src
                        : static_cast<std::size_t>(dataset.sequence_ids[src] - 1);
                for (std::size_t t = 0; t < batch.steps; ++t) {
                    if (!batch.mask_indicator.at(k, t)) continue;
                    const std::int32_t label = batch.labels.at(k, t);
                    const std::int32_t origin_raw = dataset.origin_steps.at(src, t);
                    const std::size_t origin =
                        origin_raw >= 0 ? static_cast<std::size_t>(origin_raw) : t;
                    terms.push_back(weights.term(k, t, label, world_seq, origin));
                }
            }

            losses::LossDims dims = batch_dims_template;
            dims.seqs = batch.size();
            const double loss = losses::weighted_loss(fwd.logits, terms, dims, config.normalizer);
            if (!std::isfinite(loss))
                throw TrainingError("training loss not finite at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batch_count) +
                                    " (lr=" + format_double(config.lr) + ")");
            const losses::LogitTensor dlogits =
                losses::loss_grad_wrt_logits(fwd.logits, terms, dims, config.normalizer);
            encoder::EncoderGradients grads = encoder::backward(result.params, fwd.cache, dlogits);
            if (config.clip_norm > 0.0) {
                double sq = 0.0;
                grads.for_each_tensor([&](const std::string&, encoder::TensorKind,
                                          const std::vector<std::size_t>&,
                                          const std::vector<double>& d) {
                    for (const double x : d) sq += x * x;
                });
                if (sq > config.clip_norm * config.clip_norm) {
                    const double scale = config.clip_norm / std::sqrt(sq);
                    grads.for_each_tensor([&](const std::string&, encoder::TensorKind,
                                              const std::vector<std::size_t>&,
                                              std::vector<double>& d) {
                        for (double& x : d) x *= scale;
                    });
                }
            }
            if (use_momentum)
                encoder::sgd_momentum_step(result.params, grads, config.lr, config.momentum, velocity);
            else
                encoder::sgd_step(result.params, grads, config.lr);

            epoch_loss += loss;
            ++batch_count;
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(batch_count));
    }
    return result;
}

eval::ScoreFn encoder_score_fn(const encoder::EncoderParams& params, std::size_t chunk) {
    return [&params, chunk](const GridI& inputs,
                            const std::vector<const eval::EvalEntry*>&) -> GridD {
        const std::size_t items = static_cast<std::size_t>(params.config.item_count);
        const std::size_t steps = params.config.steps;
        GridD scores(inputs.rows, items);
        encoder::ForwardOptions fopts;
        fopts.want_cache = false;
        fopts.dropout_rate = 0.0;  // inference
        for (std::size_t start = 0; start < inputs.rows; start += chunk) {
            const std::size_t end = std::min(inputs.rows, start + chunk);
            GridI block(end - start, inputs.cols);
            std::copy(inputs.v.begin() + static_cast<std::ptrdiff_t>(start * inputs.cols),
                      inputs.v.begin() + static_cast<std::ptrdiff_t>(end * inputs.cols),
                      block.v.begin());
            const auto fwd = encoder::forward(params, block, fopts);
            for (std::size_t r = start; r < end; ++r)
                for (std::size_t i = 0; i < items; ++i)
                    scores.at(r, i) = fwd.logits.at(r - start, steps - 1, i);
        }
        return scores;
    };
}

std::map<std::string, double> evaluate_model(const encoder::EncoderParams& params,
                                             const eval::EvalSplit& split, EvalMode mode,
                                             const eval::EvalOptions& opts, const Tensor3* gamma) {
    if (mode == EvalMode::Unbiased && gamma == nullptr)
        throw ModeError("evaluate_model: unbiased mode requires the relevance tensor");
    const eval::EvalSplit* active = &split;
    eval::EvalSplit replaced;
    if (mode == EvalMode::Unbiased) {
        replaced = eval::replace_with_most_relevant(split, *gamma);
        active = &replaced;
    }
    return eval::evaluate_split(encoder_score_fn(params), *active, opts);
}

void write_run_manifest(const std::string& path, const TrainConfig& config,
                        const data::SequenceDataset& dataset, const std::string& extra_json) {
    nlohmann::json j;
    j["model"] = to_string(config.kind);
    j["rho"] = config.rho;
    j["epochs"] = config.epochs;
    j["batch_size"] = config.batch_size;
    j["lr"] = config.lr;
    j["seed"] = config.seed;
    j["normalizer"] = config.normalizer == losses::Normalizer::MaskedCount ? "masked_count" : "full_dims";
    j["propensity_source"] =
        config.propensity_source == PropensitySource::Estimated ? "estimated" : "oracle";
    j["smoothing_eps"] = config.smoothing_eps;
    j["optimizer"] = config.optimizer;
    j["hidden_units"] = config.hidden_units;
    j["blocks"] = config.blocks;
    j["heads"] = config.heads;
    j["dropout_rate"] = config.dropout_rate;
    j["dataset_fingerprint"] = dataset_fingerprint(dataset);
    if (!extra_json.empty()) j["extra"] = nlohmann::json::parse(extra_json);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write run manifest: " + path);
    out << j.dump(2) << '\n';
}

}  // namespace cloze_debias::trainer
