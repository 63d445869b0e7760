// Command-line front end: synth, train, eval, loop, verify, gradcheck.
// Every command resolves its configuration (defaults + file + flags),
// writes the resolved form next to its outputs, and derives all seeds from
// the master seed so a re-run from the resolved config is bit-identical.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cloze_debias/data.hpp"
#include "cloze_debias/encoder.hpp"
#include "cloze_debias/eval.hpp"
#include "cloze_debias/loop.hpp"
#include "cloze_debias/losses.hpp"
#include "cloze_debias/propensity.hpp"
#include "cloze_debias/synth.hpp"
#include "cloze_debias/trainer.hpp"
#include "cloze_debias/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cloze_debias;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitRuntimeError = 3;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json default_config() {
    return json{
        {"master_seed", 42},
        {"threads", 1},
        {"data",
         {{"source", "seed_tuples"}, {"path", ""}, {"steps", 20}}},
        {"synth",
         {{"profile",
           {{"sequences", 100}, {"items", 50}, {"steps", 20}, {"latent_rank", 4},
            {"exposure_sharpness", 2.0}, {"seed", nullptr}}},
          {"relevance_tf",
           {{"rank", 8}, {"epochs", 400}, {"lr", 0.1}, {"momentum", 0.0}, {"seed", nullptr}}},
          {"exposure_tf",
           {{"rank", 8}, {"epochs", 400}, {"lr", 0.5}, {"momentum", 0.0}, {"neg_ratio", 3},
            {"seed", nullptr}}},
          {"powers", json::array({2.0})},
          {"draw_seed", nullptr},
          {"stochastic_choice", false}}},
        {"train",
         {{"model", "cloze"}, {"rho", 0.3}, {"epochs", 120}, {"batch_size", 32}, {"lr", 0.1},
          {"seed", nullptr}, {"normalizer", "masked_count"}, {"propensity_source", "estimated"},
          {"smoothing_eps", 1e-3}, {"optimizer", "sgd"}, {"momentum", 0.9},
          {"hidden_units", 16}, {"blocks", 1}, {"heads", 2}, {"dropout_rate", 0.0},
          {"dataset_dir", ""}, {"world_dir", ""}, {"split", "loo_train"}}},
        {"eval",
         {{"mode", "unbiased"}, {"sampler", "uniform"}, {"negatives", 25},
          {"ks", json::array({5, 10})}, {"efd_k", 10}, {"replicates", 1}, {"seed", nullptr},
          {"checkpoint_dir", ""}, {"dataset_dir", ""}, {"world_dir", ""}}},
        {"loop",
         {{"model", "cloze"}, {"iterations", 10}, {"topk", 10}, {"seed", nullptr},
          {"eval_negatives", 25}, {"dataset_dir", ""}, {"checkpoints", true},
          {"resume_from", ""}}},
        {"verify",
         {{"draws", 10000}, {"seed", nullptr}, {"fuzz_worlds", 100},
          {"world", {{"sequences", 3}, {"items", 6}, {"steps", 4}}}}},
        {"gradcheck", {{"seed", nullptr}}}};
}

void reject_unknown_keys(const json& given, const json& schema, const std::string& prefix) {
    if (!given.is_object()) return;
    for (const auto& [key, value] : given.items()) {
        if (!schema.contains(key))
            throw ConfigError("unknown config key: " + prefix + key);
        if (value.is_object() && schema[key].is_object())
            reject_unknown_keys(value, schema[key], prefix + key + ".");
    }
}

void merge_into(json& base, const json& overlay) {
    for (const auto& [key, value] : overlay.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object())
            merge_into(base[key], value);
        else
            base[key] = value;
    }
}

json load_config(const std::string& path) {
    json config = default_config();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        json given;
        try {
            given = json::parse(in);
        } catch (const std::exception& err) {
            throw ConfigError(std::string("config parse error: ") + err.what());
        }
        reject_unknown_keys(given, config, "");
        merge_into(config, given);
    }
    return config;
}

// Fills every null seed field from the master seed with a stable per-field
// stream id, so the resolved config pins the whole run.
void resolve_seeds(json& config) {
    const std::uint64_t master = config.at("master_seed").get<std::uint64_t>();
    const Rng rng(master);
    std::uint64_t stream = 1;
    const auto fill = [&](json& node, const char* key) {
        if (node.at(key).is_null()) node[key] = rng.substream(stream).seed();
        ++stream;
    };
    fill(config["synth"]["profile"], "seed");
    fill(config["synth"]["relevance_tf"], "seed");
    fill(config["synth"]["exposure_tf"], "seed");
    fill(config["synth"], "draw_seed");
    fill(config["train"], "seed");
    fill(config["eval"], "seed");
    fill(config["loop"], "seed");
    fill(config["verify"], "seed");
    fill(config["gradcheck"], "seed");
}

fs::path prepare_out_dir(std::string out, const std::string& command) {
    if (out.empty()) {
        const char* env = std::getenv("CLOZE_DEBIAS_OUT");
        out = (((env != nullptr) && (*env != '\0')) ? fs::path(env) : fs::path("out")) / command;
    }
    fs::create_directories(out);
    return out;
}

void write_resolved_config(const json& config, const fs::path& out_dir) {
    std::ofstream out(out_dir / "config.resolved.json", std::ios::binary);
    out << config.dump(2) << '\n';
}

synth::TfTrainConfig tf_config_from(const json& node) {
    synth::TfTrainConfig cfg;
    cfg.rank = node.at("rank").get<std::size_t>();
    cfg.epochs = node.at("epochs").get<std::size_t>();
    cfg.lr = node.at("lr").get<double>();
    cfg.momentum = node.at("momentum").get<double>();
    cfg.seed = node.at("seed").get<std::uint64_t>();
    return cfg;
}

trainer::TrainConfig train_config_from(const json& node, int threads) {
    trainer::TrainConfig cfg;
    cfg.kind = trainer::model_kind_from_string(node.at("model").get<std::string>());
    cfg.rho = node.at("rho").get<double>();
    cfg.epochs = node.at("epochs").get<std::size_t>();
    cfg.batch_size = node.at("batch_size").get<std::size_t>();
    cfg.lr = node.at("lr").get<double>();
    cfg.seed = node.at("seed").get<std::uint64_t>();
    const auto normalizer = node.at("normalizer").get<std::string>();
    if (normalizer == "masked_count")
        cfg.normalizer = losses::Normalizer::MaskedCount;
    else if (normalizer == "full_dims")
        cfg.normalizer = losses::Normalizer::FullDims;
    else
        throw ConfigError("train.normalizer must be masked_count or full_dims");
    const auto source = node.at("propensity_source").get<std::string>();
    if (source == "estimated")
        cfg.propensity_source = trainer::PropensitySource::Estimated;
    else if (source == "oracle")
        cfg.propensity_source = trainer::PropensitySource::Oracle;
    else
        throw ConfigError("train.propensity_source must be estimated or oracle");
    cfg.smoothing_eps = node.at("smoothing_eps").get<double>();
    cfg.optimizer = node.at("optimizer").get<std::string>();
    cfg.momentum = node.at("momentum").get<double>();
    cfg.hidden_units = node.at("hidden_units").get<std::size_t>();
    cfg.blocks = node.at("blocks").get<std::size_t>();
    cfg.heads = node.at("heads").get<std::size_t>();
    cfg.dropout_rate = node.at("dropout_rate").get<double>();
    cfg.threads = threads;
    return cfg;
}

// (sequence, item, timestep, rating) observations from an interaction log,
// laid out exactly like the token matrix (sorted ids, stable time order,
// most recent `steps` kept, left padding offset).
std::vector<synth::RatedTuple> tuples_from_records(
    const std::vector<data::InteractionRecord>& records, const data::Vocabulary& vocab,
    std::size_t steps) {
    std::map<std::int64_t, std::vector<std::size_t>> by_sequence;
    for (std::size_t idx = 0; idx < records.size(); ++idx)
        by_sequence[records[idx].sequence_id].push_back(idx);

    std::vector<synth::RatedTuple> tuples;
    std::size_t row = 0;
    for (auto& [seq_id, idxs] : by_sequence) {
        std::stable_sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
            return records[a].timestamp < records[b].timestamp;
        });
        const std::size_t keep = std::min(steps, idxs.size());
        const std::size_t offset = steps - keep;
        const std::size_t drop = idxs.size() - keep;
        for (std::size_t k = 0; k < keep; ++k) {
            const auto& rec = records[idxs[drop + k]];
            synth::RatedTuple tp;
            tp.seq = row;
            tp.item = static_cast<std::size_t>(vocab.raw_to_dense.at(rec.item_id) - 1);
            tp.step = offset + k;
            tp.rating = rec.rating;
            tuples.push_back(tp);
        }
        ++row;
    }
    return tuples;
}

int cmd_synth(const json& config, const fs::path& out_dir) {
    const auto& sc = config.at("synth");
    const int threads = config.at("threads").get<int>();

    std::vector<synth::RatedTuple> tuples;
    std::size_t seqs = 0, items = 0, steps = 0;
    const auto source = config.at("data").at("source").get<std::string>();
    if (source == "seed_tuples") {
        synth::SeedProfile profile;
        profile.seqs = sc.at("profile").at("sequences").get<std::size_t>();
        profile.items = sc.at("profile").at("items").get<std::size_t>();
        profile.steps = sc.at("profile").at("steps").get<std::size_t>();
        profile.latent_rank = sc.at("profile").at("latent_rank").get<std::size_t>();
        profile.exposure_sharpness = sc.at("profile").at("exposure_sharpness").get<double>();
        profile.seed = sc.at("profile").at("seed").get<std::uint64_t>();
        tuples = synth::generate_seed_tuples(profile);
        seqs = profile.seqs;
        items = profile.items;
        steps = profile.steps;
    } else if (source == "tsv") {
        const auto path = config.at("data").at("path").get<std::string>();
        steps = config.at("data").at("steps").get<std::size_t>();
        const auto records = data::ingest_tsv(path);
        const auto [dataset, vocab] = data::build_sequences(records, steps);
        tuples = tuples_from_records(records, vocab, steps);
        seqs = dataset.size();
        items = static_cast<std::size_t>(dataset.item_count);
    } else {
        throw ConfigError("data.source must be seed_tuples or tsv for synth");
    }

    std::cout << "fitting relevance factorization on " << tuples.size() << " tuples\n";
    const auto relevance_fit =
        synth::train_relevance_tf(tuples, seqs, items, steps, tf_config_from(sc.at("relevance_tf")));
    std::cout << "  final mse " << format_double(relevance_fit.final_loss) << '\n';
    const Tensor3 gamma = synth::relevance_from_tf(relevance_fit.params);

    std::vector<synth::Cell> positives;
    positives.reserve(tuples.size());
    for (const auto& tp : tuples) positives.push_back({tp.seq, tp.item, tp.step});
    const auto& ec = sc.at("exposure_tf");
    const auto exposure_fit = synth::train_exposure_tf(
        positives, seqs, items, steps, ec.at("neg_ratio").get<std::size_t>(), tf_config_from(ec));
    std::cout << "  final bce " << format_double(exposure_fit.final_loss) << '\n';
    const Tensor3 exposure = synth::exposure_from_tf(exposure_fit.params);

    const auto choice_rule = sc.at("stochastic_choice").get<bool>() ? synth::ChoiceRule::Stochastic
                                                                    : synth::ChoiceRule::Rational;
    json summary = json::array();
    for (const double power : sc.at("powers")) {
        synth::SyntheticWorld world;
        world.gamma = gamma;
        world.theta = synth::apply_bias_power(exposure, power);
        world.power = power;
        world.provenance = json{{"command", "synth"}, {"config", config}}.dump();

        const std::string tag = "world_p" + format_double(power);
        synth::save_world(world, (out_dir / tag).string());

        const auto draw = synth::sample_world_draw(world, sc.at("draw_seed").get<std::uint64_t>(),
                                                   choice_rule, threads);
        const auto built = synth::build_synthetic_dataset(draw);
        data::dump_dataset_csv(built.dataset, (out_dir / tag).string());

        const auto stats = data::summarize(built.dataset);
        summary.push_back(json{{"power", power},
                               {"world_dir", tag},
                               {"sequences", stats.sequences},
                               {"items", stats.items},
                               {"interactions", stats.interactions},
                               {"avg_length", stats.avg_length},
                               {"sparsity", stats.sparsity},
                               {"dropped_sequences", built.dropped_sequences}});
        std::cout << "p=" << format_double(power) << ": " << stats.sequences << " sequences, "
                  << stats.items << " items, " << stats.interactions << " interactions, sparsity "
                  << format_double(stats.sparsity) << '\n';
    }
    std::ofstream sout(out_dir / "summary.json", std::ios::binary);
    sout << summary.dump(2) << '\n';
    return kExitOk;
}

data::SequenceDataset load_dataset_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("dataset_dir is required");
    return data::load_dataset_csv(dir);
}

int cmd_train(const json& config, const fs::path& out_dir) {
    const auto& tc = config.at("train");
    const auto dataset = load_dataset_dir(tc.at("dataset_dir").get<std::string>());

    synth::SyntheticWorld world;
    const synth::SyntheticWorld* world_ptr = nullptr;
    if (const auto world_dir = tc.at("world_dir").get<std::string>(); !world_dir.empty()) {
        world = synth::load_world(world_dir);
        world_ptr = &world;
    }

    const auto split_mode = tc.at("split").get<std::string>();
    data::SequenceDataset train_data;
    if (split_mode == "loo_train") {
        train_data = eval::loo_split(dataset).train_dataset();
        train_data.item_count = dataset.item_count;
    } else if (split_mode == "full") {
        train_data = dataset;
    } else {
        throw ConfigError("train.split must be loo_train or full");
    }

    const auto cfg = train_config_from(tc, config.at("threads").get<int>());
    const auto result = trainer::train(cfg, train_data, world_ptr);

    encoder::save_checkpoint(result.params, (out_dir / "checkpoint").string());
    {
        std::ofstream out(out_dir / "loss_curve.csv", std::ios::binary);
        out << "epoch,loss\n";
        for (std::size_t e = 0; e < result.loss_curve.size(); ++e)
            out << (e + 1) << ',' << format_double(result.loss_curve[e]) << '\n';
    }
    trainer::write_run_manifest((out_dir / "run_manifest.json").string(), cfg, train_data,
                                json{{"split", split_mode}}.dump());
    std::cout << "trained " << trainer::to_string(cfg.kind) << " for " << cfg.epochs
              << " epochs; final loss " << format_double(result.loss_curve.back()) << '\n';
    return kExitOk;
}

int cmd_eval(const json& config, const fs::path& out_dir) {
    const auto& ec = config.at("eval");
    const auto dataset = load_dataset_dir(ec.at("dataset_dir").get<std::string>());
    const auto checkpoint_dir = ec.at("checkpoint_dir").get<std::string>();
    if (checkpoint_dir.empty()) throw ConfigError("eval.checkpoint_dir is required");
    const auto params = encoder::load_checkpoint(checkpoint_dir);

    const auto mode_name = ec.at("mode").get<std::string>();
    trainer::EvalMode mode;
    if (mode_name == "unbiased")
        mode = trainer::EvalMode::Unbiased;
    else if (mode_name == "standard")
        mode = trainer::EvalMode::Standard;
    else
        throw ConfigError("eval.mode must be unbiased or standard");

    synth::SyntheticWorld world;
    const Tensor3* gamma = nullptr;
    if (const auto world_dir = ec.at("world_dir").get<std::string>(); !world_dir.empty()) {
        world = synth::load_world(world_dir);
        gamma = &world.gamma;
    }
    if (mode == trainer::EvalMode::Unbiased && gamma == nullptr)
        throw ConfigError("eval.mode=unbiased requires eval.world_dir");

    const auto split = eval::loo_split(dataset);
    auto train_data = split.train_dataset();
    train_data.item_count = dataset.item_count;
    const auto popularity = propensity::smooth_and_clip(
        propensity::static_from_temporal_sum(propensity::estimate_temporal_popularity(train_data)),
        1e-3);

    eval::EvalOptions opts;
    const auto sampler_name = ec.at("sampler").get<std::string>();
    if (sampler_name == "uniform")
        opts.sampler = eval::SamplerKind::Uniform;
    else if (sampler_name == "popularity")
        opts.sampler = eval::SamplerKind::Popularity;
    else
        throw ConfigError("eval.sampler must be uniform or popularity");
    opts.negatives = ec.at("negatives").get<std::size_t>();
    opts.ks.clear();
    for (const auto& k : ec.at("ks")) opts.ks.push_back(k.get<std::size_t>());
    opts.efd_k = ec.at("efd_k").get<std::size_t>();
    opts.popularity = popularity.static_;
    opts.threads = config.at("threads").get<int>();

    eval::EvalReport report;
    report.model = "checkpoint";
    report.config_fingerprint = fnv1a64(config.dump());
    const std::size_t replicates = ec.at("replicates").get<std::size_t>();
    const Rng master(ec.at("seed").get<std::uint64_t>());
    for (std::size_t rep = 0; rep < replicates; ++rep) {
        opts.seed = master.substream(rep).seed();
        report.add_replicate(trainer::evaluate_model(params, split, mode, opts, gamma));
    }
    report.finalize();
    eval::write_report_csv(report, (out_dir / "report.csv").string());
    eval::write_report_json(report, (out_dir / "report.json").string());
    for (const auto& [name, st] : report.metrics)
        std::cout << name << ": " << format_double(st.mean) << " +- " << format_double(st.stddev)
                  << '\n';
    return kExitOk;
}

int cmd_loop(const json& config, const fs::path& out_dir) {
    const auto& lc = config.at("loop");
    const auto dataset = load_dataset_dir(lc.at("dataset_dir").get<std::string>());

    loop::LoopConfig cfg;
    cfg.train = train_config_from(config.at("train"), config.at("threads").get<int>());
    cfg.train.kind = trainer::model_kind_from_string(lc.at("model").get<std::string>());
    cfg.iterations = lc.at("iterations").get<std::size_t>();
    cfg.topk = lc.at("topk").get<std::size_t>();
    cfg.seed = lc.at("seed").get<std::uint64_t>();
    cfg.eval_negatives = lc.at("eval_negatives").get<std::size_t>();
    if (lc.at("checkpoints").get<bool>()) cfg.checkpoint_dir = (out_dir / "checkpoints").string();
    cfg.resume_from = lc.at("resume_from").get<std::string>();

    const auto state = loop::run_feedback_loop(cfg, dataset);
    loop::write_history_csv(state, trainer::to_string(cfg.train.kind),
                            (out_dir / "history.csv").string());
    if (state.aborted) {
        std::cerr << "loop aborted after " << state.iterations_done
                  << " iterations: " << state.abort_reason << '\n';
        return kExitRuntimeError;
    }
    std::cout << "loop finished " << state.iterations_done << " iterations\n";
    for (const auto& rec : state.history)
        std::cout << "  iteration " << rec.iteration << ": efd10 " << format_double(rec.efd10)
                  << ", ndcg10 " << format_double(rec.ndcg10) << '\n';
    return kExitOk;
}

int cmd_verify(const json& config, const fs::path& out_dir) {
    const auto& vc = config.at("verify");
    const std::uint64_t seed = vc.at("seed").get<std::uint64_t>();
    const std::size_t draws = vc.at("draws").get<std::size_t>();
    const std::size_t seqs = vc.at("world").at("sequences").get<std::size_t>();
    const std::size_t items = vc.at("world").at("items").get<std::size_t>();
    const std::size_t steps = vc.at("world").at("steps").get<std::size_t>();

    Rng rng(seed);
    synth::SyntheticWorld world;
    world.gamma = Tensor3(seqs, items, steps);
    world.theta = Tensor3(seqs, items, steps);
    for (auto& x : world.gamma.v) x = rng.uniform(0.1, 0.9);
    for (auto& x : world.theta.v) x = rng.uniform(0.1, 0.9);
    losses::LogitTensor logits(seqs, steps, items);
    for (auto& x : logits.v) x = rng.uniform(-1.0, 1.0);

    const auto report = verify::check_propositions(world, logits, draws, rng.substream(99).seed());
    verify::write_report_json(report, (out_dir / "verification.json").string());
    for (const auto& rec : report.records)
        std::cout << (rec.pass ? "pass" : "FAIL") << "  " << rec.name << "  " << rec.detail << '\n';
    return report.all_pass() ? kExitOk : kExitRuntimeError;
}

int cmd_gradcheck(const json& config, const fs::path& out_dir) {
    const std::uint64_t seed = config.at("gradcheck").at("seed").get<std::uint64_t>();
    Rng rng(seed);

    // Encoder: projection of the logits onto a fixed direction.
    encoder::EncoderConfig ecfg;
    ecfg.hidden_units = 8;
    ecfg.blocks = 2;
    ecfg.heads = 2;
    ecfg.steps = 8;
    ecfg.item_count = 12;
    ecfg.seed = rng.substream(1).seed();
    auto params = encoder::init_params(ecfg);
    GridI tokens(2, 8);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t t = 0; t < 8; ++t)
            tokens.at(r, t) =
                (t < 2 && r == 0) ? 0 : static_cast<std::int32_t>(1 + rng.uniform_index(13));

    const auto probe = encoder::forward(params, tokens);
    losses::LogitTensor direction(2, 8, 12);
    for (auto& g : direction.v) g = rng.uniform(-1.0, 1.0);
    const auto grads = encoder::backward(params, probe.cache, direction);

    const auto project = [&] {
        const auto fwd = encoder::forward(params, tokens, {.want_cache = false});
        double acc = 0.0;
        for (std::size_t i = 0; i < fwd.logits.v.size(); ++i) acc += direction.v[i] * fwd.logits.v[i];
        return acc;
    };
    double encoder_err = 0.0;
    std::vector<std::vector<double>*> tensors;
    std::vector<const std::vector<double>*> gtensors;
    params.for_each_tensor([&](const std::string&, encoder::TensorKind,
                               const std::vector<std::size_t>&, std::vector<double>& d) {
        tensors.push_back(&d);
    });
    grads.for_each_tensor([&](const std::string&, encoder::TensorKind,
                              const std::vector<std::size_t>&, const std::vector<double>& d) {
        gtensors.push_back(&d);
    });
    for (std::size_t n = 0; n < tensors.size(); ++n) {
        auto& data = *tensors[n];
        const auto& g = *gtensors[n];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + 1e-5;
            const double up = project();
            data[i] = saved - 1e-5;
            const double down = project();
            data[i] = saved;
            const double fd = (up - down) / 2e-5;
            encoder_err = std::max(
                encoder_err, std::abs(g[i] - fd) / std::max({1.0, std::abs(g[i]), std::abs(fd)}));
        }
    }

    // Factorization models: MSE and BCE losses.
    auto tf = synth::init_tf(3, 4, 3, 2, rng.substream(2).seed());
    for (auto& x : tf.seq_factors.v) x = rng.uniform(-0.8, 0.8);
    for (auto& x : tf.item_factors.v) x = rng.uniform(-0.8, 0.8);
    for (auto& x : tf.step_factors.v) x = rng.uniform(-0.8, 0.8);
    std::vector<synth::RatedTuple> tuples;
    std::vector<synth::Cell> cells;
    std::vector<std::uint8_t> labels;
    for (int n = 0; n < 12; ++n) {
        const std::size_t s = rng.uniform_index(3), i = rng.uniform_index(4), t = rng.uniform_index(3);
        tuples.push_back({s, i, t, rng.uniform(1.0, 5.0)});
        cells.push_back({s, i, t});
        labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    double tf_err = 0.0;
    const auto tf_check = [&](auto loss_fn, const synth::TFParams& g) {
        for (auto field : {&synth::TFParams::seq_factors, &synth::TFParams::item_factors,
                           &synth::TFParams::step_factors}) {
            auto& data = (tf.*field).v;
            const auto& gv = (g.*field).v;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double saved = data[i];
                data[i] = saved + 1e-5;
                const double up = loss_fn();
                data[i] = saved - 1e-5;
                const double down = loss_fn();
                data[i] = saved;
                const double fd = (up - down) / 2e-5;
                tf_err = std::max(
                    tf_err, std::abs(gv[i] - fd) / std::max({1e-4, std::abs(gv[i]), std::abs(fd)}));
            }
        }
    };
    tf_check([&] { return synth::tf_mse_loss(tf, tuples); }, synth::tf_mse_grad(tf, tuples));
    tf_check([&] { return synth::tf_bce_loss(tf, cells, labels); },
             synth::tf_bce_grad(tf, cells, labels));

    std::cout << "encoder max relative error: " << format_double(encoder_err) << '\n';
    std::cout << "factorization max relative error: " << format_double(tf_err) << '\n';
    json j{{"encoder_max_relative_error", encoder_err},
           {"tf_max_relative_error", tf_err},
           {"encoder_tolerance", 1e-4},
           {"tf_tolerance", 1e-6},
           {"pass", encoder_err <= 1e-4 && tf_err <= 1e-6}};
    std::ofstream out(out_dir / "gradcheck.json", std::ios::binary);
    out << j.dump(2) << '\n';
    return j["pass"].get<bool>() ? kExitOk : kExitRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Exposure-debiased Cloze training for sequential recommendation"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--out", out, "output directory");
    app.add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
        seed_set = true;
    });
    app.add_option("--threads", threads, "internal parallelism cap");

    auto* synth_cmd = app.add_subcommand("synth", "generate worlds and datasets");
    std::vector<double> powers;
    synth_cmd->add_option("--p", powers, "bias power sweep")->delimiter(',');

    auto* train_cmd = app.add_subcommand("train", "train an encoder under a loss kind");
    std::string model, dataset_dir, world_dir;
    train_cmd->add_option("--model", model, "cloze|ips|itps|oracle");
    train_cmd->add_option("--dataset", dataset_dir, "dataset directory (from synth)");
    train_cmd->add_option("--world", world_dir, "world directory (oracle tensors)");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string mode, sampler, checkpoint_dir;
    eval_cmd->add_option("--mode", mode, "unbiased|standard");
    eval_cmd->add_option("--sampler", sampler, "uniform|popularity");
    eval_cmd->add_option("--checkpoint", checkpoint_dir, "checkpoint directory");
    eval_cmd->add_option("--dataset", dataset_dir, "dataset directory");
    eval_cmd->add_option("--world", world_dir, "world directory (unbiased mode)");

    auto* loop_cmd = app.add_subcommand("loop", "run the feedback-loop simulation");
    loop_cmd->add_option("--model", model, "cloze|ips|itps");
    loop_cmd->add_option("--dataset", dataset_dir, "dataset directory");

    auto* verify_cmd = app.add_subcommand("verify", "check the estimator propositions");
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suites");

    CLI11_PARSE(app, argc, argv);

    try {
        json config = load_config(config_path);
        if (seed_set) config["master_seed"] = seed;
        if (threads > 0) config["threads"] = threads;

        if (synth_cmd->parsed() && !powers.empty()) config["synth"]["powers"] = powers;
        if (train_cmd->parsed()) {
            if (!model.empty()) config["train"]["model"] = model;
            if (!dataset_dir.empty()) config["train"]["dataset_dir"] = dataset_dir;
            if (!world_dir.empty()) config["train"]["world_dir"] = world_dir;
        }
        if (eval_cmd->parsed()) {
            if (!mode.empty()) config["eval"]["mode"] = mode;
            if (!sampler.empty()) config["eval"]["sampler"] = sampler;
            if (!checkpoint_dir.empty()) config["eval"]["checkpoint_dir"] = checkpoint_dir;
            if (!dataset_dir.empty()) config["eval"]["dataset_dir"] = dataset_dir;
            if (!world_dir.empty()) config["eval"]["world_dir"] = world_dir;
        }
        if (loop_cmd->parsed()) {
            if (!model.empty()) config["loop"]["model"] = model;
            if (!dataset_dir.empty()) config["loop"]["dataset_dir"] = dataset_dir;
        }
        resolve_seeds(config);

        const std::string command = app.get_subcommands().front()->get_name();
        const fs::path out_dir = prepare_out_dir(out, command);
        write_resolved_config(config, out_dir);

        if (synth_cmd->parsed()) return cmd_synth(config, out_dir);
        if (train_cmd->parsed()) return cmd_train(config, out_dir);
        if (eval_cmd->parsed()) return cmd_eval(config, out_dir);
        if (loop_cmd->parsed()) return cmd_loop(config, out_dir);
        if (verify_cmd->parsed()) return cmd_verify(config, out_dir);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(config, out_dir);
        return kExitConfigError;
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return kExitConfigError;
    } catch (const ArgumentError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return kExitConfigError;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kExitRuntimeError;
    }
}
