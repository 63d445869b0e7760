#include "cloze_debias/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace cloze_debias::synth {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log sigmoid(z) without overflow.
double log_sigmoid(double z) { return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

struct TensorGrad {
    GridD p, q, w;
};

void apply_step(TFParams& params, const TFParams& grads, double lr, double momentum,
                TFParams& velocity) {
    auto update = [&](GridD& x, const GridD& g, GridD& v) {
        if (momentum > 0.0) {
            for (std::size_t i = 0; i < x.v.size(); ++i) {
                v.v[i] = momentum * v.v[i] + g.v[i];
                x.v[i] -= lr * v.v[i];
            }
        } else {
            for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] -= lr * g.v[i];
        }
    };
    update(params.seq_factors, grads.seq_factors, velocity.seq_factors);
    update(params.item_factors, grads.item_factors, velocity.item_factors);
    update(params.step_factors, grads.step_factors, velocity.step_factors);
}

TFParams zeros_like_tf(const TFParams& params) {
    TFParams z = params;
    std::fill(z.seq_factors.v.begin(), z.seq_factors.v.end(), 0.0);
    std::fill(z.item_factors.v.begin(), z.item_factors.v.end(), 0.0);
    std::fill(z.step_factors.v.begin(), z.step_factors.v.end(), 0.0);
    return z;
}

}  // namespace

TFParams init_tf(std::size_t seqs, std::size_t items, std::size_t steps, std::size_t rank,
                 std::uint64_t seed) {
    if (rank < 1) throw ArgumentError("init_tf: rank must be >= 1");
    TFParams params;
    params.seqs = seqs;
    params.items = items;
    params.steps = steps;
    params.rank = rank;
    params.seq_factors = GridD(seqs, rank);
    params.item_factors = GridD(items, rank);
    params.step_factors = GridD(steps, rank);
    Rng rng(seed);
    const double scale = 0.1 / std::sqrt(static_cast<double>(rank));
    for (double& x : params.seq_factors.v) x = rng.normal(0.0, scale);
    for (double& x : params.item_factors.v) x = rng.normal(0.0, scale);
    for (double& x : params.step_factors.v) x = rng.normal(0.0, scale);
    return params;
}

double tf_mse_loss(const TFParams& params, const std::vector<RatedTuple>& tuples) {
    double acc = 0.0;
    for (const auto& tp : tuples) {
        const double err = params.predict(tp.seq, tp.item, tp.step) - tp.rating;
        acc += err * err;
    }
    return acc / static_cast<double>(tuples.size());
}

TFParams tf_mse_grad(const TFParams& params, const std::vector<RatedTuple>& tuples) {
    TFParams grads = zeros_like_tf(params);
    const double inv_n = 2.0 / static_cast<double>(tuples.size());
    for (const auto& tp : tuples) {
        const double err = inv_n * (params.predict(tp.seq, tp.item, tp.step) - tp.rating);
        const double* p = params.seq_factors.row(tp.seq);
        const double* q = params.item_factors.row(tp.item);
        const double* w = params.step_factors.row(tp.step);
        double* gp = grads.seq_factors.row(tp.seq);
        double* gq = grads.item_factors.row(tp.item);
        double* gw = grads.step_factors.row(tp.step);
        for (std::size_t k = 0; k < params.rank; ++k) {
            gp[k] += err * q[k] * w[k];
            gq[k] += err * p[k] * w[k];
            gw[k] += err * p[k] * q[k];
        }
    }
    return grads;
}

double tf_bce_loss(const TFParams& params, const std::vector<Cell>& cells,
                   const std::vector<std::uint8_t>& labels) {
    double acc = 0.0;
    for (std::size_t n = 0; n < cells.size(); ++n) {
        const double z = params.predict(cells[n].seq, cells[n].item, cells[n].step);
        // y log s(z) + (1-y) log(1 - s(z)); note 1 - s(z) = s(-z).
        acc -= labels[n] ? log_sigmoid(z) : log_sigmoid(-z);
    }
    return acc / static_cast<double>(cells.size());
}

TFParams tf_bce_grad(const TFParams& params, const std::vector<Cell>& cells,
                     const std::vector<std::uint8_t>& labels) {
    TFParams grads = zeros_like_tf(params);
    const double inv_n = 1.0 / static_cast<double>(cells.size());
    for (std::size_t n = 0; n < cells.size(); ++n) {
        const auto& c = cells[n];
        const double z = params.predict(c.seq, c.item, c.step);
        const double dz = inv_n * (sigmoid(z) - (labels[n] ? 1.0 : 0.0));
        const double* p = params.seq_factors.row(c.seq);
        const double* q = params.item_factors.row(c.item);
        const double* w = params.step_factors.row(c.step);
        double* gp = grads.seq_factors.row(c.seq);
        double* gq = grads.item_factors.row(c.item);
        double* gw = grads.step_factors.row(c.step);
        for (std::size_t k = 0; k < params.rank; ++k) {
            gp[k] += dz * q[k] * w[k];
            gq[k] += dz * p[k] * w[k];
            gw[k] += dz * p[k] * q[k];
        }
    }
    return grads;
}

namespace {

// Seed-shuffled mini-batch gradient descent shared by both factorization
// objectives. batch_size 0 runs full-batch. With a validation split the
// returned parameters are the best-held-out-loss snapshot.
template <typename Sample>
TfFitResult run_tf_training(const std::vector<Sample>& samples, std::size_t seqs, std::size_t items,
                            std::size_t steps, const TfTrainConfig& config,
                            TFParams (*grad_fn)(const TFParams&, const std::vector<Sample>&),
                            double (*loss_fn)(const TFParams&, const std::vector<Sample>&),
                            const char* label) {
    if (config.val_fraction < 0.0 || config.val_fraction >= 1.0)
        throw ArgumentError("tf training: val_fraction must be in [0, 1)");

    std::vector<Sample> train_set, val_set;
    {
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng split_rng = Rng(config.seed).substream(0x5b117);
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            const std::size_t j = i + split_rng.uniform_index(order.size() - i);
            std::swap(order[i], order[j]);
        }
        const std::size_t val_count =
            static_cast<std::size_t>(config.val_fraction * static_cast<double>(samples.size()));
        for (std::size_t k = 0; k < order.size(); ++k)
            (k < val_count ? val_set : train_set).push_back(samples[order[k]]);
    }

    TfFitResult result;
    result.params = init_tf(seqs, items, steps, config.rank, config.seed);
    TFParams best = result.params;
    double best_val = HUGE_VAL;
    TFParams velocity = zeros_like_tf(result.params);
    const std::size_t batch =
        config.batch_size == 0 ? train_set.size() : std::min(config.batch_size, train_set.size());

    Rng shuffle_rng = Rng(config.seed).substream(0xba7c);
    std::vector<std::size_t> order(train_set.size());
    std::vector<Sample> slice;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            const std::size_t j = i + shuffle_rng.uniform_index(order.size() - i);
            std::swap(order[i], order[j]);
        }
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t end = std::min(order.size(), start + batch);
            slice.clear();
            for (std::size_t k = start; k < end; ++k) slice.push_back(train_set[order[k]]);
            const TFParams grads = grad_fn(result.params, slice);
            apply_step(result.params, grads, config.lr, config.momentum, velocity);
        }
        const double train_loss = loss_fn(result.params, train_set);
        if (!std::isfinite(train_loss))
            throw TrainingError(std::string(label) + " factorization diverged at epoch " +
                                std::to_string(epoch) + " (loss not finite); try a smaller lr than " +
                                format_double(config.lr));
        if (!val_set.empty()) {
            const double val_loss = loss_fn(result.params, val_set);
            if (val_loss < best_val) {
                best_val = val_loss;
                best = result.params;
                result.best_epoch = epoch;
            }
        } else {
            result.best_epoch = epoch;
        }
    }
    if (!val_set.empty() && config.epochs > 0) {
        result.params = best;
        result.val_loss = best_val;
    }
    result.final_loss = loss_fn(result.params, train_set);
    return result;
}

}  // namespace

TfFitResult train_relevance_tf(const std::vector<RatedTuple>& tuples, std::size_t seqs,
                               std::size_t items, std::size_t steps, const TfTrainConfig& config) {
    if (tuples.empty()) throw ArgumentError("train_relevance_tf: no tuples");
    return run_tf_training<RatedTuple>(tuples, seqs, items, steps, config, &tf_mse_grad,
                                       &tf_mse_loss, "relevance");
}

std::vector<Cell> sample_negative_cells(const std::vector<Cell>& positives, std::size_t seqs,
                                        std::size_t items, std::size_t steps, std::size_t count,
                                        std::uint64_t seed) {
    const std::size_t total = seqs * items * steps;
    std::unordered_set<std::size_t> used;
    used.reserve(positives.size() + count);
    for (const auto& c : positives) used.insert((c.seq * items + c.item) * steps + c.step);
    if (total - used.size() < count)
        throw SamplingError("not enough non-interacted cells: need " + std::to_string(count) +
                            ", have " + std::to_string(total - used.size()));
    Rng rng(seed);
    std::vector<Cell> out;
    out.reserve(count);
    while (out.size() < count) {
        const std::size_t flat = rng.uniform_index(total);
        if (!used.insert(flat).second) continue;
        Cell c;
        c.step = flat % steps;
        c.item = (flat / steps) % items;
        c.seq = flat / (steps * items);
        out.push_back(c);
    }
    return out;
}

TfFitResult train_exposure_tf(const std::vector<Cell>& positives, std::size_t seqs,
                              std::size_t items, std::size_t steps, std::size_t neg_ratio,
                              const TfTrainConfig& config) {
    if (positives.empty()) throw ArgumentError("train_exposure_tf: no positives");
    const std::vector<Cell> negatives = sample_negative_cells(
        positives, seqs, items, steps, neg_ratio * positives.size(), splitmix64(config.seed ^ 0x5eedull));

    std::vector<Cell> cells;
    cells.reserve(positives.size() + negatives.size());
    std::vector<std::uint8_t> labels;
    labels.reserve(cells.capacity());
    for (const auto& c : positives) {
        cells.push_back(c);
        labels.push_back(1);
    }
    for (const auto& c : negatives) {
        cells.push_back(c);
        labels.push_back(0);
    }

    struct LabeledCell {
        Cell cell;
        std::uint8_t label;
    };
    std::vector<LabeledCell> samples;
    samples.reserve(cells.size());
    for (std::size_t n = 0; n < cells.size(); ++n) samples.push_back({cells[n], labels[n]});

    const auto grad_fn = +[](const TFParams& params, const std::vector<LabeledCell>& batch) {
        std::vector<Cell> cs;
        std::vector<std::uint8_t> ls;
        cs.reserve(batch.size());
        ls.reserve(batch.size());
        for (const auto& s : batch) {
            cs.push_back(s.cell);
            ls.push_back(s.label);
        }
        return tf_bce_grad(params, cs, ls);
    };
    const auto loss_fn = +[](const TFParams& params, const std::vector<LabeledCell>& all) {
        std::vector<Cell> cs;
        std::vector<std::uint8_t> ls;
        cs.reserve(all.size());
        ls.reserve(all.size());
        for (const auto& s : all) {
            cs.push_back(s.cell);
            ls.push_back(s.label);
        }
        return tf_bce_loss(params, cs, ls);
    };
    return run_tf_training<LabeledCell>(samples, seqs, items, steps, config, grad_fn, loss_fn,
                                        "exposure");
}

Tensor3 relevance_from_tf(const TFParams& params) {
    Tensor3 gamma(params.seqs, params.items, params.steps);
    for (std::size_t s = 0; s < params.seqs; ++s)
        for (std::size_t i = 0; i < params.items; ++i)
            for (std::size_t t = 0; t < params.steps; ++t)
                gamma.at(s, i, t) = sigmoid(params.predict(s, i, t));
    return gamma;
}

Tensor3 exposure_from_tf(const TFParams& params) { return relevance_from_tf(params); }

Tensor3 apply_bias_power(const Tensor3& o_hat, double power) {
    if (!(power >= 1.0)) throw ArgumentError("apply_bias_power: p must be >= 1");
    Tensor3 theta = o_hat;
    for (double& x : theta.v) {
        if (!(x > 0.0) || !(x < 1.0))
            throw ArgumentError("apply_bias_power: exposure probabilities must lie in (0, 1)");
        x = std::pow(x, power);
    }
    return theta;
}

losses::ChoiceTensor rational_choice_full_awareness(const Tensor3& gamma) {
    losses::ChoiceTensor c;
    c.items = GridI(gamma.seqs, gamma.steps, 0);
    for (std::size_t s = 0; s < gamma.seqs; ++s)
        for (std::size_t t = 0; t < gamma.steps; ++t) {
            std::size_t best = 0;
            double best_gamma = gamma.at(s, 0, t);
            for (std::size_t i = 1; i < gamma.items; ++i)
                if (gamma.at(s, i, t) > best_gamma) {
                    best_gamma = gamma.at(s, i, t);
                    best = i;
                }
            c.items.at(s, t) = static_cast<std::int32_t>(best + 1);
        }
    return c;
}

namespace {

WorldDraw sample_draw_impl(const SyntheticWorld& world, std::uint64_t seed, ChoiceRule rule,
                           const losses::ChoiceTensor* fixed_choice, int threads) {
    const std::size_t seqs = world.seqs(), items = world.items(), steps = world.steps();
    WorldDraw draw;
    draw.seqs = seqs;
    draw.items = items;
    draw.steps = steps;
    draw.exposure.assign(seqs * items * steps, 0);
    draw.relevance.assign(seqs * items * steps, 0);
    draw.choice.rows = seqs;
    draw.choice.cols = steps;
    draw.choice.v.assign(seqs * steps, 0);
    draw.y.items = GridI(seqs, steps, 0);

    const Rng master(seed);
    parallel_for(seqs, threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t s = lo; s < hi; ++s) {
            Rng rng = master.substream(s);
            for (std::size_t t = 0; t < steps; ++t) {
                for (std::size_t i = 0; i < items; ++i)
                    draw.exposure[(s * items + i) * steps + t] = rng.bernoulli(world.theta.at(s, i, t));
                for (std::size_t i = 0; i < items; ++i)
                    draw.relevance[(s * items + i) * steps + t] = rng.bernoulli(world.gamma.at(s, i, t));

                std::int32_t chosen = 0;
                if (fixed_choice != nullptr) {
                    chosen = fixed_choice->items.at(s, t);
                } else if (rule == ChoiceRule::Rational) {
                    double best_gamma = -1.0;
                    for (std::size_t i = 0; i < items; ++i) {
                        if (!draw.exposure[(s * items + i) * steps + t]) continue;
                        if (world.gamma.at(s, i, t) > best_gamma) {
                            best_gamma = world.gamma.at(s, i, t);
                            chosen = static_cast<std::int32_t>(i + 1);
                        }
                    }
                } else {
                    double total = 0.0;
                    for (std::size_t i = 0; i < items; ++i)
                        if (draw.exposure[(s * items + i) * steps + t]) total += world.gamma.at(s, i, t);
                    if (total > 0.0) {
                        const double target = rng.uniform() * total;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < items; ++i) {
                            if (!draw.exposure[(s * items + i) * steps + t]) continue;
                            acc += world.gamma.at(s, i, t);
                            if (acc >= target) {
                                chosen = static_cast<std::int32_t>(i + 1);
                                break;
                            }
                        }
                        if (chosen == 0) chosen = static_cast<std::int32_t>(items);  // fp slack
                    }
                }
                draw.choice.at(s, t) = chosen;
                if (chosen != 0) {
                    const std::size_t ci = static_cast<std::size_t>(chosen - 1);
                    const bool interacted = draw.exposure[(s * items + ci) * steps + t] &&
                                            draw.relevance[(s * items + ci) * steps + t];
                    draw.y.items.at(s, t) = interacted ? chosen : 0;
                }
            }
        }
    });
    return draw;
}

}  // namespace

WorldDraw sample_world_draw(const SyntheticWorld& world, std::uint64_t seed, ChoiceRule rule,
                            int threads) {
    return sample_draw_impl(world, seed, rule, nullptr, threads);
}

WorldDraw sample_world_draw_fixed_choice(const SyntheticWorld& world, const losses::ChoiceTensor& c,
                                         std::uint64_t seed, int threads) {
    return sample_draw_impl(world, seed, ChoiceRule::Rational, &c, threads);
}

BuiltDataset build_synthetic_dataset(const WorldDraw& draw) {
    BuiltDataset built;
    std::vector<std::pair<std::size_t, std::int32_t>> row;
    std::vector<std::vector<std::pair<std::size_t, std::int32_t>>> rows;
    std::vector<std::int64_t> ids;
    for (std::size_t s = 0; s < draw.seqs; ++s) {
        row.clear();
        for (std::size_t t = 0; t < draw.steps; ++t)
            if (draw.y.items.at(s, t) != 0) row.emplace_back(t, draw.y.items.at(s, t));
        if (row.empty()) {
            ++built.dropped_sequences;
            continue;
        }
        rows.push_back(row);
        ids.push_back(static_cast<std::int64_t>(s + 1));
    }

    auto& ds = built.dataset;
    ds.steps = draw.steps;
    ds.item_count = static_cast<std::int32_t>(draw.items);
    ds.tokens = GridI(rows.size(), draw.steps, 0);
    ds.origin_steps = GridI(rows.size(), draw.steps, -1);
    ds.sequence_ids = std::move(ids);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t offset = draw.steps - rows[r].size();
        for (std::size_t k = 0; k < rows[r].size(); ++k) {
            ds.tokens.at(r, offset + k) = rows[r][k].second;
            ds.origin_steps.at(r, offset + k) = static_cast<std::int32_t>(rows[r][k].first);
        }
    }
    return built;
}

std::vector<RatedTuple> generate_seed_tuples(const SeedProfile& profile) {
    const std::size_t seqs = profile.seqs, items = profile.items, steps = profile.steps;
    if (seqs == 0 || items == 0 || steps == 0)
        throw ArgumentError("generate_seed_tuples: dimensions must be positive");
    Rng rng(profile.seed);

    // Hidden low-rank structure with unit-scale trilinear scores: factor
    // entries ~ N(0, 0.9) make each rank-1 term's product O(0.7).
    const auto latent = [&](std::uint64_t stream) {
        TFParams params;
        params.seqs = seqs;
        params.items = items;
        params.steps = steps;
        params.rank = profile.latent_rank;
        params.seq_factors = GridD(seqs, profile.latent_rank);
        params.item_factors = GridD(items, profile.latent_rank);
        params.step_factors = GridD(steps, profile.latent_rank);
        Rng sub = rng.substream(stream);
        for (double& x : params.seq_factors.v) x = sub.normal(0.0, 0.9);
        for (double& x : params.item_factors.v) x = sub.normal(0.0, 0.9);
        for (double& x : params.step_factors.v) x = sub.normal(0.0, 0.9);
        return params;
    };
    const TFParams relevance_latent = latent(1);
    const TFParams exposure_latent = latent(2);

    std::vector<RatedTuple> tuples;
    tuples.reserve(seqs * steps);
    std::vector<double> weights(items);
    const Rng pick_master = rng.substream(3);
    for (std::size_t s = 0; s < seqs; ++s) {
        Rng pick = pick_master.substream(s);
        for (std::size_t t = 0; t < steps; ++t) {
            double mx = -HUGE_VAL;
            for (std::size_t i = 0; i < items; ++i) {
                weights[i] = profile.exposure_sharpness *
                             (exposure_latent.predict(s, i, t) +
                              profile.exposure_relevance_coupling * relevance_latent.predict(s, i, t));
                mx = std::max(mx, weights[i]);
            }
            double total = 0.0;
            for (std::size_t i = 0; i < items; ++i) {
                weights[i] = std::exp(weights[i] - mx);
                total += weights[i];
            }
            const double target = pick.uniform() * total;
            double acc = 0.0;
            std::size_t item = items - 1;
            for (std::size_t i = 0; i < items; ++i) {
                acc += weights[i];
                if (acc >= target) {
                    item = i;
                    break;
                }
            }
            RatedTuple tp;
            tp.seq = s;
            tp.item = item;
            tp.step = t;
            tp.rating = 1.0 + 4.0 * sigmoid(relevance_latent.predict(s, item, t));
            tuples.push_back(tp);
        }
    }
    return tuples;
}

void save_world(const SyntheticWorld& world, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto dump_tensor = [&](const Tensor3& tensor, const std::string& name) {
        std::ofstream out(fs::path(dir) / name, std::ios::binary);
        out << "sequence,item,timestep,value\n";
        for (std::size_t s = 0; s < tensor.seqs; ++s)
            for (std::size_t i = 0; i < tensor.items; ++i)
                for (std::size_t t = 0; t < tensor.steps; ++t)
                    out << (s + 1) << ',' << (i + 1) << ',' << (t + 1) << ','
                        << format_double(tensor.at(s, i, t)) << '\n';
    };
    dump_tensor(world.gamma, "gamma.csv");
    dump_tensor(world.theta, "theta.csv");
    nlohmann::json meta{{"sequences", world.seqs()},
                        {"items", world.items()},
                        {"steps", world.steps()},
                        {"power", world.power}};
    if (!world.provenance.empty()) meta["provenance"] = nlohmann::json::parse(world.provenance);
    std::ofstream out(fs::path(dir) / "meta.json", std::ios::binary);
    out << meta.dump(2) << '\n';
}

SyntheticWorld load_world(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream min(fs::path(dir) / "meta.json");
    if (!min) throw IoError("missing world meta.json in " + dir);
    const nlohmann::json meta = nlohmann::json::parse(min);
    SyntheticWorld world;
    const std::size_t seqs = meta.at("sequences").get<std::size_t>();
    const std::size_t items = meta.at("items").get<std::size_t>();
    const std::size_t steps = meta.at("steps").get<std::size_t>();
    world.power = meta.at("power").get<double>();
    if (meta.contains("provenance")) world.provenance = meta["provenance"].dump();

    auto load_tensor = [&](const std::string& name) {
        Tensor3 tensor(seqs, items, steps);
        std::ifstream in(fs::path(dir) / name);
        if (!in) throw IoError("missing world tensor " + name + " in " + dir);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::size_t c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
            if (c3 == std::string::npos) throw ParseError("bad world tensor row: " + line);
            const std::size_t s = std::stoul(line.substr(0, c1)) - 1;
            const std::size_t i = std::stoul(line.substr(c1 + 1, c2 - c1 - 1)) - 1;
            const std::size_t t = std::stoul(line.substr(c2 + 1, c3 - c2 - 1)) - 1;
            tensor.at(s, i, t) = std::stod(line.substr(c3 + 1));
        }
        return tensor;
    };
    world.gamma = load_tensor("gamma.csv");
    world.theta = load_tensor("theta.csv");
    return world;
}

}  // namespace cloze_debias::synth
