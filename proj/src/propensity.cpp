#include "cloze_debias/propensity.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace cloze_debias::propensity {

losses::TemporalPropensity PropensityTable::temporal_view(std::size_t seqs) const {
    losses::TemporalPropensity p;
    p.seqs = seqs;
    p.items = items;
    p.steps = steps;
    p.per_sequence = false;
    p.v = temporal.v;
    return p;
}

losses::StaticPropensity PropensityTable::static_view(std::size_t seqs) const {
    losses::StaticPropensity p;
    p.seqs = seqs;
    p.items = items;
    p.per_sequence = false;
    p.v = static_;
    return p;
}

PropensityTable estimate_temporal_popularity(const data::SequenceDataset& dataset) {
    if (dataset.size() == 0) throw ArgumentError("estimate_temporal_popularity: empty dataset");
    PropensityTable table;
    table.items = static_cast<std::size_t>(dataset.item_count);
    table.steps = dataset.steps;
    table.temporal = GridD(table.items, table.steps, 0.0);
    table.static_.assign(table.items, 0.0);

    std::size_t total = 0;
    for (std::size_t r = 0; r < dataset.size(); ++r) {
        for (std::size_t t = 0; t < dataset.steps; ++t) {
            const std::int32_t tok = dataset.tokens.at(r, t);
            if (tok == 0) continue;
            table.temporal.at(static_cast<std::size_t>(tok - 1), t) += 1.0;
            ++total;
        }
    }
    if (total > 0) {
        const double inv = 1.0 / static_cast<double>(total);
        for (double& x : table.temporal.v) x *= inv;
    }
    return table;
}

PropensityTable static_from_temporal_sum(PropensityTable table) {
    table.static_.assign(table.items, 0.0);
    for (std::size_t i = 0; i < table.items; ++i) {
        double sum = 0.0;
        for (std::size_t t = 0; t < table.steps; ++t) sum += table.temporal.at(i, t);
        table.static_[i] = sum;
    }
    return table;
}

losses::StaticPropensity static_from_temporal_avg(const Tensor3& theta) {
    losses::StaticPropensity p;
    p.seqs = theta.seqs;
    p.items = theta.items;
    p.per_sequence = true;
    p.v.assign(theta.seqs * theta.items, 0.0);
    for (std::size_t s = 0; s < theta.seqs; ++s)
        for (std::size_t i = 0; i < theta.items; ++i) {
            double sum = 0.0;
            for (std::size_t t = 0; t < theta.steps; ++t) sum += theta.at(s, i, t);
            p.v[s * theta.items + i] = sum / static_cast<double>(theta.steps);
        }
    return p;
}

PropensityTable smooth_and_clip(PropensityTable table, double eps) {
    if (!(eps > 0.0) || eps > 0.1)
        throw ArgumentError("smooth_and_clip: eps must be in (0, 0.1]");
    for (double& x : table.temporal.v) x = std::max(x, eps);
    for (double& x : table.static_) x = std::max(x, eps);
    table.eps = eps;
    return table;
}

void export_csv(const PropensityTable& table, const std::string& dir, const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream out(fs::path(dir) / (stem + "_temporal.csv"), std::ios::binary);
        out << "item,timestep,theta\n";
        for (std::size_t i = 0; i < table.items; ++i)
            for (std::size_t t = 0; t < table.steps; ++t)
                out << (i + 1) << ',' << (t + 1) << ',' << format_double(table.temporal.at(i, t))
                    << '\n';
    }
    {
        std::ofstream out(fs::path(dir) / (stem + "_static.csv"), std::ios::binary);
        out << "item,theta_static\n";
        for (std::size_t i = 0; i < table.items; ++i)
            out << (i + 1) << ',' << format_double(table.static_[i]) << '\n';
    }
}

PropensityTable import_csv(const std::string& dir, const std::string& stem) {
    namespace fs = std::filesystem;
    PropensityTable table;

    const auto temporal_path = fs::path(dir) / (stem + "_temporal.csv");
    std::ifstream in(temporal_path);
    if (!in) throw IoError("missing propensity file: " + temporal_path.string());
    std::string line;
    std::getline(in, line);
    struct Entry {
        std::size_t item, step;
        double theta;
    };
    std::vector<Entry> entries;
    std::size_t max_item = 0, max_step = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t c1 = line.find(','), c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw ParseError("bad propensity row: " + line);
        Entry e{std::stoul(line.substr(0, c1)), std::stoul(line.substr(c1 + 1, c2 - c1 - 1)),
                std::stod(line.substr(c2 + 1))};
        max_item = std::max(max_item, e.item);
        max_step = std::max(max_step, e.step);
        entries.push_back(e);
    }
    table.items = max_item;
    table.steps = max_step;
    table.temporal = GridD(table.items, table.steps, 0.0);
    for (const auto& e : entries) table.temporal.at(e.item - 1, e.step - 1) = e.theta;

    table.static_.assign(table.items, 0.0);
    const auto static_path = fs::path(dir) / (stem + "_static.csv");
    std::ifstream sin(static_path);
    if (!sin) throw IoError("missing propensity file: " + static_path.string());
    std::getline(sin, line);
    while (std::getline(sin, line)) {
        if (line.empty()) continue;
        const std::size_t c1 = line.find(',');
        if (c1 == std::string::npos) throw ParseError("bad static propensity row: " + line);
        const std::size_t item = std::stoul(line.substr(0, c1));
        if (item < 1 || item > table.items) throw ParseError("static propensity item out of range");
        table.static_[item - 1] = std::stod(line.substr(c1 + 1));
    }
    return table;
}

}  // namespace cloze_debias::propensity
