#include "cloze_debias/data.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cloze_debias::data {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::int64_t parse_int(const std::string& s, const std::string& origin, std::size_t line_no) {
    std::int64_t value = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw ParseError(origin + ":" + std::to_string(line_no) + ": bad integer field '" + s + "'");
    return value;
}

double parse_real(const std::string& s, const std::string& origin, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double value = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return value;
    } catch (const std::exception&) {
        throw ParseError(origin + ":" + std::to_string(line_no) + ": bad numeric field '" + s + "'");
    }
}

}  // namespace

std::vector<InteractionRecord> parse_tsv_records(const std::string& text, const std::string& origin) {
    std::vector<InteractionRecord> records;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 4)
            throw ParseError(origin + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                             std::to_string(fields.size()));
        InteractionRecord rec;
        rec.sequence_id = parse_int(fields[0], origin, line_no);
        rec.item_id = fields[1];
        rec.rating = parse_real(fields[2], origin, line_no);
        rec.timestamp = parse_int(fields[3], origin, line_no);
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<InteractionRecord> ingest_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open interaction log: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_tsv_records(buf.str(), path);
}

std::size_t SequenceDataset::real_item_count(std::size_t row) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < steps; ++t)
        if (tokens.at(row, t) != 0) ++n;
    return n;
}

std::pair<SequenceDataset, Vocabulary> build_sequences(
    const std::vector<InteractionRecord>& records, std::size_t steps) {
    if (steps < 1) throw ArgumentError("build_sequences: T must be >= 1");
    if (records.empty()) throw ArgumentError("build_sequences: no records");

    Vocabulary vocab;
    vocab.dense_to_raw.push_back("");  // dense id 0 = padding
    for (const auto& rec : records) {
        if (vocab.raw_to_dense.emplace(rec.item_id, vocab.item_count + 1).second) {
            ++vocab.item_count;
            vocab.dense_to_raw.push_back(rec.item_id);
        }
    }

    // Group preserving input order within a sequence, rows sorted by id.
    std::map<std::int64_t, std::vector<std::size_t>> by_sequence;
    for (std::size_t idx = 0; idx < records.size(); ++idx)
        by_sequence[records[idx].sequence_id].push_back(idx);

    SequenceDataset ds;
    ds.steps = steps;
    ds.item_count = vocab.item_count;
    ds.tokens = GridI(by_sequence.size(), steps, 0);
    ds.origin_steps = GridI(by_sequence.size(), steps, -1);

    std::size_t row = 0;
    for (auto& [seq_id, idxs] : by_sequence) {
        std::stable_sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
            return records[a].timestamp < records[b].timestamp;
        });
        const std::size_t keep = std::min(steps, idxs.size());
        const std::size_t offset = steps - keep;
        const std::size_t drop = idxs.size() - keep;
        for (std::size_t k = 0; k < keep; ++k) {
            ds.tokens.at(row, offset + k) = vocab.raw_to_dense.at(records[idxs[drop + k]].item_id);
            ds.origin_steps.at(row, offset + k) = static_cast<std::int32_t>(offset + k);
        }
        ds.sequence_ids.push_back(seq_id);
        ++row;
    }
    return {std::move(ds), std::move(vocab)};
}

MaskedBatch apply_cloze_mask(const SequenceDataset& dataset, double rho, std::uint64_t seed) {
    if (!(rho > 0.0) || rho > 1.0)
        throw ArgumentError("apply_cloze_mask: rho must be in (0, 1]");

    const std::size_t rows = dataset.size();
    const std::size_t steps = dataset.steps;
    MaskedBatch batch;
    batch.steps = steps;
    batch.item_count = dataset.item_count;
    batch.tokens = dataset.tokens;
    batch.mask_indicator = GridU8(rows, steps, 0);
    batch.labels = GridI(rows, steps, 0);
    batch.source_rows.resize(rows);

    const std::int32_t mask_tok = dataset.mask_token();
    const Rng master(seed);
    for (std::size_t r = 0; r < rows; ++r) {
        batch.source_rows[r] = r;
        Rng rng = master.substream(r);
        std::vector<std::size_t> real_positions;
        std::size_t masked = 0;
        for (std::size_t t = 0; t < steps; ++t) {
            const std::int32_t tok = dataset.tokens.at(r, t);
            if (tok == 0) continue;
            real_positions.push_back(t);
            if (rng.bernoulli(rho)) {
                batch.tokens.at(r, t) = mask_tok;
                batch.mask_indicator.at(r, t) = 1;
                batch.labels.at(r, t) = tok;
                ++masked;
            }
        }
        if (masked == 0 && !real_positions.empty()) {
            const std::size_t t = real_positions[rng.uniform_index(real_positions.size())];
            batch.labels.at(r, t) = batch.tokens.at(r, t);
            batch.tokens.at(r, t) = mask_tok;
            batch.mask_indicator.at(r, t) = 1;
        }
    }
    return batch;
}

MaskedBatch gather_rows(const MaskedBatch& batch, const std::vector<std::size_t>& rows) {
    MaskedBatch out;
    out.steps = batch.steps;
    out.item_count = batch.item_count;
    out.tokens = GridI(rows.size(), batch.steps);
    out.mask_indicator = GridU8(rows.size(), batch.steps);
    out.labels = GridI(rows.size(), batch.steps);
    out.source_rows.resize(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t r = rows[k];
        out.source_rows[k] = batch.source_rows[r];
        for (std::size_t t = 0; t < batch.steps; ++t) {
            out.tokens.at(k, t) = batch.tokens.at(r, t);
            out.mask_indicator.at(k, t) = batch.mask_indicator.at(r, t);
            out.labels.at(k, t) = batch.labels.at(r, t);
        }
    }
    return out;
}

std::pair<std::vector<std::int32_t>, std::size_t> append_inference_mask(
    const std::vector<std::int32_t>& row, std::int32_t mask_token) {
    std::vector<std::int32_t> out(row.size());
    for (std::size_t t = 0; t + 1 < row.size(); ++t) out[t] = row[t + 1];
    out.back() = mask_token;
    return {std::move(out), row.size() - 1};
}

DatasetSummary summarize(const SequenceDataset& dataset) {
    DatasetSummary s;
    s.sequences = dataset.size();
    s.items = static_cast<std::size_t>(dataset.item_count);
    for (std::size_t r = 0; r < dataset.size(); ++r)
        s.interactions += dataset.real_item_count(r);
    s.avg_length = s.sequences ? static_cast<double>(s.interactions) / s.sequences : 0.0;
    const double cells = static_cast<double>(s.sequences) * static_cast<double>(s.items);
    s.sparsity = cells > 0 ? 1.0 - static_cast<double>(s.interactions) / cells : 0.0;
    return s;
}

void dump_dataset_csv(const SequenceDataset& dataset, const std::string& dir,
                      const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream out(fs::path(dir) / (stem + ".csv"), std::ios::binary);
        out << "sequence,position,token\n";
        for (std::size_t r = 0; r < dataset.size(); ++r)
            for (std::size_t t = 0; t < dataset.steps; ++t)
                out << dataset.sequence_ids[r] << ',' << (t + 1) << ','
                    << dataset.tokens.at(r, t) << '\n';
    }
    {
        std::ofstream out(fs::path(dir) / (stem + "_origins.csv"), std::ios::binary);
        out << "sequence,position,origin_step\n";
        for (std::size_t r = 0; r < dataset.size(); ++r)
            for (std::size_t t = 0; t < dataset.steps; ++t)
                out << dataset.sequence_ids[r] << ',' << (t + 1) << ','
                    << (dataset.origin_steps.at(r, t) < 0 ? 0 : dataset.origin_steps.at(r, t) + 1)
                    << '\n';
    }
    nlohmann::json meta{{"sequences", dataset.size()},
                        {"steps", dataset.steps},
                        {"item_count", dataset.item_count}};
    std::ofstream out(fs::path(dir) / (stem + "_meta.json"), std::ios::binary);
    out << meta.dump(2) << '\n';
}

SequenceDataset load_dataset_csv(const std::string& dir, const std::string& stem) {
    namespace fs = std::filesystem;
    const auto meta_path = fs::path(dir) / (stem + "_meta.json");
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw IoError("missing dataset meta: " + meta_path.string());
    nlohmann::json meta = nlohmann::json::parse(meta_in);

    SequenceDataset ds;
    ds.steps = meta.at("steps").get<std::size_t>();
    ds.item_count = meta.at("item_count").get<std::int32_t>();
    const std::size_t rows = meta.at("sequences").get<std::size_t>();
    ds.tokens = GridI(rows, ds.steps, 0);
    ds.origin_steps = GridI(rows, ds.steps, -1);
    ds.sequence_ids.reserve(rows);

    auto read_triples = [&](const std::string& name, auto&& sink) {
        const auto path = fs::path(dir) / name;
        std::ifstream in(path);
        if (!in) throw IoError("missing dataset file: " + path.string());
        std::string line;
        std::getline(in, line);  // header
        std::size_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto f = split(line, ',');
            if (f.size() != 3)
                throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
            sink(parse_int(f[0], name, line_no), parse_int(f[1], name, line_no),
                 parse_int(f[2], name, line_no));
        }
    };

    std::map<std::int64_t, std::size_t> row_of;
    read_triples(stem + ".csv", [&](std::int64_t seq, std::int64_t pos, std::int64_t tok) {
        auto [it, inserted] = row_of.emplace(seq, row_of.size());
        if (inserted) ds.sequence_ids.push_back(seq);
        ds.tokens.at(it->second, static_cast<std::size_t>(pos - 1)) = static_cast<std::int32_t>(tok);
    });
    if (row_of.size() != rows) throw ParseError("dataset row count does not match meta");

    const auto origins = fs::path(dir) / (stem + "_origins.csv");
    if (fs::exists(origins)) {
        read_triples(stem + "_origins.csv", [&](std::int64_t seq, std::int64_t pos, std::int64_t origin) {
            ds.origin_steps.at(row_of.at(seq), static_cast<std::size_t>(pos - 1)) =
                static_cast<std::int32_t>(origin - 1);
        });
    }
    return ds;
}

}  // namespace cloze_debias::data
