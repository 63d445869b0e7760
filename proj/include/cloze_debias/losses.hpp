#pragma once

#include <cstdint>
#include <vector>

#include "cloze_debias/common.hpp"

namespace cloze_debias::losses {

// Interactions Y_{s,i,t}, stored sparsely: at most one interacted item per
// (sequence, timestep), 0 where there is none. A MaskedBatch's labels grid
// is exactly this shape.
struct InteractionTensor {
    GridI items;  // rows x steps -> item id or 0
};

// One-hot choice outcome per (sequence, timestep), same storage.
struct ChoiceTensor {
    GridI items;
};

// theta_{s,i,t} in (0,1]; broadcast over sequences when per_sequence is
// false (the popularity estimator is sequence-independent).
struct TemporalPropensity {
    std::size_t seqs = 0, items = 0, steps = 0;
    bool per_sequence = false;
    std::vector<double> v;  // (s,i,t) dense or (i,t)

    double at(std::size_t s, std::size_t i, std::size_t t) const {
        return per_sequence ? v[(s * items + i) * steps + t] : v[i * steps + t];
    }
    static TemporalPropensity from_tensor(const Tensor3& theta);
    static TemporalPropensity constant(std::size_t seqs, std::size_t items, std::size_t steps, double value);
};

// theta_{s,i}; same broadcast convention.
struct StaticPropensity {
    std::size_t seqs = 0, items = 0;
    bool per_sequence = false;
    std::vector<double> v;

    double at(std::size_t s, std::size_t i) const {
        return per_sequence ? v[s * items + i] : v[i];
    }
    static StaticPropensity constant(std::size_t seqs, std::size_t items, double value);
};

// Scores f(S^m_{s,t}, I_i) over real items only; (row, step, item) row-major
// with item index 0 meaning dense item 1.
struct LogitTensor {
    std::size_t rows = 0, steps = 0, items = 0;
    std::vector<double> v;

    LogitTensor() = default;
    LogitTensor(std::size_t r, std::size_t t, std::size_t i, double fill = 0.0)
        : rows(r), steps(t), items(i), v(r * t * i, fill) {}

    double& at(std::size_t r, std::size_t t, std::size_t i) { return v[(r * steps + t) * items + i]; }
    double at(std::size_t r, std::size_t t, std::size_t i) const { return v[(r * steps + t) * items + i]; }
    const double* row(std::size_t r, std::size_t t) const { return v.data() + (r * steps + t) * items; }
    double* row(std::size_t r, std::size_t t) { return v.data() + (r * steps + t) * items; }
};

// Normalizer for the sum over masked terms. FullDims is the 1/(|S||I|T) of
// the estimator definitions and is what the verification math requires;
// MaskedCount divides by the number of masked terms instead (a pure
// positive rescaling used for encoder training).
enum class Normalizer { FullDims, MaskedCount };

struct LossDims {
    std::size_t seqs = 0, items = 0, steps = 0;
};

// Numerically stable softmax (max subtraction).
std::vector<double> softmax_over_items(const std::vector<double>& logit_row);
void softmax_inplace(const double* logits, double* probs, std::size_t n);

// A masked (row, step) with its target item and propensity/relevance weight.
// All four estimators reduce to a weighted sum of -log softmax terms.
struct WeightedTerm {
    std::size_t row = 0, step = 0;
    std::int32_t item = 0;  // dense item id in [1, |I|]
    double weight = 1.0;
};

std::vector<WeightedTerm> cloze_terms(const GridU8& mask, const InteractionTensor& y);
std::vector<WeightedTerm> ideal_terms(const GridU8& mask, const ChoiceTensor& c, const Tensor3& gamma);
std::vector<WeightedTerm> ips_terms(const GridU8& mask, const InteractionTensor& y,
                                    const StaticPropensity& theta);
std::vector<WeightedTerm> itps_terms(const GridU8& mask, const InteractionTensor& y,
                                     const TemporalPropensity& theta);

double weighted_loss(const LogitTensor& logits, const std::vector<WeightedTerm>& terms,
                     const LossDims& dims, Normalizer norm = Normalizer::FullDims);

// d(loss)/d(logits): -(w / N) * (onehot(target) - softmax) at each term's
// (row, step), zero elsewhere.
LogitTensor loss_grad_wrt_logits(const LogitTensor& logits, const std::vector<WeightedTerm>& terms,
                                 const LossDims& dims, Normalizer norm = Normalizer::FullDims);

double cloze_loss(const LogitTensor& logits, const GridU8& mask, const InteractionTensor& y,
                  const LossDims& dims, Normalizer norm = Normalizer::FullDims);
double ideal_loss(const LogitTensor& logits, const GridU8& mask, const ChoiceTensor& c,
                  const Tensor3& gamma, const LossDims& dims, Normalizer norm = Normalizer::FullDims);
double ips_loss(const LogitTensor& logits, const GridU8& mask, const InteractionTensor& y,
                const StaticPropensity& theta, const LossDims& dims,
                Normalizer norm = Normalizer::FullDims);
double itps_loss(const LogitTensor& logits, const GridU8& mask, const InteractionTensor& y,
                 const TemporalPropensity& theta, const LossDims& dims,
                 Normalizer norm = Normalizer::FullDims);

}  // namespace cloze_debias::losses
