#include "cloze_debias/losses.hpp"

#include <algorithm>
#include <cmath>

namespace cloze_debias::losses {

TemporalPropensity TemporalPropensity::from_tensor(const Tensor3& theta) {
    TemporalPropensity p;
    p.seqs = theta.seqs;
    p.items = theta.items;
    p.steps = theta.steps;
    p.per_sequence = true;
    p.v = theta.v;
    return p;
}

TemporalPropensity TemporalPropensity::constant(std::size_t seqs, std::size_t items,
                                                std::size_t steps, double value) {
    TemporalPropensity p;
    p.seqs = seqs;
    p.items = items;
    p.steps = steps;
    p.per_sequence = false;
    p.v.assign(items * steps, value);
    return p;
}

StaticPropensity StaticPropensity::constant(std::size_t seqs, std::size_t items, double value) {
    StaticPropensity p;
    p.seqs = seqs;
    p.items = items;
    p.per_sequence = false;
    p.v.assign(items, value);
    return p;
}

void softmax_inplace(const double* logits, double* probs, std::size_t n) {
    double mx = logits[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = std::exp(logits[i] - mx);
        sum += probs[i];
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < n; ++i) probs[i] *= inv;
}

std::vector<double> softmax_over_items(const std::vector<double>& logit_row) {
    std::vector<double> probs(logit_row.size());
    softmax_inplace(logit_row.data(), probs.data(), logit_row.size());
    return probs;
}

namespace {

// log softmax(logits)[target], stable.
double log_softmax_at(const double* logits, std::size_t n, std::size_t target) {
    double mx = logits[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits[i] - mx);
    return logits[target] - mx - std::log(sum);
}

double normalizer_value(const LossDims& dims, Normalizer norm, std::size_t term_count) {
    if (norm == Normalizer::MaskedCount)
        return term_count > 0 ? static_cast<double>(term_count) : 1.0;
    return static_cast<double>(dims.seqs) * static_cast<double>(dims.items) *
           static_cast<double>(dims.steps);
}

void check_term(const WeightedTerm& term) {
    if (!(term.weight >= 0.0) || !std::isfinite(term.weight))
        throw ArgumentError("loss term weight must be finite and >= 0");
}

}  // namespace

std::vector<WeightedTerm> cloze_terms(const GridU8& mask, const InteractionTensor& y) {
    std::vector<WeightedTerm> terms;
    for (std::size_t s = 0; s < mask.rows; ++s)
        for (std::size_t t = 0; t < mask.cols; ++t)
            if (mask.at(s, t) && y.items.at(s, t) != 0)
                terms.push_back({s, t, y.items.at(s, t), 1.0});
    return terms;
}

std::vector<WeightedTerm> ideal_terms(const GridU8& mask, const ChoiceTensor& c, const Tensor3& gamma) {
    std::vector<WeightedTerm> terms;
    for (std::size_t s = 0; s < mask.rows; ++s)
        for (std::size_t t = 0; t < mask.cols; ++t) {
            const std::int32_t item = c.items.at(s, t);
            if (mask.at(s, t) && item != 0)
                terms.push_back({s, t, item, gamma.at(s, static_cast<std::size_t>(item - 1), t)});
        }
    return terms;
}

std::vector<WeightedTerm> ips_terms(const GridU8& mask, const InteractionTensor& y,
                                    const StaticPropensity& theta) {
    std::vector<WeightedTerm> terms;
    for (std::size_t s = 0; s < mask.rows; ++s)
        for (std::size_t t = 0; t < mask.cols; ++t) {
            const std::int32_t item = y.items.at(s, t);
            if (!mask.at(s, t) || item == 0) continue;
            const double th = theta.at(s, static_cast<std::size_t>(item - 1));
            if (!(th > 0.0))
                throw PropensityDomainError("ips_loss: zero propensity at interacted entry; smooth first");
            terms.push_back({s, t, item, 1.0 / th});
        }
    return terms;
}

std::vector<WeightedTerm> itps_terms(const GridU8& mask, const InteractionTensor& y,
                                     const TemporalPropensity& theta) {
    std::vector<WeightedTerm> terms;
    for (std::size_t s = 0; s < mask.rows; ++s)
        for (std::size_t t = 0; t < mask.cols; ++t) {
            const std::int32_t item = y.items.at(s, t);
            if (!mask.at(s, t) || item == 0) continue;
            const double th = theta.at(s, static_cast<std::size_t>(item - 1), t);
            if (!(th > 0.0))
                throw PropensityDomainError("itps_loss: zero temporal propensity at interacted entry; smooth first");
            terms.push_back({s, t, item, 1.0 / th});
        }
    return terms;
}

double weighted_loss(const LogitTensor& logits, const std::vector<WeightedTerm>& terms,
                     const LossDims& dims, Normalizer norm) {
    double acc = 0.0;
    for (const auto& term : terms) {
        check_term(term);
        acc -= term.weight * log_softmax_at(logits.row(term.row, term.step), logits.items,
                                            static_cast<std::size_t>(term.item - 1));
    }
    return acc / normalizer_value(dims, norm, terms.size());
}

LogitTensor loss_grad_wrt_logits(const LogitTensor& logits, const std::vector<WeightedTerm>& terms,
                                 const LossDims& dims, Normalizer norm) {
    LogitTensor grad(logits.rows, logits.steps, logits.items, 0.0);
    const double inv_n = 1.0 / normalizer_value(dims, norm, terms.size());
    std::vector<double> probs(logits.items);
    for (const auto& term : terms) {
        check_term(term);
        softmax_inplace(logits.row(term.row, term.step), probs.data(), logits.items);
        double* g = grad.row(term.row, term.step);
        const double scale = term.weight * inv_n;
        for (std::size_t i = 0; i < logits.items; ++i) g[i] += scale * probs[i];
        g[term.item - 1] -= scale;
    }
    return grad;
}

double cloze_loss(const LogitTensor& logits, const GridU8& mask, const InteractionTensor& y,
                  const LossDims& dims, Normalizer norm) {
    return weighted_loss(logits, cloze_terms(mask, y), dims, norm);
}

double ideal_loss(const LogitTensor& logits, const GridU8& mask, const ChoiceTensor& c,
                  const Tensor3& gamma, const LossDims& dims, Normalizer norm) {
    return weighted_loss(logits, ideal_terms(mask, c, gamma), dims, norm);
}

double ips_loss(const LogitTensor& logits, const GridU8& mask, const InteractionTensor& y,
                const StaticPropensity& theta, const LossDims& dims, Normalizer norm) {
    return weighted_loss(logits, ips_terms(mask, y, theta), dims, norm);
}

double itps_loss(const LogitTensor& logits, const GridU8& mask, const InteractionTensor& y,
                 const TemporalPropensity& theta, const LossDims& dims, Normalizer norm) {
    return weighted_loss(logits, itps_terms(mask, y, theta), dims, norm);
}

}  // namespace cloze_debias::losses
