#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

// Token ids with a conditioning prefix that is never masked. Positions
// [0, prompt_len) are the prompt region; [prompt_len, N) the answer region.
struct TokenSequence {
    std::vector<int> ids;
    int prompt_len = 0;

    int size() const { return static_cast<int>(ids.size()); }
    int answer_len() const { return size() - prompt_len; }

    void validate(const VocabLayout& layout) const {
        if (prompt_len < 0 || prompt_len > size()) {
            throw std::invalid_argument("prompt_len outside sequence");
        }
        for (int i = 0; i < prompt_len; ++i) {
            if (ids[static_cast<std::size_t>(i)] == layout.mask_token_id) {
                throw std::invalid_argument("mask token in prompt region at position " +
                                            std::to_string(i));
            }
        }
    }

    int count_masked(const VocabLayout& layout) const {
        int n = 0;
        for (int id : ids) n += (id == layout.mask_token_id);
        return n;
    }

    bool operator==(const TokenSequence&) const = default;
};

// Strictly decreasing times t_0 = 1 > t_1 > ... > t_T = 0.
struct Schedule {
    std::vector<double> times;

    static Schedule linear(int steps) {
        if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
        Schedule s;
        s.times.resize(static_cast<std::size_t>(steps) + 1);
        for (int k = 0; k <= steps; ++k) {
            s.times[static_cast<std::size_t>(k)] =
                1.0 - static_cast<double>(k) / static_cast<double>(steps);
        }
        s.times.front() = 1.0;
        s.times.back() = 0.0;
        return s;
    }

    int steps() const { return static_cast<int>(times.size()) - 1; }
};

// Forward masking: each answer-region token is independently replaced by the

// mask token with probability t. One uniform draw per answer position, in
// position order, so the result depends only on (x0, t, rng key/counter).
inline TokenSequence forward_mask(const TokenSequence& x0, double t, const VocabLayout& layout,
                                  Rng& rng) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::invalid_argument("mask probability t=" + std::to_string(t) +
                                    " outside [0, 1]");
    }
    TokenSequence xt = x0;
    for (int i = x0.prompt_len; i < x0.size(); ++i) {
        if (rng.uniform() < t) xt.ids[static_cast<std::size_t>(i)] = layout.mask_token_id;
    }
    return xt;
}

// Reverse-transition distribution for one position.
struct TransitionRow {
    bool was_masked = false;
    int kept_token = -1;               // point mass when !was_masked
    double stay_masked = 0.0;          // s/t when masked
    std::vector<double> reveal;        // (t-s)/t * p(class) when masked

    double total() const {
        double sum = was_masked ? stay_masked : 1.0;
        for (double p : reveal) sum += p;
        return sum;
    }
};

// One reverse sampling step from time t to time s < t. Unmasked positions keep
// their token with probability 1; masked positions stay masked with probability
// s/t and reveal class v with probability (t-s)/t * p(v). predictor_probs holds
// one normalized distribution per masked position (rows for unmasked positions
// are ignored and may be empty).
inline std::vector<TransitionRow> reverse_transition(
    const TokenSequence& xt, double s, double t,
    const std::vector<std::vector<double>>& predictor_probs, const VocabLayout& layout) {
    if (!(s >= 0.0 && t <= 1.0 && s < t)) {
        throw std::invalid_argument("reverse transition requires 0 <= s < t <= 1, got s=" +
                                    std::to_string(s) + " t=" + std::to_string(t));
    }
    if (predictor_probs.size() != static_cast<std::size_t>(xt.size())) {
        throw std::invalid_argument("predictor_probs size mismatch");
    }
    std::vector<TransitionRow> rows(static_cast<std::size_t>(xt.size()));
    for (int i = 0; i < xt.size(); ++i) {
        auto& row = rows[static_cast<std::size_t>(i)];
        int id = xt.ids[static_cast<std::size_t>(i)];
        if (id != layout.mask_token_id) {
            row.was_masked = false;
            row.kept_token = id;
            continue;
        }
        const auto& p = predictor_probs[static_cast<std::size_t>(i)];
        if (p.empty()) {
            throw std::invalid_argument("missing predictor distribution at masked position " +
                                        std::to_string(i));
        }
        double sum = 0.0;
        for (double v : p) sum += v;
        if (std::abs(sum - 1.0) > 1e-9) {
            throw std::invalid_argument("predictor distribution not normalized at position " +
                                        std::to_string(i));
        }
        row.was_masked = true;
        row.stay_masked = s / t;
        row.reveal.resize(p.size());
        double reveal_frac = (t - s) / t;
        for (std::size_t v = 0; v < p.size(); ++v) row.reveal[v] = reveal_frac * p[v];
    }
    return rows;
}

enum class LossWeighting {
    inverse_time,  // mean CE over masked positions, scaled by 1/t
    plain_mean,    // mean CE over masked positions
};

// Cross-entropy over local classes, restricted to rows whose label is not the
// ignore sentinel. logits is row-major [n, classes]. Accumulates in double.
template <typename Scalar>
double masked_cross_entropy(const Scalar* logits, int n, int classes, const int* labels,
                            double t, LossWeighting weighting) {
    double total = 0.0;
    int counted = 0;
    for (int i = 0; i < n; ++i) {
        int label = labels[i];
        if (label == kIgnoreLabel) continue;
        if (label < 0 || label >= classes) {
            throw std::invalid_argument("label " + std::to_string(label) + " at row " +
                                        std::to_string(i) + " outside [0, classes)");
        }
        const Scalar* row = logits + static_cast<std::size_t>(i) * classes;
        double maxv = static_cast<double>(row[0]);
        for (int c = 1; c < classes; ++c) maxv = std::max(maxv, static_cast<double>(row[c]));
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c]) - maxv);
        total += std::log(denom) - (static_cast<double>(row[label]) - maxv);
        ++counted;
    }
    if (counted == 0) throw std::invalid_argument("masked_cross_entropy: empty mask set");
    double mean = total / counted;
    if (weighting == LossWeighting::inverse_time) {
        if (!(t > 0.0)) throw std::invalid_argument("inverse-time weighting requires t > 0");
        mean /= t;
    }
    return mean;
}

template <typename Scalar>
double masked_cross_entropy(const std::vector<Scalar>& logits, int classes,
                            const std::vector<int>& labels, double t, LossWeighting weighting) {
    int n = static_cast<int>(labels.size());
    if (logits.size() != static_cast<std::size_t>(n) * classes) {
        throw std::invalid_argument("logits/labels shape mismatch");
    }
    return masked_cross_entropy(logits.data(), n, classes, labels.data(), t, weighting);
}

}  // namespace diffact
