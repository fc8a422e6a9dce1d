#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffact/diffusion.hpp"
#include "diffact/linalg.hpp"
#include "diffact/model.hpp"
#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

enum class DecodeStrategy { vanilla, hierarchical };
enum class SelectionMode { greedy, sample };
enum class FocusMode { consecutive, re_argmax };
enum class ConfidenceSource { softmax_prob, raw_logit };
enum class ActionScoreMode { masked_only, all_tokens };

struct DecodeConfig {
    int total_steps = 10;
    int iters_per_action = 2;
    DecodeStrategy strategy = DecodeStrategy::vanilla;
    SelectionMode selection = SelectionMode::greedy;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    FocusMode focus_mode = FocusMode::consecutive;
    ConfidenceSource confidence = ConfidenceSource::softmax_prob;
    ActionScoreMode action_score = ActionScoreMode::masked_only;

    void validate(int k_chunk) const {
        if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
        if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
        if (strategy == DecodeStrategy::hierarchical) {
            if (iters_per_action < 1) {
                throw std::invalid_argument("iters_per_action must be >= 1");
            }
            if (total_steps != k_chunk * iters_per_action) {
                throw std::invalid_argument(
                    "hierarchical decoding requires total_steps = K * iters_per_action, got " +
                    std::to_string(total_steps) + " != " + std::to_string(k_chunk) + " * " +
                    std::to_string(iters_per_action));
            }
        }
    }
};

// Per-token confidences over the K x D answer grid plus derived action scores.
struct ConfidenceMatrix {
    int k = 0;
    int d = 0;
    std::vector<double> values;         // k*d, row-major (action-major)
    std::vector<double> action_scores;  // k
    std::vector<char> finalized;        // k

    static ConfidenceMatrix zeros(int k_chunk, int dims) {
        ConfidenceMatrix m;
        m.k = k_chunk;
        m.d = dims;
        m.values.assign(static_cast<std::size_t>(k_chunk) * dims, 0.0);
        m.action_scores.assign(static_cast<std::size_t>(k_chunk), 0.0);
        m.finalized.assign(static_cast<std::size_t>(k_chunk), 0);
        return m;
    }

    // Action score = sum of token confidences over the counted positions.
    void recompute_action_scores(const std::vector<char>& counted) {
        if (counted.size() != values.size()) {
            throw std::invalid_argument("counted mask size mismatch");
        }
        for (int i = 0; i < k; ++i) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) {
                std::size_t p = static_cast<std::size_t>(i) * d + j;
                if (counted[p]) s += values[p];
            }
            action_scores[static_cast<std::size_t>(i)] = s;
        }
    }
};

// One decoding step for offline inspection. Positions are flat answer indices
// p in [0, K*D); action i = p / D, token j = p % D.
struct DecodeStepRecord {
    int step = 0;
    int focus_action = -1;  // -1: no focus (vanilla)
    std::vector<int> revealed;
    std::vector<int> remasked;
    std::vector<double> confidence;  // snapshot, K*D
    std::vector<int> tokens;         // grid after the step, K*D
};

struct DecodeTrace {
    int k = 0;
    int d = 0;
    std::vector<DecodeStepRecord> steps;
};

inline void to_json(nlohmann::json& j, const DecodeStepRecord& s) {
    j = nlohmann::json{{"step", s.step},         {"focus_action", s.focus_action},
                       {"revealed", s.revealed}, {"remasked", s.remasked},
                       {"confidence", s.confidence}, {"tokens", s.tokens}};
}

inline void from_json(const nlohmann::json& j, DecodeStepRecord& s) {
    j.at("step").get_to(s.step);
    j.at("focus_action").get_to(s.focus_action);
    j.at("revealed").get_to(s.revealed);
    j.at("remasked").get_to(s.remasked);
    j.at("confidence").get_to(s.confidence);
    j.at("tokens").get_to(s.tokens);
}

struct DecodeResult {
    std::vector<int> tokens;  // final answer grid, K*D, all in S
    DecodeTrace trace;
};

// Proposal + confidence for every answer position of a partially masked
// sequence. Unmasked positions keep their token with confidence 1.
struct PredictOutcome {
    std::vector<int> proposals;      // K*D token ids
    std::vector<double> confidence;  // K*D
};

template <typename ModelT>
PredictOutcome predict_with_confidence(const ModelT& model, const TokenSequence& xt,
                                       const ConditioningInput& cond, const VocabLayout& layout,
                                       const DecodeConfig& cfg, Rng& rng) {
    const int n_answer = xt.answer_len();
    const std::vector<double> logits = model.forward_logits(xt, cond);
    const int classes = static_cast<int>(logits.size()) / xt.size();
    if (static_cast<std::size_t>(classes) * xt.size() != logits.size()) {
        throw std::invalid_argument("model logits are not rectangular");
    }

    PredictOutcome out;
    out.proposals.resize(static_cast<std::size_t>(n_answer));
    out.confidence.resize(static_cast<std::size_t>(n_answer));
    for (int p = 0; p < n_answer; ++p) {
        const int pos = xt.prompt_len + p;
        const int cur = xt.ids[static_cast<std::size_t>(pos)];
        if (cur != layout.mask_token_id) {
            out.proposals[static_cast<std::size_t>(p)] = cur;
            out.confidence[static_cast<std::size_t>(p)] = 1.0;
            continue;
        }
        const double* row = logits.data() + static_cast<std::size_t>(pos) * classes;
        int chosen;
        if (cfg.selection == SelectionMode::greedy) {
            chosen = 0;
            for (int c = 1; c < classes; ++c) {
                if (row[c] > row[chosen]) chosen = c;  // ties stay at the lowest class
            }
        } else {
            std::vector<double> tempered(static_cast<std::size_t>(classes));
            for (int c = 0; c < classes; ++c) {
                tempered[static_cast<std::size_t>(c)] = row[c] / cfg.temperature;
            }
            std::vector<double> probs = softmax_row_double(tempered.data(), classes);
            double u = rng.uniform();
            double acc = 0.0;
            chosen = classes - 1;
            for (int c = 0; c < classes; ++c) {
                acc += probs[static_cast<std::size_t>(c)];
                if (u < acc) {
                    chosen = c;
                    break;
                }
            }
        }
        double conf;
        if (cfg.confidence == ConfidenceSource::raw_logit) {
            conf = row[chosen];
        } else if (cfg.selection == SelectionMode::sample) {
            std::vector<double> tempered(static_cast<std::size_t>(classes));
            for (int c = 0; c < classes; ++c) {
                tempered[static_cast<std::size_t>(c)] = row[c] / cfg.temperature;
            }
            conf = softmax_row_double(tempered.data(), classes)[static_cast<std::size_t>(chosen)];
        } else {
            conf = softmax_row_double(row, classes)[static_cast<std::size_t>(chosen)];
        }
        out.proposals[static_cast<std::size_t>(p)] = layout.unmap_local(chosen);
        out.confidence[static_cast<std::size_t>(p)] = conf;
    }
    return out;
}

namespace detail {

// Highest-confidence `quota` positions among candidates; exact ties break
// toward the lowest flat index.
inline std::vector<int> top_by_confidence(const std::vector<int>& candidates,
                                          const std::vector<double>& confidence, int quota) {
    std::vector<int> sorted = candidates;
    std::sort(sorted.begin(), sorted.end(), [&](int a, int b) {
        double ca = confidence[static_cast<std::size_t>(a)];
        double cb = confidence[static_cast<std::size_t>(b)];
        if (ca != cb) return ca > cb;
        return a < b;
    });
    if (quota < static_cast<int>(sorted.size())) {
        sorted.resize(static_cast<std::size_t>(quota));
    }
    std::sort(sorted.begin(), sorted.end());
    return sorted;
}

inline std::vector<int> masked_positions(const TokenSequence& xt, const VocabLayout& layout) {
    std::vector<int> out;
    for (int p = 0; p < xt.answer_len(); ++p) {
        if (xt.ids[static_cast<std::size_t>(xt.prompt_len + p)] == layout.mask_token_id) {
            out.push_back(p);
        }
    }
    return out;
}

inline DecodeStepRecord snapshot_step(int step, int focus, std::vector<int> revealed,
                                      std::vector<int> remasked,
                                      const std::vector<double>& confidence,
                                      const TokenSequence& xt) {
    DecodeStepRecord rec;
    rec.step = step;
    rec.focus_action = focus;
    rec.revealed = std::move(revealed);
    rec.remasked = std::move(remasked);
    rec.confidence = confidence;
    rec.tokens.assign(xt.ids.begin() + xt.prompt_len, xt.ids.end());
    return rec;
}

}  // namespace detail

// Low-confidence remasking decoder: every step predicts all masked positions
// and keeps the highest-confidence ones so that the cumulative revealed count
// follows round(K*D * (1 - t_{k+1})) on the linear schedule. Revealed tokens
// are never remasked again.
template <typename ModelT>
DecodeResult vanilla_decode(const ModelT& model, const TokenSequence& prompt,
                            const ConditioningInput& cond, const VocabLayout& layout, int k_chunk,
                            const DecodeConfig& cfg, int dims = kActionDims) {
    cfg.validate(k_chunk);
    const int total = k_chunk * dims;
    Rng decode_rng = Rng::substream(cfg.seed, "decode");

    TokenSequence xt = prompt;
    xt.validate(layout);
    xt.ids.insert(xt.ids.end(), static_cast<std::size_t>(total), layout.mask_token_id);

    DecodeResult result;
    result.trace.k = k_chunk;
    result.trace.d = dims;

    for (int step = 0; step < cfg.total_steps; ++step) {
        // Cumulative reveal target round(K*D * (1 - t_{k+1})) on the linear
        // schedule, i.e. round(K*D * (k+1) / T). Multiply in integers first:
        // forming 1 - t_{k+1} in floating point loses the exact .5 halves
        // (round(35 * 0.1) must give 4, not round(3.4999...) = 3).
        const long long cum = static_cast<long long>(total) * (step + 1);
        const int target_revealed =
            static_cast<int>(std::llround(static_cast<double>(cum) / cfg.total_steps));
        std::vector<int> masked = detail::masked_positions(xt, layout);
        const int already = total - static_cast<int>(masked.size());
        const int quota = std::max(0, target_revealed - already);

        if (masked.empty()) {
            result.trace.steps.push_back(detail::snapshot_step(
                step, -1, {}, {}, std::vector<double>(static_cast<std::size_t>(total), 1.0), xt));
            continue;
        }

        Rng step_rng = decode_rng.fork(static_cast<std::uint64_t>(step));
        PredictOutcome pred = predict_with_confidence(model, xt, cond, layout, cfg, step_rng);

        std::vector<int> revealed = detail::top_by_confidence(masked, pred.confidence, quota);
        for (int p : revealed) {
            xt.ids[static_cast<std::size_t>(xt.prompt_len + p)] =
                pred.proposals[static_cast<std::size_t>(p)];
        }
        std::vector<int> remasked;
        for (int p : masked) {
            if (!std::binary_search(revealed.begin(), revealed.end(), p)) remasked.push_back(p);
        }
        result.trace.steps.push_back(detail::snapshot_step(step, -1, std::move(revealed),
                                                           std::move(remasked), pred.confidence,
                                                           xt));
    }

    result.tokens.assign(xt.ids.begin() + xt.prompt_len, xt.ids.end());
    for (int id : result.tokens) {
        if (!layout.is_special(id)) {
            throw std::logic_error("vanilla decode left a non-action token in the answer");
        }
    }
    return result;
}

// Action-structured decoder: pick a focus action by summed token confidence,
// reveal its tokens over iters_per_action visits with a ceil quota, remask
// everything else that is not finalized.
template <typename ModelT>
DecodeResult hierarchical_decode(const ModelT& model, const TokenSequence& prompt,
                                 const ConditioningInput& cond, const VocabLayout& layout,
                                 int k_chunk, const DecodeConfig& cfg, int dims = kActionDims) {
    cfg.validate(k_chunk);
    const int d = dims;
    const int total = k_chunk * d;
    Rng decode_rng = Rng::substream(cfg.seed, "decode");

    TokenSequence xt = prompt;
    xt.validate(layout);
    xt.ids.insert(xt.ids.end(), static_cast<std::size_t>(total), layout.mask_token_id);

    DecodeResult result;
    result.trace.k = k_chunk;
    result.trace.d = d;

    ConfidenceMatrix conf = ConfidenceMatrix::zeros(k_chunk, d);
    std::vector<int> visits(static_cast<std::size_t>(k_chunk), 0);
    int focus = -1;

    auto answer_id = [&](int p) -> int& {
        return xt.ids[static_cast<std::size_t>(xt.prompt_len + p)];
    };

    for (int step = 0; step < cfg.total_steps; ++step) {
        std::vector<int> masked = detail::masked_positions(xt, layout);
        if (masked.empty()) {
            // Degenerate shapes (D < iters_per_action) can exhaust the grid
            // early; remaining visits are empty but keep the step count exact.
            const int step_focus = focus;
            if (focus >= 0) {
                ++visits[static_cast<std::size_t>(focus)];
                if (visits[static_cast<std::size_t>(focus)] >= cfg.iters_per_action) {
                    conf.finalized[static_cast<std::size_t>(focus)] = 1;
                    focus = -1;
                }
            }
            std::fill(conf.values.begin(), conf.values.end(), 1.0);
            result.trace.steps.push_back(detail::snapshot_step(step, step_focus, {}, {},
                                                               conf.values, xt));
            continue;
        }

        Rng step_rng = decode_rng.fork(static_cast<std::uint64_t>(step));
        PredictOutcome pred = predict_with_confidence(model, xt, cond, layout, cfg, step_rng);
        conf.values = pred.confidence;

        // Action scores over non-finalized actions only.
        std::vector<char> counted(static_cast<std::size_t>(total), 0);
        for (int p = 0; p < total; ++p) {
            const int action = p / d;
            if (conf.finalized[static_cast<std::size_t>(action)]) continue;
            const bool is_masked = answer_id(p) == layout.mask_token_id;
            if (cfg.action_score == ActionScoreMode::all_tokens || is_masked) {
                counted[static_cast<std::size_t>(p)] = 1;
            }
        }
        conf.recompute_action_scores(counted);

        if (cfg.focus_mode == FocusMode::re_argmax || focus < 0) {
            focus = -1;
            for (int i = 0; i < k_chunk; ++i) {
                if (conf.finalized[static_cast<std::size_t>(i)]) continue;
                if (focus < 0 || conf.action_scores[static_cast<std::size_t>(i)] >
                                     conf.action_scores[static_cast<std::size_t>(focus)]) {
                    focus = i;  // strict >: ties stay at the lowest index
                }
            }
        }
        if (focus < 0) throw std::logic_error("hierarchical decode: no action left to focus");

        // Token-level reveal inside the focus action.
        std::vector<int> focus_masked;
        for (int p : masked) {
            if (p / d == focus) focus_masked.push_back(p);
        }
        const int remaining_iters = cfg.iters_per_action - visits[static_cast<std::size_t>(focus)];
        const int quota = focus_masked.empty()
                              ? 0
                              : (static_cast<int>(focus_masked.size()) + remaining_iters - 1) /
                                    remaining_iters;  // ceil
        std::vector<int> revealed = detail::top_by_confidence(focus_masked, pred.confidence, quota);
        for (int p : revealed) {
            answer_id(p) = pred.proposals[static_cast<std::size_t>(p)];
        }

        // Remask: unrevealed focus tokens stay masked; every position of any
        // other non-finalized action is reset to mask (action-level remask).
        std::vector<int> remasked;
        for (int p : focus_masked) {
            if (!std::binary_search(revealed.begin(), revealed.end(), p)) remasked.push_back(p);
        }
        for (int p = 0; p < total; ++p) {
            const int action = p / d;
            if (action == focus || conf.finalized[static_cast<std::size_t>(action)]) continue;
            remasked.push_back(p);
            answer_id(p) = layout.mask_token_id;
        }
        std::sort(remasked.begin(), remasked.end());

        const int step_focus = focus;
        ++visits[static_cast<std::size_t>(focus)];
        if (visits[static_cast<std::size_t>(focus)] >= cfg.iters_per_action) {
            for (int p : detail::masked_positions(xt, layout)) {
                if (p / d == focus) {
                    throw std::logic_error("focus action not fully revealed at its last visit");
                }
            }
            conf.finalized[static_cast<std::size_t>(focus)] = 1;
            focus = -1;
        }

        result.trace.steps.push_back(detail::snapshot_step(step, step_focus, std::move(revealed),
                                                           std::move(remasked), conf.values, xt));
    }

    result.tokens.assign(xt.ids.begin() + xt.prompt_len, xt.ids.end());
    for (int id : result.tokens) {
        if (!layout.is_special(id)) {
            throw std::logic_error("hierarchical decode left a non-action token in the answer");
        }
    }
    return result;
}

template <typename ModelT>
DecodeResult decode(const ModelT& model, const TokenSequence& prompt,
                    const ConditioningInput& cond, const VocabLayout& layout, int k_chunk,
                    const DecodeConfig& cfg, int dims = kActionDims) {
    if (cfg.strategy == DecodeStrategy::vanilla) {
        return vanilla_decode(model, prompt, cond, layout, k_chunk, cfg, dims);
    }
    return hierarchical_decode(model, prompt, cond, layout, k_chunk, cfg, dims);
}

// Decode and detokenize in one call.
template <typename ModelT>
ActionChunk decode_to_chunk(const ModelT& model, const TokenSequence& prompt,
                            const ConditioningInput& cond, const VocabLayout& layout,
                            const BinSpec& bins, int k_chunk, const DecodeConfig& cfg,
                            DecodeTrace* trace_out = nullptr) {
    DecodeResult res = decode(model, prompt, cond, layout, k_chunk, cfg);
    if (trace_out) *trace_out = std::move(res.trace);
    return chunk_from_tokens(res.tokens, bins, layout);
}

}  // namespace diffact
