#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffact {

// One action = D components in fixed order: dx, dy, dz, droll, dpitch, dyaw, gripper.
inline constexpr int kActionDims = 7;
inline constexpr int kIgnoreLabel = -100;

struct ActionVector {
    std::array<double, kActionDims> c{};

    double& operator[](int i) { return c[static_cast<std::size_t>(i)]; }
    double operator[](int i) const { return c[static_cast<std::size_t>(i)]; }

    double dx() const { return c[0]; }
    double dy() const { return c[1]; }
    double dz() const { return c[2]; }
    double gripper() const { return c[6]; }

    bool operator==(const ActionVector&) const = default;
};

// Vocabulary layout: base tokens [0, V), the contiguous special action block
// S = [special_token_base, special_token_base + V_a), and a mask token outside
// both. Defaults put S directly after the base vocabulary and the mask after S.
struct VocabLayout {
    int base_vocab_size = 512;     // V
    int action_vocab_size = 32;    // V_a
    int special_token_base = 512;  // first id of S
    int mask_token_id = 544;
    int ignore_label = kIgnoreLabel;

    bool operator==(const VocabLayout&) const = default;

    static VocabLayout make(int base_vocab, int action_vocab) {
        VocabLayout l;
        l.base_vocab_size = base_vocab;
        l.action_vocab_size = action_vocab;
        l.special_token_base = base_vocab;
        l.mask_token_id = base_vocab + action_vocab;
        l.validate();
        return l;
    }

    // V + V_a: width of a full-vocabulary classification head (mask excluded).
    int vocab_total() const { return base_vocab_size + action_vocab_size; }
    // Embedding table size: every token id plus the mask.
    int vocab_in() const { return std::max(mask_token_id + 1, vocab_total()); }

    bool is_special(int id) const {
        return id >= special_token_base && id < special_token_base + action_vocab_size;
    }

    // Full-vocab id -> local class in [0, V_a), or ignore_label for anything
    // outside S (base tokens, mask). Total function.
    int map_local(int id) const {
        return is_special(id) ? id - special_token_base : ignore_label;
    }

    int unmap_local(int local) const {
        if (local < 0 || local >= action_vocab_size) {
            throw std::out_of_range("local class " + std::to_string(local) +
                                    " outside [0, " + std::to_string(action_vocab_size) + ")");
        }
        return special_token_base + local;
    }

    void validate() const {
        if (base_vocab_size <= 0 || action_vocab_size <= 0) {
            throw std::invalid_argument("vocab sizes must be positive");
        }
        if (special_token_base < base_vocab_size) {
            throw std::invalid_argument("special block overlaps base vocabulary");
        }
        if (is_special(mask_token_id) || mask_token_id < base_vocab_size) {
            throw std::invalid_argument("mask token collides with base or special block");
        }
    }
};

inline void to_json(nlohmann::json& j, const VocabLayout& l) {
    j = nlohmann::json{{"base_vocab_size", l.base_vocab_size},
                       {"action_vocab_size", l.action_vocab_size},
                       {"mask_token_id", l.mask_token_id},
                       {"special_token_base", l.special_token_base}};
}

inline void from_json(const nlohmann::json& j, VocabLayout& l) {
    j.at("base_vocab_size").get_to(l.base_vocab_size);
    j.at("action_vocab_size").get_to(l.action_vocab_size);
    j.at("mask_token_id").get_to(l.mask_token_id);
    j.at("special_token_base").get_to(l.special_token_base);
    l.validate();
}

// Uniform quantization grid per action dimension. Bounds come from dataset
// percentiles; values outside are clipped, so every bin index is in [0, bins).
struct BinSpec {
    std::array<double, kActionDims> lo{};
    std::array<double, kActionDims> hi{};
    int bins = 32;

    double width(int dim) const { return (hi[dim] - lo[dim]) / bins; }

    int bin_of(int dim, double x) const {
        double v = std::clamp(x, lo[dim], hi[dim]);
        int b = static_cast<int>(std::floor((v - lo[dim]) / width(dim)));
        return std::clamp(b, 0, bins - 1);
    }

    double center(int dim, int b) const { return lo[dim] + (b + 0.5) * width(dim); }

    bool operator==(const BinSpec&) const = default;

    void validate() const {
        if (bins <= 0) throw std::invalid_argument("bin count must be positive");
        for (int d = 0; d < kActionDims; ++d) {
            if (!(lo[d] < hi[d])) {
                throw std::invalid_argument("bin bounds degenerate in dimension " +
                                            std::to_string(d));
            }
        }
    }
};

inline void to_json(nlohmann::json& j, const BinSpec& b) {
    nlohmann::json dims = nlohmann::json::array();
    for (int d = 0; d < kActionDims; ++d) {
        dims.push_back({{"lo", b.lo[d]}, {"hi", b.hi[d]}, {"bins", b.bins}});
    }
    j = nlohmann::json{{"dims", dims}};
}

inline void from_json(const nlohmann::json& j, BinSpec& b) {
    const auto& dims = j.at("dims");
    if (dims.size() != kActionDims) throw std::invalid_argument("BinSpec: wrong dimension count");
    for (int d = 0; d < kActionDims; ++d) {
        dims[d].at("lo").get_to(b.lo[d]);
        dims[d].at("hi").get_to(b.hi[d]);
        dims[d].at("bins").get_to(b.bins);
    }
    b.validate();
}

// Percentile by linear interpolation between order statistics of a sorted sample.
inline double percentile_sorted(const std::vector<double>& sorted, double pct) {
    if (sorted.empty()) throw std::invalid_argument("percentile of empty sample");
    if (sorted.size() == 1) return sorted[0];
    double rank = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(rank));
    auto hi = static_cast<std::size_t>(std::ceil(rank));
    double frac = rank - static_cast<double>(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

// Fit per-dimension bounds from data: [pct_lo, pct_hi] percentiles, clipped at
// tokenization time. Constant dimensions are widened to +-1e-3 to keep a
// positive bin width.
inline BinSpec fit_bins(const std::vector<ActionVector>& dataset, int bins,
                        double pct_lo = 1.0, double pct_hi = 99.0) {
    if (dataset.empty()) throw std::invalid_argument("fit_bins: empty dataset");
    constexpr double kDegenerateHalfWidth = 1e-3;
    BinSpec spec;
    spec.bins = bins;
    std::vector<double> values(dataset.size());
    for (int d = 0; d < kActionDims; ++d) {
        for (std::size_t i = 0; i < dataset.size(); ++i) values[i] = dataset[i][d];
        std::sort(values.begin(), values.end());
        double lo = percentile_sorted(values, pct_lo);
        double hi = percentile_sorted(values, pct_hi);
        if (!(lo < hi)) {
            double mid = 0.5 * (lo + hi);
            lo = mid - kDegenerateHalfWidth;
            hi = mid + kDegenerateHalfWidth;
        }
        spec.lo[d] = lo;
        spec.hi[d] = hi;
    }
    spec.validate();
    return spec;
}

inline std::array<int, kActionDims> tokenize_action(const ActionVector& a, const BinSpec& bins,
                                                    const VocabLayout& layout) {
    std::array<int, kActionDims> ids{};
    for (int d = 0; d < kActionDims; ++d) {
        ids[d] = layout.special_token_base + bins.bin_of(d, a[d]);
    }
    return ids;
}

inline ActionVector detokenize(std::span<const int> tokens, const BinSpec& bins,
                               const VocabLayout& layout) {
    if (tokens.size() != kActionDims) {
        throw std::invalid_argument("detokenize: expected " + std::to_string(kActionDims) +
                                    " tokens, got " + std::to_string(tokens.size()));
    }
    ActionVector a;
    for (int d = 0; d < kActionDims; ++d) {
        int id = tokens[static_cast<std::size_t>(d)];
        if (!layout.is_special(id)) {
            throw std::invalid_argument("detokenize: token id " + std::to_string(id) +
                                        " at position " + std::to_string(d) +
                                        " is not a special action token");
        }
        a[d] = bins.center(d, id - layout.special_token_base);
    }
    return a;
}

// K consecutive timesteps of continuous actions.
struct ActionChunk {
    std::vector<ActionVector> steps;

    int horizon() const { return static_cast<int>(steps.size()); }
    bool operator==(const ActionChunk&) const = default;
};

// Row-major serialization: timestep-major, component-minor, length K*D.
inline std::vector<int> tokenize_chunk(const ActionChunk& chunk, const BinSpec& bins,
                                       const VocabLayout& layout) {
    std::vector<int> ids;
    ids.reserve(chunk.steps.size() * kActionDims);
    for (const ActionVector& a : chunk.steps) {
        auto t = tokenize_action(a, bins, layout);
        ids.insert(ids.end(), t.begin(), t.end());
    }
    return ids;
}

inline ActionChunk chunk_from_tokens(std::span<const int> ids, const BinSpec& bins,
                                     const VocabLayout& layout) {
    if (ids.size() % kActionDims != 0) {
        throw std::invalid_argument("chunk_from_tokens: length not a multiple of D");
    }
    ActionChunk chunk;
    chunk.steps.resize(ids.size() / kActionDims);
    for (std::size_t k = 0; k < chunk.steps.size(); ++k) {
        chunk.steps[k] = detokenize(ids.subspan(k * kActionDims, kActionDims), bins, layout);
    }
    return chunk;
}

}  // namespace diffact
