#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffact/data.hpp"
#include "diffact/checkpoint.hpp"
#include "diffact/diffusion.hpp"
#include "diffact/model.hpp"
#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

struct TrainConfig {
    double lr = 3e-4;
    int batch = 64;
    int epochs = 3;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    // Mask ratios are drawn from (t_min, 1]: the floor keeps the 1/t loss
    // weight bounded, so near-unmasked in-fill examples cannot dominate the
    // gradient signal needed for generation from a fully masked sequence.
    double t_min = 0.05;
    LossWeighting weighting = LossWeighting::inverse_time;
    bool localized_head = true;  // labels in [0, V_a) vs. full-vocab token ids
    std::uint64_t seed = 1;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
        if (batch < 1) throw std::invalid_argument("batch must be >= 1");
        if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
        if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
        if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be > 0");
        if (!(t_min >= 0.0 && t_min < 1.0)) {
            throw std::invalid_argument("t_min must be in [0, 1)");
        }
    }
};

struct TrainResult {
    std::vector<std::pair<long long, double>> loss_curve;  // (optimizer step, batch loss)
    long long steps = 0;                                   // total completed steps
};

// One mask-ratio draw for a training example: uniform over (t_min, 1].
inline double draw_mask_ratio(Rng& rng, double t_min) {
    return 1.0 - (1.0 - t_min) * rng.uniform();
}

// Classification labels for a masked sequence: masked answer positions carry
// the original token's class, everything else is ignored. The localized head
// uses the V_a-class mapping; the full-vocab baseline uses raw token ids.
inline std::vector<int> build_labels(const TokenSequence& x0, const TokenSequence& xt,
                                     const VocabLayout& layout, bool localized) {
    std::vector<int> labels(x0.ids.size(), layout.ignore_label);
    for (std::size_t i = static_cast<std::size_t>(x0.prompt_len); i < x0.ids.size(); ++i) {
        if (xt.ids[i] != layout.mask_token_id) continue;
        labels[i] = localized ? layout.map_local(x0.ids[i]) : x0.ids[i];
    }
    return labels;
}

// Decoupled-weight-decay adaptive-moment update with global gradient-norm
// clipping. Moments are fp32 so checkpointed state round-trips exactly.
inline void adamw_step(Predictor<float>& model, AdamState& adam, std::vector<float>& grad,
                       const TrainConfig& tc) {
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;

    const std::size_t n = model.param_count();
    if (adam.m.empty()) {
        adam.m.assign(n, 0.0f);
        adam.v.assign(n, 0.0f);
    }
    if (adam.m.size() != n || adam.v.size() != n || grad.size() != n) {
        throw std::invalid_argument("optimizer buffers do not match parameter count");
    }

    double sq = 0.0;
    for (float g : grad) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        throw std::runtime_error("training diverged: gradient norm is not finite");
    }
    const double scale = norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;

    adam.step += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam.step));

    std::vector<float>& params = model.params();
    for (const TensorSpec& spec : model.tensor_specs()) {
        const double wd = spec.decay ? tc.weight_decay : 0.0;
        for (std::size_t i = spec.offset; i < spec.offset + spec.size; ++i) {
            const double g = static_cast<double>(grad[i]) * scale;
            const double m = kBeta1 * adam.m[i] + (1.0 - kBeta1) * g;
            const double v = kBeta2 * adam.v[i] + (1.0 - kBeta2) * g * g;
            adam.m[i] = static_cast<float>(m);
            adam.v[i] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double p = static_cast<double>(params[i]);
            p -= tc.lr * (mhat / (std::sqrt(vhat) + kEps) + wd * p);
            params[i] = static_cast<float>(p);
        }
    }
}

// Runs (or resumes) training until epochs * ceil(M/batch) optimizer steps are
// complete. All randomness is keyed by (seed, purpose, step, element,
// attempt), so resuming from a checkpointed (model, adam) pair replays the
// remaining steps bit-for-bit. stop_after > 0 pauses the run at that optimizer
// step; a later call with the same inputs continues it exactly.
inline TrainResult train_predictor(Predictor<float>& model, AdamState& adam,
                                   const std::vector<TrainingExample>& examples,
                                   const VocabLayout& layout, const TrainConfig& tc,
                                   long long stop_after = 0) {
    tc.validate();
    if (examples.empty()) throw std::invalid_argument("training set is empty");
    if (stop_after < 0) throw std::invalid_argument("stop_after must be >= 0");

    const long long m_total = static_cast<long long>(examples.size());
    const long long steps_per_epoch = (m_total + tc.batch - 1) / tc.batch;
    long long total_steps = steps_per_epoch * tc.epochs;
    if (adam.step > total_steps) {
        throw std::invalid_argument("checkpoint already has " + std::to_string(adam.step) +
                                    " steps, beyond the configured " +
                                    std::to_string(total_steps));
    }
    if (stop_after > 0) total_steps = std::min(total_steps, stop_after);

    const std::uint64_t shuffle_base = derive_seed(tc.seed, "train_shuffle");
    const std::uint64_t t_base = derive_seed(tc.seed, "train_t");
    const std::uint64_t mask_base = derive_seed(tc.seed, "train_mask");

    TrainResult result;
    result.steps = total_steps;

    std::vector<float> grad(model.param_count(), 0.0f);
    ForwardCache<float> cache;
    std::vector<std::size_t> perm(examples.size());
    long long perm_epoch = -1;

    for (long long step = adam.step; step < total_steps; ++step) {
        const long long epoch = step / steps_per_epoch;
        if (epoch != perm_epoch) {
            for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
            Rng shuffle_rng(derive_seed(shuffle_base, static_cast<std::uint64_t>(epoch)));
            shuffle_rng.shuffle(perm);
            perm_epoch = epoch;
        }
        const long long lo = (step % steps_per_epoch) * tc.batch;
        const long long hi = std::min<long long>(lo + tc.batch, m_total);
        const int batch_n = static_cast<int>(hi - lo);

        std::fill(grad.begin(), grad.end(), 0.0f);
        double batch_loss = 0.0;
        for (int j = 0; j < batch_n; ++j) {
            const TrainingExample& ex = examples[perm[static_cast<std::size_t>(lo + j)]];
            const std::uint64_t step_key = static_cast<std::uint64_t>(step);
            double t = 0.0;
            TokenSequence xt;
            // Redraw t whenever the forward process masks nothing: Eq-style
            // 1/t weighting is undefined on an empty mask set.
            for (std::uint64_t attempt = 0;; ++attempt) {
                if (attempt >= 1000) {
                    throw std::runtime_error("t-resampling failed 1000 times; answer empty?");
                }
                Rng t_rng(derive_seed(derive_seed(derive_seed(t_base, step_key),
                                                  static_cast<std::uint64_t>(j)),
                                      attempt));
                t = draw_mask_ratio(t_rng, tc.t_min);
                Rng mask_rng(derive_seed(derive_seed(derive_seed(mask_base, step_key),
                                                     static_cast<std::uint64_t>(j)),
                                         attempt));
                xt = forward_mask(ex.x0, t, layout, mask_rng);
                if (xt.count_masked(layout) > 0) break;
            }
            std::vector<int> labels = build_labels(ex.x0, xt, layout, tc.localized_head);
            batch_loss += model.loss_and_grad_element(xt, ex.cond, labels, t, tc.weighting,
                                                      1.0 / batch_n, cache, grad) /
                          batch_n;
        }
        if (!std::isfinite(batch_loss)) {
            throw std::runtime_error("training diverged at step " + std::to_string(step) +
                                     ": loss is not finite");
        }
        adamw_step(model, adam, grad, tc);
        model.check_finite();
        result.loss_curve.emplace_back(step, batch_loss);
    }
    return result;
}

// Mean of the last `window` entries at or before `step` — the smoothed-loss
// view used by the monotone-trend checks.
inline double smoothed_loss(const std::vector<std::pair<long long, double>>& curve,
                            long long step, int window) {
    double sum = 0.0;
    int n = 0;
    for (auto it = curve.rbegin(); it != curve.rend(); ++it) {
        if (it->first > step) continue;
        sum += it->second;
        if (++n == window) break;
    }
    if (n == 0) throw std::invalid_argument("no loss entries at or before requested step");
    return sum / n;
}

inline std::string loss_curve_csv(const std::vector<std::pair<long long, double>>& curve) {
    std::string out = "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : curve) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", step, loss);
        out += buf;
    }
    return out;
}

}  // namespace diffact
