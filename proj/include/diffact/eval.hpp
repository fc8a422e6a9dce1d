#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffact/checkpoint.hpp"
#include "diffact/config.hpp"
#include "diffact/data.hpp"
#include "diffact/decoder.hpp"
#include "diffact/env.hpp"
#include "diffact/train.hpp"

namespace diffact {

// 95% Wilson score interval for a binomial proportion.
struct WilsonInterval {
    double lo = 0.0;
    double hi = 0.0;
};

inline WilsonInterval wilson_interval(long long successes, long long n) {
    if (n <= 0) throw std::invalid_argument("wilson_interval requires n > 0");
    if (successes < 0 || successes > n) {
        throw std::invalid_argument("successes must lie in [0, n]");
    }
    constexpr double z = 1.959963984540054;  // two-sided 95%
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (p + z2 / (2.0 * nn)) / denom;
    const double half = (z / denom) * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

struct RolloutConfig {
    int n_trials = 200;
    ChunkExecution chunk_execution = ChunkExecution::full;
    int first_m = 1;
    int horizon_limit = kHorizonLimit;
    std::uint64_t seed = 0;

    void validate(int k_chunk) const {
        if (n_trials < 1) throw std::invalid_argument("n_trials must be >= 1");
        if (horizon_limit < 1) throw std::invalid_argument("horizon_limit must be >= 1");
        if (chunk_execution == ChunkExecution::first_m && (first_m < 1 || first_m > k_chunk)) {
            throw std::invalid_argument("first_m must be in [1, K]");
        }
    }
};

struct TrialOutcome {
    bool success = false;
    int steps = 0;
    int decode_calls = 0;
    double decode_ms = 0.0;  // wall-clock total across decode calls
};

// Policies are callables: ActionChunk policy(const Env&, uint64 decode_seed).
// The decode seed is derived per (trial, call), so trials are independent and
// the whole rollout is reproducible from RolloutConfig::seed.

// Greedy scripted-expert policy: simulates a copy of the environment forward
// to emit a K-step chunk; open-loop execution then replays the same states.
struct ExpertPolicy {
    int k = 5;
    ActionChunk operator()(const Env& env, std::uint64_t) const {
        Env sim = env;
        ActionChunk chunk;
        for (int i = 0; i < k; ++i) {
            ActionVector a = scripted_expert(sim.state(), sim.task());
            sim.step(a);
            chunk.steps.push_back(a);
        }
        return chunk;
    }
};

// Uniform-random baseline within the per-step clip limits.
struct RandomPolicy {
    int k = 5;
    ActionChunk operator()(const Env&, std::uint64_t seed) const {
        Rng rng(seed);
        ActionChunk chunk;
        for (int i = 0; i < k; ++i) {
            ActionVector a;
            for (int d = 0; d < 3; ++d) a.c[static_cast<std::size_t>(d)] = rng.uniform(-kPosClip, kPosClip);
            for (int d = 3; d < 6; ++d) a.c[static_cast<std::size_t>(d)] = rng.uniform(-kRotClip, kRotClip);
            a.c[6] = rng.uniform();
            chunk.steps.push_back(a);
        }
        return chunk;
    }
};

// Adapter exposing the V_a-class logits of a full-vocab head: slices each row
// to the special-token block so the decoder sees the same 32-way interface in
// both head modes.
template <typename ModelT>
struct LocalizedView {
    const ModelT* inner = nullptr;
    VocabLayout layout;

    std::vector<double> forward_logits(const TokenSequence& xt,
                                       const ConditioningInput& cond) const {
        std::vector<double> wide = inner->forward_logits(xt, cond);
        const int w = layout.vocab_total();
        const int narrow = layout.action_vocab_size;
        if (wide.size() != static_cast<std::size_t>(xt.size()) * w) {
            throw std::invalid_argument("full-vocab logits shape mismatch");
        }
        std::vector<double> out(static_cast<std::size_t>(xt.size()) * narrow);
        for (int r = 0; r < xt.size(); ++r) {
            const double* src =
                wide.data() + static_cast<std::size_t>(r) * w + layout.special_token_base;
            std::copy(src, src + narrow, out.begin() + static_cast<std::size_t>(r) * narrow);
        }
        return out;
    }
};

// Checkpoint-backed policy: builds the prompt and conditioning from the
// environment, decodes one chunk. Handles both head widths.
struct ModelPolicy {
    const Predictor<float>* model = nullptr;
    VocabLayout layout;
    BinSpec bins;
    int k = 5;
    int prompt_len = 4;
    DecodeConfig decode;

    ActionChunk operator()(const Env& env, std::uint64_t decode_seed) const {
        TokenSequence prompt = make_prompt(env.task().task_id, prompt_len);
        ConditioningInput cond;
        cond.observation = env.observe();
        cond.task_id = env.task().task_id;
        DecodeConfig cfg = decode;
        cfg.seed = decode_seed;
        if (model->config().classes_out == layout.action_vocab_size) {
            return decode_to_chunk(*model, prompt, cond, layout, bins, k, cfg);
        }
        if (model->config().classes_out != layout.vocab_total()) {
            throw std::runtime_error("checkpoint head width " +
                                     std::to_string(model->config().classes_out) +
                                     " matches neither the localized nor the full vocabulary");
        }
        LocalizedView<Predictor<float>> view{model, layout};
        return decode_to_chunk(view, prompt, cond, layout, bins, k, cfg);
    }
};

namespace detail {

// Runs one episode against a fixed task; returns the outcome. The environment
// world is seeded from (rollout seed, trial).
template <typename Policy>
TrialOutcome run_trial(Policy&& policy, int task_id, int k, const RolloutConfig& rc,
                       std::uint64_t trial) {
    Env env;
    env.reset(derive_seed(derive_seed(rc.seed, "rollout_env"), trial), task_id);
    TrialOutcome out;
    const int exec_per_chunk =
        rc.chunk_execution == ChunkExecution::full ? k : std::min(rc.first_m, k);
    while (!env.success() && out.steps < rc.horizon_limit) {
        const std::uint64_t decode_seed =
            derive_seed(derive_seed(derive_seed(rc.seed, "decode"), trial),
                        static_cast<std::uint64_t>(out.decode_calls));
        auto t0 = std::chrono::steady_clock::now();
        ActionChunk chunk = policy(env, decode_seed);
        auto t1 = std::chrono::steady_clock::now();
        out.decode_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        ++out.decode_calls;
        if (chunk.horizon() < exec_per_chunk) {
            throw std::runtime_error("policy returned a chunk shorter than the execution window");
        }
        for (int i = 0; i < exec_per_chunk && out.steps < rc.horizon_limit; ++i) {
            env.step(chunk.steps[static_cast<std::size_t>(i)]);
            ++out.steps;
            if (env.success()) break;
        }
    }
    out.success = env.success();
    return out;
}

}  // namespace detail

template <typename Policy>
std::vector<TrialOutcome> rollout(Policy&& policy, int task_id, int k, const RolloutConfig& rc) {
    rc.validate(k);
    std::vector<TrialOutcome> outcomes;
    outcomes.reserve(static_cast<std::size_t>(rc.n_trials));
    for (int trial = 0; trial < rc.n_trials; ++trial) {
        outcomes.push_back(detail::run_trial(policy, task_id, k, rc,
                                             static_cast<std::uint64_t>(trial)));
    }
    return outcomes;
}

struct ChainReport {
    std::vector<long long> histogram;  // histogram[i] = trials completing exactly i tasks
    double avg_len = 0.0;
    int n_trials = 0;
    long long full_completions = 0;
    int decode_calls = 0;
    double decode_ms = 0.0;
};

// Sequential multi-task evaluation: a trial advances to task i+1 only after
// task i succeeds; each task gets a fresh step budget in the same world.
template <typename Policy>
ChainReport eval_chained(Policy&& policy, const std::vector<int>& chain, int k,
                         const RolloutConfig& rc) {
    rc.validate(k);
    if (chain.empty()) throw std::invalid_argument("chain must contain at least one task");
    ChainReport report;
    report.histogram.assign(chain.size() + 1, 0);
    report.n_trials = rc.n_trials;

    const int exec_per_chunk =
        rc.chunk_execution == ChunkExecution::full ? k : std::min(rc.first_m, k);
    long long total_completed = 0;
    for (int trial = 0; trial < rc.n_trials; ++trial) {
        Env env;
        env.reset(derive_seed(derive_seed(rc.seed, "chain_env"),
                              static_cast<std::uint64_t>(trial)),
                  chain.front());
        std::size_t completed = 0;
        for (std::size_t ti = 0; ti < chain.size(); ++ti) {
            if (ti > 0) env.set_task(chain[ti]);
            int steps = 0;
            int calls = 0;
            while (!env.success() && steps < rc.horizon_limit) {
                const std::uint64_t decode_seed = derive_seed(
                    derive_seed(derive_seed(derive_seed(rc.seed, "chain_decode"),
                                            static_cast<std::uint64_t>(trial)),
                                static_cast<std::uint64_t>(ti)),
                    static_cast<std::uint64_t>(calls));
                auto t0 = std::chrono::steady_clock::now();
                ActionChunk chunk = policy(env, decode_seed);
                auto t1 = std::chrono::steady_clock::now();
                report.decode_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
                ++report.decode_calls;
                ++calls;
                for (int i = 0; i < exec_per_chunk && steps < rc.horizon_limit; ++i) {
                    env.step(chunk.steps[static_cast<std::size_t>(i)]);
                    ++steps;
                    if (env.success()) break;
                }
            }
            if (!env.success()) break;
            ++completed;
        }
        ++report.histogram[completed];
        total_completed += static_cast<long long>(completed);
        if (completed == chain.size()) ++report.full_completions;
    }
    report.avg_len = static_cast<double>(total_completed) / rc.n_trials;
    return report;
}

// One row of an evaluation/ablation report. Failed rows keep their identity
// columns and leave the metrics empty in the CSV.
struct ReportRow {
    std::string suite;
    std::string arm;
    std::string task;
    long long n = 0;
    long long successes = 0;
    double rate = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double avg_len = 0.0;
    double decode_ms_mean = 0.0;
    bool failed = false;
    std::string error;
    std::string config_hash;  // hash of the arm's effective config
};

inline constexpr const char* kReportCsvHeader =
    "suite,arm,task,n,successes,rate,ci_lo,ci_hi,avg_len,decode_ms_mean";

inline std::string report_csv(const std::vector<ReportRow>& rows) {
    std::string out = std::string(kReportCsvHeader) + "\n";
    char buf[256];
    for (const ReportRow& r : rows) {
        if (r.failed) {
            out += r.suite + "," + r.arm + "," + r.task + ",,,,,,,\n";
            continue;
        }
        std::snprintf(buf, sizeof(buf), "%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.6f", r.n, r.successes,
                      r.rate, r.ci_lo, r.ci_hi, r.avg_len, r.decode_ms_mean);
        out += r.suite + "," + r.arm + "," + r.task + "," + buf + "\n";
    }
    return out;
}

inline void to_json(nlohmann::json& j, const ReportRow& r) {
    j = nlohmann::json{{"suite", r.suite},   {"arm", r.arm},
                       {"task", r.task},     {"n", r.n},
                       {"successes", r.successes}, {"rate", r.rate},
                       {"ci_lo", r.ci_lo},   {"ci_hi", r.ci_hi},
                       {"avg_len", r.avg_len}, {"decode_ms_mean", r.decode_ms_mean},
                       {"failed", r.failed}, {"config_hash", r.config_hash}};
    if (r.failed) j["error"] = r.error;
}

namespace detail {

inline ReportRow summarize(const std::string& suite, const std::string& arm,
                           const std::string& task, const std::vector<TrialOutcome>& outcomes) {
    ReportRow row;
    row.suite = suite;
    row.arm = arm;
    row.task = task;
    row.n = static_cast<long long>(outcomes.size());
    long long decode_calls = 0;
    for (const TrialOutcome& o : outcomes) {
        row.successes += o.success ? 1 : 0;
        decode_calls += o.decode_calls;
        row.decode_ms_mean += o.decode_ms;
    }
    row.rate = static_cast<double>(row.successes) / row.n;
    WilsonInterval ci = wilson_interval(row.successes, row.n);
    row.ci_lo = ci.lo;
    row.ci_hi = ci.hi;
    row.avg_len = row.rate;  // single-task rows: chain of length 1
    row.decode_ms_mean = decode_calls > 0 ? row.decode_ms_mean / decode_calls : 0.0;
    return row;
}

}  // namespace detail

// Evaluates one policy across all single tasks plus the aggregate and the
// depth-2 chain. Shared by the plain eval command and the ablation arms.
template <typename Policy>
std::vector<ReportRow> evaluate_policy(Policy&& policy, const std::string& suite,
                                       const std::string& arm, int k, const RolloutConfig& rc,
                                       const std::string& config_hash) {
    std::vector<ReportRow> rows;
    std::vector<TrialOutcome> all;
    for (int task = 0; task < kNumTasks; ++task) {
        RolloutConfig task_rc = rc;
        task_rc.seed = derive_seed(rc.seed, static_cast<std::uint64_t>(task));
        std::vector<TrialOutcome> outcomes = rollout(policy, task, k, task_rc);
        rows.push_back(detail::summarize(suite, arm, std::to_string(task), outcomes));
        all.insert(all.end(), outcomes.begin(), outcomes.end());
    }
    rows.push_back(detail::summarize(suite, arm, "all", all));

    ChainReport chain = eval_chained(policy, chain_task_ids(), k, rc);
    ReportRow crow;
    crow.suite = suite;
    crow.arm = arm;
    crow.task = "chain";
    crow.n = chain.n_trials;
    crow.successes = chain.full_completions;
    crow.rate = static_cast<double>(chain.full_completions) / chain.n_trials;
    WilsonInterval ci = wilson_interval(crow.successes, crow.n);
    crow.ci_lo = ci.lo;
    crow.ci_hi = ci.hi;
    crow.avg_len = chain.avg_len;
    crow.decode_ms_mean =
        chain.decode_calls > 0 ? chain.decode_ms / chain.decode_calls : 0.0;
    rows.push_back(crow);

    for (ReportRow& r : rows) r.config_hash = config_hash;
    return rows;
}

}  // namespace diffact
