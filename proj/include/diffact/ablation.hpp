#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffact/eval.hpp"

namespace diffact {

inline TrainConfig train_config_from(const RunConfig& cfg) {
    TrainConfig tc;
    tc.lr = cfg.lr;
    tc.batch = cfg.batch;
    tc.epochs = cfg.epochs;
    tc.weight_decay = cfg.weight_decay;
    tc.clip_norm = cfg.clip_norm;
    tc.weighting = cfg.loss_weighting;
    tc.localized_head = cfg.localized_head;
    tc.seed = cfg.train_seed();
    tc.validate();
    return tc;
}

inline RolloutConfig rollout_config_from(const RunConfig& cfg) {
    RolloutConfig rc;
    rc.n_trials = cfg.n_trials;
    rc.chunk_execution = cfg.chunk_execution;
    rc.first_m = cfg.first_m;
    rc.horizon_limit = cfg.horizon_limit;
    rc.seed = cfg.eval_seed();
    rc.validate(cfg.chunk);
    return rc;
}

// A model trained end-to-end from a config plus everything needed to run it.
struct TrainedArm {
    Predictor<float> model;
    AdamState adam;
    VocabLayout layout;
    BinSpec bins;
    TrainResult result;
};

// Fits bins on the shared episodes, builds the chunked training set for this
// config's K, and trains a fresh model. Deterministic in (config, episodes).
inline TrainedArm train_arm(const RunConfig& cfg, const std::vector<EpisodeRecord>& episodes) {
    cfg.validate();
    VocabLayout layout = cfg.make_layout();
    BinSpec bins = fit_bins(all_actions(episodes), layout.action_vocab_size, cfg.percentile_lo,
                            cfg.percentile_hi);
    PredictorConfig pc = cfg.make_predictor_config();
    std::vector<TrainingExample> examples =
        build_training_set(episodes, bins, layout, cfg.chunk, pc.prompt_len());
    TrainedArm arm{Predictor<float>(pc, derive_seed(cfg.seed, "model_init")), AdamState{}, layout,
                   bins, TrainResult{}};
    arm.result = train_predictor(arm.model, arm.adam, examples, layout, train_config_from(cfg));
    return arm;
}

inline ModelPolicy make_policy(const TrainedArm& arm, const RunConfig& cfg) {
    ModelPolicy policy;
    policy.model = &arm.model;
    policy.layout = arm.layout;
    policy.bins = arm.bins;
    policy.k = cfg.chunk;
    policy.prompt_len = cfg.make_predictor_config().prompt_len();
    policy.decode = cfg.make_decode_config(0);  // per-call seeds come from the rollout
    return policy;
}

struct ArmSpec {
    std::string name;
    RunConfig cfg;
};

// The single varied factor per suite. The decode budget follows the chunk so
// every arm spends K * iters_per_action refinement steps.
inline std::vector<ArmSpec> ablation_arms(const std::string& suite, const RunConfig& base) {
    std::vector<ArmSpec> arms;
    if (suite == "lsc") {
        for (bool localized : {true, false}) {
            RunConfig cfg = base;
            cfg.localized_head = localized;
            arms.push_back({localized ? "localized" : "full_vocab", cfg});
        }
    } else if (suite == "had") {
        const int budget = base.chunk * base.decode_iters_per_action;
        for (DecodeStrategy s : {DecodeStrategy::vanilla, DecodeStrategy::hierarchical}) {
            RunConfig cfg = base;
            cfg.decode_strategy = s;
            cfg.decode_total_steps = budget;
            arms.push_back({to_string(s), cfg});
        }
    } else if (suite == "chunk") {
        for (int k : {3, 5, 8, 10}) {
            RunConfig cfg = base;
            cfg.chunk = k;
            if (cfg.decode_strategy == DecodeStrategy::hierarchical) {
                cfg.decode_total_steps = k * cfg.decode_iters_per_action;
            }
            arms.push_back({std::to_string(k), cfg});
        }
    } else {
        throw std::invalid_argument("unknown ablation suite '" + suite +
                                    "' (expected lsc, had, or chunk)");
    }
    // Arm configs are validated inside the per-arm run so that one invalid
    // arm fails its rows without taking down the suite.
    return arms;
}

// Hash of an arm's config with the suite's varied keys reset to the base
// values. Equality across arms certifies that nothing else differs.
inline std::string neutralized_hash(const std::string& suite, RunConfig cfg,
                                    const RunConfig& base) {
    if (suite == "lsc") {
        cfg.localized_head = base.localized_head;
    } else if (suite == "had") {
        cfg.decode_strategy = base.decode_strategy;
        cfg.decode_total_steps = base.decode_total_steps;
    } else if (suite == "chunk") {
        cfg.chunk = base.chunk;
        cfg.decode_total_steps = base.decode_total_steps;
    } else {
        throw std::invalid_argument("unknown ablation suite '" + suite + "'");
    }
    return cfg.hash();
}

struct AblationReport {
    std::string suite;
    std::vector<ReportRow> rows;
    std::string base_hash;  // shared hash with the varied factor neutralized
    std::vector<std::pair<std::string, std::string>> arm_hashes;
    std::string best_arm;  // highest aggregate success (ties -> first listed)

    std::string csv() const { return report_csv(rows); }

    nlohmann::json json() const {
        nlohmann::json arms = nlohmann::json::object();
        for (const auto& [name, hash] : arm_hashes) arms[name] = hash;
        return nlohmann::json{{"suite", suite},
                              {"rows", rows},
                              {"base_hash", base_hash},
                              {"arm_hashes", arms},
                              {"best_arm", best_arm}};
    }
};

// Runs one ablation suite end to end: shared dataset, per-arm training (the
// decode-only suite trains once and shares the checkpoint), evaluation, and
// report assembly. A failing arm yields failed rows; the suite continues.
template <typename ProgressFn>
AblationReport run_ablation(const std::string& suite, const RunConfig& base,
                            ProgressFn&& progress) {
    std::vector<ArmSpec> arms = ablation_arms(suite, base);

    AblationReport report;
    report.suite = suite;
    report.base_hash = neutralized_hash(suite, arms.front().cfg, base);
    for (const ArmSpec& arm : arms) {
        if (neutralized_hash(suite, arm.cfg, base) != report.base_hash) {
            throw std::logic_error("ablation arms diverge beyond the varied factor");
        }
        report.arm_hashes.emplace_back(arm.name, arm.cfg.hash());
    }

    progress("generating " + std::to_string(base.episodes) + " expert episodes");
    std::vector<EpisodeRecord> episodes = generate_episodes(base.episodes, base.data_seed());

    std::optional<TrainedArm> shared;  // decode-only suites reuse one model
    const bool decode_only = suite == "had";
    for (const ArmSpec& arm : arms) {
        try {
            const TrainedArm* trained = nullptr;
            if (decode_only) {
                if (!shared) {
                    progress("training shared checkpoint");
                    shared = train_arm(base, episodes);
                }
                trained = &*shared;
            } else {
                progress("training arm " + arm.name);
                shared = train_arm(arm.cfg, episodes);
                trained = &*shared;
            }
            progress("evaluating arm " + arm.name);
            ModelPolicy policy = make_policy(*trained, arm.cfg);
            std::vector<ReportRow> rows = evaluate_policy(
                policy, suite, arm.name, arm.cfg.chunk, rollout_config_from(arm.cfg),
                arm.cfg.hash());
            report.rows.insert(report.rows.end(), rows.begin(), rows.end());
        } catch (const std::exception& e) {
            progress("arm " + arm.name + " failed: " + e.what());
            std::vector<std::string> labels;
            for (int t = 0; t < kNumTasks; ++t) labels.push_back(std::to_string(t));
            labels.emplace_back("all");
            labels.emplace_back("chain");
            for (const std::string& label : labels) {
                ReportRow row;
                row.suite = suite;
                row.arm = arm.name;
                row.task = label;
                row.failed = true;
                row.error = e.what();
                row.config_hash = arm.cfg.hash();
                report.rows.push_back(row);
            }
        }
    }

    double best_rate = -1.0;
    for (const ReportRow& r : report.rows) {
        if (r.task == "all" && !r.failed && r.rate > best_rate) {
            best_rate = r.rate;
            report.best_arm = r.arm;
        }
    }
    return report;
}

inline AblationReport run_ablation(const std::string& suite, const RunConfig& base) {
    return run_ablation(suite, base, [](const std::string&) {});
}

}  // namespace diffact
