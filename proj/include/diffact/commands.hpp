#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffact/ablation.hpp"

namespace diffact {

// Errors raised while assembling the effective config or checking arguments;
// they map to the usage exit code instead of the runtime one.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace cli {

struct CommonArgs {
    std::string config_path;
    std::string profile;
    std::vector<std::string> sets;
};

inline void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run config file (INI-style sections)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--profile", args.profile, "named preset applied before the config file");
    cmd->add_option("--set", args.sets, "dotted-key override, e.g. --set decode.strategy=vanilla")
        ->expected(1)
        ->take_all()
        ->allow_extra_args(false);
}

// defaults -> profile -> config file -> --set overrides, then validate. The
// result is the canonical config; its hash stamps every artifact.
inline RunConfig effective_config(const CommonArgs& args) {
    try {
        RunConfig cfg;
        if (!args.profile.empty()) cfg.apply_profile(args.profile);
        if (!args.config_path.empty()) cfg = load_run_config(args.config_path, cfg);
        for (const std::string& kv : args.sets) {
            std::size_t eq = kv.find('=');
            if (eq == std::string::npos || eq == 0) {
                throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
            }
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

inline void ensure_parent_dir(const std::string& path) {
    std::filesystem::path parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline void write_text(const std::string& path, const std::string& text) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << text;
    out.close();
    if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace cli

// --- gen-data ---------------------------------------------------------------

inline int cmd_gen_data(const RunConfig& cfg) {
    cli::ensure_parent_dir(cfg.dataset_path);
    DatasetStats stats = generate_dataset(cfg.episodes, cfg.data_seed(), cfg.dataset_path,
                                          cfg.hash(), cfg.seed);
    std::printf("dataset: %s\n", cfg.dataset_path.c_str());
    std::printf("episodes: %zu\n", stats.episodes);
    std::printf("total_steps: %zu\n", stats.total_steps);
    std::printf("mean_episode_length: %.4f\n", stats.mean_episode_length);
    std::printf("config_hash: %s\n", cfg.hash().c_str());
    return 0;
}

// --- train -------------------------------------------------------------------

inline int cmd_train(const RunConfig& cfg, bool resume, long long stop_after) {
    std::vector<EpisodeRecord> episodes = load_dataset(cfg.dataset_path);
    if (episodes.empty()) throw std::runtime_error("dataset is empty: " + cfg.dataset_path);

    VocabLayout layout = cfg.make_layout();
    PredictorConfig pc = cfg.make_predictor_config();
    BinSpec bins = fit_bins(all_actions(episodes), layout.action_vocab_size, cfg.percentile_lo,
                            cfg.percentile_hi);
    std::vector<TrainingExample> examples =
        build_training_set(episodes, bins, layout, cfg.chunk, pc.prompt_len());

    Predictor<float> model(pc, derive_seed(cfg.seed, "model_init"));
    AdamState adam;
    if (resume) {
        Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);
        if (ckpt.config_hash != cfg.hash()) {
            throw std::runtime_error("resume checkpoint was produced by config " +
                                     ckpt.config_hash + ", current config is " + cfg.hash());
        }
        if (!ckpt.has_optimizer) {
            throw std::runtime_error("resume checkpoint has no optimizer state: " +
                                     cfg.checkpoint_path);
        }
        model = ckpt.make_predictor();
        adam = ckpt.adam;
        bins = ckpt.bins;
        std::printf("resumed_at_step: %lld\n", adam.step);
    }

    TrainConfig tc = train_config_from(cfg);
    TrainResult result = train_predictor(model, adam, examples, layout, tc, stop_after);

    cli::ensure_parent_dir(cfg.checkpoint_path);
    save_checkpoint(cfg.checkpoint_path, model, layout, bins, cfg.hash(), cfg.seed, &adam);
    std::string curve_path =
        (std::filesystem::path(cfg.report_dir) / "loss_curve.csv").string();
    cli::write_text(curve_path, loss_curve_csv(result.loss_curve));

    std::printf("checkpoint: %s\n", cfg.checkpoint_path.c_str());
    std::printf("params: %zu\n", model.param_count());
    std::printf("examples: %zu\n", examples.size());
    std::printf("steps: %lld\n", adam.step);
    if (!result.loss_curve.empty()) {
        std::printf("final_loss: %.6f\n", result.loss_curve.back().second);
        std::printf("final_loss_smoothed: %.6f\n",
                    smoothed_loss(result.loss_curve, result.loss_curve.back().first, 10));
    }
    std::printf("loss_curve: %s\n", curve_path.c_str());
    std::printf("config_hash: %s\n", cfg.hash().c_str());
    return 0;
}

// --- eval --------------------------------------------------------------------

namespace cli {

inline nlohmann::json report_json(const RunConfig& cfg, const std::string& suite,
                                  const std::vector<ReportRow>& rows) {
    return nlohmann::json{{"suite", suite},
                          {"rows", rows},
                          {"config_hash", cfg.hash()},
                          {"seed", cfg.seed}};
}

inline void write_report(const RunConfig& cfg, const std::string& stem, const std::string& csv,
                         const nlohmann::json& json) {
    std::filesystem::path dir(cfg.report_dir);
    write_text((dir / (stem + ".csv")).string(), csv);
    write_text((dir / (stem + ".json")).string(), json.dump(2) + "\n");
    std::printf("report_csv: %s\n", (dir / (stem + ".csv")).string().c_str());
    std::printf("report_json: %s\n", (dir / (stem + ".json")).string().c_str());
}

}  // namespace cli

inline int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path,
                    const std::string& suite) {
    if (!suite.empty()) {
        AblationReport rep = run_ablation(suite, cfg, [](const std::string& msg) {
            std::fprintf(stderr, "[ablation] %s\n", msg.c_str());
        });
        nlohmann::json j = rep.json();
        j["config_hash"] = cfg.hash();
        j["seed"] = cfg.seed;
        cli::write_report(cfg, "ablation_" + suite, rep.csv(), j);
        if (!rep.best_arm.empty()) std::printf("best_arm: %s\n", rep.best_arm.c_str());
        std::printf("config_hash: %s\n", cfg.hash().c_str());
        return 0;
    }

    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (!(ckpt.vocab == cfg.make_layout())) {
        throw std::runtime_error("checkpoint vocabulary does not match the config layout");
    }
    Predictor<float> model = ckpt.make_predictor();
    TrainedArm arm{std::move(model), AdamState{}, ckpt.vocab, ckpt.bins, TrainResult{}};
    ModelPolicy policy = make_policy(arm, cfg);
    std::vector<ReportRow> rows =
        evaluate_policy(policy, "eval", to_string(cfg.decode_strategy), cfg.chunk,
                        rollout_config_from(cfg), cfg.hash());
    nlohmann::json j = cli::report_json(cfg, "eval", rows);
    j["checkpoint_hash"] = ckpt.config_hash;
    cli::write_report(cfg, "eval_report", report_csv(rows), j);
    for (const ReportRow& r : rows) {
        if (r.task == "all") std::printf("success_rate: %.4f\n", r.rate);
        if (r.task == "chain") std::printf("chained_avg_len: %.4f\n", r.avg_len);
    }
    std::printf("config_hash: %s\n", cfg.hash().c_str());
    return 0;
}

// --- decode-trace ------------------------------------------------------------

inline int cmd_decode_trace(const RunConfig& cfg, const std::string& ckpt_path,
                            const std::string& out_path, int task_id) {
    if (task_id < 0 || task_id >= kNumTasks) {
        throw UsageError("--task must be in [0, " + std::to_string(kNumTasks) + ")");
    }
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (!(ckpt.vocab == cfg.make_layout())) {
        throw std::runtime_error("checkpoint vocabulary does not match the config layout");
    }
    Predictor<float> model = ckpt.make_predictor();
    PredictorConfig pc = model.config();

    Env env;
    env.reset(derive_seed(cfg.decode_seed(), "trace_env"), task_id);
    TokenSequence prompt = make_prompt(task_id, pc.prompt_len());
    ConditioningInput cond;
    cond.observation = env.observe();
    cond.task_id = task_id;
    DecodeConfig dc = cfg.make_decode_config(derive_seed(cfg.decode_seed(), "trace"));

    DecodeTrace trace;
    VocabLayout layout = cfg.make_layout();
    if (pc.classes_out == layout.action_vocab_size) {
        decode_to_chunk(model, prompt, cond, layout, ckpt.bins, cfg.chunk, dc, &trace);
    } else {
        LocalizedView<Predictor<float>> view{&model, layout};
        decode_to_chunk(view, prompt, cond, layout, ckpt.bins, cfg.chunk, dc, &trace);
    }

    std::string body;
    for (const DecodeStepRecord& step : trace.steps) {
        nlohmann::json j = step;
        body += j.dump() + "\n";
    }
    cli::write_text(out_path, body);

    nlohmann::json meta{{"config_hash", cfg.hash()},
                        {"seed", cfg.seed},
                        {"strategy", to_string(cfg.decode_strategy)},
                        {"task_id", task_id},
                        {"k", trace.k},
                        {"d", trace.d},
                        {"lines", trace.steps.size()}};
    cli::write_text(sidecar_path(out_path), meta.dump(2) + "\n");

    std::printf("trace: %s\n", out_path.c_str());
    std::printf("lines: %zu\n", trace.steps.size());
    std::printf("strategy: %s\n", to_string(cfg.decode_strategy).c_str());
    std::printf("config_hash: %s\n", cfg.hash().c_str());
    return 0;
}

// --- verify ------------------------------------------------------------------

namespace cli {

// Pulls the embedded (config_hash, seed) out of any artifact the toolkit
// writes: checkpoints carry a header, JSON reports embed fields, JSONL
// artifacts carry a sidecar.
inline std::pair<std::string, std::uint64_t> embedded_stamp(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw std::runtime_error("artifact does not exist: " + path);
    }
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".ckpt") {
        Checkpoint ckpt = load_checkpoint(path);
        return {ckpt.config_hash, ckpt.seed};
    }
    std::string probe = path;
    if (std::filesystem::exists(sidecar_path(path))) probe = sidecar_path(path);
    std::ifstream in(probe, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open artifact: " + probe);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("artifact " + probe + " is not JSON: " + e.what());
    }
    if (!j.contains("config_hash") || !j.contains("seed")) {
        throw std::runtime_error("artifact " + probe + " embeds no config hash");
    }
    return {j.at("config_hash").get<std::string>(), j.at("seed").get<std::uint64_t>()};
}

}  // namespace cli

inline int cmd_verify(const RunConfig& cfg, const std::vector<std::string>& artifacts) {
    const std::string expect_hash = cfg.hash();
    int mismatches = 0;
    for (const std::string& path : artifacts) {
        auto [hash, seed] = cli::embedded_stamp(path);
        const bool ok = hash == expect_hash && seed == cfg.seed;
        std::printf("%s %s (artifact %s/%llu, config %s/%llu)\n", ok ? "ok" : "MISMATCH",
                    path.c_str(), hash.c_str(), static_cast<unsigned long long>(seed),
                    expect_hash.c_str(), static_cast<unsigned long long>(cfg.seed));
        if (!ok) ++mismatches;
    }
    if (mismatches > 0) {
        throw std::runtime_error(std::to_string(mismatches) + " artifact(s) failed verification");
    }
    return 0;
}

// --- entry point ---------------------------------------------------------------

// Exit codes: 0 success, 1 usage error (flags, config), 2 runtime failure.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"masked-diffusion action policy toolkit"};
    app.require_subcommand(1);

    cli::CommonArgs gen_args;
    int gen_n = 0;
    CLI::App* gen = app.add_subcommand("gen-data", "generate an expert dataset");
    cli::add_common(gen, gen_args);
    gen->add_option("--out", "dataset output path");
    gen->add_option("--n", gen_n, "episode count override");

    cli::CommonArgs train_args;
    bool train_resume = false;
    long long train_stop_after = 0;
    CLI::App* train = app.add_subcommand("train", "train a predictor from a dataset");
    cli::add_common(train, train_args);
    train->add_option("--data", "dataset path override");
    train->add_option("--out", "checkpoint output path override");
    train->add_flag("--resume", train_resume, "continue from the checkpoint at the output path");
    train->add_option("--stop-after", train_stop_after,
                      "stop after this many optimizer steps (0 = train to completion)")
        ->check(CLI::NonNegativeNumber);

    cli::CommonArgs eval_args;
    std::string eval_ckpt;
    std::string eval_suite;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint or run an ablation suite");
    cli::add_common(eval, eval_args);
    eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate (ignored with --suite)");
    eval->add_option("--suite", eval_suite, "ablation suite")
        ->check(CLI::IsMember({"lsc", "had", "chunk"}));

    cli::CommonArgs trace_args;
    std::string trace_ckpt;
    std::string trace_out;
    std::uint64_t trace_seed = 0;
    std::string trace_strategy;
    int trace_task = 0;
    CLI::App* trace = app.add_subcommand("decode-trace", "dump one decode as JSONL");
    cli::add_common(trace, trace_args);
    trace->add_option("--ckpt", trace_ckpt, "checkpoint to decode with")->required();
    trace->add_option("--out", trace_out, "trace output path");
    trace->add_option("--seed", trace_seed, "root seed override (folded into the config)");
    trace->add_option("--strategy", trace_strategy, "decode strategy override")
        ->check(CLI::IsMember({"vanilla", "hierarchical"}));
    trace->add_option("--task", trace_task, "environment task id");

    cli::CommonArgs verify_args;
    std::vector<std::string> verify_paths;
    CLI::App* verify = app.add_subcommand("verify", "check artifact config hashes and seeds");
    cli::add_common(verify, verify_args);
    verify->add_option("artifacts", verify_paths, "artifact paths to check")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            RunConfig cfg = cli::effective_config(gen_args);
            if (gen->count("--n") > 0) cfg.episodes = gen_n;
            if (gen->count("--out") > 0) cfg.dataset_path = gen->get_option("--out")->as<std::string>();
            try {
                cfg.validate();
            } catch (const std::exception& e) {
                throw UsageError(e.what());
            }
            return cmd_gen_data(cfg);
        }
        if (train->parsed()) {
            RunConfig cfg = cli::effective_config(train_args);
            if (train->count("--data") > 0) {
                cfg.dataset_path = train->get_option("--data")->as<std::string>();
            }
            if (train->count("--out") > 0) {
                cfg.checkpoint_path = train->get_option("--out")->as<std::string>();
            }
            return cmd_train(cfg, train_resume, train_stop_after);
        }
        if (eval->parsed()) {
            RunConfig cfg = cli::effective_config(eval_args);
            if (eval_suite.empty() && eval_ckpt.empty()) {
                throw UsageError("eval needs --ckpt (or --suite for an ablation run)");
            }
            return cmd_eval(cfg, eval_ckpt, eval_suite);
        }
        if (trace->parsed()) {
            cli::CommonArgs folded = trace_args;
            if (trace->count("--seed") > 0) {
                folded.sets.push_back("run.seed=" + std::to_string(trace_seed));
            }
            if (!trace_strategy.empty()) {
                folded.sets.push_back("decode.strategy=" + trace_strategy);
            }
            RunConfig cfg = cli::effective_config(folded);
            std::string out = trace_out.empty()
                                  ? (std::filesystem::path(cfg.report_dir) / "trace.jsonl").string()
                                  : trace_out;
            return cmd_decode_trace(cfg, trace_ckpt, out, trace_task);
        }
        if (verify->parsed()) {
            RunConfig cfg = cli::effective_config(verify_args);
            return cmd_verify(cfg, verify_paths);
        }
        throw UsageError("no subcommand selected");
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace diffact
