#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffact/diffusion.hpp"
#include "diffact/env.hpp"
#include "diffact/model.hpp"
#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

// One expert episode: observation before each action, the action taken, and
// the final outcome. Actions are deltas, already within the clip limits.
struct EpisodeRecord {
    int task_id = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<double>> obs;
    std::vector<ActionVector> actions;
    bool success = false;
};

inline void to_json(nlohmann::json& j, const EpisodeRecord& r) {
    nlohmann::json actions = nlohmann::json::array();
    for (const ActionVector& a : r.actions) actions.push_back(a.c);
    j = nlohmann::json{{"task_id", r.task_id},
                       {"seed", r.seed},
                       {"obs", r.obs},
                       {"actions", actions},
                       {"success", r.success}};
}

inline void from_json(const nlohmann::json& j, EpisodeRecord& r) {
    j.at("task_id").get_to(r.task_id);
    j.at("seed").get_to(r.seed);
    j.at("obs").get_to(r.obs);
    r.actions.clear();
    for (const auto& row : j.at("actions")) {
        ActionVector a;
        row.get_to(a.c);
        r.actions.push_back(a);
    }
    j.at("success").get_to(r.success);
}

// Closed-loop expert rollout from a seeded reset. task_id = -1 samples a task.
inline EpisodeRecord run_expert_episode(std::uint64_t seed, int task_id = -1) {
    Env env;
    std::vector<double> ob = env.reset(seed, task_id);
    EpisodeRecord rec;
    rec.task_id = env.task().task_id;
    rec.seed = seed;
    while (!env.success() && env.steps_taken() < env.task().horizon_limit) {
        ActionVector a = scripted_expert(env.state(), env.task());
        rec.obs.push_back(ob);
        rec.actions.push_back(a);
        ob = env.step(a);
    }
    rec.success = env.success();
    return rec;
}

// Replays a record's actions from its seed and checks the stored observations
// reproduce exactly. Used as the dataset/label agreement oracle.
inline bool replay_matches(const EpisodeRecord& rec) {
    Env env;
    std::vector<double> ob = env.reset(rec.seed, rec.task_id);
    for (std::size_t k = 0; k < rec.actions.size(); ++k) {
        if (ob != rec.obs[k]) return false;
        ob = env.step(rec.actions[k]);
    }
    return true;
}

// Path of the JSON metadata sidecar written next to an artifact file.
inline std::string sidecar_path(const std::string& artifact_path) {
    return artifact_path + ".meta.json";
}

struct DatasetStats {
    std::size_t episodes = 0;
    std::size_t total_steps = 0;
    double mean_episode_length = 0.0;
    std::array<double, kActionDims> action_lo{};
    std::array<double, kActionDims> action_hi{};
};

// Generates expert episodes until `n_episodes` successes are collected
// (failed expert rollouts are excluded). The episode stream is a pure
// function of the seed, so in-memory consumers and the dataset file agree.
inline std::vector<EpisodeRecord> generate_episodes(int n_episodes, std::uint64_t seed) {
    if (n_episodes < 1) throw std::invalid_argument("generate_episodes: n_episodes must be >= 1");
    std::vector<EpisodeRecord> out;
    out.reserve(static_cast<std::size_t>(n_episodes));
    const std::uint64_t max_attempts = 10ull * static_cast<std::uint64_t>(n_episodes);
    std::uint64_t attempt = 0;
    while (static_cast<int>(out.size()) < n_episodes) {
        if (attempt >= max_attempts) {
            throw std::runtime_error("generate_episodes: expert failed too often");
        }
        EpisodeRecord rec = run_expert_episode(derive_seed(seed, attempt));
        ++attempt;
        if (rec.success) out.push_back(std::move(rec));
    }
    return out;
}

// Writes the episode stream as one JSON object per line plus a JSON sidecar
// with summary stats, the producing config hash, and the run's root seed
// (stamp_seed). The stream seed may be a derived sub-stream of the root.
inline DatasetStats generate_dataset(int n_episodes, std::uint64_t seed,
                                     const std::string& out_path,
                                     const std::string& config_hash,
                                     std::uint64_t stamp_seed) {
    std::vector<EpisodeRecord> episodes = generate_episodes(n_episodes, seed);
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("generate_dataset: cannot open " + out_path);

    DatasetStats stats;
    stats.action_lo.fill(std::numeric_limits<double>::infinity());
    stats.action_hi.fill(-std::numeric_limits<double>::infinity());

    for (const EpisodeRecord& rec : episodes) {
        nlohmann::json j = rec;
        out << j.dump() << "\n";
        stats.total_steps += rec.actions.size();
        for (const ActionVector& a : rec.actions) {
            for (int d = 0; d < kActionDims; ++d) {
                stats.action_lo[static_cast<std::size_t>(d)] =
                    std::min(stats.action_lo[static_cast<std::size_t>(d)], a[d]);
                stats.action_hi[static_cast<std::size_t>(d)] =
                    std::max(stats.action_hi[static_cast<std::size_t>(d)], a[d]);
            }
        }
    }
    stats.episodes = episodes.size();
    stats.mean_episode_length =
        static_cast<double>(stats.total_steps) / static_cast<double>(stats.episodes);
    out.close();
    if (!out) throw std::runtime_error("generate_dataset: write failed for " + out_path);

    nlohmann::json side{{"config_hash", config_hash},
                        {"seed", stamp_seed},
                        {"stream_seed", seed},
                        {"episodes", stats.episodes},
                        {"total_steps", stats.total_steps},
                        {"mean_episode_length", stats.mean_episode_length},
                        {"action_lo", stats.action_lo},
                        {"action_hi", stats.action_hi}};
    std::ofstream sideout(sidecar_path(out_path), std::ios::binary);
    if (!sideout) {
        throw std::runtime_error("generate_dataset: cannot open " + sidecar_path(out_path));
    }
    sideout << side.dump(2) << "\n";
    return stats;
}

inline DatasetStats generate_dataset(int n_episodes, std::uint64_t seed,
                                     const std::string& out_path,
                                     const std::string& config_hash) {
    return generate_dataset(n_episodes, seed, out_path, config_hash, seed);
}

inline std::vector<EpisodeRecord> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    std::vector<EpisodeRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line).get<EpisodeRecord>());
        } catch (const std::exception& e) {
            throw std::runtime_error("load_dataset: " + path + ":" + std::to_string(lineno) +
                                     ": " + e.what());
        }
    }
    return out;
}

// Collects every action in the dataset (bin-fitting input).
inline std::vector<ActionVector> all_actions(const std::vector<EpisodeRecord>& episodes) {
    std::vector<ActionVector> out;
    for (const auto& ep : episodes) out.insert(out.end(), ep.actions.begin(), ep.actions.end());
    return out;
}

// Conditioning-prefix token ids: the task id in slot 0 (readability only — the
// model injects learned embeddings at prefix positions and ignores these ids).
inline TokenSequence make_prompt(int task_id, int prompt_len) {
    TokenSequence seq;
    seq.prompt_len = prompt_len;
    seq.ids.assign(static_cast<std::size_t>(prompt_len), 0);
    seq.ids[0] = task_id;
    return seq;
}

struct TrainingExample {
    TokenSequence x0;        // prompt + K*D ground-truth action tokens
    ConditioningInput cond;  // observation at the chunk start
};

// Pads a trailing partial chunk to K steps with a hold action: zero deltas,
// gripper keeping its last commanded value.
inline ActionChunk chunk_slice(const std::vector<ActionVector>& actions, std::size_t start,
                               int k) {
    ActionChunk chunk;
    for (int i = 0; i < k; ++i) {
        std::size_t idx = start + static_cast<std::size_t>(i);
        if (idx < actions.size()) {
            chunk.steps.push_back(actions[idx]);
        } else {
            ActionVector hold{};
            hold[6] = actions.empty() ? 1.0 : actions.back()[6];
            chunk.steps.push_back(hold);
        }
    }
    return chunk;
}

// Splits episodes into non-overlapping K-step chunks, each paired with the
// observation at its first step.
inline std::vector<TrainingExample> build_training_set(const std::vector<EpisodeRecord>& episodes,
                                                       const BinSpec& bins,
                                                       const VocabLayout& layout, int k,
                                                       int prompt_len) {
    std::vector<TrainingExample> out;
    for (const auto& ep : episodes) {
        for (std::size_t start = 0; start < ep.actions.size();
             start += static_cast<std::size_t>(k)) {
            TrainingExample ex;
            ex.x0 = make_prompt(ep.task_id, prompt_len);
            std::vector<int> toks = tokenize_chunk(chunk_slice(ep.actions, start, k), bins, layout);
            ex.x0.ids.insert(ex.x0.ids.end(), toks.begin(), toks.end());
            ex.cond.observation = ep.obs[start];
            ex.cond.task_id = ep.task_id;
            out.push_back(std::move(ex));
        }
    }
    return out;
}

}  // namespace diffact
