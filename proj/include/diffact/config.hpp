#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

#include "diffact/decoder.hpp"
#include "diffact/diffusion.hpp"
#include "diffact/env.hpp"
#include "diffact/model.hpp"
#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

inline std::string to_string(DecodeStrategy v) {
    return v == DecodeStrategy::vanilla ? "vanilla" : "hierarchical";
}
inline std::string to_string(SelectionMode v) {
    return v == SelectionMode::greedy ? "greedy" : "sample";
}
inline std::string to_string(FocusMode v) {
    return v == FocusMode::consecutive ? "consecutive" : "re_argmax";
}
inline std::string to_string(ConfidenceSource v) {
    return v == ConfidenceSource::softmax_prob ? "softmax_prob" : "raw_logit";
}
inline std::string to_string(ActionScoreMode v) {
    return v == ActionScoreMode::masked_only ? "masked_only" : "all_tokens";
}
inline std::string to_string(LossWeighting v) {
    return v == LossWeighting::inverse_time ? "inverse_time" : "plain_mean";
}

enum class ChunkExecution { full, first_m };
inline std::string to_string(ChunkExecution v) {
    return v == ChunkExecution::full ? "full" : "first_m";
}

// Full run configuration: one root seed plus sections for every stage. The
// file format is plain-text key/value with [section] headers; flags fold into
// the same structure before hashing so artifacts record the effective config.
struct RunConfig {
    // run
    std::uint64_t seed = 1;
    // paths (plumbing; excluded from the canonical form — see canonical_json)
    std::string dataset_path = "out/train.jsonl";
    std::string checkpoint_path = "out/model.ckpt";
    std::string report_dir = "out";
    // tokenizer
    int base_vocab = 512;
    int action_vocab = 32;
    double percentile_lo = 1.0;
    double percentile_hi = 99.0;
    // model
    int embed_dim = 128;
    int layers = 4;
    int heads = 4;
    int max_seq_len = 96;
    // diffusion / objective
    LossWeighting loss_weighting = LossWeighting::inverse_time;
    bool localized_head = true;  // false: full-vocab classification baseline
    // decode
    int decode_total_steps = 10;
    int decode_iters_per_action = 2;
    DecodeStrategy decode_strategy = DecodeStrategy::hierarchical;
    SelectionMode decode_selection = SelectionMode::greedy;
    double decode_temperature = 1.0;
    FocusMode decode_focus_mode = FocusMode::consecutive;
    ConfidenceSource decode_confidence = ConfidenceSource::softmax_prob;
    ActionScoreMode decode_action_score = ActionScoreMode::masked_only;
    // env / data
    int episodes = 2000;
    int chunk = 5;
    int horizon_limit = kHorizonLimit;
    // train
    double lr = 3e-4;
    int batch = 64;
    int epochs = 3;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    // eval
    int n_trials = 200;
    ChunkExecution chunk_execution = ChunkExecution::full;
    int first_m = 1;

    VocabLayout make_layout() const { return VocabLayout::make(base_vocab, action_vocab); }

    // All command randomness flows from the root seed through named streams,
    // so artifacts produced by separate commands line up exactly.
    std::uint64_t data_seed() const { return derive_seed(seed, "data"); }
    std::uint64_t train_seed() const { return derive_seed(seed, "train"); }
    std::uint64_t eval_seed() const { return derive_seed(seed, "eval"); }
    std::uint64_t decode_seed() const { return derive_seed(seed, "decode"); }

    PredictorConfig make_predictor_config() const {
        VocabLayout layout = make_layout();
        PredictorConfig pc;
        pc.embed_dim = embed_dim;
        pc.layers = layers;
        pc.heads = heads;
        pc.max_seq_len = max_seq_len;
        pc.vocab_in = layout.vocab_in();
        pc.classes_out = localized_head ? layout.action_vocab_size : layout.vocab_total();
        pc.cond_dim = kObservationDim;
        pc.n_tasks = kNumTasks;
        pc.obs_prefix_len = 3;
        pc.validate();
        return pc;
    }

    DecodeConfig make_decode_config(std::uint64_t decode_seed) const {
        DecodeConfig dc;
        dc.total_steps = decode_total_steps;
        dc.iters_per_action = decode_iters_per_action;
        dc.strategy = decode_strategy;
        dc.selection = decode_selection;
        dc.temperature = decode_temperature;
        dc.seed = decode_seed;
        dc.focus_mode = decode_focus_mode;
        dc.confidence = decode_confidence;
        dc.action_score = decode_action_score;
        dc.validate(chunk);
        return dc;
    }

    void validate() const {
        make_layout().validate();
        make_predictor_config();
        if (chunk < 1) throw std::invalid_argument("env.chunk must be >= 1");
        if (episodes < 1) throw std::invalid_argument("env.episodes must be >= 1");
        if (horizon_limit < 1) throw std::invalid_argument("env.horizon_limit must be >= 1");
        if (!(percentile_lo >= 0.0 && percentile_lo < percentile_hi && percentile_hi <= 100.0)) {
            throw std::invalid_argument("tokenizer percentiles must satisfy 0 <= lo < hi <= 100");
        }
        if (!(lr > 0.0)) throw std::invalid_argument("train.lr must be > 0");
        if (batch < 1) throw std::invalid_argument("train.batch must be >= 1");
        if (epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
        if (weight_decay < 0.0) throw std::invalid_argument("train.weight_decay must be >= 0");
        if (!(clip_norm > 0.0)) throw std::invalid_argument("train.clip_norm must be > 0");
        if (n_trials < 1) throw std::invalid_argument("eval.n_trials must be >= 1");
        if (first_m < 1 || first_m > chunk) {
            throw std::invalid_argument("eval.first_m must be in [1, chunk]");
        }
        const int seq_len = 1 + 3 + chunk * kActionDims;
        if (seq_len > max_seq_len) {
            throw std::invalid_argument("model.max_seq_len too small for chunk length");
        }
        make_decode_config(0);
    }

    // Canonical form: every semantic field, nested by section, serialized with
    // sorted keys. Output paths are deliberately excluded so that writing the
    // same run to a different directory keeps the same hash.
    nlohmann::json canonical_json() const {
        return nlohmann::json{
            {"run", {{"seed", seed}}},
            {"tokenizer",
             {{"base_vocab", base_vocab},
              {"action_vocab", action_vocab},
              {"percentile_lo", percentile_lo},
              {"percentile_hi", percentile_hi}}},
            {"model",
             {{"embed_dim", embed_dim},
              {"layers", layers},
              {"heads", heads},
              {"max_seq_len", max_seq_len}}},
            {"diffusion",
             {{"loss_weighting", to_string(loss_weighting)},
              {"localized_head", localized_head}}},
            {"decode",
             {{"total_steps", decode_total_steps},
              {"iters_per_action", decode_iters_per_action},
              {"strategy", to_string(decode_strategy)},
              {"selection", to_string(decode_selection)},
              {"temperature", decode_temperature},
              {"focus_mode", to_string(decode_focus_mode)},
              {"confidence", to_string(decode_confidence)},
              {"action_score", to_string(decode_action_score)}}},
            {"env",
             {{"episodes", episodes}, {"chunk", chunk}, {"horizon_limit", horizon_limit}}},
            {"train",
             {{"lr", lr},
              {"batch", batch},
              {"epochs", epochs},
              {"weight_decay", weight_decay},
              {"clip_norm", clip_norm}}},
            {"eval",
             {{"n_trials", n_trials},
              {"chunk_execution", to_string(chunk_execution)},
              {"first_m", first_m}}},
        };
    }

    std::string canonical_text() const { return canonical_json().dump(); }

    std::string hash() const {
        std::uint64_t h = fnv1a(canonical_text());
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return std::string(buf);
    }

    void set(const std::string& dotted_key, const std::string& value);
    void apply_profile(const std::string& name);
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    long long v;
    try {
        v = std::stoll(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key " + key + ": not an integer: '" + value + "'");
    }
    if (pos != value.size()) {
        throw std::invalid_argument("config key " + key + ": not an integer: '" + value + "'");
    }
    return v;
}

inline double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key " + key + ": not a number: '" + value + "'");
    }
    if (pos != value.size()) {
        throw std::invalid_argument("config key " + key + ": not a number: '" + value + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config key " + key + ": not a boolean: '" + value + "'");
}

template <typename Enum>
Enum parse_enum(const std::string& key, const std::string& value,
                std::initializer_list<std::pair<const char*, Enum>> table) {
    for (const auto& [name, v] : table) {
        if (value == name) return v;
    }
    std::string allowed;
    for (const auto& [name, v] : table) {
        if (!allowed.empty()) allowed += "|";
        allowed += name;
    }
    throw std::invalid_argument("config key " + key + ": expected one of " + allowed + ", got '" +
                                value + "'");
}

}  // namespace detail

inline void RunConfig::set(const std::string& dotted_key, const std::string& raw_value) {
    const std::string value = detail::trim(raw_value);
    const std::string& k = dotted_key;
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_enum;
    using detail::parse_int;

    if (k == "run.seed") {
        long long v = parse_int(k, value);
        if (v < 0) throw std::invalid_argument("run.seed must be >= 0");
        seed = static_cast<std::uint64_t>(v);
    } else if (k == "paths.dataset") {
        dataset_path = value;
    } else if (k == "paths.checkpoint") {
        checkpoint_path = value;
    } else if (k == "paths.report_dir") {
        report_dir = value;
    } else if (k == "tokenizer.base_vocab") {
        base_vocab = static_cast<int>(parse_int(k, value));
    } else if (k == "tokenizer.action_vocab") {
        action_vocab = static_cast<int>(parse_int(k, value));
    } else if (k == "tokenizer.percentile_lo") {
        percentile_lo = parse_double(k, value);
    } else if (k == "tokenizer.percentile_hi") {
        percentile_hi = parse_double(k, value);
    } else if (k == "model.embed_dim") {
        embed_dim = static_cast<int>(parse_int(k, value));
    } else if (k == "model.layers") {
        layers = static_cast<int>(parse_int(k, value));
    } else if (k == "model.heads") {
        heads = static_cast<int>(parse_int(k, value));
    } else if (k == "model.max_seq_len") {
        max_seq_len = static_cast<int>(parse_int(k, value));
    } else if (k == "diffusion.loss_weighting") {
        loss_weighting = parse_enum<LossWeighting>(
            k, value,
            {{"inverse_time", LossWeighting::inverse_time},
             {"plain_mean", LossWeighting::plain_mean}});
    } else if (k == "diffusion.localized_head") {
        localized_head = parse_bool(k, value);
    } else if (k == "decode.total_steps") {
        decode_total_steps = static_cast<int>(parse_int(k, value));
    } else if (k == "decode.iters_per_action") {
        decode_iters_per_action = static_cast<int>(parse_int(k, value));
    } else if (k == "decode.strategy") {
        decode_strategy = parse_enum<DecodeStrategy>(
            k, value,
            {{"vanilla", DecodeStrategy::vanilla},
             {"hierarchical", DecodeStrategy::hierarchical}});
    } else if (k == "decode.selection") {
        decode_selection = parse_enum<SelectionMode>(
            k, value, {{"greedy", SelectionMode::greedy}, {"sample", SelectionMode::sample}});
    } else if (k == "decode.temperature") {
        decode_temperature = parse_double(k, value);
    } else if (k == "decode.focus_mode") {
        decode_focus_mode = parse_enum<FocusMode>(
            k, value,
            {{"consecutive", FocusMode::consecutive}, {"re_argmax", FocusMode::re_argmax}});
    } else if (k == "decode.confidence") {
        decode_confidence = parse_enum<ConfidenceSource>(
            k, value,
            {{"softmax_prob", ConfidenceSource::softmax_prob},
             {"raw_logit", ConfidenceSource::raw_logit}});
    } else if (k == "decode.action_score") {
        decode_action_score = parse_enum<ActionScoreMode>(
            k, value,
            {{"masked_only", ActionScoreMode::masked_only},
             {"all_tokens", ActionScoreMode::all_tokens}});
    } else if (k == "env.episodes") {
        episodes = static_cast<int>(parse_int(k, value));
    } else if (k == "env.chunk") {
        chunk = static_cast<int>(parse_int(k, value));
    } else if (k == "env.horizon_limit") {
        horizon_limit = static_cast<int>(parse_int(k, value));
    } else if (k == "train.lr") {
        lr = parse_double(k, value);
    } else if (k == "train.batch") {
        batch = static_cast<int>(parse_int(k, value));
    } else if (k == "train.epochs") {
        epochs = static_cast<int>(parse_int(k, value));
    } else if (k == "train.weight_decay") {
        weight_decay = parse_double(k, value);
    } else if (k == "train.clip_norm") {
        clip_norm = parse_double(k, value);
    } else if (k == "eval.n_trials") {
        n_trials = static_cast<int>(parse_int(k, value));
    } else if (k == "eval.chunk_execution") {
        chunk_execution = parse_enum<ChunkExecution>(
            k, value, {{"full", ChunkExecution::full}, {"first_m", ChunkExecution::first_m}});
    } else if (k == "eval.first_m") {
        first_m = static_cast<int>(parse_int(k, value));
    } else if (k == "paths.dataset") {
        dataset_path = value;  // paths never enter the canonical form or hash
    } else if (k == "paths.checkpoint") {
        checkpoint_path = value;
    } else if (k == "paths.report_dir") {
        report_dir = value;
    } else {
        throw std::invalid_argument("unknown config key: " + k);
    }
}

// Named presets applied before file/flag overrides. "micro" shrinks the run
// far enough for smoke tests and sub-minute training.
inline void RunConfig::apply_profile(const std::string& name) {
    if (name == "default") return;
    if (name == "micro") {
        embed_dim = 32;
        layers = 2;
        heads = 2;
        episodes = 64;
        epochs = 1;
        batch = 32;
        n_trials = 50;
        return;
    }
    throw std::invalid_argument("unknown profile: " + name);
}

// Plain-text config: '#' or ';' comments, [section] headers, key = value
// lines. Keys outside any section are rejected.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = RunConfig{}) {
    RunConfig cfg = base;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') {
                throw std::invalid_argument("config line " + std::to_string(line_no) +
                                            ": malformed section header");
            }
            section = detail::trim(s.substr(1, s.size() - 2));
            if (section.empty()) {
                throw std::invalid_argument("config line " + std::to_string(line_no) +
                                            ": empty section name");
            }
            continue;
        }
        std::size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key = value");
        }
        std::string key = detail::trim(s.substr(0, eq));
        std::string value = detail::trim(s.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
        }
        if (section.empty()) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": key outside any [section]");
        }
        cfg.set(section + "." + key, value);
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = RunConfig{}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str(), base);
}

}  // namespace diffact
