#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffact/model.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

// Binary checkpoint container: magic, format version, a JSON header carrying
// the model config / vocab layout / bin spec / tensor table, then raw 32-bit
// float parameter blobs in header-declared order. Optimizer moments follow
// the parameters when present so training can resume byte-identically.
inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'F', 'F', 'A', 'C', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
    long long step = 0;  // completed optimizer steps
};

struct Checkpoint {
    PredictorConfig config;
    VocabLayout vocab;
    BinSpec bins;
    std::vector<float> params;
    bool has_optimizer = false;
    AdamState adam;
    std::string config_hash;  // hash of the producing run config
    std::uint64_t seed = 0;   // root seed of the producing run

    // Rebuild a model from the stored parameters.
    Predictor<float> make_predictor() const {
        Predictor<float> model(config, /*seed=*/0);
        if (model.param_count() != params.size()) {
            throw std::runtime_error("checkpoint parameter count " +
                                     std::to_string(params.size()) + " does not match config (" +
                                     std::to_string(model.param_count()) + ")");
        }
        std::copy(params.begin(), params.end(), model.params().begin());
        model.check_finite();
        return model;
    }
};

namespace detail {

inline void write_bytes(std::ofstream& out, const void* data, std::size_t n,
                        const std::string& path) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline void read_bytes(std::ifstream& in, void* data, std::size_t n, const std::string& path) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
        throw std::runtime_error("truncated checkpoint: " + path);
    }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Predictor<float>& model,
                            const VocabLayout& vocab, const BinSpec& bins,
                            const std::string& config_hash, std::uint64_t seed,
                            const AdamState* adam = nullptr) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const TensorSpec& s : model.tensor_specs()) {
        tensors.push_back({{"name", s.name}, {"size", s.size}});
    }
    nlohmann::json header{
        {"config", model.config()},
        {"vocab", vocab},
        {"bins", bins},
        {"tensors", tensors},
        {"config_hash", config_hash},
        {"seed", seed},
        {"optimizer", adam != nullptr},
        {"step", adam ? adam->step : 0},
    };
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    detail::write_bytes(out, kCheckpointMagic, sizeof(kCheckpointMagic), path);
    std::uint32_t version = kCheckpointVersion;
    detail::write_bytes(out, &version, sizeof(version), path);
    std::uint64_t header_len = header_text.size();
    detail::write_bytes(out, &header_len, sizeof(header_len), path);
    detail::write_bytes(out, header_text.data(), header_text.size(), path);
    detail::write_bytes(out, model.params().data(), model.params().size() * sizeof(float), path);
    if (adam) {
        if (adam->m.size() != model.param_count() || adam->v.size() != model.param_count()) {
            throw std::runtime_error("optimizer state size does not match model parameters");
        }
        detail::write_bytes(out, adam->m.data(), adam->m.size() * sizeof(float), path);
        detail::write_bytes(out, adam->v.data(), adam->v.size() * sizeof(float), path);
    }
    out.flush();
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);

    char magic[sizeof(kCheckpointMagic)];
    detail::read_bytes(in, magic, sizeof(magic), path);
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    }
    std::uint32_t version = 0;
    detail::read_bytes(in, &version, sizeof(version), path);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " in " + path);
    }
    std::uint64_t header_len = 0;
    detail::read_bytes(in, &header_len, sizeof(header_len), path);
    if (header_len > (1u << 20)) {
        throw std::runtime_error("implausible checkpoint header length in " + path);
    }
    std::string header_text(header_len, '\0');
    detail::read_bytes(in, header_text.data(), header_len, path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt checkpoint header in " + path + ": " + e.what());
    }

    Checkpoint ckpt;
    header.at("config").get_to(ckpt.config);
    header.at("vocab").get_to(ckpt.vocab);
    header.at("bins").get_to(ckpt.bins);
    header.at("config_hash").get_to(ckpt.config_hash);
    header.at("seed").get_to(ckpt.seed);
    ckpt.has_optimizer = header.at("optimizer").get<bool>();
    ckpt.adam.step = header.at("step").get<long long>();
    ckpt.config.validate();
    ckpt.vocab.validate();
    ckpt.bins.validate();

    std::size_t total = 0;
    for (const auto& t : header.at("tensors")) {
        total += t.at("size").get<std::size_t>();
    }
    ckpt.params.resize(total);
    detail::read_bytes(in, ckpt.params.data(), total * sizeof(float), path);
    if (ckpt.has_optimizer) {
        ckpt.adam.m.resize(total);
        ckpt.adam.v.resize(total);
        detail::read_bytes(in, ckpt.adam.m.data(), total * sizeof(float), path);
        detail::read_bytes(in, ckpt.adam.v.data(), total * sizeof(float), path);
    }
    // Reject trailing garbage so corruption is loud.
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0) {
        throw std::runtime_error("trailing bytes after checkpoint payload: " + path);
    }
    return ckpt;
}

}  // namespace diffact
