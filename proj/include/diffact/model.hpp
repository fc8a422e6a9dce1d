#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffact/diffusion.hpp"
#include "diffact/linalg.hpp"
#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

// Architecture shape of the mask predictor. The conditioning prefix occupies
// 1 + obs_prefix_len positions: a learned task embedding followed by a learned
// linear projection of the observation vector.
struct PredictorConfig {
    int embed_dim = 128;
    int layers = 4;
    int heads = 4;
    int max_seq_len = 96;
    int vocab_in = 545;    // V + V_a + mask
    int classes_out = 32;  // = V_a
    int cond_dim = 24;
    int n_tasks = 4;
    int obs_prefix_len = 3;

    int head_dim() const { return embed_dim / heads; }
    int ff_dim() const { return 4 * embed_dim; }
    int prompt_len() const { return 1 + obs_prefix_len; }

    void validate() const {
        if (embed_dim <= 0 || layers <= 0 || heads <= 0) {
            throw std::invalid_argument("predictor dimensions must be positive");
        }
        if (embed_dim % heads != 0) {
            throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) +
                                        " not divisible by heads " + std::to_string(heads));
        }
        if (max_seq_len <= prompt_len()) {
            throw std::invalid_argument("max_seq_len leaves no room for answer tokens");
        }
        if (vocab_in <= 0 || classes_out <= 0 || cond_dim <= 0 || n_tasks <= 0 ||
            obs_prefix_len <= 0) {
            throw std::invalid_argument("predictor config has non-positive field");
        }
    }

    bool operator==(const PredictorConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const PredictorConfig& c) {
    j = nlohmann::json{{"embed_dim", c.embed_dim},       {"layers", c.layers},
                       {"heads", c.heads},               {"max_seq_len", c.max_seq_len},
                       {"vocab_in", c.vocab_in},         {"classes_out", c.classes_out},
                       {"cond_dim", c.cond_dim},         {"n_tasks", c.n_tasks},
                       {"obs_prefix_len", c.obs_prefix_len}};
}

inline void from_json(const nlohmann::json& j, PredictorConfig& c) {
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("vocab_in").get_to(c.vocab_in);
    j.at("classes_out").get_to(c.classes_out);
    j.at("cond_dim").get_to(c.cond_dim);
    j.at("n_tasks").get_to(c.n_tasks);
    j.at("obs_prefix_len").get_to(c.obs_prefix_len);
}

struct ConditioningInput {
    std::vector<double> observation;
    int task_id = 0;
};

// One named slice of the flat parameter vector. Registration order is the
// serialization order in checkpoints.
struct TensorSpec {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool decay = false;  // participates in decoupled weight decay
};

template <typename Scalar>
struct ForwardCache {
    int n = 0;
    std::vector<Scalar> x0;  // [N,E] embedded input
    struct LayerCache {
        std::vector<Scalar> x_in;                 // [N,E] residual stream entering the layer
        std::vector<Scalar> ln1_mean, ln1_rstd;   // [N]
        std::vector<Scalar> ln1_out;              // [N,E]
        std::vector<Scalar> qkv;                  // [N,3E]
        std::vector<Scalar> att;                  // [H,N,N] softmax rows
        std::vector<Scalar> ctx;                  // [N,E] heads re-concatenated
        std::vector<Scalar> x_mid;                // [N,E] after attention residual
        std::vector<Scalar> ln2_mean, ln2_rstd;   // [N]
        std::vector<Scalar> ln2_out;              // [N,E]
        std::vector<Scalar> h_pre;                // [N,F]
        std::vector<Scalar> h_act;                // [N,F]
        std::vector<Scalar> x_out;                // [N,E] residual stream leaving the layer
    };
    std::vector<LayerCache> layers;
    std::vector<Scalar> x_final;                  // [N,E] before final norm
    std::vector<Scalar> lnf_mean, lnf_rstd;       // [N]
    std::vector<Scalar> lnf_out;                  // [N,E]
    std::vector<Scalar> logits;                   // [N,C]
};

namespace detail {

template <typename Scalar>
inline Scalar gelu(Scalar x) {
    const double k = 0.7978845608028654;  // sqrt(2/pi)
    double xd = static_cast<double>(x);
    double u = k * (xd + 0.044715 * xd * xd * xd);
    return static_cast<Scalar>(0.5 * xd * (1.0 + std::tanh(u)));
}

template <typename Scalar>
inline Scalar gelu_grad(Scalar x) {
    const double k = 0.7978845608028654;
    double xd = static_cast<double>(x);
    double u = k * (xd + 0.044715 * xd * xd * xd);
    double th = std::tanh(u);
    double sech2 = 1.0 - th * th;
    return static_cast<Scalar>(0.5 * (1.0 + th) +
                               0.5 * xd * sech2 * k * (1.0 + 3.0 * 0.044715 * xd * xd));
}

// y = gamma * (x - mean) * rstd + beta, per row; caches mean/rstd.
template <typename Scalar>
inline void layernorm_fwd(const Scalar* x, const Scalar* gamma, const Scalar* beta, Scalar* y,
                          Scalar* mean, Scalar* rstd, int n, int e) {
    const double eps = 1e-5;
    for (int i = 0; i < n; ++i) {
        const Scalar* row = x + static_cast<std::size_t>(i) * e;
        Scalar* out = y + static_cast<std::size_t>(i) * e;
        double mu = 0.0;
        for (int j = 0; j < e; ++j) mu += static_cast<double>(row[j]);
        mu /= e;
        double var = 0.0;
        for (int j = 0; j < e; ++j) {
            double d = static_cast<double>(row[j]) - mu;
            var += d * d;
        }
        var /= e;
        double rs = 1.0 / std::sqrt(var + eps);
        mean[i] = static_cast<Scalar>(mu);
        rstd[i] = static_cast<Scalar>(rs);
        for (int j = 0; j < e; ++j) {
            double xhat = (static_cast<double>(row[j]) - mu) * rs;
            out[j] = static_cast<Scalar>(static_cast<double>(gamma[j]) * xhat +
                                         static_cast<double>(beta[j]));
        }
    }
}

// Accumulates dx (+=), dgamma (+=), dbeta (+=) from dy.
template <typename Scalar>
inline void layernorm_bwd(const Scalar* x, const Scalar* gamma, const Scalar* mean,
                          const Scalar* rstd, const Scalar* dy, Scalar* dx, Scalar* dgamma,
                          Scalar* dbeta, int n, int e) {
    std::vector<double> dyg(static_cast<std::size_t>(e));
    for (int i = 0; i < n; ++i) {
        const Scalar* xrow = x + static_cast<std::size_t>(i) * e;
        const Scalar* dyrow = dy + static_cast<std::size_t>(i) * e;
        Scalar* dxrow = dx + static_cast<std::size_t>(i) * e;
        double mu = static_cast<double>(mean[i]);
        double rs = static_cast<double>(rstd[i]);
        double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
        for (int j = 0; j < e; ++j) {
            double xhat = (static_cast<double>(xrow[j]) - mu) * rs;
            double g = static_cast<double>(dyrow[j]) * static_cast<double>(gamma[j]);
            dyg[static_cast<std::size_t>(j)] = g;
            sum_dyg += g;
            sum_dyg_xhat += g * xhat;
            dgamma[j] += static_cast<Scalar>(static_cast<double>(dyrow[j]) * xhat);
            dbeta[j] += dyrow[j];
        }
        double inv_e = 1.0 / e;
        for (int j = 0; j < e; ++j) {
            double xhat = (static_cast<double>(xrow[j]) - mu) * rs;
            dxrow[j] += static_cast<Scalar>(
                rs * (dyg[static_cast<std::size_t>(j)] - sum_dyg * inv_e -
                      xhat * sum_dyg_xhat * inv_e));
        }
    }
}

}  // namespace detail

// Bidirectional transformer encoder with a classification head restricted to
// the action-token classes. Templated on scalar so the finite-difference
// gradient oracle can run the identical code path in double precision.
template <typename Scalar>
class Predictor {
  public:
    Predictor(const PredictorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        register_tensors();
        params_.assign(total_size_, Scalar(0));
        init_params(seed);
    }

    const PredictorConfig& config() const { return cfg_; }
    std::size_t param_count() const { return total_size_; }
    const std::vector<TensorSpec>& tensor_specs() const { return specs_; }

    std::vector<Scalar>& params() { return params_; }
    const std::vector<Scalar>& params() const { return params_; }

    Scalar* tensor(const std::string& name) { return params_.data() + spec(name).offset; }
    const Scalar* tensor(const std::string& name) const {
        return params_.data() + spec(name).offset;
    }
    const TensorSpec& spec(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown tensor " + name);
        return specs_[static_cast<std::size_t>(it->second)];
    }

    void check_finite() const {
        for (const auto& s : specs_) {
            if (!all_finite(params_.data() + s.offset, s.size)) {
                throw std::runtime_error("non-finite values in parameter tensor " + s.name);
            }
        }
    }

    // Fills `cache` and returns a reference to cache.logits ([N, classes_out]).
    const std::vector<Scalar>& forward(const TokenSequence& tokens,
                                       const ConditioningInput& cond,
                                       ForwardCache<Scalar>& cache) const {
        const int n = tokens.size();
        const int e = cfg_.embed_dim;
        validate_input(tokens, cond);

        cache.n = n;
        cache.x0.assign(static_cast<std::size_t>(n) * e, Scalar(0));
        embed_input(tokens, cond, cache.x0.data());

        cache.layers.resize(static_cast<std::size_t>(cfg_.layers));
        const Scalar* x = cache.x0.data();
        for (int l = 0; l < cfg_.layers; ++l) {
            auto& lc = cache.layers[static_cast<std::size_t>(l)];
            layer_forward(l, x, n, lc);        // attention half, through x_mid
            x = layer_mlp_forward(l, lc, n);   // MLP half, through x_out
        }
        cache.x_final.assign(x, x + static_cast<std::size_t>(n) * e);

        cache.lnf_mean.resize(static_cast<std::size_t>(n));
        cache.lnf_rstd.resize(static_cast<std::size_t>(n));
        cache.lnf_out.resize(static_cast<std::size_t>(n) * e);
        detail::layernorm_fwd(cache.x_final.data(), tensor("final_ln_g"), tensor("final_ln_b"),
                              cache.lnf_out.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(),
                              n, e);

        cache.logits.resize(static_cast<std::size_t>(n) * cfg_.classes_out);
        matmul_nt(cache.lnf_out.data(), tensor("head_w"), cache.logits.data(), n,
                  cfg_.classes_out, e);
        add_bias_rows(cache.logits.data(), tensor("head_b"), n, cfg_.classes_out);
        return cache.logits;
    }

    // Convenience forward returning double logits, for decoding.
    std::vector<double> forward_logits(const TokenSequence& tokens,
                                       const ConditioningInput& cond) const {
        ForwardCache<Scalar> cache;
        const auto& logits = forward(tokens, cond, cache);
        return std::vector<double>(logits.begin(), logits.end());
    }

    // Backpropagates dlogits ([N, classes_out]) through the cached forward pass,
    // accumulating into `grad` (same layout as params). Embedding rows, the
    // conditioning projection, and every layer parameter receive gradient.
    void backward(const TokenSequence& tokens, const ConditioningInput& cond,
                  const ForwardCache<Scalar>& cache, const std::vector<Scalar>& dlogits,
                  std::vector<Scalar>& grad) const {
        const int n = cache.n;
        const int e = cfg_.embed_dim;
        const int c = cfg_.classes_out;
        if (grad.size() != total_size_) throw std::invalid_argument("grad buffer size mismatch");
        if (dlogits.size() != static_cast<std::size_t>(n) * c) {
            throw std::invalid_argument("dlogits shape mismatch");
        }

        // Head: logits = lnf_out @ head_w^T + head_b.
        matmul_tn_acc(dlogits.data(), cache.lnf_out.data(), grad.data() + spec("head_w").offset,
                      n, e, c);
        colsum_acc(dlogits.data(), grad.data() + spec("head_b").offset, n, c);
        std::vector<Scalar> dx(static_cast<std::size_t>(n) * e, Scalar(0));
        matmul_nn_acc(dlogits.data(), tensor("head_w"), dx.data(), n, e, c);

        // Final norm.
        std::vector<Scalar> dxf(static_cast<std::size_t>(n) * e, Scalar(0));
        detail::layernorm_bwd(cache.x_final.data(), tensor("final_ln_g"), cache.lnf_mean.data(),
                              cache.lnf_rstd.data(), dx.data(), dxf.data(),
                              grad.data() + spec("final_ln_g").offset,
                              grad.data() + spec("final_ln_b").offset, n, e);
        dx.swap(dxf);

        for (int l = cfg_.layers - 1; l >= 0; --l) {
            layer_backward(l, cache.layers[static_cast<std::size_t>(l)], n, dx, grad);
        }
        embed_backward(tokens, cond, dx.data(), grad);
    }

    // Deterministic per-element training core: forward on an already-masked
    // sequence, cross-entropy on non-ignored labels, backward. Returns the
    // weighted loss; gradient contributions are scaled by grad_scale.
    double loss_and_grad_element(const TokenSequence& xt, const ConditioningInput& cond,
                                 const std::vector<int>& labels, double t,
                                 LossWeighting weighting, double grad_scale,
                                 ForwardCache<Scalar>& cache, std::vector<Scalar>& grad) const {
        const int n = xt.size();
        const int c = cfg_.classes_out;
        if (labels.size() != static_cast<std::size_t>(n)) {
            throw std::invalid_argument("labels length mismatch");
        }
        const auto& logits = forward(xt, cond, cache);

        int counted = 0;
        for (int i = 0; i < n; ++i) counted += (labels[static_cast<std::size_t>(i)] != kIgnoreLabel);
        if (counted == 0) throw std::invalid_argument("loss_and_grad_element: empty mask set");

        double weight = 1.0;
        if (weighting == LossWeighting::inverse_time) {
            if (!(t > 0.0)) throw std::invalid_argument("inverse-time weighting requires t > 0");
            weight = 1.0 / t;
        }
        const double row_scale = weight / counted;

        double total = 0.0;
        std::vector<Scalar> dlogits(static_cast<std::size_t>(n) * c, Scalar(0));
        for (int i = 0; i < n; ++i) {
            int label = labels[static_cast<std::size_t>(i)];
            if (label == kIgnoreLabel) continue;
            if (label < 0 || label >= c) {
                throw std::invalid_argument("label out of range at position " + std::to_string(i));
            }
            const Scalar* row = logits.data() + static_cast<std::size_t>(i) * c;
            std::vector<double> p = softmax_row_double(row, c);
            total += -std::log(std::max(p[static_cast<std::size_t>(label)], 1e-300));
            Scalar* drow = dlogits.data() + static_cast<std::size_t>(i) * c;
            for (int v = 0; v < c; ++v) {
                double delta = p[static_cast<std::size_t>(v)] - (v == label ? 1.0 : 0.0);
                drow[v] = static_cast<Scalar>(delta * row_scale * grad_scale);
            }
        }
        backward(xt, cond, cache, dlogits, grad);
        return weight * (total / counted);
    }

  private:
    PredictorConfig cfg_;
    std::vector<Scalar> params_;
    std::vector<TensorSpec> specs_;
    std::map<std::string, int> index_;
    std::size_t total_size_ = 0;

    struct LayerOffsets {
        std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
        std::size_t ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<LayerOffsets> lo_;

    std::size_t add_tensor(const std::string& name, std::size_t size, bool decay) {
        TensorSpec s{name, total_size_, size, decay};
        index_[name] = static_cast<int>(specs_.size());
        specs_.push_back(s);
        total_size_ += size;
        return s.offset;
    }

    void register_tensors() {
        const std::size_t e = static_cast<std::size_t>(cfg_.embed_dim);
        const std::size_t f = static_cast<std::size_t>(cfg_.ff_dim());
        add_tensor("tok_emb", static_cast<std::size_t>(cfg_.vocab_in) * e, false);
        add_tensor("pos_emb", static_cast<std::size_t>(cfg_.max_seq_len) * e, false);
        add_tensor("task_emb", static_cast<std::size_t>(cfg_.n_tasks) * e, false);
        add_tensor("obs_w",
                   static_cast<std::size_t>(cfg_.obs_prefix_len) * e *
                       static_cast<std::size_t>(cfg_.cond_dim),
                   true);
        add_tensor("obs_b", static_cast<std::size_t>(cfg_.obs_prefix_len) * e, false);
        lo_.resize(static_cast<std::size_t>(cfg_.layers));
        for (int l = 0; l < cfg_.layers; ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            auto& o = lo_[static_cast<std::size_t>(l)];
            o.ln1_g = add_tensor(p + "ln1_g", e, false);
            o.ln1_b = add_tensor(p + "ln1_b", e, false);
            o.qkv_w = add_tensor(p + "attn_qkv_w", 3 * e * e, true);
            o.qkv_b = add_tensor(p + "attn_qkv_b", 3 * e, false);
            o.out_w = add_tensor(p + "attn_out_w", e * e, true);
            o.out_b = add_tensor(p + "attn_out_b", e, false);
            o.ln2_g = add_tensor(p + "ln2_g", e, false);
            o.ln2_b = add_tensor(p + "ln2_b", e, false);
            o.fc1_w = add_tensor(p + "mlp_fc1_w", f * e, true);
            o.fc1_b = add_tensor(p + "mlp_fc1_b", f, false);
            o.fc2_w = add_tensor(p + "mlp_fc2_w", e * f, true);
            o.fc2_b = add_tensor(p + "mlp_fc2_b", e, false);
        }
        add_tensor("final_ln_g", e, false);
        add_tensor("final_ln_b", e, false);
        add_tensor("head_w", static_cast<std::size_t>(cfg_.classes_out) * e, true);
        add_tensor("head_b", static_cast<std::size_t>(cfg_.classes_out), false);
    }

    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "init"));
        const double base_std = 0.02;
        const double resid_std = base_std / std::sqrt(2.0 * cfg_.layers);
        auto fill_normal = [&](const std::string& name, double std_dev) {
            const TensorSpec& s = spec(name);
            for (std::size_t i = 0; i < s.size; ++i) {
                params_[s.offset + i] = static_cast<Scalar>(rng.normal() * std_dev);
            }
        };
        auto fill_const = [&](const std::string& name, double v) {
            const TensorSpec& s = spec(name);
            for (std::size_t i = 0; i < s.size; ++i) params_[s.offset + i] = static_cast<Scalar>(v);
        };
        fill_normal("tok_emb", base_std);
        fill_normal("pos_emb", base_std);
        fill_normal("task_emb", base_std);
        fill_normal("obs_w", base_std);
        fill_const("obs_b", 0.0);
        for (int l = 0; l < cfg_.layers; ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            fill_const(p + "ln1_g", 1.0);
            fill_const(p + "ln1_b", 0.0);
            fill_normal(p + "attn_qkv_w", base_std);
            fill_const(p + "attn_qkv_b", 0.0);
            fill_normal(p + "attn_out_w", resid_std);
            fill_const(p + "attn_out_b", 0.0);
            fill_const(p + "ln2_g", 1.0);
            fill_const(p + "ln2_b", 0.0);
            fill_normal(p + "mlp_fc1_w", base_std);
            fill_const(p + "mlp_fc1_b", 0.0);
            fill_normal(p + "mlp_fc2_w", resid_std);
            fill_const(p + "mlp_fc2_b", 0.0);
        }
        fill_const("final_ln_g", 1.0);
        fill_const("final_ln_b", 0.0);
        fill_normal("head_w", base_std);
        fill_const("head_b", 0.0);
    }

    void validate_input(const TokenSequence& tokens, const ConditioningInput& cond) const {
        const int n = tokens.size();
        if (n > cfg_.max_seq_len) {
            throw std::invalid_argument("sequence length " + std::to_string(n) +
                                        " exceeds max_seq_len " +
                                        std::to_string(cfg_.max_seq_len));
        }
        if (tokens.prompt_len != cfg_.prompt_len()) {
            throw std::invalid_argument("prompt_len " + std::to_string(tokens.prompt_len) +
                                        " does not match conditioning prefix " +
                                        std::to_string(cfg_.prompt_len()));
        }
        for (int i = 0; i < n; ++i) {
            int id = tokens.ids[static_cast<std::size_t>(i)];
            if (id < 0 || id >= cfg_.vocab_in) {
                throw std::invalid_argument("token id " + std::to_string(id) + " at position " +
                                            std::to_string(i) + " outside vocab_in");
            }
        }
        if (static_cast<int>(cond.observation.size()) != cfg_.cond_dim) {
            throw std::invalid_argument("observation width " +
                                        std::to_string(cond.observation.size()) +
                                        " does not match cond_dim");
        }
        if (cond.task_id < 0 || cond.task_id >= cfg_.n_tasks) {
            throw std::invalid_argument("task_id " + std::to_string(cond.task_id) +
                                        " outside [0, n_tasks)");
        }
    }

    // x0[i] = prefix embedding or token embedding, plus position embedding.
    void embed_input(const TokenSequence& tokens, const ConditioningInput& cond,
                     Scalar* x0) const {
        const int n = tokens.size();
        const int e = cfg_.embed_dim;
        const Scalar* tok = tensor("tok_emb");
        const Scalar* pos = tensor("pos_emb");
        const Scalar* task = tensor("task_emb");
        const Scalar* obs_w = tensor("obs_w");
        const Scalar* obs_b = tensor("obs_b");
        for (int i = 0; i < n; ++i) {
            Scalar* row = x0 + static_cast<std::size_t>(i) * e;
            if (i == 0) {
                const Scalar* trow = task + static_cast<std::size_t>(cond.task_id) * e;
                for (int j = 0; j < e; ++j) row[j] = trow[j];
            } else if (i < tokens.prompt_len) {
                const int chunk = i - 1;
                const Scalar* wbase =
                    obs_w + static_cast<std::size_t>(chunk) * e * cfg_.cond_dim;
                const Scalar* bbase = obs_b + static_cast<std::size_t>(chunk) * e;
                for (int j = 0; j < e; ++j) {
                    const Scalar* wrow = wbase + static_cast<std::size_t>(j) * cfg_.cond_dim;
                    double acc = static_cast<double>(bbase[j]);
                    for (int d = 0; d < cfg_.cond_dim; ++d) {
                        acc += static_cast<double>(wrow[d]) *
                               cond.observation[static_cast<std::size_t>(d)];
                    }
                    row[j] = static_cast<Scalar>(acc);
                }
            } else {
                const int id = tokens.ids[static_cast<std::size_t>(i)];
                const Scalar* trow = tok + static_cast<std::size_t>(id) * e;
                for (int j = 0; j < e; ++j) row[j] = trow[j];
            }
            const Scalar* prow = pos + static_cast<std::size_t>(i) * e;
            for (int j = 0; j < e; ++j) row[j] += prow[j];
        }
    }

    void embed_backward(const TokenSequence& tokens, const ConditioningInput& cond,
                        const Scalar* dx0, std::vector<Scalar>& grad) const {
        const int n = tokens.size();
        const int e = cfg_.embed_dim;
        Scalar* dtok = grad.data() + spec("tok_emb").offset;
        Scalar* dpos = grad.data() + spec("pos_emb").offset;
        Scalar* dtask = grad.data() + spec("task_emb").offset;
        Scalar* dobs_w = grad.data() + spec("obs_w").offset;
        Scalar* dobs_b = grad.data() + spec("obs_b").offset;
        for (int i = 0; i < n; ++i) {
            const Scalar* drow = dx0 + static_cast<std::size_t>(i) * e;
            Scalar* prow = dpos + static_cast<std::size_t>(i) * e;
            for (int j = 0; j < e; ++j) prow[j] += drow[j];
            if (i == 0) {
                Scalar* trow = dtask + static_cast<std::size_t>(cond.task_id) * e;
                for (int j = 0; j < e; ++j) trow[j] += drow[j];
            } else if (i < tokens.prompt_len) {
                const int chunk = i - 1;
                Scalar* wbase = dobs_w + static_cast<std::size_t>(chunk) * e * cfg_.cond_dim;
                Scalar* bbase = dobs_b + static_cast<std::size_t>(chunk) * e;
                for (int j = 0; j < e; ++j) {
                    Scalar* wrow = wbase + static_cast<std::size_t>(j) * cfg_.cond_dim;
                    for (int d = 0; d < cfg_.cond_dim; ++d) {
                        wrow[d] += static_cast<Scalar>(
                            static_cast<double>(drow[j]) *
                            cond.observation[static_cast<std::size_t>(d)]);
                    }
                    bbase[j] += drow[j];
                }
            } else {
                const int id = tokens.ids[static_cast<std::size_t>(i)];
                Scalar* trow = dtok + static_cast<std::size_t>(id) * e;
                for (int j = 0; j < e; ++j) trow[j] += drow[j];
            }
        }
    }

    // Attention half of the block: fills lc up to x_mid.
    void layer_forward(int l, const Scalar* x_in, int n, typename ForwardCache<Scalar>::LayerCache& lc) const {
        const int e = cfg_.embed_dim;
        const int h = cfg_.heads;
        const int dh = cfg_.head_dim();
        const auto& o = lo_[static_cast<std::size_t>(l)];
        const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));

        lc.x_in.assign(x_in, x_in + static_cast<std::size_t>(n) * e);
        lc.ln1_mean.resize(static_cast<std::size_t>(n));
        lc.ln1_rstd.resize(static_cast<std::size_t>(n));
        lc.ln1_out.resize(static_cast<std::size_t>(n) * e);
        detail::layernorm_fwd(lc.x_in.data(), params_.data() + o.ln1_g, params_.data() + o.ln1_b,
                              lc.ln1_out.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(), n, e);

        lc.qkv.resize(static_cast<std::size_t>(n) * 3 * e);
        matmul_nt(lc.ln1_out.data(), params_.data() + o.qkv_w, lc.qkv.data(), n, 3 * e, e);
        add_bias_rows(lc.qkv.data(), params_.data() + o.qkv_b, n, 3 * e);

        lc.att.assign(static_cast<std::size_t>(h) * n * n, Scalar(0));
        lc.ctx.assign(static_cast<std::size_t>(n) * e, Scalar(0));
        const std::size_t row3e = static_cast<std::size_t>(3) * e;
        for (int hh = 0; hh < h; ++hh) {
            const int qoff = hh * dh;
            const int koff = e + hh * dh;
            const int voff = 2 * e + hh * dh;
            Scalar* att_h = lc.att.data() + static_cast<std::size_t>(hh) * n * n;
            for (int i = 0; i < n; ++i) {
                const Scalar* qi = lc.qkv.data() + static_cast<std::size_t>(i) * row3e + qoff;
                Scalar* arow = att_h + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    const Scalar* kj = lc.qkv.data() + static_cast<std::size_t>(j) * row3e + koff;
                    arow[j] = dot_acc4(qi, kj, dh) * scale;
                }
            }
            softmax_rows(att_h, n, n);
            for (int i = 0; i < n; ++i) {
                const Scalar* arow = att_h + static_cast<std::size_t>(i) * n;
                Scalar* crow = lc.ctx.data() + static_cast<std::size_t>(i) * e + qoff;
                for (int j = 0; j < n; ++j) {
                    const Scalar* vj = lc.qkv.data() + static_cast<std::size_t>(j) * row3e + voff;
                    const Scalar a = arow[j];
                    for (int d = 0; d < dh; ++d) crow[d] += a * vj[d];
                }
            }
        }

        lc.x_mid.resize(static_cast<std::size_t>(n) * e);
        matmul_nt(lc.ctx.data(), params_.data() + o.out_w, lc.x_mid.data(), n, e, e);
        add_bias_rows(lc.x_mid.data(), params_.data() + o.out_b, n, e);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * e; ++i) {
            lc.x_mid[i] += lc.x_in[i];
        }
    }

    // MLP half of the block; returns the layer output buffer ([N,E]).
    const Scalar* layer_mlp_forward(int l, typename ForwardCache<Scalar>::LayerCache& lc,
                                    int n) const {
        const int e = cfg_.embed_dim;
        const int f = cfg_.ff_dim();
        const auto& o = lo_[static_cast<std::size_t>(l)];

        lc.ln2_mean.resize(static_cast<std::size_t>(n));
        lc.ln2_rstd.resize(static_cast<std::size_t>(n));
        lc.ln2_out.resize(static_cast<std::size_t>(n) * e);
        detail::layernorm_fwd(lc.x_mid.data(), params_.data() + o.ln2_g, params_.data() + o.ln2_b,
                              lc.ln2_out.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(), n, e);

        lc.h_pre.resize(static_cast<std::size_t>(n) * f);
        matmul_nt(lc.ln2_out.data(), params_.data() + o.fc1_w, lc.h_pre.data(), n, f, e);
        add_bias_rows(lc.h_pre.data(), params_.data() + o.fc1_b, n, f);
        lc.h_act.resize(static_cast<std::size_t>(n) * f);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * f; ++i) {
            lc.h_act[i] = detail::gelu(lc.h_pre[i]);
        }

        lc.x_out.resize(static_cast<std::size_t>(n) * e);
        matmul_nt(lc.h_act.data(), params_.data() + o.fc2_w, lc.x_out.data(), n, e, f);
        add_bias_rows(lc.x_out.data(), params_.data() + o.fc2_b, n, e);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * e; ++i) {
            lc.x_out[i] += lc.x_mid[i];
        }
        return lc.x_out.data();
    }

    // Reverse of one block; dx holds d(block output) on entry and d(block input)
    // on exit.
    void layer_backward(int l, const typename ForwardCache<Scalar>::LayerCache& lc, int n,
                        std::vector<Scalar>& dx, std::vector<Scalar>& grad) const {
        const int e = cfg_.embed_dim;
        const int f = cfg_.ff_dim();
        const int h = cfg_.heads;
        const int dh = cfg_.head_dim();
        const auto& o = lo_[static_cast<std::size_t>(l)];
        const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));

        // MLP: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
        std::vector<Scalar> dh_act(static_cast<std::size_t>(n) * f, Scalar(0));
        matmul_tn_acc(dx.data(), lc.h_act.data(), grad.data() + o.fc2_w, n, f, e);
        colsum_acc(dx.data(), grad.data() + o.fc2_b, n, e);
        matmul_nn_acc(dx.data(), params_.data() + o.fc2_w, dh_act.data(), n, f, e);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * f; ++i) {
            dh_act[i] *= detail::gelu_grad(lc.h_pre[i]);
        }
        std::vector<Scalar> dln2(static_cast<std::size_t>(n) * e, Scalar(0));
        matmul_tn_acc(dh_act.data(), lc.ln2_out.data(), grad.data() + o.fc1_w, n, e, f);
        colsum_acc(dh_act.data(), grad.data() + o.fc1_b, n, f);
        matmul_nn_acc(dh_act.data(), params_.data() + o.fc1_w, dln2.data(), n, e, f);
        // dx currently holds d(x_out); residual passes it through to d(x_mid),
        // and the ln2 path adds its contribution.
        detail::layernorm_bwd(lc.x_mid.data(), params_.data() + o.ln2_g, lc.ln2_mean.data(),
                              lc.ln2_rstd.data(), dln2.data(), dx.data(),
                              grad.data() + o.ln2_g, grad.data() + o.ln2_b, n, e);

        // Attention: x_mid = x_in + out_proj(ctx).
        std::vector<Scalar> dctx(static_cast<std::size_t>(n) * e, Scalar(0));
        matmul_tn_acc(dx.data(), lc.ctx.data(), grad.data() + o.out_w, n, e, e);
        colsum_acc(dx.data(), grad.data() + o.out_b, n, e);
        matmul_nn_acc(dx.data(), params_.data() + o.out_w, dctx.data(), n, e, e);

        std::vector<Scalar> dqkv(static_cast<std::size_t>(n) * 3 * e, Scalar(0));
        const std::size_t row3e = static_cast<std::size_t>(3) * e;
        std::vector<Scalar> datt(static_cast<std::size_t>(n) * n);
        for (int hh = 0; hh < h; ++hh) {
            const int qoff = hh * dh;
            const int koff = e + hh * dh;
            const int voff = 2 * e + hh * dh;
            const Scalar* att_h = lc.att.data() + static_cast<std::size_t>(hh) * n * n;
            // dA and dV.
            for (int i = 0; i < n; ++i) {
                const Scalar* dci = dctx.data() + static_cast<std::size_t>(i) * e + qoff;
                const Scalar* arow = att_h + static_cast<std::size_t>(i) * n;
                Scalar* darow = datt.data() + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    const Scalar* vj = lc.qkv.data() + static_cast<std::size_t>(j) * row3e + voff;
                    darow[j] = dot_acc4(dci, vj, dh);
                    Scalar* dvj = dqkv.data() + static_cast<std::size_t>(j) * row3e + voff;
                    const Scalar a = arow[j];
                    for (int d = 0; d < dh; ++d) dvj[d] += a * dci[d];
                }
            }
            // Softmax backward then dQ/dK.
            for (int i = 0; i < n; ++i) {
                const Scalar* arow = att_h + static_cast<std::size_t>(i) * n;
                Scalar* darow = datt.data() + static_cast<std::size_t>(i) * n;
                double inner = 0.0;
                for (int j = 0; j < n; ++j) {
                    inner += static_cast<double>(darow[j]) * static_cast<double>(arow[j]);
                }
                for (int j = 0; j < n; ++j) {
                    darow[j] = static_cast<Scalar>(
                        static_cast<double>(arow[j]) *
                        (static_cast<double>(darow[j]) - inner));
                }
                const Scalar* qi = lc.qkv.data() + static_cast<std::size_t>(i) * row3e + qoff;
                Scalar* dqi = dqkv.data() + static_cast<std::size_t>(i) * row3e + qoff;
                for (int j = 0; j < n; ++j) {
                    const Scalar ds = darow[j] * scale;
                    const Scalar* kj = lc.qkv.data() + static_cast<std::size_t>(j) * row3e + koff;
                    Scalar* dkj = dqkv.data() + static_cast<std::size_t>(j) * row3e + koff;
                    for (int d = 0; d < dh; ++d) {
                        dqi[d] += ds * kj[d];
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }

        std::vector<Scalar> dln1(static_cast<std::size_t>(n) * e, Scalar(0));
        matmul_tn_acc(dqkv.data(), lc.ln1_out.data(), grad.data() + o.qkv_w, n, e, 3 * e);
        colsum_acc(dqkv.data(), grad.data() + o.qkv_b, n, 3 * e);
        matmul_nn_acc(dqkv.data(), params_.data() + o.qkv_w, dln1.data(), n, e, 3 * e);
        detail::layernorm_bwd(lc.x_in.data(), params_.data() + o.ln1_g, lc.ln1_mean.data(),
                              lc.ln1_rstd.data(), dln1.data(), dx.data(),
                              grad.data() + o.ln1_g, grad.data() + o.ln1_b, n, e);
    }

    static void colsum_acc(const Scalar* x, Scalar* out, int m, int n) {
        for (int i = 0; i < m; ++i) {
            const Scalar* row = x + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) out[j] += row[j];
        }
    }
};

}  // namespace diffact
