#pragma once

// Small frozen causal transformer with steering-vector injection and an
// exact reverse pass with respect to the steering vector.
//
// Block i (pre-norm):
//   x    <- x + lambda*v                       (location = residual, i == l)
//   a     = rmsnorm(x) * attn_gain
//   o     = concat_h softmax_causal(q_h k_h^T / sqrt(dh)) v_h
//   o    <- o + lambda*v                       (location = attn_output, i == l)
//   x2    = x + o Wo
//   b     = rmsnorm(x2) * mlp_gain
//   m     = gelu(b W1) W2
//   m    <- m + lambda*v                       (location = mlp_output, i == l)
//   x_out = x2 + m
// The embedding u is rmsnorm(x_out[last]) * final_gain after the last block.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"
#include "tsvlab/linalg.hpp"
#include "tsvlab/rng.hpp"

namespace tsvlab {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 16;
    int n_heads = 4;
    int vocab_size = 64;
    int max_seq_len = 64;
    double rmsnorm_eps = 1e-6;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    int mlp_dim() const { return 4 * d_model; }
    bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& cfg) {
    if (cfg.n_layers < 2) throw Error("invalid-argument", "n_layers must be at least 2");
    if (cfg.d_model < 4) throw Error("invalid-argument", "d_model must be at least 4");
    if (cfg.n_heads < 1 || cfg.d_model % cfg.n_heads != 0) {
        throw Error("invalid-argument", "d_model must be divisible by n_heads");
    }
    if (cfg.vocab_size < 1 || cfg.max_seq_len < 1) throw Error("invalid-argument", "vocab_size and max_seq_len must be positive");
    if (!(cfg.rmsnorm_eps > 0.0)) throw Error("invalid-argument", "rmsnorm_eps must be positive");
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},     {"d_model", c.d_model},         {"n_heads", c.n_heads},
                       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"rmsnorm_eps", c.rmsnorm_eps},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("rmsnorm_eps").get_to(c.rmsnorm_eps);
    j.at("seed").get_to(c.seed);
}

struct LayerWeights {
    Vector attn_gain;
    Vector mlp_gain;
    Matrix wq, wk, wv, wo;  // d x d
    Matrix w1;              // d x 4d
    Matrix w2;              // 4d x d

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;  // vocab x d
    std::vector<LayerWeights> layers;
    Vector final_gain;

    bool operator==(const ModelWeights&) const = default;
};

// FNV-1a over the raw bytes of every weight; used to prove weights are frozen.
inline std::uint64_t checksum(const ModelWeights& w) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const std::vector<double>& xs) {
        for (double x : xs) {
            const auto* p = reinterpret_cast<const unsigned char*>(&x);
            for (std::size_t i = 0; i < sizeof(double); ++i) {
                h ^= p[i];
                h *= 0x100000001b3ULL;
            }
        }
    };
    feed(w.embedding.data());
    for (const auto& l : w.layers) {
        feed(l.attn_gain);
        feed(l.mlp_gain);
        feed(l.wq.data());
        feed(l.wk.data());
        feed(l.wv.data());
        feed(l.wo.data());
        feed(l.w1.data());
        feed(l.w2.data());
    }
    feed(w.final_gain);
    return h;
}

inline ModelWeights init_weights(const ModelConfig& cfg) {
    validate(cfg);
    Rng rng(cfg.seed);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto h = static_cast<std::size_t>(cfg.mlp_dim());
    auto gaussian = [&rng](std::size_t rows, std::size_t cols, double scale) {
        Matrix m(rows, cols);
        for (double& x : m.data()) x = scale * rng.normal();
        return m;
    };
    ModelWeights w;
    w.config = cfg;
    w.embedding = gaussian(static_cast<std::size_t>(cfg.vocab_size), d, 0.5);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sh = 1.0 / std::sqrt(static_cast<double>(h));
    // branches feeding the residual stream are shrunk with depth
    const double branch = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    for (int i = 0; i < cfg.n_layers; ++i) {
        LayerWeights l;
        l.attn_gain.assign(d, 1.0);
        l.mlp_gain.assign(d, 1.0);
        l.wq = gaussian(d, d, sd);
        l.wk = gaussian(d, d, sd);
        l.wv = gaussian(d, d, sd);
        l.wo = gaussian(d, d, sd * branch);
        l.w1 = gaussian(d, h, sd);
        l.w2 = gaussian(h, d, sh * branch);
        w.layers.push_back(std::move(l));
    }
    w.final_gain.assign(d, 1.0);
    return w;
}

enum class SteeringLocation { residual, mlp_output, attn_output };

inline std::string_view to_string(SteeringLocation loc) {
    switch (loc) {
        case SteeringLocation::residual: return "residual";
        case SteeringLocation::mlp_output: return "mlp_output";
        case SteeringLocation::attn_output: return "attn_output";
    }
    return "residual";
}

inline std::optional<SteeringLocation> parse_location(std::string_view s) {
    if (s == "residual" || s == "res") return SteeringLocation::residual;
    if (s == "mlp_output" || s == "mlp") return SteeringLocation::mlp_output;
    if (s == "attn_output" || s == "attn") return SteeringLocation::attn_output;
    return std::nullopt;
}

struct SteeringSpec {
    Vector v;
    int layer = 0;
    double strength = 0.0;
    SteeringLocation location = SteeringLocation::residual;
};

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
    const double inner = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(inner);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// y = gain * x / rms(x); returns rms.
inline double rmsnorm_row(std::span<const double> x, std::span<const double> gain, double eps, std::span<double> y) {
    double ss = 0.0;
    for (double xi : x) ss += xi * xi;
    const double rms = std::sqrt(ss / static_cast<double>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * x[i] / rms;
    return rms;
}

// Accumulates d(loss)/dx into dx given dy for one rmsnorm row.
inline void rmsnorm_row_backward(std::span<const double> x, std::span<const double> gain, double rms,
                                 std::span<const double> dy, std::span<double> dx) {
    const auto n = static_cast<double>(x.size());
    double proj = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) proj += gain[i] * dy[i] * x[i];
    const double coef = proj / (n * rms * rms * rms);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += gain[i] * dy[i] / rms - x[i] * coef;
}

}  // namespace detail

struct ForwardResult;

// Activations of one block, kept for the reverse pass.
struct LayerCache {
    Matrix x;         // block input (after residual injection)
    Matrix a;         // attention rmsnorm output
    Vector rms1;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // per head, T x T (causal)
    Matrix o;         // concatenated heads (after attn_output injection)
    Matrix x2;
    Matrix b;
    Vector rms2;
    Matrix pre;       // b W1
    Matrix act;       // gelu(pre)
};

// Cached activations of a steered forward pass from the injection layer on.
// A trace backs exactly one vjp_steering call.
class ForwardTrace {
public:
    ForwardTrace() = default;
    ForwardTrace(ForwardTrace&&) noexcept = default;
    ForwardTrace& operator=(ForwardTrace&&) noexcept = default;
    ForwardTrace(const ForwardTrace&) = delete;
    ForwardTrace& operator=(const ForwardTrace&) = delete;

    std::size_t seq_len() const noexcept { return seq_len_; }
    bool consumed() const noexcept { return consumed_; }
    bool steered() const noexcept { return steered_; }

private:
    friend ForwardResult forward_last_token(const ModelWeights&, const TokenSequence&, const SteeringSpec*);
    friend Vector vjp_steering(ForwardTrace&, std::span<const double>);

    const ModelWeights* weights_ = nullptr;
    std::size_t seq_len_ = 0;
    bool steered_ = false;
    bool consumed_ = false;
    int layer_ = 0;
    double strength_ = 0.0;
    SteeringLocation location_ = SteeringLocation::residual;
    std::vector<LayerCache> caches_;  // layers layer_ .. L-1
    Vector last_row;                  // final block output at the last position
    double final_rms = 1.0;
};

struct ForwardResult {
    Vector u;
    ForwardTrace trace;
};

namespace detail {

inline void check_sequence(const ModelWeights& w, const TokenSequence& seq) {
    if (seq.tokens.empty()) throw Error("invalid-sequence", "empty sequence");
    if (seq.tokens.size() > static_cast<std::size_t>(w.config.max_seq_len)) {
        throw Error("sequence-too-long", "sequence length " + std::to_string(seq.tokens.size()) + " exceeds max_seq_len " +
                                             std::to_string(w.config.max_seq_len));
    }
    for (auto t : seq.tokens) {
        if (t < 0 || t >= w.config.vocab_size) {
            throw Error("token-range", "token id " + std::to_string(t) + " outside vocabulary");
        }
    }
}

inline void add_to_rows(Matrix& m, std::span<const double> delta) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += delta[c];
    }
}

// Runs block `lw` over x in place. When `cache` is non-null every
// intermediate is stored. `inject` (already scaled by lambda) is added at
// `loc` when non-null.
inline void run_block(const ModelConfig& cfg, const LayerWeights& lw, Matrix& x, const Vector* inject,
                      SteeringLocation loc, LayerCache* cache) {
    const std::size_t T = x.rows();
    const std::size_t d = x.cols();
    const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (inject && loc == SteeringLocation::residual) add_to_rows(x, *inject);

    Matrix a(T, d);
    Vector rms1(T);
    for (std::size_t t = 0; t < T; ++t) rms1[t] = rmsnorm_row(x.row(t), lw.attn_gain, cfg.rmsnorm_eps, a.row(t));
    Matrix q = matmul(a, lw.wq);
    Matrix k = matmul(a, lw.wk);
    Matrix v = matmul(a, lw.wv);

    Matrix o(T, d);
    std::vector<Matrix> probs;
    probs.reserve(H);
    for (std::size_t h = 0; h < H; ++h) {
        Matrix p(T, T);
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < T; ++i) {
            double mx = -INFINITY;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += q(i, off + e) * k(j, off + e);
                s *= scale;
                p(i, j) = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                p(i, j) = std::exp(p(i, j) - mx);
                z += p(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
            for (std::size_t j = 0; j <= i; ++j) {
                const double pij = p(i, j);
                for (std::size_t e = 0; e < dh; ++e) o(i, off + e) += pij * v(j, off + e);
            }
        }
        probs.push_back(std::move(p));
    }
    if (inject && loc == SteeringLocation::attn_output) add_to_rows(o, *inject);

    Matrix x2 = matmul(o, lw.wo);
    for (std::size_t i = 0; i < x2.data().size(); ++i) x2.data()[i] += x.data()[i];

    Matrix b(T, d);
    Vector rms2(T);
    for (std::size_t t = 0; t < T; ++t) rms2[t] = rmsnorm_row(x2.row(t), lw.mlp_gain, cfg.rmsnorm_eps, b.row(t));
    Matrix pre = matmul(b, lw.w1);
    Matrix act(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.data().size(); ++i) act.data()[i] = gelu(pre.data()[i]);
    Matrix m = matmul(act, lw.w2);
    if (inject && loc == SteeringLocation::mlp_output) add_to_rows(m, *inject);

    Matrix out = x2;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += m.data()[i];

    if (cache) {
        cache->x = std::move(x);
        cache->a = std::move(a);
        cache->rms1 = std::move(rms1);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->o = std::move(o);
        cache->x2 = std::move(x2);
        cache->b = std::move(b);
        cache->rms2 = std::move(rms2);
        cache->pre = std::move(pre);
        cache->act = std::move(act);
    }
    x = std::move(out);
}

inline Matrix embed(const ModelWeights& w, const TokenSequence& seq) {
    const auto d = static_cast<std::size_t>(w.config.d_model);
    Matrix x(seq.tokens.size(), d);
    for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
        auto src = w.embedding.row(static_cast<std::size_t>(seq.tokens[t]));
        std::copy(src.begin(), src.end(), x.row(t).begin());
    }
    return x;
}

}  // namespace detail

// Unnormalized final-layer last-token embedding (after the final rmsnorm).
// With `steer` present, strength * v is added at every position of block
// steer->layer at steer->location.
inline ForwardResult forward_last_token(const ModelWeights& w, const TokenSequence& seq, const SteeringSpec* steer) {
    detail::check_sequence(w, seq);
    const auto& cfg = w.config;
    const auto d = static_cast<std::size_t>(cfg.d_model);

    ForwardResult res;
    auto& tr = res.trace;
    tr.weights_ = &w;
    tr.seq_len_ = seq.tokens.size();

    Vector scaled;
    bool inject = false;
    if (steer) {
        if (steer->v.size() != d) {
            throw Error("dimension-mismatch", "steering vector has dimension " + std::to_string(steer->v.size()) +
                                                  ", model expects " + std::to_string(d));
        }
        if (steer->layer < 0 || steer->layer >= cfg.n_layers) {
            throw Error("invalid-layer", "steering layer " + std::to_string(steer->layer) + " outside [0, " +
                                             std::to_string(cfg.n_layers - 1) + "]");
        }
        if (!all_finite(steer->v) || !std::isfinite(steer->strength)) {
            throw Error("non-finite", "steering vector or strength is not finite");
        }
        scaled.resize(d);
        for (std::size_t i = 0; i < d; ++i) {
            scaled[i] = steer->strength * steer->v[i];
            inject = inject || scaled[i] != 0.0;
        }
        tr.steered_ = true;
        tr.layer_ = steer->layer;
        tr.strength_ = steer->strength;
        tr.location_ = steer->location;
    }

    Matrix x = detail::embed(w, seq);
    const int first_cached = tr.steered_ ? tr.layer_ : cfg.n_layers;
    for (int i = 0; i < cfg.n_layers; ++i) {
        const Vector* add = (inject && i == tr.layer_) ? &scaled : nullptr;
        LayerCache* cache = nullptr;
        if (i >= first_cached) {
            tr.caches_.emplace_back();
            cache = &tr.caches_.back();
        }
        detail::run_block(cfg, w.layers[static_cast<std::size_t>(i)], x, add, tr.location_, cache);
    }
    auto last = x.row(x.rows() - 1);
    tr.last_row.assign(last.begin(), last.end());
    res.u.assign(d, 0.0);
    tr.final_rms = detail::rmsnorm_row(last, w.final_gain, cfg.rmsnorm_eps, res.u);
    if (!all_finite(res.u)) {
        throw Error("non-finite", "non-finite activation in forward pass (steering strength " +
                                      std::to_string(tr.strength_) + " at layer " + std::to_string(tr.layer_) + ")");
    }
    return res;
}

inline ForwardResult forward_last_token(const ModelWeights& w, const TokenSequence& seq,
                                        const std::optional<SteeringSpec>& steer = std::nullopt) {
    return forward_last_token(w, seq, steer ? &*steer : nullptr);
}

// Gradient of grad_u^T u with respect to the steering vector v. Consumes
// the trace.
inline Vector vjp_steering(ForwardTrace& tr, std::span<const double> grad_u) {
    if (tr.consumed_) throw Error("trace-consumed", "forward trace already consumed");
    if (!tr.weights_) throw Error("trace-consumed", "empty forward trace");
    tr.consumed_ = true;
    const auto& w = *tr.weights_;
    const auto& cfg = w.config;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    if (grad_u.size() != d) throw Error("dimension-mismatch", "grad_u dimension does not match model");
    if (!all_finite(grad_u)) throw Error("non-finite", "grad_u is not finite");
    Vector grad_v(d, 0.0);
    if (!tr.steered_ || tr.strength_ == 0.0) return grad_v;

    const std::size_t T = tr.seq_len_;
    const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto sum_rows = [&](const Matrix& g) {
        for (std::size_t t = 0; t < g.rows(); ++t) {
            auto row = g.row(t);
            for (std::size_t c = 0; c < d; ++c) grad_v[c] += row[c];
        }
        for (double& gv : grad_v) gv *= tr.strength_;
        return grad_v;
    };

    Matrix dx(T, d);
    detail::rmsnorm_row_backward(tr.last_row, w.final_gain, tr.final_rms, grad_u, dx.row(T - 1));

    for (int i = cfg.n_layers - 1; i >= tr.layer_; --i) {
        const auto& lw = w.layers[static_cast<std::size_t>(i)];
        const auto& c = tr.caches_[static_cast<std::size_t>(i - tr.layer_)];
        const bool at_injection = i == tr.layer_;

        // x_out = x2 + m; dm = dx.
        if (at_injection && tr.location_ == SteeringLocation::mlp_output) return sum_rows(dx);

        Matrix dact = matmul_bt(dx, lw.w2);
        for (std::size_t e = 0; e < dact.data().size(); ++e) dact.data()[e] *= detail::gelu_grad(c.pre.data()[e]);
        Matrix db = matmul_bt(dact, lw.w1);
        Matrix dx2 = dx;
        for (std::size_t t = 0; t < T; ++t) {
            detail::rmsnorm_row_backward(c.x2.row(t), lw.mlp_gain, c.rms2[t], db.row(t), dx2.row(t));
        }

        // x2 = x + o Wo.
        Matrix dout = matmul_bt(dx2, lw.wo);
        if (at_injection && tr.location_ == SteeringLocation::attn_output) return sum_rows(dout);

        Matrix dq(T, d), dk(T, d), dvv(T, d);
        for (std::size_t h = 0; h < H; ++h) {
            const auto& p = c.probs[h];
            const std::size_t off = h * dh;
            for (std::size_t i2 = 0; i2 < T; ++i2) {
                // dP_ij = do_i . v_j; dS_ij = P_ij (dP_ij - sum_j P_ij dP_ij)
                Vector dp(i2 + 1);
                double weighted = 0.0;
                for (std::size_t j = 0; j <= i2; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += dout(i2, off + e) * c.v(j, off + e);
                    dp[j] = s;
                    weighted += p(i2, j) * s;
                }
                for (std::size_t j = 0; j <= i2; ++j) {
                    const double pij = p(i2, j);
                    const double ds = pij * (dp[j] - weighted) * scale;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dq(i2, off + e) += ds * c.k(j, off + e);
                        dk(j, off + e) += ds * c.q(i2, off + e);
                        dvv(j, off + e) += pij * dout(i2, off + e);
                    }
                }
            }
        }
        Matrix da = matmul_bt(dq, lw.wq);
        {
            Matrix tmp = matmul_bt(dk, lw.wk);
            for (std::size_t e = 0; e < da.data().size(); ++e) da.data()[e] += tmp.data()[e];
            tmp = matmul_bt(dvv, lw.wv);
            for (std::size_t e = 0; e < da.data().size(); ++e) da.data()[e] += tmp.data()[e];
        }
        Matrix dxin = dx2;
        for (std::size_t t = 0; t < T; ++t) {
            detail::rmsnorm_row_backward(c.x.row(t), lw.attn_gain, c.rms1[t], da.row(t), dxin.row(t));
        }
        if (at_injection) return sum_rows(dxin);  // residual
        dx = std::move(dxin);
    }
    return grad_v;
}

// Next-token logits of the bare model (no steering), tied to the embedding table.
inline Vector generation_logits(const ModelWeights& w, const TokenSequence& seq) {
    auto res = forward_last_token(w, seq, nullptr);
    Vector logits(static_cast<std::size_t>(w.config.vocab_size));
    for (std::size_t t = 0; t < logits.size(); ++t) logits[t] = dot(w.embedding.row(t), res.u);
    return logits;
}

}  // namespace tsvlab
