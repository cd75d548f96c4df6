#pragma once

// Hyperspherical two-class head. Embeddings are projected onto the unit
// sphere and scored against unit prototypes with a von Mises-Fisher
// softmax: p(c | r) = exp(kappa mu_c^T r) / sum_c' exp(kappa mu_c'^T r).

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"
#include "tsvlab/linalg.hpp"
#include "tsvlab/rng.hpp"

namespace tsvlab {

struct Prototypes {
    Vector truthful;
    Vector hallucinated;
    double kappa = 10.0;

    const Vector& operator[](Label c) const { return c == Label::truthful ? truthful : hallucinated; }
    Vector& operator[](Label c) { return c == Label::truthful ? truthful : hallucinated; }
    std::size_t dim() const noexcept { return truthful.size(); }
    bool operator==(const Prototypes&) const = default;
};

inline constexpr double kMinEmbeddingNorm = 1e-12;

inline Vector normalize_embedding(std::span<const double> u) {
    const double n = norm2(u);
    if (!(n > kMinEmbeddingNorm)) {
        throw Error("degenerate-embedding", "embedding norm " + std::to_string(n) + " too small to normalize");
    }
    Vector r(u.begin(), u.end());
    for (double& x : r) x /= n;
    return r;
}

// Independent Gaussian directions, normalized.
inline Prototypes random_prototypes(std::size_t d, double kappa, Rng& rng) {
    Prototypes p;
    p.kappa = kappa;
    for (Label c : kClasses) {
        Vector g(d);
        for (double& x : g) x = rng.normal();
        p[c] = normalize_embedding(g);
    }
    return p;
}

inline ClassProbs class_posterior(const Prototypes& p, std::span<const double> r) {
    if (std::abs(norm2(r) - 1.0) > 1e-6) {
        throw Error("not-unit", "class_posterior expects a unit vector");
    }
    const double lt = p.kappa * dot(p.truthful, r);
    const double lh = p.kappa * dot(p.hallucinated, r);
    const double mx = std::max(lt, lh);
    const double et = std::exp(lt - mx);
    const double eh = std::exp(lh - mx);
    const double z = et + eh;
    ClassProbs out{et / z, eh / z};
    // The larger class is 1/z up to rounding; take it as the complement so
    // the pair sums to one to the last ulp.
    if (lt >= lh) {
        out.truthful = 1.0 - out.hallucinated;
    } else {
        out.hallucinated = 1.0 - out.truthful;
    }
    return out;
}

inline double cross_entropy(const ClassProbs& q, const ClassProbs& p) {
    double s = 0.0;
    for (Label c : kClasses) {
        if (q[c] != 0.0) s -= q[c] * std::log(p[c]);
    }
    return s;
}

struct HeadSample {
    Vector r;  // unit embedding
    TargetDistribution q;
};

inline double nll_loss(const Prototypes& p, std::span<const HeadSample> batch) {
    if (batch.empty()) throw Error("empty-batch", "nll_loss needs a non-empty batch");
    double total = 0.0;
    for (const auto& s : batch) total += cross_entropy(s.q, class_posterior(p, s.r));
    return total / static_cast<double>(batch.size());
}

// d/du of -sum_c q_c log p_c(u / |u|), prototypes held fixed:
//   (1/|u|) (I - r r^T) kappa sum_c (p_c - q_c) mu_c
inline Vector loss_grad_wrt_u(const Prototypes& p, std::span<const double> u, const TargetDistribution& q) {
    const double n = norm2(u);
    if (!(n > kMinEmbeddingNorm)) {
        throw Error("degenerate-embedding", "cannot differentiate through a near-zero embedding");
    }
    const Vector r = normalize_embedding(u);
    const ClassProbs post = class_posterior(p, r);
    const std::size_t d = u.size();
    Vector g(d, 0.0);
    for (Label c : kClasses) {
        const double coef = p.kappa * (post[c] - q[c]);
        const auto& mu = p[c];
        for (std::size_t i = 0; i < d; ++i) g[i] += coef * mu[i];
    }
    const double radial = dot(r, g);
    for (std::size_t i = 0; i < d; ++i) g[i] = (g[i] - radial * r[i]) / n;
    return g;
}

// mu_c <- normalize(decay * mu_c + (1 - decay) * rbar), rbar the q(c)-weighted
// mean of the batch's unit embeddings. The other prototype is untouched.
inline Prototypes ema_update(Prototypes p, Label c, std::span<const HeadSample> batch, double ema_decay) {
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) {
        throw Error("invalid-argument", "ema decay must lie in [0, 1]");
    }
    if (ema_decay == 1.0) return p;
    const std::size_t d = p.dim();
    double mass = 0.0;
    Vector rbar(d, 0.0);
    for (const auto& s : batch) {
        const double wgt = s.q[c];
        mass += wgt;
        for (std::size_t i = 0; i < d; ++i) rbar[i] += wgt * s.r[i];
    }
    if (!(mass > 0.0)) {
        warn("ema_update: no target mass for class " + std::string(to_string(c)) + "; prototype unchanged");
        return p;
    }
    Vector mixed(d);
    for (std::size_t i = 0; i < d; ++i) mixed[i] = ema_decay * p[c][i] + (1.0 - ema_decay) * rbar[i] / mass;
    const double n = norm2(mixed);
    if (!(n > kMinEmbeddingNorm)) {
        warn("ema_update: prototype update cancelled to zero; prototype unchanged");
        return p;
    }
    for (double& x : mixed) x /= n;
    p[c] = std::move(mixed);
    return p;
}

}  // namespace tsvlab
