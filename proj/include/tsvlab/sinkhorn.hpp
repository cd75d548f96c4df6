#pragma once

// Pseudo-label assignment by entropic optimal transport between M unlabeled
// samples (uniform mass 1/M each) and the two classes (mass w).
//
// The plan is Q = diag(row_scaling) K diag(col_scaling) with the Gibbs
// kernel K = P^(1/epsilon). With epsilon = 0.05 the kernel entries are P^20
// and underflow double precision almost immediately, so all scaling is done
// on logarithms.

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"

namespace tsvlab {

using Row2 = std::array<double, 2>;

struct JointPosterior {
    std::vector<Row2> P;  // P[m][c] = p(c | r_m) / M

    std::size_t size() const noexcept { return P.size(); }
};

struct SinkhornParams {
    double epsilon = 0.05;
    int n_iter = 3;
    double p_floor = 1e-12;
};

struct TransportPlan {
    std::vector<Row2> Q;
    ClassDistribution w;
    int iterations = 0;
    double epsilon = 0.0;
};

inline JointPosterior build_joint_posterior(std::span<const ClassProbs> posteriors, double p_floor = 1e-12) {
    if (posteriors.empty()) throw Error("empty-input", "no posteriors to transport");
    const auto M = static_cast<double>(posteriors.size());
    JointPosterior jp;
    jp.P.reserve(posteriors.size());
    for (const auto& p : posteriors) {
        if (std::abs(p.sum() - 1.0) > 1e-9 || p.truthful < 0.0 || p.hallucinated < 0.0) {
            throw Error("invalid-posterior", "posterior pairs must be non-negative and sum to 1");
        }
        jp.P.push_back({std::max(p.truthful, p_floor) / M, std::max(p.hallucinated, p_floor) / M});
    }
    return jp;
}

namespace detail {

inline double logsumexp2(double a, double b) {
    const double mx = std::max(a, b);
    if (mx == -std::numeric_limits<double>::infinity()) return mx;
    return mx + std::log(std::exp(a - mx) + std::exp(b - mx));
}

// Sequential, fixed-order log-sum-exp down a column.
inline double logsumexp_column(const std::vector<Row2>& logk, const std::vector<double>& log_row, int c) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < logk.size(); ++m) mx = std::max(mx, logk[m][c] + log_row[m]);
    if (mx == -std::numeric_limits<double>::infinity()) return mx;
    double s = 0.0;
    for (std::size_t m = 0; m < logk.size(); ++m) s += std::exp(logk[m][c] + log_row[m] - mx);
    return mx + std::log(s);
}

}  // namespace detail

// Alternates the row update then the column update n_iter times, starting
// from unit column scaling. The column update runs last, so the class
// marginal of the returned plan is exact up to rounding.
inline TransportPlan sinkhorn(const JointPosterior& jp, const ClassDistribution& w, const SinkhornParams& params) {
    if (jp.P.empty()) throw Error("empty-input", "empty joint posterior");
    if (!(params.epsilon > 0.0)) throw Error("invalid-argument", "epsilon must be positive");
    if (params.n_iter < 1) throw Error("invalid-argument", "n_iter must be at least 1");
    if (!(w.truthful > 0.0 && w.hallucinated > 0.0)) {
        throw Error("degenerate-class", "class distribution must be strictly positive in both classes");
    }
    const std::size_t M = jp.P.size();
    const double inv_eps = 1.0 / params.epsilon;
    const double log_inv_m = -std::log(static_cast<double>(M));
    const Row2 log_w{std::log(w.truthful), std::log(w.hallucinated)};

    std::vector<Row2> logk(M);
    for (std::size_t m = 0; m < M; ++m) {
        for (int c = 0; c < 2; ++c) logk[m][c] = std::log(std::max(jp.P[m][c], 0.0)) * inv_eps;
    }
    Row2 log_col{0.0, 0.0};
    std::vector<double> log_row(M, 0.0);
    for (int it = 0; it < params.n_iter; ++it) {
        for (std::size_t m = 0; m < M; ++m) {
            log_row[m] = log_inv_m - detail::logsumexp2(logk[m][0] + log_col[0], logk[m][1] + log_col[1]);
        }
        for (int c = 0; c < 2; ++c) log_col[c] = log_w[c] - detail::logsumexp_column(logk, log_row, c);
        if (!std::isfinite(log_col[0]) || !std::isfinite(log_col[1])) {
            throw Error("non-finite", "sinkhorn scaling diverged (epsilon " + std::to_string(params.epsilon) + ")");
        }
    }
    TransportPlan plan;
    plan.w = w;
    plan.iterations = params.n_iter;
    plan.epsilon = params.epsilon;
    plan.Q.resize(M);
    for (std::size_t m = 0; m < M; ++m) {
        if (!std::isfinite(log_row[m])) {
            throw Error("non-finite", "sinkhorn row scaling diverged at row " + std::to_string(m));
        }
        for (int c = 0; c < 2; ++c) plan.Q[m][c] = std::exp(log_row[m] + logk[m][c] + log_col[c]);
    }
    return plan;
}

// q(c | r_m) = M Q[m][c], renormalized per row.
inline std::vector<TargetDistribution> plan_to_soft_labels(const TransportPlan& plan) {
    std::vector<TargetDistribution> out;
    out.reserve(plan.Q.size());
    for (std::size_t m = 0; m < plan.Q.size(); ++m) {
        const double total = plan.Q[m][0] + plan.Q[m][1];
        if (!(total >= 1e-300)) {
            throw Error("degenerate-plan", "transport plan row " + std::to_string(m) + " has no mass");
        }
        TargetDistribution q{plan.Q[m][0] / total, plan.Q[m][1] / total};
        out.push_back(q);
    }
    return out;
}

}  // namespace tsvlab
