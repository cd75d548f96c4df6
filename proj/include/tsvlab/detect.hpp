#pragma once

// Inference-time scoring, thresholded detection, AUROC and evaluation reports.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsvlab/backend.hpp"
#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"
#include "tsvlab/trainer.hpp"
#include "tsvlab/vmf.hpp"

namespace tsvlab {

struct ScoreRecord {
    std::string id;
    double score = 0.5;
    std::optional<Label> label;
};

// Truthful-class posterior of each sequence's steered embedding.
inline std::vector<ScoreRecord> score_items(const Checkpoint& ck, Backend& backend, std::span<const BatchItem> items,
                                            std::size_t batch_size = 128) {
    check_compatible(ck, backend);
    const auto steer = ck.steering();
    std::vector<ScoreRecord> out;
    out.reserve(items.size());
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
        const auto end = std::min(items.size(), start + batch_size);
        auto eb = backend.forward_batch(steer, items.subspan(start, end - start), false);
        for (const auto& e : eb.embeddings) {
            out.push_back({e.id, class_posterior(ck.prototypes, normalize_embedding(e.u)).truthful, std::nullopt});
        }
    }
    return out;
}

inline double truthfulness_score(const Checkpoint& ck, Backend& backend, const TokenSequence& seq) {
    const BatchItem item{"probe", seq};
    return score_items(ck, backend, std::span<const BatchItem>(&item, 1)).front().score;
}

inline std::vector<ScoreRecord> score_dataset(const Checkpoint& ck, Backend& backend, const Dataset& d,
                                              std::size_t batch_size = 128) {
    std::vector<BatchItem> items;
    items.reserve(d.records.size());
    for (const auto& r : d.records) items.push_back({r.id, r.sequence});
    auto scores = score_items(ck, backend, items, batch_size);
    const auto truth = hidden_labels(d);
    for (auto& s : scores) {
        if (auto it = truth.find(s.id); it != truth.end()) s.label = it->second;
    }
    return scores;
}

// 1 (truthful) iff score >= zeta.
inline int detect(double score, double zeta = 0.5) {
    if (!(zeta >= 0.0 && zeta <= 1.0)) throw Error("invalid-argument", "threshold must lie in [0, 1]");
    return score >= zeta ? 1 : 0;
}

struct LabeledScore {
    double score;
    Label label;
};

// Mann-Whitney form: (rank sum of truthful - n_t (n_t + 1) / 2) / (n_t n_h),
// with tied scores sharing their average rank.
inline double auroc(std::span<const LabeledScore> scores) {
    std::size_t n_t = 0, n_h = 0;
    for (const auto& s : scores) {
        if (s.label == Label::truthful) {
            ++n_t;
        } else if (s.label == Label::hallucinated) {
            ++n_h;
        } else {
            throw Error("invalid-argument", "auroc needs labeled scores");
        }
    }
    if (n_t == 0 || n_h == 0) throw Error("single-class", "auroc needs both classes");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a].score < scores[b].score; });
    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]].score == scores[idx[i]].score) ++j;
        // ranks i+1 .. j+1 share their mean
        const double avg_rank = 0.5 * static_cast<double>(i + j + 2);
        for (std::size_t k = i; k <= j; ++k) {
            if (scores[idx[k]].label == Label::truthful) rank_sum += avg_rank;
        }
        i = j + 1;
    }
    const double nt = static_cast<double>(n_t);
    const double nh = static_cast<double>(n_h);
    return (rank_sum - nt * (nt + 1.0) / 2.0) / (nt * nh);
}

inline double auroc(std::span<const ScoreRecord> records) {
    std::vector<LabeledScore> ls;
    ls.reserve(records.size());
    for (const auto& r : records) {
        if (!r.label) throw Error("missing-hidden-label", "score for '" + r.id + "' has no ground-truth label");
        ls.push_back({r.score, *r.label});
    }
    return auroc(std::span<const LabeledScore>(ls));
}

struct NormStats {
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

inline NormStats summarize_norms(std::span<const double> norms) {
    if (norms.empty()) throw Error("empty-input", "no norms to summarize");
    NormStats s;
    s.count = norms.size();
    s.min = *std::min_element(norms.begin(), norms.end());
    s.max = *std::max_element(norms.begin(), norms.end());
    for (double n : norms) s.mean += n;
    s.mean /= static_cast<double>(norms.size());
    double var = 0.0;
    for (double n : norms) var += (n - s.mean) * (n - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(norms.size()));
    return s;
}

// L2 norms of final-layer last-token embeddings, steered by `ck` when given.
inline NormStats norm_stats(Backend& backend, const Checkpoint* ck, const Dataset& d, std::size_t batch_size = 128) {
    if (d.records.empty()) throw Error("empty-input", "dataset is empty");
    SteeringSpec steer{Vector(static_cast<std::size_t>(backend.dim()), 0.0), 0, 0.0, SteeringLocation::residual};
    if (ck) {
        check_compatible(*ck, backend);
        steer = ck->steering();
    }
    std::vector<double> norms;
    for (std::size_t start = 0; start < d.records.size(); start += batch_size) {
        std::vector<BatchItem> items;
        for (std::size_t i = start; i < std::min(d.records.size(), start + batch_size); ++i) {
            items.push_back({d.records[i].id, d.records[i].sequence});
        }
        auto eb = backend.forward_batch(steer, items, false);
        for (const auto& e : eb.embeddings) norms.push_back(norm2(e.u));
    }
    return summarize_norms(norms);
}

inline nlohmann::json to_json(const NormStats& s) {
    return {{"mean", s.mean}, {"stddev", s.stddev}, {"min", s.min}, {"max", s.max}, {"count", s.count}};
}

inline constexpr std::size_t kHistogramBins = 20;

struct EvalReport {
    double auroc = 0.5;
    std::size_t n_truthful = 0;
    std::size_t n_hallucinated = 0;
    std::vector<std::size_t> histogram_truthful;      // 20 uniform bins on [0, 1]
    std::vector<std::size_t> histogram_hallucinated;
    NormStats norms;
    nlohmann::json config;
    std::string source;
    std::string target;
};

inline std::size_t histogram_bin(double score) {
    const auto b = static_cast<std::size_t>(std::floor(score * static_cast<double>(kHistogramBins)));
    return std::min(b, kHistogramBins - 1);
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["auroc"] = r.auroc;
    j["count"] = {{"truthful", r.n_truthful}, {"hallucinated", r.n_hallucinated}};
    j["histogram"] = {{"bins", kHistogramBins},
                      {"truthful", r.histogram_truthful},
                      {"hallucinated", r.histogram_hallucinated}};
    j["norms"] = to_json(r.norms);
    j["config"] = r.config;
    if (!r.source.empty()) j["source"] = r.source;
    if (!r.target.empty()) j["target"] = r.target;
    return j;
}

// Scores a labeled test set. `training_ids`, when given, must be disjoint
// from the test ids.
inline EvalReport evaluate(const Checkpoint& ck, Backend& backend, const Dataset& test,
                           const std::unordered_set<std::string>* training_ids = nullptr) {
    if (training_ids) {
        for (const auto& r : test.records) {
            if (training_ids->contains(r.id)) {
                throw Error("leakage", "test id '" + r.id + "' also appears in the training data");
            }
        }
    }
    auto scores = score_dataset(ck, backend, test);
    EvalReport rep;
    rep.histogram_truthful.assign(kHistogramBins, 0);
    rep.histogram_hallucinated.assign(kHistogramBins, 0);
    for (const auto& s : scores) {
        if (!s.label) throw Error("missing-hidden-label", "test record '" + s.id + "' has no label");
        if (*s.label == Label::truthful) {
            ++rep.n_truthful;
            ++rep.histogram_truthful[histogram_bin(s.score)];
        } else {
            ++rep.n_hallucinated;
            ++rep.histogram_hallucinated[histogram_bin(s.score)];
        }
    }
    if (rep.n_truthful == 0 || rep.n_hallucinated == 0) {
        throw Error("single-class", "test set contains a single class");
    }
    rep.auroc = auroc(std::span<const ScoreRecord>(scores));
    rep.norms = norm_stats(backend, &ck, test);
    rep.config = ck.config;
    return rep;
}

inline EvalReport transfer_evaluate(const Checkpoint& ck, Backend& backend, const Dataset& test,
                                    std::string source_name, std::string target_name) {
    auto rep = evaluate(ck, backend, test);
    rep.source = std::move(source_name);
    rep.target = std::move(target_name);
    return rep;
}

}  // namespace tsvlab
