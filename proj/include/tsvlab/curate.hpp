#pragma once

// Confidence-based selection of pseudo-labeled samples and exemplar-set
// augmentation.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"
#include "tsvlab/vmf.hpp"

namespace tsvlab {

struct IdProbs {
    std::string id;
    ClassProbs probs;
};

struct UncertaintyRecord {
    std::string id;
    double omega = 0.0;
    TargetDistribution q;
};

struct SelectionResult {
    std::vector<std::string> ids;  // ascending omega, ties by id
    std::size_t k_requested = 0;
    std::size_t k_effective = 0;
};

// omega_i = -sum_c q_i(c) log p_i(c).
inline std::vector<UncertaintyRecord> uncertainty_scores(std::span<const IdProbs> qs, std::span<const IdProbs> ps) {
    if (qs.size() != ps.size()) {
        throw Error("id-mismatch", "soft labels and posteriors differ in length");
    }
    std::vector<UncertaintyRecord> out;
    out.reserve(qs.size());
    for (std::size_t i = 0; i < qs.size(); ++i) {
        if (qs[i].id != ps[i].id) {
            throw Error("id-mismatch", "soft label '" + qs[i].id + "' aligned with posterior '" + ps[i].id + "'");
        }
        const double omega = cross_entropy(qs[i].probs, ps[i].probs);
        if (!std::isfinite(omega)) {
            throw Error("non-finite", "uncertainty for '" + qs[i].id + "' is not finite");
        }
        out.push_back({qs[i].id, std::max(omega, 0.0), qs[i].probs});
    }
    return out;
}

inline SelectionResult select_topk(std::span<const UncertaintyRecord> records, std::size_t k) {
    if (records.empty()) throw Error("empty-input", "no records to select from");
    if (k < 1) throw Error("invalid-argument", "K must be at least 1");
    std::vector<const UncertaintyRecord*> order;
    order.reserve(records.size());
    for (const auto& r : records) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const UncertaintyRecord* a, const UncertaintyRecord* b) {
        if (a->omega != b->omega) return a->omega < b->omega;
        return a->id < b->id;
    });
    SelectionResult sel;
    sel.k_requested = k;
    sel.k_effective = std::min(k, records.size());
    if (k > records.size()) {
        warn("select_topk: K=" + std::to_string(k) + " exceeds " + std::to_string(records.size()) +
             " candidates; selecting all");
    }
    for (std::size_t i = 0; i < sel.k_effective; ++i) sel.ids.push_back(order[i]->id);
    return sel;
}

// One element of the training pool: a sequence with its target distribution.
struct TrainingExample {
    std::string id;
    TokenSequence sequence;
    TargetDistribution target;
    bool pseudo_labeled = false;
};

inline std::vector<TrainingExample> exemplar_pool(const Dataset& exemplars) {
    std::vector<TrainingExample> out;
    out.reserve(exemplars.records.size());
    for (const auto& r : exemplars.records) {
        if (r.label == Label::unlabeled) {
            throw Error("unlabeled-exemplar", "exemplar '" + r.id + "' carries no label");
        }
        out.push_back({r.id, r.sequence, one_hot(r.label), false});
    }
    return out;
}

// Returns base plus the selected unlabeled samples with their soft targets.
// `soft_labels` is aligned with `unlabeled`.
inline std::vector<TrainingExample> augment_exemplars(std::vector<TrainingExample> base, const SelectionResult& selected,
                                                      std::span<const UnlabeledExample> unlabeled,
                                                      std::span<const TargetDistribution> soft_labels) {
    if (soft_labels.size() != unlabeled.size()) {
        throw Error("id-mismatch", "soft labels not aligned with the unlabeled set");
    }
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < unlabeled.size(); ++i) index.emplace(unlabeled[i].id, i);
    std::unordered_set<std::string> seen;
    for (const auto& e : base) seen.insert(e.id);
    base.reserve(base.size() + selected.ids.size());
    for (const auto& id : selected.ids) {
        auto it = index.find(id);
        if (it == index.end()) throw Error("unknown-id", "selected id '" + id + "' not in the unlabeled set");
        if (!seen.insert(id).second) throw Error("duplicate-id", "id '" + id + "' already in the training set");
        base.push_back({id, unlabeled[it->second].sequence, soft_labels[it->second], true});
    }
    return base;
}

inline std::vector<TrainingExample> augment_exemplars(const Dataset& exemplars, const SelectionResult& selected,
                                                      std::span<const UnlabeledExample> unlabeled,
                                                      std::span<const TargetDistribution> soft_labels) {
    return augment_exemplars(exemplar_pool(exemplars), selected, unlabeled, soft_labels);
}

inline std::optional<Label> argmax_label(const ClassProbs& q) {
    if (q.truthful > q.hallucinated) return Label::truthful;
    if (q.hallucinated > q.truthful) return Label::hallucinated;
    return std::nullopt;
}

// Fraction of selected samples whose argmax pseudo-label equals the hidden
// label; exact ties count as wrong.
inline double pseudo_label_accuracy(const SelectionResult& selected, std::span<const IdProbs> soft_labels,
                                    const HiddenLabels& hidden) {
    if (selected.ids.empty()) throw Error("empty-input", "empty selection");
    std::unordered_map<std::string, ClassProbs> q;
    for (const auto& s : soft_labels) q.emplace(s.id, s.probs);
    std::size_t correct = 0;
    for (const auto& id : selected.ids) {
        auto h = hidden.find(id);
        if (h == hidden.end()) throw Error("missing-hidden-label", "no hidden label for '" + id + "'");
        auto qi = q.find(id);
        if (qi == q.end()) throw Error("unknown-id", "no soft label for '" + id + "'");
        auto lab = argmax_label(qi->second);
        if (lab && *lab == h->second) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(selected.ids.size());
}

}  // namespace tsvlab
