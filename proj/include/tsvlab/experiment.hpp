#pragma once

// Synthetic end-to-end runs shared by the CLI sweeps and the acceptance suite:
// generate data, split it, train, and score a held-out test set.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "tsvlab/backend.hpp"
#include "tsvlab/datamodel.hpp"
#include "tsvlab/detect.hpp"
#include "tsvlab/trainer.hpp"

namespace tsvlab {

struct DataSplits {
    Dataset exemplars;
    Dataset unlabeled;  // hidden labels kept for auditing only
    Dataset test;
};

// N labeled exemplars; the remainder is divided between the unlabeled pool and
// the test set by `test_fraction`.
inline DataSplits make_splits(const Dataset& all, std::size_t n_exemplars, double test_fraction, std::uint64_t seed) {
    auto ex = split_exemplar_unlabeled(all, n_exemplars, seed);
    auto [test, pool] = split_fraction(ex.unlabeled, test_fraction, seed ^ 0x9e3779b97f4a7c15ULL);
    return {std::move(ex.exemplars), std::move(pool), std::move(test)};
}

inline std::unordered_set<std::string> training_ids(const DataSplits& s) {
    std::unordered_set<std::string> ids;
    for (const auto& r : s.exemplars.records) ids.insert(r.id);
    for (const auto& r : s.unlabeled.records) ids.insert(r.id);
    return ids;
}

struct RunOutcome {
    TrainResult trained;
    double auroc = 0.5;
    std::optional<double> pl_acc;  // first selection round
};

inline RunOutcome train_and_evaluate(const TrainConfig& cfg, Backend& backend, const DataSplits& splits,
                                     bool freeze_steering = false) {
    const auto pool = unlabeled_view(splits.unlabeled);
    const auto audit = hidden_labels(splits.unlabeled);
    TrainOptions opts;
    opts.audit = &audit;
    opts.freeze_steering = freeze_steering;
    if (cfg.w_mode == ClassPriorMode::oracle) {
        ClassProbs w{0.0, 0.0};
        for (const auto& [id, lab] : audit) (lab == Label::truthful ? w.truthful : w.hallucinated) += 1.0;
        const double n = w.sum();
        if (n > 0) opts.oracle_w = ClassProbs{w.truthful / n, w.hallucinated / n};
    }
    RunOutcome out;
    out.trained = train(cfg, backend, splits.exemplars, pool, opts);
    const auto ids = training_ids(splits);
    out.auroc = evaluate(out.trained.checkpoint, backend, splits.test, &ids).auroc;
    if (!out.trained.rounds.empty()) out.pl_acc = out.trained.rounds.front().pl_acc;
    return out;
}

// Prototypes fitted by EMA on raw embeddings: the steering vector stays at
// zero and only the exemplar phase runs.
inline RunOutcome baseline_run(TrainConfig cfg, Backend& backend, const DataSplits& splits) {
    cfg.n_augmented_epochs = 0;
    return train_and_evaluate(cfg, backend, splits, true);
}

struct ExperimentSpec {
    SynthConfig synth;
    std::size_t count = 512;
    ModelConfig model;
    TrainConfig train;
    double test_fraction = 0.5;
};

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
    j = {{"count", s.count},
         {"test_fraction", s.test_fraction},
         {"synth",
          {{"vocab_size", s.synth.vocab_size},
           {"seq_len", s.synth.seq_len},
           {"prompt_len", s.synth.prompt_len},
           {"pi", s.synth.pi},
           {"template_noise", s.synth.template_noise},
           {"seed", s.synth.seed},
           {"template_id", s.synth.template_id}}},
         {"model", s.model},
         {"train", s.train}};
}

inline DataSplits synth_splits(const ExperimentSpec& spec) {
    const auto all = synth_generate(spec.synth, spec.count);
    return make_splits(all, static_cast<std::size_t>(spec.train.n_exemplars), spec.test_fraction, spec.train.seed);
}

}  // namespace tsvlab
