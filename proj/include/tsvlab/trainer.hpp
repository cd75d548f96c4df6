#pragma once

// Two-phase training of the steering vector:
//   1. initial phase on the labeled exemplars (one-hot targets);
//   2. pseudo-label the unlabeled pool by optimal transport, keep the K
//      most confident samples, and continue training on exemplars plus
//      selected samples (soft targets).
// Each mini-batch: forward -> loss -> vjp -> AdamW step on v -> EMA update
// of both prototypes from the batch's embeddings.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsvlab/backend.hpp"
#include "tsvlab/curate.hpp"
#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"
#include "tsvlab/io.hpp"
#include "tsvlab/rng.hpp"
#include "tsvlab/sinkhorn.hpp"
#include "tsvlab/vmf.hpp"

namespace tsvlab {

enum class ClassPriorMode { exemplar, uniform, oracle };

inline std::string_view to_string(ClassPriorMode m) {
    switch (m) {
        case ClassPriorMode::exemplar: return "exemplar";
        case ClassPriorMode::uniform: return "uniform";
        case ClassPriorMode::oracle: return "oracle";
    }
    return "exemplar";
}

inline std::optional<ClassPriorMode> parse_prior_mode(std::string_view s) {
    if (s == "exemplar") return ClassPriorMode::exemplar;
    if (s == "uniform") return ClassPriorMode::uniform;
    if (s == "oracle") return ClassPriorMode::oracle;
    return std::nullopt;
}

struct TrainConfig {
    double lambda = 5.0;
    double kappa = 10.0;
    double ema_decay = 0.99;
    double epsilon = 0.05;
    int sinkhorn_iters = 3;
    int n_initial_epochs = 20;
    int n_augmented_epochs = 20;
    int batch_size = 128;
    double learning_rate = 5e-3;
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int k_select = 128;
    int n_exemplars = 32;
    int layer = 0;
    SteeringLocation location = SteeringLocation::residual;
    std::uint64_t seed = 0;
    ClassPriorMode w_mode = ClassPriorMode::exemplar;
    int rounds = 1;
    double v_init_scale = 0.01;
    bool harden_pseudo_labels = false;
    bool recompute_ema_embeddings = false;

    bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lambda", c.lambda},
                       {"kappa", c.kappa},
                       {"ema_decay", c.ema_decay},
                       {"epsilon", c.epsilon},
                       {"sinkhorn_iters", c.sinkhorn_iters},
                       {"n_initial_epochs", c.n_initial_epochs},
                       {"n_augmented_epochs", c.n_augmented_epochs},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},
                       {"adam_eps", c.adam_eps},
                       {"k_select", c.k_select},
                       {"n_exemplars", c.n_exemplars},
                       {"layer", c.layer},
                       {"location", to_string(c.location)},
                       {"seed", c.seed},
                       {"w_mode", to_string(c.w_mode)},
                       {"rounds", c.rounds},
                       {"v_init_scale", c.v_init_scale},
                       {"harden_pseudo_labels", c.harden_pseudo_labels},
                       {"recompute_ema_embeddings", c.recompute_ema_embeddings}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("lambda").get_to(c.lambda);
    j.at("kappa").get_to(c.kappa);
    j.at("ema_decay").get_to(c.ema_decay);
    j.at("epsilon").get_to(c.epsilon);
    j.at("sinkhorn_iters").get_to(c.sinkhorn_iters);
    j.at("n_initial_epochs").get_to(c.n_initial_epochs);
    j.at("n_augmented_epochs").get_to(c.n_augmented_epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("adam_beta1").get_to(c.adam_beta1);
    j.at("adam_beta2").get_to(c.adam_beta2);
    j.at("adam_eps").get_to(c.adam_eps);
    j.at("k_select").get_to(c.k_select);
    j.at("n_exemplars").get_to(c.n_exemplars);
    j.at("layer").get_to(c.layer);
    auto loc = parse_location(j.at("location").get<std::string>());
    if (!loc) throw Error("corrupt", "unknown steering location in config");
    c.location = *loc;
    j.at("seed").get_to(c.seed);
    auto mode = parse_prior_mode(j.at("w_mode").get<std::string>());
    if (!mode) throw Error("corrupt", "unknown w_mode in config");
    c.w_mode = *mode;
    j.at("rounds").get_to(c.rounds);
    j.at("v_init_scale").get_to(c.v_init_scale);
    j.at("harden_pseudo_labels").get_to(c.harden_pseudo_labels);
    j.at("recompute_ema_embeddings").get_to(c.recompute_ema_embeddings);
}

inline void validate(const TrainConfig& c, int backend_layers) {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw Error("invalid-argument", msg);
    };
    require(c.lambda >= 0.0 && std::isfinite(c.lambda), "lambda must be finite and >= 0");
    require(c.kappa >= 0.0 && std::isfinite(c.kappa), "kappa must be finite and >= 0");
    require(c.ema_decay >= 0.0 && c.ema_decay <= 1.0, "ema_decay must lie in [0, 1]");
    require(c.epsilon > 0.0, "epsilon must be positive");
    require(c.sinkhorn_iters >= 1, "sinkhorn_iters must be at least 1");
    require(c.n_initial_epochs >= 0 && c.n_augmented_epochs >= 0, "epoch counts must be >= 0");
    require(c.batch_size >= 1, "batch_size must be at least 1");
    require(c.learning_rate >= 0.0, "learning_rate must be >= 0");
    require(c.weight_decay >= 0.0, "weight_decay must be >= 0");
    require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0 && c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0,
            "adam betas must lie in [0, 1)");
    require(c.adam_eps > 0.0, "adam_eps must be positive");
    require(c.k_select >= 1, "k_select must be at least 1");
    require(c.n_exemplars >= 1, "n_exemplars must be at least 1");
    require(c.rounds >= 1, "rounds must be at least 1");
    require(c.v_init_scale >= 0.0, "v_init_scale must be >= 0");
    if (backend_layers > 0 && (c.layer < 0 || c.layer >= backend_layers)) {
        throw Error("invalid-layer", "layer " + std::to_string(c.layer) + " outside valid range [0, " +
                                         std::to_string(backend_layers - 1) + "]");
    }
}

// ---------------------------------------------------------------------------

struct AdamState {
    Vector m;
    Vector s;
    long step = 0;

    explicit AdamState(std::size_t d = 0) : m(d, 0.0), s(d, 0.0) {}
};

struct AdamHyper {
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled weight decay, then the bias-corrected adaptive-moment step.
inline void adamw_step(Vector& param, AdamState& st, std::span<const double> grad, const AdamHyper& h) {
    if (grad.size() != param.size() || st.m.size() != param.size()) {
        throw Error("dimension-mismatch", "adamw_step: shape mismatch");
    }
    if (!all_finite(grad)) throw Error("non-finite", "adamw_step: non-finite gradient");
    ++st.step;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        param[i] *= 1.0 - h.lr * h.weight_decay;
        st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * grad[i];
        st.s[i] = h.beta2 * st.s[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        const double mhat = st.m[i] / bc1;
        const double shat = st.s[i] / bc2;
        param[i] -= h.lr * mhat / (std::sqrt(shat) + h.eps);
    }
}

// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointFormat = "tsvlab-ckpt";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    TrainConfig config;
    Vector v;
    Prototypes prototypes;
    nlohmann::json backend;

    SteeringSpec steering() const { return {v, config.layer, config.lambda, config.location}; }
    std::size_t dim() const noexcept { return v.size(); }
};

inline std::string checkpoint_to_string(const Checkpoint& ck) {
    nlohmann::ordered_json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["config"] = nlohmann::json(ck.config);
    j["v"] = ck.v;
    j["mu_truthful"] = ck.prototypes.truthful;
    j["mu_hallucinated"] = ck.prototypes.hallucinated;
    j["backend"] = ck.backend;
    return j.dump(2) + "\n";
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("corrupt", std::string("checkpoint is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("format", "") != kCheckpointFormat) {
        throw Error("corrupt", "not a tsvlab checkpoint");
    }
    if (!j.contains("version") || j["version"] != kCheckpointVersion) {
        throw Error("version-mismatch", "checkpoint version " + (j.contains("version") ? j["version"].dump() : "?") +
                                            ", expected " + std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    try {
        ck.config = j.at("config").get<TrainConfig>();
        ck.v = j.at("v").get<Vector>();
        ck.prototypes.truthful = j.at("mu_truthful").get<Vector>();
        ck.prototypes.hallucinated = j.at("mu_hallucinated").get<Vector>();
        ck.prototypes.kappa = ck.config.kappa;
        ck.backend = j.at("backend");
    } catch (const nlohmann::json::exception& e) {
        throw Error("corrupt", std::string("checkpoint field error: ") + e.what());
    }
    if (ck.v.empty() || ck.prototypes.truthful.size() != ck.v.size() || ck.prototypes.hallucinated.size() != ck.v.size()) {
        throw Error("corrupt", "checkpoint vectors have inconsistent dimensions");
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    write_file_atomic(path, checkpoint_to_string(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_string(read_file(path)); }

inline void check_compatible(const Checkpoint& ck, const Backend& backend) {
    if (ck.dim() != static_cast<std::size_t>(backend.dim())) {
        throw Error("dimension-mismatch", "checkpoint has d=" + std::to_string(ck.dim()) + " but backend has d=" +
                                              std::to_string(backend.dim()));
    }
    if (backend.n_layers() > 0 && ck.config.layer >= backend.n_layers()) {
        throw Error("invalid-layer", "checkpoint layer " + std::to_string(ck.config.layer) + " outside backend depth");
    }
}

// ---------------------------------------------------------------------------

struct TrainLogEntry {
    int epoch = 0;
    std::string phase;
    double mean_loss = 0.0;
    std::optional<double> pl_acc;
};

inline std::string train_log_to_string(std::span<const TrainLogEntry> log) {
    std::string out;
    for (const auto& e : log) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["phase"] = e.phase;
        j["mean_loss"] = e.mean_loss;
        if (e.pl_acc) j["pl_acc"] = *e.pl_acc;
        out += j.dump();
        out += '\n';
    }
    return out;
}

struct TrainState {
    SteeringSpec steering;
    Prototypes prototypes;
    AdamState adam;
    int epoch = 0;
    std::string phase = "initial";
};

struct TrainOptions {
    // Ground truth of the unlabeled pool, read only to report pseudo-label accuracy.
    const HiddenLabels* audit = nullptr;
    // Class prior used when w_mode == oracle.
    std::optional<ClassDistribution> oracle_w;
    // Keep v at zero and skip gradient steps; prototypes still follow the EMA.
    bool freeze_steering = false;
};

struct SelectionRound {
    SelectionResult selection;
    ClassDistribution w;
    std::optional<double> pl_acc;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogEntry> log;
    std::vector<SelectionRound> rounds;
    // Snapshot at the end of the initial phase.
    Vector v_after_initial;
    Prototypes prototypes_after_initial;
};

namespace detail {

inline ClassProbs posterior_from_u(const Prototypes& p, std::span<const double> u) {
    return class_posterior(p, normalize_embedding(u));
}

class Trainer {
public:
    Trainer(const TrainConfig& cfg, Backend& backend, const TrainOptions& opts)
        : cfg_(cfg), backend_(backend), opts_(opts), shuffle_rng_(cfg.seed ^ 0x243f6a8885a308d3ULL) {
        const auto d = static_cast<std::size_t>(backend.dim());
        Rng init_rng(cfg.seed);
        state_.steering.v.assign(d, 0.0);
        if (!opts.freeze_steering) {
            for (double& x : state_.steering.v) x = cfg.v_init_scale * init_rng.normal();
        }
        state_.steering.layer = cfg.layer;
        state_.steering.strength = cfg.lambda;
        state_.steering.location = cfg.location;
        state_.prototypes = random_prototypes(d, cfg.kappa, init_rng);
        state_.adam = AdamState(d);
    }

    TrainState& state() { return state_; }

    double run_epoch(const std::vector<TrainingExample>& pool) {
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle_rng_.shuffle(order);
        double total = 0.0;
        const auto bs = static_cast<std::size_t>(cfg_.batch_size);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<const TrainingExample*> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(&pool[order[i]]);
            total += train_batch(batch) * static_cast<double>(batch.size());
        }
        ++state_.epoch;
        return pool.empty() ? 0.0 : total / static_cast<double>(pool.size());
    }

    std::vector<ClassProbs> posteriors(std::span<const UnlabeledExample> pool) {
        std::vector<ClassProbs> out;
        out.reserve(pool.size());
        const auto bs = static_cast<std::size_t>(cfg_.batch_size);
        for (std::size_t start = 0; start < pool.size(); start += bs) {
            std::vector<BatchItem> items;
            for (std::size_t i = start; i < std::min(pool.size(), start + bs); ++i) {
                items.push_back({pool[i].id, pool[i].sequence});
            }
            auto eb = backend_.forward_batch(state_.steering, items, false);
            for (const auto& e : eb.embeddings) out.push_back(posterior_from_u(state_.prototypes, e.u));
        }
        return out;
    }

private:
    double train_batch(const std::vector<const TrainingExample*>& batch) {
        std::vector<BatchItem> items;
        items.reserve(batch.size());
        for (const auto* ex : batch) items.push_back({ex->id, ex->sequence});
        const bool learn = !opts_.freeze_steering;
        auto eb = backend_.forward_batch(state_.steering, items, learn);

        std::vector<HeadSample> samples;
        samples.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            samples.push_back({normalize_embedding(eb.embeddings[i].u), batch[i]->target});
        }
        const double loss = nll_loss(state_.prototypes, samples);
        if (!std::isfinite(loss)) {
            throw Error("non-finite", "non-finite loss (lambda=" + std::to_string(cfg_.lambda) +
                                          ", layer=" + std::to_string(cfg_.layer) + ")");
        }
        if (learn) {
            const double scale = 1.0 / static_cast<double>(batch.size());
            std::vector<ExampleGrad> grads;
            grads.reserve(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Vector g = loss_grad_wrt_u(state_.prototypes, eb.embeddings[i].u, batch[i]->target);
                for (double& x : g) x *= scale;
                grads.push_back({batch[i]->id, std::move(g)});
            }
            Vector grad_v = backend_.vjp_batch(eb.token, grads);
            if (!all_finite(grad_v)) {
                throw Error("non-finite", "non-finite steering gradient (lambda=" + std::to_string(cfg_.lambda) +
                                              ", layer=" + std::to_string(cfg_.layer) + ")");
            }
            adamw_step(state_.steering.v, state_.adam, grad_v,
                       {cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps, cfg_.weight_decay});
            if (cfg_.recompute_ema_embeddings) {
                auto fresh = backend_.forward_batch(state_.steering, items, false);
                for (std::size_t i = 0; i < batch.size(); ++i) samples[i].r = normalize_embedding(fresh.embeddings[i].u);
            }
        }
        for (Label c : kClasses) state_.prototypes = ema_update(state_.prototypes, c, samples, cfg_.ema_decay);
        return loss;
    }

    TrainConfig cfg_;
    Backend& backend_;
    TrainOptions opts_;
    Rng shuffle_rng_;
    TrainState state_;
};

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, Backend& backend, const Dataset& exemplars,
                         std::span<const UnlabeledExample> unlabeled, const TrainOptions& opts = {}) {
    validate(cfg, backend.n_layers());
    const ClassDistribution exemplar_w = class_distribution_from_exemplars(exemplars);

    detail::Trainer trainer(cfg, backend, opts);
    TrainResult result;
    auto pool = exemplar_pool(exemplars);

    for (int e = 0; e < cfg.n_initial_epochs; ++e) {
        const double loss = trainer.run_epoch(pool);
        result.log.push_back({e + 1, "initial", loss, std::nullopt});
    }
    result.v_after_initial = trainer.state().steering.v;
    result.prototypes_after_initial = trainer.state().prototypes;

    std::unordered_set<std::string> used;
    for (const auto& ex : pool) used.insert(ex.id);
    for (int round = 0; round < cfg.rounds; ++round) {
        std::vector<UnlabeledExample> candidates;
        for (const auto& u : unlabeled) {
            if (!used.contains(u.id)) candidates.push_back(u);
        }
        std::optional<double> pl_acc;
        if (candidates.empty()) {
            warn("no unlabeled samples left for pseudo-labeling; augmented phase uses exemplars only");
        } else {
            ClassDistribution w = exemplar_w;
            if (cfg.w_mode == ClassPriorMode::uniform) {
                w = {0.5, 0.5};
            } else if (cfg.w_mode == ClassPriorMode::oracle) {
                if (!opts.oracle_w) throw Error("invalid-argument", "w_mode=oracle needs an oracle class distribution");
                w = *opts.oracle_w;
            }
            const auto post = trainer.posteriors(candidates);
            const auto jp = build_joint_posterior(post);
            const auto plan = sinkhorn(jp, w, {cfg.epsilon, cfg.sinkhorn_iters, 1e-12});
            auto soft = plan_to_soft_labels(plan);
            if (cfg.harden_pseudo_labels) {
                for (auto& q : soft) {
                    auto lab = argmax_label(q);
                    q = one_hot(lab.value_or(Label::hallucinated));
                }
            }
            std::vector<IdProbs> qs, ps;
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                qs.push_back({candidates[i].id, soft[i]});
                ps.push_back({candidates[i].id, post[i]});
            }
            const auto records = uncertainty_scores(qs, ps);
            auto selection = select_topk(records, static_cast<std::size_t>(cfg.k_select));
            if (opts.audit) pl_acc = pseudo_label_accuracy(selection, qs, *opts.audit);
            pool = augment_exemplars(std::move(pool), selection, candidates, soft);
            for (const auto& id : selection.ids) used.insert(id);
            result.rounds.push_back({std::move(selection), w, pl_acc});
        }
        trainer.state().phase = "augmented";
        for (int e = 0; e < cfg.n_augmented_epochs; ++e) {
            const double loss = trainer.run_epoch(pool);
            result.log.push_back({e + 1, "augmented", loss, pl_acc});
        }
    }

    result.checkpoint.config = cfg;
    result.checkpoint.v = trainer.state().steering.v;
    result.checkpoint.prototypes = trainer.state().prototypes;
    result.checkpoint.backend = backend.descriptor();
    return result;
}

}  // namespace tsvlab
