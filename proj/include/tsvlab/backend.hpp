#pragma once

// Embedding backends. The trainer only talks to this interface: it asks for
// unnormalized final-layer last-token embeddings of a batch under a steering
// setting, then (optionally) for the batch-summed vector-Jacobian product with
// respect to the steering vector. One batch may be in flight per backend.

#include <atomic>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsvlab/datamodel.hpp"
#include "tsvlab/error.hpp"
#include "tsvlab/model.hpp"
#include "tsvlab/subprocess.hpp"

namespace tsvlab {

inline constexpr int kProtocolVersion = 1;

enum class BackendKind { in_process, external };

struct BatchItem {
    std::string id;
    TokenSequence sequence;
};

struct Embedding {
    std::string id;
    Vector u;
};

struct BatchToken {
    std::string value;
    bool operator==(const BatchToken&) const = default;
};

struct EmbeddingBatch {
    std::vector<Embedding> embeddings;
    BatchToken token;
};

struct ExampleGrad {
    std::string id;
    Vector g;
};

class Backend {
public:
    virtual ~Backend() = default;

    virtual BackendKind kind() const = 0;
    virtual int dim() const = 0;
    virtual int n_layers() const = 0;
    virtual const std::string& session_id() const = 0;
    // JSON descriptor that reopens an equivalent backend.
    virtual nlohmann::json descriptor() const = 0;

    // With retain_for_vjp the returned token may be passed to exactly one
    // vjp_batch call; any later forward_batch invalidates it.
    virtual EmbeddingBatch forward_batch(const SteeringSpec& steer, std::span<const BatchItem> batch,
                                         bool retain_for_vjp = true) = 0;
    virtual Vector vjp_batch(const BatchToken& token, std::span<const ExampleGrad> grads) = 0;
};

namespace detail {

inline std::string next_session_id(std::string_view prefix) {
    static std::atomic<unsigned long> counter{0};
    return std::string(prefix) + "-" + std::to_string(++counter);
}

inline void check_unique_ids(std::span<const BatchItem> batch) {
    std::unordered_set<std::string> ids;
    for (const auto& item : batch) {
        if (!ids.insert(item.id).second) throw Error("duplicate-id", "duplicate id '" + item.id + "' in batch");
    }
}

// Validates that grads cover `ids` exactly once and returns them in `ids` order.
inline std::vector<const Vector*> order_grads(const std::vector<std::string>& ids, std::span<const ExampleGrad> grads,
                                              std::size_t d) {
    std::unordered_map<std::string, const Vector*> by_id;
    for (const auto& g : grads) {
        if (g.g.size() != d) throw Error("dimension-mismatch", "gradient for '" + g.id + "' has wrong dimension");
        if (!by_id.emplace(g.id, &g.g).second) throw Error("duplicate-id", "duplicate gradient for '" + g.id + "'");
    }
    std::vector<const Vector*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw Error("missing-grads", "no gradient supplied for '" + id + "'");
        out.push_back(it->second);
    }
    if (by_id.size() != ids.size()) throw Error("unknown-id", "gradient supplied for an id outside the batch");
    return out;
}

}  // namespace detail

class InProcessBackend final : public Backend {
public:
    explicit InProcessBackend(std::shared_ptr<const ModelWeights> weights)
        : weights_(std::move(weights)), session_(detail::next_session_id("inproc")) {}

    explicit InProcessBackend(const ModelConfig& cfg)
        : InProcessBackend(std::make_shared<const ModelWeights>(init_weights(cfg))) {}

    BackendKind kind() const override { return BackendKind::in_process; }
    int dim() const override { return weights_->config.d_model; }
    int n_layers() const override { return weights_->config.n_layers; }
    const std::string& session_id() const override { return session_; }
    nlohmann::json descriptor() const override { return {{"kind", "in_process"}, {"model", weights_->config}}; }
    const ModelWeights& weights() const { return *weights_; }

    EmbeddingBatch forward_batch(const SteeringSpec& steer, std::span<const BatchItem> batch,
                                 bool retain_for_vjp = true) override {
        detail::check_unique_ids(batch);
        pending_.clear();
        pending_ids_.clear();
        pending_token_.reset();
        EmbeddingBatch out;
        out.token.value = session_ + ":b" + std::to_string(++batch_counter_);
        out.embeddings.reserve(batch.size());
        for (const auto& item : batch) {
            ForwardResult res;
            try {
                res = forward_last_token(*weights_, item.sequence, &steer);
            } catch (const Error& e) {
                throw Error(e.code(), "example '" + item.id + "': " + e.what());
            }
            out.embeddings.push_back({item.id, std::move(res.u)});
            if (retain_for_vjp) {
                pending_ids_.push_back(item.id);
                pending_.push_back(std::move(res.trace));
            }
        }
        if (retain_for_vjp) pending_token_ = out.token;
        return out;
    }

    Vector vjp_batch(const BatchToken& token, std::span<const ExampleGrad> grads) override {
        if (!pending_token_ || !(*pending_token_ == token)) {
            throw Error("stale-batch", "batch token '" + token.value + "' is not the pending batch");
        }
        const auto d = static_cast<std::size_t>(dim());
        auto ordered = detail::order_grads(pending_ids_, grads, d);
        pending_token_.reset();
        Vector total(d, 0.0);
        for (std::size_t i = 0; i < pending_.size(); ++i) {
            Vector g = vjp_steering(pending_[i], *ordered[i]);
            for (std::size_t c = 0; c < d; ++c) total[c] += g[c];
        }
        pending_.clear();
        pending_ids_.clear();
        return total;
    }

private:
    std::shared_ptr<const ModelWeights> weights_;
    std::string session_;
    unsigned long batch_counter_ = 0;
    std::optional<BatchToken> pending_token_;
    std::vector<std::string> pending_ids_;
    std::vector<ForwardTrace> pending_;
};

// Speaks the line-delimited JSON protocol (version 1) with an adapter
// process over its stdin/stdout.
class ExternalBackend final : public Backend {
public:
    explicit ExternalBackend(std::vector<std::string> command, std::optional<int> expected_d = std::nullopt)
        : command_(std::move(command)), expected_d_(expected_d), session_(detail::next_session_id("ext")) {
        proc_ = std::make_unique<Subprocess>(command_);
        auto reply = call({{"op", "hello"}, {"version", kProtocolVersion}});
        if (!reply.contains("version") || !reply["version"].is_number_integer() ||
            reply["version"].get<int>() != kProtocolVersion) {
            throw Error("handshake", "adapter speaks protocol version " +
                                         (reply.contains("version") ? reply["version"].dump() : std::string("?")) +
                                         ", expected " + std::to_string(kProtocolVersion));
        }
        if (!reply.contains("d") || !reply["d"].is_number_integer() || reply["d"].get<int>() <= 0) {
            throw Error("handshake", "adapter did not report a positive dimension d");
        }
        d_ = reply["d"].get<int>();
        n_layers_ = reply.value("n_layers", 0);
        if (expected_d_ && *expected_d_ != d_) {
            throw Error("handshake", "adapter reports d=" + std::to_string(d_) + ", expected " + std::to_string(*expected_d_));
        }
    }

    ~ExternalBackend() override {
        if (!proc_) return;
        try {
            proc_->write_line(nlohmann::json{{"op", "shutdown"}}.dump());
            (void)proc_->read_line();
        } catch (...) {
        }
        proc_->wait();
    }

    BackendKind kind() const override { return BackendKind::external; }
    int dim() const override { return d_; }
    int n_layers() const override { return n_layers_; }
    const std::string& session_id() const override { return session_; }
    nlohmann::json descriptor() const override {
        nlohmann::json j{{"kind", "external"}, {"command", command_}};
        j["d"] = d_;
        return j;
    }

    EmbeddingBatch forward_batch(const SteeringSpec& steer, std::span<const BatchItem> batch,
                                 bool retain_for_vjp = true) override {
        detail::check_unique_ids(batch);
        if (steer.v.size() != static_cast<std::size_t>(d_)) {
            throw Error("dimension-mismatch", "steering vector dimension differs from adapter d");
        }
        if (pending_) release_pending();
        const std::string batch_id = session_ + ":b" + std::to_string(++batch_counter_);
        nlohmann::json examples = nlohmann::json::array();
        for (const auto& item : batch) examples.push_back({{"id", item.id}, {"tokens", item.sequence.tokens}});
        auto reply = call({{"op", "forward"},
                           {"batch_id", batch_id},
                           {"layer", steer.layer},
                           {"lambda", steer.strength},
                           {"location", to_string(steer.location)},
                           {"v", steer.v},
                           {"examples", std::move(examples)}});
        if (reply.value("batch_id", "") != batch_id) throw Error("backend", "adapter echoed a different batch_id");
        std::unordered_map<std::string, Vector> by_id;
        for (const auto& e : reply.at("embeddings")) {
            by_id[e.at("id").get<std::string>()] = e.at("u").get<Vector>();
        }
        EmbeddingBatch out;
        out.token.value = batch_id;
        for (const auto& item : batch) {
            auto it = by_id.find(item.id);
            if (it == by_id.end()) throw Error("backend", "adapter returned no embedding for '" + item.id + "'");
            if (it->second.size() != static_cast<std::size_t>(d_)) {
                throw Error("dimension-mismatch", "embedding for '" + item.id + "' has wrong dimension");
            }
            if (!all_finite(it->second)) throw Error("non-finite", "non-finite embedding for example '" + item.id + "'");
            out.embeddings.push_back({item.id, std::move(it->second)});
        }
        pending_ = out.token;
        pending_ids_.clear();
        for (const auto& item : batch) pending_ids_.push_back(item.id);
        if (!retain_for_vjp) release_pending();
        return out;
    }

    Vector vjp_batch(const BatchToken& token, std::span<const ExampleGrad> grads) override {
        if (!pending_ || !(*pending_ == token)) {
            throw Error("stale-batch", "batch token '" + token.value + "' is not the pending batch");
        }
        auto ordered = detail::order_grads(pending_ids_, grads, static_cast<std::size_t>(d_));
        nlohmann::json g = nlohmann::json::array();
        for (std::size_t i = 0; i < ordered.size(); ++i) g.push_back({{"id", pending_ids_[i]}, {"g", *ordered[i]}});
        pending_.reset();
        auto reply = call({{"op", "vjp"}, {"batch_id", token.value}, {"grads", std::move(g)}});
        auto grad_v = reply.at("grad_v").get<Vector>();
        if (grad_v.size() != static_cast<std::size_t>(d_) || !all_finite(grad_v)) {
            throw Error("backend", "adapter returned an invalid grad_v");
        }
        return grad_v;
    }

private:
    nlohmann::json call(const nlohmann::json& request) {
        proc_->write_line(request.dump());
        auto line = proc_->read_line();
        if (!line) throw Error("backend", "adapter closed its output (crashed?)");
        nlohmann::json reply;
        try {
            reply = nlohmann::json::parse(*line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error("backend", std::string("malformed adapter reply: ") + e.what());
        }
        if (!reply.is_object() || !reply.value("ok", false)) {
            const std::string err = reply.is_object() ? reply.value("error", "unknown error") : "malformed reply";
            throw Error("backend", "adapter error: " + err);
        }
        return reply;
    }

    // The adapter holds one batch at a time; a forward that will not be
    // differentiated is closed with an all-zero vjp.
    void release_pending() {
        std::vector<ExampleGrad> zeros;
        for (const auto& id : pending_ids_) zeros.push_back({id, Vector(static_cast<std::size_t>(d_), 0.0)});
        (void)vjp_batch(*pending_, zeros);
    }

    std::vector<std::string> command_;
    std::optional<int> expected_d_;
    std::string session_;
    std::unique_ptr<Subprocess> proc_;
    int d_ = 0;
    int n_layers_ = 0;
    unsigned long batch_counter_ = 0;
    std::optional<BatchToken> pending_;
    std::vector<std::string> pending_ids_;
};

// Descriptor forms:
//   {"kind":"in_process","model":{ModelConfig}}
//   {"kind":"external","command":["adapter", ...], "d": optional int}
inline std::unique_ptr<Backend> open_backend(const nlohmann::json& descriptor) {
    const auto kind = descriptor.value("kind", "");
    if (kind == "in_process") {
        return std::make_unique<InProcessBackend>(descriptor.at("model").get<ModelConfig>());
    }
    if (kind == "external") {
        std::optional<int> d;
        if (descriptor.contains("d") && !descriptor["d"].is_null()) d = descriptor["d"].get<int>();
        return std::make_unique<ExternalBackend>(descriptor.at("command").get<std::vector<std::string>>(), d);
    }
    throw Error("invalid-argument", "unknown backend kind '" + kind + "'");
}

}  // namespace tsvlab
