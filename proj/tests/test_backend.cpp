#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "tsvlab/backend.hpp"
#include "tsvlab/trainer.hpp"

using namespace tsvlab;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.seed = 3;
    return cfg;
}

std::vector<BatchItem> random_batch(std::size_t n, Rng& rng) {
    std::vector<BatchItem> out;
    for (std::size_t i = 0; i < n; ++i) {
        TokenSequence seq;
        const std::size_t len = 2 + rng.below(10);
        for (std::size_t t = 0; t < len; ++t) seq.tokens.push_back(static_cast<std::int32_t>(rng.below(64)));
        seq.prompt_len = 1;
        out.push_back({"x" + std::to_string(i), seq});
    }
    return out;
}

SteeringSpec random_steer(Rng& rng, int layer, SteeringLocation loc) {
    SteeringSpec s;
    s.v.resize(16);
    for (double& x : s.v) x = 0.5 * rng.normal();
    s.layer = layer;
    s.strength = 2.0;
    s.location = loc;
    return s;
}

std::vector<ExampleGrad> random_grads(const std::vector<BatchItem>& batch, Rng& rng) {
    std::vector<ExampleGrad> out;
    for (const auto& b : batch) {
        Vector g(16);
        for (double& x : g) x = rng.normal();
        out.push_back({b.id, g});
    }
    return out;
}

std::vector<std::string> adapter(std::vector<std::string> extra = {}) {
    std::vector<std::string> cmd{TSVLAB_FAKE_ADAPTER, "--layers", "2", "--seed", "3"};
    cmd.insert(cmd.end(), extra.begin(), extra.end());
    return cmd;
}

double rel_err(const Vector& a, const Vector& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

TEST(InProcess, BitIdenticalToDirectModel) {
    InProcessBackend be(tiny_model());
    Rng rng(1);
    auto batch = random_batch(12, rng);
    for (auto loc : {SteeringLocation::residual, SteeringLocation::mlp_output, SteeringLocation::attn_output}) {
        auto steer = random_steer(rng, 1, loc);
        auto eb = be.forward_batch(steer, batch);
        ASSERT_EQ(eb.embeddings.size(), batch.size());
        auto grads = random_grads(batch, rng);
        Vector sum(16, 0.0);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            EXPECT_EQ(eb.embeddings[i].id, batch[i].id);
            auto res = forward_last_token(be.weights(), batch[i].sequence, &steer);
            EXPECT_EQ(eb.embeddings[i].u, res.u);
            auto g = vjp_steering(res.trace, grads[i].g);
            for (std::size_t c = 0; c < 16; ++c) sum[c] += g[c];
        }
        EXPECT_EQ(be.vjp_batch(eb.token, grads), sum);
    }
}

TEST(InProcess, OrderIndependentPerId) {
    InProcessBackend be(tiny_model());
    Rng rng(2);
    auto batch = random_batch(9, rng);
    auto steer = random_steer(rng, 0, SteeringLocation::residual);
    auto a = be.forward_batch(steer, batch, false);
    auto reversed = batch;
    std::reverse(reversed.begin(), reversed.end());
    auto b = be.forward_batch(steer, reversed, false);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        EXPECT_EQ(b.embeddings[batch.size() - 1 - i].id, a.embeddings[i].id);
        EXPECT_EQ(b.embeddings[batch.size() - 1 - i].u, a.embeddings[i].u);
    }
}

TEST(InProcess, VjpAdditiveOverBatchSplits) {
    InProcessBackend be(tiny_model());
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto batch = random_batch(10, rng);
        auto steer = random_steer(rng, 1, SteeringLocation::mlp_output);
        auto grads = random_grads(batch, rng);
        auto whole = be.vjp_batch(be.forward_batch(steer, batch).token, grads);
        const auto cut = 1 + rng.below(9);
        std::vector<BatchItem> b1(batch.begin(), batch.begin() + static_cast<long>(cut)), b2(batch.begin() + static_cast<long>(cut), batch.end());
        std::vector<ExampleGrad> g1(grads.begin(), grads.begin() + static_cast<long>(cut)), g2(grads.begin() + static_cast<long>(cut), grads.end());
        auto p1 = be.vjp_batch(be.forward_batch(steer, b1).token, g1);
        auto p2 = be.vjp_batch(be.forward_batch(steer, b2).token, g2);
        for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(whole[c], p1[c] + p2[c], 1e-10);
    }
}

TEST(InProcess, TokenIsSingleUse) {
    InProcessBackend be(tiny_model());
    Rng rng(4);
    auto batch = random_batch(3, rng);
    auto steer = random_steer(rng, 0, SteeringLocation::residual);
    auto grads = random_grads(batch, rng);
    auto eb = be.forward_batch(steer, batch);
    be.vjp_batch(eb.token, grads);
    try {
        be.vjp_batch(eb.token, grads);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "stale-batch");
    }
    auto first = be.forward_batch(steer, batch);
    be.forward_batch(steer, batch);
    EXPECT_THROW(be.vjp_batch(first.token, grads), Error);
    auto plain = be.forward_batch(steer, batch, false);
    EXPECT_THROW(be.vjp_batch(plain.token, grads), Error);
}

TEST(InProcess, GradientCoverageChecked) {
    InProcessBackend be(tiny_model());
    Rng rng(5);
    auto batch = random_batch(3, rng);
    auto steer = random_steer(rng, 0, SteeringLocation::residual);
    auto grads = random_grads(batch, rng);
    grads.pop_back();
    try {
        be.vjp_batch(be.forward_batch(steer, batch).token, grads);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "missing-grads");
    }
    auto dup = batch;
    dup[1].id = dup[0].id;
    try {
        be.forward_batch(steer, dup);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "duplicate-id");
    }
}

TEST(InProcess, DescriptorReopensEquivalentBackend) {
    InProcessBackend be(tiny_model());
    auto again = open_backend(be.descriptor());
    EXPECT_EQ(again->kind(), BackendKind::in_process);
    Rng rng(6);
    auto batch = random_batch(4, rng);
    auto steer = random_steer(rng, 1, SteeringLocation::attn_output);
    auto a = be.forward_batch(steer, batch, false);
    auto b = again->forward_batch(steer, batch, false);
    for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_EQ(a.embeddings[i].u, b.embeddings[i].u);
    EXPECT_THROW(open_backend(nlohmann::json{{"kind", "carrier-pigeon"}}), Error);
}

TEST(External, HandshakeReportsShape) {
    ExternalBackend ext(adapter());
    EXPECT_EQ(ext.kind(), BackendKind::external);
    EXPECT_EQ(ext.dim(), 16);
    EXPECT_EQ(ext.n_layers(), 2);
    EXPECT_EQ(ext.descriptor()["kind"], "external");
}

TEST(External, HandshakeFailures) {
    try {
        ExternalBackend ext(adapter({"--version", "2"}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "handshake");
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
    try {
        ExternalBackend ext(adapter({"--claim-d", "24"}), 16);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "handshake");
    }
    try {
        ExternalBackend ext({"/nonexistent/adapter-binary"});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "launch");
    }
}

TEST(External, MatchesInProcessWithinTolerance) {
    InProcessBackend local(tiny_model());
    ExternalBackend ext(adapter({"--f32"}));
    Rng rng(7);
    for (auto loc : {SteeringLocation::residual, SteeringLocation::mlp_output, SteeringLocation::attn_output}) {
        auto batch = random_batch(6, rng);
        auto steer = random_steer(rng, 1, loc);
        auto grads = random_grads(batch, rng);
        auto a = local.forward_batch(steer, batch);
        auto b = ext.forward_batch(steer, batch);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            EXPECT_EQ(b.embeddings[i].id, batch[i].id);
            EXPECT_LE(rel_err(b.embeddings[i].u, a.embeddings[i].u), 1e-5);
        }
        EXPECT_LE(rel_err(ext.vjp_batch(b.token, grads), local.vjp_batch(a.token, grads)), 1e-5);
    }
}

TEST(External, SingleInFlightBatch) {
    ExternalBackend ext(adapter());
    Rng rng(8);
    auto batch = random_batch(3, rng);
    auto steer = random_steer(rng, 0, SteeringLocation::residual);
    auto grads = random_grads(batch, rng);
    // un-differentiated forwards are released so the next one is accepted
    ext.forward_batch(steer, batch, false);
    auto first = ext.forward_batch(steer, batch);
    auto second = ext.forward_batch(steer, batch);
    try {
        ext.vjp_batch(first.token, grads);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "stale-batch");
    }
    auto g = ext.vjp_batch(second.token, grads);
    EXPECT_EQ(g.size(), 16u);
    EXPECT_THROW(ext.vjp_batch(second.token, grads), Error);
    SteeringSpec wrong = steer;
    wrong.v.resize(8);
    EXPECT_THROW(ext.forward_batch(wrong, batch), Error);
}

TEST(External, AdapterErrorsSurface) {
    ExternalBackend ext(adapter());
    Rng rng(9);
    auto batch = random_batch(2, rng);
    auto steer = random_steer(rng, 7, SteeringLocation::residual);
    try {
        ext.forward_batch(steer, batch);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "backend");
    }
}

TEST(External, DrivesTrainerEpoch) {
    ExternalBackend ext(adapter());
    SynthConfig s;
    s.seed = 2;
    s.pi = 0.5;
    auto data = synth_generate(s, 24);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.learning_rate = 2e-2;
    detail::Trainer trainer(cfg, ext, {});
    auto pool = exemplar_pool(data);
    const double first = trainer.run_epoch(pool);
    double last = first;
    for (int e = 0; e < 8; ++e) last = trainer.run_epoch(pool);
    EXPECT_TRUE(std::isfinite(first));
    EXPECT_LT(last, first);
}
