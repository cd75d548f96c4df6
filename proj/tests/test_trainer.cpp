#include <gtest/gtest.h>

#include <cmath>

#include "tsvlab/detect.hpp"
#include "tsvlab/experiment.hpp"
#include "tsvlab/trainer.hpp"

using namespace tsvlab;

namespace {

struct Fixture {
    ModelConfig model;
    DataSplits splits;
    std::vector<UnlabeledExample> pool;
    HiddenLabels hidden;

    Fixture() {
        model.n_layers = 2;
        model.seed = 4;
        SynthConfig s;
        s.seed = 11;
        s.pi = 0.4;
        splits = make_splits(synth_generate(s, 160), 16, 0.5, 11);
        pool = unlabeled_view(splits.unlabeled);
        hidden = hidden_labels(splits.unlabeled);
    }
};

TrainConfig quick_config() {
    TrainConfig c;
    c.n_initial_epochs = 4;
    c.n_augmented_epochs = 3;
    c.k_select = 20;
    c.batch_size = 8;
    c.seed = 9;
    return c;
}

}  // namespace

TEST(AdamW, MatchesScalarReference) {
    const AdamHyper h{0.01, 0.9, 0.999, 1e-8, 0.0};
    Vector v{0.5, -1.0};
    AdamState st(2);
    long double x0 = 0.5L, x1 = -1.0L, m0 = 0, m1 = 0, s0 = 0, s1 = 0;
    Rng rng(1);
    for (int t = 1; t <= 10; ++t) {
        const Vector g{rng.normal(), rng.normal()};
        adamw_step(v, st, g, h);
        auto ref = [&](long double& x, long double& m, long double& s, long double gi) {
            m = 0.9L * m + 0.1L * gi;
            s = 0.999L * s + 0.001L * gi * gi;
            const long double mh = m / (1.0L - std::pow(0.9L, t));
            const long double sh = s / (1.0L - std::pow(0.999L, t));
            x -= 0.01L * mh / (std::sqrt(sh) + 1e-8L);
        };
        ref(x0, m0, s0, g[0]);
        ref(x1, m1, s1, g[1]);
        EXPECT_NEAR(v[0], static_cast<double>(x0), 1e-12);
        EXPECT_NEAR(v[1], static_cast<double>(x1), 1e-12);
    }
    EXPECT_EQ(st.step, 10);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    Vector v{1.0, 1.0};
    AdamState st(2);
    adamw_step(v, st, Vector{3.0, -0.2}, {0.1, 0.9, 0.999, 1e-12, 0.0});
    EXPECT_NEAR(v[0], 0.9, 1e-10);
    EXPECT_NEAR(v[1], 1.1, 1e-10);
}

TEST(AdamW, DecoupledDecayComesFirst) {
    Vector v{2.0};
    AdamState st(1);
    adamw_step(v, st, Vector{0.0}, {0.1, 0.9, 0.999, 1e-8, 0.5});
    // zero gradient: only the decay acts
    EXPECT_DOUBLE_EQ(v[0], 2.0 * (1.0 - 0.1 * 0.5));
    EXPECT_THROW(adamw_step(v, st, Vector{1.0, 2.0}, {}), Error);
    EXPECT_THROW(adamw_step(v, st, Vector{NAN}, {}), Error);
}

TEST(TrainConfigCheck, RejectsBadValues) {
    TrainConfig c;
    EXPECT_NO_THROW(validate(c, 4));
    c.layer = 99;
    try {
        validate(c, 4);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "invalid-layer");
        EXPECT_NE(std::string(e.what()).find("[0, 3]"), std::string::npos);
    }
    c = {};
    c.ema_decay = 1.5;
    EXPECT_THROW(validate(c, 4), Error);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(validate(c, 4), Error);
    c = {};
    c.epsilon = 0.0;
    EXPECT_THROW(validate(c, 4), Error);
}

TEST(TrainConfigCheck, JsonRoundTrip) {
    TrainConfig c = quick_config();
    c.location = SteeringLocation::attn_output;
    c.w_mode = ClassPriorMode::uniform;
    nlohmann::json j = c;
    EXPECT_EQ(j.get<TrainConfig>(), c);
}

TEST(Train, DeterministicForFixedSeed) {
    Fixture f;
    InProcessBackend a(f.model), b(f.model);
    auto ra = train(quick_config(), a, f.splits.exemplars, f.pool);
    auto rb = train(quick_config(), b, f.splits.exemplars, f.pool);
    EXPECT_EQ(checkpoint_to_string(ra.checkpoint), checkpoint_to_string(rb.checkpoint));
    EXPECT_EQ(train_log_to_string(ra.log), train_log_to_string(rb.log));
    auto other = quick_config();
    other.seed = 10;
    auto rc = train(other, a, f.splits.exemplars, f.pool);
    EXPECT_NE(rc.checkpoint.v, ra.checkpoint.v);
}

TEST(Train, LeavesModelWeightsUntouched) {
    Fixture f;
    auto w = std::make_shared<const ModelWeights>(init_weights(f.model));
    const auto before = checksum(*w);
    InProcessBackend be(w);
    train(quick_config(), be, f.splits.exemplars, f.pool);
    EXPECT_EQ(checksum(*w), before);
}

TEST(Train, InitialPhaseIgnoresUnlabeledPool) {
    Fixture f;
    InProcessBackend be(f.model);
    auto full = train(quick_config(), be, f.splits.exemplars, f.pool);
    std::vector<UnlabeledExample> half(f.pool.begin(), f.pool.begin() + static_cast<long>(f.pool.size() / 2));
    auto partial = train(quick_config(), be, f.splits.exemplars, half);
    EXPECT_EQ(full.v_after_initial, partial.v_after_initial);
    EXPECT_EQ(full.prototypes_after_initial, partial.prototypes_after_initial);
}

TEST(Train, NoAugmentedEpochsKeepsInitialState) {
    Fixture f;
    InProcessBackend be(f.model);
    auto cfg = quick_config();
    cfg.n_augmented_epochs = 0;
    auto r = train(cfg, be, f.splits.exemplars, f.pool);
    EXPECT_EQ(r.checkpoint.v, r.v_after_initial);
    EXPECT_EQ(r.checkpoint.prototypes, r.prototypes_after_initial);
    EXPECT_EQ(r.log.size(), 4u);
}

TEST(Train, NoOpTrainingYieldsUsableCheckpoint) {
    Fixture f;
    InProcessBackend be(f.model);
    auto cfg = quick_config();
    cfg.n_initial_epochs = 0;
    cfg.n_augmented_epochs = 0;
    auto r = train(cfg, be, f.splits.exemplars, f.pool);
    EXPECT_TRUE(r.log.empty());
    detail::Trainer fresh(cfg, be, {});
    EXPECT_EQ(r.checkpoint.v, fresh.state().steering.v);
    EXPECT_EQ(r.checkpoint.prototypes, fresh.state().prototypes);
    for (double x : r.checkpoint.v) EXPECT_LT(std::abs(x), 0.1);
    EXPECT_EQ(score_dataset(r.checkpoint, be, f.splits.test).size(), f.splits.test.records.size());
}

TEST(Train, FullDecayFreezesPrototypes) {
    Fixture f;
    InProcessBackend be(f.model);
    auto cfg = quick_config();
    cfg.ema_decay = 1.0;
    detail::Trainer fresh(cfg, be, {});
    auto r = train(cfg, be, f.splits.exemplars, f.pool);
    EXPECT_EQ(r.checkpoint.prototypes, fresh.state().prototypes);
    EXPECT_NE(r.checkpoint.v, fresh.state().steering.v);
}

TEST(Train, FrozenSteeringStaysZero) {
    Fixture f;
    InProcessBackend be(f.model);
    TrainOptions opts;
    opts.freeze_steering = true;
    auto r = train(quick_config(), be, f.splits.exemplars, f.pool, opts);
    for (double x : r.checkpoint.v) EXPECT_EQ(x, 0.0);
    detail::Trainer fresh(quick_config(), be, opts);
    EXPECT_NE(r.checkpoint.prototypes, fresh.state().prototypes);
}

TEST(Train, InitialLossDecreases) {
    Fixture f;
    InProcessBackend be(f.model);
    auto cfg = quick_config();
    cfg.n_initial_epochs = 30;
    cfg.n_augmented_epochs = 0;
    cfg.learning_rate = 2e-2;
    auto r = train(cfg, be, f.splits.exemplars, f.pool);
    const double first = r.log.front().mean_loss;
    const double last = r.log.back().mean_loss;
    EXPECT_LT(last, first);
    for (const auto& e : r.log) EXPECT_TRUE(std::isfinite(e.mean_loss));
}

TEST(Train, SelectionRoundReportsAccuracy) {
    Fixture f;
    InProcessBackend be(f.model);
    TrainOptions opts;
    opts.audit = &f.hidden;
    auto r = train(quick_config(), be, f.splits.exemplars, f.pool, opts);
    ASSERT_EQ(r.rounds.size(), 1u);
    EXPECT_EQ(r.rounds[0].selection.ids.size(), 20u);
    ASSERT_TRUE(r.rounds[0].pl_acc.has_value());
    EXPECT_GE(*r.rounds[0].pl_acc, 0.0);
    EXPECT_LE(*r.rounds[0].pl_acc, 1.0);
    EXPECT_EQ(r.rounds[0].w, class_distribution_from_exemplars(f.splits.exemplars));
    EXPECT_EQ(r.log.back().phase, "augmented");
    EXPECT_EQ(r.log.back().pl_acc, r.rounds[0].pl_acc);
}

TEST(Train, PriorModes) {
    Fixture f;
    InProcessBackend be(f.model);
    auto cfg = quick_config();
    cfg.w_mode = ClassPriorMode::uniform;
    EXPECT_EQ(train(cfg, be, f.splits.exemplars, f.pool).rounds[0].w, (ClassDistribution{0.5, 0.5}));
    cfg.w_mode = ClassPriorMode::oracle;
    EXPECT_THROW(train(cfg, be, f.splits.exemplars, f.pool), Error);
    TrainOptions opts;
    opts.oracle_w = ClassDistribution{0.7, 0.3};
    EXPECT_EQ(train(cfg, be, f.splits.exemplars, f.pool, opts).rounds[0].w, (ClassDistribution{0.7, 0.3}));
}

TEST(Train, InvalidLayerNamesRange) {
    Fixture f;
    InProcessBackend be(f.model);
    auto cfg = quick_config();
    cfg.layer = 99;
    try {
        train(cfg, be, f.splits.exemplars, f.pool);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "invalid-layer");
        EXPECT_NE(std::string(e.what()).find("[0, 1]"), std::string::npos);
    }
}

TEST(CheckpointFile, RoundTripAndGuards) {
    Fixture f;
    InProcessBackend be(f.model);
    auto r = train(quick_config(), be, f.splits.exemplars, f.pool);
    const auto dir = std::filesystem::temp_directory_path() / "tsvlab_test_trainer";
    std::filesystem::create_directories(dir);
    save_checkpoint(r.checkpoint, dir / "ck.json");
    auto back = load_checkpoint(dir / "ck.json");
    EXPECT_EQ(back.v, r.checkpoint.v);
    EXPECT_EQ(back.prototypes, r.checkpoint.prototypes);
    EXPECT_EQ(back.config, r.checkpoint.config);
    EXPECT_EQ(checkpoint_to_string(back), checkpoint_to_string(r.checkpoint));
    EXPECT_FALSE(std::filesystem::exists(dir / "ck.json.tmp"));

    auto reopened = open_backend(back.backend);
    EXPECT_EQ(score_dataset(back, *reopened, f.splits.test)[0].score, score_dataset(r.checkpoint, be, f.splits.test)[0].score);

    auto j = nlohmann::json::parse(checkpoint_to_string(r.checkpoint));
    j["version"] = 2;
    try {
        checkpoint_from_string(j.dump());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "version-mismatch");
    }
    try {
        checkpoint_from_string("{\"format\":\"tsvlab-ckpt\"");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "corrupt");
    }

    ModelConfig wide = f.model;
    wide.d_model = 32;
    InProcessBackend other(wide);
    try {
        check_compatible(back, other);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "dimension-mismatch");
    }
    std::filesystem::remove_all(dir);
}
