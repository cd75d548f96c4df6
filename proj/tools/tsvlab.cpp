// tsvlab command-line interface.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tsvlab/detect.hpp"
#include "tsvlab/experiment.hpp"
#include "tsvlab/trainer.hpp"

using namespace tsvlab;
using nlohmann::json;

namespace {

constexpr int kUsageExit = 2;
constexpr int kRuntimeExit = 1;

std::string fmt6(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

struct ModelFlags {
    ModelConfig cfg;
    std::optional<std::uint64_t> seed;
    std::string adapter;
    std::optional<int> adapter_d;
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
    cmd->add_option("--model-layers", m.cfg.n_layers, "toy transformer depth")->check(CLI::Range(2, 64));
    cmd->add_option("--model-d", m.cfg.d_model, "toy transformer width")->check(CLI::Range(4, 4096));
    cmd->add_option("--model-heads", m.cfg.n_heads, "attention heads")->check(CLI::PositiveNumber);
    cmd->add_option("--model-vocab", m.cfg.vocab_size, "toy transformer vocabulary size")->check(CLI::PositiveNumber);
    cmd->add_option("--model-max-len", m.cfg.max_seq_len, "longest accepted sequence")->check(CLI::PositiveNumber);
    cmd->add_option("--model-seed", m.seed, "weight seed (defaults to --seed)");
    cmd->add_option("--adapter", m.adapter, "external adapter command line; replaces the toy model");
    cmd->add_option("--adapter-d", m.adapter_d, "embedding dimension the adapter must report");
}

std::vector<std::string> split_words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

json backend_descriptor(const ModelFlags& m, std::uint64_t seed) {
    if (!m.adapter.empty()) {
        json j{{"kind", "external"}, {"command", split_words(m.adapter)}};
        if (m.adapter_d) j["d"] = *m.adapter_d;
        return j;
    }
    ModelConfig cfg = m.cfg;
    cfg.seed = m.seed.value_or(seed);
    validate(cfg);
    return {{"kind", "in_process"}, {"model", cfg}};
}

struct TrainFlags {
    TrainConfig cfg;
    std::string location = "residual";
    std::string w_mode = "exemplar";

    TrainConfig resolve(std::uint64_t seed) const {
        TrainConfig c = cfg;
        c.location = *parse_location(location);
        c.w_mode = *parse_prior_mode(w_mode);
        c.seed = seed;
        return c;
    }
};

void add_train_flags(CLI::App* cmd, TrainFlags& t) {
    auto& c = t.cfg;
    cmd->add_option("--lambda", c.lambda, "steering strength")->check(CLI::NonNegativeNumber);
    cmd->add_option("--kappa", c.kappa, "vMF concentration")->check(CLI::NonNegativeNumber);
    cmd->add_option("--ema-decay", c.ema_decay, "prototype EMA decay")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--epsilon", c.epsilon, "Sinkhorn entropic regularization")->check(CLI::PositiveNumber);
    cmd->add_option("--sinkhorn-iters", c.sinkhorn_iters, "Sinkhorn iterations")->check(CLI::PositiveNumber);
    cmd->add_option("--n-initial-epochs", c.n_initial_epochs, "epochs on the exemplars")->check(CLI::NonNegativeNumber);
    cmd->add_option("--n-augmented-epochs", c.n_augmented_epochs, "epochs after augmentation")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--batch-size", c.batch_size, "mini-batch size")->check(CLI::PositiveNumber);
    cmd->add_option("--learning-rate", c.learning_rate, "AdamW learning rate")->check(CLI::NonNegativeNumber);
    cmd->add_option("--weight-decay", c.weight_decay, "AdamW decoupled weight decay")->check(CLI::NonNegativeNumber);
    cmd->add_option("--adam-beta1", c.adam_beta1, "AdamW beta1")->check(CLI::Range(0.0, 0.999999));
    cmd->add_option("--adam-beta2", c.adam_beta2, "AdamW beta2")->check(CLI::Range(0.0, 0.999999));
    cmd->add_option("--adam-eps", c.adam_eps, "AdamW epsilon")->check(CLI::PositiveNumber);
    cmd->add_option("--k-select", c.k_select, "pseudo-labeled samples kept")->check(CLI::PositiveNumber);
    cmd->add_option("--n-exemplars", c.n_exemplars, "labeled exemplars")->check(CLI::PositiveNumber);
    cmd->add_option("--layer", c.layer, "steering layer index")->check(CLI::NonNegativeNumber);
    cmd->add_option("--location", t.location, "steering location")
        ->check(CLI::IsMember({"residual", "mlp_output", "attn_output"}));
    cmd->add_option("--w-mode", t.w_mode, "class prior for optimal transport")
        ->check(CLI::IsMember({"exemplar", "uniform", "oracle"}));
    cmd->add_option("--rounds", c.rounds, "pseudo-labeling rounds")->check(CLI::PositiveNumber);
    cmd->add_option("--v-init-scale", c.v_init_scale, "std of the initial steering vector")
        ->check(CLI::NonNegativeNumber);
    cmd->add_flag("--harden-pseudo-labels", c.harden_pseudo_labels, "train on argmax pseudo-labels");
    cmd->add_flag("--recompute-ema-embeddings", c.recompute_ema_embeddings,
                  "recompute embeddings after the step before the EMA update");
}

void add_seed(CLI::App* cmd, std::uint64_t& seed) {
    cmd->add_option("--seed", seed, "run seed (env TSVLAB_SEED when unset)")->envname("TSVLAB_SEED");
}

// Config file: JSON object whose keys are flag names (with or without the
// leading dashes, '_' accepted for '-'). Keys already given on the command
// line are skipped so flags win.
std::vector<std::string> inject_config(const std::vector<std::string>& args) {
    std::optional<std::string> path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (!path || args.size() < 2) return args;
    json cfg;
    try {
        cfg = json::parse(read_file(*path));
    } catch (const json::parse_error& e) {
        throw Error("invalid-argument", "config file " + *path + " is not valid JSON: " + e.what());
    }
    if (!cfg.is_object()) throw Error("invalid-argument", "config file must hold a JSON object");
    auto given = [&](const std::string& flag) {
        for (const auto& a : args) {
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        }
        return false;
    };
    std::vector<std::string> injected;
    for (const auto& [key, value] : cfg.items()) {
        std::string name = key;
        while (!name.empty() && name.front() == '-') name.erase(name.begin());
        for (char& ch : name) {
            if (ch == '_') ch = '-';
        }
        const std::string flag = "--" + name;
        if (flag == "--config" || given(flag)) continue;
        if (value.is_boolean()) {
            injected.push_back(flag + "=" + (value.get<bool>() ? "true" : "false"));
        } else if (value.is_array()) {
            std::string joined;
            for (const auto& v : value) {
                if (!joined.empty()) joined += ',';
                joined += v.is_string() ? v.get<std::string>() : v.dump();
            }
            injected.push_back(flag + "=" + joined);
        } else {
            injected.push_back(flag + "=" + (value.is_string() ? value.get<std::string>() : value.dump()));
        }
    }
    std::vector<std::string> out{args[0], args[1]};
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), args.begin() + 2, args.end());
    return out;
}

void emit(const std::string& text, const std::string& out_path) {
    if (!out_path.empty()) write_file_atomic(out_path, text);
    std::cout << text << std::flush;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    SynthConfig cfg;
    std::size_t count = 512;
    std::uint64_t seed = 0;
    std::string out;
};

int run_synth(const SynthArgs& a) {
    SynthConfig cfg = a.cfg;
    cfg.seed = a.seed;
    const auto d = synth_generate(cfg, a.count);
    save_dataset(d, a.out);
    std::cout << "wrote " << d.records.size() << " records to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    TrainFlags train;
    ModelFlags model;
    std::uint64_t seed = 0;
    std::string data;
    std::string out;
    std::string log;
    std::string test_out;
    double test_fraction = 0.5;
};

int run_train(const TrainArgs& a) {
    const TrainConfig cfg = a.train.resolve(a.seed);
    const auto all = load_dataset(a.data);
    const auto backend = open_backend(backend_descriptor(a.model, a.seed));
    validate(cfg, backend->n_layers());
    const auto splits = make_splits(all, static_cast<std::size_t>(cfg.n_exemplars), a.test_fraction, cfg.seed);

    const auto pool = unlabeled_view(splits.unlabeled);
    const auto audit = hidden_labels(splits.unlabeled);
    TrainOptions opts;
    opts.audit = &audit;
    if (cfg.w_mode == ClassPriorMode::oracle) {
        ClassProbs w{0.0, 0.0};
        for (const auto& [id, lab] : audit) (lab == Label::truthful ? w.truthful : w.hallucinated) += 1.0;
        if (w.sum() > 0) opts.oracle_w = ClassProbs{w.truthful / w.sum(), w.hallucinated / w.sum()};
    }
    const auto result = train(cfg, *backend, splits.exemplars, pool, opts);
    save_checkpoint(result.checkpoint, a.out);
    write_file_atomic(a.log.empty() ? a.out + ".log" : a.log, train_log_to_string(result.log));
    if (!a.test_out.empty()) save_dataset(splits.test, a.test_out);

    if (!result.rounds.empty() && result.rounds.front().pl_acc) {
        std::cout << "PL_ACC=" << fmt6(*result.rounds.front().pl_acc) << "\n";
    }
    if (!splits.test.records.empty()) {
        const auto ids = training_ids(splits);
        std::cout << "AUROC=" << fmt6(evaluate(result.checkpoint, *backend, splits.test, &ids).auroc) << "\n";
    }
    return 0;
}

struct EvalArgs {
    ModelFlags model;
    std::string ckpt;
    std::string data;
    std::string report;
    std::string source;
    std::string target;
    bool model_given = false;
};

std::unique_ptr<Backend> backend_for(const Checkpoint& ck, const ModelFlags& m, bool override_model) {
    auto backend = open_backend(override_model ? backend_descriptor(m, ck.config.seed) : ck.backend);
    check_compatible(ck, *backend);
    return backend;
}

int run_eval(const EvalArgs& a) {
    const auto ck = load_checkpoint(a.ckpt);
    const auto backend = backend_for(ck, a.model, a.model_given);
    const auto test = load_dataset(a.data);
    const EvalReport rep = (a.source.empty() && a.target.empty())
                               ? evaluate(ck, *backend, test)
                               : transfer_evaluate(ck, *backend, test, a.source, a.target);
    if (!a.report.empty()) write_file_atomic(a.report, to_json(rep).dump(2) + "\n");
    std::cout << "AUROC=" << fmt6(rep.auroc) << "\n";
    return 0;
}

struct ScoreArgs {
    ModelFlags model;
    std::string ckpt;
    std::string data;
    std::string out;
    bool model_given = false;
};

int run_score(const ScoreArgs& a) {
    const auto ck = load_checkpoint(a.ckpt);
    const auto backend = backend_for(ck, a.model, a.model_given);
    const auto d = load_dataset(a.data);
    std::string text;
    for (const auto& s : score_dataset(ck, *backend, d)) text += s.id + "\t" + fmt6(s.score) + "\n";
    emit(text, a.out);
    return 0;
}

struct NormArgs {
    ModelFlags model;
    std::uint64_t seed = 0;
    std::string ckpt;
    std::string data;
    std::string out;
    bool model_given = false;
};

int run_norms(const NormArgs& a) {
    const auto d = load_dataset(a.data);
    json j;
    if (a.ckpt.empty()) {
        const auto backend = open_backend(backend_descriptor(a.model, a.seed));
        j = to_json(norm_stats(*backend, nullptr, d));
    } else {
        const auto ck = load_checkpoint(a.ckpt);
        const auto backend = backend_for(ck, a.model, a.model_given);
        j = {{"unsteered", to_json(norm_stats(*backend, nullptr, d))}, {"steered", to_json(norm_stats(*backend, &ck, d))}};
    }
    emit(j.dump(2) + "\n", a.out);
    return 0;
}

struct AblateArgs {
    TrainFlags train;
    ModelFlags model;
    SynthConfig synth;
    std::size_t count = 512;
    std::uint64_t seed = 0;
    std::string sweep;
    std::vector<std::string> values;
    std::string data;
    std::string out;
    double test_fraction = 0.5;
    int jobs = 1;
};

TrainConfig apply_sweep(TrainConfig cfg, const std::string& sweep, const std::string& value) {
    auto as_int = [&]() {
        std::size_t pos = 0;
        const long v = std::stol(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<int>(v);
    };
    try {
        if (sweep == "strength") {
            std::size_t pos = 0;
            cfg.lambda = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
        } else if (sweep == "layer") {
            cfg.layer = as_int();
        } else if (sweep == "exemplars") {
            cfg.n_exemplars = as_int();
        } else if (sweep == "k") {
            cfg.k_select = as_int();
        } else if (sweep == "location") {
            auto loc = parse_location(value);
            if (!loc) throw std::invalid_argument(value);
            cfg.location = *loc;
        }
    } catch (const std::logic_error&) {
        throw Error("invalid-argument", "bad value '" + value + "' for --sweep " + sweep);
    }
    return cfg;
}

int run_ablate(const AblateArgs& a) {
    const TrainConfig base = a.train.resolve(a.seed);
    Dataset all;
    if (a.data.empty()) {
        SynthConfig s = a.synth;
        s.seed = a.seed;
        all = synth_generate(s, a.count);
    } else {
        all = load_dataset(a.data);
    }
    const json descriptor = backend_descriptor(a.model, a.seed);
    std::vector<TrainConfig> configs;
    for (const auto& v : a.values) {
        configs.push_back(apply_sweep(base, a.sweep, v));
        validate(configs.back(), 0);
    }

    std::vector<std::optional<RunOutcome>> outcomes(configs.size());
    std::vector<std::exception_ptr> failures(configs.size());
    auto run_one = [&](std::size_t i) {
        try {
            auto backend = open_backend(descriptor);
            const auto splits = make_splits(all, static_cast<std::size_t>(configs[i].n_exemplars), a.test_fraction,
                                            configs[i].seed);
            outcomes[i] = train_and_evaluate(configs[i], *backend, splits);
        } catch (...) {
            failures[i] = std::current_exception();
        }
    };
    const auto jobs = static_cast<std::size_t>(std::max(1, a.jobs));
    for (std::size_t start = 0; start < configs.size(); start += jobs) {
        std::vector<std::thread> pool;
        for (std::size_t i = start; i < std::min(configs.size(), start + jobs); ++i) pool.emplace_back(run_one, i);
        for (auto& t : pool) t.join();
    }
    for (const auto& f : failures) {
        if (f) std::rethrow_exception(f);
    }

    std::string table = "value\tauroc\tpl_acc\n";
    for (std::size_t i = 0; i < configs.size(); ++i) {
        const auto& o = *outcomes[i];
        table += a.values[i] + "\t" + fmt6(o.auroc) + "\t" + (o.pl_acc ? fmt6(*o.pl_acc) : std::string("nan")) + "\n";
    }
    emit(table, a.out);
    return 0;
}

std::string one_line(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Truthfulness separator vector training and hallucination scoring"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    std::string config_path;
    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON file with flag values (flags override it)");
    };

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
    synth_cmd->add_option("--count", synth.count, "records to generate")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--vocab-size", synth.cfg.vocab_size, "vocabulary size")->check(CLI::Range(2, 1 << 20));
    synth_cmd->add_option("--seq-len", synth.cfg.seq_len, "tokens per sequence")->check(CLI::Range(2, 1 << 16));
    synth_cmd->add_option("--prompt-len", synth.cfg.prompt_len, "prompt tokens per sequence")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--pi", synth.cfg.pi, "hallucinated fraction")->check(CLI::Range(0.0, 1.0));
    synth_cmd->add_option("--template-noise", synth.cfg.template_noise, "uniform-token rate in generations")
        ->check(CLI::Range(0.0, 1.0));
    synth_cmd->add_option("--template-id", synth.cfg.template_id, "template pair");
    add_seed(synth_cmd, synth.seed);
    synth_cmd->add_option("--out", synth.out, "dataset file to write")->required();
    add_config(synth_cmd);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train a steering vector and prototypes");
    train_cmd->add_option("--data", tr.data, "labeled dataset file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", tr.out, "checkpoint file to write")->required();
    train_cmd->add_option("--log", tr.log, "training log file (default <out>.log)");
    train_cmd->add_option("--test-out", tr.test_out, "write the held-out split here");
    train_cmd->add_option("--test-fraction", tr.test_fraction, "share of non-exemplars held out for testing")
        ->check(CLI::Range(0.0, 1.0));
    add_train_flags(train_cmd, tr.train);
    add_model_flags(train_cmd, tr.model);
    add_seed(train_cmd, tr.seed);
    add_config(train_cmd);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "AUROC of a checkpoint on a labeled dataset");
    eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", ev.data, "labeled test dataset")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--report", ev.report, "write the JSON report here");
    eval_cmd->add_option("--source", ev.source, "name of the training distribution (transfer report)");
    eval_cmd->add_option("--target", ev.target, "name of the test distribution (transfer report)");
    add_model_flags(eval_cmd, ev.model);
    add_config(eval_cmd);

    ScoreArgs sc;
    auto* score_cmd = app.add_subcommand("score", "truthfulness score per sequence");
    score_cmd->add_option("--ckpt", sc.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--data", sc.data, "dataset file with the sequences")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--out", sc.out, "also write the scores here");
    add_model_flags(score_cmd, sc.model);
    add_config(score_cmd);

    AblateArgs ab;
    auto* ablate_cmd = app.add_subcommand("ablate", "retrain once per value of one knob");
    ablate_cmd->add_option("--sweep", ab.sweep, "knob to vary")
        ->required()
        ->check(CLI::IsMember({"layer", "strength", "exemplars", "k", "location"}));
    ablate_cmd->add_option("--values", ab.values, "comma-separated values")->required()->delimiter(',');
    ablate_cmd->add_option("--data", ab.data, "dataset file (default: synthesize one)")->check(CLI::ExistingFile);
    ablate_cmd->add_option("--count", ab.count, "records to synthesize without --data")->check(CLI::PositiveNumber);
    ablate_cmd->add_option("--pi", ab.synth.pi, "hallucinated fraction of synthesized data")->check(CLI::Range(0.0, 1.0));
    ablate_cmd->add_option("--template-noise", ab.synth.template_noise, "template noise of synthesized data")
        ->check(CLI::Range(0.0, 1.0));
    ablate_cmd->add_option("--test-fraction", ab.test_fraction, "share of non-exemplars held out for testing")
        ->check(CLI::Range(0.0, 1.0));
    ablate_cmd->add_option("--jobs", ab.jobs, "runs in parallel")->check(CLI::PositiveNumber);
    ablate_cmd->add_option("--out", ab.out, "also write the table here");
    add_train_flags(ablate_cmd, ab.train);
    add_model_flags(ablate_cmd, ab.model);
    add_seed(ablate_cmd, ab.seed);
    add_config(ablate_cmd);

    NormArgs nm;
    auto* norms_cmd = app.add_subcommand("inspect-norms", "final-layer embedding norm statistics");
    norms_cmd->add_option("--data", nm.data, "dataset file")->required()->check(CLI::ExistingFile);
    norms_cmd->add_option("--ckpt", nm.ckpt, "also report norms under this checkpoint's steering")
        ->check(CLI::ExistingFile);
    norms_cmd->add_option("--out", nm.out, "also write the JSON here");
    add_model_flags(norms_cmd, nm.model);
    add_seed(norms_cmd, nm.seed);
    add_config(norms_cmd);

    std::vector<std::string> args(argv, argv + argc);
    try {
        args = inject_config(args);
    } catch (const Error& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return kUsageExit;
    } catch (const std::exception& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return kUsageExit;
    }
    std::vector<char*> cargs;
    for (auto& s : args) cargs.push_back(s.data());

    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return kUsageExit;
    }

    auto model_given = [](CLI::App* cmd) {
        for (const char* f : {"--model-layers", "--model-d", "--model-heads", "--model-vocab", "--model-max-len",
                              "--model-seed", "--adapter", "--adapter-d"}) {
            if (cmd->count(f) > 0) return true;
        }
        return false;
    };

    try {
        if (*synth_cmd) return run_synth(synth);
        if (*train_cmd) return run_train(tr);
        if (*eval_cmd) {
            ev.model_given = model_given(eval_cmd);
            return run_eval(ev);
        }
        if (*score_cmd) {
            sc.model_given = model_given(score_cmd);
            return run_score(sc);
        }
        if (*ablate_cmd) return run_ablate(ab);
        if (*norms_cmd) {
            nm.model_given = model_given(norms_cmd);
            return run_norms(nm);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.code() << ": " << one_line(e.what()) << "\n";
        return e.code() == "invalid-argument" ? kUsageExit : kRuntimeExit;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << "\n";
        return kRuntimeExit;
    }
    return kUsageExit;
}
