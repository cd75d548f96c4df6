#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsvlab/error.hpp"
#include "tsvlab/io.hpp"
#include "tsvlab/rng.hpp"

namespace tsvlab {

enum class Label { truthful, hallucinated, unlabeled };

inline std::string_view to_string(Label label) {
    switch (label) {
        case Label::truthful: return "truthful";
        case Label::hallucinated: return "hallucinated";
        case Label::unlabeled: return "unlabeled";
    }
    return "unlabeled";
}

inline std::optional<Label> parse_label(std::string_view s) {
    if (s == "truthful") return Label::truthful;
    if (s == "hallucinated") return Label::hallucinated;
    if (s == "unlabeled") return Label::unlabeled;
    return std::nullopt;
}

// A pair of probabilities over {truthful, hallucinated}. Used for model
// posteriors, soft targets and the class prior w alike.
struct ClassProbs {
    double truthful = 0.5;
    double hallucinated = 0.5;

    double operator[](Label c) const { return c == Label::truthful ? truthful : hallucinated; }
    double& operator[](Label c) { return c == Label::truthful ? truthful : hallucinated; }
    double sum() const { return truthful + hallucinated; }
    bool operator==(const ClassProbs&) const = default;
};

inline constexpr std::array<Label, 2> kClasses{Label::truthful, Label::hallucinated};

inline ClassProbs one_hot(Label c) {
    return c == Label::truthful ? ClassProbs{1.0, 0.0} : ClassProbs{0.0, 1.0};
}

using TargetDistribution = ClassProbs;
using ClassDistribution = ClassProbs;

struct TokenSequence {
    std::vector<std::int32_t> tokens;
    std::size_t prompt_len = 1;

    std::size_t size() const noexcept { return tokens.size(); }
    bool operator==(const TokenSequence&) const = default;
};

inline void validate_sequence(const TokenSequence& seq, std::size_t vocab_size) {
    if (seq.tokens.empty()) {
        throw Error("invalid-sequence", "sequence must contain at least one token");
    }
    if (seq.prompt_len < 1 || seq.prompt_len > seq.tokens.size()) {
        throw Error("invalid-sequence", "prompt_len must lie in [1, length]");
    }
    for (auto t : seq.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
            throw Error("token-range", "token id " + std::to_string(t) + " outside vocabulary of size " +
                                           std::to_string(vocab_size));
        }
    }
}

struct ExampleRecord {
    std::string id;
    TokenSequence sequence;
    Label label = Label::unlabeled;
    // Ground truth of an unlabeled record. Only evaluation code reads it.
    std::optional<Label> hidden_label;

    bool operator==(const ExampleRecord&) const = default;
};

struct Dataset {
    std::vector<ExampleRecord> records;
    std::size_t vocab_size = 1;

    std::size_t size() const noexcept { return records.size(); }
    bool operator==(const Dataset&) const = default;
};

// What the training path sees of an unlabeled record: no label, no hidden label.
struct UnlabeledExample {
    std::string id;
    TokenSequence sequence;
};

using HiddenLabels = std::unordered_map<std::string, Label>;

inline std::vector<UnlabeledExample> unlabeled_view(const Dataset& d) {
    std::vector<UnlabeledExample> out;
    out.reserve(d.records.size());
    for (const auto& r : d.records) {
        out.push_back({r.id, r.sequence});
    }
    return out;
}

// Ground truth for evaluation: the explicit label of labeled records, the
// hidden label of unlabeled ones. Records without either are skipped.
inline HiddenLabels hidden_labels(const Dataset& d) {
    HiddenLabels out;
    for (const auto& r : d.records) {
        if (r.label != Label::unlabeled) {
            out.emplace(r.id, r.label);
        } else if (r.hidden_label) {
            out.emplace(r.id, *r.hidden_label);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// File format: line 1 is a header, one JSON record per following line.

inline constexpr std::string_view kDatasetFormat = "tsvlab-dataset";
inline constexpr int kDatasetVersion = 1;

namespace detail {

[[noreturn]] inline void parse_fail(std::size_t line, const std::string& what) {
    throw Error("parse", "line " + std::to_string(line) + ": " + what);
}

inline std::string record_line(const ExampleRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["tokens"] = r.sequence.tokens;
    j["prompt_len"] = r.sequence.prompt_len;
    j["label"] = to_string(r.label);
    if (r.hidden_label) {
        j["hidden_label"] = to_string(*r.hidden_label);
    }
    return j.dump();
}

inline ExampleRecord parse_record(const std::string& text, std::size_t line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        parse_fail(line, e.what());
    }
    if (!j.is_object()) {
        parse_fail(line, "record must be a JSON object");
    }
    static const std::unordered_set<std::string> known{"id", "tokens", "prompt_len", "label", "hidden_label"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) {
            parse_fail(line, "unknown field '" + key + "'");
        }
    }
    ExampleRecord r;
    if (!j.contains("id") || !j["id"].is_string()) parse_fail(line, "missing string field 'id'");
    r.id = j["id"].get<std::string>();
    if (!j.contains("tokens") || !j["tokens"].is_array()) parse_fail(line, "missing array field 'tokens'");
    for (const auto& t : j["tokens"]) {
        if (!t.is_number_integer()) parse_fail(line, "token ids must be integers");
        const auto v = t.get<std::int64_t>();
        if (v < 0 || v > INT32_MAX) parse_fail(line, "token id out of range");
        r.sequence.tokens.push_back(static_cast<std::int32_t>(v));
    }
    if (!j.contains("prompt_len") || !j["prompt_len"].is_number_integer()) {
        parse_fail(line, "missing integer field 'prompt_len'");
    }
    const auto pl = j["prompt_len"].get<std::int64_t>();
    if (pl < 1 || static_cast<std::size_t>(pl) > r.sequence.tokens.size()) {
        parse_fail(line, "prompt_len must lie in [1, length]");
    }
    r.sequence.prompt_len = static_cast<std::size_t>(pl);
    if (!j.contains("label") || !j["label"].is_string()) parse_fail(line, "missing string field 'label'");
    auto label = parse_label(j["label"].get<std::string>());
    if (!label) parse_fail(line, "unknown label '" + j["label"].get<std::string>() + "'");
    r.label = *label;
    if (j.contains("hidden_label")) {
        const auto& h = j["hidden_label"];
        if (!h.is_null()) {
            if (!h.is_string()) parse_fail(line, "hidden_label must be a string");
            auto hl = parse_label(h.get<std::string>());
            if (!hl || *hl == Label::unlabeled) parse_fail(line, "hidden_label must be truthful or hallucinated");
            r.hidden_label = *hl;
        }
    }
    return r;
}

}  // namespace detail

inline std::string dataset_to_string(const Dataset& d) {
    nlohmann::ordered_json header;
    header["format"] = kDatasetFormat;
    header["version"] = kDatasetVersion;
    header["vocab_size"] = d.vocab_size;
    std::string out = header.dump();
    out += '\n';
    for (const auto& r : d.records) {
        out += detail::record_line(r);
        out += '\n';
    }
    return out;
}

inline Dataset dataset_from_string(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    Dataset d;
    bool have_header = false;
    std::unordered_set<std::string> ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!have_header) {
            nlohmann::json h;
            try {
                h = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                detail::parse_fail(line_no, e.what());
            }
            if (!h.is_object() || h.value("format", "") != kDatasetFormat) {
                detail::parse_fail(line_no, "header must declare format \"tsvlab-dataset\"");
            }
            if (!h.contains("version") || h["version"] != kDatasetVersion) {
                detail::parse_fail(line_no, "unsupported dataset version");
            }
            if (!h.contains("vocab_size") || !h["vocab_size"].is_number_integer() || h["vocab_size"].get<std::int64_t>() < 1) {
                detail::parse_fail(line_no, "header needs a positive integer vocab_size");
            }
            for (const auto& [key, _] : h.items()) {
                if (key != "format" && key != "version" && key != "vocab_size") {
                    detail::parse_fail(line_no, "unknown header field '" + key + "'");
                }
            }
            d.vocab_size = h["vocab_size"].get<std::size_t>();
            have_header = true;
            continue;
        }
        auto r = detail::parse_record(line, line_no);
        for (auto t : r.sequence.tokens) {
            if (static_cast<std::size_t>(t) >= d.vocab_size) {
                throw Error("token-range", "line " + std::to_string(line_no) + ": token id " + std::to_string(t) +
                                               " >= vocab_size " + std::to_string(d.vocab_size));
            }
        }
        if (!ids.insert(r.id).second) {
            throw Error("duplicate-id", "line " + std::to_string(line_no) + ": duplicate id '" + r.id + "'");
        }
        d.records.push_back(std::move(r));
    }
    if (!have_header) {
        detail::parse_fail(1, "missing header line");
    }
    return d;
}

inline Dataset load_dataset(const std::filesystem::path& path) { return dataset_from_string(read_file(path)); }

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    write_file_atomic(path, dataset_to_string(d));
}

// ---------------------------------------------------------------------------

struct ExemplarSplit {
    Dataset exemplars;
    Dataset unlabeled;
};

// Draws n_exemplar labeled records uniformly at random (seeded). Everything
// else becomes unlabeled, with the original label moved to hidden_label.
// Both halves keep the original record order.
inline ExemplarSplit split_exemplar_unlabeled(const Dataset& d, std::size_t n_exemplar, std::uint64_t seed) {
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        if (d.records[i].label != Label::unlabeled) labeled.push_back(i);
    }
    if (labeled.size() < n_exemplar) {
        throw Error("insufficient-labeled", "need " + std::to_string(n_exemplar) + " labeled records, dataset has " +
                                                std::to_string(labeled.size()));
    }
    Rng rng(seed);
    rng.shuffle(labeled);
    std::vector<bool> chosen(d.records.size(), false);
    for (std::size_t k = 0; k < n_exemplar; ++k) chosen[labeled[k]] = true;

    ExemplarSplit out;
    out.exemplars.vocab_size = d.vocab_size;
    out.unlabeled.vocab_size = d.vocab_size;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        const auto& r = d.records[i];
        if (chosen[i]) {
            out.exemplars.records.push_back(r);
        } else {
            ExampleRecord u = r;
            if (r.label != Label::unlabeled) u.hidden_label = r.label;
            u.label = Label::unlabeled;
            out.unlabeled.records.push_back(std::move(u));
        }
    }
    return out;
}

// Deterministic partition of a dataset into two parts; the first holds
// round(fraction * size) records drawn at random, both keep input order.
inline std::pair<Dataset, Dataset> split_fraction(const Dataset& d, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(d.records.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    const auto n_first = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    std::vector<bool> first(idx.size(), false);
    for (std::size_t k = 0; k < n_first && k < idx.size(); ++k) first[idx[k]] = true;
    Dataset a, b;
    a.vocab_size = b.vocab_size = d.vocab_size;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        (first[i] ? a : b).records.push_back(d.records[i]);
    }
    return {std::move(a), std::move(b)};
}

inline ClassDistribution class_distribution_from_exemplars(const Dataset& exemplars) {
    if (exemplars.records.empty()) {
        throw Error("empty-input", "exemplar set is empty");
    }
    std::size_t n_true = 0;
    std::size_t n_hall = 0;
    for (const auto& r : exemplars.records) {
        if (r.label == Label::truthful) {
            ++n_true;
        } else if (r.label == Label::hallucinated) {
            ++n_hall;
        } else {
            throw Error("unlabeled-exemplar", "exemplar '" + r.id + "' carries no label");
        }
    }
    if (n_true == 0 || n_hall == 0) {
        throw Error("degenerate-class", "exemplar set lacks a class (truthful=" + std::to_string(n_true) +
                                            ", hallucinated=" + std::to_string(n_hall) + ")");
    }
    const auto n = static_cast<double>(n_true + n_hall);
    return {static_cast<double>(n_true) / n, static_cast<double>(n_hall) / n};
}

// ---------------------------------------------------------------------------
// Synthetic generator. Prompts are uniform over the vocabulary for both
// classes. Generation tokens follow a per-position template: truthful
// templates put their mass on the lower half of the vocabulary, hallucinated
// ones on the upper half, and every token is replaced by a uniform draw with
// probability template_noise. Every sequence ends in the terminator token, so
// the last position carries no class information of its own.

struct SynthConfig {
    std::size_t vocab_size = 64;
    std::size_t seq_len = 16;
    std::size_t prompt_len = 1;
    double pi = 0.25;
    double template_noise = 0.1;
    std::uint64_t seed = 0;
    // Selects the template pair; different ids give different templates
    // over the same vocabulary.
    std::uint64_t template_id = 0;
};

inline constexpr std::int32_t kTerminatorToken = 0;

inline void validate(const SynthConfig& cfg) {
    if (cfg.vocab_size < 2) throw Error("invalid-argument", "vocab_size must be at least 2");
    if (cfg.seq_len < 2 || cfg.prompt_len < 1) throw Error("invalid-argument", "seq_len and prompt_len must be positive");
    if (cfg.prompt_len >= cfg.seq_len) throw Error("invalid-argument", "prompt_len must be smaller than seq_len");
    if (!(cfg.pi >= 0.0 && cfg.pi <= 1.0)) throw Error("invalid-argument", "pi must lie in [0, 1]");
    if (!(cfg.template_noise >= 0.0 && cfg.template_noise <= 1.0)) {
        throw Error("invalid-argument", "template_noise must lie in [0, 1]");
    }
}

// Cumulative per-position token distributions of one class template.
inline std::vector<std::vector<double>> synth_template(const SynthConfig& cfg, Label cls) {
    const std::size_t gen_len = cfg.seq_len - cfg.prompt_len;
    const std::size_t half = cfg.vocab_size / 2;
    const bool lower = cls == Label::truthful;
    const std::size_t lo = lower ? 0 : half;
    const std::size_t hi = lower ? half : cfg.vocab_size;
    Rng rng(0x5eed7e3a1a7e0000ULL ^ (cfg.template_id * 0x9e3779b97f4a7c15ULL) ^ (lower ? 0x1ULL : 0x2ULL));
    std::vector<std::vector<double>> cdfs(gen_len, std::vector<double>(cfg.vocab_size, 0.0));
    for (auto& cdf : cdfs) {
        std::vector<double> w(cfg.vocab_size, 0.0);
        double total = 0.0;
        for (std::size_t t = lo; t < hi; ++t) {
            const double u = rng.uniform();
            w[t] = std::pow(u, 16.0);
            total += w[t];
        }
        double acc = 0.0;
        for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
            acc += w[t] / total;
            cdf[t] = acc;
        }
        cdf.back() = 1.0;
    }
    return cdfs;
}

inline std::int32_t sample_cdf(const std::vector<double>& cdf, double u) {
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    return static_cast<std::int32_t>(it - cdf.begin());
}

inline Dataset synth_generate(const SynthConfig& cfg, std::size_t count) {
    validate(cfg);
    if (count < 1) throw Error("invalid-argument", "count must be at least 1");
    const auto tmpl_true = synth_template(cfg, Label::truthful);
    const auto tmpl_hall = synth_template(cfg, Label::hallucinated);
    Rng rng(cfg.seed);
    Dataset d;
    d.vocab_size = cfg.vocab_size;
    d.records.reserve(count);
    const std::string prefix = "t" + std::to_string(cfg.template_id) + "-s" + std::to_string(cfg.seed) + "-";
    for (std::size_t i = 0; i < count; ++i) {
        ExampleRecord r;
        char num[32];
        std::snprintf(num, sizeof num, "%06zu", i);
        r.id = prefix + num;
        r.label = rng.bernoulli(cfg.pi) ? Label::hallucinated : Label::truthful;
        const auto& tmpl = r.label == Label::truthful ? tmpl_true : tmpl_hall;
        r.sequence.prompt_len = cfg.prompt_len;
        r.sequence.tokens.reserve(cfg.seq_len);
        for (std::size_t t = 0; t < cfg.prompt_len; ++t) {
            r.sequence.tokens.push_back(static_cast<std::int32_t>(rng.below(cfg.vocab_size)));
        }
        for (std::size_t t = 0; t + 1 < cfg.seq_len - cfg.prompt_len; ++t) {
            if (rng.bernoulli(cfg.template_noise)) {
                r.sequence.tokens.push_back(static_cast<std::int32_t>(rng.below(cfg.vocab_size)));
            } else {
                r.sequence.tokens.push_back(sample_cdf(tmpl[t], rng.uniform()));
            }
        }
        r.sequence.tokens.push_back(kTerminatorToken);
        d.records.push_back(std::move(r));
    }
    return d;
}

}  // namespace tsvlab
