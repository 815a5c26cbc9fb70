#pragma once

#include "hybridmt/core.hpp"
#include "hybridmt/error.hpp"
#include "hybridmt/io.hpp"
#include "hybridmt/ngram_lm.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hybridmt {

// Which tail of the score distribution is routed to the LLM.
enum class QuantileDirection { lowest_fraction, highest_fraction };

// k = max(1, floor(fraction * n)). The epsilon keeps products that are
// integral in exact arithmetic (0.1 * 10000) from rounding down.
inline std::size_t quantile_rank(std::size_t n, double fraction) {
    const double k = std::floor(fraction * static_cast<double>(n) + 1e-9);
    return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

// Returns the k-th smallest (lowest_fraction) or k-th largest
// (highest_fraction) score. With distinct scores exactly k-1 values lie
// strictly beyond it on the routed side.
inline double fit_quantile_threshold(std::span<const double> scores, double fraction, QuantileDirection dir) {
    if (scores.empty()) throw ValidationError("quantile threshold over an empty score list");
    if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("target fraction must lie in (0,1)");
    for (double s : scores) {
        if (!std::isfinite(s)) throw ValidationError("quantile threshold over a non-finite score");
    }
    std::vector<double> v(scores.begin(), scores.end());
    const std::size_t k = quantile_rank(v.size(), fraction);
    auto nth = v.begin() + static_cast<std::ptrdiff_t>(k - 1);
    if (dir == QuantileDirection::lowest_fraction) {
        std::nth_element(v.begin(), nth, v.end());
    } else {
        std::nth_element(v.begin(), nth, v.end(), std::greater<>());
    }
    return *nth;
}

// Positive-sample condition: the NMT output is poor and the LLM output is
// clearly better. Both comparisons are strict.
inline bool eq1_label(double q_nmt, double q_llm, double t1, double t2) {
    return q_nmt < t1 && (q_llm - q_nmt) > t2;
}

struct CalibrationProvenance {
    std::string dataset;
    std::string dataset_hash;
    std::size_t n = 0;
    std::string timestamp;
    double fraction = 0.0;

    friend bool operator==(const CalibrationProvenance&, const CalibrationProvenance&) = default;
};

struct PolicyThresholds {
    LanguagePair pair;
    std::optional<double> qet_threshold;
    std::optional<double> pplt_threshold;
    std::optional<double> jdm_t1;
    std::optional<double> jdm_t2;
    double target_llm_fraction = 0.25;
    // Keyed by method: "qet", "pplt", "jdm".
    std::map<std::string, CalibrationProvenance> provenance;

    void validate() const {
        pair.validate();
        for (const auto* t : {&qet_threshold, &pplt_threshold, &jdm_t1, &jdm_t2}) {
            if (*t && !std::isfinite(**t)) throw ValidationError("threshold is not finite");
        }
        if (!(target_llm_fraction > 0.0 && target_llm_fraction < 1.0)) {
            throw ValidationError("target_llm_fraction must lie in (0,1)");
        }
    }

    friend bool operator==(const PolicyThresholds&, const PolicyThresholds&) = default;
};

inline json to_json(const PolicyThresholds& t) {
    json j{{"pair", t.pair.str()}, {"target_llm_fraction", t.target_llm_fraction}};
    if (t.qet_threshold) j["qet_threshold"] = *t.qet_threshold;
    if (t.pplt_threshold) j["pplt_threshold"] = *t.pplt_threshold;
    if (t.jdm_t1) j["jdm_t1"] = *t.jdm_t1;
    if (t.jdm_t2) j["jdm_t2"] = *t.jdm_t2;
    json prov = json::object();
    for (const auto& [method, p] : t.provenance) {
        prov[method] = {{"dataset", p.dataset},
                        {"dataset_hash", p.dataset_hash},
                        {"n", p.n},
                        {"timestamp", p.timestamp},
                        {"fraction", p.fraction}};
    }
    j["provenance"] = std::move(prov);
    return j;
}

inline PolicyThresholds thresholds_from_json(const json& j) {
    PolicyThresholds t;
    t.pair = LanguagePair::parse(j.at("pair").get<std::string>());
    auto opt = [&j](const char* key) -> std::optional<double> {
        if (!j.contains(key) || j[key].is_null()) return std::nullopt;
        return j[key].get<double>();
    };
    t.qet_threshold = opt("qet_threshold");
    t.pplt_threshold = opt("pplt_threshold");
    t.jdm_t1 = opt("jdm_t1");
    t.jdm_t2 = opt("jdm_t2");
    t.target_llm_fraction = j.value("target_llm_fraction", 0.25);
    if (j.contains("provenance")) {
        for (const auto& [method, p] : j["provenance"].items()) {
            CalibrationProvenance cp;
            cp.dataset = p.value("dataset", std::string());
            cp.dataset_hash = p.value("dataset_hash", std::string());
            cp.n = p.value("n", std::size_t{0});
            cp.timestamp = p.value("timestamp", std::string());
            cp.fraction = p.value("fraction", 0.0);
            t.provenance[method] = cp;
        }
    }
    t.validate();
    return t;
}

// Accepts either a single thresholds document or a table keyed by pair
// ("zh-en": {...}), as in config/reference_thresholds.json.
inline PolicyThresholds load_thresholds(const std::filesystem::path& path,
                                        const std::optional<LanguagePair>& pair = std::nullopt) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    try {
        if (j.contains("pair")) {
            auto t = thresholds_from_json(j);
            if (pair && t.pair != *pair) {
                throw ValidationError("thresholds are for " + t.pair.str() + ", not " + pair->str());
            }
            return t;
        }
        if (!pair) throw ValidationError("thresholds table needs a language pair to select an entry");
        if (!j.contains(pair->str())) throw ValidationError("no thresholds for pair " + pair->str());
        json entry = j[pair->str()];
        entry["pair"] = pair->str();
        return thresholds_from_json(entry);
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

inline void save_thresholds(const std::filesystem::path& path, const PolicyThresholds& t) {
    t.validate();
    io::atomic_write(path, to_json(t).dump(2) + "\n");
}

// ---- calibration procedures ---------------------------------------------------

inline double calibrate_qet(std::span<const EvalRecord> records, double fraction) {
    if (records.empty()) throw ValidationError("QET calibration needs at least one record");
    std::vector<double> qe;
    qe.reserve(records.size());
    for (const auto& r : records) {
        if (!r.qe_nmt) throw ValidationError("record '" + r.id() + "' has no qe_nmt score");
        qe.push_back(r.qe_nmt->value);
    }
    return fit_quantile_threshold(qe, fraction, QuantileDirection::lowest_fraction);
}

inline std::vector<double> corpus_perplexities(const SourceLanguageModel& lm, std::span<const std::string> corpus) {
    std::vector<double> ppl;
    ppl.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        try {
            ppl.push_back(lm.perplexity(corpus[i]).value);
        } catch (const std::exception& e) {
            throw ValidationError("sentence " + std::to_string(i) + ": " + e.what());
        }
        if (!std::isfinite(ppl.back())) {
            throw ValidationError("sentence " + std::to_string(i) + ": non-finite perplexity");
        }
    }
    return ppl;
}

inline double calibrate_pplt(const SourceLanguageModel& lm, std::span<const std::string> corpus, double fraction) {
    if (corpus.empty()) throw ValidationError("PPLT calibration needs a non-empty corpus");
    const auto ppl = corpus_perplexities(lm, corpus);
    return fit_quantile_threshold(ppl, fraction, QuantileDirection::highest_fraction);
}

// ---- decider training-sample selection ----------------------------------------

struct JdmSelectionOptions {
    double t1_fraction = 0.10;
    std::size_t n_pos = 10000;
    std::size_t neg_ratio = 3;
    std::uint64_t seed = 0;
};

struct JdmTrainingSet {
    std::vector<EvalRecord> positives;
    std::vector<EvalRecord> negatives;
    double t1 = 0.0;
    double t2 = 0.0;
    std::uint64_t seed = 0;
    JdmSelectionOptions options;
    // Set when t2 <= 0: inside the T1 slice the LLM never beats NMT.
    bool llm_never_better = false;
};

namespace detail {

// Uniform integer in [0, bound) from raw mt19937_64 output, so the sample is
// identical on every standard library.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % bound;
}

} // namespace detail

inline JdmTrainingSet select_jdm_samples(std::span<const EvalRecord> records, const JdmSelectionOptions& opts) {
    if (!(opts.t1_fraction > 0.0 && opts.t1_fraction < 1.0)) {
        throw ValidationError("t1 fraction must lie in (0,1)");
    }
    if (opts.n_pos == 0) throw ValidationError("n_pos must be positive");
    const std::size_t n_neg = opts.n_pos * opts.neg_ratio;
    if (records.size() < opts.n_pos + n_neg) {
        throw ValidationError("need at least " + std::to_string(opts.n_pos + n_neg) + " records, have " +
                              std::to_string(records.size()));
    }
    std::vector<double> q_nmt;
    q_nmt.reserve(records.size());
    for (const auto& r : records) {
        if (!r.q_nmt || !r.q_llm) throw ValidationError("record '" + r.id() + "' lacks q_nmt or q_llm");
        q_nmt.push_back(r.q_nmt->value);
    }

    JdmTrainingSet out;
    out.options = opts;
    out.seed = opts.seed;
    out.t1 = fit_quantile_threshold(q_nmt, opts.t1_fraction, QuantileDirection::lowest_fraction);

    auto diff = [&](std::size_t i) { return records[i].q_llm->value - records[i].q_nmt->value; };
    std::vector<std::size_t> slice;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (q_nmt[i] < out.t1) slice.push_back(i);
    }
    if (slice.size() < opts.n_pos) {
        throw ValidationError("only " + std::to_string(slice.size()) + " records fall below T1, need " +
                              std::to_string(opts.n_pos) + " positives");
    }
    std::sort(slice.begin(), slice.end(), [&](std::size_t a, std::size_t b) {
        const double da = diff(a), db = diff(b);
        if (da != db) return da > db;
        return records[a].id() < records[b].id();
    });
    std::vector<bool> is_pos(records.size(), false);
    for (std::size_t i = 0; i < opts.n_pos; ++i) {
        is_pos[slice[i]] = true;
        out.positives.push_back(records[slice[i]]);
    }
    out.t2 = diff(slice[opts.n_pos - 1]);
    out.llm_never_better = out.t2 <= 0.0;

    std::vector<std::size_t> pool;
    pool.reserve(records.size() - opts.n_pos);
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!is_pos[i]) pool.push_back(i);
    }
    if (pool.size() < n_neg) throw ValidationError("not enough records left for negatives");
    std::mt19937_64 rng(opts.seed);
    for (std::size_t i = 0; i < n_neg; ++i) {
        const auto j = i + detail::uniform_below(rng, pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n_neg);
    std::sort(pool.begin(), pool.end());
    for (std::size_t i : pool) out.negatives.push_back(records[i]);
    return out;
}

inline void save_jdm_set(const std::filesystem::path& dir, const JdmTrainingSet& set,
                         const std::optional<CalibrationProvenance>& provenance = std::nullopt) {
    std::filesystem::create_directories(dir);
    write_dataset(dir / "positives.jsonl", set.positives);
    write_dataset(dir / "negatives.jsonl", set.negatives);
    json m{{"t1", set.t1},
           {"t2", set.t2},
           {"seed", set.seed},
           {"t1_fraction", set.options.t1_fraction},
           {"n_pos", set.options.n_pos},
           {"neg_ratio", set.options.neg_ratio},
           {"positives", "positives.jsonl"},
           {"negatives", "negatives.jsonl"},
           {"llm_never_better", set.llm_never_better}};
    if (provenance) {
        m["provenance"] = {{"dataset", provenance->dataset},
                           {"dataset_hash", provenance->dataset_hash},
                           {"n", provenance->n},
                           {"timestamp", provenance->timestamp}};
    }
    io::atomic_write(dir / "manifest.json", m.dump(2) + "\n");
}

inline JdmTrainingSet load_jdm_set(const std::filesystem::path& dir) {
    json m;
    try {
        m = json::parse(io::read_file(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw ValidationError((dir / "manifest.json").string() + ": " + e.what());
    }
    JdmTrainingSet set;
    try {
        set.t1 = m.at("t1").get<double>();
        set.t2 = m.at("t2").get<double>();
        set.seed = m.at("seed").get<std::uint64_t>();
        set.options.t1_fraction = m.value("t1_fraction", 0.10);
        set.options.n_pos = m.value("n_pos", std::size_t{0});
        set.options.neg_ratio = m.value("neg_ratio", std::size_t{3});
        set.options.seed = set.seed;
        set.llm_never_better = m.value("llm_never_better", false);
        set.positives = load_dataset(dir / m.value("positives", std::string("positives.jsonl")));
        set.negatives = load_dataset(dir / m.value("negatives", std::string("negatives.jsonl")));
    } catch (const json::exception& e) {
        throw ValidationError((dir / "manifest.json").string() + ": " + e.what());
    }
    return set;
}

} // namespace hybridmt
