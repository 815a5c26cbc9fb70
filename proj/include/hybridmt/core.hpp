#pragma once

#include "hybridmt/error.hpp"
#include "hybridmt/io.hpp"
#include "hybridmt/text.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace hybridmt {

using json = nlohmann::json;

enum class Backend { nmt, llm };

inline std::string_view to_string(Backend b) { return b == Backend::nmt ? "NMT" : "LLM"; }

inline Backend parse_backend(std::string_view s) {
    if (s == "NMT" || s == "nmt") return Backend::nmt;
    if (s == "LLM" || s == "llm") return Backend::llm;
    throw ValidationError("unknown backend '" + std::string(s) + "'");
}

enum class ScoreKind { reference_based, reference_free };

inline std::string_view to_string(ScoreKind k) {
    return k == ScoreKind::reference_based ? "reference_based" : "reference_free";
}

inline ScoreKind parse_score_kind(std::string_view s) {
    if (s == "reference_based") return ScoreKind::reference_based;
    if (s == "reference_free") return ScoreKind::reference_free;
    throw ValidationError("unknown score kind '" + std::string(s) + "'");
}

struct LanguagePair {
    std::string source;
    std::string target;

    void validate() const {
        if (source.empty() || target.empty()) {
            throw ValidationError("language pair needs both codes");
        }
        if (source == target) {
            throw ValidationError("language pair '" + str() + "' has identical sides");
        }
    }

    std::string str() const { return source + "-" + target; }

    // Parses "zh-en".
    static LanguagePair parse(std::string_view s) {
        const auto dash = s.find('-');
        if (dash == std::string_view::npos) {
            throw ValidationError("language pair '" + std::string(s) + "' is not of the form xx-yy");
        }
        LanguagePair p{std::string(s.substr(0, dash)), std::string(s.substr(dash + 1))};
        p.validate();
        return p;
    }

    friend bool operator==(const LanguagePair&, const LanguagePair&) = default;
};

struct Segment {
    std::string id;
    std::string text;
    LanguagePair pair;
    std::map<std::string, std::string> annotations;

    void validate() const {
        pair.validate();
        if (!text::has_content(text)) {
            throw ValidationError("segment '" + id + "' has empty source text");
        }
    }

    std::optional<std::string> annotation(const std::string& key) const {
        auto it = annotations.find(key);
        if (it == annotations.end()) return std::nullopt;
        return it->second;
    }

    friend bool operator==(const Segment&, const Segment&) = default;
};

// 0-100 scale. Scorers on other scales rescale at their adapter.
struct QualityScore {
    double value = 0.0;
    ScoreKind kind = ScoreKind::reference_based;

    void validate() const {
        if (!std::isfinite(value)) throw ValidationError("quality score is not finite");
    }

    friend bool operator==(const QualityScore&, const QualityScore&) = default;
};

struct EvalRecord {
    Segment segment;
    std::optional<std::string> reference;
    std::optional<std::string> nmt_hyp;
    std::optional<std::string> llm_hyp;
    std::optional<QualityScore> q_nmt;
    std::optional<QualityScore> q_llm;
    // Reference-free score of nmt_hyp.
    std::optional<QualityScore> qe_nmt;

    const std::string& id() const { return segment.id; }

    void validate() const {
        segment.validate();
        for (const auto* q : {&q_nmt, &q_llm, &qe_nmt}) {
            if (*q) (*q)->validate();
        }
        if (q_nmt && q_llm && q_nmt->kind != q_llm->kind) {
            throw ValidationError("record '" + id() + "': q_nmt and q_llm have different kinds");
        }
        const bool ref_based = (q_nmt && q_nmt->kind == ScoreKind::reference_based) ||
                               (q_llm && q_llm->kind == ScoreKind::reference_based) ||
                               (qe_nmt && qe_nmt->kind == ScoreKind::reference_based);
        if (ref_based && !reference) {
            throw ValidationError("record '" + id() + "': reference-based score without a reference");
        }
    }

    friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct BackendCalls {
    int nmt = 0;
    int llm = 0;

    int operator[](Backend b) const { return b == Backend::nmt ? nmt : llm; }
    int& operator[](Backend b) { return b == Backend::nmt ? nmt : llm; }

    friend bool operator==(const BackendCalls&, const BackendCalls&) = default;
};

// `backend` is the backend whose translation was returned. When `fallback`
// is set, the decider chose the other one and it failed.
struct RoutingDecision {
    std::string segment_id;
    Backend backend = Backend::nmt;
    std::map<std::string, double> evidence;
    BackendCalls backend_calls;
    double latency_ms = 0.0;
    bool fallback = false;

    void validate() const {
        for (int c : {backend_calls.nmt, backend_calls.llm}) {
            if (c != 0 && c != 1) throw Error("backend called more than once for '" + segment_id + "'");
        }
        if (backend_calls[backend] != 1) {
            throw Error("chosen backend was not invoked for '" + segment_id + "'");
        }
        if (!(latency_ms >= 0.0)) throw Error("negative latency");
    }
};

inline double mean_quality(std::span<const QualityScore> scores) {
    if (scores.empty()) throw ValidationError("mean_quality of an empty sequence");
    const ScoreKind kind = scores.front().kind;
    double sum = 0.0;
    for (const auto& s : scores) {
        if (s.kind != kind) throw ValidationError("mean_quality over mixed score kinds");
        sum += s.value;
    }
    return sum / static_cast<double>(scores.size());
}

// ---- JSON mapping ----------------------------------------------------------

namespace detail {

inline json score_to_json(const QualityScore& q, ScoreKind default_kind) {
    if (q.kind == default_kind) return q.value;
    return json{{"value", q.value}, {"kind", to_string(q.kind)}};
}

inline QualityScore score_from_json(const json& j, ScoreKind default_kind, const char* field) {
    QualityScore q{0.0, default_kind};
    if (j.is_number()) {
        q.value = j.get<double>();
    } else if (j.is_object() && j.contains("value") && j.at("value").is_number()) {
        q.value = j.at("value").get<double>();
        if (j.contains("kind")) q.kind = parse_score_kind(j.at("kind").get<std::string>());
    } else {
        throw ValidationError(std::string("field '") + field + "' must be a number or {value, kind}");
    }
    q.validate();
    return q;
}

inline std::optional<std::string> optional_string(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' must be a string");
    return it->get<std::string>();
}

} // namespace detail

inline json to_json(const EvalRecord& r) {
    json j;
    j["id"] = r.segment.id;
    j["src"] = r.segment.text;
    j["pair"] = r.segment.pair.str();
    if (r.reference) j["ref"] = *r.reference;
    if (r.nmt_hyp) j["nmt"] = *r.nmt_hyp;
    if (r.llm_hyp) j["llm"] = *r.llm_hyp;
    if (r.q_nmt) j["q_nmt"] = detail::score_to_json(*r.q_nmt, ScoreKind::reference_based);
    if (r.q_llm) j["q_llm"] = detail::score_to_json(*r.q_llm, ScoreKind::reference_based);
    if (r.qe_nmt) j["qe_nmt"] = detail::score_to_json(*r.qe_nmt, ScoreKind::reference_free);
    if (!r.segment.annotations.empty()) j["annotations"] = r.segment.annotations;
    return j;
}

// `fallback_id` is used when the object carries no "id".
inline EvalRecord record_from_json(const json& j, const std::string& fallback_id) {
    if (!j.is_object()) throw ValidationError("record is not a JSON object");
    EvalRecord r;
    auto src = detail::optional_string(j, "src");
    if (!src) throw ValidationError("missing 'src'");
    r.segment.text = std::move(*src);
    if (auto it = j.find("id"); it != j.end() && !it->is_null()) {
        r.segment.id = it->is_string() ? it->get<std::string>() : it->dump();
    } else {
        r.segment.id = fallback_id;
    }
    auto pair = detail::optional_string(j, "pair");
    if (!pair) throw ValidationError("missing 'pair'");
    r.segment.pair = LanguagePair::parse(*pair);
    r.reference = detail::optional_string(j, "ref");
    r.nmt_hyp = detail::optional_string(j, "nmt");
    r.llm_hyp = detail::optional_string(j, "llm");
    if (j.contains("q_nmt") && !j["q_nmt"].is_null()) {
        r.q_nmt = detail::score_from_json(j["q_nmt"], ScoreKind::reference_based, "q_nmt");
    }
    if (j.contains("q_llm") && !j["q_llm"].is_null()) {
        r.q_llm = detail::score_from_json(j["q_llm"], ScoreKind::reference_based, "q_llm");
    }
    if (j.contains("qe_nmt") && !j["qe_nmt"].is_null()) {
        r.qe_nmt = detail::score_from_json(j["qe_nmt"], ScoreKind::reference_free, "qe_nmt");
    }
    if (auto it = j.find("annotations"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw ValidationError("'annotations' must be an object");
        for (const auto& [k, v] : it->items()) {
            r.segment.annotations[k] = v.is_string() ? v.get<std::string>() : v.dump();
        }
    }
    r.validate();
    return r;
}

struct LineIssue {
    std::size_t line = 0;
    std::string message;
};

struct LoadOptions {
    // Strict: the first malformed line aborts the load. Lenient: malformed
    // lines are skipped and reported through `issues`.
    bool strict = true;
    std::vector<LineIssue>* issues = nullptr;
};

inline std::vector<EvalRecord> parse_dataset(std::string_view data, const std::string& source_name,
                                             const LoadOptions& opts = {}) {
    std::vector<EvalRecord> records;
    std::unordered_set<std::string> seen;
    const auto lines = io::split_lines(data);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t line_no = i + 1;
        if (text::trim(lines[i]).empty()) continue;
        EvalRecord rec;
        try {
            json j = json::parse(lines[i]);
            rec = record_from_json(j, std::to_string(line_no));
        } catch (const std::exception& e) {
            std::string msg = source_name + ":" + std::to_string(line_no) + ": " + e.what();
            if (opts.strict) throw ValidationError(msg);
            if (opts.issues) opts.issues->push_back({line_no, msg});
            continue;
        }
        if (!seen.insert(rec.segment.id).second) {
            throw ValidationError(source_name + ":" + std::to_string(line_no) + ": duplicate id '" +
                                  rec.segment.id + "'");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline std::vector<EvalRecord> load_dataset(const std::filesystem::path& path, const LoadOptions& opts = {}) {
    return parse_dataset(io::read_file(path), path.string(), opts);
}

inline std::string dump_dataset(std::span<const EvalRecord> records) {
    std::string out;
    for (const auto& r : records) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline void write_dataset(const std::filesystem::path& path, std::span<const EvalRecord> records) {
    io::atomic_write(path, dump_dataset(records));
}

} // namespace hybridmt
