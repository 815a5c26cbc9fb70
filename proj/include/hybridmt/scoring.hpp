#pragma once

#include "hybridmt/core.hpp"
#include "hybridmt/error.hpp"
#include "hybridmt/text.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hybridmt {

enum class ScorerBackend { builtin, remote };

struct ScorerSpec {
    ScoreKind mode = ScoreKind::reference_based;
    ScorerBackend backend = ScorerBackend::builtin;
    std::optional<std::string> endpoint; // e.g. "http://127.0.0.1:9000"
    int timeout_ms = 30000;
    int max_retries = 0;  // extra attempts after a transport failure
    int max_in_flight = 4;
    int batch_size = 64;  // items per remote request

    void validate() const {
        if ((backend == ScorerBackend::remote) != endpoint.has_value()) {
            throw ValidationError("scorer endpoint must be set exactly when the backend is remote");
        }
        if (timeout_ms <= 0) throw ValidationError("scorer timeout_ms must be positive");
        if (max_retries < 0) throw ValidationError("scorer max_retries must be >= 0");
        if (max_in_flight <= 0 || batch_size <= 0) {
            throw ValidationError("scorer max_in_flight and batch_size must be positive");
        }
    }

    static ScorerSpec builtin(ScoreKind mode) {
        ScorerSpec s;
        s.mode = mode;
        return s;
    }

    static ScorerSpec remote(ScoreKind mode, std::string endpoint) {
        ScorerSpec s;
        s.mode = mode;
        s.backend = ScorerBackend::remote;
        s.endpoint = std::move(endpoint);
        return s;
    }
};

inline json to_json(const ScorerSpec& s) {
    json j{{"mode", to_string(s.mode)},
           {"backend", s.backend == ScorerBackend::builtin ? "builtin" : "remote"},
           {"timeout_ms", s.timeout_ms},
           {"max_retries", s.max_retries},
           {"max_in_flight", s.max_in_flight},
           {"batch_size", s.batch_size}};
    if (s.endpoint) j["endpoint"] = *s.endpoint;
    return j;
}

inline ScorerSpec scorer_spec_from_json(const json& j) {
    ScorerSpec s;
    s.mode = parse_score_kind(j.value("mode", std::string("reference_based")));
    const auto backend = j.value("backend", std::string("builtin"));
    if (backend == "builtin" || backend == "builtin_chrf") {
        s.backend = ScorerBackend::builtin;
    } else if (backend == "remote") {
        s.backend = ScorerBackend::remote;
    } else {
        throw ValidationError("unknown scorer backend '" + backend + "'");
    }
    if (j.contains("endpoint") && !j["endpoint"].is_null()) s.endpoint = j["endpoint"].get<std::string>();
    s.timeout_ms = j.value("timeout_ms", s.timeout_ms);
    s.max_retries = j.value("max_retries", s.max_retries);
    s.max_in_flight = j.value("max_in_flight", s.max_in_flight);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.validate();
    return s;
}

// ---- builtin reference-based metric: chrF ----------------------------------

namespace detail {

inline std::map<std::u32string, int> char_ngrams(const std::u32string& chars, std::size_t n) {
    std::map<std::u32string, int> out;
    if (chars.size() < n) return out;
    for (std::size_t i = 0; i + n <= chars.size(); ++i) ++out[chars.substr(i, n)];
    return out;
}

inline std::u32string content_chars(std::string_view s) {
    std::u32string out;
    for (char32_t c : text::decode_utf8(s)) {
        if (!text::is_space(c)) out.push_back(c);
    }
    return out;
}

} // namespace detail

// Character n-gram F-score on a 0-100 scale, whitespace ignored. Precision and
// recall are averaged over the orders 1..max_order that at least one side is
// long enough to contain; a side with no n-grams of an order scores 0 there.
inline double chrf(std::string_view hyp, std::string_view ref, int max_order = 6, double beta = 2.0) {
    const auto h = detail::content_chars(hyp);
    const auto r = detail::content_chars(ref);
    double p_sum = 0.0, r_sum = 0.0;
    int orders = 0;
    for (std::size_t n = 1; n <= static_cast<std::size_t>(max_order); ++n) {
        if (h.size() < n && r.size() < n) break;
        const auto hg = detail::char_ngrams(h, n);
        const auto rg = detail::char_ngrams(r, n);
        long matched = 0;
        for (const auto& [g, c] : hg) {
            auto it = rg.find(g);
            if (it != rg.end()) matched += std::min(c, it->second);
        }
        const double hyp_total = h.size() >= n ? static_cast<double>(h.size() - n + 1) : 0.0;
        const double ref_total = r.size() >= n ? static_cast<double>(r.size() - n + 1) : 0.0;
        p_sum += hyp_total > 0 ? static_cast<double>(matched) / hyp_total : 0.0;
        r_sum += ref_total > 0 ? static_cast<double>(matched) / ref_total : 0.0;
        ++orders;
    }
    if (orders == 0) return 0.0;
    const double p = p_sum / orders;
    const double rc = r_sum / orders;
    const double b2 = beta * beta;
    const double denom = b2 * p + rc;
    if (denom <= 0.0) return 0.0;
    return 100.0 * (1.0 + b2) * p * rc / (b2 * p + rc);
}

// ---- builtin reference-free surrogate ---------------------------------------

// Typical characters needed to express the same content, relative across
// languages. Unknown languages are treated like alphabetic European ones.
inline double chars_per_unit(std::string_view lang) {
    if (lang == "zh") return 1.0;
    if (lang == "ja") return 1.4;
    if (lang == "ko") return 1.6;
    if (lang == "en") return 3.4;
    if (lang == "de") return 3.9;
    return 3.6;
}

inline bool is_script_of(std::string_view lang, char32_t c) {
    if (lang == "zh") return text::is_han(c);
    if (lang == "ja") return text::is_han(c) || text::is_kana(c);
    if (lang == "ko") return text::is_hangul(c) || text::is_han(c);
    return text::is_latin(c);
}

// Half length-ratio plausibility, half share of hypothesis letters written in
// the target language's script. Deterministic, within [0, 100].
inline double qe_heuristic(std::string_view src, std::string_view hyp, const LanguagePair& pair) {
    const auto s = detail::content_chars(src);
    const auto h = detail::content_chars(hyp);
    const double expected = static_cast<double>(s.size()) * chars_per_unit(pair.target) /
                            chars_per_unit(pair.source);
    double length_term = 0.0;
    if (expected > 0.0) {
        const double dev = std::abs(static_cast<double>(h.size()) / expected - 1.0);
        length_term = 1.0 - std::min(dev, 1.0);
    }
    auto is_letter = [](char32_t c) { return !text::is_digit(c) && !text::is_punct(c); };
    std::size_t letters = 0, in_script = 0;
    for (char32_t c : h) {
        if (!is_letter(c)) continue;
        ++letters;
        if (is_script_of(pair.target, c)) ++in_script;
    }
    double script_term = 0.0;
    if (letters > 0) {
        script_term = static_cast<double>(in_script) / static_cast<double>(letters);
    } else if (!h.empty() && std::none_of(s.begin(), s.end(), is_letter)) {
        script_term = 1.0; // digits/punctuation in, digits/punctuation out
    }
    return 100.0 * (0.5 * length_term + 0.5 * script_term);
}

// ---- scorer ------------------------------------------------------------------

struct ScoreItem {
    std::string src;
    std::string hyp;
    std::optional<std::string> ref;
    std::optional<LanguagePair> pair; // needed by the builtin reference-free scorer
};

class Scorer {
public:
    explicit Scorer(ScorerSpec spec)
        : spec_((spec.validate(), std::move(spec))),
          in_flight_(std::make_shared<std::counting_semaphore<1024>>(std::min(spec_.max_in_flight, 1024))) {}

    const ScorerSpec& spec() const noexcept { return spec_; }

    QualityScore score(const ScoreItem& item) const {
        check(item, 0, false);
        if (spec_.backend == ScorerBackend::builtin) return builtin(item);
        return {post(std::span<const ScoreItem>(&item, 1), 0).front(), spec_.mode};
    }

    std::vector<QualityScore> score_batch(std::span<const ScoreItem> items) const {
        for (std::size_t i = 0; i < items.size(); ++i) check(items[i], i, true);
        std::vector<QualityScore> out;
        out.reserve(items.size());
        if (spec_.backend == ScorerBackend::builtin) {
            for (const auto& it : items) out.push_back(builtin(it));
            return out;
        }
        const auto chunk = static_cast<std::size_t>(spec_.batch_size);
        for (std::size_t start = 0; start < items.size(); start += chunk) {
            const auto len = std::min(chunk, items.size() - start);
            for (double v : post(items.subspan(start, len), start)) out.push_back({v, spec_.mode});
        }
        return out;
    }

private:
    void check(const ScoreItem& item, std::size_t index, bool batched) const {
        const bool want_ref = spec_.mode == ScoreKind::reference_based;
        if (want_ref != item.ref.has_value()) {
            std::string msg = want_ref ? "reference-based scoring requires a reference"
                                       : "reference-free scoring must not be given a reference";
            if (batched) msg = "batch item " + std::to_string(index) + ": " + msg;
            throw ValidationError(msg);
        }
        if (!want_ref && spec_.backend == ScorerBackend::builtin && !item.pair) {
            throw ValidationError("builtin reference-free scoring needs the language pair");
        }
    }

    QualityScore builtin(const ScoreItem& item) const {
        if (spec_.mode == ScoreKind::reference_based) return {chrf(item.hyp, *item.ref), spec_.mode};
        return {qe_heuristic(item.src, item.hyp, *item.pair), spec_.mode};
    }

    std::vector<double> post(std::span<const ScoreItem> items, std::size_t offset) const {
        const std::string& endpoint = *spec_.endpoint;
        json body{{"mode", to_string(spec_.mode)}, {"items", json::array()}};
        for (const auto& it : items) {
            json j{{"src", it.src}, {"hyp", it.hyp}};
            if (it.ref) j["ref"] = *it.ref;
            body["items"].push_back(std::move(j));
        }
        const std::string payload = body.dump();
        const std::string where = "batch item " + std::to_string(offset) + ": ";

        in_flight_->acquire();
        struct Release {
            std::counting_semaphore<1024>* s;
            ~Release() { s->release(); }
        } release{in_flight_.get()};

        httplib::Result res;
        for (int attempt = 0; attempt <= spec_.max_retries; ++attempt) {
            httplib::Client cli(endpoint);
            const auto sec = spec_.timeout_ms / 1000;
            const auto usec = (spec_.timeout_ms % 1000) * 1000;
            cli.set_connection_timeout(sec, usec);
            cli.set_read_timeout(sec, usec);
            cli.set_write_timeout(sec, usec);
            res = cli.Post("/score", payload, "application/json");
            if (res) break;
        }
        if (!res) {
            throw RemoteError(endpoint, where + "request failed (" + httplib::to_string(res.error()) + ")");
        }
        if (res->status != 200) {
            std::string detail = res->body;
            try {
                detail = json::parse(res->body).at("error").get<std::string>();
            } catch (const std::exception&) {
            }
            throw RemoteError(endpoint, where + "HTTP " + std::to_string(res->status) + ": " + detail);
        }
        std::vector<double> scores;
        try {
            const json reply = json::parse(res->body);
            for (const auto& v : reply.at("scores")) scores.push_back(v.get<double>());
        } catch (const std::exception& e) {
            throw RemoteError(endpoint, where + "malformed response: " + e.what());
        }
        if (scores.size() != items.size()) {
            throw RemoteError(endpoint, where + "malformed response: expected " + std::to_string(items.size()) +
                                            " scores, got " + std::to_string(scores.size()));
        }
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (!std::isfinite(scores[i]) || scores[i] < 0.0 || scores[i] > 100.0) {
                throw RemoteError(endpoint, "batch item " + std::to_string(offset + i) +
                                                ": malformed response: score outside [0,100]");
            }
        }
        return scores;
    }

    ScorerSpec spec_;
    std::shared_ptr<std::counting_semaphore<1024>> in_flight_;
};

inline QualityScore score(const ScorerSpec& spec, const ScoreItem& item) { return Scorer(spec).score(item); }

inline std::vector<QualityScore> score_batch(const ScorerSpec& spec, std::span<const ScoreItem> items) {
    return Scorer(spec).score_batch(items);
}

} // namespace hybridmt
