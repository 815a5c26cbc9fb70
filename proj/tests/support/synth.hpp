#pragma once

// Seeded synthetic data for tests. Everything here is a pure function of its
// seed, built from raw mt19937_64 output so fixtures match across platforms.

#include "hybridmt/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

namespace synth {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : g_(seed) {}

    double uniform() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
    bool chance(double p) { return uniform() < p; }

    // Box-Muller.
    double normal(double mean = 0.0, double sd = 1.0) {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::mt19937_64& engine() { return g_; }

private:
    std::mt19937_64 g_;
};

inline std::string word(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
    return buf;
}

// Zipf-distributed word source.
class Lexicon {
public:
    Lexicon(std::size_t size, double exponent, const char* prefix = "w") {
        double acc = 0.0;
        for (std::size_t r = 0; r < size; ++r) {
            acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
            cdf_.push_back(acc);
            words_.push_back(word(prefix, r));
        }
        for (auto& c : cdf_) c /= acc;
    }

    const std::string& draw(Rng& rng) const {
        const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), rng.uniform());
        return words_[std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), words_.size() - 1)];
    }

    std::size_t size() const { return words_.size(); }

private:
    std::vector<double> cdf_;
    std::vector<std::string> words_;
};

inline std::string sentence(Rng& rng, const Lexicon& lex, std::size_t min_len = 4, std::size_t max_len = 20) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    std::string s;
    for (std::size_t i = 0; i < len; ++i) {
        if (i) s += ' ';
        s += lex.draw(rng);
    }
    return s;
}

// Monolingual corpus; every draw of the same (seed, n) is identical. Different
// seeds give independent corpora from one distribution.
inline std::vector<std::string> corpus(std::size_t n, std::uint64_t seed, std::size_t vocab = 3000) {
    const Lexicon lex(vocab, 1.05);
    Rng rng(seed);
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(sentence(rng, lex));
    return out;
}

inline std::string drop_words(Rng& rng, const std::string& s, double p) {
    std::string out;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto end = s.find(' ', start);
        if (end == std::string::npos) end = s.size();
        if (!rng.chance(p)) {
            if (!out.empty()) out += ' ';
            out += s.substr(start, end - start);
        }
        start = end + 1;
    }
    return out.empty() ? s.substr(0, s.find(' ')) : out;
}

struct RecordOptions {
    hybridmt::LanguagePair pair{"de", "en"};
    double hard_fraction = 0.05;
    bool with_scores = true;
    bool with_qe = false;
};

// Scored records. Hard segments get lower NMT quality and a larger LLM gain;
// every 1/hard_fraction-th record is hard, so the split is exact.
inline std::vector<hybridmt::EvalRecord> records(std::size_t n, std::uint64_t seed, const RecordOptions& o = {}) {
    static const Lexicon src_lex(3000, 1.05, "s");
    static const Lexicon tgt_lex(3000, 1.05, "t");
    Rng rng(seed);
    const std::size_t period = o.hard_fraction > 0.0 ? static_cast<std::size_t>(std::llround(1.0 / o.hard_fraction)) : 0;
    std::vector<hybridmt::EvalRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        hybridmt::EvalRecord r;
        const bool hard = period && i % period == period - 1;
        r.segment.id = word("seg", i);
        r.segment.pair = o.pair;
        r.segment.text = sentence(rng, src_lex, hard ? 15 : 4, hard ? 30 : 18);
        r.segment.annotations["difficulty"] = hard ? "hard" : "simple";
        r.segment.annotations["domain"] = i % 3 == 0 ? "news" : (i % 3 == 1 ? "literary" : "social");
        r.reference = sentence(rng, tgt_lex);
        r.nmt_hyp = drop_words(rng, *r.reference, hard ? 0.4 : 0.15);
        r.llm_hyp = drop_words(rng, *r.reference, hard ? 0.2 : 0.18);
        if (o.with_scores) {
            const double qn = hard ? rng.uniform(35.0, 75.0) : rng.uniform(60.0, 95.0);
            const double gain = hard ? rng.normal(6.0, 4.0) : rng.normal(-0.5, 3.0);
            r.q_nmt = hybridmt::QualityScore{qn, hybridmt::ScoreKind::reference_based};
            r.q_llm = hybridmt::QualityScore{std::clamp(qn + gain, 0.0, 100.0), hybridmt::ScoreKind::reference_based};
        }
        if (o.with_qe) {
            r.qe_nmt = hybridmt::QualityScore{rng.uniform(40.0, 95.0), hybridmt::ScoreKind::reference_free};
        }
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace synth
