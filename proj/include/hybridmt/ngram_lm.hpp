#pragma once

#include "hybridmt/error.hpp"
#include "hybridmt/io.hpp"
#include "hybridmt/text.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hybridmt {

enum class Tokenizer { whitespace, character };
enum class Smoothing { add_k, interpolated_kneser_ney };

inline std::string_view to_string(Tokenizer t) {
    return t == Tokenizer::whitespace ? "whitespace" : "character";
}

inline Tokenizer parse_tokenizer(std::string_view s) {
    if (s == "whitespace") return Tokenizer::whitespace;
    if (s == "character" || s == "char") return Tokenizer::character;
    throw ValidationError("unknown tokenizer '" + std::string(s) + "'");
}

inline std::string_view to_string(Smoothing s) {
    return s == Smoothing::add_k ? "add_k" : "interpolated_kneser_ney";
}

inline Smoothing parse_smoothing(std::string_view s) {
    if (s == "add_k") return Smoothing::add_k;
    if (s == "interpolated_kneser_ney" || s == "kn") return Smoothing::interpolated_kneser_ney;
    throw ValidationError("unknown smoothing '" + std::string(s) + "'");
}

inline std::vector<std::string> tokenize(std::string_view sentence, Tokenizer t) {
    return t == Tokenizer::whitespace ? text::split_whitespace(sentence) : text::split_characters(sentence);
}

struct LmOptions {
    int order = 3;
    Tokenizer tokenizer = Tokenizer::whitespace;
    Smoothing smoothing = Smoothing::interpolated_kneser_ney;
    double k = 1.0; // add_k only
    int min_count = 2;
};

struct PerplexityScore {
    double value = 0.0;
    std::size_t token_count = 0; // includes the appended end-of-sentence token
    double log_prob = 0.0;       // natural-log sum over the scored tokens
};

// What the routing features need from a source-side language model. The
// n-gram model below is the built-in implementation.
class SourceLanguageModel {
public:
    virtual ~SourceLanguageModel() = default;
    virtual PerplexityScore perplexity(std::string_view sentence) const = 0;
    virtual std::vector<std::string> tokenize(std::string_view sentence) const = 0;
    // False for tokens the model maps to its unknown-word class.
    virtual bool is_known(std::string_view token) const = 0;
};

class NgramLanguageModel final : public SourceLanguageModel {
public:
    using TokenId = std::uint32_t;
    using Gram = std::vector<TokenId>;

    static constexpr TokenId kUnk = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kEos = 2;
    static constexpr int kFormatVersion = 1;
    static constexpr std::string_view kMagic = "hybridmt-ngram-lm";

    static NgramLanguageModel train(std::span<const std::string> corpus, const LmOptions& opts) {
        if (corpus.empty()) throw ValidationError("cannot train a language model on an empty corpus");
        if (opts.order < 1 || opts.order > 5) throw ValidationError("n-gram order must be in [1,5]");
        if (opts.min_count < 1) throw ValidationError("min_count must be >= 1");
        if (opts.smoothing == Smoothing::add_k && !(opts.k > 0.0 && std::isfinite(opts.k))) {
            throw ValidationError("add_k smoothing needs k > 0");
        }

        std::vector<std::vector<std::string>> tokenized;
        tokenized.reserve(corpus.size());
        std::map<std::string, std::uint64_t> freq;
        for (const auto& line : corpus) {
            tokenized.push_back(hybridmt::tokenize(line, opts.tokenizer));
            for (const auto& t : tokenized.back()) ++freq[t];
        }

        NgramLanguageModel lm;
        lm.opts_ = opts;
        lm.vocab_ = {"<unk>", "<s>", "</s>"};
        for (const auto& [tok, c] : freq) {
            if (c >= static_cast<std::uint64_t>(opts.min_count)) lm.vocab_.push_back(tok);
        }
        lm.rebuild_index();

        const auto n = static_cast<std::size_t>(opts.order);
        lm.counts_.assign(n, {});
        auto& top = lm.counts_[n - 1];
        Gram window;
        for (const auto& toks : tokenized) {
            Gram ids(n - 1, kBos);
            for (const auto& t : toks) ids.push_back(lm.id_of(t));
            ids.push_back(kEos);
            for (std::size_t i = n - 1; i < ids.size(); ++i) {
                window.assign(ids.begin() + static_cast<std::ptrdiff_t>(i + 1 - n),
                              ids.begin() + static_cast<std::ptrdiff_t>(i + 1));
                ++top[window];
            }
        }

        if (opts.smoothing == Smoothing::interpolated_kneser_ney) {
            // Lower levels hold continuation counts: the number of distinct
            // left extensions of each gram at the level above.
            for (std::size_t m = n - 1; m >= 1; --m) {
                auto& lower = lm.counts_[m - 1];
                for (const auto& [g, c] : lm.counts_[m]) {
                    (void)c;
                    ++lower[Gram(g.begin() + 1, g.end())];
                }
            }
        }
        lm.finalize();
        return lm;
    }

    const LmOptions& options() const noexcept { return opts_; }
    int order() const noexcept { return opts_.order; }
    std::size_t vocabulary_size() const noexcept { return vocab_.size(); }
    const std::string& token(TokenId id) const { return vocab_.at(id); }

    TokenId id_of(std::string_view tok) const {
        auto it = index_.find(std::string(tok));
        return it == index_.end() ? kUnk : it->second;
    }

    bool is_known(std::string_view tok) const override { return index_.count(std::string(tok)) > 0; }

    std::vector<std::string> tokenize(std::string_view sentence) const override {
        return hybridmt::tokenize(sentence, opts_.tokenizer);
    }

    // Every id that can be predicted: the vocabulary minus the start symbol.
    std::vector<TokenId> predictable_ids() const {
        std::vector<TokenId> ids;
        ids.reserve(vocab_.size() - 1);
        for (TokenId i = 0; i < vocab_.size(); ++i) {
            if (i != kBos) ids.push_back(i);
        }
        return ids;
    }

    // p(word | context). Only the last order-1 context ids are used; shorter
    // contexts are left-padded with the start symbol.
    double probability(std::span<const TokenId> context, TokenId word) const {
        const std::size_t hist = static_cast<std::size_t>(opts_.order) - 1;
        Gram gram(hist + 1, kBos);
        const std::size_t take = std::min(hist, context.size());
        std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
                  gram.begin() + static_cast<std::ptrdiff_t>(hist - take));
        gram[hist] = word;
        return opts_.smoothing == Smoothing::add_k ? add_k_prob(gram) : kn_prob(gram, gram.size());
    }

    PerplexityScore perplexity(std::string_view sentence) const override {
        const std::size_t hist = static_cast<std::size_t>(opts_.order) - 1;
        Gram ids(hist, kBos);
        for (const auto& t : tokenize(sentence)) ids.push_back(id_of(t));
        ids.push_back(kEos);
        PerplexityScore out;
        out.token_count = ids.size() - hist;
        std::span<const TokenId> all(ids);
        for (std::size_t i = hist; i < ids.size(); ++i) {
            out.log_prob += std::log(probability(all.subspan(i - hist, hist), ids[i]));
        }
        out.value = std::exp(-out.log_prob / static_cast<double>(out.token_count));
        return out;
    }

    // Copy of the model whose regular tokens carry new ids. `new_id[old]`
    // must be a permutation that fixes the three reserved ids.
    NgramLanguageModel renumbered(std::span<const TokenId> new_id) const {
        if (new_id.size() != vocab_.size()) throw ValidationError("renumbering has wrong size");
        std::vector<bool> used(vocab_.size(), false);
        for (TokenId old = 0; old < new_id.size(); ++old) {
            const TokenId id = new_id[old];
            if (id >= vocab_.size() || used[id] || (old < 3 && id != old) || (old >= 3 && id < 3)) {
                throw ValidationError("renumbering is not a permutation fixing reserved ids");
            }
            used[id] = true;
        }
        NgramLanguageModel out;
        out.opts_ = opts_;
        out.vocab_.resize(vocab_.size());
        for (TokenId old = 0; old < vocab_.size(); ++old) out.vocab_[new_id[old]] = vocab_[old];
        out.rebuild_index();
        out.counts_.assign(counts_.size(), {});
        for (std::size_t m = 0; m < counts_.size(); ++m) {
            for (const auto& [g, c] : counts_[m]) {
                Gram mapped(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) mapped[i] = new_id[g[i]];
                out.counts_[m][mapped] = c;
            }
        }
        out.finalize();
        return out;
    }

    // ---- persistence ---------------------------------------------------------
    //
    // Text container: magic line, version, options, vocabulary (one token per
    // line, in id order), then one block of "ids<TAB>count" lines per level,
    // closed by "end". Derived tables are recomputed on load, so a loaded model
    // is bit-identical in behaviour to the saved one.

    std::string serialize() const {
        std::string out;
        auto line = [&out](const std::string& s) {
            out += s;
            out += '\n';
        };
        char kbuf[64];
        std::snprintf(kbuf, sizeof kbuf, "%.17g", opts_.k);
        line(std::string(kMagic));
        line("version " + std::to_string(kFormatVersion));
        line("order " + std::to_string(opts_.order));
        line("tokenizer " + std::string(to_string(opts_.tokenizer)));
        line("smoothing " + std::string(to_string(opts_.smoothing)));
        line(std::string("k ") + kbuf);
        line("min_count " + std::to_string(opts_.min_count));
        line("vocab " + std::to_string(vocab_.size()));
        for (const auto& t : vocab_) line(t);
        for (std::size_t m = 0; m < counts_.size(); ++m) {
            line("level " + std::to_string(m + 1) + " " + std::to_string(counts_[m].size()));
            for (const auto& [g, c] : counts_[m]) {
                std::string row;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (i) row += ' ';
                    row += std::to_string(g[i]);
                }
                row += '\t';
                row += std::to_string(c);
                line(row);
            }
        }
        line("end");
        return out;
    }

    static NgramLanguageModel deserialize(std::string_view data, const std::string& name = "<memory>") {
        const auto lines = io::split_lines(data);
        std::size_t pos = 0;
        auto next = [&]() -> const std::string& {
            if (pos >= lines.size()) throw ValidationError(name + ": truncated language model file");
            return lines[pos++];
        };
        auto keyed = [&](std::string_view key) {
            const std::string& l = next();
            if (l.size() <= key.size() || l.compare(0, key.size(), key) != 0 || l[key.size()] != ' ') {
                throw ValidationError(name + ": expected '" + std::string(key) + "' at line " +
                                      std::to_string(pos));
            }
            return l.substr(key.size() + 1);
        };
        auto to_u64 = [&](const std::string& s) {
            char* end = nullptr;
            const auto v = std::strtoull(s.c_str(), &end, 10);
            if (s.empty() || *end != '\0') {
                throw ValidationError(name + ": bad integer '" + s + "' at line " + std::to_string(pos));
            }
            return static_cast<std::uint64_t>(v);
        };

        if (lines.empty() || lines[0] != kMagic) {
            throw ValidationError(name + ": not a hybridmt n-gram model (bad magic header)");
        }
        ++pos;
        const auto version = to_u64(keyed("version"));
        if (version != kFormatVersion) {
            throw ValidationError(name + ": unsupported model format version " + std::to_string(version));
        }
        NgramLanguageModel lm;
        lm.opts_.order = static_cast<int>(to_u64(keyed("order")));
        if (lm.opts_.order < 1 || lm.opts_.order > 5) throw ValidationError(name + ": bad order");
        lm.opts_.tokenizer = parse_tokenizer(keyed("tokenizer"));
        lm.opts_.smoothing = parse_smoothing(keyed("smoothing"));
        lm.opts_.k = std::strtod(keyed("k").c_str(), nullptr);
        lm.opts_.min_count = static_cast<int>(to_u64(keyed("min_count")));
        const auto vsize = to_u64(keyed("vocab"));
        if (vsize < 3) throw ValidationError(name + ": vocabulary lacks reserved tokens");
        lm.vocab_.reserve(vsize);
        for (std::uint64_t i = 0; i < vsize; ++i) lm.vocab_.push_back(next());
        lm.rebuild_index();

        lm.counts_.assign(static_cast<std::size_t>(lm.opts_.order), {});
        for (std::size_t m = 0; m < lm.counts_.size(); ++m) {
            const std::string header = keyed("level");
            const auto sp = header.find(' ');
            if (sp == std::string::npos || to_u64(header.substr(0, sp)) != m + 1) {
                throw ValidationError(name + ": bad level header at line " + std::to_string(pos));
            }
            const auto entries = to_u64(header.substr(sp + 1));
            for (std::uint64_t e = 0; e < entries; ++e) {
                const std::string& row = next();
                const auto tab = row.find('\t');
                if (tab == std::string::npos) {
                    throw ValidationError(name + ": bad n-gram row at line " + std::to_string(pos));
                }
                Gram g;
                for (const auto& tok : text::split_whitespace(std::string_view(row).substr(0, tab))) {
                    const auto id = to_u64(tok);
                    if (id >= vsize) throw ValidationError(name + ": token id out of range");
                    g.push_back(static_cast<TokenId>(id));
                }
                if (g.size() != m + 1) {
                    throw ValidationError(name + ": n-gram of wrong length at line " + std::to_string(pos));
                }
                lm.counts_[m][std::move(g)] = to_u64(row.substr(tab + 1));
            }
        }
        if (next() != "end") throw ValidationError(name + ": missing end marker");
        lm.finalize();
        return lm;
    }

    void save(const std::filesystem::path& path) const { io::atomic_write(path, serialize()); }

    static NgramLanguageModel load(const std::filesystem::path& path) {
        return deserialize(io::read_file(path), path.string());
    }

    // Discount used at each level (index 0 = unigrams); zero for add_k.
    const std::vector<double>& discounts() const noexcept { return discount_; }

private:
    struct ContextStats {
        std::uint64_t total = 0;
        std::uint64_t distinct = 0;
    };

    NgramLanguageModel() = default;

    void rebuild_index() {
        index_.clear();
        for (TokenId i = 3; i < vocab_.size(); ++i) index_.emplace(vocab_[i], i);
    }

    void finalize() {
        const std::size_t n = counts_.size();
        contexts_.assign(n, {});
        discount_.assign(n, 0.0);
        for (std::size_t m = 0; m < n; ++m) {
            std::uint64_t n1 = 0, n2 = 0;
            for (const auto& [g, c] : counts_[m]) {
                auto& st = contexts_[m][Gram(g.begin(), g.end() - 1)];
                st.total += c;
                if (c > 0) ++st.distinct;
                n1 += (c == 1);
                n2 += (c == 2);
            }
            if (opts_.smoothing == Smoothing::interpolated_kneser_ney) {
                discount_[m] = n1 > 0 ? static_cast<double>(n1) / static_cast<double>(n1 + 2 * n2) : 0.5;
            }
        }
    }

    double uniform() const { return 1.0 / static_cast<double>(vocab_.size() - 1); }

    std::uint64_t count_at(std::size_t level, const Gram& g) const {
        const auto& table = counts_[level];
        auto it = table.find(g);
        return it == table.end() ? 0 : it->second;
    }

    const ContextStats* stats_at(std::size_t level, const Gram& ctx) const {
        const auto& table = contexts_[level];
        auto it = table.find(ctx);
        return it == table.end() ? nullptr : &it->second;
    }

    double add_k_prob(const Gram& gram) const {
        const std::size_t top = counts_.size() - 1;
        const ContextStats* st = stats_at(top, Gram(gram.begin(), gram.end() - 1));
        const double total = st ? static_cast<double>(st->total) : 0.0;
        const double c = static_cast<double>(count_at(top, gram));
        const double v = static_cast<double>(vocab_.size() - 1);
        return (c + opts_.k) / (total + opts_.k * v);
    }

    // Interpolated Kneser-Ney over the last `len` ids of `gram`, recursing
    // down to a uniform distribution over the predictable vocabulary.
    double kn_prob(const Gram& gram, std::size_t len) const {
        if (len == 0) return uniform();
        const Gram suffix(gram.end() - static_cast<std::ptrdiff_t>(len), gram.end());
        const double lower = kn_prob(gram, len - 1);
        const ContextStats* st = stats_at(len - 1, Gram(suffix.begin(), suffix.end() - 1));
        if (!st || st->total == 0) return lower;
        const double d = discount_[len - 1];
        const double total = static_cast<double>(st->total);
        const double c = static_cast<double>(count_at(len - 1, suffix));
        return std::max(c - d, 0.0) / total + d * static_cast<double>(st->distinct) / total * lower;
    }

    LmOptions opts_;
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> index_;
    // counts_[m] holds grams of length m+1: raw counts at the top level,
    // continuation counts below it (Kneser-Ney only).
    std::vector<std::map<Gram, std::uint64_t>> counts_;
    std::vector<std::map<Gram, ContextStats>> contexts_;
    std::vector<double> discount_;
};

} // namespace hybridmt
