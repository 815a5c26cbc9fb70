#pragma once

#include "hybridmt/calibration.hpp"
#include "hybridmt/core.hpp"
#include "hybridmt/error.hpp"
#include "hybridmt/io.hpp"
#include "hybridmt/ngram_lm.hpp"
#include "hybridmt/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hybridmt {

// ---- source features ------------------------------------------------------------

inline const std::vector<std::string>& feature_names() {
    static const std::vector<std::string> names = {
        "log_ppl",      "token_count",    "mean_token_length", "rare_token_fraction",
        "digit_fraction", "punct_fraction", "latin_fraction",    "char_entropy",
    };
    return names;
}

struct FeatureVector {
    std::vector<double> values; // aligned with feature_names()

    friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

// Complexity signals computed from the source sentence alone. Character
// fractions are taken over non-whitespace code points.
inline FeatureVector extract_features(const Segment& segment, const SourceLanguageModel& lm) {
    const auto tokens = lm.tokenize(segment.text);
    const double ppl = lm.perplexity(segment.text).value;

    double len_sum = 0.0;
    std::size_t rare = 0;
    for (const auto& t : tokens) {
        len_sum += static_cast<double>(text::decode_utf8(t).size());
        if (!lm.is_known(t)) ++rare;
    }
    const double n_tok = static_cast<double>(tokens.size());

    std::size_t chars = 0, digits = 0, punct = 0, latin = 0;
    std::unordered_map<char32_t, std::size_t> freq;
    for (char32_t c : text::decode_utf8(segment.text)) {
        if (text::is_space(c)) continue;
        ++chars;
        digits += text::is_digit(c);
        punct += text::is_punct(c);
        latin += text::is_latin(c);
        ++freq[c];
    }
    const double n_chr = static_cast<double>(chars);
    double entropy = 0.0;
    for (const auto& [c, k] : freq) {
        (void)c;
        const double p = static_cast<double>(k) / n_chr;
        entropy -= p * std::log2(p);
    }
    auto frac = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
    return FeatureVector{{
        std::log(ppl),
        n_tok,
        frac(len_sum, n_tok),
        frac(static_cast<double>(rare), n_tok),
        frac(static_cast<double>(digits), n_chr),
        frac(static_cast<double>(punct), n_chr),
        frac(static_cast<double>(latin), n_chr),
        entropy,
    }};
}

// ---- logistic decider -------------------------------------------------------------

struct FeatureScaling {
    double mean = 0.0;
    double std = 1.0;

    friend bool operator==(const FeatureScaling&, const FeatureScaling&) = default;
};

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

struct LinearDecider {
    std::vector<std::string> feature_names;
    std::vector<double> weights;
    double bias = 0.0;
    std::vector<FeatureScaling> scaling;
    json provenance = json::object();

    void validate() const {
        if (weights.size() != feature_names.size() || scaling.size() != feature_names.size()) {
            throw ValidationError("linear decider: weights, scaling and feature names differ in length");
        }
        for (const auto& s : scaling) {
            if (!(s.std > 0.0)) throw ValidationError("linear decider: feature std must be positive");
        }
    }

    double logit(std::span<const double> x) const {
        if (x.size() != weights.size()) throw ValidationError("feature vector has wrong length");
        double z = bias;
        for (std::size_t i = 0; i < x.size(); ++i) z += weights[i] * (x[i] - scaling[i].mean) / scaling[i].std;
        return z;
    }

    double probability(const FeatureVector& f) const { return sigmoid(logit(f.values)); }
};

inline json to_json(const LinearDecider& d) {
    json scaling = json::array();
    for (const auto& s : d.scaling) scaling.push_back({{"mean", s.mean}, {"std", s.std}});
    return json{{"feature_names", d.feature_names},
                {"weights", d.weights},
                {"bias", d.bias},
                {"scaling", scaling},
                {"provenance", d.provenance}};
}

inline LinearDecider linear_decider_from_json(const json& j) {
    LinearDecider d;
    try {
        d.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        d.weights = j.at("weights").get<std::vector<double>>();
        d.bias = j.at("bias").get<double>();
        for (const auto& s : j.at("scaling")) d.scaling.push_back({s.at("mean").get<double>(), s.at("std").get<double>()});
        d.provenance = j.value("provenance", json::object());
    } catch (const json::exception& e) {
        throw ValidationError(std::string("linear decider: ") + e.what());
    }
    d.validate();
    return d;
}

inline void save_linear_decider(const std::filesystem::path& path, const LinearDecider& d) {
    d.validate();
    io::atomic_write(path, to_json(d).dump(2) + "\n");
}

inline LinearDecider load_linear_decider(const std::filesystem::path& path) {
    try {
        return linear_decider_from_json(json::parse(io::read_file(path)));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

// Mean logistic loss over standardized rows plus (l2/2)|w|^2; the bias is
// not regularized.
struct LogisticObjective {
    std::span<const std::vector<double>> rows;
    std::span<const int> labels;
    double l2 = 0.0;

    double loss(std::span<const double> w, double b) const {
        double total = 0.0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const double z = dot(w, rows[r]) + b;
            total += softplus(z) - labels[r] * z;
        }
        double reg = 0.0;
        for (double v : w) reg += v * v;
        return total / static_cast<double>(rows.size()) + 0.5 * l2 * reg;
    }

    void gradient(std::span<const double> w, double b, std::vector<double>& gw, double& gb) const {
        gw.assign(w.size(), 0.0);
        gb = 0.0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const double err = sigmoid(dot(w, rows[r]) + b) - labels[r];
            for (std::size_t i = 0; i < w.size(); ++i) gw[i] += err * rows[r][i];
            gb += err;
        }
        const double inv = 1.0 / static_cast<double>(rows.size());
        for (std::size_t i = 0; i < w.size(); ++i) gw[i] = gw[i] * inv + l2 * w[i];
        gb *= inv;
    }

    static double dot(std::span<const double> w, const std::vector<double>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
        return s;
    }
};

struct TrainOptions {
    int epochs = 300;
    double learning_rate = 0.5;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
};

// Full-batch gradient descent on the standardized logistic loss. The seed
// only drives the small random weight initialization.
inline LinearDecider train_logistic(const std::vector<std::string>& names, std::span<const FeatureVector> features,
                                    std::span<const int> labels, const TrainOptions& opts,
                                    std::vector<std::string>* warnings = nullptr) {
    if (features.empty() || features.size() != labels.size()) {
        throw ValidationError("training needs one label per feature vector");
    }
    const bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
    const bool has_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
    if (!has_pos || !has_neg) throw ValidationError("training needs both positive and negative samples");
    if (opts.epochs <= 0 || !(opts.learning_rate > 0.0) || opts.l2 < 0.0) {
        throw ValidationError("bad training hyper-parameters");
    }
    const std::size_t dim = names.size();
    for (const auto& f : features) {
        if (f.values.size() != dim) throw ValidationError("feature vector has wrong length");
        for (double v : f.values) {
            if (!std::isfinite(v)) throw ValidationError("non-finite feature value");
        }
    }

    LinearDecider d;
    d.feature_names = names;
    d.scaling.resize(dim);
    const double n = static_cast<double>(features.size());
    for (std::size_t i = 0; i < dim; ++i) {
        double mean = 0.0;
        for (const auto& f : features) mean += f.values[i];
        mean /= n;
        double var = 0.0;
        for (const auto& f : features) var += (f.values[i] - mean) * (f.values[i] - mean);
        double sd = std::sqrt(var / n);
        if (!(sd > 1e-12)) {
            sd = 1.0;
            if (warnings) warnings->push_back("feature '" + names[i] + "' has zero variance; std clamped to 1");
        }
        d.scaling[i] = {mean, sd};
    }
    std::vector<std::vector<double>> rows;
    rows.reserve(features.size());
    for (const auto& f : features) {
        std::vector<double> r(dim);
        for (std::size_t i = 0; i < dim; ++i) r[i] = (f.values[i] - d.scaling[i].mean) / d.scaling[i].std;
        rows.push_back(std::move(r));
    }

    std::mt19937_64 rng(opts.seed);
    d.weights.resize(dim);
    for (auto& w : d.weights) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        w = 0.02 * u - 0.01;
    }
    LogisticObjective obj{rows, labels, opts.l2};
    std::vector<double> gw;
    double gb = 0.0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        obj.gradient(d.weights, d.bias, gw, gb);
        for (std::size_t i = 0; i < dim; ++i) d.weights[i] -= opts.learning_rate * gw[i];
        d.bias -= opts.learning_rate * gb;
    }
    d.provenance = {{"samples", features.size()},
                    {"positives", std::count(labels.begin(), labels.end(), 1)},
                    {"epochs", opts.epochs},
                    {"learning_rate", opts.learning_rate},
                    {"l2", opts.l2},
                    {"seed", opts.seed},
                    {"final_loss", obj.loss(d.weights, d.bias)}};
    return d;
}

inline LinearDecider train_linear_decider(const JdmTrainingSet& train, const SourceLanguageModel& lm,
                                          const TrainOptions& opts, std::vector<std::string>* warnings = nullptr) {
    if (train.positives.empty() || train.negatives.empty()) {
        throw ValidationError("decider training needs positives and negatives");
    }
    std::vector<FeatureVector> x;
    std::vector<int> y;
    for (const auto& r : train.positives) {
        x.push_back(extract_features(r.segment, lm));
        y.push_back(1);
    }
    for (const auto& r : train.negatives) {
        x.push_back(extract_features(r.segment, lm));
        y.push_back(0);
    }
    auto d = train_logistic(feature_names(), x, y, opts, warnings);
    d.provenance["t1"] = train.t1;
    d.provenance["t2"] = train.t2;
    return d;
}

// ---- routing policies ------------------------------------------------------------

enum class Policy { always_nmt, always_llm, qet, pplt, jdm, oracle };

inline std::string_view to_string(Policy p) {
    switch (p) {
    case Policy::always_nmt: return "always_nmt";
    case Policy::always_llm: return "always_llm";
    case Policy::qet: return "qet";
    case Policy::pplt: return "pplt";
    case Policy::jdm: return "jdm";
    case Policy::oracle: return "oracle";
    }
    return "?";
}

inline Policy parse_policy(std::string_view s) {
    for (Policy p : {Policy::always_nmt, Policy::always_llm, Policy::qet, Policy::pplt, Policy::jdm, Policy::oracle}) {
        if (s == to_string(p)) return p;
    }
    if (s == "nmt") return Policy::always_nmt;
    if (s == "llm") return Policy::always_llm;
    throw ValidationError("unknown policy '" + std::string(s) + "'");
}

struct DeciderSpec {
    Policy policy = Policy::always_nmt;
    PolicyThresholds thresholds;
    std::optional<std::filesystem::path> lm_path;
    std::optional<std::filesystem::path> classifier_path;
    double decision_boundary = 0.5;
};

// Relative artifact paths resolve against `base_dir`. Thresholds come either
// inline ("thresholds") or from a file ("thresholds_path").
inline DeciderSpec decider_spec_from_json(const json& j, const std::filesystem::path& base_dir,
                                          const std::optional<LanguagePair>& pair) {
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    DeciderSpec s;
    try {
        s.policy = parse_policy(j.at("policy").get<std::string>());
        if (j.contains("thresholds")) {
            json t = j["thresholds"];
            if (!t.contains("pair") && pair) t["pair"] = pair->str();
            s.thresholds = thresholds_from_json(t);
        } else if (j.contains("thresholds_path")) {
            s.thresholds = load_thresholds(resolve(j["thresholds_path"].get<std::string>()), pair);
        } else if (pair) {
            s.thresholds.pair = *pair;
        }
        if (j.contains("lm_path")) s.lm_path = resolve(j["lm_path"].get<std::string>());
        if (j.contains("classifier_path")) s.classifier_path = resolve(j["classifier_path"].get<std::string>());
        s.decision_boundary = j.value("decision_boundary", 0.5);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("decider spec: ") + e.what());
    }
    return s;
}

struct DecisionContext {
    std::optional<QualityScore> qe_score;
    std::optional<QualityScore> q_nmt;
    std::optional<QualityScore> q_llm;
};

struct Decision {
    Backend backend = Backend::nmt;
    std::map<std::string, double> evidence;
};

// A loaded policy. Immutable after construction; decide() is safe to call
// concurrently.
class Decider {
public:
    // Loads the artifacts named in the DeciderSpec.
    explicit Decider(DeciderSpec spec) : spec_(std::move(spec)) {
        if (spec_.lm_path && needs_lm()) {
            lm_ = std::make_shared<NgramLanguageModel>(NgramLanguageModel::load(*spec_.lm_path));
        }
        if (spec_.classifier_path && spec_.policy == Policy::jdm) {
            classifier_ = std::make_shared<LinearDecider>(load_linear_decider(*spec_.classifier_path));
        }
        check();
    }

    Decider(DeciderSpec spec, std::shared_ptr<const SourceLanguageModel> lm,
            std::shared_ptr<const LinearDecider> classifier)
        : spec_(std::move(spec)), lm_(std::move(lm)), classifier_(std::move(classifier)) {
        check();
    }

    const DeciderSpec& spec() const noexcept { return spec_; }
    Policy policy() const noexcept { return spec_.policy; }
    const SourceLanguageModel* language_model() const noexcept { return lm_.get(); }
    const LinearDecider* classifier() const noexcept { return classifier_.get(); }

    // Same artifacts, different spec (thresholds or boundary).
    Decider with_spec(DeciderSpec spec) const { return Decider(std::move(spec), lm_, classifier_); }

    // Policies that route from the source text alone, before any backend runs.
    bool source_only() const noexcept { return spec_.policy != Policy::qet && spec_.policy != Policy::oracle; }

    Decision decide(const Segment& segment, const DecisionContext& ctx = {}) const {
        Decision d;
        switch (spec_.policy) {
        case Policy::always_nmt:
            d.backend = Backend::nmt;
            break;
        case Policy::always_llm:
            d.backend = Backend::llm;
            break;
        case Policy::pplt: {
            const double ppl = lm_->perplexity(segment.text).value;
            d.evidence["ppl"] = ppl;
            d.backend = ppl > *spec_.thresholds.pplt_threshold ? Backend::llm : Backend::nmt;
            break;
        }
        case Policy::jdm: {
            const auto f = extract_features(segment, *lm_);
            const double p = classifier_->probability(f);
            d.evidence["classifier_prob"] = p;
            d.evidence["ppl"] = std::exp(f.values[0]);
            d.backend = p > spec_.decision_boundary ? Backend::llm : Backend::nmt;
            break;
        }
        case Policy::qet: {
            if (!ctx.qe_score) throw ValidationError("qet policy needs a QE score for '" + segment.id + "'");
            d.evidence["qe_nmt"] = ctx.qe_score->value;
            d.backend = ctx.qe_score->value < *spec_.thresholds.qet_threshold ? Backend::llm : Backend::nmt;
            break;
        }
        case Policy::oracle: {
            if (!ctx.q_nmt || !ctx.q_llm) {
                throw ValidationError("oracle policy needs q_nmt and q_llm for '" + segment.id + "'");
            }
            if (ctx.q_nmt->kind != ctx.q_llm->kind) {
                throw ValidationError("oracle policy given scores of different kinds for '" + segment.id + "'");
            }
            d.evidence["q_nmt"] = ctx.q_nmt->value;
            d.evidence["q_llm"] = ctx.q_llm->value;
            d.backend = ctx.q_llm->value > ctx.q_nmt->value ? Backend::llm : Backend::nmt;
            break;
        }
        }
        return d;
    }

private:
    bool needs_lm() const { return spec_.policy == Policy::pplt || spec_.policy == Policy::jdm; }

    void check() const {
        const auto name = std::string(to_string(spec_.policy));
        if (!(spec_.decision_boundary >= 0.0 && spec_.decision_boundary <= 1.0)) {
            throw ValidationError("decision boundary must lie in [0,1]");
        }
        if (needs_lm() && !lm_) throw ValidationError(name + " policy needs a language model (lm_path)");
        if (spec_.policy == Policy::pplt && !spec_.thresholds.pplt_threshold) {
            throw ValidationError("pplt policy needs pplt_threshold");
        }
        if (spec_.policy == Policy::qet && !spec_.thresholds.qet_threshold) {
            throw ValidationError("qet policy needs qet_threshold");
        }
        if (spec_.policy == Policy::jdm) {
            if (!classifier_) throw ValidationError("jdm policy needs a classifier (classifier_path)");
            classifier_->validate();
            if (classifier_->feature_names != feature_names()) {
                throw ValidationError("classifier features do not match this build's feature set");
            }
        }
    }

    DeciderSpec spec_;
    std::shared_ptr<const SourceLanguageModel> lm_;
    std::shared_ptr<const LinearDecider> classifier_;
};

} // namespace hybridmt
