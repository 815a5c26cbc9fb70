#pragma once

// Shared decider artifacts for tests that need a trained source model and
// classifier.

#include "hybridmt/calibration.hpp"
#include "hybridmt/decider.hpp"
#include "support/synth.hpp"

#include <memory>

namespace fixtures {

inline std::shared_ptr<const hybridmt::NgramLanguageModel> source_lm() {
    static const auto lm = [] {
        std::vector<std::string> corpus;
        for (const auto& r : synth::records(5000, 100, {.with_scores = false})) corpus.push_back(r.segment.text);
        return std::make_shared<const hybridmt::NgramLanguageModel>(hybridmt::NgramLanguageModel::train(corpus, {}));
    }();
    return lm;
}

inline std::shared_ptr<const hybridmt::LinearDecider> classifier() {
    static const auto clf = [] {
        const auto recs = synth::records(4000, 21);
        const auto set = hybridmt::select_jdm_samples(recs, {0.10, 100, 3, 1});
        return std::make_shared<const hybridmt::LinearDecider>(hybridmt::train_linear_decider(set, *source_lm(), {}));
    }();
    return clf;
}

inline hybridmt::DeciderSpec spec(hybridmt::Policy p, hybridmt::LanguagePair pair = {"de", "en"}) {
    hybridmt::DeciderSpec s;
    s.policy = p;
    s.thresholds.pair = std::move(pair);
    return s;
}

inline hybridmt::Decider decider(hybridmt::Policy p, std::optional<double> threshold = std::nullopt) {
    auto s = spec(p);
    if (p == hybridmt::Policy::pplt) s.thresholds.pplt_threshold = threshold;
    if (p == hybridmt::Policy::qet) s.thresholds.qet_threshold = threshold;
    return hybridmt::Decider(s, source_lm(), p == hybridmt::Policy::jdm ? classifier() : nullptr);
}

} // namespace fixtures
