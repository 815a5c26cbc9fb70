#include "hybridmt/calibration.hpp"
#include "support/synth.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <set>

using namespace hybridmt;

namespace {

std::vector<double> distinct_scores(std::size_t n, std::uint64_t seed) {
    synth::Rng rng(seed);
    std::set<double> seen;
    std::vector<double> v;
    while (v.size() < n) {
        const double x = rng.uniform(0.0, 100.0);
        if (seen.insert(x).second) v.push_back(x);
    }
    return v;
}

std::size_t count_below(const std::vector<double>& v, double t) {
    return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [t](double x) { return x < t; }));
}

std::size_t count_above(const std::vector<double>& v, double t) {
    return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [t](double x) { return x > t; }));
}

} // namespace

TEST(Quantile, RankFormula) {
    EXPECT_EQ(quantile_rank(1'000'000, 0.25), 250'000u);
    EXPECT_EQ(quantile_rank(1'000'000, 0.10), 100'000u);
    EXPECT_EQ(quantile_rank(10'000, 0.10), 1'000u);
    EXPECT_EQ(quantile_rank(4, 0.25), 1u);
    EXPECT_EQ(quantile_rank(3, 0.25), 1u); // floor would give 0
    EXPECT_EQ(quantile_rank(1000, 0.001), 1u);
}

TEST(Quantile, SmallLowestFraction) {
    const std::vector<double> v{40, 10, 30, 20};
    EXPECT_EQ(fit_quantile_threshold(v, 0.25, QuantileDirection::lowest_fraction), 10.0);
    EXPECT_EQ(fit_quantile_threshold(v, 0.25, QuantileDirection::highest_fraction), 40.0);
    EXPECT_EQ(fit_quantile_threshold(v, 0.5, QuantileDirection::lowest_fraction), 20.0);
}

TEST(Quantile, MillionScoresRankIsTheQuarterMillionth) {
    std::vector<double> v(1'000'000);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 7919) % 1'000'000);
    EXPECT_EQ(fit_quantile_threshold(v, 0.25, QuantileDirection::lowest_fraction), 249'999.0);
    EXPECT_EQ(fit_quantile_threshold(v, 0.25, QuantileDirection::highest_fraction), 750'000.0);
}

TEST(Quantile, ExactlyKMinusOneBeyondThreshold) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto v = distinct_scores(1000, seed);
        const double lo = fit_quantile_threshold(v, 0.25, QuantileDirection::lowest_fraction);
        const double hi = fit_quantile_threshold(v, 0.25, QuantileDirection::highest_fraction);
        EXPECT_EQ(count_below(v, lo), 249u);
        EXPECT_EQ(count_above(v, hi), 249u);
    }
}

TEST(Quantile, KMinusOneAcrossFractions) {
    const auto v = distinct_scores(997, 77);
    for (double f : {0.01, 0.1, 0.25, 0.333, 0.5, 0.9, 0.99}) {
        const std::size_t k = quantile_rank(v.size(), f);
        EXPECT_EQ(count_below(v, fit_quantile_threshold(v, f, QuantileDirection::lowest_fraction)), k - 1) << f;
        EXPECT_EQ(count_above(v, fit_quantile_threshold(v, f, QuantileDirection::highest_fraction)), k - 1) << f;
    }
}

TEST(Quantile, Preconditions) {
    const std::vector<double> v{1, 2};
    EXPECT_THROW(fit_quantile_threshold({}, 0.25, QuantileDirection::lowest_fraction), ValidationError);
    EXPECT_THROW(fit_quantile_threshold(v, 0.0, QuantileDirection::lowest_fraction), ValidationError);
    EXPECT_THROW(fit_quantile_threshold(v, 1.0, QuantileDirection::lowest_fraction), ValidationError);
    const std::vector<double> nan{1, std::nan("")};
    EXPECT_THROW(fit_quantile_threshold(nan, 0.5, QuantileDirection::lowest_fraction), ValidationError);
}

TEST(PositiveLabel, ReferenceThresholdExample) {
    EXPECT_TRUE(eq1_label(70, 75, 73, 3.5));
    EXPECT_FALSE(eq1_label(73, 80, 73, 3.5));
    EXPECT_FALSE(eq1_label(70, 73.5, 73, 3.5));
}

TEST(PositiveLabel, ExhaustiveGridMatchesBruteForce) {
    for (double t1 : {0.0, 50.0, 73.0, 100.0}) {
        for (double t2 : {-1.0, 0.0, 3.5, 10.0}) {
            int mismatches = 0;
            for (int a = 0; a <= 100; ++a) {
                for (int b = 0; b <= 100; ++b) {
                    const bool expect = (a < t1) ? ((b - a) > t2) : false;
                    mismatches += eq1_label(a, b, t1, t2) != expect;
                }
            }
            EXPECT_EQ(mismatches, 0) << t1 << "," << t2;
        }
    }
}

TEST(Thresholds, JsonRoundTripAndTableLookup) {
    PolicyThresholds t;
    t.pair = {"zh", "en"};
    t.qet_threshold = 70;
    t.jdm_t1 = 73;
    t.jdm_t2 = 3.5;
    t.provenance["qet"] = {"cal.jsonl", "fnv1a64:0123", 1000, "2024-01-01T00:00:00Z", 0.25};
    EXPECT_EQ(thresholds_from_json(to_json(t)), t);

    const auto dir = std::filesystem::temp_directory_path() / "hybridmt_thr_test";
    std::filesystem::create_directories(dir);
    save_thresholds(dir / "one.json", t);
    EXPECT_EQ(load_thresholds(dir / "one.json"), t);
    EXPECT_THROW(load_thresholds(dir / "one.json", LanguagePair{"de", "en"}), ValidationError);
    io::atomic_write(dir / "table.json", R"({"zh-en": {"qet_threshold": 70, "pplt_threshold": 5.6},
                                              "de-en": {"qet_threshold": 67}})");
    const auto de = load_thresholds(dir / "table.json", LanguagePair{"de", "en"});
    EXPECT_EQ(de.qet_threshold, 67.0);
    EXPECT_FALSE(de.pplt_threshold);
    EXPECT_THROW(load_thresholds(dir / "table.json"), ValidationError);
    EXPECT_THROW(load_thresholds(dir / "table.json", LanguagePair{"ja", "en"}), ValidationError);
    std::filesystem::remove_all(dir);
}

TEST(Thresholds, ShippedReferenceTable) {
    const auto path = std::filesystem::path(HYBRIDMT_SOURCE_DIR) / "config" / "reference_thresholds.json";
    struct Row {
        const char* pair;
        double qet, pplt, t1, t2;
    };
    for (const Row& r : {Row{"zh-en", 70, 5.6, 73, 3.5}, Row{"en-zh", 72, 5.5, 76, 3.5}, Row{"de-en", 67, 5.7, 79, 2.5},
                         Row{"ja-en", 73, 5.8, 64, 3.5}}) {
        const auto t = load_thresholds(path, LanguagePair::parse(r.pair));
        EXPECT_EQ(t.qet_threshold, r.qet) << r.pair;
        EXPECT_EQ(t.pplt_threshold, r.pplt) << r.pair;
        EXPECT_EQ(t.jdm_t1, r.t1) << r.pair;
        EXPECT_EQ(t.jdm_t2, r.t2) << r.pair;
        EXPECT_EQ(t.target_llm_fraction, 0.25);
    }
}

TEST(Calibrate, QetUsesLowestQe) {
    auto recs = synth::records(1000, 4, {.with_qe = true});
    const double t = calibrate_qet(recs, 0.25);
    std::vector<double> qe;
    for (const auto& r : recs) qe.push_back(r.qe_nmt->value);
    EXPECT_EQ(count_below(qe, t), 249u);
    recs[10].qe_nmt.reset();
    EXPECT_THROW(calibrate_qet(recs, 0.25), ValidationError);
}

TEST(Calibrate, PpltOnConstantCorpus) {
    const std::vector<std::string> train{"a b c", "a b c"};
    const auto lm = NgramLanguageModel::train(train, {});
    const std::vector<std::string> same(20, "a b c");
    EXPECT_EQ(calibrate_pplt(lm, same, 0.25), lm.perplexity("a b c").value);
}

TEST(Calibrate, PpltCountsSentencesAbove) {
    const auto lm = NgramLanguageModel::train(synth::corpus(3000, 1), {});
    const auto held = synth::corpus(1000, 2);
    const auto ppl = corpus_perplexities(lm, held);
    ASSERT_EQ(std::set<double>(ppl.begin(), ppl.end()).size(), ppl.size()) << "fixture needs distinct PPLs";
    EXPECT_EQ(count_above(ppl, calibrate_pplt(lm, held, 0.25)), 249u);
}

// ---- sample selection ------------------------------------------------------------

namespace {

// Re-selection from scratch: sort ids by (q_nmt, id), take the k lowest as the
// slice boundary, then rank the slice by diff.
struct Oracle {
    double t1;
    std::vector<std::string> positive_ids;
    double t2;
};

Oracle reselect(const std::vector<EvalRecord>& recs, double frac, std::size_t n_pos) {
    std::vector<double> q;
    for (const auto& r : recs) q.push_back(r.q_nmt->value);
    std::sort(q.begin(), q.end());
    const auto k = static_cast<std::size_t>(std::max(1.0, std::floor(frac * double(q.size()) + 1e-9)));
    Oracle o{q[k - 1], {}, 0};
    std::vector<const EvalRecord*> slice;
    for (const auto& r : recs) {
        if (r.q_nmt->value < o.t1) slice.push_back(&r);
    }
    std::stable_sort(slice.begin(), slice.end(), [](const EvalRecord* a, const EvalRecord* b) {
        const double da = a->q_llm->value - a->q_nmt->value, db = b->q_llm->value - b->q_nmt->value;
        return da > db || (da == db && a->id() < b->id());
    });
    for (std::size_t i = 0; i < n_pos; ++i) o.positive_ids.push_back(slice[i]->id());
    o.t2 = slice[n_pos - 1]->q_llm->value - slice[n_pos - 1]->q_nmt->value;
    std::sort(o.positive_ids.begin(), o.positive_ids.end());
    return o;
}

std::vector<std::string> ids_of(const std::vector<EvalRecord>& v) {
    std::vector<std::string> out;
    for (const auto& r : v) out.push_back(r.id());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

TEST(JdmSelection, MatchesBruteForceReselection) {
    const auto recs = synth::records(10000, 99);
    const auto set = select_jdm_samples(recs, {0.10, 100, 3, 7});
    const auto o = reselect(recs, 0.10, 100);
    EXPECT_EQ(set.t1, o.t1);
    EXPECT_EQ(set.t2, o.t2);
    EXPECT_EQ(ids_of(set.positives), o.positive_ids);
    ASSERT_EQ(set.positives.size(), 100u);
    ASSERT_EQ(set.negatives.size(), 300u);

    std::set<std::string> pos(o.positive_ids.begin(), o.positive_ids.end());
    double min_pos_diff = 1e300;
    for (const auto& r : set.positives) {
        EXPECT_LT(r.q_nmt->value, set.t1);
        const double d = r.q_llm->value - r.q_nmt->value;
        EXPECT_GE(d, set.t2);
        min_pos_diff = std::min(min_pos_diff, d);
        // every positive except those tied at the boundary passes the positive-label rule strictly
        if (d > set.t2) {
            EXPECT_TRUE(eq1_label(r.q_nmt->value, r.q_llm->value, set.t1, set.t2));
        }
    }
    for (const auto& r : recs) {
        if (pos.count(r.id()) || !(r.q_nmt->value < set.t1)) continue;
        EXPECT_LE(r.q_llm->value - r.q_nmt->value, min_pos_diff);
    }
    for (const auto& r : set.negatives) EXPECT_EQ(pos.count(r.id()), 0u);
}

TEST(JdmSelection, NegativesAreDistinctAndInFileOrder) {
    const auto recs = synth::records(3000, 5);
    const auto set = select_jdm_samples(recs, {0.10, 50, 3, 1});
    std::set<std::string> ids;
    for (const auto& r : set.negatives) ids.insert(r.id());
    EXPECT_EQ(ids.size(), 150u);
    EXPECT_TRUE(std::is_sorted(set.negatives.begin(), set.negatives.end(),
                               [](const EvalRecord& a, const EvalRecord& b) { return a.id() < b.id(); }));
    // the pool includes records above t1
    EXPECT_TRUE(std::any_of(set.negatives.begin(), set.negatives.end(),
                            [&](const EvalRecord& r) { return r.q_nmt->value >= set.t1; }));
}

TEST(JdmSelection, SeedOnlyChangesNegatives) {
    const auto recs = synth::records(4000, 6);
    const auto a = select_jdm_samples(recs, {0.10, 80, 3, 1});
    const auto b = select_jdm_samples(recs, {0.10, 80, 3, 1});
    const auto c = select_jdm_samples(recs, {0.10, 80, 3, 2});
    EXPECT_EQ(dump_dataset(a.negatives), dump_dataset(b.negatives));
    EXPECT_EQ(dump_dataset(a.positives), dump_dataset(c.positives));
    EXPECT_EQ(a.t1, c.t1);
    EXPECT_EQ(a.t2, c.t2);
    EXPECT_NE(dump_dataset(a.negatives), dump_dataset(c.negatives));
}

TEST(JdmSelection, RerunIsByteIdenticalOnDisk) {
    const auto recs = synth::records(10000, 12);
    const auto dir = std::filesystem::temp_directory_path() / "hybridmt_jdm_test";
    std::filesystem::remove_all(dir);
    save_jdm_set(dir / "a", select_jdm_samples(recs, {0.10, 100, 3, 7}));
    save_jdm_set(dir / "b", select_jdm_samples(recs, {0.10, 100, 3, 7}));
    for (const char* f : {"positives.jsonl", "negatives.jsonl", "manifest.json"}) {
        EXPECT_EQ(io::read_file(dir / "a" / f), io::read_file(dir / "b" / f)) << f;
    }
    const auto back = load_jdm_set(dir / "a");
    EXPECT_EQ(back.positives.size(), 100u);
    EXPECT_EQ(back.negatives.size(), 300u);
    EXPECT_EQ(back.seed, 7u);
    std::filesystem::remove_all(dir);
}

TEST(JdmSelection, TiesBrokenById) {
    std::vector<EvalRecord> recs;
    for (int i = 0; i < 40; ++i) {
        EvalRecord r;
        r.segment = {synth::word("r", 39 - i), "x", {"de", "en"}, {}};
        r.reference = "x";
        r.q_nmt = QualityScore{static_cast<double>(i)};
        r.q_llm = QualityScore{static_cast<double>(i) + 5.0}; // every diff equal
        recs.push_back(r);
    }
    const auto set = select_jdm_samples(recs, {0.5, 3, 3, 0});
    // slice = q_nmt < 19, all diffs 5: lowest ids win
    EXPECT_EQ(ids_of(set.positives), (std::vector<std::string>{"r0021", "r0022", "r0023"}));
    EXPECT_EQ(set.t2, 5.0);
}

TEST(JdmSelection, WarnsWhenLlmNeverBetter) {
    auto recs = synth::records(1000, 3);
    for (auto& r : recs) r.q_llm = QualityScore{r.q_nmt->value - 1.0};
    const auto set = select_jdm_samples(recs, {0.10, 10, 3, 0});
    EXPECT_TRUE(set.llm_never_better);
    EXPECT_LE(set.t2, 0.0);
    EXPECT_EQ(set.positives.size(), 10u);
}

TEST(JdmSelection, ShortfallIsAnError) {
    const auto recs = synth::records(500, 3);
    EXPECT_THROW(select_jdm_samples(recs, {0.10, 60, 3, 0}), ValidationError);  // slice holds 49
    EXPECT_THROW(select_jdm_samples(recs, {0.10, 40, 20, 0}), ValidationError); // 840 > 500
    auto unscored = recs;
    unscored[0].q_llm.reset();
    EXPECT_THROW(select_jdm_samples(unscored, {0.10, 10, 3, 0}), ValidationError);
}

TEST(JdmSelection, HundredThousandRecordCounts) {
    // 1M records is the published scale; a 1/10 slice checks the same arithmetic.
    const auto recs = synth::records(100000, 1000);
    const auto t0 = std::chrono::steady_clock::now();
    const auto set = select_jdm_samples(recs, {0.10, 1000, 3, 0});
    EXPECT_EQ(set.positives.size(), 1000u);
    EXPECT_EQ(set.negatives.size(), 3000u);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}
