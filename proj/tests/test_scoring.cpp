#include "hybridmt/scoring.hpp"
#include "support/http_stub.hpp"
#include "support/synth.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <thread>

using namespace hybridmt;

namespace {

// Independent chrF: n-grams as byte strings of whole code points, matched by
// crossing off one reference occurrence at a time.
double brute_chrf(const std::string& hyp, const std::string& ref) {
    auto chars = [](const std::string& s) {
        std::vector<std::string> out;
        for (char32_t c : text::decode_utf8(s)) {
            if (c == U' ' || c == U'\t' || c == U'\n') continue;
            out.push_back(text::encode_utf8(std::u32string(1, c)));
        }
        return out;
    };
    auto grams = [](const std::vector<std::string>& cs, std::size_t n) {
        std::vector<std::string> out;
        for (std::size_t i = 0; i + n <= cs.size(); ++i) {
            std::string g;
            for (std::size_t j = 0; j < n; ++j) g += cs[i + j] + "\x01";
            out.push_back(g);
        }
        return out;
    };
    const auto h = chars(hyp), r = chars(ref);
    double ps = 0, rs = 0;
    int orders = 0;
    for (std::size_t n = 1; n <= 6; ++n) {
        const auto hg = grams(h, n);
        auto rg = grams(r, n);
        if (hg.empty() && rg.empty()) continue;
        int m = 0;
        std::vector<bool> used(rg.size(), false);
        for (const auto& g : hg) {
            for (std::size_t k = 0; k < rg.size(); ++k) {
                if (!used[k] && rg[k] == g) {
                    used[k] = true;
                    ++m;
                    break;
                }
            }
        }
        ps += hg.empty() ? 0.0 : double(m) / double(hg.size());
        rs += rg.empty() ? 0.0 : double(m) / double(rg.size());
        ++orders;
    }
    if (!orders) return 0;
    const double p = ps / orders, rc = rs / orders;
    if (p + rc == 0) return 0;
    return 100.0 * 5.0 * p * rc / (4.0 * p + rc);
}

ScoreItem ref_item(std::string hyp, std::string ref) { return {"src", std::move(hyp), std::move(ref), std::nullopt}; }

} // namespace

TEST(Chrf, IdenticalStringsScoreHundred) {
    EXPECT_DOUBLE_EQ(chrf("hello world", "hello world"), 100.0);
    EXPECT_DOUBLE_EQ(score(ScorerSpec::builtin(ScoreKind::reference_based), ref_item("hello world", "hello world")).value,
                     100.0);
}

TEST(Chrf, DisjointStringsScoreZero) {
    EXPECT_DOUBLE_EQ(chrf("xyz", "abc"), 0.0);
    EXPECT_DOUBLE_EQ(chrf("", "abc"), 0.0);
}

TEST(Chrf, MatchesBruteForceCounter) {
    // frozen: orders 1..4 contribute 3/4, 2/3, 1/2, 0 to both P and R
    EXPECT_NEAR(chrf("abcd", "abce"), 2300.0 / 48.0, 1e-12);
    EXPECT_NEAR(brute_chrf("abcd", "abce"), 2300.0 / 48.0, 1e-12);
    synth::Rng rng(3);
    const auto c = synth::corpus(200, 17, 50);
    for (int i = 0; i < 200; ++i) {
        const auto& h = c[rng.below(c.size())];
        const auto& r = c[rng.below(c.size())];
        EXPECT_NEAR(chrf(h, r), brute_chrf(h, r), 1e-9) << h << " | " << r;
    }
    EXPECT_NEAR(chrf("你好世界", "你们好世界"), brute_chrf("你好世界", "你们好世界"), 1e-12);
}

TEST(Chrf, BoundedAndPerfectOnSelf) {
    const auto c = synth::corpus(100, 5);
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
        const double v = chrf(c[i], c[i + 1]);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 100.0);
        EXPECT_DOUBLE_EQ(chrf(c[i], c[i]), 100.0);
    }
}

TEST(Chrf, MonotoneUnderAppendingMissingSuffix) {
    const auto c = synth::corpus(60, 9);
    for (const auto& ref : c) {
        // hyp = growing prefixes of the reference
        const auto chars = text::decode_utf8(ref);
        double prev = -1.0;
        for (std::size_t cut = 1; cut <= chars.size(); cut += 3) {
            const double v = chrf(text::encode_utf8(chars.substr(0, cut)), ref);
            EXPECT_GE(v, prev - 1e-12) << ref << " @" << cut;
            prev = v;
        }
        EXPECT_DOUBLE_EQ(chrf(ref, ref), 100.0);
    }
}

TEST(QeHeuristic, DeterministicAndBounded) {
    const LanguagePair zh_en{"zh", "en"};
    const auto c = synth::corpus(100, 12);
    for (const auto& s : c) {
        const double v = qe_heuristic("今天天气很好", s, zh_en);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 100.0);
        EXPECT_EQ(v, qe_heuristic("今天天气很好", s, zh_en));
    }
    EXPECT_DOUBLE_EQ(qe_heuristic("x", "", zh_en), 0.0);
    // right script and plausible length beat wrong script
    EXPECT_GT(qe_heuristic("今天天气很好", "The weather is fine", zh_en),
              qe_heuristic("今天天气很好", "今天天气很好", zh_en));
}

TEST(ScorerContract, ReferenceMustMatchMode) {
    const Scorer ref_based(ScorerSpec::builtin(ScoreKind::reference_based));
    EXPECT_THROW(ref_based.score({"s", "h", std::nullopt, std::nullopt}), ValidationError);
    const Scorer ref_free(ScorerSpec::builtin(ScoreKind::reference_free));
    EXPECT_THROW(ref_free.score({"s", "h", "r", LanguagePair{"de", "en"}}), ValidationError);
    EXPECT_THROW(ref_free.score({"s", "h", std::nullopt, std::nullopt}), ValidationError);
    EXPECT_EQ(ref_free.score({"s", "h", std::nullopt, LanguagePair{"de", "en"}}).kind, ScoreKind::reference_free);
}

TEST(ScorerContract, SpecValidation) {
    ScorerSpec s = ScorerSpec::builtin(ScoreKind::reference_based);
    s.endpoint = "http://x";
    EXPECT_THROW(Scorer{s}, ValidationError);
    ScorerSpec r = ScorerSpec::remote(ScoreKind::reference_based, "http://x");
    r.max_in_flight = 0;
    EXPECT_THROW(Scorer{r}, ValidationError);
    const auto j = to_json(ScorerSpec::remote(ScoreKind::reference_free, "http://h:1"));
    const auto back = scorer_spec_from_json(j);
    EXPECT_EQ(back.endpoint, "http://h:1");
    EXPECT_EQ(back.mode, ScoreKind::reference_free);
}

TEST(Batch, SingletonEqualsScore) {
    const Scorer s(ScorerSpec::builtin(ScoreKind::reference_based));
    const std::vector<ScoreItem> one{ref_item("abc d", "abc e")};
    EXPECT_EQ(s.score_batch(one).at(0), s.score(one[0]));
}

TEST(Batch, IdenticalItemsIdenticalScores) {
    const Scorer s(ScorerSpec::builtin(ScoreKind::reference_based));
    const std::vector<ScoreItem> three(3, ref_item("the cat sat", "the cat sat down"));
    const auto out = s.score_batch(three);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0], out[1]);
    EXPECT_EQ(out[1], out[2]);
}

TEST(Batch, ElementwiseEqualsSequential) {
    const Scorer s(ScorerSpec::builtin(ScoreKind::reference_based));
    const auto c = synth::corpus(200, 33);
    std::vector<ScoreItem> items;
    for (std::size_t i = 0; i < 100; ++i) items.push_back(ref_item(c[i], c[i + 100]));
    const auto batch = s.score_batch(items);
    ASSERT_EQ(batch.size(), items.size());
    for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(batch[i], s.score(items[i]));
}

TEST(Batch, ErrorNamesItemIndex) {
    const Scorer s(ScorerSpec::builtin(ScoreKind::reference_based));
    std::vector<ScoreItem> items{ref_item("a", "a"), {"s", "h", std::nullopt, std::nullopt}};
    try {
        s.score_batch(items);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("batch item 1"), std::string::npos) << e.what();
    }
}

// ---- remote protocol contract ------------------------------------------------

class RemoteScorer : public ::testing::Test {
protected:
    void SetUp() override {
        server.http().Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
            hits.fetch_add(1);
            const auto body = json::parse(req.body);
            last_request = body;
            if (behaviour == "slow") std::this_thread::sleep_for(std::chrono::milliseconds(400));
            if (behaviour == "error") {
                res.status = 500;
                res.set_content(R"({"error":"model exploded"})", "application/json");
                return;
            }
            if (behaviour == "garbage") {
                res.set_content("not json", "text/plain");
                return;
            }
            const std::string mode = body.at("mode");
            json scores = json::array();
            for (const auto& it : body.at("items")) {
                if ((mode == "reference_free") == it.contains("ref")) {
                    res.status = 400;
                    res.set_content(R"({"error":"mode/ref mismatch"})", "application/json");
                    return;
                }
                double v = mode == "reference_based" ? chrf(it.at("hyp").get<std::string>(), it.at("ref").get<std::string>())
                                                     : 50.0;
                if (behaviour == "out_of_range") v = 140.0;
                scores.push_back(v);
            }
            if (behaviour == "short" && !scores.empty()) scores.erase(scores.end() - 1);
            res.set_content(json{{"scores", scores}}.dump(), "application/json");
        });
        server.start();
    }

    ScorerSpec spec(ScoreKind mode = ScoreKind::reference_based) { return ScorerSpec::remote(mode, server.endpoint()); }

    stub::Server server;
    std::atomic<int> hits{0};
    std::string behaviour = "ok";
    json last_request;
};

TEST_F(RemoteScorer, WireFormatAndResults) {
    const Scorer s(spec());
    const auto v = s.score(ref_item("abcd", "abce"));
    EXPECT_NEAR(v.value, 2300.0 / 48.0, 1e-12);
    EXPECT_EQ(v.kind, ScoreKind::reference_based);
    EXPECT_EQ(last_request.at("mode"), "reference_based");
    ASSERT_EQ(last_request.at("items").size(), 1u);
    EXPECT_EQ(last_request["items"][0], (json{{"src", "src"}, {"hyp", "abcd"}, {"ref", "abce"}}));
}

TEST_F(RemoteScorer, ReferenceFreeOmitsRef) {
    const Scorer s(spec(ScoreKind::reference_free));
    EXPECT_DOUBLE_EQ(s.score({"s", "h", std::nullopt, std::nullopt}).value, 50.0);
    EXPECT_FALSE(last_request["items"][0].contains("ref"));
}

TEST_F(RemoteScorer, BatchMatchesSequentialAndChunks) {
    auto sp = spec();
    sp.batch_size = 16;
    const Scorer s(sp);
    const auto c = synth::corpus(200, 6);
    std::vector<ScoreItem> items;
    for (std::size_t i = 0; i < 100; ++i) items.push_back(ref_item(c[i], c[i + 100]));
    const auto batch = s.score_batch(items);
    EXPECT_EQ(hits.load(), 7); // ceil(100/16)
    ASSERT_EQ(batch.size(), items.size());
    for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(batch[i], s.score(items[i]));
}

TEST_F(RemoteScorer, HttpErrorIsReported) {
    behaviour = "error";
    const Scorer s(spec());
    try {
        s.score(ref_item("a", "b"));
        FAIL();
    } catch (const RemoteError& e) {
        EXPECT_EQ(e.endpoint(), server.endpoint());
        EXPECT_NE(std::string(e.what()).find("model exploded"), std::string::npos);
    }
}

TEST_F(RemoteScorer, MalformedResponsesRejected) {
    const Scorer s(spec());
    for (const char* b : {"garbage", "short", "out_of_range"}) {
        behaviour = b;
        const std::vector<ScoreItem> items{ref_item("a", "b"), ref_item("c", "d")};
        EXPECT_THROW(s.score_batch(items), RemoteError) << b;
    }
}

TEST_F(RemoteScorer, TimeoutNamesEndpointAndRespectsRetryBudget) {
    behaviour = "slow";
    auto sp = spec();
    sp.timeout_ms = 150;
    sp.max_retries = 2;
    const Scorer s(sp);
    try {
        s.score(ref_item("a", "b"));
        FAIL();
    } catch (const RemoteError& e) {
        EXPECT_NE(std::string(e.what()).find(server.endpoint()), std::string::npos) << e.what();
    }
    server.stop(); // let in-flight handlers finish before counting
    EXPECT_EQ(hits.load(), 3);
}

TEST_F(RemoteScorer, NoRetryByDefault) {
    behaviour = "slow";
    auto sp = spec();
    sp.timeout_ms = 150;
    const Scorer s(sp);
    EXPECT_THROW(s.score(ref_item("a", "b")), RemoteError);
    server.stop();
    EXPECT_EQ(hits.load(), 1);
}

TEST_F(RemoteScorer, HttpErrorsAreNotRetried) {
    behaviour = "error";
    auto sp = spec();
    sp.max_retries = 3;
    EXPECT_THROW(Scorer(sp).score(ref_item("a", "b")), RemoteError);
    EXPECT_EQ(hits.load(), 1);
}

TEST_F(RemoteScorer, ConcurrentCallersShareInFlightLimit) {
    auto sp = spec();
    sp.max_in_flight = 2;
    const Scorer s(sp);
    std::vector<std::thread> ts;
    std::atomic<int> ok{0};
    for (int i = 0; i < 8; ++i) {
        ts.emplace_back([&] {
            if (s.score(ref_item("abc", "abc")).value == 100.0) ok.fetch_add(1);
        });
    }
    for (auto& t : ts) t.join();
    EXPECT_EQ(ok.load(), 8);
}

TEST(RemoteScorerDown, UnreachableEndpointIsRemoteError) {
    auto sp = ScorerSpec::remote(ScoreKind::reference_based, "http://127.0.0.1:1");
    sp.timeout_ms = 200;
    try {
        Scorer(sp).score(ref_item("a", "b"));
        FAIL();
    } catch (const RemoteError& e) {
        EXPECT_EQ(e.endpoint(), "http://127.0.0.1:1");
    }
}
