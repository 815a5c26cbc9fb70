#pragma once

#include "hybridmt/calibration.hpp"
#include "hybridmt/core.hpp"
#include "hybridmt/decider.hpp"
#include "hybridmt/error.hpp"
#include "hybridmt/evalharness.hpp"
#include "hybridmt/io.hpp"
#include "hybridmt/ngram_lm.hpp"
#include "hybridmt/router.hpp"
#include "hybridmt/scoring.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace hybridmt::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kValidation = 1;
inline constexpr int kRuntime = 2;

namespace detail {

inline std::atomic<bool>& stop_requested() {
    static std::atomic<bool> flag{false};
    return flag;
}

inline void on_signal(int) { stop_requested().store(true); }

inline std::vector<std::string> read_corpus(const fs::path& path) {
    std::vector<std::string> out;
    for (auto& line : io::read_lines(path)) {
        if (!text::trim(line).empty()) out.push_back(std::move(line));
    }
    if (out.empty()) throw ValidationError(path.string() + ": corpus is empty");
    return out;
}

inline CalibrationProvenance provenance_of(const fs::path& path, std::size_t n, double fraction) {
    return {path.string(), io::file_fingerprint(path), n, io::file_timestamp(path), fraction};
}

inline ScorerSpec make_scorer(const std::string& kind, ScoreKind mode, const std::string& endpoint) {
    if (kind == "builtin") return ScorerSpec::builtin(mode);
    if (kind == "remote") {
        std::string ep = endpoint;
        if (ep.empty()) {
            if (const char* e = std::getenv("HYBRIDMT_SCORER_ENDPOINT")) ep = e;
        }
        if (ep.empty()) throw ValidationError("--scorer remote needs --scorer-endpoint or HYBRIDMT_SCORER_ENDPOINT");
        return ScorerSpec::remote(mode, ep);
    }
    throw ValidationError("unknown scorer '" + kind + "' (builtin|remote)");
}

// Fills missing reference-based q_nmt / q_llm from hypotheses and references.
inline void fill_quality(std::vector<EvalRecord>& records, const Scorer& scorer) {
    for (auto& r : records) {
        if (!r.reference) continue;
        if (!r.q_nmt && r.nmt_hyp) r.q_nmt = scorer.score({r.segment.text, *r.nmt_hyp, r.reference, r.segment.pair});
        if (!r.q_llm && r.llm_hyp) r.q_llm = scorer.score({r.segment.text, *r.llm_hyp, r.reference, r.segment.pair});
    }
}

inline void fill_qe(std::vector<EvalRecord>& records, const Scorer& scorer) {
    for (auto& r : records) {
        if (!r.qe_nmt && r.nmt_hyp) r.qe_nmt = scorer.score({r.segment.text, *r.nmt_hyp, std::nullopt, r.segment.pair});
    }
}

inline std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto t = std::string(text::trim(item));
        if (t.empty()) continue;
        if (t == "inf" || t == "+inf") {
            out.push_back(std::numeric_limits<double>::infinity());
            continue;
        }
        try {
            std::size_t used = 0;
            out.push_back(std::stod(t, &used));
            if (used != t.size()) throw std::invalid_argument(t);
        } catch (const std::exception&) {
            throw ValidationError("bad number '" + t + "' in --values");
        }
    }
    return out;
}

// Options shared by replay and sweep for assembling a decider from flags.
struct DeciderFlags {
    std::string policy;
    std::string config;
    std::string thresholds;
    std::string pair;
    std::string lm;
    std::string classifier;
    std::optional<double> threshold;
    double boundary = 0.5;

    void add_to(CLI::App* app, bool require_policy) {
        auto* p = app->add_option("--policy", policy, "always_nmt|always_llm|qet|pplt|jdm|oracle");
        if (require_policy) p->required();
        app->add_option("--config", config, "router config supplying the decider spec");
        app->add_option("--thresholds", thresholds, "thresholds JSON (single or keyed by pair)");
        app->add_option("--pair", pair, "language pair, e.g. zh-en (default: from records)");
        app->add_option("--lm", lm, "n-gram model for pplt/jdm");
        app->add_option("--classifier", classifier, "linear decider JSON for jdm");
        app->add_option("--threshold", threshold, "override the qet/pplt threshold");
        app->add_option("--boundary", boundary, "jdm decision boundary")->capture_default_str();
    }

    Decider build(const std::vector<EvalRecord>& records) const {
        DeciderSpec spec;
        if (!config.empty()) {
            spec = load_router_config(config).decider;
            if (!policy.empty()) spec.policy = parse_policy(policy);
        } else {
            spec.policy = parse_policy(policy);
            LanguagePair lp = pair.empty() ? records.front().segment.pair : LanguagePair::parse(pair);
            if (!thresholds.empty()) {
                spec.thresholds = load_thresholds(thresholds, lp);
            } else {
                spec.thresholds.pair = lp;
            }
            if (!lm.empty()) spec.lm_path = fs::path(lm);
            if (!classifier.empty()) spec.classifier_path = fs::path(classifier);
            spec.decision_boundary = boundary;
        }
        if (threshold) {
            if (spec.policy == Policy::qet) spec.thresholds.qet_threshold = *threshold;
            if (spec.policy == Policy::pplt) spec.thresholds.pplt_threshold = *threshold;
        }
        return Decider(spec);
    }
};

} // namespace detail

// Runs one CLI invocation. Exit codes: 0 success, 1 validation error (bad
// flags or inputs), 2 runtime error.
inline int run(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Cost-aware NMT/LLM translation routing", "hybridmt"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    // train-lm
    std::string corpus, out_path, tokenizer = "whitespace", smoothing = "interpolated_kneser_ney";
    int order = 3, min_count = 2;
    double k = 1.0;
    auto* train_lm = app.add_subcommand("train-lm", "train an n-gram source language model");
    train_lm->add_option("--corpus", corpus, "one sentence per line")->required();
    train_lm->add_option("--out", out_path, "model file")->required();
    train_lm->add_option("--order", order)->capture_default_str();
    train_lm->add_option("--tokenizer", tokenizer, "whitespace|character")->capture_default_str();
    train_lm->add_option("--smoothing", smoothing, "interpolated_kneser_ney|add_k")->capture_default_str();
    train_lm->add_option("--k", k, "add_k constant")->capture_default_str();
    train_lm->add_option("--min-count", min_count)->capture_default_str();

    // calibrate
    std::string method, records_path, lm_path, pair, base;
    double fraction = 0.25, t1_fraction = 0.10;
    std::size_t n_pos = 10000, neg_ratio = 3;
    bool fill_qe = false, fill_scores = false;
    std::string scorer_kind = "builtin", scorer_endpoint;
    auto* calibrate = app.add_subcommand("calibrate", "fit a policy threshold by quantile");
    calibrate->add_option("--method", method, "qet|pplt|jdm")->required();
    calibrate->add_option("--records", records_path, "JSONL records (qet, jdm)");
    calibrate->add_option("--corpus", corpus, "monolingual corpus (pplt)");
    calibrate->add_option("--lm", lm_path, "n-gram model (pplt)");
    calibrate->add_option("--fraction", fraction, "target LLM fraction")->capture_default_str();
    calibrate->add_option("--t1-fraction", t1_fraction)->capture_default_str();
    calibrate->add_option("--n-pos", n_pos)->capture_default_str();
    calibrate->add_option("--pair", pair, "language pair (default: from records)");
    calibrate->add_option("--base", base, "existing thresholds file to extend");
    calibrate->add_flag("--fill-qe", fill_qe, "score missing qe_nmt with the QE scorer");
    calibrate->add_flag("--fill-scores", fill_scores, "score missing q_nmt/q_llm with the scorer");
    calibrate->add_option("--scorer", scorer_kind, "builtin|remote")->capture_default_str();
    calibrate->add_option("--scorer-endpoint", scorer_endpoint);
    calibrate->add_option("--out", out_path, "thresholds JSON")->required();

    // select-jdm-samples
    std::uint64_t seed = 0;
    std::string out_dir = "jdm-samples";
    auto* select = app.add_subcommand("select-jdm-samples", "select decider training samples");
    select->add_option("--records", records_path)->required();
    select->add_option("--t1-fraction", t1_fraction)->capture_default_str();
    select->add_option("--n-pos", n_pos)->capture_default_str();
    select->add_option("--neg-ratio", neg_ratio)->capture_default_str();
    select->add_option("--seed", seed)->capture_default_str();
    select->add_option("--out-dir", out_dir)->capture_default_str();
    select->add_flag("--fill-scores", fill_scores, "score missing q_nmt/q_llm with the scorer");
    select->add_option("--scorer", scorer_kind, "builtin|remote")->capture_default_str();
    select->add_option("--scorer-endpoint", scorer_endpoint);

    // train-jdm
    std::string samples;
    TrainOptions topts;
    auto* train_jdm = app.add_subcommand("train-jdm", "train the linear routing decider");
    train_jdm->add_option("--samples", samples, "directory written by select-jdm-samples")->required();
    train_jdm->add_option("--lm", lm_path)->required();
    train_jdm->add_option("--epochs", topts.epochs)->capture_default_str();
    train_jdm->add_option("--lr", topts.learning_rate)->capture_default_str();
    train_jdm->add_option("--l2", topts.l2)->capture_default_str();
    train_jdm->add_option("--seed", topts.seed)->capture_default_str();
    train_jdm->add_option("--out", out_path)->required();

    // replay
    detail::DeciderFlags dflags;
    std::string group_by, csv_out, json_out;
    auto* replay_cmd = app.add_subcommand("replay", "replay a policy over scored records");
    replay_cmd->add_option("--records", records_path)->required();
    dflags.add_to(replay_cmd, false);
    replay_cmd->add_option("--scorer", scorer_kind, "builtin|remote")->capture_default_str();
    replay_cmd->add_option("--scorer-endpoint", scorer_endpoint);
    replay_cmd->add_option("--group-by", group_by, "annotation key");
    replay_cmd->add_option("--csv", csv_out, "write CSV report");
    replay_cmd->add_option("--json", json_out, "write JSON report");

    // sweep
    std::string values;
    int quantiles = 0;
    auto* sweep = app.add_subcommand("sweep", "trace LLM usage against quality over control values");
    sweep->add_option("--records", records_path)->required();
    dflags.add_to(sweep, false);
    sweep->add_option("--values", values, "comma-separated control values");
    sweep->add_option("--quantiles", quantiles, "pplt/qet: use N evenly spaced quantiles of the data");
    sweep->add_option("--scorer", scorer_kind, "builtin|remote")->capture_default_str();
    sweep->add_option("--scorer-endpoint", scorer_endpoint);
    sweep->add_option("--out", out_path, "CSV output (default stdout)");

    // serve
    std::string config_path, listen;
    auto* serve = app.add_subcommand("serve", "run the routing gateway");
    serve->add_option("--config", config_path)->required();
    serve->add_option("--listen", listen, "host:port, overrides the config");

    // report
    std::vector<std::string> reports;
    std::string format = "table";
    auto* report = app.add_subcommand("report", "compare saved replay reports");
    report->add_option("--reports", reports, "JSON reports from replay --json")->required();
    report->add_option("--format", format, "table|csv|group-diff")->capture_default_str();
    report->add_option("--out", out_path, "output file (default stdout)");

    std::vector<std::string> args(argv.rbegin(), argv.rend());
    if (!args.empty()) args.pop_back(); // program name
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kValidation;
    }

    auto emit = [&](const std::string& path, const std::string& content) {
        if (path.empty()) {
            out << content;
        } else {
            io::atomic_write(path, content);
        }
    };

    try {
        if (*train_lm) {
            LmOptions o{order, parse_tokenizer(tokenizer), parse_smoothing(smoothing), k, min_count};
            const auto lines = detail::read_corpus(corpus);
            const auto lm = NgramLanguageModel::train(lines, o);
            lm.save(out_path);
            out << "trained order-" << order << " model on " << lines.size() << " sentences, vocabulary "
                << lm.vocabulary_size() << " -> " << out_path << "\n";
        } else if (*calibrate) {
            PolicyThresholds t;
            if (!base.empty()) t = load_thresholds(base, pair.empty() ? std::nullopt : std::optional(LanguagePair::parse(pair)));
            if (method == "pplt") {
                if (corpus.empty() || lm_path.empty()) throw ValidationError("pplt calibration needs --corpus and --lm");
                if (pair.empty() && base.empty()) throw ValidationError("pplt calibration needs --pair");
                if (!pair.empty()) t.pair = LanguagePair::parse(pair);
                const auto lm = NgramLanguageModel::load(lm_path);
                const auto lines = detail::read_corpus(corpus);
                t.pplt_threshold = calibrate_pplt(lm, lines, fraction);
                t.target_llm_fraction = fraction;
                t.provenance["pplt"] = detail::provenance_of(corpus, lines.size(), fraction);
            } else if (method == "qet" || method == "jdm") {
                if (records_path.empty()) throw ValidationError(method + " calibration needs --records");
                auto records = load_dataset(records_path);
                if (records.empty()) throw ValidationError(records_path + ": no records");
                t.pair = pair.empty() ? records.front().segment.pair : LanguagePair::parse(pair);
                if (method == "qet") {
                    if (fill_qe) detail::fill_qe(records, Scorer(detail::make_scorer(scorer_kind, ScoreKind::reference_free, scorer_endpoint)));
                    t.qet_threshold = calibrate_qet(records, fraction);
                    t.target_llm_fraction = fraction;
                    t.provenance["qet"] = detail::provenance_of(records_path, records.size(), fraction);
                } else {
                    if (fill_scores) detail::fill_quality(records, Scorer(detail::make_scorer(scorer_kind, ScoreKind::reference_based, scorer_endpoint)));
                    const auto set = select_jdm_samples(records, {t1_fraction, n_pos, 0, 0});
                    t.jdm_t1 = set.t1;
                    t.jdm_t2 = set.t2;
                    t.provenance["jdm"] = detail::provenance_of(records_path, records.size(), t1_fraction);
                    if (set.llm_never_better) err << "warning: T2 <= 0, the LLM never beats NMT inside the T1 slice\n";
                }
            } else {
                throw ValidationError("unknown --method '" + method + "' (qet|pplt|jdm)");
            }
            save_thresholds(out_path, t);
            out << "wrote " << out_path << "\n";
        } else if (*select) {
            auto records = load_dataset(records_path);
            if (fill_scores) detail::fill_quality(records, Scorer(detail::make_scorer(scorer_kind, ScoreKind::reference_based, scorer_endpoint)));
            const auto set = select_jdm_samples(records, {t1_fraction, n_pos, neg_ratio, seed});
            if (set.llm_never_better) err << "warning: T2 <= 0, the LLM never beats NMT inside the T1 slice\n";
            save_jdm_set(out_dir, set, detail::provenance_of(records_path, records.size(), t1_fraction));
            out << "t1=" << set.t1 << " t2=" << set.t2 << " positives=" << set.positives.size()
                << " negatives=" << set.negatives.size() << " -> " << out_dir << "\n";
        } else if (*train_jdm) {
            const auto set = load_jdm_set(samples);
            const auto lm = NgramLanguageModel::load(lm_path);
            std::vector<std::string> warnings;
            auto d = train_linear_decider(set, lm, topts, &warnings);
            for (const auto& w : warnings) err << "warning: " << w << "\n";
            save_linear_decider(out_path, d);
            out << "trained decider on " << set.positives.size() + set.negatives.size() << " samples -> " << out_path
                << "\n";
        } else if (*replay_cmd) {
            if (dflags.policy.empty() && dflags.config.empty()) throw ValidationError("replay needs --policy or --config");
            const auto records = load_dataset(records_path);
            if (records.empty()) throw ValidationError(records_path + ": no records");
            const Decider decider = dflags.build(records);
            ReplayOptions ro;
            ro.scorer = detail::make_scorer(scorer_kind, ScoreKind::reference_based, scorer_endpoint);
            if (!group_by.empty()) ro.group_by = group_by;
            auto rep = replay(records, decider, ro);
            const ReplayReport one[] = {rep};
            out << format_comparison_table(one);
            if (!csv_out.empty()) io::atomic_write(csv_out, format_csv(one));
            if (!json_out.empty()) io::atomic_write(json_out, to_json(rep).dump(2) + "\n");
        } else if (*sweep) {
            if (dflags.policy.empty() && dflags.config.empty()) throw ValidationError("sweep needs --policy or --config");
            const auto records = load_dataset(records_path);
            if (records.empty()) throw ValidationError(records_path + ": no records");
            std::vector<double> points = detail::parse_values(values);
            // Quantile sweeps need a decider before the threshold is known;
            // seed a placeholder threshold so construction succeeds.
            detail::DeciderFlags f = dflags;
            if (!f.threshold) f.threshold = 0.0;
            const Decider decider = f.build(records);
            if (quantiles > 0) {
                if (decider.policy() == Policy::jdm) throw ValidationError("--quantiles applies to pplt and qet");
                std::vector<double> evidence;
                const Scorer qe(ScorerSpec::builtin(ScoreKind::reference_free));
                for (const auto& r : records) {
                    if (decider.policy() == Policy::pplt) {
                        evidence.push_back(decider.language_model()->perplexity(r.segment.text).value);
                    } else if (r.qe_nmt) {
                        evidence.push_back(r.qe_nmt->value);
                    } else if (r.nmt_hyp) {
                        evidence.push_back(qe.score({r.segment.text, *r.nmt_hyp, std::nullopt, r.segment.pair}).value);
                    }
                }
                const auto dir = decider.policy() == Policy::pplt ? QuantileDirection::highest_fraction
                                                                  : QuantileDirection::lowest_fraction;
                for (int i = 1; i < quantiles; ++i) {
                    points.push_back(fit_quantile_threshold(evidence, static_cast<double>(i) / quantiles, dir));
                }
            }
            ReplayOptions ro;
            ro.scorer = detail::make_scorer(scorer_kind, ScoreKind::reference_based, scorer_endpoint);
            emit(out_path, format_sweep_csv(pareto_sweep(records, decider, points, ro)));
        } else if (*serve) {
            auto config = load_router_config(config_path);
            if (!listen.empty()) config.listen_address = listen;
            const auto [host, port] = split_host_port(config.listen_address);
            Router router(config);
            Service service(router);
            const int bound = service.bind(host, port);
            std::signal(SIGINT, detail::on_signal);
            std::signal(SIGTERM, detail::on_signal);
            std::thread watcher([&service] {
                while (!detail::stop_requested().load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
                service.stop();
            });
            err << "serving " << config.pair.str() << " policy " << to_string(config.decider.policy) << " on " << host
                << ":" << bound << "\n";
            service.run();
            detail::stop_requested().store(true);
            watcher.join();
        } else if (*report) {
            std::vector<ReplayReport> loaded;
            for (const auto& p : reports) {
                try {
                    loaded.push_back(replay_report_from_json(json::parse(io::read_file(p))));
                } catch (const json::parse_error& e) {
                    throw ValidationError(p + ": " + e.what());
                }
            }
            attach_diffs(loaded);
            if (format == "table") {
                emit(out_path, format_comparison_table(loaded));
            } else if (format == "csv") {
                emit(out_path, format_csv(loaded));
            } else if (format == "group-diff") {
                const ReplayReport* nmt = nullptr;
                const ReplayReport* llm = nullptr;
                for (const auto& r : loaded) {
                    if (r.policy == "always_nmt") nmt = &r;
                    if (r.policy == "always_llm") llm = &r;
                }
                if (!nmt || !llm) throw ValidationError("group-diff needs always_nmt and always_llm reports");
                emit(out_path, format_group_diff_table(*nmt, *llm));
            } else {
                throw ValidationError("unknown --format '" + format + "'");
            }
        }
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kOk;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return run(std::vector<std::string>(argv, argv + argc), out, err);
}

} // namespace hybridmt::cli
