#pragma once

#include "hybridmt/core.hpp"
#include "hybridmt/decider.hpp"
#include "hybridmt/error.hpp"
#include "hybridmt/scoring.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hybridmt {

struct GroupStats {
    std::size_t n = 0;
    std::size_t llm_count = 0;
    double mean_quality = 0.0;
    double llm_p = 0.0;
};

struct ReplayReport {
    std::string policy;
    std::size_t n = 0;
    double mean_quality = 0.0;
    double llm_p = 0.0;
    ScoreKind kind = ScoreKind::reference_based;
    std::optional<std::string> group_by;
    std::map<std::string, GroupStats> groups;
    // Quality delta of this report minus the named policy's.
    std::map<std::string, double> diff_vs;
    // Per-record routing, in input order.
    std::vector<std::pair<std::string, Backend>> decisions;
};

struct ReplayOptions {
    ScorerSpec scorer = ScorerSpec::builtin(ScoreKind::reference_based);
    // Used by qet when a record carries no qe_nmt.
    ScorerSpec qe_scorer = ScorerSpec::builtin(ScoreKind::reference_free);
    std::optional<std::string> group_by;
};

inline constexpr const char* kMissingGroup = "(missing)";

namespace detail {

// Sums after sorting, so aggregates do not depend on record order.
inline double order_free_mean(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

class QualityLookup {
public:
    QualityLookup(const ReplayOptions& opts) : scorer_(opts.scorer), qe_(opts.qe_scorer) {}

    // Pre-scored values are used when their kind matches the scorer; the
    // scorer runs only for the gaps.
    std::optional<QualityScore> quality(const EvalRecord& r, Backend b) const {
        const auto& pre = b == Backend::nmt ? r.q_nmt : r.q_llm;
        if (pre && pre->kind == scorer_.spec().mode) return pre;
        const auto& hyp = b == Backend::nmt ? r.nmt_hyp : r.llm_hyp;
        if (!hyp) return std::nullopt;
        const bool ref_based = scorer_.spec().mode == ScoreKind::reference_based;
        if (ref_based && !r.reference) return std::nullopt;
        ScoreItem item{r.segment.text, *hyp, ref_based ? r.reference : std::nullopt, r.segment.pair};
        return scorer_.score(item);
    }

    std::optional<QualityScore> qe(const EvalRecord& r) const {
        if (r.qe_nmt) return r.qe_nmt;
        if (!r.nmt_hyp) return std::nullopt;
        return qe_.score(ScoreItem{r.segment.text, *r.nmt_hyp, std::nullopt, r.segment.pair});
    }

private:
    Scorer scorer_;
    Scorer qe_;
};

inline std::string id_list(const std::vector<std::string>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size() && i < 10; ++i) s += (i ? ", " : "") + ids[i];
    if (ids.size() > 10) s += ", ... (" + std::to_string(ids.size()) + " total)";
    return s;
}

} // namespace detail

inline ReplayReport replay(std::span<const EvalRecord> records, const Decider& decider, const ReplayOptions& opts = {}) {
    if (records.empty()) throw ValidationError("replay over an empty dataset");
    const detail::QualityLookup lookup(opts);
    const Policy policy = decider.policy();

    std::vector<std::string> missing;
    std::vector<double> qualities;
    qualities.reserve(records.size());
    std::map<std::string, std::vector<double>> group_q;

    ReplayReport rep;
    rep.policy = std::string(to_string(policy));
    rep.kind = opts.scorer.mode;
    rep.group_by = opts.group_by;
    std::size_t llm = 0;

    for (const auto& r : records) {
        DecisionContext ctx;
        if (policy == Policy::qet) {
            ctx.qe_score = lookup.qe(r);
            if (!ctx.qe_score) {
                missing.push_back(r.id() + " (qe_nmt or nmt)");
                continue;
            }
        }
        std::optional<QualityScore> qn, ql;
        if (policy == Policy::oracle) {
            qn = lookup.quality(r, Backend::nmt);
            ql = lookup.quality(r, Backend::llm);
            if (!qn || !ql) {
                missing.push_back(r.id() + " (q_nmt/q_llm or hypotheses with reference)");
                continue;
            }
            ctx.q_nmt = qn;
            ctx.q_llm = ql;
        }
        const Decision d = decider.decide(r.segment, ctx);
        auto q = d.backend == Backend::nmt ? qn : ql;
        if (!q) q = lookup.quality(r, d.backend);
        if (!q) {
            missing.push_back(r.id() + " (quality of " + std::string(to_string(d.backend)) + " output)");
            continue;
        }
        rep.decisions.emplace_back(r.id(), d.backend);
        qualities.push_back(q->value);
        if (d.backend == Backend::llm) ++llm;
        if (opts.group_by) {
            const auto label = r.segment.annotation(*opts.group_by).value_or(kMissingGroup);
            auto& g = rep.groups[label];
            ++g.n;
            if (d.backend == Backend::llm) ++g.llm_count;
            group_q[label].push_back(q->value);
        }
    }
    if (!missing.empty()) {
        throw ValidationError("replay: records missing required fields: " + detail::id_list(missing));
    }
    rep.n = qualities.size();
    rep.mean_quality = detail::order_free_mean(std::move(qualities));
    rep.llm_p = static_cast<double>(llm) / static_cast<double>(rep.n);
    for (auto& [label, g] : rep.groups) {
        g.mean_quality = detail::order_free_mean(std::move(group_q[label]));
        g.llm_p = static_cast<double>(g.llm_count) / static_cast<double>(g.n);
    }
    return rep;
}

inline void attach_diffs(std::span<ReplayReport> reports) {
    for (auto& a : reports) {
        a.diff_vs.clear();
        for (const auto& b : reports) {
            if (&a != &b) a.diff_vs[b.policy] = a.mean_quality - b.mean_quality;
        }
    }
}

struct SweepPoint {
    double control = 0.0;
    double llm_p = 0.0;
    double mean_quality = 0.0;
};

// One replay per control value: the threshold for qet/pplt, the decision
// boundary for jdm.
inline std::vector<SweepPoint> pareto_sweep(std::span<const EvalRecord> records, const Decider& base,
                                            std::span<const double> sweep, const ReplayOptions& opts = {}) {
    const Policy p = base.policy();
    if (p != Policy::qet && p != Policy::pplt && p != Policy::jdm) {
        throw ValidationError("pareto sweep supports qet, pplt and jdm");
    }
    if (sweep.empty()) throw ValidationError("pareto sweep needs at least one control value");
    ReplayOptions plain = opts;
    plain.group_by.reset();
    std::vector<SweepPoint> out;
    for (double v : sweep) {
        DeciderSpec spec = base.spec();
        if (p == Policy::qet) spec.thresholds.qet_threshold = v;
        if (p == Policy::pplt) spec.thresholds.pplt_threshold = v;
        if (p == Policy::jdm) spec.decision_boundary = v;
        const auto rep = replay(records, base.with_spec(spec), plain);
        out.push_back({v, rep.llm_p, rep.mean_quality});
    }
    return out;
}

// ---- report rendering ---------------------------------------------------------

namespace detail {

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::string pad_left(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

inline std::string pad_right(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

inline std::string render_grid(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        width.resize(std::max(width.size(), r.size()), 0);
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    }
    std::string out;
    for (const auto& r : rows) {
        std::string line;
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (c) line += "  ";
            line += c == 0 ? pad_right(r[c], width[c]) : pad_left(r[c], width[c]);
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
    }
    return out;
}

inline std::vector<const ReplayReport*> ordered_for_display(std::span<const ReplayReport> reports) {
    std::vector<const ReplayReport*> rows;
    for (const auto& r : reports) {
        if (r.policy != "oracle") rows.push_back(&r);
    }
    for (const auto& r : reports) {
        if (r.policy == "oracle") rows.push_back(&r);
    }
    return rows;
}

inline std::vector<std::string> check_comparable(std::span<const ReplayReport> reports) {
    if (reports.empty()) throw ValidationError("no reports to compare");
    std::vector<std::string> labels;
    for (const auto& [l, g] : reports.front().groups) {
        (void)g;
        labels.push_back(l);
    }
    for (const auto& r : reports) {
        if (r.n != reports.front().n) throw ValidationError("reports cover datasets of different sizes");
        if (r.kind != reports.front().kind) throw ValidationError("reports use different score kinds");
        std::vector<std::string> mine;
        for (const auto& [l, g] : r.groups) {
            (void)g;
            mine.push_back(l);
        }
        if (mine != labels) throw ValidationError("reports are grouped differently");
    }
    return labels;
}

} // namespace detail

// One row per policy: quality and LLM_p per group, then Avg, the unweighted
// mean over groups. The oracle row comes last, marked with asterisks.
inline std::string format_comparison_table(std::span<const ReplayReport> reports) {
    const auto labels = detail::check_comparable(reports);
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{""};
    for (const auto& l : labels) {
        header.push_back(l + " Q");
        header.push_back(l + " LLM_p");
    }
    header.push_back(labels.empty() ? "All Q" : "Avg Q");
    header.push_back(labels.empty() ? "All LLM_p" : "Avg LLM_p");
    grid.push_back(header);
    for (const ReplayReport* r : detail::ordered_for_display(reports)) {
        std::vector<std::string> row{r->policy == "oracle" ? "*oracle*" : r->policy};
        double q_sum = 0.0, p_sum = 0.0;
        for (const auto& l : labels) {
            const auto& g = r->groups.at(l);
            row.push_back(detail::fmt("%.2f", g.mean_quality));
            row.push_back(detail::fmt("%.2f%%", 100.0 * g.llm_p));
            q_sum += g.mean_quality;
            p_sum += g.llm_p;
        }
        const double k = static_cast<double>(labels.size());
        row.push_back(detail::fmt("%.2f", labels.empty() ? r->mean_quality : q_sum / k));
        row.push_back(detail::fmt("%.2f%%", 100.0 * (labels.empty() ? r->llm_p : p_sum / k)));
        grid.push_back(std::move(row));
    }
    std::string out = detail::render_grid(grid);
    out += "n = " + std::to_string(reports.front().n) + "; quality kind " +
           std::string(to_string(reports.front().kind)) + "; oracle ties are counted as NMT\n";
    return out;
}

// CSV schema: policy,group,n,mean_quality,llm_p. The "all" group is the
// whole dataset.
inline std::string format_csv(std::span<const ReplayReport> reports) {
    detail::check_comparable(reports);
    std::string out = "policy,group,n,mean_quality,llm_p\n";
    auto row = [&out](const std::string& policy, const std::string& group, std::size_t n, double q, double p) {
        out += policy + "," + group + "," + std::to_string(n) + "," + detail::fmt("%.6f", q) + "," +
               detail::fmt("%.6f", p) + "\n";
    };
    for (const ReplayReport* r : detail::ordered_for_display(reports)) {
        row(r->policy, "all", r->n, r->mean_quality, r->llm_p);
        for (const auto& [l, g] : r->groups) row(r->policy, l, g.n, g.mean_quality, g.llm_p);
    }
    return out;
}

// NMT/LLM/Diff rows with one quality column per group, each labelled with
// its share of the data: the simple/hard breakdown layout. Diff is LLM - NMT.
inline std::string format_group_diff_table(const ReplayReport& nmt, const ReplayReport& llm) {
    if (nmt.policy != "always_nmt" || llm.policy != "always_llm") {
        throw ValidationError("group diff table needs an always_nmt and an always_llm report");
    }
    const ReplayReport pair[] = {nmt, llm};
    auto labels = detail::check_comparable(pair);
    if (labels.empty()) throw ValidationError("group diff table needs grouped reports");
    // largest group first
    std::stable_sort(labels.begin(), labels.end(), [&nmt](const std::string& a, const std::string& b) {
        return nmt.groups.at(a).n > nmt.groups.at(b).n;
    });
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{""};
    for (const auto& l : labels) {
        const double share = 100.0 * static_cast<double>(nmt.groups.at(l).n) / static_cast<double>(nmt.n);
        header.push_back("DA_" + l + "(" + detail::fmt("%.0f", share) + "%)");
    }
    grid.push_back(header);
    std::vector<std::string> rn{"NMT"}, rl{"LLM"}, rd{"Diff"};
    for (const auto& l : labels) {
        const double a = nmt.groups.at(l).mean_quality, b = llm.groups.at(l).mean_quality;
        rn.push_back(detail::fmt("%.2f", a));
        rl.push_back(detail::fmt("%.2f", b));
        rd.push_back(detail::fmt("%.2f", b - a));
    }
    grid.push_back(rn);
    grid.push_back(rl);
    grid.push_back(rd);
    return detail::render_grid(grid);
}

inline std::string format_sweep_csv(std::span<const SweepPoint> points) {
    std::string out = "control,llm_p,mean_quality\n";
    for (const auto& p : points) {
        out += detail::fmt("%.6g", p.control) + "," + detail::fmt("%.6f", p.llm_p) + "," +
               detail::fmt("%.6f", p.mean_quality) + "\n";
    }
    return out;
}

// ---- persistence ----------------------------------------------------------------

inline json to_json(const ReplayReport& r) {
    json groups = json::object();
    for (const auto& [l, g] : r.groups) {
        groups[l] = {{"n", g.n}, {"llm_count", g.llm_count}, {"mean_quality", g.mean_quality}, {"llm_p", g.llm_p}};
    }
    json decisions = json::array();
    for (const auto& [id, b] : r.decisions) decisions.push_back({{"id", id}, {"backend", to_string(b)}});
    json j{{"policy", r.policy},
           {"n", r.n},
           {"mean_quality", r.mean_quality},
           {"llm_p", r.llm_p},
           {"kind", to_string(r.kind)},
           {"groups", groups},
           {"diff_vs", r.diff_vs},
           {"decisions", decisions}};
    if (r.group_by) j["group_by"] = *r.group_by;
    return j;
}

inline ReplayReport replay_report_from_json(const json& j) {
    ReplayReport r;
    try {
        r.policy = j.at("policy").get<std::string>();
        r.n = j.at("n").get<std::size_t>();
        r.mean_quality = j.at("mean_quality").get<double>();
        r.llm_p = j.at("llm_p").get<double>();
        r.kind = parse_score_kind(j.value("kind", std::string("reference_based")));
        if (j.contains("group_by")) r.group_by = j["group_by"].get<std::string>();
        const json groups = j.value("groups", json::object());
        for (const auto& [l, g] : groups.items()) {
            r.groups[l] = GroupStats{g.at("n").get<std::size_t>(), g.value("llm_count", std::size_t{0}),
                                     g.at("mean_quality").get<double>(), g.at("llm_p").get<double>()};
        }
        r.diff_vs = j.value("diff_vs", std::map<std::string, double>{});
        const json decisions = j.value("decisions", json::array());
        for (const auto& d : decisions) {
            r.decisions.emplace_back(d.at("id").get<std::string>(), parse_backend(d.at("backend").get<std::string>()));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("replay report: ") + e.what());
    }
    return r;
}

} // namespace hybridmt
