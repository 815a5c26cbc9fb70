#pragma once

#include "hybridmt/core.hpp"
#include "hybridmt/decider.hpp"
#include "hybridmt/error.hpp"
#include "hybridmt/io.hpp"
#include "hybridmt/scoring.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace hybridmt {

// ---- prompt --------------------------------------------------------------------

inline constexpr std::string_view kDefaultPromptTemplate =
    "Translate this from {source_language} to {target_language}.\n"
    "{source_language}: {source_sentence}\n"
    "{target_language}:";

inline std::map<std::string, std::string> default_language_names() {
    return {{"zh", "Chinese"}, {"en", "English"}, {"de", "German"}, {"ja", "Japanese"}};
}

inline void check_prompt_template(std::string_view tmpl) {
    for (std::string_view ph : {"{source_language}", "{target_language}", "{source_sentence}"}) {
        if (tmpl.find(ph) == std::string_view::npos) {
            throw ValidationError("prompt template lacks placeholder " + std::string(ph));
        }
    }
}

// Single left-to-right pass: text inserted for one placeholder is never
// scanned again, so a sentence containing "{target_language}" survives intact.
inline std::string render_prompt(std::string_view tmpl, const LanguagePair& pair, std::string_view sentence,
                                 const std::map<std::string, std::string>& names = default_language_names()) {
    check_prompt_template(tmpl);
    auto name_of = [&names](const std::string& code) {
        auto it = names.find(code);
        if (it == names.end()) throw ValidationError("unknown language code '" + code + "'");
        return it->second;
    };
    const std::string src_name = name_of(pair.source);
    const std::string tgt_name = name_of(pair.target);
    std::string out;
    out.reserve(tmpl.size() + sentence.size() + 32);
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const auto rest = tmpl.substr(i);
            if (rest.starts_with("{source_language}")) {
                out += src_name;
                i += 17;
                continue;
            }
            if (rest.starts_with("{target_language}")) {
                out += tgt_name;
                i += 17;
                continue;
            }
            if (rest.starts_with("{source_sentence}")) {
                out += sentence;
                i += 17;
                continue;
            }
        }
        out += tmpl[i++];
    }
    return out;
}

// ---- backends ------------------------------------------------------------------

struct SimulationProfile {
    std::map<std::string, std::string> table; // segment id -> hypothesis
    double base_latency_ms = 0.0;
    double failure_rate = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(failure_rate >= 0.0 && failure_rate < 1.0)) throw ValidationError("failure_rate must lie in [0,1)");
        if (!(base_latency_ms >= 0.0)) throw ValidationError("base_latency_ms must be >= 0");
    }
};

enum class BackendKind { nmt, llm, simulated };

struct BackendSpec {
    BackendKind kind = BackendKind::simulated;
    std::optional<std::string> endpoint;
    int timeout_ms = 30000;
    int max_in_flight = 16;
    std::string prompt_template = std::string(kDefaultPromptTemplate);
    std::optional<SimulationProfile> simulation;

    void validate() const {
        if (kind != BackendKind::simulated && !endpoint) throw ValidationError("backend endpoint is required");
        if (timeout_ms <= 0 || max_in_flight <= 0) {
            throw ValidationError("backend timeout_ms and max_in_flight must be positive");
        }
        if (kind == BackendKind::llm) check_prompt_template(prompt_template);
        if (simulation) simulation->validate();
    }
};

class TranslationBackend {
public:
    virtual ~TranslationBackend() = default;
    // Throws on failure.
    virtual std::string translate(const Segment& segment) = 0;
};

// Lookup-table backend with seeded latency and failure injection. Whether a
// segment fails depends only on (seed, segment id), so runs are repeatable
// under any interleaving. Unknown ids echo the source text.
class SimulatedBackend final : public TranslationBackend {
public:
    SimulatedBackend(std::string name, SimulationProfile profile)
        : name_(std::move(name)), profile_(std::move(profile)) {
        profile_.validate();
    }

    std::string translate(const Segment& segment) override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        if (profile_.base_latency_ms > 0.0) {
            std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(profile_.base_latency_ms));
        }
        if (profile_.failure_rate > 0.0) {
            const auto h = io::mix64(io::fnv1a64(std::to_string(profile_.seed) + '\x1f' + segment.id));
            const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
            if (u < profile_.failure_rate) {
                failures_.fetch_add(1, std::memory_order_relaxed);
                throw Error(name_ + ": simulated failure for '" + segment.id + "'");
            }
        }
        auto it = profile_.table.find(segment.id);
        return it != profile_.table.end() ? it->second : segment.text;
    }

    long calls() const noexcept { return calls_.load(); }
    long failures() const noexcept { return failures_.load(); }

private:
    std::string name_;
    SimulationProfile profile_;
    std::atomic<long> calls_{0};
    std::atomic<long> failures_{0};
};

namespace detail {

class InFlightGuard {
public:
    explicit InFlightGuard(std::counting_semaphore<4096>& s) : s_(s) { s_.acquire(); }
    ~InFlightGuard() { s_.release(); }
    InFlightGuard(const InFlightGuard&) = delete;
    InFlightGuard& operator=(const InFlightGuard&) = delete;

private:
    std::counting_semaphore<4096>& s_;
};

inline json post_json(const std::string& endpoint, const std::string& path, const json& body, int timeout_ms) {
    httplib::Client cli(endpoint);
    const auto sec = timeout_ms / 1000, usec = (timeout_ms % 1000) * 1000;
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) throw RemoteError(endpoint, path + " failed (" + httplib::to_string(res.error()) + ")");
    if (res->status != 200) {
        throw RemoteError(endpoint, path + " returned HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    try {
        return json::parse(res->body);
    } catch (const json::exception& e) {
        throw RemoteError(endpoint, path + " returned malformed JSON: " + e.what());
    }
}

} // namespace detail

// POST {endpoint}/translate {"id","src","source_lang","target_lang"} -> {"translation"}
class HttpNmtBackend final : public TranslationBackend {
public:
    explicit HttpNmtBackend(BackendSpec spec)
        : spec_(std::move(spec)), slots_(std::min(spec_.max_in_flight, 4096)) {}

    std::string translate(const Segment& segment) override {
        detail::InFlightGuard g(slots_);
        const json reply = detail::post_json(*spec_.endpoint, "/translate",
                                             {{"id", segment.id},
                                              {"src", segment.text},
                                              {"source_lang", segment.pair.source},
                                              {"target_lang", segment.pair.target}},
                                             spec_.timeout_ms);
        if (!reply.contains("translation") || !reply["translation"].is_string()) {
            throw RemoteError(*spec_.endpoint, "/translate reply lacks 'translation'");
        }
        return reply["translation"].get<std::string>();
    }

private:
    BackendSpec spec_;
    std::counting_semaphore<4096> slots_;
};

// POST {endpoint}/generate {"prompt"} -> {"text"}
class HttpLlmBackend final : public TranslationBackend {
public:
    HttpLlmBackend(BackendSpec spec, std::map<std::string, std::string> names)
        : spec_(std::move(spec)), names_(std::move(names)), slots_(std::min(spec_.max_in_flight, 4096)) {}

    std::string translate(const Segment& segment) override {
        const std::string prompt = render_prompt(spec_.prompt_template, segment.pair, segment.text, names_);
        detail::InFlightGuard g(slots_);
        const json reply = detail::post_json(*spec_.endpoint, "/generate", {{"prompt", prompt}}, spec_.timeout_ms);
        if (!reply.contains("text") || !reply["text"].is_string()) {
            throw RemoteError(*spec_.endpoint, "/generate reply lacks 'text'");
        }
        return reply["text"].get<std::string>();
    }

private:
    BackendSpec spec_;
    std::map<std::string, std::string> names_;
    std::counting_semaphore<4096> slots_;
};

// ---- configuration ----------------------------------------------------------------

struct RouterConfig {
    LanguagePair pair;
    DeciderSpec decider;
    BackendSpec nmt;
    BackendSpec llm;
    bool fallback_enabled = true;
    std::string listen_address = "127.0.0.1:8080";
    ScorerSpec qe_scorer = ScorerSpec::builtin(ScoreKind::reference_free);
    std::map<std::string, std::string> language_names = default_language_names();

    void validate() const {
        pair.validate();
        if (decider.policy == Policy::oracle) throw ValidationError("the oracle policy is offline-only");
        if (nmt.kind == BackendKind::llm) throw ValidationError("nmt slot configured with an llm backend");
        if (llm.kind == BackendKind::nmt) throw ValidationError("llm slot configured with an nmt backend");
        nmt.validate();
        llm.validate();
        if (qe_scorer.mode != ScoreKind::reference_free) throw ValidationError("qe_scorer must be reference_free");
        qe_scorer.validate();
        if (listen_address.find(':') == std::string::npos) {
            throw ValidationError("listen_address must be host:port");
        }
    }
};

inline std::pair<std::string, int> split_host_port(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw ValidationError("address '" + addr + "' is not host:port");
    try {
        return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
    } catch (const std::exception&) {
        throw ValidationError("address '" + addr + "' has a bad port");
    }
}

namespace detail {

inline SimulationProfile simulation_from_json(const json& j, const std::filesystem::path& base_dir, Backend role) {
    SimulationProfile p;
    if (j.contains("records")) {
        std::filesystem::path path(j["records"].get<std::string>());
        if (!path.is_absolute()) path = base_dir / path;
        for (const auto& r : load_dataset(path)) {
            const auto& hyp = role == Backend::nmt ? r.nmt_hyp : r.llm_hyp;
            if (hyp) p.table[r.id()] = *hyp;
        }
    }
    if (j.contains("table")) {
        for (const auto& [id, text] : j["table"].items()) p.table[id] = text.get<std::string>();
    }
    p.base_latency_ms = j.value("base_latency_ms", 0.0);
    p.failure_rate = j.value("failure_rate", 0.0);
    p.seed = j.value("seed", std::uint64_t{0});
    return p;
}

inline BackendSpec backend_from_json(const json& j, const std::filesystem::path& base_dir, Backend role) {
    BackendSpec s;
    const auto kind = j.value("kind", std::string("simulated"));
    if (kind == "nmt") {
        s.kind = BackendKind::nmt;
    } else if (kind == "llm") {
        s.kind = BackendKind::llm;
    } else if (kind == "simulated") {
        s.kind = BackendKind::simulated;
    } else {
        throw ValidationError("unknown backend kind '" + kind + "'");
    }
    if (j.contains("endpoint") && !j["endpoint"].is_null()) s.endpoint = j["endpoint"].get<std::string>();
    s.timeout_ms = j.value("timeout_ms", s.timeout_ms);
    s.max_in_flight = j.value("max_in_flight", s.max_in_flight);
    s.prompt_template = j.value("prompt_template", s.prompt_template);
    if (s.kind == BackendKind::simulated) {
        s.simulation = simulation_from_json(j.value("simulation", json::object()), base_dir, role);
    }
    return s;
}

inline std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
}

} // namespace detail

// Relative paths inside the document resolve against `base_dir`. Endpoints
// may be overridden by HYBRIDMT_NMT_ENDPOINT, HYBRIDMT_LLM_ENDPOINT and
// HYBRIDMT_SCORER_ENDPOINT.
inline RouterConfig router_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    RouterConfig c;
    try {
        c.pair = LanguagePair::parse(j.at("pair").get<std::string>());
        c.decider = decider_spec_from_json(j.at("decider"), base_dir, c.pair);
        c.nmt = detail::backend_from_json(j.value("nmt", json::object()), base_dir, Backend::nmt);
        c.llm = detail::backend_from_json(j.value("llm", json::object()), base_dir, Backend::llm);
        c.fallback_enabled = j.value("fallback_enabled", true);
        c.listen_address = j.value("listen_address", c.listen_address);
        if (j.contains("qe_scorer")) c.qe_scorer = scorer_spec_from_json(j["qe_scorer"]);
        if (j.contains("language_names")) {
            for (const auto& [code, name] : j["language_names"].items()) c.language_names[code] = name.get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("router config: ") + e.what());
    }
    if (auto e = detail::env("HYBRIDMT_NMT_ENDPOINT")) c.nmt.endpoint = *e;
    if (auto e = detail::env("HYBRIDMT_LLM_ENDPOINT")) c.llm.endpoint = *e;
    if (auto e = detail::env("HYBRIDMT_SCORER_ENDPOINT")) {
        c.qe_scorer.backend = ScorerBackend::remote;
        c.qe_scorer.endpoint = *e;
    }
    c.validate();
    return c;
}

inline RouterConfig load_router_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    return router_config_from_json(j, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

// ---- routing -----------------------------------------------------------------------

class RoutingError : public Error {
public:
    explicit RoutingError(std::vector<std::string> causes) : Error(join(causes)), causes_(std::move(causes)) {}

    const std::vector<std::string>& causes() const noexcept { return causes_; }

private:
    static std::string join(const std::vector<std::string>& c) {
        std::string s = "routing failed";
        for (const auto& x : c) s += "; " + x;
        return s;
    }
    std::vector<std::string> causes_;
};

struct RouteResult {
    std::string translation;
    RoutingDecision decision;
};

struct RouterMetrics {
    long nmt_requests = 0;
    long llm_requests = 0;
    long fallbacks = 0;
    long failures = 0;

    long completed() const { return nmt_requests + llm_requests; }
    double llm_p() const { return completed() ? static_cast<double>(llm_requests) / static_cast<double>(completed()) : 0.0; }
};

// Shared state is the immutable decider and the atomic counters, so route()
// may run on many threads at once.
class Router {
public:
    // Loads every artifact up front; a missing artifact fails here, never
    // per request.
    explicit Router(RouterConfig config)
        : config_(std::move(config)), decider_(config_.decider), qe_(config_.qe_scorer) {
        config_.validate();
        nmt_ = make_backend(config_.nmt, "nmt");
        llm_ = make_backend(config_.llm, "llm");
    }

    Router(RouterConfig config, Decider decider, std::shared_ptr<TranslationBackend> nmt,
           std::shared_ptr<TranslationBackend> llm)
        : config_(std::move(config)), decider_(std::move(decider)), qe_(config_.qe_scorer), nmt_(std::move(nmt)),
          llm_(std::move(llm)) {
        config_.validate();
        if (decider_.policy() == Policy::oracle) throw ValidationError("the oracle policy is offline-only");
    }

    const RouterConfig& config() const noexcept { return config_; }
    const Decider& decider() const noexcept { return decider_; }
    TranslationBackend& nmt_backend() { return *nmt_; }
    TranslationBackend& llm_backend() { return *llm_; }

    RouteResult route(const Segment& segment) {
        segment.validate();
        if (segment.pair != config_.pair) {
            throw ValidationError("router serves " + config_.pair.str() + ", request is " + segment.pair.str());
        }
        const auto t0 = std::chrono::steady_clock::now();
        RouteResult out;
        auto& dec = out.decision;
        dec.segment_id = segment.id;
        try {
            if (decider_.source_only()) {
                route_source_only(segment, out);
            } else {
                route_qet(segment, out);
            }
        } catch (const RoutingError&) {
            failures_.fetch_add(1);
            throw;
        }
        dec.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        dec.validate();
        (dec.backend == Backend::llm ? llm_requests_ : nmt_requests_).fetch_add(1);
        if (dec.fallback) fallbacks_.fetch_add(1);
        return out;
    }

    RouterMetrics metrics() const {
        return {nmt_requests_.load(), llm_requests_.load(), fallbacks_.load(), failures_.load()};
    }

private:
    std::shared_ptr<TranslationBackend> make_backend(const BackendSpec& spec, const std::string& name) {
        switch (spec.kind) {
        case BackendKind::simulated:
            return std::make_shared<SimulatedBackend>(name, spec.simulation.value_or(SimulationProfile{}));
        case BackendKind::nmt:
            return std::make_shared<HttpNmtBackend>(spec);
        case BackendKind::llm:
            return std::make_shared<HttpLlmBackend>(spec, config_.language_names);
        }
        throw ValidationError("bad backend kind");
    }

    TranslationBackend& backend(Backend b) { return b == Backend::nmt ? *nmt_ : *llm_; }

    static Backend other(Backend b) { return b == Backend::nmt ? Backend::llm : Backend::nmt; }

    // Invokes one backend, recording the call. Returns nullopt and appends
    // the cause on failure.
    std::optional<std::string> invoke(Backend b, const Segment& s, RoutingDecision& dec,
                                      std::vector<std::string>& causes) {
        dec.backend_calls[b] += 1;
        try {
            return backend(b).translate(s);
        } catch (const std::exception& e) {
            causes.push_back(std::string(to_string(b)) + ": " + e.what());
            return std::nullopt;
        }
    }

    void route_source_only(const Segment& s, RouteResult& out) {
        auto& dec = out.decision;
        const Decision d = decider_.decide(s);
        dec.evidence = d.evidence;
        std::vector<std::string> causes;
        if (auto text = invoke(d.backend, s, dec, causes)) {
            dec.backend = d.backend;
            out.translation = std::move(*text);
            return;
        }
        if (!config_.fallback_enabled) throw RoutingError(causes);
        if (auto text = invoke(other(d.backend), s, dec, causes)) {
            dec.backend = other(d.backend);
            dec.fallback = true;
            out.translation = std::move(*text);
            return;
        }
        throw RoutingError(causes);
    }

    // NMT first, QE on its output, LLM only when the QE score is below the
    // threshold. An invoked LLM's output is returned unconditionally.
    void route_qet(const Segment& s, RouteResult& out) {
        auto& dec = out.decision;
        std::vector<std::string> causes;
        auto nmt_text = invoke(Backend::nmt, s, dec, causes);
        if (!nmt_text) {
            if (!config_.fallback_enabled) throw RoutingError(causes);
            auto llm_text = invoke(Backend::llm, s, dec, causes);
            if (!llm_text) throw RoutingError(causes);
            dec.backend = Backend::llm;
            dec.fallback = true;
            out.translation = std::move(*llm_text);
            return;
        }
        const QualityScore qe = qe_.score(ScoreItem{s.text, *nmt_text, std::nullopt, s.pair});
        DecisionContext ctx;
        ctx.qe_score = qe;
        const Decision d = decider_.decide(s, ctx);
        dec.evidence = d.evidence;
        if (d.backend == Backend::nmt) {
            dec.backend = Backend::nmt;
            out.translation = std::move(*nmt_text);
            return;
        }
        if (auto llm_text = invoke(Backend::llm, s, dec, causes)) {
            dec.backend = Backend::llm;
            out.translation = std::move(*llm_text);
            return;
        }
        if (!config_.fallback_enabled) throw RoutingError(causes);
        dec.backend = Backend::nmt;
        dec.fallback = true;
        out.translation = std::move(*nmt_text);
    }

    RouterConfig config_;
    Decider decider_;
    Scorer qe_;
    std::shared_ptr<TranslationBackend> nmt_;
    std::shared_ptr<TranslationBackend> llm_;
    std::atomic<long> nmt_requests_{0};
    std::atomic<long> llm_requests_{0};
    std::atomic<long> fallbacks_{0};
    std::atomic<long> failures_{0};
};

// ---- HTTP service ----------------------------------------------------------------------
//
//   POST /translate {"id"?, "src", "source_lang", "target_lang"}
//        -> {"id", "translation", "backend_used", "evidence", "fallback", "latency_ms", "backend_calls"}
//   GET  /metrics   -> {"nmt_requests", "llm_requests", "llm_p", "fallbacks", "failures"}
//   GET  /healthz   -> {"status": "ok"}

class Service {
public:
    explicit Service(Router& router, std::size_t workers = 32) : router_(router) {
        if (workers == 0) throw ValidationError("service needs at least one worker");
        server_.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
        server_.Post("/translate", [this](const httplib::Request& req, httplib::Response& res) { translate(req, res); });
        server_.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
            const auto m = router_.metrics();
            json j{{"nmt_requests", m.nmt_requests},
                   {"llm_requests", m.llm_requests},
                   {"llm_p", m.llm_p()},
                   {"fallbacks", m.fallbacks},
                   {"failures", m.failures}};
            res.set_content(j.dump(), "application/json");
        });
        server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"status":"ok"})", "application/json");
        });
    }

    // Binds without serving. Port 0 picks a free port, which is returned.
    int bind(const std::string& host, int port) {
        if (port == 0) {
            port = server_.bind_to_any_port(host);
        } else if (!server_.bind_to_port(host, port)) {
            port = -1;
        }
        if (port < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
        return port;
    }

    // Blocks until stop().
    void run() { server_.listen_after_bind(); }

    // Stops accepting; requests already being handled run to completion.
    void stop() { server_.stop(); }

    bool running() const { return server_.is_running(); }
    void wait_until_ready() const { server_.wait_until_ready(); }

private:
    static void error(httplib::Response& res, int status, const std::string& msg, const json& causes = nullptr) {
        json j{{"error", msg}};
        if (!causes.is_null()) j["causes"] = causes;
        res.status = status;
        res.set_content(j.dump(), "application/json");
    }

    void translate(const httplib::Request& req, httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            return error(res, 400, "request body is not JSON");
        }
        if (!body.is_object() || !body.contains("src") || !body["src"].is_string()) {
            return error(res, 400, "request needs a string 'src'");
        }
        Segment seg;
        seg.text = body["src"].get<std::string>();
        seg.pair = router_.config().pair;
        try {
            if (body.contains("source_lang")) seg.pair.source = body["source_lang"].get<std::string>();
            if (body.contains("target_lang")) seg.pair.target = body["target_lang"].get<std::string>();
            if (body.contains("id") && !body["id"].is_null()) {
                seg.id = body["id"].is_string() ? body["id"].get<std::string>() : body["id"].dump();
            } else {
                seg.id = "req-" + std::to_string(next_id_.fetch_add(1));
            }
        } catch (const json::exception& e) {
            return error(res, 400, e.what());
        }
        try {
            auto r = router_.route(seg);
            json j{{"id", seg.id},
                   {"translation", r.translation},
                   {"backend_used", to_string(r.decision.backend)},
                   {"evidence", r.decision.evidence},
                   {"fallback", r.decision.fallback},
                   {"latency_ms", r.decision.latency_ms},
                   {"backend_calls", {{"NMT", r.decision.backend_calls.nmt}, {"LLM", r.decision.backend_calls.llm}}}};
            res.set_content(j.dump(), "application/json");
        } catch (const RoutingError& e) {
            error(res, 502, e.what(), e.causes());
        } catch (const ValidationError& e) {
            error(res, 400, e.what());
        } catch (const std::exception& e) {
            error(res, 500, e.what());
        }
    }

    Router& router_;
    httplib::Server server_;
    std::atomic<long> next_id_{1};
};

} // namespace hybridmt
