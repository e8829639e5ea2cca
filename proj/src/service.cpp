#include "aggquery/service.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "httplib.h"

#include "aggquery/error.hpp"
#include "aggquery/jsonl.hpp"
#include "aggquery/text.hpp"

namespace aggquery {

using nlohmann::json;

std::string_view to_string(Phase p) {
    switch (p) {
    case Phase::Clarifying: return "clarifying";
    case Phase::Filtering: return "filtering";
    case Phase::Aggregating: return "aggregating";
    case Phase::Done: return "done";
    case Phase::Failed: return "failed";
    }
    return "failed";
}

namespace {

Phase phase_from_string(const std::string& s) {
    for (Phase p : {Phase::Clarifying, Phase::Filtering, Phase::Aggregating, Phase::Done, Phase::Failed}) {
        if (to_string(p) == s) return p;
    }
    throw Error(ErrorCode::Schema, "unknown session phase " + s);
}

void require_phase(const SessionRecord& s, Phase expected, std::string_view action) {
    if (s.phase != expected) {
        throw Error(ErrorCode::Conflict, std::string(action) + " needs phase " + std::string(to_string(expected)) +
                                             " but session " + s.session_id + " is " + std::string(to_string(s.phase)));
    }
}

bool is_backend_failure(ErrorCode c) {
    return c == ErrorCode::Transport || c == ErrorCode::Unscripted || c == ErrorCode::Parse ||
           c == ErrorCode::BudgetExceeded;
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : path) {
        if (ch == '/') {
            if (!cur.empty()) parts.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty()) parts.push_back(std::move(cur));
    return parts;
}

std::size_t parse_index(const std::string& s, std::string_view what) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " must be a non-negative integer, got " + s);
    }
    return static_cast<std::size_t>(std::stoull(s));
}

} // namespace

int http_status(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::Schema: return 400;
    case ErrorCode::NotFound: return 404;
    case ErrorCode::Duplicate:
    case ErrorCode::Conflict: return 409;
    case ErrorCode::BudgetExceeded: return 429;
    case ErrorCode::Transport:
    case ErrorCode::Unscripted:
    case ErrorCode::Parse: return 502;
    case ErrorCode::Config:
    case ErrorCode::Io: return 500;
    }
    return 500;
}

ApiResponse error_response(const Error& e) {
    return {http_status(e.code()), {{"code", to_string(e.code())}, {"message", e.what()}, {"detail", e.detail()}}};
}

QueryService::QueryService(ServiceConfig config, ServiceBackends backends)
    : config_(std::move(config)), backends_(std::move(backends)) {
    if (!backends_.embedder) backends_.embedder = std::make_shared<TrigramHashEmbedder>();
}

void QueryService::add_corpus(std::shared_ptr<const CorpusHandle> corpus) {
    if (!corpus) throw Error(ErrorCode::InvalidArgument, "null corpus");
    std::lock_guard lock(mutex_);
    if (!corpora_.emplace(corpus->corpus_id(), corpus).second) {
        throw Error(ErrorCode::Duplicate, "corpus " + corpus->corpus_id() + " is already registered");
    }
}

std::shared_ptr<const CorpusHandle> QueryService::corpus(const std::string& corpus_id) const {
    std::lock_guard lock(mutex_);
    auto it = corpora_.find(corpus_id);
    if (it == corpora_.end()) throw Error(ErrorCode::NotFound, "unknown corpus " + corpus_id);
    return it->second;
}

std::shared_ptr<SessionRecord> QueryService::find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::NotFound, "unknown session " + id);
    return it->second;
}

json QueryService::list_corpora() const {
    std::lock_guard lock(mutex_);
    json out = json::array();
    for (const auto& [id, c] : corpora_) {
        out.push_back({{"corpus_id", id}, {"documents", c->documents().size()}, {"chunks", c->size()}});
    }
    return {{"corpora", out}};
}

json QueryService::snapshot_json(const SessionRecord& s, std::size_t snapshot_id) const {
    const FilterSession& f = *s.filter;
    const Snapshot& snap = f.snapshot(snapshot_id);
    const Observation obs = f.observe(snapshot_id);
    json j = {{"snapshot_id", snap.id},
              {"parent", snap.parent ? json(*snap.parent) : json(nullptr)},
              {"retained_count", snap.retained.size()},
              {"discarded_count", snap.discarded.size()},
              {"retained_tokens", f.retained_tokens(snapshot_id)},
              {"active", snapshot_id == f.active_id()},
              {"over_filter", obs.over_filter_signal()},
              {"empty", obs.empty_flag},
              {"below_floor", obs.below_floor}};
    j["invocation"] = snap.invocation ? to_json(*snap.invocation) : json(nullptr);
    return j;
}

json QueryService::session_json(const SessionRecord& s) const {
    json clarifications = json::array();
    for (const auto& c : s.query.clarifications) clarifications.push_back(to_json(c));
    json labels = json::array();
    for (const auto& l : s.labels) labels.push_back(to_json(l));
    json j = {{"session_id", s.session_id},
              {"corpus_id", s.corpus_id},
              {"phase", to_string(s.phase)},
              {"query", to_json(s.query)},
              {"clarifications", clarifications},
              {"labels", labels},
              {"exhausted", s.exhausted}};
    if (!s.failure.empty()) j["failure"] = s.failure;
    if (s.filter) {
        json timeline = json::array();
        for (const auto& snap : s.filter->snapshots()) timeline.push_back(snapshot_json(s, snap.id));
        j["timeline"] = timeline;
        j["active_snapshot_id"] = s.filter->active_id();
        j["iterations_used"] = s.filter->iterations_used();
        j["budget"] = s.filter->budget();
        j["filter_state"] = s.filter->to_json();
    }
    if (s.answer) j["answer_count"] = s.answer->count();
    return j;
}

void QueryService::persist(const SessionRecord& s) const {
    if (!config_.persist_dir) return;
    json j = session_json(s);
    if (s.answer) j["answer"] = to_json(*s.answer);
    if (s.stats) {
        j["stats"] = {{"clusters", s.stats->clusters},
                      {"batches", s.stats->batches},
                      {"llm_calls", s.stats->llm_calls},
                      {"candidate_pairs", s.stats->candidate_pairs}};
    }
    write_text_file(*config_.persist_dir / (s.session_id + ".json"), j.dump(2) + "\n");
}

std::size_t QueryService::load_persisted() {
    if (!config_.persist_dir || !std::filesystem::exists(*config_.persist_dir)) return 0;
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(*config_.persist_dir)) {
        if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::size_t loaded = 0;
    for (const auto& path : files) {
        const json j = read_json_file(path);
        auto s = std::make_shared<SessionRecord>();
        s->session_id = j.at("session_id").get<std::string>();
        s->corpus_id = j.at("corpus_id").get<std::string>();
        s->phase = phase_from_string(j.at("phase").get<std::string>());
        s->query = query_from_json(j.at("query"));
        s->exhausted = j.value("exhausted", false);
        s->failure = j.value("failure", std::string());
        for (const auto& l : j.value("labels", json::array())) {
            AmbiguityLabel label;
            label.code = ambiguity_code_from_string(l.at("code").get<std::string>());
            label.rationale = l.value("rationale", std::string());
            label.target = l.value("target", std::string(kWholeQuery));
            label.fragment = l.value("fragment", std::string());
            s->labels.push_back(std::move(label));
        }
        if (j.contains("filter_state")) {
            s->filter.emplace(FilterSession::replay(corpus(s->corpus_id), j.at("filter_state"), backends_.embedder));
        }
        if (j.contains("answer")) s->answer = answer_from_json(j.at("answer"));
        if (j.contains("stats")) {
            const auto& st = j.at("stats");
            s->stats = AggregationStats{st.at("clusters").get<std::size_t>(), st.at("batches").get<std::size_t>(),
                                        st.at("llm_calls").get<std::size_t>(),
                                        st.at("candidate_pairs").get<std::size_t>()};
        }
        std::lock_guard lock(mutex_);
        const std::string& id = s->session_id;
        if (id.rfind("s-", 0) == 0) {
            try {
                next_id_ = std::max(next_id_, parse_index(id.substr(2), "session id") + 1);
            } catch (const Error&) {
            }
        }
        sessions_[id] = std::move(s);
        ++loaded;
    }
    return loaded;
}

void QueryService::start_filtering(SessionRecord& s) {
    s.query = rewrite_query(s.query, config_.rewrite_mode, backends_.assistant.get());
    s.filter.emplace(open_session(corpus(s.corpus_id), s.query, config_.filter_budget, config_.filter,
                                  backends_.embedder));
    s.phase = Phase::Filtering;
}

json QueryService::submit_query(const json& body) {
    if (!body.is_object()) throw Error(ErrorCode::InvalidArgument, "request body must be a JSON object");
    std::vector<std::string> missing;
    for (const char* f : {"corpus_id", "question"}) {
        if (!body.contains(f) || !body.at(f).is_string() || text::trim(body.at(f).get<std::string>()).empty()) {
            missing.emplace_back(f);
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw Error(ErrorCode::Schema, "missing or empty fields: " + list, list);
    }
    const std::string corpus_id = body.at("corpus_id").get<std::string>();
    corpus(corpus_id);

    auto s = std::make_shared<SessionRecord>();
    {
        std::lock_guard lock(mutex_);
        char buf[32];
        std::snprintf(buf, sizeof buf, "s-%06zu", next_id_++);
        s->session_id = buf;
        sessions_[s->session_id] = s;
    }
    std::lock_guard lock(s->mutex);
    s->corpus_id = corpus_id;
    s->query.query_id = s->session_id;
    s->query.raw_text = body.at("question").get<std::string>();
    try {
        LlmBackend* assistant = backends_.assistant.get();
        QuerySpec q = parse_query(s->query.raw_text, assistant, s->session_id);
        s->labels = classify_ambiguity(q, assistant);
        q.clarifications = generate_clarifications(q, s->labels, assistant);
        s->query = std::move(q);
        if (s->query.pending_clarifications().empty()) start_filtering(*s);
        else s->phase = Phase::Clarifying;
    } catch (const Error& e) {
        s->phase = Phase::Failed;
        s->failure = e.what();
        persist(*s);
        if (is_backend_failure(e.code())) {
            throw Error(e.code(), std::string(e.what()) + " (session " + s->session_id + " marked failed)", e.detail());
        }
        throw;
    }
    persist(*s);
    json clarifications = json::array();
    for (const auto& c : s->query.clarifications) clarifications.push_back(to_json(c));
    return {{"session_id", s->session_id}, {"phase", to_string(s->phase)}, {"clarifications", clarifications}};
}

json QueryService::get_session(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return session_json(*s);
}

json QueryService::answer_clarification(const std::string& id, const std::string& clarification_id,
                                        const json& body) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    if (!body.is_object()) throw Error(ErrorCode::InvalidArgument, "request body must be a JSON object");
    const bool skip = body.value("skip", false);
    if (!skip && !(body.contains("answer") && body.at("answer").is_string())) {
        throw Error(ErrorCode::Schema, "body needs a string \"answer\" or \"skip\": true", "answer");
    }
    const auto it = std::find_if(s->query.clarifications.begin(), s->query.clarifications.end(),
                                 [&](const Clarification& c) { return c.id == clarification_id; });
    if (it == s->query.clarifications.end()) {
        throw Error(ErrorCode::NotFound, "unknown clarification " + clarification_id + " in session " + id);
    }
    require_phase(*s, Phase::Clarifying, "answering a clarification");
    const Clarification c = *it;
    s->query = skip ? skip_clarification(s->query, c) : apply_answer(s->query, c, body.at("answer").get<std::string>());
    if (s->query.pending_clarifications().empty()) {
        try {
            start_filtering(*s);
        } catch (const Error& e) {
            if (is_backend_failure(e.code())) {
                s->phase = Phase::Failed;
                s->failure = e.what();
                persist(*s);
            }
            throw;
        }
    }
    persist(*s);
    return session_json(*s);
}

json QueryService::filter_step(const std::string& id, const json& body) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    require_phase(*s, Phase::Filtering, "a filter step");
    FilterSession& f = *s->filter;
    json out = json::object();
    bool applied = false;
    if (body.is_object() && body.contains("tool")) {
        ToolInvocation inv = invocation_from_json(body);
        inv.target_snapshot = f.active_id();
        apply_tool(f, inv);
        applied = true;
        out["mode"] = "manual";
    } else {
        if (!backends_.planner) throw Error(ErrorCode::Config, "no planner backend configured; pass a tool explicitly");
        const Plan plan = plan_step(f, *backends_.planner);
        out["mode"] = "planned";
        out["plan"] = to_json(plan);
        if (plan.done) {
            s->exhausted = plan.exhausted;
        } else {
            execute_plan(f, plan);
            applied = std::any_of(plan.actions.begin(), plan.actions.end(),
                                  [](const PlanAction& a) { return a.kind == PlanAction::Kind::Apply; });
        }
        out["done"] = plan.done;
    }
    if (applied && f.applied_tool_count() > 0) {
        LlmBackend* probe = config_.probe_on_step ? backends_.judge.get() : nullptr;
        out["overfilter"] = to_json(detect_overfilter(f, probe));
    }
    out["status"] = s->exhausted ? "exhausted" : "ok";
    out["exhausted"] = s->exhausted;
    out["snapshot"] = snapshot_json(*s, f.active_id());
    persist(*s);
    return out;
}

json QueryService::rollback(const std::string& id, const json& body) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    require_phase(*s, Phase::Filtering, "rollback");
    if (!body.is_object() || !body.contains("snapshot_id") || !body.at("snapshot_id").is_number_unsigned()) {
        throw Error(ErrorCode::Schema, "body needs a non-negative integer \"snapshot_id\"", "snapshot_id");
    }
    const std::size_t target = body.at("snapshot_id").get<std::size_t>();
    aggquery::rollback(*s->filter, target);
    persist(*s);
    return {{"snapshot", snapshot_json(*s, s->filter->active_id())}};
}

json QueryService::snapshot(const std::string& id, std::size_t snapshot_id) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    if (!s->filter) throw Error(ErrorCode::Conflict, "session " + id + " has no snapshots yet");
    json j = snapshot_json(*s, snapshot_id);
    j["retained_chunk_ids"] = s->filter->retained_ids(snapshot_id);
    return j;
}

json QueryService::aggregate(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    require_phase(*s, Phase::Filtering, "aggregation");
    if (!backends_.judge) throw Error(ErrorCode::Config, "no judge backend configured");
    s->phase = Phase::Aggregating;
    try {
        const auto candidates = finalize_candidates(*s->filter);
        auto result = aggregate_candidates(candidates, s->filter->corpus(), s->query, *backends_.judge,
                                           *backends_.embedder, config_.aggregation, config_.aliases);
        s->answer = std::move(result.answer);
        s->stats = result.stats;
        s->phase = Phase::Done;
    } catch (const Error& e) {
        s->phase = Phase::Failed;
        s->failure = e.what();
        persist(*s);
        throw;
    }
    persist(*s);
    return {{"session_id", id},
            {"phase", to_string(s->phase)},
            {"count", s->answer->count()},
            {"stats",
             {{"clusters", s->stats->clusters},
              {"batches", s->stats->batches},
              {"llm_calls", s->stats->llm_calls},
              {"candidate_pairs", s->stats->candidate_pairs}}}};
}

json QueryService::result(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    require_phase(*s, Phase::Done, "reading the result");
    json j = to_json(*s->answer);
    j["session_id"] = id;
    return j;
}

ApiResponse QueryService::handle(const std::string& method, const std::string& path, const std::string& body,
                                 const std::string& idempotency_key) {
    const std::string route = method + " " + path;
    if (!idempotency_key.empty() && method == "POST") {
        std::lock_guard lock(mutex_);
        if (auto it = idempotent_.find(idempotency_key); it != idempotent_.end()) {
            if (it->second.first != route) {
                return error_response(Error(ErrorCode::Conflict, "idempotency key reused for a different request",
                                            it->second.first));
            }
            return it->second.second;
        }
    }

    ApiResponse response;
    try {
        json payload = json::object();
        if (!text::trim(body).empty()) {
            payload = json::parse(body, nullptr, false);
            if (payload.is_discarded()) throw Error(ErrorCode::InvalidArgument, "request body is not valid JSON");
        }
        const auto parts = split_path(path);
        auto expect = [&](const char* m) {
            if (method != m) throw Error(ErrorCode::InvalidArgument, "method " + method + " not allowed on " + path);
        };
        if (parts.size() < 2 || parts[0] != "v1") throw Error(ErrorCode::NotFound, "no route for " + path);
        if (parts.size() == 2 && parts[1] == "corpora") {
            expect("GET");
            response.body = list_corpora();
        } else if (parts[1] == "queries" && parts.size() == 2) {
            expect("POST");
            response.body = submit_query(payload);
            response.status = 201;
        } else if (parts[1] == "queries" && parts.size() == 3) {
            expect("GET");
            response.body = get_session(parts[2]);
        } else if (parts[1] == "queries" && parts.size() == 5 && parts[3] == "clarifications") {
            expect("POST");
            response.body = answer_clarification(parts[2], parts[4], payload);
        } else if (parts[1] == "queries" && parts.size() == 5 && parts[3] == "filter" && parts[4] == "step") {
            expect("POST");
            response.body = filter_step(parts[2], payload);
        } else if (parts[1] == "queries" && parts.size() == 4 && parts[3] == "rollback") {
            expect("POST");
            response.body = rollback(parts[2], payload);
        } else if (parts[1] == "queries" && parts.size() == 5 && parts[3] == "snapshots") {
            expect("GET");
            response.body = snapshot(parts[2], parse_index(parts[4], "snapshot id"));
        } else if (parts[1] == "queries" && parts.size() == 4 && parts[3] == "aggregate") {
            expect("POST");
            response.body = aggregate(parts[2]);
        } else if (parts[1] == "queries" && parts.size() == 4 && parts[3] == "result") {
            expect("GET");
            response.body = result(parts[2]);
        } else {
            throw Error(ErrorCode::NotFound, "no route for " + path);
        }
    } catch (const Error& e) {
        response = error_response(e);
    } catch (const json::exception& e) {
        response = error_response(Error(ErrorCode::Schema, e.what()));
    }

    if (!idempotency_key.empty() && method == "POST") {
        std::lock_guard lock(mutex_);
        idempotent_.emplace(idempotency_key, std::make_pair(route, response));
    }
    return response;
}

void install_routes(httplib::Server& server, QueryService& service) {
    auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
        const ApiResponse r =
            service.handle(req.method, req.path, req.body, req.get_header_value("Idempotency-Key"));
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    server.Get(R"(/v1/.*)", forward);
    server.Post(R"(/v1/.*)", forward);
}

} // namespace aggquery
