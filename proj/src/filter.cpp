#include "aggquery/filter.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <regex>
#include <set>

#include "aggquery/error.hpp"
#include "aggquery/text.hpp"

namespace aggquery {

using nlohmann::json;

json to_json(const ToolInvocation& inv) {
    return {{"tool", inv.tool}, {"params", inv.params}, {"target_snapshot", inv.target_snapshot}};
}

ToolInvocation invocation_from_json(const json& j) {
    if (!j.is_object() || !j.contains("tool")) throw Error(ErrorCode::Schema, "invocation requires a tool name");
    ToolInvocation inv;
    inv.tool = j.at("tool").get<std::string>();
    inv.params = j.value("params", json::object());
    inv.target_snapshot = j.value("target_snapshot", std::size_t{0});
    return inv;
}

const std::vector<std::string>& filter_tool_names() {
    static const std::vector<std::string> names = {"exact_match", "keyword_any", "keyword_all",
                                                   "regex",       "fuzzy_match", "embed_sim"};
    return names;
}

namespace {

using ChunkPredicate = std::function<bool(const Chunk&, std::uint32_t)>;

void check_fields(const ToolInvocation& inv, std::initializer_list<const char*> allowed) {
    if (!inv.params.is_object()) throw Error(ErrorCode::Schema, inv.tool + ": params must be an object");
    for (const auto& [k, _] : inv.params.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; });
        if (!known) throw Error(ErrorCode::Schema, inv.tool + ": unknown parameter '" + k + "'");
    }
}

std::string need_string(const ToolInvocation& inv, const char* field) {
    const auto it = inv.params.find(field);
    if (it == inv.params.end() || !it->is_string() || it->get<std::string>().empty()) {
        throw Error(ErrorCode::Schema, inv.tool + ": parameter '" + std::string(field) + "' must be a non-empty string");
    }
    return it->get<std::string>();
}

std::vector<std::string> need_terms(const ToolInvocation& inv) {
    const auto it = inv.params.find("terms");
    if (it == inv.params.end() || !it->is_array() || it->empty()) {
        throw Error(ErrorCode::Schema, inv.tool + ": parameter 'terms' must be a non-empty list of strings");
    }
    std::vector<std::string> out;
    for (const auto& t : *it) {
        if (!t.is_string() || t.get<std::string>().empty()) {
            throw Error(ErrorCode::Schema, inv.tool + ": parameter 'terms' must contain non-empty strings");
        }
        out.push_back(t.get<std::string>());
    }
    return out;
}

double need_number(const ToolInvocation& inv, const char* field, double lo, double hi) {
    const auto it = inv.params.find(field);
    if (it == inv.params.end() || !it->is_number()) {
        throw Error(ErrorCode::Schema, inv.tool + ": parameter '" + std::string(field) + "' must be a number");
    }
    const double v = it->get<double>();
    if (v < lo || v > hi) {
        throw Error(ErrorCode::Schema, inv.tool + ": parameter '" + std::string(field) + "' out of range [" +
                                           std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return v;
}

bool opt_bool(const ToolInvocation& inv, const char* field, bool fallback) {
    const auto it = inv.params.find(field);
    if (it == inv.params.end()) return fallback;
    if (!it->is_boolean()) throw Error(ErrorCode::Schema, inv.tool + ": parameter '" + std::string(field) + "' must be a boolean");
    return it->get<bool>();
}

std::regex compile_regex(const ToolInvocation& inv) {
    const auto pattern = need_string(inv, "pattern");
    auto flags = std::regex::ECMAScript;
    if (opt_bool(inv, "case_insensitive", true)) flags |= std::regex::icase;
    try {
        return std::regex(pattern, flags);
    } catch (const std::regex_error& e) {
        throw Error(ErrorCode::Schema, inv.tool + ": parameter 'pattern' is not a valid regex: " + e.what());
    }
}

// True when some window of `width` consecutive word terms is within the
// normalised edit threshold of `term`.
bool fuzzy_contains(const std::vector<std::string>& words, const std::vector<std::string>& term_words,
                    const std::string& term, double threshold) {
    const std::size_t width = std::max<std::size_t>(term_words.size(), 1);
    if (words.size() < width) return false;
    for (std::size_t i = 0; i + width <= words.size(); ++i) {
        std::string window = words[i];
        for (std::size_t k = 1; k < width; ++k) window += " " + words[i + k];
        if (text::normalized_levenshtein(term, window) <= threshold) return true;
    }
    return false;
}

} // namespace

void validate_invocation(const ToolInvocation& inv) {
    if (inv.tool == "exact_match") {
        check_fields(inv, {"term", "case_sensitive"});
        need_string(inv, "term");
        opt_bool(inv, "case_sensitive", false);
    } else if (inv.tool == "keyword_any" || inv.tool == "keyword_all") {
        check_fields(inv, {"terms"});
        need_terms(inv);
    } else if (inv.tool == "regex") {
        check_fields(inv, {"pattern", "case_insensitive"});
        compile_regex(inv);
    } else if (inv.tool == "fuzzy_match") {
        check_fields(inv, {"term", "max_norm_edit"});
        need_string(inv, "term");
        need_number(inv, "max_norm_edit", 0.0, 1.0);
    } else if (inv.tool == "embed_sim") {
        check_fields(inv, {"query_text", "min_cosine"});
        need_string(inv, "query_text");
        need_number(inv, "min_cosine", -1.0, 1.0);
    } else {
        throw Error(ErrorCode::NotFound, "unknown filter tool: " + inv.tool);
    }
}

json to_json(const Observation& o) {
    return {{"snapshot_id", o.snapshot_id},
            {"retained_count", o.retained_count},
            {"discarded_count", o.discarded_count},
            {"sampled_retained", o.sampled_retained},
            {"sampled_discarded", o.sampled_discarded},
            {"retained_summaries", o.retained_summaries},
            {"discarded_summaries", o.discarded_summaries},
            {"empty", o.empty_flag},
            {"below_floor", o.below_floor},
            {"over_filter_signal", o.over_filter_signal()}};
}

namespace {

std::string_view kind_name(HistoryEvent::Kind k) {
    switch (k) {
    case HistoryEvent::Kind::Apply: return "apply";
    case HistoryEvent::Kind::Rollback: return "rollback";
    case HistoryEvent::Kind::Plan: return "plan";
    case HistoryEvent::Kind::OverfilterCheck: return "overfilter_check";
    }
    return "unknown";
}

HistoryEvent::Kind kind_from(const std::string& s) {
    if (s == "apply") return HistoryEvent::Kind::Apply;
    if (s == "rollback") return HistoryEvent::Kind::Rollback;
    if (s == "plan") return HistoryEvent::Kind::Plan;
    if (s == "overfilter_check") return HistoryEvent::Kind::OverfilterCheck;
    throw Error(ErrorCode::Schema, "unknown history event kind: " + s);
}

} // namespace

json to_json(const HistoryEvent& e) {
    json j = {{"kind", kind_name(e.kind)}, {"snapshot_id", e.snapshot_id}, {"detail", e.detail}};
    if (e.invocation) j["invocation"] = to_json(*e.invocation);
    if (e.kind == HistoryEvent::Kind::Rollback) j["from_snapshot"] = e.from_snapshot;
    return j;
}

json to_json(const FilterConfig& c) {
    return {{"floor_fraction", c.floor_fraction}, {"probe_size", c.probe_size},
            {"sample_size", c.sample_size},       {"handoff_batches", c.handoff_batches},
            {"max_context", c.max_context},       {"seed", c.seed},
            {"summary_chars", c.summary_chars}};
}

FilterConfig filter_config_from_json(const json& j) {
    FilterConfig c;
    c.floor_fraction = j.value("floor_fraction", c.floor_fraction);
    c.probe_size = j.value("probe_size", c.probe_size);
    c.sample_size = j.value("sample_size", c.sample_size);
    c.handoff_batches = j.value("handoff_batches", c.handoff_batches);
    c.max_context = j.value("max_context", c.max_context);
    c.seed = j.value("seed", c.seed);
    c.summary_chars = j.value("summary_chars", c.summary_chars);
    return c;
}

FilterSession::FilterSession(std::shared_ptr<const CorpusHandle> corpus, QuerySpec query, std::size_t budget,
                             FilterConfig config, std::shared_ptr<EmbeddingProvider> embedder)
    : corpus_(std::move(corpus)), query_(std::move(query)), budget_(budget), config_(config),
      embedder_(std::move(embedder)) {
    if (!corpus_ || corpus_->empty()) throw Error(ErrorCode::InvalidArgument, "filter session requires a non-empty corpus");
    Snapshot root;
    root.id = 0;
    root.retained.resize(corpus_->size());
    for (std::uint32_t i = 0; i < root.retained.size(); ++i) root.retained[i] = i;
    snapshots_.push_back(std::move(root));
}

const Snapshot& FilterSession::snapshot(std::size_t id) const {
    if (id >= snapshots_.size()) throw Error(ErrorCode::NotFound, "unknown snapshot id: " + std::to_string(id));
    return snapshots_[id];
}

std::size_t FilterSession::applied_tool_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(history_.begin(), history_.end(), [](const HistoryEvent& e) {
        return e.kind == HistoryEvent::Kind::Apply;
    }));
}

const std::vector<double>& FilterSession::chunk_embedding(std::uint32_t index) {
    auto it = embedding_cache_.find(index);
    if (it != embedding_cache_.end()) return it->second;
    const std::string body = corpus_->chunk_at(index).text;
    auto vecs = embed_texts(std::span<const std::string>(&body, 1), *embedder_);
    return embedding_cache_.emplace(index, std::move(vecs.front().values)).first->second;
}

std::size_t FilterSession::apply_tool(const ToolInvocation& inv) {
    validate_invocation(inv);
    if (inv.target_snapshot != active_) {
        throw Error(ErrorCode::Conflict, "invocation targets snapshot " + std::to_string(inv.target_snapshot) +
                                             " but the active snapshot is " + std::to_string(active_));
    }

    ChunkPredicate pred;
    if (inv.tool == "exact_match") {
        const bool cs = opt_bool(inv, "case_sensitive", false);
        const std::string term = cs ? need_string(inv, "term") : text::fold_case(need_string(inv, "term"));
        pred = [term, cs](const Chunk& c, std::uint32_t) {
            return (cs ? c.text : text::fold_case(c.text)).find(term) != std::string::npos;
        };
    } else if (inv.tool == "keyword_any" || inv.tool == "keyword_all") {
        std::vector<std::string> terms;
        for (const auto& t : need_terms(inv)) terms.push_back(text::fold_case(t));
        const bool all = inv.tool == "keyword_all";
        pred = [terms, all](const Chunk& c, std::uint32_t) {
            const std::string body = text::fold_case(c.text);
            auto hit = [&](const std::string& t) { return body.find(t) != std::string::npos; };
            return all ? std::all_of(terms.begin(), terms.end(), hit) : std::any_of(terms.begin(), terms.end(), hit);
        };
    } else if (inv.tool == "regex") {
        auto re = std::make_shared<std::regex>(compile_regex(inv));
        pred = [re](const Chunk& c, std::uint32_t) { return std::regex_search(c.text, *re); };
    } else if (inv.tool == "fuzzy_match") {
        const std::string term = text::canonical_key(need_string(inv, "term"));
        const auto term_words = text::word_terms(term);
        const double threshold = need_number(inv, "max_norm_edit", 0.0, 1.0);
        pred = [term, term_words, threshold](const Chunk& c, std::uint32_t) {
            return fuzzy_contains(text::word_terms(c.text), term_words, term, threshold);
        };
    } else if (inv.tool == "embed_sim") {
        if (!embedder_) throw Error(ErrorCode::Config, "embed_sim requires an embedding provider");
        const std::string q = need_string(inv, "query_text");
        const double min_cos = need_number(inv, "min_cosine", -1.0, 1.0);
        auto qv = embed_texts(std::span<const std::string>(&q, 1), *embedder_).front().values;
        pred = [this, qv, min_cos](const Chunk&, std::uint32_t idx) {
            return cosine_sim(qv, chunk_embedding(idx)) >= min_cos;
        };
    }

    const Snapshot& parent = snapshots_[active_];
    Snapshot child;
    child.id = snapshots_.size();
    child.parent = parent.id;
    child.invocation = inv;
    for (std::uint32_t idx : parent.retained) {
        (pred(corpus_->chunk_at(idx), idx) ? child.retained : child.discarded).push_back(idx);
    }
    const std::size_t id = child.id;
    snapshots_.push_back(std::move(child));
    active_ = id;

    HistoryEvent e;
    e.kind = HistoryEvent::Kind::Apply;
    e.invocation = inv;
    e.snapshot_id = id;
    e.detail = {{"observation", aggquery::to_json(observe(id))}};
    history_.push_back(std::move(e));
    return id;
}

std::size_t FilterSession::rollback(std::size_t snapshot_id) {
    snapshot(snapshot_id);
    HistoryEvent e;
    e.kind = HistoryEvent::Kind::Rollback;
    e.from_snapshot = active_;
    e.snapshot_id = snapshot_id;
    active_ = snapshot_id;
    e.detail = {{"retained_count", snapshots_[snapshot_id].retained.size()}};
    history_.push_back(std::move(e));
    return active_;
}

std::vector<std::uint32_t> FilterSession::sample(const std::vector<std::uint32_t>& pool, std::size_t k,
                                                 std::size_t snapshot_id, std::string_view stream) const {
    if (pool.size() <= k) return pool;
    std::uint64_t seed = text::fnv1a64(stream, config_.seed ^ 0x9e3779b97f4a7c15ULL);
    seed = text::fnv1a64(std::to_string(snapshot_id), seed);
    std::mt19937_64 rng(seed);
    std::vector<std::uint32_t> work = pool;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (work.size() - i));
        std::swap(work[i], work[j]);
    }
    work.resize(k);
    std::sort(work.begin(), work.end());
    return work;
}

Observation FilterSession::observe(std::size_t snapshot_id) const {
    const Snapshot& s = snapshot(snapshot_id);
    Observation o;
    o.snapshot_id = s.id;
    o.retained_count = s.retained.size();
    o.discarded_count = s.discarded.size();
    auto summary = [&](std::uint32_t idx) {
        const Chunk& c = corpus_->chunk_at(idx);
        std::string body = text::trim(c.text);
        if (body.size() > config_.summary_chars) {
            std::size_t cut = config_.summary_chars;
            while (cut > 0 && (static_cast<unsigned char>(body[cut]) & 0xC0) == 0x80) --cut;
            body = body.substr(0, cut) + "...";
        }
        return c.chunk_id + ": " + body;
    };
    for (auto idx : sample(s.retained, config_.sample_size, s.id, "retained")) {
        o.sampled_retained.push_back(corpus_->chunk_at(idx).chunk_id);
        o.retained_summaries.push_back(summary(idx));
    }
    for (auto idx : sample(s.discarded, config_.sample_size, s.id, "discarded")) {
        o.sampled_discarded.push_back(corpus_->chunk_at(idx).chunk_id);
        o.discarded_summaries.push_back(summary(idx));
    }
    o.empty_flag = s.retained.empty();
    o.below_floor = static_cast<double>(s.retained.size()) <
                    config_.floor_fraction * static_cast<double>(snapshots_.front().retained.size());
    return o;
}

std::vector<std::string> FilterSession::retained_ids(std::size_t snapshot_id) const {
    std::vector<std::string> out;
    for (auto idx : snapshot(snapshot_id).retained) out.push_back(corpus_->chunk_at(idx).chunk_id);
    return out;
}

std::vector<std::string> FilterSession::discarded_ids(std::size_t snapshot_id) const {
    std::vector<std::string> out;
    for (auto idx : snapshot(snapshot_id).discarded) out.push_back(corpus_->chunk_at(idx).chunk_id);
    return out;
}

std::size_t FilterSession::retained_tokens(std::size_t snapshot_id) const {
    std::size_t total = 0;
    for (auto idx : snapshot(snapshot_id).retained) total += corpus_->chunk_at(idx).token_count;
    return total;
}

json FilterSession::to_json() const {
    json snaps = json::array();
    for (const auto& s : snapshots_) {
        json row = {{"snapshot_id", s.id},
                    {"parent_id", s.parent ? json(*s.parent) : json(nullptr)},
                    {"retained", retained_ids(s.id)},
                    {"discarded", discarded_ids(s.id)}};
        if (s.invocation) row["invocation"] = aggquery::to_json(*s.invocation);
        snaps.push_back(std::move(row));
    }
    json hist = json::array();
    for (const auto& e : history_) hist.push_back(aggquery::to_json(e));
    return {{"corpus_id", corpus_->corpus_id()},
            {"query", aggquery::to_json(query_)},
            {"budget", budget_},
            {"iterations_used", iterations_used_},
            {"config", aggquery::to_json(config_)},
            {"active_snapshot", active_},
            {"snapshots", snaps},
            {"history", hist}};
}

FilterSession FilterSession::replay(std::shared_ptr<const CorpusHandle> corpus, const json& state,
                                    std::shared_ptr<EmbeddingProvider> embedder) {
    for (const char* f : {"query", "budget", "snapshots", "history", "active_snapshot"}) {
        if (!state.contains(f)) throw Error(ErrorCode::Schema, std::string("session state missing field: ") + f);
    }
    FilterSession s(std::move(corpus), query_from_json(state.at("query")), state.at("budget").get<std::size_t>(),
                    filter_config_from_json(state.value("config", json::object())), std::move(embedder));
    for (const auto& ev : state.at("history")) {
        const auto kind = kind_from(ev.at("kind").get<std::string>());
        if (kind == HistoryEvent::Kind::Apply) {
            s.apply_tool(invocation_from_json(ev.at("invocation")));
        } else if (kind == HistoryEvent::Kind::Rollback) {
            s.rollback(ev.at("snapshot_id").get<std::size_t>());
        } else {
            HistoryEvent e;
            e.kind = kind;
            e.snapshot_id = ev.value("snapshot_id", std::size_t{0});
            e.detail = ev.value("detail", json::object());
            if (ev.contains("invocation")) e.invocation = invocation_from_json(ev.at("invocation"));
            s.history_.push_back(std::move(e));
        }
    }
    s.iterations_used_ = state.value("iterations_used", std::size_t{0});
    const auto& recorded = state.at("snapshots");
    if (recorded.size() != s.snapshots_.size()) {
        throw Error(ErrorCode::Parse, "session replay produced " + std::to_string(s.snapshots_.size()) +
                                          " snapshots, state records " + std::to_string(recorded.size()));
    }
    for (std::size_t i = 0; i < recorded.size(); ++i) {
        if (recorded[i].at("retained").get<std::vector<std::string>>() != s.retained_ids(i)) {
            throw Error(ErrorCode::Parse, "session replay diverged at snapshot " + std::to_string(i));
        }
    }
    if (state.at("active_snapshot").get<std::size_t>() != s.active_) {
        throw Error(ErrorCode::Parse, "session replay ended on a different active snapshot");
    }
    return s;
}

FilterSession open_session(std::shared_ptr<const CorpusHandle> corpus, QuerySpec query, std::size_t budget,
                           FilterConfig config, std::shared_ptr<EmbeddingProvider> embedder) {
    return FilterSession(std::move(corpus), std::move(query), budget, config, std::move(embedder));
}

json to_json(const Plan& p) {
    json actions = json::array();
    for (const auto& a : p.actions) {
        if (a.kind == PlanAction::Kind::Apply) {
            actions.push_back({{"action", "apply"}, {"invocation", to_json(a.invocation)}});
        } else {
            actions.push_back({{"action", "rollback"}, {"snapshot_id", a.snapshot_id}});
        }
    }
    return {{"actions", actions}, {"done", p.done}, {"exhausted", p.exhausted}, {"rationale", p.rationale}};
}

namespace {

std::string history_digest(const FilterSession& s) {
    std::string out;
    for (const auto& e : s.history()) {
        if (e.kind == HistoryEvent::Kind::Apply) {
            const auto& obs = e.detail.at("observation");
            out += "- snapshot " + std::to_string(e.snapshot_id) + " <- " + e.invocation->tool + " " +
                   e.invocation->params.dump() + " retained=" + std::to_string(obs.at("retained_count").get<std::size_t>()) +
                   " discarded=" + std::to_string(obs.at("discarded_count").get<std::size_t>()) + "\n";
        } else if (e.kind == HistoryEvent::Kind::Rollback) {
            out += "- rollback " + std::to_string(e.from_snapshot) + " -> " + std::to_string(e.snapshot_id) + "\n";
        } else if (e.kind == HistoryEvent::Kind::OverfilterCheck) {
            out += "- over-filter check on snapshot " + std::to_string(e.snapshot_id) + ": " + e.detail.dump() + "\n";
        }
    }
    return out.empty() ? "(none)\n" : out;
}

PlanAction parse_action(const json& a, std::size_t& target, const std::string& raw) {
    if (!a.is_object() || !a.contains("action") || !a.at("action").is_string()) {
        throw Error(ErrorCode::Parse, "plan action requires an 'action' field", raw);
    }
    const auto kind = a.at("action").get<std::string>();
    PlanAction out;
    if (kind == "apply") {
        if (!a.contains("tool") || !a.at("tool").is_string()) {
            throw Error(ErrorCode::Parse, "apply action requires a tool", raw);
        }
        out.kind = PlanAction::Kind::Apply;
        out.invocation.tool = a.at("tool").get<std::string>();
        out.invocation.params = a.value("params", json::object());
        out.invocation.target_snapshot = target;
        // Each applied tool produces the next snapshot; its id is not known
        // until execution, so execute_plan re-targets subsequent actions.
        return out;
    }
    if (kind == "rollback") {
        if (!a.contains("snapshot_id") || !a.at("snapshot_id").is_number_unsigned()) {
            throw Error(ErrorCode::Parse, "rollback action requires a snapshot_id", raw);
        }
        out.kind = PlanAction::Kind::Rollback;
        out.snapshot_id = a.at("snapshot_id").get<std::size_t>();
        target = out.snapshot_id;
        return out;
    }
    throw Error(ErrorCode::Parse, "unknown plan action: " + kind, raw);
}

} // namespace

Plan plan_step(FilterSession& session, LlmBackend& backend) {
    Plan plan;
    if (session.budget_exhausted()) {
        plan.done = true;
        plan.exhausted = true;
        plan.rationale = "iteration budget exhausted";
        return plan;
    }
    // An empty snapshot is never handed off: the planner still has to widen it.
    if (!session.active().retained.empty() &&
        session.retained_tokens(session.active_id()) <= session.config().handoff_tokens()) {
        plan.done = true;
        plan.rationale = "active snapshot fits the aggregation hand-off size";
        return plan;
    }
    session.consume_iteration();

    const Observation obs = session.observe(session.active_id());
    std::string tools;
    for (const auto& t : filter_tool_names()) tools += (tools.empty() ? "" : ", ") + t;
    CompletionRequest req;
    req.purpose = Purpose::Plan;
    req.messages = {
        {"system", PromptLibrary::instance().raw("plan_system.txt")},
        {"user", PromptLibrary::instance().render(
                     "plan_user.txt",
                     {{"question", session.query().raw_text},
                      {"entity_type", session.query().entity_type},
                      {"active_snapshot", std::to_string(session.active_id())},
                      {"snapshot_count", std::to_string(session.snapshots().size())},
                      {"retained_count", std::to_string(obs.retained_count)},
                      {"discarded_count", std::to_string(obs.discarded_count)},
                      {"over_filter_signal", obs.over_filter_signal() ? "true" : "false"},
                      {"retained_samples", nlohmann::json(obs.retained_summaries).dump(1)},
                      {"discarded_samples", nlohmann::json(obs.discarded_summaries).dump(1)},
                      {"history", history_digest(session)},
                      {"tools", tools}})}};
    const auto reply = backend.complete(req);
    const json j = parse_json_response(reply.text, "plan_step");

    std::size_t target = session.active_id();
    if (j.is_object() && j.contains("actions")) {
        if (!j.at("actions").is_array()) throw Error(ErrorCode::Parse, "plan 'actions' must be a list", reply.text);
        for (const auto& a : j.at("actions")) {
            if (a.is_object() && a.value("action", std::string()) == "done") {
                plan.done = true;
                break;
            }
            plan.actions.push_back(parse_action(a, target, reply.text));
        }
    } else if (j.is_object() && j.value("action", std::string()) == "done") {
        plan.done = true;
    } else {
        plan.actions.push_back(parse_action(j, target, reply.text));
    }
    if (j.is_object()) plan.rationale = j.value("rationale", std::string());

    HistoryEvent e;
    e.kind = HistoryEvent::Kind::Plan;
    e.snapshot_id = session.active_id();
    e.detail = to_json(plan);
    session.record(std::move(e));
    return plan;
}

std::size_t execute_plan(FilterSession& session, const Plan& plan) {
    for (const auto& a : plan.actions) {
        if (a.kind == PlanAction::Kind::Rollback) {
            session.rollback(a.snapshot_id);
        } else {
            ToolInvocation inv = a.invocation;
            inv.target_snapshot = session.active_id();
            session.apply_tool(inv);
        }
    }
    return session.active_id();
}

std::size_t apply_tool(FilterSession& session, const ToolInvocation& inv) { return session.apply_tool(inv); }

Observation observe_snapshot(const FilterSession& session, std::size_t snapshot_id) {
    return session.observe(snapshot_id);
}

std::size_t rollback(FilterSession& session, std::size_t snapshot_id) { return session.rollback(snapshot_id); }

json to_json(const OverfilterReport& r) {
    return {{"below_floor", r.below_floor}, {"probe_positive", r.probe_positive}, {"retained", r.retained},
            {"initial", r.initial},         {"probed", r.probed},                 {"relevant", r.relevant},
            {"flagged", r.flagged()}};
}

std::string probe_script_key(const std::string& query_id, const std::vector<std::string>& chunk_ids) {
    std::uint64_t h = text::fnv1a64("probe");
    h = text::fnv1a64(query_id, h);
    for (const auto& id : chunk_ids) {
        h = text::fnv1a64(std::string_view("\x1f", 1), h);
        h = text::fnv1a64(id, h);
    }
    return "probe:" + text::hex64(h);
}

OverfilterReport detect_overfilter(FilterSession& session, LlmBackend* judge) {
    if (session.applied_tool_count() == 0) {
        throw Error(ErrorCode::Conflict, "over-filter detection needs at least one applied tool");
    }
    const Snapshot& active = session.active();
    OverfilterReport r;
    r.retained = active.retained.size();
    r.initial = session.snapshot(0).retained.size();
    r.below_floor = static_cast<double>(r.retained) < session.config().floor_fraction * static_cast<double>(r.initial);

    if (judge != nullptr && !active.discarded.empty()) {
        const auto picked = session.sample(active.discarded, session.config().probe_size, active.id, "probe");
        std::string listing;
        for (auto idx : picked) {
            const Chunk& c = session.corpus().chunk_at(idx);
            r.probed.push_back(c.chunk_id);
            listing += "<chunk id=\"" + c.chunk_id + "\">\n" + c.text + "\n</chunk>\n";
        }
        CompletionRequest req;
        req.purpose = Purpose::Probe;
        req.script_key = probe_script_key(session.query().query_id, r.probed);
        req.messages = {{"system", PromptLibrary::instance().raw("judge_system.txt")},
                        {"user", PromptLibrary::instance().render(
                                     "probe_user.txt",
                                     {{"question", session.query().raw_text},
                                      {"entity_type", session.query().entity_type},
                                      {"chunks", listing}})}};
        const auto reply = judge->complete(req);
        const json j = parse_json_response(reply.text, "over-filter probe");
        const std::set<std::string> probed(r.probed.begin(), r.probed.end());
        for (const auto& id : j.value("relevant_chunk_ids", json::array())) {
            if (id.is_string() && probed.count(id.get<std::string>())) r.relevant.push_back(id.get<std::string>());
        }
        r.probe_positive = !r.relevant.empty();
    }

    HistoryEvent e;
    e.kind = HistoryEvent::Kind::OverfilterCheck;
    e.snapshot_id = active.id;
    e.detail = to_json(r);
    session.record(std::move(e));
    return r;
}

std::size_t select_rollback_target(const FilterSession& session) {
    const double floor =
        session.config().floor_fraction * static_cast<double>(session.snapshot(0).retained.size());
    const auto& snaps = session.snapshots();
    for (std::size_t i = snaps.size(); i-- > 0;) {
        if (i == session.active_id()) continue;
        if (static_cast<double>(snaps[i].retained.size()) > floor) return i;
    }
    return 0;
}

CandidateSet finalize_candidates(const FilterSession& session) {
    CandidateSet out;
    out.chunk_ids = session.retained_ids(session.active_id());
    std::sort(out.chunk_ids.begin(), out.chunk_ids.end());
    for (const auto& e : session.history()) {
        if (e.kind == HistoryEvent::Kind::Apply || e.kind == HistoryEvent::Kind::Rollback) {
            out.trail.push_back(to_json(e));
        }
    }
    return out;
}

CandidateSet run_filter_loop(FilterSession& session, LlmBackend& planner, LlmBackend* judge,
                             FilterLoopOptions options) {
    while (true) {
        const Plan plan = plan_step(session, planner);
        if (plan.actions.empty()) break;
        execute_plan(session, plan);
        if (session.applied_tool_count() == 0) continue;
        const auto report = detect_overfilter(session, judge);
        if (report.flagged() && options.auto_rollback) session.rollback(select_rollback_target(session));
        if (plan.done) break;
    }
    return finalize_candidates(session);
}

} // namespace aggquery
