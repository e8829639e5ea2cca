#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "aggquery/aggregate.hpp"
#include "aggquery/corpus.hpp"
#include "aggquery/disambiguation.hpp"
#include "aggquery/error.hpp"
#include "aggquery/filter.hpp"
#include "aggquery/llm.hpp"
#include "aggquery/query.hpp"

namespace httplib {
class Server;
}

namespace aggquery {

enum class Phase { Clarifying, Filtering, Aggregating, Done, Failed };

std::string_view to_string(Phase p);

struct ServiceConfig {
    std::size_t filter_budget = 12;
    FilterConfig filter;
    /// Run the discarded-chunk judge probe after every filter step.
    bool probe_on_step = true;
    AggregationConfig aggregation;
    AliasMap aliases;
    RewriteMode rewrite_mode = RewriteMode::ClassificationGuided;
    /// When set, every session is written here after each mutation.
    std::optional<std::filesystem::path> persist_dir;
};

struct ServiceBackends {
    /// Parse, classify, clarify and rewrite; null selects the rule-based paths.
    std::shared_ptr<LlmBackend> assistant;
    std::shared_ptr<LlmBackend> planner;
    std::shared_ptr<LlmBackend> judge;
    std::shared_ptr<EmbeddingProvider> embedder;
};

struct SessionRecord {
    std::string session_id;
    std::string corpus_id;
    Phase phase = Phase::Clarifying;
    QuerySpec query;
    std::vector<AmbiguityLabel> labels;
    std::optional<FilterSession> filter;
    std::optional<AnswerSet> answer;
    std::optional<AggregationStats> stats;
    bool exhausted = false;
    std::string failure;
    std::mutex mutex;
};

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

/// HTTP status for an error code, and the {code, message, detail} envelope.
int http_status(ErrorCode code);
ApiResponse error_response(const Error& e);

/// Session lifecycle behind the /v1 API. Every handler can be called
/// directly; `handle` routes a method + path the same way the HTTP server does.
class QueryService {
public:
    QueryService(ServiceConfig config, ServiceBackends backends);

    void add_corpus(std::shared_ptr<const CorpusHandle> corpus);
    /// Reloads sessions written to the persistence directory; returns the count.
    std::size_t load_persisted();

    ApiResponse handle(const std::string& method, const std::string& path, const std::string& body,
                       const std::string& idempotency_key = {});

    nlohmann::json list_corpora() const;
    nlohmann::json submit_query(const nlohmann::json& body);
    nlohmann::json get_session(const std::string& id);
    nlohmann::json answer_clarification(const std::string& id, const std::string& clarification_id,
                                        const nlohmann::json& body);
    nlohmann::json filter_step(const std::string& id, const nlohmann::json& body);
    nlohmann::json rollback(const std::string& id, const nlohmann::json& body);
    nlohmann::json snapshot(const std::string& id, std::size_t snapshot_id);
    nlohmann::json aggregate(const std::string& id);
    nlohmann::json result(const std::string& id);

    const ServiceConfig& config() const noexcept { return config_; }

private:
    std::shared_ptr<SessionRecord> find(const std::string& id) const;
    std::shared_ptr<const CorpusHandle> corpus(const std::string& corpus_id) const;
    void start_filtering(SessionRecord& s);
    void persist(const SessionRecord& s) const;
    nlohmann::json session_json(const SessionRecord& s) const;
    nlohmann::json snapshot_json(const SessionRecord& s, std::size_t snapshot_id) const;

    ServiceConfig config_;
    ServiceBackends backends_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<const CorpusHandle>> corpora_;
    std::map<std::string, std::shared_ptr<SessionRecord>> sessions_;
    std::map<std::string, std::pair<std::string, ApiResponse>> idempotent_;
    std::size_t next_id_ = 1;
};

/// Registers every /v1 route on an httplib server.
void install_routes(httplib::Server& server, QueryService& service);

} // namespace aggquery
