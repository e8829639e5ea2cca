#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "aggquery/aggregate.hpp"
#include "aggquery/corpus.hpp"
#include "aggquery/filter.hpp"
#include "aggquery/llm.hpp"
#include "aggquery/query.hpp"
#include "aggquery/text_index.hpp"

namespace aggquery {

struct GoldQuery {
    std::string query_id;
    std::string question;
    std::string entity_type;
    /// Free-form metadata: {"kind": "base"|"composite", "op": "and"|"or", "conditions": n}.
    nlohmann::json composition = nlohmann::json::object();
    std::vector<std::string> gold_entities;
    std::vector<std::string> gold_evidence_chunk_ids;
    /// Optional pre-parsed query; when absent the question is parsed at run time.
    std::optional<QuerySpec> spec;

    std::size_t y() const noexcept { return gold_entities.size(); }
};

using GoldSet = std::vector<GoldQuery>;

GoldQuery gold_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GoldQuery& g);
GoldSet read_gold_jsonl(const std::filesystem::path& path);
/// Every evidence id must exist in the corpus; throws NotFound naming the first missing id.
void validate_gold(const GoldSet& gold, const CorpusHandle& corpus);

std::size_t ace(std::size_t predicted, std::size_t gold);
double nace(std::size_t predicted, std::size_t gold, double epsilon = 1e-9);
/// |retained ∩ gold| / |gold|; throws InvalidArgument when gold is empty.
double chunk_recall(const std::set<std::string>& retained, const std::set<std::string>& gold);

double mean_of(const std::vector<double>& xs);
/// Standard median: the mean of the two middle values for even-length input.
double median_of(std::vector<double> xs);

enum class RecallMode { Macro, Micro };

struct QueryRow {
    std::string query_id;
    std::size_t predicted = 0;
    std::size_t gold = 0;
    std::size_t ace = 0;
    double nace = 0.0;
    /// Absent when the query has no gold evidence.
    std::optional<double> recall;
    std::size_t evidence_retained = 0;
    std::size_t evidence_total = 0;
    std::size_t llm_calls = 0;
    /// Set when the query failed; metrics are then excluded from the aggregates.
    std::optional<std::string> error;
    nlohmann::json answer;
};

struct ReportAggregates {
    double mean_nace = 0.0;
    double median_nace = 0.0;
    double mean_ace = 0.0;
    double mean_recall = 0.0;
    std::size_t evaluated = 0;
    std::size_t failed = 0;
};

ReportAggregates aggregate_rows(const std::vector<QueryRow>& rows, RecallMode mode = RecallMode::Macro);

struct Report {
    std::vector<QueryRow> rows;
    ReportAggregates aggregates;
    nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json to_json(const QueryRow& r);
nlohmann::json to_json(const Report& r);

struct PipelineConfig {
    /// Skip filtering entirely: every chunk becomes a candidate.
    bool identity_filter = false;
    std::size_t filter_budget = 12;
    FilterConfig filter;
    bool auto_rollback = true;
    AggregationConfig aggregation;
    AliasMap aliases;
    double epsilon = 1e-9;
    RecallMode recall_mode = RecallMode::Macro;
    /// Queries evaluated at once during a benchmark.
    std::size_t query_parallelism = 1;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

struct PipelineBackends {
    /// Null means the rule-based parser.
    LlmBackend* parser = nullptr;
    /// Required unless the filter is the identity.
    LlmBackend* planner = nullptr;
    LlmBackend* judge = nullptr;
    std::shared_ptr<EmbeddingProvider> embedder;
};

struct PipelineRun {
    QuerySpec query;
    CandidateSet candidates;
    AggregationResult aggregation;
};

/// Filter (or identity) followed by aggregation for an already parsed query.
PipelineRun run_query(std::shared_ptr<const CorpusHandle> corpus, const QuerySpec& q, const PipelineBackends& backends,
                      const PipelineConfig& config = {});

/// One row per gold query, ordered by query_id. Query failures become error
/// rows and never abort the run.
Report run_benchmark(std::shared_ptr<const CorpusHandle> corpus, const GoldSet& gold, const PipelineBackends& backends,
                     const PipelineConfig& config = {});

struct RagOptions {
    std::size_t k = 10;
    JudgeOptions judge;
    /// Token capacity of one reader call; top-k chunks are packed in rank order.
    std::size_t batch_capacity = 7500;
};

/// Rank-then-read: judge only the BM25 top-k chunks for the query text and
/// count the entities judged true within that window.
AnswerSet naive_rag_baseline(const CorpusHandle& corpus, const Bm25Index& index, const QuerySpec& q,
                             LlmBackend& judge, const RagOptions& options = {});

struct ExpansionRow {
    std::string doc_id;
    double top1_score = 0.0;
    std::string top1_chunk;
    bool kept = false;
};

struct HistogramBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
};

struct ExpansionReport {
    std::vector<ExpansionRow> rows;
    std::vector<Document> kept;
    std::vector<HistogramBin> histogram;
};

/// Each pool document is issued as a query against the core index and kept
/// iff its top-1 score lies in the closed interval [lo, hi].
ExpansionReport expand_corpus(const Bm25Index& core_index, std::span<const Document> pool, double lo, double hi,
                              std::size_t histogram_bins = 10);

/// Equal-width bins over [min, max] of the scores; the last bin is closed.
std::vector<HistogramBin> score_histogram(const std::vector<double>& scores, std::size_t bins);

nlohmann::json to_json(const ExpansionReport& r);

} // namespace aggquery
