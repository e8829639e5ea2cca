#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "aggquery/corpus.hpp"
#include "aggquery/llm.hpp"
#include "aggquery/query.hpp"
#include "aggquery/text_index.hpp"

namespace aggquery {

struct ToolInvocation {
    std::string tool;
    nlohmann::json params = nlohmann::json::object();
    std::size_t target_snapshot = 0;

    friend bool operator==(const ToolInvocation&, const ToolInvocation&) = default;
};

nlohmann::json to_json(const ToolInvocation& inv);
ToolInvocation invocation_from_json(const nlohmann::json& j);

/// Registered tool names.
const std::vector<std::string>& filter_tool_names();

/// Throws NotFound for unknown tools and Schema (naming the field) for bad
/// parameters.
void validate_invocation(const ToolInvocation& inv);

/// Chunk indices refer to positions in the corpus' sorted chunk order.
struct Snapshot {
    std::size_t id = 0;
    std::optional<std::size_t> parent;
    std::vector<std::uint32_t> retained;
    std::vector<std::uint32_t> discarded;
    std::optional<ToolInvocation> invocation;
};

struct Observation {
    std::size_t snapshot_id = 0;
    std::size_t retained_count = 0;
    std::size_t discarded_count = 0;
    std::vector<std::string> sampled_retained;
    std::vector<std::string> sampled_discarded;
    std::vector<std::string> retained_summaries;
    std::vector<std::string> discarded_summaries;
    bool empty_flag = false;
    bool below_floor = false;

    bool over_filter_signal() const noexcept { return empty_flag || below_floor; }
};

nlohmann::json to_json(const Observation& o);

struct HistoryEvent {
    enum class Kind { Apply, Rollback, Plan, OverfilterCheck };
    Kind kind = Kind::Apply;
    std::optional<ToolInvocation> invocation;
    std::size_t snapshot_id = 0;
    std::size_t from_snapshot = 0;
    nlohmann::json detail = nlohmann::json::object();
};

nlohmann::json to_json(const HistoryEvent& e);

struct FilterConfig {
    /// Over-filter when retained < floor_fraction * |snapshot 0|.
    double floor_fraction = 0.01;
    std::size_t probe_size = 5;
    std::size_t sample_size = 5;
    /// Hand off to aggregation once retained tokens fit this many judge contexts.
    std::size_t handoff_batches = 4;
    std::size_t max_context = 8000;
    std::uint64_t seed = 0;
    std::size_t summary_chars = 160;

    std::size_t handoff_tokens() const noexcept { return handoff_batches * max_context; }
};

nlohmann::json to_json(const FilterConfig& c);
FilterConfig filter_config_from_json(const nlohmann::json& j);

/// Append-only sequence of corpus states with an active pointer. Snapshots
/// are never removed; rollback only moves the pointer.
class FilterSession {
public:
    FilterSession(std::shared_ptr<const CorpusHandle> corpus, QuerySpec query, std::size_t budget,
                  FilterConfig config = {}, std::shared_ptr<EmbeddingProvider> embedder = nullptr);

    const CorpusHandle& corpus() const noexcept { return *corpus_; }
    std::shared_ptr<const CorpusHandle> corpus_ptr() const noexcept { return corpus_; }
    const QuerySpec& query() const noexcept { return query_; }
    const FilterConfig& config() const noexcept { return config_; }
    std::size_t budget() const noexcept { return budget_; }
    std::size_t iterations_used() const noexcept { return iterations_used_; }
    bool budget_exhausted() const noexcept { return iterations_used_ >= budget_; }
    void consume_iteration() { ++iterations_used_; }

    const std::vector<Snapshot>& snapshots() const noexcept { return snapshots_; }
    const Snapshot& snapshot(std::size_t id) const;
    const Snapshot& active() const { return snapshots_[active_]; }
    std::size_t active_id() const noexcept { return active_; }
    const std::vector<HistoryEvent>& history() const noexcept { return history_; }
    std::size_t applied_tool_count() const noexcept;

    std::size_t apply_tool(const ToolInvocation& inv);
    std::size_t rollback(std::size_t snapshot_id);
    Observation observe(std::size_t snapshot_id) const;
    void record(HistoryEvent event) { history_.push_back(std::move(event)); }

    std::vector<std::string> retained_ids(std::size_t snapshot_id) const;
    std::vector<std::string> discarded_ids(std::size_t snapshot_id) const;
    std::size_t retained_tokens(std::size_t snapshot_id) const;

    /// Seeded sample of at most k ids from `pool`; stable for a given
    /// (session seed, snapshot, stream) triple.
    std::vector<std::uint32_t> sample(const std::vector<std::uint32_t>& pool, std::size_t k, std::size_t snapshot_id,
                                      std::string_view stream) const;

    nlohmann::json to_json() const;
    /// Rebuilds a session by replaying the recorded trail from snapshot 0
    /// and checks every snapshot against the recorded ids.
    static FilterSession replay(std::shared_ptr<const CorpusHandle> corpus, const nlohmann::json& state,
                                std::shared_ptr<EmbeddingProvider> embedder = nullptr);

private:
    const std::vector<double>& chunk_embedding(std::uint32_t index);

    std::shared_ptr<const CorpusHandle> corpus_;
    QuerySpec query_;
    std::size_t budget_;
    FilterConfig config_;
    std::shared_ptr<EmbeddingProvider> embedder_;
    std::vector<Snapshot> snapshots_;
    std::size_t active_ = 0;
    std::vector<HistoryEvent> history_;
    std::size_t iterations_used_ = 0;
    std::unordered_map<std::uint32_t, std::vector<double>> embedding_cache_;
};

FilterSession open_session(std::shared_ptr<const CorpusHandle> corpus, QuerySpec query, std::size_t budget,
                           FilterConfig config = {}, std::shared_ptr<EmbeddingProvider> embedder = nullptr);

struct PlanAction {
    enum class Kind { Apply, Rollback };
    Kind kind = Kind::Apply;
    ToolInvocation invocation;
    std::size_t snapshot_id = 0;
};

struct Plan {
    std::vector<PlanAction> actions;
    bool done = false;
    bool exhausted = false;
    std::string rationale;
};

nlohmann::json to_json(const Plan& p);

/// Done without consulting the backend when the budget is spent or the
/// active snapshot is non-empty and already fits the hand-off size; otherwise asks the
/// planner for the next action(s) and consumes one iteration.
Plan plan_step(FilterSession& session, LlmBackend& backend);

/// Applies every action of a plan; returns the active id afterwards.
std::size_t execute_plan(FilterSession& session, const Plan& plan);

std::size_t apply_tool(FilterSession& session, const ToolInvocation& inv);
Observation observe_snapshot(const FilterSession& session, std::size_t snapshot_id);
std::size_t rollback(FilterSession& session, std::size_t snapshot_id);

struct OverfilterReport {
    bool below_floor = false;
    bool probe_positive = false;
    std::size_t retained = 0;
    std::size_t initial = 0;
    std::vector<std::string> probed;
    std::vector<std::string> relevant;

    bool flagged() const noexcept { return below_floor || probe_positive; }
};

nlohmann::json to_json(const OverfilterReport& r);

/// Script key used for the discarded-chunk probe request.
std::string probe_script_key(const std::string& query_id, const std::vector<std::string>& chunk_ids);

/// Floor check plus an optional judge probe over a seeded sample of the
/// chunks the active snapshot discarded. Recorded in history.
OverfilterReport detect_overfilter(FilterSession& session, LlmBackend* judge = nullptr);

/// Most recent snapshot (by id, excluding the active one) whose retained
/// count exceeds the floor; snapshot 0 when none qualifies.
std::size_t select_rollback_target(const FilterSession& session);

struct CandidateSet {
    std::vector<std::string> chunk_ids;
    nlohmann::json trail = nlohmann::json::array();
};

CandidateSet finalize_candidates(const FilterSession& session);

struct FilterLoopOptions {
    /// Roll back automatically on an over-filter signal (offline planners).
    bool auto_rollback = true;
};

/// plan → apply → check loop until the planner finishes or the budget runs out.
CandidateSet run_filter_loop(FilterSession& session, LlmBackend& planner, LlmBackend* judge,
                             FilterLoopOptions options = {});

} // namespace aggquery
