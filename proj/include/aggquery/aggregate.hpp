#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "aggquery/corpus.hpp"
#include "aggquery/filter.hpp"
#include "aggquery/llm.hpp"
#include "aggquery/query.hpp"
#include "aggquery/text_index.hpp"

namespace aggquery {

struct ClusterMember {
    std::string chunk_id;
    std::size_t tokens = 0;

    friend bool operator==(const ClusterMember&, const ClusterMember&) = default;
};

struct Cluster {
    std::string id;
    std::vector<ClusterMember> members;
    std::vector<double> centroid;

    std::size_t tokens() const noexcept;
    friend bool operator==(const Cluster&, const Cluster&) = default;
};

struct Batch {
    std::size_t id = 0;
    std::vector<Cluster> clusters;
    std::vector<double> centroid;
    std::size_t tokens = 0;
    std::size_t max_context = 0;

    std::vector<std::string> chunk_ids() const;
};

struct ClusterConfig {
    double tfidf_weight = 0.5;
    double embedding_weight = 0.5;
    double threshold = 0.6;
};

/// Per-chunk feature rows: [sqrt(wt) * tfidf, sqrt(we) * embedding], both
/// parts unit-normalised, so a dot product of two rows equals
/// wt * cos_tfidf + we * cos_embedding.
struct CandidateFeatures {
    std::vector<std::string> chunk_ids;
    std::vector<std::size_t> tokens;
    std::vector<std::vector<double>> rows;

    double similarity(std::size_t i, std::size_t j) const;
};

CandidateFeatures candidate_features(std::span<const Chunk> chunks, EmbeddingProvider& embedder,
                                     const ClusterConfig& config = {});

/// Single-link threshold grouping: i and j share a group whenever a chain of
/// pairs with similarity >= threshold connects them. Groups are ordered by
/// their smallest index and hold ascending indices.
std::vector<std::vector<std::size_t>> single_link_groups(const std::vector<std::vector<double>>& similarity,
                                                         double threshold);

/// Members keep candidate order; centroid is the token-weighted mean of the
/// member feature rows. Cluster ids are "k0000", "k0001", ...
std::vector<Cluster> cluster_candidates(const CandidateFeatures& features, double threshold);
std::vector<Cluster> cluster_candidates(std::span<const Chunk> chunks, EmbeddingProvider& embedder,
                                        const ClusterConfig& config = {});

/// First-fit in member order. Pieces inherit the parent centroid and get ids
/// "<parent>.<r>". Throws InvalidArgument if a single member exceeds max_context.
std::vector<Cluster> split_cluster(const Cluster& cluster, std::size_t max_context);

/// λ·cos(μ_K, μ̄(B)) + (1 − λ)·(T(B) + T(K)) / M
double merge_score(const Cluster& cluster, const Batch& batch, double lambda, std::size_t max_context);

/// Descending token total, ties by ascending cluster id.
std::vector<Cluster> order_for_batching(std::vector<Cluster> clusters);

/// Greedy cluster batching. Oversized clusters are split and each piece
/// opens its own batch; every other cluster joins the feasible batch with
/// the highest merge score (lowest index on ties) or opens a new one. Batch
/// centroids are updated by token-weighted averaging.
std::vector<Batch> greedy_batch(const std::vector<Cluster>& clusters, std::size_t max_context, double lambda);

/// Baseline without merging: every cluster (or split piece) is its own batch.
std::vector<Batch> unmerged_batches(const std::vector<Cluster>& clusters, std::size_t max_context);

/// Baseline ignoring semantics: chunks shuffled with a seeded generator and
/// packed sequentially under max_context.
std::vector<Batch> random_batches(const CandidateFeatures& features, std::size_t max_context, std::uint64_t seed);

/// Chunk pairs placed in different batches whose feature similarity reaches
/// the threshold; these are the pairs cross-batch alignment must compare.
std::size_t candidate_pair_count(const std::vector<Batch>& batches, const CandidateFeatures& features,
                                 double threshold);

struct EntityFinding {
    std::string surface;
    std::string canonical;
    std::vector<std::string> chunk_ids;
    std::map<std::string, bool> verdicts;
    std::size_t batch_id = 0;
};

nlohmann::json to_json(const EntityFinding& f);

struct JudgeResult {
    std::vector<EntityFinding> findings;
    nlohmann::json rejected = nlohmann::json::array();
};

/// Script key for judge requests: hash of (query_id, sorted chunk ids).
std::string judge_script_key(const std::string& query_id, std::vector<std::string> chunk_ids);

/// Renders the judge prompt's chunk listing: one <chunk id="..."> element per chunk.
std::string render_chunk_listing(std::span<const Chunk> chunks);

struct JudgeOptions {
    std::size_t prompt_overhead = 500;
};

/// Asks the judge for entity findings in one batch. Findings citing chunks
/// outside the batch are rejected and reported; missing verdicts count as
/// false and verdicts for unknown conditions are dropped.
JudgeResult judge_batch(const Batch& batch, const QuerySpec& q, const CorpusHandle& corpus, LlmBackend& backend,
                        const JudgeOptions& options = {});
JudgeResult judge_chunks(std::size_t batch_id, std::span<const Chunk> chunks, const QuerySpec& q,
                         LlmBackend& backend, const JudgeOptions& options = {});

struct AnswerEntity {
    std::string canonical;
    std::vector<std::string> surfaces;
    std::vector<std::string> evidence;
    std::map<std::string, bool> verdicts;

    friend bool operator==(const AnswerEntity&, const AnswerEntity&) = default;
};

struct AnswerSet {
    std::string query_id;
    std::vector<AnswerEntity> entities;
    nlohmann::json trail = nlohmann::json::array();

    std::size_t count() const noexcept { return entities.size(); }
    /// Entities and evidence only; the trail is provenance.
    bool same_answer(const AnswerSet& other) const { return entities == other.entities; }
};

nlohmann::json to_json(const AnswerSet& a);
AnswerSet answer_from_json(const nlohmann::json& j);

/// Alias map: canonical key of an alias → canonical key it merges into.
using AliasMap = std::map<std::string, std::string>;

/// Merges findings by canonical key (after alias resolution), unions
/// evidence and surfaces, ORs per-condition verdicts, and keeps the
/// entities whose merged verdicts satisfy the query composition.
AnswerSet align_and_count(const std::vector<EntityFinding>& findings, const QuerySpec& q,
                          const AliasMap& aliases = {});

struct AggregationConfig {
    double lambda = 0.5;
    std::size_t max_context = 8000;
    std::size_t prompt_overhead = 500;
    ClusterConfig cluster;
    std::size_t parallelism = 1;

    /// Usable batch capacity M = max_context − prompt_overhead.
    std::size_t batch_capacity() const;
};

nlohmann::json to_json(const AggregationConfig& c);
AggregationConfig aggregation_config_from_json(const nlohmann::json& j);

struct AggregationStats {
    std::size_t clusters = 0;
    std::size_t batches = 0;
    std::size_t llm_calls = 0;
    std::size_t candidate_pairs = 0;
};

struct AggregationResult {
    AnswerSet answer;
    std::vector<Batch> batches;
    AggregationStats stats;
};

/// Cluster → order → greedy batch → judge (bounded parallelism, merged in
/// ascending batch id) → align.
AggregationResult aggregate_candidates(const CandidateSet& candidates, const CorpusHandle& corpus, const QuerySpec& q,
                                       LlmBackend& judge, EmbeddingProvider& embedder,
                                       const AggregationConfig& config = {}, const AliasMap& aliases = {});

} // namespace aggquery
