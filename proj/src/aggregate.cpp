#include "aggquery/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <numeric>
#include <random>

#include "aggquery/error.hpp"
#include "aggquery/text.hpp"

namespace aggquery {

using nlohmann::json;

std::size_t Cluster::tokens() const noexcept {
    std::size_t t = 0;
    for (const auto& m : members) t += m.tokens;
    return t;
}

std::vector<std::string> Batch::chunk_ids() const {
    std::vector<std::string> out;
    for (const auto& c : clusters) {
        for (const auto& m : c.members) out.push_back(m.chunk_id);
    }
    return out;
}

double CandidateFeatures::similarity(std::size_t i, std::size_t j) const {
    const auto& a = rows[i];
    const auto& b = rows[j];
    double dot = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
    return dot;
}

CandidateFeatures candidate_features(std::span<const Chunk> chunks, EmbeddingProvider& embedder,
                                     const ClusterConfig& config) {
    if (chunks.empty()) throw Error(ErrorCode::InvalidArgument, "no candidate chunks to featurise");
    if (config.tfidf_weight < 0.0 || config.embedding_weight < 0.0) {
        throw Error(ErrorCode::InvalidArgument, "feature weights must be non-negative");
    }
    CandidateFeatures f;
    const auto tfidf = tfidf_features(chunks);
    std::vector<std::string> texts;
    for (const auto& c : chunks) texts.push_back(c.text);
    std::vector<FeatureVector> emb;
    if (config.embedding_weight > 0.0) emb = embed_texts(texts, embedder);
    const double wt = std::sqrt(config.tfidf_weight);
    const double we = std::sqrt(config.embedding_weight);
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        f.chunk_ids.push_back(chunks[i].chunk_id);
        f.tokens.push_back(chunks[i].token_count);
        std::vector<double> row;
        if (config.tfidf_weight > 0.0) {
            for (double x : tfidf.vectors.at(chunks[i].chunk_id).values) row.push_back(wt * x);
        }
        if (config.embedding_weight > 0.0) {
            auto e = emb[i].values;
            l2_normalize(e);
            for (double x : e) row.push_back(we * x);
        }
        f.rows.push_back(std::move(row));
    }
    return f;
}

namespace {

struct DisjointSet {
    std::vector<std::size_t> parent;
    explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

std::vector<std::vector<std::size_t>> groups_from(DisjointSet& ds, std::size_t n) {
    std::map<std::size_t, std::vector<std::size_t>> by_root;
    for (std::size_t i = 0; i < n; ++i) by_root[ds.find(i)].push_back(i);
    std::vector<std::vector<std::size_t>> out;
    for (auto& [_, g] : by_root) out.push_back(std::move(g));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return out;
}

std::string cluster_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "k%04zu", i);
    return buf;
}

std::vector<double> weighted_mean(const std::vector<double>& a, double wa, const std::vector<double>& b, double wb) {
    std::vector<double> out(a.size());
    const double total = wa + wb;
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (wa / total) * a[i] + (wb / total) * b[i];
    return out;
}

} // namespace

std::vector<std::vector<std::size_t>> single_link_groups(const std::vector<std::vector<double>>& similarity,
                                                         double threshold) {
    const std::size_t n = similarity.size();
    DisjointSet ds(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (similarity[i][j] >= threshold) ds.unite(i, j);
        }
    }
    return groups_from(ds, n);
}

std::vector<Cluster> cluster_candidates(const CandidateFeatures& features, double threshold) {
    if (features.rows.empty()) throw Error(ErrorCode::InvalidArgument, "no candidates to cluster");
    if (!(threshold > 0.0 && threshold <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "cluster threshold must be in (0, 1]");
    }
    const std::size_t n = features.rows.size();
    DisjointSet ds(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (features.similarity(i, j) >= threshold) ds.unite(i, j);
        }
    }
    std::vector<Cluster> out;
    for (const auto& group : groups_from(ds, n)) {
        Cluster c;
        c.id = cluster_name(out.size());
        const std::size_t dim = features.rows[group.front()].size();
        c.centroid.assign(dim, 0.0);
        double weight = 0.0;
        for (std::size_t idx : group) {
            c.members.push_back({features.chunk_ids[idx], features.tokens[idx]});
            weight += static_cast<double>(features.tokens[idx]);
        }
        for (std::size_t idx : group) {
            const double w = weight > 0.0 ? static_cast<double>(features.tokens[idx]) / weight
                                          : 1.0 / static_cast<double>(group.size());
            for (std::size_t k = 0; k < dim; ++k) c.centroid[k] += w * features.rows[idx][k];
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Cluster> cluster_candidates(std::span<const Chunk> chunks, EmbeddingProvider& embedder,
                                        const ClusterConfig& config) {
    return cluster_candidates(candidate_features(chunks, embedder, config), config.threshold);
}

std::vector<Cluster> split_cluster(const Cluster& cluster, std::size_t max_context) {
    if (cluster.members.empty()) return {};
    if (cluster.tokens() <= max_context) return {cluster};
    std::vector<Cluster> pieces;
    Cluster cur;
    std::size_t cur_tokens = 0;
    auto flush = [&] {
        if (cur.members.empty()) return;
        cur.id = cluster.id + "." + std::to_string(pieces.size());
        cur.centroid = cluster.centroid;
        pieces.push_back(std::move(cur));
        cur = Cluster{};
        cur_tokens = 0;
    };
    for (const auto& m : cluster.members) {
        if (m.tokens > max_context) {
            throw Error(ErrorCode::InvalidArgument, "chunk " + m.chunk_id + " has " + std::to_string(m.tokens) +
                                                        " tokens and cannot fit a context of " +
                                                        std::to_string(max_context));
        }
        if (cur_tokens + m.tokens > max_context) flush();
        cur.members.push_back(m);
        cur_tokens += m.tokens;
    }
    flush();
    return pieces;
}

double merge_score(const Cluster& cluster, const Batch& batch, double lambda, std::size_t max_context) {
    const double similarity = cosine_sim(cluster.centroid, batch.centroid);
    const double utilisation =
        static_cast<double>(batch.tokens + cluster.tokens()) / static_cast<double>(max_context);
    return lambda * similarity + (1.0 - lambda) * utilisation;
}

std::vector<Cluster> order_for_batching(std::vector<Cluster> clusters) {
    std::sort(clusters.begin(), clusters.end(), [](const Cluster& a, const Cluster& b) {
        const auto ta = a.tokens(), tb = b.tokens();
        if (ta != tb) return ta > tb;
        return a.id < b.id;
    });
    return clusters;
}

namespace {

Batch open_batch(std::vector<Batch>& batches, Cluster cluster, std::vector<double> centroid, std::size_t max_context) {
    Batch b;
    b.id = batches.size();
    b.tokens = cluster.tokens();
    b.centroid = std::move(centroid);
    b.max_context = max_context;
    b.clusters.push_back(std::move(cluster));
    return b;
}

} // namespace

std::vector<Batch> greedy_batch(const std::vector<Cluster>& clusters, std::size_t max_context, double lambda) {
    if (max_context == 0) throw Error(ErrorCode::InvalidArgument, "max context must be >= 1");
    if (lambda < 0.0 || lambda > 1.0) throw Error(ErrorCode::InvalidArgument, "lambda must be in [0, 1]");
    std::vector<Batch> batches;
    for (const auto& k : clusters) {
        if (k.members.empty()) continue;
        const std::size_t tk = k.tokens();
        if (tk > max_context) {
            for (auto& piece : split_cluster(k, max_context)) {
                auto centroid = k.centroid;
                batches.push_back(open_batch(batches, std::move(piece), std::move(centroid), max_context));
            }
            continue;
        }
        std::optional<std::size_t> best;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q < batches.size(); ++q) {
            if (batches[q].tokens + tk > max_context) continue;
            const double s = merge_score(k, batches[q], lambda, max_context);
            if (s > best_score) {
                best_score = s;
                best = q;
            }
        }
        if (best) {
            Batch& b = batches[*best];
            b.centroid = weighted_mean(b.centroid, static_cast<double>(b.tokens), k.centroid, static_cast<double>(tk));
            b.tokens += tk;
            b.clusters.push_back(k);
        } else {
            batches.push_back(open_batch(batches, k, k.centroid, max_context));
        }
    }
    return batches;
}

std::vector<Batch> unmerged_batches(const std::vector<Cluster>& clusters, std::size_t max_context) {
    std::vector<Batch> batches;
    for (const auto& k : clusters) {
        for (auto& piece : split_cluster(k, max_context)) {
            auto centroid = piece.centroid;
            batches.push_back(open_batch(batches, std::move(piece), std::move(centroid), max_context));
        }
    }
    return batches;
}

std::vector<Batch> random_batches(const CandidateFeatures& features, std::size_t max_context, std::uint64_t seed) {
    std::vector<std::size_t> order(features.chunk_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<Batch> batches;
    for (std::size_t idx : order) {
        const std::size_t t = features.tokens[idx];
        if (t > max_context) {
            throw Error(ErrorCode::InvalidArgument, "chunk " + features.chunk_ids[idx] + " exceeds max context");
        }
        Cluster single{features.chunk_ids[idx], {{features.chunk_ids[idx], t}}, features.rows[idx]};
        if (batches.empty() || batches.back().tokens + t > max_context) {
            batches.push_back(open_batch(batches, std::move(single), features.rows[idx], max_context));
        } else {
            Batch& b = batches.back();
            b.centroid = weighted_mean(b.centroid, static_cast<double>(b.tokens), single.centroid, static_cast<double>(t));
            b.tokens += t;
            b.clusters.push_back(std::move(single));
        }
    }
    return batches;
}

std::size_t candidate_pair_count(const std::vector<Batch>& batches, const CandidateFeatures& features,
                                 double threshold) {
    std::map<std::string, std::size_t> batch_of;
    for (const auto& b : batches) {
        for (const auto& id : b.chunk_ids()) batch_of[id] = b.id;
    }
    std::size_t pairs = 0;
    const std::size_t n = features.chunk_ids.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (batch_of.at(features.chunk_ids[i]) == batch_of.at(features.chunk_ids[j])) continue;
            if (features.similarity(i, j) >= threshold) ++pairs;
        }
    }
    return pairs;
}

json to_json(const EntityFinding& f) {
    return {{"surface", f.surface},     {"canonical", f.canonical}, {"chunk_ids", f.chunk_ids},
            {"verdicts", f.verdicts},   {"batch_id", f.batch_id}};
}

std::string judge_script_key(const std::string& query_id, std::vector<std::string> chunk_ids) {
    std::sort(chunk_ids.begin(), chunk_ids.end());
    std::uint64_t h = text::fnv1a64("judge");
    h = text::fnv1a64(query_id, h);
    for (const auto& id : chunk_ids) {
        h = text::fnv1a64(std::string_view("\x1f", 1), h);
        h = text::fnv1a64(id, h);
    }
    return "judge:" + text::hex64(h);
}

std::string render_chunk_listing(std::span<const Chunk> chunks) {
    std::string out;
    for (const auto& c : chunks) out += "<chunk id=\"" + c.chunk_id + "\">\n" + c.text + "\n</chunk>\n";
    return out;
}

namespace {

std::string render_conditions(const QuerySpec& q) {
    std::string out;
    for (const auto& c : q.conditions) {
        out += "- " + c.id + ": " + c.text;
        for (const auto& r : c.constraints) out += " [" + r.text + "]";
        out += "\n";
    }
    for (const auto& r : q.query_constraints) out += "- (whole query) " + r.text + "\n";
    return out;
}

} // namespace

JudgeResult judge_chunks(std::size_t batch_id, std::span<const Chunk> chunks, const QuerySpec& q,
                         LlmBackend& backend, const JudgeOptions& options) {
    JudgeResult result;
    if (chunks.empty()) return result;
    std::size_t tokens = 0;
    std::vector<std::string> ids;
    for (const auto& c : chunks) {
        tokens += c.token_count;
        ids.push_back(c.chunk_id);
    }
    if (tokens + options.prompt_overhead > backend.context_limit()) {
        throw Error(ErrorCode::InvalidArgument, "batch " + std::to_string(batch_id) + " needs " +
                                                    std::to_string(tokens + options.prompt_overhead) +
                                                    " tokens but the judge context is " +
                                                    std::to_string(backend.context_limit()));
    }
    CompletionRequest req;
    req.purpose = Purpose::Judge;
    req.script_key = judge_script_key(q.query_id, ids);
    req.messages = {{"system", PromptLibrary::instance().raw("judge_system.txt")},
                    {"user", PromptLibrary::instance().render("judge_user.txt",
                                                              {{"question", q.raw_text},
                                                               {"entity_type", q.entity_type},
                                                               {"conditions", render_conditions(q)},
                                                               {"chunks", render_chunk_listing(chunks)}})}};
    const auto reply = backend.complete(req);
    const json j = parse_json_response(reply.text, "judge_batch");
    const json* list = nullptr;
    if (j.is_array()) list = &j;
    else if (j.is_object() && j.contains("findings") && j.at("findings").is_array()) list = &j.at("findings");
    if (list == nullptr) throw Error(ErrorCode::Parse, "judge_batch: response lacks a findings list", reply.text);

    const std::set<std::string> in_batch(ids.begin(), ids.end());
    for (const auto& row : *list) {
        auto reject = [&](const std::string& reason) { result.rejected.push_back({{"finding", row}, {"reason", reason}}); };
        if (!row.is_object() || !row.contains("entity") || !row.at("entity").is_string()) {
            reject("finding without an entity name");
            continue;
        }
        EntityFinding f;
        f.surface = text::trim(row.at("entity").get<std::string>());
        f.canonical = text::canonical_key(f.surface);
        f.batch_id = batch_id;
        if (f.canonical.empty()) {
            reject("entity name is empty after normalisation");
            continue;
        }
        bool foreign = false;
        for (const auto& id : row.value("chunk_ids", json::array())) {
            if (!id.is_string() || !in_batch.count(id.get<std::string>())) {
                foreign = true;
                break;
            }
            f.chunk_ids.push_back(id.get<std::string>());
        }
        if (foreign) {
            reject("cites a chunk outside the batch");
            continue;
        }
        if (f.chunk_ids.empty()) {
            reject("no supporting chunk cited");
            continue;
        }
        std::sort(f.chunk_ids.begin(), f.chunk_ids.end());
        f.chunk_ids.erase(std::unique(f.chunk_ids.begin(), f.chunk_ids.end()), f.chunk_ids.end());
        for (const auto& c : q.conditions) f.verdicts[c.id] = false;
        if (row.contains("verdicts") && row.at("verdicts").is_object()) {
            for (const auto& [cid, v] : row.at("verdicts").items()) {
                if (q.find_condition(cid) != nullptr && v.is_boolean()) f.verdicts[cid] = v.get<bool>();
            }
        }
        result.findings.push_back(std::move(f));
    }
    return result;
}

JudgeResult judge_batch(const Batch& batch, const QuerySpec& q, const CorpusHandle& corpus, LlmBackend& backend,
                        const JudgeOptions& options) {
    const auto ids = batch.chunk_ids();
    const auto chunks = get_chunks(corpus, ids);
    return judge_chunks(batch.id, chunks, q, backend, options);
}

AnswerSet align_and_count(const std::vector<EntityFinding>& findings, const QuerySpec& q, const AliasMap& aliases) {
    struct Merged {
        std::set<std::string> surfaces;
        std::set<std::string> evidence;
        std::map<std::string, bool> verdicts;
    };
    std::map<std::string, Merged> merged;
    for (const auto& f : findings) {
        std::string key = f.canonical.empty() ? text::canonical_key(f.surface) : f.canonical;
        if (auto it = aliases.find(key); it != aliases.end()) key = text::canonical_key(it->second);
        auto& m = merged[key];
        m.surfaces.insert(f.surface);
        m.evidence.insert(f.chunk_ids.begin(), f.chunk_ids.end());
        for (const auto& [cid, v] : f.verdicts) m.verdicts[cid] = m.verdicts[cid] || v;
    }
    AnswerSet out;
    out.query_id = q.query_id;
    for (auto& [key, m] : merged) {
        if (!q.composition.evaluate(m.verdicts)) continue;
        out.entities.push_back({key, {m.surfaces.begin(), m.surfaces.end()}, {m.evidence.begin(), m.evidence.end()},
                                m.verdicts});
    }
    return out;
}

json to_json(const AnswerSet& a) {
    json ents = json::array();
    for (const auto& e : a.entities) {
        ents.push_back({{"canonical", e.canonical},
                        {"surfaces", e.surfaces},
                        {"evidence_chunk_ids", e.evidence},
                        {"verdicts", e.verdicts}});
    }
    return {{"query_id", a.query_id}, {"count", a.count()}, {"entities", ents}, {"trail", a.trail}};
}

AnswerSet answer_from_json(const json& j) {
    AnswerSet a;
    a.query_id = j.at("query_id").get<std::string>();
    for (const auto& e : j.at("entities")) {
        a.entities.push_back({e.at("canonical").get<std::string>(), e.at("surfaces").get<std::vector<std::string>>(),
                              e.at("evidence_chunk_ids").get<std::vector<std::string>>(),
                              e.value("verdicts", std::map<std::string, bool>{})});
    }
    a.trail = j.value("trail", json::array());
    if (j.contains("count") && j.at("count").get<std::size_t>() != a.entities.size()) {
        throw Error(ErrorCode::Schema, "answer set count does not match its entity list");
    }
    return a;
}

std::size_t AggregationConfig::batch_capacity() const {
    if (prompt_overhead >= max_context) {
        throw Error(ErrorCode::Config, "prompt overhead leaves no room in the judge context");
    }
    return max_context - prompt_overhead;
}

json to_json(const AggregationConfig& c) {
    return {{"lambda", c.lambda},
            {"max_context", c.max_context},
            {"prompt_overhead", c.prompt_overhead},
            {"tfidf_weight", c.cluster.tfidf_weight},
            {"embedding_weight", c.cluster.embedding_weight},
            {"cluster_threshold", c.cluster.threshold},
            {"parallelism", c.parallelism}};
}

AggregationConfig aggregation_config_from_json(const json& j) {
    AggregationConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.max_context = j.value("max_context", c.max_context);
    c.prompt_overhead = j.value("prompt_overhead", c.prompt_overhead);
    c.cluster.tfidf_weight = j.value("tfidf_weight", c.cluster.tfidf_weight);
    c.cluster.embedding_weight = j.value("embedding_weight", c.cluster.embedding_weight);
    c.cluster.threshold = j.value("cluster_threshold", c.cluster.threshold);
    c.parallelism = j.value("parallelism", c.parallelism);
    return c;
}

AggregationResult aggregate_candidates(const CandidateSet& candidates, const CorpusHandle& corpus, const QuerySpec& q,
                                       LlmBackend& judge, EmbeddingProvider& embedder,
                                       const AggregationConfig& config, const AliasMap& aliases) {
    AggregationResult result;
    result.answer.query_id = q.query_id;
    if (candidates.chunk_ids.empty()) {
        result.answer.trail = {{{"stage", "aggregate"}, {"candidates", 0}}};
        return result;
    }
    const std::size_t capacity = config.batch_capacity();
    const auto chunks = get_chunks(corpus, candidates.chunk_ids);
    const auto features = candidate_features(chunks, embedder, config.cluster);
    const auto clusters = cluster_candidates(features, config.cluster.threshold);
    result.batches = greedy_batch(order_for_batching(clusters), capacity, config.lambda);

    const JudgeOptions options{config.prompt_overhead};
    std::vector<JudgeResult> judged(result.batches.size());
    const std::size_t width = std::max<std::size_t>(config.parallelism, 1);
    for (std::size_t start = 0; start < result.batches.size(); start += width) {
        const std::size_t stop = std::min(result.batches.size(), start + width);
        if (width == 1) {
            judged[start] = judge_batch(result.batches[start], q, corpus, judge, options);
            continue;
        }
        std::vector<std::future<JudgeResult>> wave;
        for (std::size_t b = start; b < stop; ++b) {
            wave.push_back(std::async(std::launch::async, [&, b] {
                return judge_batch(result.batches[b], q, corpus, judge, options);
            }));
        }
        for (std::size_t b = start; b < stop; ++b) judged[b] = wave[b - start].get();
    }

    std::vector<EntityFinding> findings;
    json rejected = json::array();
    for (auto& jr : judged) {
        for (auto& f : jr.findings) findings.push_back(std::move(f));
        for (auto& r : jr.rejected) rejected.push_back(std::move(r));
    }
    result.answer = align_and_count(findings, q, aliases);

    result.stats.clusters = clusters.size();
    result.stats.batches = result.batches.size();
    result.stats.llm_calls = result.batches.size();
    result.stats.candidate_pairs = candidate_pair_count(result.batches, features, config.cluster.threshold);

    json batch_rows = json::array();
    for (const auto& b : result.batches) {
        batch_rows.push_back({{"batch_id", b.id}, {"tokens", b.tokens}, {"chunk_ids", b.chunk_ids()}});
    }
    result.answer.trail = candidates.trail;
    result.answer.trail.push_back({{"stage", "aggregate"},
                                   {"candidates", candidates.chunk_ids.size()},
                                   {"clusters", clusters.size()},
                                   {"batches", batch_rows},
                                   {"candidate_pairs", result.stats.candidate_pairs},
                                   {"rejected_findings", rejected},
                                   {"config", to_json(config)}});
    return result;
}

} // namespace aggquery
