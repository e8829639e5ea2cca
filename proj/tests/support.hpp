// Shared fixtures and independent reference implementations for the tests
// and the acceptance runner. Nothing here calls into the library code it is
// used to check.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "aggquery/aggregate.hpp"
#include "aggquery/corpus.hpp"
#include "aggquery/llm.hpp"
#include "aggquery/query.hpp"

namespace testkit {

using nlohmann::json;

inline std::shared_ptr<const aggquery::CorpusHandle> make_corpus(
    const std::vector<std::pair<std::string, std::string>>& docs, aggquery::ChunkPolicy policy = {512, 0},
    const std::string& corpus_id = "toy") {
    std::vector<aggquery::Document> records;
    for (const auto& [id, text] : docs) records.push_back({id, text, {}});
    return std::make_shared<const aggquery::CorpusHandle>(aggquery::ingest_documents(records, policy, corpus_id));
}

inline aggquery::QuerySpec make_query(const std::string& id, const std::string& question, const std::string& entity,
                                      const std::vector<std::string>& conditions, bool use_or = false) {
    aggquery::QuerySpec q;
    q.query_id = id;
    q.raw_text = question;
    q.original_text = question;
    q.entity_type = entity;
    std::vector<aggquery::Composition> leaves;
    for (std::size_t i = 0; i < conditions.size(); ++i) {
        const std::string cid = "c" + std::to_string(i + 1);
        q.conditions.push_back({cid, conditions[i], {}});
        leaves.push_back(aggquery::Composition::leaf(cid));
    }
    if (leaves.size() == 1) q.composition = leaves.front();
    else q.composition = use_or ? aggquery::Composition::any_of(leaves) : aggquery::Composition::all_of(leaves);
    return q;
}

/// What the scripted judge "reads" in one chunk.
struct ChunkFinding {
    std::string entity;
    std::map<std::string, bool> verdicts;
};

using JudgeTable = std::map<std::string, std::vector<ChunkFinding>>;

inline std::vector<std::string> chunk_ids_in_prompt(const aggquery::CompletionRequest& req) {
    static const std::regex tag(R"re(<chunk id="([^"]+)">)re");
    std::vector<std::string> ids;
    for (const auto& m : req.messages) {
        if (m.role == "system") continue;  // instructions quote the tag format
        for (std::sregex_iterator it(m.content.begin(), m.content.end(), tag), end; it != end; ++it) {
            ids.push_back((*it)[1].str());
        }
    }
    return ids;
}

/// Judge that answers each chunk of a batch from a per-chunk table, so the
/// response for any batch is the concatenation of per-chunk responses.
inline std::shared_ptr<aggquery::CallbackBackend> per_chunk_judge(JudgeTable table, std::size_t context_limit = 8000) {
    return std::make_shared<aggquery::CallbackBackend>(
        [table = std::move(table)](const aggquery::CompletionRequest& req) {
            json findings = json::array();
            for (const auto& id : chunk_ids_in_prompt(req)) {
                auto it = table.find(id);
                if (it == table.end()) continue;
                for (const auto& f : it->second) {
                    findings.push_back({{"entity", f.entity}, {"chunk_ids", {id}}, {"verdicts", f.verdicts}});
                }
            }
            if (req.purpose == aggquery::Purpose::Probe) return json{{"relevant_chunk_ids", json::array()}}.dump();
            return json{{"findings", findings}}.dump();
        },
        nullptr, context_limit);
}

// ---- Reference implementations -------------------------------------------

inline std::string ref_canonical(const std::string& s) {
    std::string lowered;
    bool space = false;
    for (unsigned char ch : s) {
        if (std::isspace(ch)) {
            space = true;
            continue;
        }
        if (space && !lowered.empty()) lowered += ' ';
        space = false;
        lowered += static_cast<char>(std::tolower(ch));
    }
    std::size_t b = 0, e = lowered.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(lowered[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(lowered[e - 1]))) --e;
    return lowered.substr(b, e - b);
}

inline bool ref_evaluate(const aggquery::Composition& c, const std::map<std::string, bool>& v) {
    using Op = aggquery::Composition::Op;
    if (c.op == Op::Leaf) {
        auto it = v.find(c.condition_id);
        return it != v.end() && it->second;
    }
    if (c.op == Op::And) {
        for (const auto& ch : c.children) {
            if (!ref_evaluate(ch, v)) return false;
        }
        return true;
    }
    for (const auto& ch : c.children) {
        if (ref_evaluate(ch, v)) return true;
    }
    return false;
}

struct RefEntity {
    std::set<std::string> evidence;
    std::map<std::string, bool> verdicts;
};

/// Judge every candidate chunk on its own, union the findings, merge
/// duplicates by canonical name, keep the entities whose merged verdicts
/// satisfy the composition.
inline std::map<std::string, RefEntity> brute_force_union(const JudgeTable& table, const aggquery::QuerySpec& q,
                                                          const std::vector<std::string>& candidates) {
    std::map<std::string, RefEntity> merged;
    for (const auto& id : candidates) {
        auto it = table.find(id);
        if (it == table.end()) continue;
        for (const auto& f : it->second) {
            auto& e = merged[ref_canonical(f.entity)];
            e.evidence.insert(id);
            for (const auto& [cid, v] : f.verdicts) e.verdicts[cid] = e.verdicts[cid] || v;
        }
    }
    std::map<std::string, RefEntity> out;
    for (auto& [k, e] : merged) {
        if (ref_evaluate(q.composition, e.verdicts)) out[k] = e;
    }
    return out;
}

inline bool answer_matches(const aggquery::AnswerSet& a, const std::map<std::string, RefEntity>& expected) {
    if (a.count() != expected.size() || a.entities.size() != expected.size()) return false;
    for (const auto& e : a.entities) {
        auto it = expected.find(e.canonical);
        if (it == expected.end()) return false;
        const std::set<std::string> got(e.evidence.begin(), e.evidence.end());
        if (got != it->second.evidence || got.size() != e.evidence.size()) return false;
    }
    return true;
}

/// Lowercase alphanumeric runs; enough for ASCII toy corpora.
inline std::vector<std::string> ref_terms(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char ch : s) {
        if (std::isalnum(ch)) {
            cur += static_cast<char>(std::tolower(ch));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

/// Okapi BM25 written straight from the textbook definition.
inline std::vector<double> ref_bm25(const std::vector<std::string>& docs, const std::string& query, double k1 = 1.2,
                                    double b = 0.75) {
    const double n = static_cast<double>(docs.size());
    std::vector<std::vector<std::string>> toks;
    double total = 0;
    for (const auto& d : docs) {
        toks.push_back(ref_terms(d));
        total += static_cast<double>(toks.back().size());
    }
    const double avgdl = total / n;
    std::vector<double> scores(docs.size(), 0.0);
    for (const auto& term : ref_terms(query)) {
        double df = 0;
        for (const auto& t : toks) df += std::count(t.begin(), t.end(), term) > 0 ? 1 : 0;
        const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
        for (std::size_t i = 0; i < docs.size(); ++i) {
            const double f = static_cast<double>(std::count(toks[i].begin(), toks[i].end(), term));
            const double dl = static_cast<double>(toks[i].size());
            scores[i] += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * dl / avgdl));
        }
    }
    return scores;
}

inline std::size_t ref_levenshtein(const std::string& a, const std::string& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
    }
    return d[a.size()][b.size()];
}

inline std::uint64_t ref_fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---- Greedy batching replayer ---------------------------------------------

struct RefCluster {
    std::string id;
    std::vector<std::pair<std::string, std::size_t>> members;
    std::vector<double> centroid;
};

struct RefBatch {
    std::vector<std::string> cluster_ids;
    std::vector<double> centroid;
    std::size_t tokens = 0;
};

inline double ref_cos(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Straight transcription of the greedy cluster batching procedure.
inline std::vector<RefBatch> ref_greedy(const std::vector<RefCluster>& clusters, std::size_t M, double lambda) {
    std::vector<RefBatch> batches;
    for (const auto& k : clusters) {
        std::size_t tk = 0;
        for (const auto& m : k.members) tk += m.second;
        if (tk > M) {
            // First-fit split in member order; each piece is a new batch.
            std::size_t piece = 0, used = 0;
            RefBatch cur;
            for (const auto& m : k.members) {
                if (used + m.second > M) {
                    cur.cluster_ids.push_back(k.id + "." + std::to_string(piece++));
                    cur.centroid = k.centroid;
                    cur.tokens = used;
                    batches.push_back(cur);
                    cur = {};
                    used = 0;
                }
                used += m.second;
            }
            cur.cluster_ids.push_back(k.id + "." + std::to_string(piece));
            cur.centroid = k.centroid;
            cur.tokens = used;
            batches.push_back(cur);
            continue;
        }
        int best = -1;
        double best_s = 0;
        for (std::size_t i = 0; i < batches.size(); ++i) {
            if (batches[i].tokens + tk > M) continue;
            const double s = lambda * ref_cos(k.centroid, batches[i].centroid) +
                             (1 - lambda) * static_cast<double>(batches[i].tokens + tk) / static_cast<double>(M);
            if (best < 0 || s > best_s) {
                best = static_cast<int>(i);
                best_s = s;
            }
        }
        if (best < 0) {
            batches.push_back({{k.id}, k.centroid, tk});
        } else {
            auto& b = batches[static_cast<std::size_t>(best)];
            for (std::size_t d = 0; d < b.centroid.size(); ++d) {
                b.centroid[d] = (static_cast<double>(b.tokens) * b.centroid[d] + static_cast<double>(tk) * k.centroid[d]) /
                                static_cast<double>(b.tokens + tk);
            }
            b.tokens += tk;
            b.cluster_ids.push_back(k.id);
        }
    }
    return batches;
}

inline std::vector<aggquery::Cluster> to_clusters(const std::vector<RefCluster>& in) {
    std::vector<aggquery::Cluster> out;
    for (const auto& r : in) {
        aggquery::Cluster c;
        c.id = r.id;
        c.centroid = r.centroid;
        for (const auto& [id, t] : r.members) c.members.push_back({id, t});
        out.push_back(std::move(c));
    }
    return out;
}

/// Random cluster set: up to `max_clusters` clusters with 1-6 members of
/// 1-60 tokens and non-negative centroids in `dim` dimensions.
inline std::vector<RefCluster> random_clusters(std::mt19937_64& rng, std::size_t max_clusters, std::size_t dim) {
    std::uniform_int_distribution<std::size_t> count(1, max_clusters), members(1, 6), tokens(1, 60);
    std::uniform_real_distribution<double> coord(0.0, 1.0);
    std::vector<RefCluster> out;
    const std::size_t n = count(rng);
    for (std::size_t i = 0; i < n; ++i) {
        RefCluster c;
        c.id = "k" + std::to_string(1000 + i);
        const std::size_t m = members(rng);
        for (std::size_t j = 0; j < m; ++j) c.members.push_back({c.id + "-" + std::to_string(j), tokens(rng)});
        for (std::size_t d = 0; d < dim; ++d) c.centroid.push_back(coord(rng));
        out.push_back(std::move(c));
    }
    std::stable_sort(out.begin(), out.end(), [](const RefCluster& a, const RefCluster& b) {
        std::size_t ta = 0, tb = 0;
        for (const auto& m : a.members) ta += m.second;
        for (const auto& m : b.members) tb += m.second;
        return ta > tb;
    });
    return out;
}

/// Token-weighted mean of a batch's member centroids, computed directly.
inline std::vector<double> direct_centroid(const aggquery::Batch& b) {
    std::vector<double> acc(b.centroid.size(), 0.0);
    double total = 0;
    for (const auto& c : b.clusters) {
        const double t = static_cast<double>(c.tokens());
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += t * c.centroid[d];
        total += t;
    }
    for (auto& x : acc) x /= total;
    return acc;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("aggquery-test-" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace testkit
