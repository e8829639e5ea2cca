#include "aggquery/eval.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "aggquery/disambiguation.hpp"
#include "aggquery/error.hpp"
#include "aggquery/jsonl.hpp"

namespace aggquery {

using nlohmann::json;

GoldQuery gold_from_json(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::Schema, "gold record must be a JSON object");
    std::vector<std::string> missing;
    for (const char* field : {"query_id", "question", "gold_entities", "gold_evidence_chunk_ids"}) {
        if (!j.contains(field)) missing.emplace_back(field);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw Error(ErrorCode::Schema, "gold record missing fields: " + list);
    }
    GoldQuery g;
    try {
        g.query_id = j.at("query_id").get<std::string>();
        g.question = j.at("question").get<std::string>();
        g.entity_type = j.value("entity_type", std::string());
        g.composition = j.value("composition", json::object());
        g.gold_entities = j.at("gold_entities").get<std::vector<std::string>>();
        g.gold_evidence_chunk_ids = j.at("gold_evidence_chunk_ids").get<std::vector<std::string>>();
        if (j.contains("spec")) {
            json spec = j.at("spec");
            if (!spec.contains("query_id")) spec["query_id"] = g.query_id;
            if (!spec.contains("raw_text")) spec["raw_text"] = g.question;
            g.spec = query_from_json(spec);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Schema, "gold record " + g.query_id + ": " + e.what());
    }
    return g;
}

json to_json(const GoldQuery& g) {
    json j = {{"query_id", g.query_id},
              {"question", g.question},
              {"entity_type", g.entity_type},
              {"composition", g.composition},
              {"gold_entities", g.gold_entities},
              {"gold_evidence_chunk_ids", g.gold_evidence_chunk_ids}};
    if (g.spec) j["spec"] = to_json(*g.spec);
    return j;
}

GoldSet read_gold_jsonl(const std::filesystem::path& path) {
    GoldSet out;
    std::set<std::string> seen;
    for (const auto& row : read_jsonl(path)) {
        auto g = gold_from_json(row);
        if (!seen.insert(g.query_id).second) throw Error(ErrorCode::Duplicate, "duplicate gold query_id " + g.query_id);
        out.push_back(std::move(g));
    }
    return out;
}

void validate_gold(const GoldSet& gold, const CorpusHandle& corpus) {
    for (const auto& g : gold) {
        for (const auto& id : g.gold_evidence_chunk_ids) {
            if (!corpus.contains(id)) {
                throw Error(ErrorCode::NotFound, "gold evidence chunk " + id + " of query " + g.query_id +
                                                     " is not in corpus " + corpus.corpus_id());
            }
        }
    }
}

std::size_t ace(std::size_t predicted, std::size_t gold) {
    return predicted > gold ? predicted - gold : gold - predicted;
}

double nace(std::size_t predicted, std::size_t gold, double epsilon) {
    if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "nace epsilon must be positive");
    return static_cast<double>(ace(predicted, gold)) / (static_cast<double>(gold) + epsilon);
}

double chunk_recall(const std::set<std::string>& retained, const std::set<std::string>& gold) {
    if (gold.empty()) throw Error(ErrorCode::InvalidArgument, "chunk recall is undefined for an empty gold evidence set");
    std::size_t hit = 0;
    for (const auto& id : gold) hit += retained.count(id);
    return static_cast<double>(hit) / static_cast<double>(gold.size());
}

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double median_of(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : (xs[n / 2 - 1] + xs[n / 2]) / 2.0;
}

ReportAggregates aggregate_rows(const std::vector<QueryRow>& rows, RecallMode mode) {
    ReportAggregates a;
    std::vector<double> naces, aces, recalls;
    std::size_t hit = 0, total = 0;
    for (const auto& r : rows) {
        if (r.error) {
            ++a.failed;
            continue;
        }
        ++a.evaluated;
        naces.push_back(r.nace);
        aces.push_back(static_cast<double>(r.ace));
        if (r.recall) recalls.push_back(*r.recall);
        hit += r.evidence_retained;
        total += r.evidence_total;
    }
    a.mean_nace = mean_of(naces);
    a.median_nace = median_of(naces);
    a.mean_ace = mean_of(aces);
    if (mode == RecallMode::Macro) {
        a.mean_recall = mean_of(recalls);
    } else {
        a.mean_recall = total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
    }
    return a;
}

json to_json(const QueryRow& r) {
    json j = {{"query_id", r.query_id},
              {"predicted", r.predicted},
              {"gold", r.gold},
              {"ace", r.ace},
              {"nace", r.nace},
              {"recall", r.recall ? json(*r.recall) : json(nullptr)},
              {"evidence_retained", r.evidence_retained},
              {"evidence_total", r.evidence_total},
              {"llm_calls", r.llm_calls}};
    if (r.error) j["error"] = *r.error;
    if (!r.answer.is_null()) j["answer"] = r.answer;
    return j;
}

json to_json(const Report& r) {
    json rows = json::array();
    for (const auto& row : r.rows) rows.push_back(to_json(row));
    return {{"rows", rows},
            {"aggregates",
             {{"mean_nace", r.aggregates.mean_nace},
              {"median_nace", r.aggregates.median_nace},
              {"mean_ace", r.aggregates.mean_ace},
              {"mean_recall", r.aggregates.mean_recall},
              {"evaluated", r.aggregates.evaluated},
              {"failed", r.aggregates.failed}}},
            {"metadata", r.metadata}};
}

json to_json(const PipelineConfig& c) {
    return {{"identity_filter", c.identity_filter},
            {"filter_budget", c.filter_budget},
            {"filter", to_json(c.filter)},
            {"auto_rollback", c.auto_rollback},
            {"aggregation", to_json(c.aggregation)},
            {"aliases", c.aliases},
            {"epsilon", c.epsilon},
            {"recall_mode", c.recall_mode == RecallMode::Macro ? "macro" : "micro"},
            {"query_parallelism", c.query_parallelism}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c;
    if (!j.is_object()) throw Error(ErrorCode::Config, "pipeline config must be a JSON object");
    try {
        c.identity_filter = j.value("identity_filter", c.identity_filter);
        c.filter_budget = j.value("filter_budget", c.filter_budget);
        if (j.contains("filter")) c.filter = filter_config_from_json(j.at("filter"));
        c.auto_rollback = j.value("auto_rollback", c.auto_rollback);
        if (j.contains("aggregation")) c.aggregation = aggregation_config_from_json(j.at("aggregation"));
        c.aliases = j.value("aliases", c.aliases);
        c.epsilon = j.value("epsilon", c.epsilon);
        const std::string mode = j.value("recall_mode", std::string("macro"));
        if (mode == "macro") c.recall_mode = RecallMode::Macro;
        else if (mode == "micro") c.recall_mode = RecallMode::Micro;
        else throw Error(ErrorCode::Config, "recall_mode must be macro or micro, got " + mode);
        c.query_parallelism = j.value("query_parallelism", c.query_parallelism);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Config, std::string("pipeline config: ") + e.what());
    }
    return c;
}

PipelineRun run_query(std::shared_ptr<const CorpusHandle> corpus, const QuerySpec& q, const PipelineBackends& backends,
                      const PipelineConfig& config) {
    if (!corpus) throw Error(ErrorCode::InvalidArgument, "run_query needs a corpus");
    if (backends.judge == nullptr) throw Error(ErrorCode::Config, "run_query needs a judge backend");
    auto embedder = backends.embedder ? backends.embedder : std::make_shared<TrigramHashEmbedder>();

    PipelineRun run;
    run.query = q;
    if (config.identity_filter) {
        for (const auto& c : corpus->chunks()) run.candidates.chunk_ids.push_back(c.chunk_id);
        run.candidates.trail.push_back({{"stage", "filter"}, {"mode", "identity"}});
    } else {
        if (backends.planner == nullptr) throw Error(ErrorCode::Config, "filtering needs a planner backend");
        auto session = open_session(corpus, q, config.filter_budget, config.filter, embedder);
        run.candidates = run_filter_loop(session, *backends.planner, backends.judge, {config.auto_rollback});
    }
    run.aggregation = aggregate_candidates(run.candidates, *corpus, q, *backends.judge, *embedder, config.aggregation,
                                           config.aliases);
    return run;
}

namespace {

QueryRow evaluate_one(const std::shared_ptr<const CorpusHandle>& corpus, const GoldQuery& g,
                      const PipelineBackends& backends, const PipelineConfig& config) {
    QueryRow row;
    row.query_id = g.query_id;
    row.gold = g.y();
    row.evidence_total = g.gold_evidence_chunk_ids.size();
    try {
        const QuerySpec q = g.spec ? *g.spec : parse_query(g.question, backends.parser, g.query_id);
        const auto run = run_query(corpus, q, backends, config);
        row.predicted = run.aggregation.answer.count();
        row.ace = ace(row.predicted, row.gold);
        row.nace = nace(row.predicted, row.gold, config.epsilon);
        const std::set<std::string> retained(run.candidates.chunk_ids.begin(), run.candidates.chunk_ids.end());
        const std::set<std::string> evidence(g.gold_evidence_chunk_ids.begin(), g.gold_evidence_chunk_ids.end());
        for (const auto& id : evidence) row.evidence_retained += retained.count(id);
        row.evidence_total = evidence.size();
        if (!evidence.empty()) row.recall = chunk_recall(retained, evidence);
        row.llm_calls = run.aggregation.stats.llm_calls;
        row.answer = to_json(run.aggregation.answer);
    } catch (const Error& e) {
        row.error = std::string(to_string(e.code())) + ": " + e.what();
    } catch (const std::exception& e) {
        row.error = std::string("internal: ") + e.what();
    }
    return row;
}

} // namespace

Report run_benchmark(std::shared_ptr<const CorpusHandle> corpus, const GoldSet& gold, const PipelineBackends& backends,
                     const PipelineConfig& config) {
    if (!corpus) throw Error(ErrorCode::InvalidArgument, "run_benchmark needs a corpus");
    validate_gold(gold, *corpus);
    std::vector<const GoldQuery*> order;
    for (const auto& g : gold) order.push_back(&g);
    std::sort(order.begin(), order.end(), [](const GoldQuery* a, const GoldQuery* b) { return a->query_id < b->query_id; });

    Report report;
    report.rows.resize(order.size());
    const std::size_t width = std::max<std::size_t>(1, config.query_parallelism);
    for (std::size_t start = 0; start < order.size(); start += width) {
        const std::size_t stop = std::min(order.size(), start + width);
        if (width == 1) {
            report.rows[start] = evaluate_one(corpus, *order[start], backends, config);
            continue;
        }
        std::vector<std::future<QueryRow>> wave;
        for (std::size_t i = start; i < stop; ++i) {
            wave.push_back(std::async(std::launch::async, [&, i] { return evaluate_one(corpus, *order[i], backends, config); }));
        }
        for (std::size_t i = start; i < stop; ++i) report.rows[i] = wave[i - start].get();
    }
    report.aggregates = aggregate_rows(report.rows, config.recall_mode);
    report.metadata = {{"corpus_id", corpus->corpus_id()},
                       {"chunks", corpus->size()},
                       {"queries", gold.size()},
                       {"config", to_json(config)}};
    if (backends.judge != nullptr) report.metadata["judge_usage"] = backends.judge->ledger().to_json();
    if (backends.planner != nullptr && backends.planner != backends.judge) {
        report.metadata["planner_usage"] = backends.planner->ledger().to_json();
    }
    return report;
}

AnswerSet naive_rag_baseline(const CorpusHandle& corpus, const Bm25Index& index, const QuerySpec& q,
                             LlmBackend& judge, const RagOptions& options) {
    if (options.k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    const auto ranked = index.topk(q.raw_text, options.k);
    std::vector<std::string> window;
    for (const auto& [id, _] : ranked) window.push_back(id);
    const auto chunks = get_chunks(corpus, window);

    std::vector<EntityFinding> findings;
    json rejected = json::array();
    std::vector<Chunk> pack;
    std::size_t pack_tokens = 0;
    std::size_t call = 0;
    auto flush = [&] {
        if (pack.empty()) return;
        auto r = judge_chunks(call++, pack, q, judge, options.judge);
        for (auto& f : r.findings) findings.push_back(std::move(f));
        for (auto& x : r.rejected) rejected.push_back(std::move(x));
        pack.clear();
        pack_tokens = 0;
    };
    for (const auto& c : chunks) {
        if (!pack.empty() && pack_tokens + c.token_count > options.batch_capacity) flush();
        pack.push_back(c);
        pack_tokens += c.token_count;
    }
    flush();

    AnswerSet answer = align_and_count(findings, q);
    json ranking = json::array();
    for (const auto& [id, score] : ranked) ranking.push_back({{"chunk_id", id}, {"score", score}});
    answer.trail = {{{"stage", "rank_then_read"},
                     {"k", options.k},
                     {"window", ranking},
                     {"reader_calls", call},
                     {"rejected_findings", rejected}}};
    return answer;
}

std::vector<HistogramBin> score_histogram(const std::vector<double>& scores, std::size_t bins) {
    if (scores.empty() || bins == 0) return {};
    const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *mn, hi = *mx;
    std::vector<HistogramBin> out(bins);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < bins; ++i) {
        out[i].lo = lo + width * static_cast<double>(i);
        out[i].hi = i + 1 == bins ? hi : lo + width * static_cast<double>(i + 1);
    }
    for (double s : scores) {
        std::size_t b = width > 0.0 ? static_cast<std::size_t>((s - lo) / width) : 0;
        ++out[std::min(b, bins - 1)].count;
    }
    return out;
}

ExpansionReport expand_corpus(const Bm25Index& core_index, std::span<const Document> pool, double lo, double hi,
                              std::size_t histogram_bins) {
    if (!(lo <= hi)) throw Error(ErrorCode::InvalidArgument, "expansion interval needs lo <= hi");
    if (core_index.doc_count() == 0) throw Error(ErrorCode::InvalidArgument, "core index is empty");
    ExpansionReport report;
    std::vector<double> scores;
    for (const auto& doc : pool) {
        ExpansionRow row;
        row.doc_id = doc.doc_id;
        const auto top = core_index.topk(doc.text, 1);
        if (!top.empty()) {
            row.top1_chunk = top.front().first;
            row.top1_score = top.front().second;
        }
        row.kept = row.top1_score >= lo && row.top1_score <= hi;
        if (row.kept) report.kept.push_back(doc);
        scores.push_back(row.top1_score);
        report.rows.push_back(std::move(row));
    }
    report.histogram = score_histogram(scores, histogram_bins);
    return report;
}

json to_json(const ExpansionReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"doc_id", row.doc_id},
                        {"top1_score", row.top1_score},
                        {"top1_chunk", row.top1_chunk},
                        {"kept", row.kept}});
    }
    json hist = json::array();
    for (const auto& b : r.histogram) hist.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}});
    json kept = json::array();
    for (const auto& d : r.kept) kept.push_back(d.doc_id);
    return {{"rows", rows}, {"kept_doc_ids", kept}, {"histogram", hist}};
}

} // namespace aggquery
