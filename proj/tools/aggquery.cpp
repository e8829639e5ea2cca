#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"

#include "aggquery/aggregate.hpp"
#include "aggquery/corpus.hpp"
#include "aggquery/disambiguation.hpp"
#include "aggquery/error.hpp"
#include "aggquery/eval.hpp"
#include "aggquery/filter.hpp"
#include "aggquery/jsonl.hpp"
#include "aggquery/llm.hpp"
#include "aggquery/service.hpp"
#include "aggquery/text_index.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aggquery;

namespace {

void emit(const json& j, const std::string& out) {
    const std::string text = j.dump(2) + "\n";
    if (out.empty() || out == "-") std::cout << text;
    else write_text_file(out, text);
}

std::shared_ptr<const CorpusHandle> load_corpus(const std::string& dir) {
    return std::make_shared<const CorpusHandle>(CorpusHandle::load(dir));
}

std::shared_ptr<LlmBackend> scripted_from(const std::string& script) {
    if (script.empty()) return nullptr;
    return make_backend({{"kind", "scripted"}, {"script", script}});
}

std::shared_ptr<LlmBackend> backend_from(const json& config, const std::string& key, const fs::path& base) {
    if (!config.contains(key) || config.at(key).is_null()) return nullptr;
    return make_backend(config.at(key), base);
}

QuerySpec load_query(const std::string& path) {
    const json j = read_json_file(path);
    if (j.contains("conditions")) return query_from_json(j);
    return parse_query(j.at("question").get<std::string>(), nullptr, j.value("query_id", std::string("q")));
}

struct ServiceSetup {
    std::vector<std::string> corpora;
    std::string config;
    std::string state_dir;
};

std::unique_ptr<QueryService> make_service(const ServiceSetup& setup) {
    json config = json::object();
    fs::path base = ".";
    if (!setup.config.empty()) {
        config = read_json_file(setup.config);
        base = fs::path(setup.config).parent_path();
    }
    ServiceConfig sc;
    const json svc = config.value("service", json::object());
    sc.filter_budget = svc.value("filter_budget", sc.filter_budget);
    sc.probe_on_step = svc.value("probe_on_step", sc.probe_on_step);
    if (svc.contains("filter")) sc.filter = filter_config_from_json(svc.at("filter"));
    if (svc.contains("aggregation")) sc.aggregation = aggregation_config_from_json(svc.at("aggregation"));
    sc.aliases = svc.value("aliases", sc.aliases);
    if (svc.value("rewrite_mode", std::string("guided")) == "direct") sc.rewrite_mode = RewriteMode::Direct;
    if (!setup.state_dir.empty()) sc.persist_dir = setup.state_dir;

    ServiceBackends backends;
    backends.assistant = backend_from(config, "assistant", base);
    backends.planner = backend_from(config, "planner", base);
    backends.judge = backend_from(config, "judge", base);

    auto service = std::make_unique<QueryService>(sc, backends);
    for (const auto& dir : setup.corpora) service->add_corpus(load_corpus(dir));
    service->load_persisted();
    return service;
}

int run_call(const ServiceSetup& setup, const std::string& method, const std::string& path, const std::string& body,
             const std::string& key) {
    auto service = make_service(setup);
    const ApiResponse r = service->handle(method, path, body, key);
    std::cout << r.body.dump(2) << "\n";
    return r.status < 400 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"aggquery: entity-level aggregation queries over text corpora"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Chunk a JSONL document file into a corpus directory");
    std::string in_path, out_dir, corpus_id = "corpus";
    ChunkPolicy policy;
    ingest->add_option("--in", in_path, "Documents, one JSON object per line")->required();
    ingest->add_option("--out", out_dir, "Corpus directory")->required();
    ingest->add_option("--max-tokens", policy.max_tokens)->capture_default_str();
    ingest->add_option("--overlap", policy.overlap)->capture_default_str();
    ingest->add_option("--corpus-id", corpus_id)->capture_default_str();

    // index
    auto* index = app.add_subcommand("index", "Build a BM25 index over a corpus");
    std::string corpus_dir, index_out;
    Bm25Params bm25;
    index->add_option("--corpus", corpus_dir)->required();
    index->add_option("--out", index_out)->required();
    index->add_option("--k1", bm25.k1)->capture_default_str();
    index->add_option("--b", bm25.b)->capture_default_str();

    // stats
    auto* stats = app.add_subcommand("stats", "Chunk counts and evidence density");
    std::string gold_path;
    stats->add_option("--corpus", corpus_dir)->required();
    stats->add_option("--gold", gold_path, "Gold JSONL; evidence ids are unioned over queries");

    // filter
    auto* filter = app.add_subcommand("filter", "Run the scripted filter loop and write the session state");
    std::string query_path, plan_script, judge_script, session_out;
    std::size_t budget = 12;
    bool no_auto_rollback = false;
    filter->add_option("--corpus", corpus_dir)->required();
    filter->add_option("--query", query_path, "QuerySpec JSON or {\"question\": ...}")->required();
    filter->add_option("--script", plan_script, "Planner script (JSON list of {key, response})")->required();
    filter->add_option("--judge-script", judge_script, "Script for the over-filter probe");
    filter->add_option("--budget", budget)->capture_default_str();
    filter->add_flag("--no-auto-rollback", no_auto_rollback);
    filter->add_option("--out", session_out)->required();

    // aggregate
    auto* aggregate = app.add_subcommand("aggregate", "Cluster, batch and judge the candidates of a session");
    std::string session_path, answer_out;
    AggregationConfig agg;
    aggregate->add_option("--corpus", corpus_dir)->required();
    aggregate->add_option("--session", session_path)->required();
    aggregate->add_option("--judge-script", judge_script)->required();
    aggregate->add_option("--lambda", agg.lambda)->capture_default_str();
    aggregate->add_option("--max-ctx", agg.max_context)->capture_default_str();
    aggregate->add_option("--prompt-overhead", agg.prompt_overhead)->capture_default_str();
    aggregate->add_option("--threshold", agg.cluster.threshold)->capture_default_str();
    aggregate->add_option("--out", answer_out);

    // eval
    auto* eval = app.add_subcommand("eval", "Run a benchmark over a gold file");
    std::string run_config, report_out;
    eval->add_option("--corpus", corpus_dir)->required();
    eval->add_option("--gold", gold_path)->required();
    eval->add_option("--config", run_config, "Run configuration (JSON)")->required();
    eval->add_option("--out", report_out);

    // expand
    auto* expand = app.add_subcommand("expand", "Keep pool documents whose top-1 BM25 score lies in [lo, hi]");
    std::string core_dir, pool_path, expand_out;
    double lo = 0.0, hi = 0.0;
    std::size_t bins = 10;
    expand->add_option("--core", core_dir, "Core corpus directory")->required();
    expand->add_option("--pool", pool_path, "Candidate documents (JSONL)")->required();
    expand->add_option("--lo", lo)->required();
    expand->add_option("--hi", hi)->required();
    expand->add_option("--bins", bins)->capture_default_str();
    expand->add_option("--out", expand_out);

    // serve
    auto* serve = app.add_subcommand("serve", "Serve the /v1 JSON API");
    ServiceSetup setup;
    std::string host = "127.0.0.1";
    int port = 8080;
    serve->add_option("--corpus", setup.corpora, "Corpus directory (repeatable)")->required();
    serve->add_option("--config", setup.config, "Backend and service configuration (JSON)");
    serve->add_option("--state-dir", setup.state_dir, "Persist sessions here");
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port)->capture_default_str();

    // offline mirrors of the API
    auto* session = app.add_subcommand("session", "Call the /v1 API in-process against a state directory");
    session->require_subcommand(1);
    session->add_option("--corpus", setup.corpora, "Corpus directory (repeatable)")->required();
    session->add_option("--config", setup.config);
    session->add_option("--state-dir", setup.state_dir)->required();
    std::string sid, cid, question, answer, body, key, method = "GET", path;
    std::size_t snapshot_id = 0;
    bool skip = false;

    auto* s_corpora = session->add_subcommand("corpora", "GET /v1/corpora");
    auto* s_submit = session->add_subcommand("submit", "POST /v1/queries");
    s_submit->add_option("--corpus-id", corpus_id)->required();
    s_submit->add_option("--question", question)->required();
    auto* s_show = session->add_subcommand("show", "GET /v1/queries/{id}");
    s_show->add_option("id", sid)->required();
    auto* s_answer = session->add_subcommand("answer", "POST /v1/queries/{id}/clarifications/{cid}");
    s_answer->add_option("id", sid)->required();
    s_answer->add_option("clarification", cid)->required();
    s_answer->add_option("--answer", answer);
    s_answer->add_flag("--skip", skip, "Resolve with the default interpretation");
    auto* s_step = session->add_subcommand("step", "POST /v1/queries/{id}/filter/step");
    s_step->add_option("id", sid)->required();
    s_step->add_option("--invocation", body, "Explicit {\"tool\", \"params\"} instead of the planner");
    auto* s_rollback = session->add_subcommand("rollback", "POST /v1/queries/{id}/rollback");
    s_rollback->add_option("id", sid)->required();
    s_rollback->add_option("snapshot", snapshot_id)->required();
    auto* s_aggregate = session->add_subcommand("aggregate", "POST /v1/queries/{id}/aggregate");
    s_aggregate->add_option("id", sid)->required();
    auto* s_result = session->add_subcommand("result", "GET /v1/queries/{id}/result");
    s_result->add_option("id", sid)->required();
    auto* s_call = session->add_subcommand("call", "Any endpoint: METHOD PATH [--body JSON]");
    s_call->add_option("method", method)->required();
    s_call->add_option("path", path)->required();
    s_call->add_option("--body", body);
    for (auto* sub : {s_submit, s_answer, s_step, s_rollback, s_aggregate, s_call}) {
        sub->add_option("--idempotency-key", key);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            const auto docs = read_documents_jsonl(in_path);
            const auto corpus = ingest_documents(docs, policy, corpus_id);
            corpus.save(out_dir);
            std::cout << "ingested " << corpus.documents().size() << " documents into " << corpus.size()
                      << " chunks\n";
        } else if (*index) {
            const auto corpus = CorpusHandle::load(corpus_dir);
            const auto idx = Bm25Index::build(corpus, bm25);
            idx.save(index_out);
            std::cout << "indexed " << idx.doc_count() << " chunks, avg length " << idx.avg_length() << "\n";
        } else if (*stats) {
            const auto corpus = CorpusHandle::load(corpus_dir);
            std::optional<std::vector<std::string>> evidence;
            if (!gold_path.empty()) {
                std::set<std::string> ids;
                for (const auto& g : read_gold_jsonl(gold_path)) {
                    ids.insert(g.gold_evidence_chunk_ids.begin(), g.gold_evidence_chunk_ids.end());
                }
                evidence.emplace(ids.begin(), ids.end());
            }
            emit(to_json(corpus_stats(corpus, evidence ? &*evidence : nullptr)), "");
        } else if (*filter) {
            auto corpus = load_corpus(corpus_dir);
            auto planner = scripted_from(plan_script);
            auto judge = scripted_from(judge_script);
            auto s = open_session(corpus, load_query(query_path), budget);
            const auto candidates = run_filter_loop(s, *planner, judge.get(), {!no_auto_rollback});
            emit(s.to_json(), session_out);
            std::cout << "active snapshot " << s.active_id() << ": " << candidates.chunk_ids.size()
                      << " candidate chunks\n";
        } else if (*aggregate) {
            auto corpus = load_corpus(corpus_dir);
            const auto s = FilterSession::replay(corpus, read_json_file(session_path));
            auto judge = scripted_from(judge_script);
            TrigramHashEmbedder embedder;
            const auto result =
                aggregate_candidates(finalize_candidates(s), *corpus, s.query(), *judge, embedder, agg);
            json out = to_json(result.answer);
            out["stats"] = {{"clusters", result.stats.clusters},
                            {"batches", result.stats.batches},
                            {"llm_calls", result.stats.llm_calls},
                            {"candidate_pairs", result.stats.candidate_pairs}};
            emit(out, answer_out);
        } else if (*eval) {
            auto corpus = load_corpus(corpus_dir);
            const json config = read_json_file(run_config);
            const fs::path base = fs::path(run_config).parent_path();
            const auto pipeline = pipeline_config_from_json(config.value("pipeline", json::object()));
            auto parser = backend_from(config, "parser", base);
            auto planner = backend_from(config, "planner", base);
            auto judge = backend_from(config, "judge", base);
            PipelineBackends backends{parser.get(), planner.get(), judge.get(), nullptr};
            const auto report = run_benchmark(corpus, read_gold_jsonl(gold_path), backends, pipeline);
            emit(to_json(report), report_out);
        } else if (*expand) {
            const auto core = CorpusHandle::load(core_dir);
            const auto idx = Bm25Index::build(core);
            const auto pool = read_documents_jsonl(pool_path);
            emit(to_json(expand_corpus(idx, pool, lo, hi, bins)), expand_out);
        } else if (*serve) {
            auto service = make_service(setup);
            httplib::Server server;
            install_routes(server, *service);
            std::cerr << "listening on " << host << ":" << port << "\n";
            if (!server.listen(host, port)) {
                std::cerr << "could not bind " << host << ":" << port << "\n";
                return 1;
            }
        } else if (*session) {
            if (*s_corpora) return run_call(setup, "GET", "/v1/corpora", "", "");
            if (*s_submit) {
                return run_call(setup, "POST", "/v1/queries",
                                json{{"corpus_id", corpus_id}, {"question", question}}.dump(), key);
            }
            if (*s_show) return run_call(setup, "GET", "/v1/queries/" + sid, "", "");
            if (*s_answer) {
                const json b = skip ? json{{"skip", true}} : json{{"answer", answer}};
                return run_call(setup, "POST", "/v1/queries/" + sid + "/clarifications/" + cid, b.dump(), key);
            }
            if (*s_step) return run_call(setup, "POST", "/v1/queries/" + sid + "/filter/step", body, key);
            if (*s_rollback) {
                return run_call(setup, "POST", "/v1/queries/" + sid + "/rollback",
                                json{{"snapshot_id", snapshot_id}}.dump(), key);
            }
            if (*s_aggregate) return run_call(setup, "POST", "/v1/queries/" + sid + "/aggregate", "", key);
            if (*s_result) return run_call(setup, "GET", "/v1/queries/" + sid + "/result", "", "");
            if (*s_call) return run_call(setup, method, path, body, key);
        }
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
        if (!e.detail().empty()) std::cerr << e.detail() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
