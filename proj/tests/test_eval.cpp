#include <fstream>

#include "doctest.h"
#include "scenarios.hpp"

#include "aggquery/error.hpp"
#include "aggquery/eval.hpp"

using namespace aggquery;
using nlohmann::json;

TEST_SUITE("eval") {
    TEST_CASE("absolute and normalised count error") {
        CHECK(ace(5, 4) == 1);
        CHECK(ace(0, 29) == 29);
        CHECK(ace(3, 9) == 6);
        CHECK(nace(5, 4) == 1.0 / (4.0 + 1e-9));
        CHECK(std::abs(nace(5, 4) - 0.25) <= 1e-9);
        CHECK(std::abs(nace(9, 3) - 2.0) <= 1e-9);
        CHECK(nace(0, 0) == 0.0);
        CHECK(nace(2, 0) == 2.0 / 1e-9);
    }

    TEST_CASE("chunk recall") {
        CHECK(chunk_recall({"c1", "c3"}, {"c1", "c2", "c3", "c4"}) == 0.5);
        CHECK(chunk_recall({"c1", "c2", "c3", "c4", "x"}, {"c1", "c2", "c3", "c4"}) == 1.0);
        CHECK(chunk_recall({}, {"c1"}) == 0.0);
        CHECK_THROWS_AS(chunk_recall({"c1"}, {}), Error);
    }

    TEST_CASE("mean and median") {
        CHECK(median_of({0.0, 0.5}) == 0.25);
        CHECK(median_of({3.0, 1.0, 2.0}) == 2.0);
        CHECK(median_of({}) == 0.0);
        CHECK(mean_of({1.0, 2.0, 6.0}) == 3.0);
    }

    TEST_CASE("three-query benchmark matches a hand assembly") {
        const auto v = testkit::metric_fidelity();
        CHECK_MESSAGE(v.pass, v.detail);
    }

    TEST_CASE("report rows and aggregates") {
        auto t = testkit::toy_suite();
        auto judge = testkit::per_chunk_judge(t.table, 400);
        PipelineBackends b;
        b.planner = t.planner.get();
        b.judge = judge.get();
        const auto report = run_benchmark(t.corpus, t.gold, b, testkit::toy_pipeline());
        REQUIRE(report.rows.size() == 3);
        CHECK(report.rows[0].query_id == "t1");
        // "multihop" without the hyphen escapes the keyword filter.
        CHECK(*report.rows[0].recall == doctest::Approx(2.0 / 3.0));
        CHECK(report.rows[0].predicted == 2);
        CHECK(report.rows[1].recall == 1.0);
        CHECK(report.rows[1].predicted == 3);
        CHECK(report.rows[1].gold == 4);
        CHECK(report.aggregates.evaluated == 3);
        CHECK(report.aggregates.failed == 0);
        const auto j = to_json(report);
        CHECK(j["rows"].size() == 3);
        CHECK(j.contains("aggregates"));

        const auto micro = aggregate_rows(report.rows, RecallMode::Micro);
        std::size_t hit = 0, total = 0;
        for (const auto& r : report.rows) {
            hit += r.evidence_retained;
            total += r.evidence_total;
        }
        CHECK(micro.mean_recall == static_cast<double>(hit) / static_cast<double>(total));
        CHECK(total == 8);
    }

    TEST_CASE("failed queries become error rows") {
        auto t = testkit::toy_suite();
        auto judge = testkit::per_chunk_judge(t.table, 400);
        ScriptedBackend silent;
        PipelineBackends b;
        b.planner = &silent;
        b.judge = judge.get();
        const auto report = run_benchmark(t.corpus, t.gold, b, testkit::toy_pipeline());
        REQUIRE(report.rows.size() == 3);
        for (const auto& r : report.rows) CHECK(r.error.has_value());
        CHECK(report.aggregates.failed == 3);
        CHECK(report.aggregates.evaluated == 0);
    }

    TEST_CASE("rank-then-read baseline") {
        const auto v = testkit::rank_then_read_undercount();
        CHECK_MESSAGE(v.pass, v.detail);

        auto r = testkit::rag_case();
        auto judge = testkit::per_chunk_judge(r.table, 8000);
        const auto idx = build_bm25(*r.corpus);
        RagOptions all;
        all.k = 50;
        PipelineBackends b;
        b.judge = judge.get();
        auto cfg = testkit::identity_pipeline(8000, 500);
        const auto full = run_query(r.corpus, r.query, b, cfg);
        CHECK(naive_rag_baseline(*r.corpus, idx, r.query, *judge, all).same_answer(full.aggregation.answer));

        auto nothing = r.query;
        nothing.raw_text = "zebra quokka";
        CHECK(naive_rag_baseline(*r.corpus, idx, nothing, *judge, all).count() == 0);
    }

    TEST_CASE("corpus expansion") {
        const auto v = testkit::bm25_fidelity();
        CHECK_MESSAGE(v.pass, v.detail);

        auto core = testkit::make_corpus({{"k", "alpha beta gamma"}, {"l", "delta epsilon"}});
        const auto idx = build_bm25(*core);
        const std::vector<Document> pool{{"p", "alpha", {}}, {"q", "omega", {}}};
        const auto rep = expand_corpus(idx, pool, 0.0, 0.0);
        REQUIRE(rep.rows.size() == 2);
        CHECK(rep.kept.size() == 1);
        CHECK(rep.kept[0].doc_id == "q");
        CHECK(rep.rows[1].top1_score == 0.0);
        CHECK(expand_corpus(idx, pool, 0.0, 1e9).kept.size() == 2);
        CHECK_THROWS_AS(expand_corpus(idx, pool, 2.0, 1.0), Error);
    }

    TEST_CASE("score histogram") {
        const auto h = score_histogram({0.0, 0.5, 1.0, 1.0}, 2);
        REQUIRE(h.size() == 2);
        CHECK(h[0].count == 1);
        CHECK(h[1].count == 3);
        CHECK(h[1].hi == 1.0);
    }

    TEST_CASE("gold records") {
        const json good{{"query_id", "g1"},
                        {"question", "How many datasets?"},
                        {"entity_type", "dataset"},
                        {"gold_entities", {"A", "B"}},
                        {"gold_evidence_chunk_ids", {"x#000000"}},
                        {"spec", {{"entity_type", "dataset"}, {"conditions", {{{"condition_id", "c1"}, {"text", "t"}}}}}}};
        const auto g = gold_from_json(good);
        CHECK(g.y() == 2);
        REQUIRE(g.spec);
        CHECK(g.spec->query_id == "g1");
        CHECK(gold_from_json(to_json(g)).gold_entities == g.gold_entities);

        auto missing = good;
        missing.erase("gold_entities");
        try {
            gold_from_json(missing);
            FAIL("expected a schema error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::Schema);
            CHECK(std::string(e.what()).find("gold_entities") != std::string::npos);
        }

        auto corpus = testkit::make_corpus({{"x", "text"}});
        CHECK_NOTHROW(validate_gold({g}, *corpus));
        auto dangling = g;
        dangling.gold_evidence_chunk_ids = {"nope#000000"};
        CHECK_THROWS_AS(validate_gold({dangling}, *corpus), Error);

        const auto dir = testkit::scratch_dir("gold");
        {
            std::ofstream out(dir / "gold.jsonl");
            auto second = good;
            second["query_id"] = "g2";
            out << good.dump() << "\n\n" << second.dump() << "\n";
        }
        CHECK(read_gold_jsonl(dir / "gold.jsonl").size() == 2);
        {
            std::ofstream out(dir / "dup.jsonl");
            out << good.dump() << "\n" << good.dump() << "\n";
        }
        try {
            read_gold_jsonl(dir / "dup.jsonl");
            FAIL("expected a duplicate error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::Duplicate);
        }
    }

    TEST_CASE("queries without gold evidence have no recall") {
        auto t = testkit::toy_suite();
        t.gold.resize(1);
        t.gold[0].gold_evidence_chunk_ids.clear();
        auto judge = testkit::per_chunk_judge(t.table, 400);
        PipelineBackends b;
        b.planner = t.planner.get();
        b.judge = judge.get();
        const auto report = run_benchmark(t.corpus, t.gold, b, testkit::toy_pipeline());
        REQUIRE(report.rows.size() == 1);
        CHECK(!report.rows[0].recall.has_value());
        CHECK(report.aggregates.mean_recall == 0.0);
    }

    TEST_CASE("pipeline config JSON round trip") {
        PipelineConfig c;
        c.filter_budget = 7;
        c.aggregation.lambda = 0.25;
        c.aliases = {{"nq", "natural questions"}};
        const auto back = pipeline_config_from_json(to_json(c));
        CHECK(back.filter_budget == 7);
        CHECK(back.aggregation.lambda == 0.25);
        CHECK(back.aliases == c.aliases);
    }
}
