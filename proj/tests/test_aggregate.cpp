#include "doctest.h"
#include "scenarios.hpp"

#include "aggquery/aggregate.hpp"
#include "aggquery/error.hpp"
#include "aggquery/text.hpp"

using namespace aggquery;
using nlohmann::json;

namespace {

Cluster cluster(std::string id, std::vector<std::size_t> sizes, std::vector<double> centroid) {
    Cluster k;
    k.id = std::move(id);
    for (std::size_t i = 0; i < sizes.size(); ++i) k.members.push_back({k.id + "-m" + std::to_string(i), sizes[i]});
    k.centroid = std::move(centroid);
    return k;
}

QuerySpec dataset_query(std::vector<std::string> conds = {"used for QA"}, bool use_or = false) {
    return testkit::make_query("qa", "How many datasets are used for QA?", "dataset", conds, use_or);
}

EntityFinding finding(std::string surface, std::vector<std::string> chunks, std::map<std::string, bool> verdicts) {
    EntityFinding f;
    f.surface = surface;
    f.canonical = text::canonical_key(surface);
    f.chunk_ids = std::move(chunks);
    f.verdicts = std::move(verdicts);
    return f;
}

} // namespace

TEST_SUITE("aggregate") {
    TEST_CASE("clustering basics") {
        TrigramHashEmbedder emb;
        auto one = testkit::make_corpus({{"a", "single chunk"}});
        const auto c1 = cluster_candidates(one->chunks(), emb);
        REQUIRE(c1.size() == 1);
        CHECK(c1[0].members.size() == 1);

        auto twins = testkit::make_corpus({{"a", "identical words here"}, {"b", "identical words here"}});
        ClusterConfig cfg;
        cfg.threshold = 0.9;
        const auto c2 = cluster_candidates(twins->chunks(), emb, cfg);
        REQUIRE(c2.size() == 1);
        CHECK(c2[0].members.size() == 2);
        CHECK(c2[0].id == "k0000");

        CHECK_THROWS_AS(cluster_candidates(std::span<const Chunk>{}, emb), Error);
    }

    TEST_CASE("single-link grouping on a hand matrix") {
        // 0-1 similar, 1-2 similar, 3 alone: chain links 0 and 2.
        const std::vector<std::vector<double>> sim{
            {1.0, 0.7, 0.1, 0.0}, {0.7, 1.0, 0.65, 0.2}, {0.1, 0.65, 1.0, 0.3}, {0.0, 0.2, 0.3, 1.0}};
        const auto g = single_link_groups(sim, 0.6);
        CHECK(g == std::vector<std::vector<std::size_t>>{{0, 1, 2}, {3}});
        CHECK(single_link_groups(sim, 0.68) == std::vector<std::vector<std::size_t>>{{0, 1}, {2}, {3}});
    }

    TEST_CASE("feature similarity is the weighted cosine") {
        TrigramHashEmbedder emb;
        auto c = testkit::make_corpus({{"a", "graph neural networks"}, {"b", "graph databases"}, {"c", "protein"}});
        ClusterConfig cfg;
        cfg.tfidf_weight = 0.3;
        cfg.embedding_weight = 0.7;
        const auto f = candidate_features(c->chunks(), emb, cfg);
        const auto tf = tfidf_features(c->chunks());
        const auto e0 = emb.embed_one(c->chunks()[0].text), e1 = emb.embed_one(c->chunks()[1].text);
        const double expected = 0.3 * cosine_sim(tf.vectors.at("a#000000"), tf.vectors.at("b#000000")) +
                                0.7 * cosine_sim(e0, e1);
        CHECK(f.similarity(0, 1) == doctest::Approx(expected).epsilon(1e-12));
    }

    TEST_CASE("oversized clusters are split first-fit") {
        const auto pieces = split_cluster(cluster("K", {100, 100, 50}, {1, 0}), 100);
        REQUIRE(pieces.size() == 3);
        CHECK(pieces[0].tokens() == 100);
        CHECK(pieces[1].tokens() == 100);
        CHECK(pieces[2].tokens() == 50);
        CHECK(pieces[0].id == "K.0");
        CHECK(pieces[2].id == "K.2");
        for (const auto& p : pieces) CHECK(p.centroid == std::vector<double>{1, 0});
        CHECK_THROWS_AS(split_cluster(cluster("K", {101}, {1}), 100), Error);

        const auto batches = greedy_batch({cluster("K", {100, 100, 50}, {1, 0})}, 100, 0.5);
        CHECK(batches.size() == 3);
    }

    TEST_CASE("merge score examples") {
        Batch b;
        b.clusters = {cluster("B", {50}, {1, 0})};
        b.centroid = {1, 0};
        b.tokens = 50;
        const auto k = cluster("K", {50}, {0, 1});
        CHECK(merge_score(k, b, 0.5, 100) == doctest::Approx(0.5));
        CHECK(merge_score(cluster("K", {50}, {1, 0}), b, 0.5, 100) == doctest::Approx(1.0));
        CHECK(merge_score(k, b, 0.0, 100) == doctest::Approx(1.0));
        CHECK(merge_score(cluster("K", {50}, {1, 0}), b, 1.0, 100) == doctest::Approx(1.0));
    }

    TEST_CASE("greedy batching worked example") {
        const auto v = testkit::worked_k1_k2_k3();
        CHECK_MESSAGE(v.pass, v.detail);
    }

    TEST_CASE("greedy batching edge cases") {
        CHECK(greedy_batch({}, 100, 0.5).empty());
        CHECK_THROWS_AS(greedy_batch({cluster("A", {10}, {1})}, 0, 0.5), Error);
        CHECK_THROWS_AS(greedy_batch({cluster("A", {10}, {1})}, 100, 1.5), Error);
        const auto tie = greedy_batch({cluster("A", {40}, {1, 0}), cluster("B", {70}, {0, 1}), cluster("C", {30}, {1, 1})},
                                      100, 1.0);
        // C fits both open batches and is equally close to each; the first wins.
        REQUIRE(tie.size() == 2);
        CHECK(tie[0].clusters.size() == 2);
        CHECK(tie[0].clusters[1].id == "C");
    }

    TEST_CASE("greedy batching agrees with the reference replay") {
        const auto v = testkit::greedy_replay(30);
        CHECK_MESSAGE(v.pass, v.detail);
    }

    TEST_CASE("batching baselines") {
        const auto v = testkit::batching_direction();
        CHECK_MESSAGE(v.pass, v.detail);
        const std::vector<Cluster> ks{cluster("A", {30}, {1, 0}), cluster("B", {30}, {1, 0})};
        CHECK(unmerged_batches(ks, 100).size() == 2);
        CHECK(greedy_batch(ks, 100, 0.5).size() == 1);
    }

    TEST_CASE("judge batch parses findings and rejects bad ones") {
        auto corpus = testkit::make_corpus({{"a", "HotpotQA is used for QA."}, {"b", "SQuAD too."}, {"z", "outside"}});
        const auto q = dataset_query();
        const std::vector<Chunk> in_batch{corpus->chunk("a#000000"), corpus->chunk("b#000000")};
        ScriptedBackend judge;
        judge.register_script(ScriptKey::exact(judge_script_key("qa", {"a#000000", "b#000000"})), R"({"findings":[
            {"entity":"HotpotQA","chunk_ids":["a#000000"],"verdicts":{"c1":true,"c9":true}},
            {"entity":"SQuAD","chunk_ids":["b#000000","b#000000"]},
            {"entity":"Ghost","chunk_ids":["z#000000"],"verdicts":{"c1":true}},
            {"entity":"  ...  ","chunk_ids":["a#000000"]},
            {"entity":"NoCite","chunk_ids":[]},
            {"chunk_ids":["a#000000"]}]})");
        const auto r = judge_chunks(0, in_batch, q, judge);
        REQUIRE(r.findings.size() == 2);
        CHECK(r.findings[0].canonical == "hotpotqa");
        CHECK(r.findings[0].verdicts == std::map<std::string, bool>{{"c1", true}});
        CHECK(r.findings[1].verdicts == std::map<std::string, bool>{{"c1", false}});
        CHECK(r.findings[1].chunk_ids == std::vector<std::string>{"b#000000"});
        CHECK(r.rejected.size() == 4);
        CHECK(judge_chunks(0, std::span<const Chunk>{}, q, judge).findings.empty());
    }

    TEST_CASE("judge prompts that overflow the context are refused") {
        auto corpus = testkit::make_corpus({{"a", "one two three four five"}});
        auto small = testkit::per_chunk_judge({}, 10);
        JudgeOptions opt;
        opt.prompt_overhead = 6;
        const std::vector<Chunk> chunks{corpus->chunk("a#000000")};
        CHECK_THROWS_AS(judge_chunks(0, chunks, dataset_query(), *small, opt), Error);
    }

    TEST_CASE("alignment merges surface variants") {
        const auto q = dataset_query();
        const auto a = align_and_count({finding("HotpotQA", {"x"}, {{"c1", true}}), finding("hotpotqa", {"y"}, {{"c1", false}}),
                                        finding("  HotpotQA.", {"z"}, {{"c1", false}})},
                                       q);
        REQUIRE(a.count() == 1);
        CHECK(a.entities[0].canonical == "hotpotqa");
        CHECK(a.entities[0].evidence == std::vector<std::string>{"x", "y", "z"});
        CHECK(a.entities[0].surfaces.size() == 3);

        const auto aliased = align_and_count({finding("NQ", {"x"}, {{"c1", true}}),
                                              finding("Natural Questions", {"y"}, {{"c1", true}})},
                                             q, {{"nq", "natural questions"}});
        CHECK(aliased.count() == 1);
        CHECK(align_and_count({}, q).count() == 0);
    }

    TEST_CASE("alignment evaluates compositions over merged verdicts") {
        const auto both = dataset_query({"used for QA", "public"});
        const std::vector<EntityFinding> split{finding("X", {"a"}, {{"c1", true}, {"c2", false}}),
                                               finding("X", {"b"}, {{"c1", false}, {"c2", true}}),
                                               finding("Y", {"c"}, {{"c1", true}, {"c2", false}})};
        const auto and_set = align_and_count(split, both);
        REQUIRE(and_set.count() == 1);
        CHECK(and_set.entities[0].canonical == "x");
        CHECK(align_and_count(split, dataset_query({"used for QA", "public"}, true)).count() == 2);
    }

    TEST_CASE("three-chunk toy end to end") {
        auto corpus = testkit::make_corpus({{"t1", "e1 is a dataset for QA."}, {"t2", "e2 is a dataset not used for QA."},
                                            {"t3", "e1 appears again."}});
        testkit::JudgeTable table{{"t1#000000", {{"e1", {{"c1", true}}}}},
                                  {"t2#000000", {{"e2", {{"c1", false}}}}},
                                  {"t3#000000", {{"E1", {{"c1", false}}}}}};
        auto judge = testkit::per_chunk_judge(table);
        TrigramHashEmbedder emb;
        CandidateSet cands{{"t1#000000", "t2#000000", "t3#000000"}};
        const auto r = aggregate_candidates(cands, *corpus, dataset_query(), *judge, emb);
        REQUIRE(r.answer.count() == 1);
        CHECK(r.answer.entities[0].canonical == "e1");
        CHECK(r.answer.entities[0].evidence == std::vector<std::string>{"t1#000000", "t3#000000"});
        CHECK(r.stats.llm_calls == r.stats.batches);
        CHECK(testkit::answer_matches(r.answer, testkit::brute_force_union(table, dataset_query(), cands.chunk_ids)));
    }

    TEST_CASE("every candidate is judged exactly once") {
        auto c = testkit::synthetic_case(9, 40);
        std::vector<std::string> ids;
        for (const auto& ch : c.corpus->chunks()) ids.push_back(ch.chunk_id);
        std::map<std::string, int> seen;
        std::mutex mu;
        CallbackBackend judge(
            [&](const CompletionRequest& req) {
                std::lock_guard lock(mu);
                for (const auto& id : testkit::chunk_ids_in_prompt(req)) ++seen[id];
                return std::string(R"({"findings":[]})");
            },
            nullptr, 400);
        TrigramHashEmbedder emb;
        AggregationConfig cfg;
        cfg.max_context = 400;
        cfg.prompt_overhead = 100;
        const auto r = aggregate_candidates({ids}, *c.corpus, c.query, judge, emb, cfg);
        CHECK(seen.size() == ids.size());
        for (const auto& [id, n] : seen) CHECK(n == 1);
        for (const auto& b : r.batches) CHECK(b.tokens <= 300);
    }

    TEST_CASE("answer is invariant to candidate order and parallelism") {
        auto c = testkit::synthetic_case(4, 36);
        auto judge = testkit::per_chunk_judge(c.table, 400);
        TrigramHashEmbedder emb;
        AggregationConfig cfg;
        cfg.max_context = 400;
        cfg.prompt_overhead = 100;
        std::vector<std::string> ids;
        for (const auto& ch : c.corpus->chunks()) ids.push_back(ch.chunk_id);
        const auto base = aggregate_candidates({ids}, *c.corpus, c.query, *judge, emb, cfg).answer;
        std::mt19937_64 rng(1);
        for (std::size_t p : {1u, 3u, 8u}) {
            std::shuffle(ids.begin(), ids.end(), rng);
            cfg.parallelism = p;
            const auto other = aggregate_candidates({ids}, *c.corpus, c.query, *judge, emb, cfg).answer;
            CHECK(other.same_answer(base));
        }
    }

    TEST_CASE("identity-filter pipeline equals the brute-force union") {
        const auto v = testkit::oracle_equivalence(3);
        CHECK_MESSAGE(v.pass, v.detail);
    }

    TEST_CASE("answer set JSON round trip") {
        AnswerSet a;
        a.query_id = "q";
        a.entities = {{"hotpotqa", {"HotpotQA"}, {"x#000000"}, {{"c1", true}}}};
        a.trail = json::array({{{"stage", "aggregate"}}});
        const auto j = to_json(a);
        CHECK(j["count"] == 1);
        const auto back = answer_from_json(j);
        CHECK(back.same_answer(a));
        CHECK(back.trail == a.trail);
        auto bad = j;
        bad["count"] = 5;
        CHECK_THROWS_AS(answer_from_json(bad), Error);
    }

    TEST_CASE("empty candidate set gives an empty answer") {
        auto corpus = testkit::make_corpus({{"a", "x"}});
        auto judge = testkit::per_chunk_judge({});
        TrigramHashEmbedder emb;
        const auto r = aggregate_candidates({}, *corpus, dataset_query(), *judge, emb);
        CHECK(r.answer.count() == 0);
        CHECK(r.stats.llm_calls == 0);
    }
}
