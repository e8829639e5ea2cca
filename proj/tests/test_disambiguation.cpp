#include <algorithm>

#include "doctest.h"
#include "support.hpp"

#include "aggquery/disambiguation.hpp"
#include "aggquery/error.hpp"

using namespace aggquery;
using nlohmann::json;

namespace {

bool has_code(const std::vector<AmbiguityLabel>& labels, AmbiguityCode code) {
    return std::any_of(labels.begin(), labels.end(), [&](const AmbiguityLabel& l) { return l.code == code; });
}

std::vector<AmbiguityLabel> rule_labels(const std::string& question) {
    return classify_ambiguity_rules(parse_query_rules(question));
}

} // namespace

TEST_SUITE("disambiguation") {
    TEST_CASE("rule parser decomposes example questions") {
        const auto a = parse_query_rules("How many datasets are used for multi-hop question answering?");
        CHECK(a.entity_type == "dataset");
        REQUIRE(a.conditions.size() == 1);
        CHECK(a.composition == Composition::leaf("c1"));
        CHECK(a.conditions[0].text.find("multi-hop question answering") != std::string::npos);

        const auto b = parse_query_rules("How many documents mention Transformer?");
        CHECK(b.entity_type == "document");
        REQUIRE(b.conditions.size() == 1);
        CHECK(b.conditions[0].text.find("Transformer") != std::string::npos);

        const auto c = parse_query_rules("How many papers apply to the legal domain?");
        CHECK(c.entity_type == "paper");
        CHECK(c.conditions.size() == 1);

        const auto d = parse_query_rules("How many datasets are multilingual and are publicly released?");
        CHECK(d.conditions.size() == 2);
        CHECK(d.composition.op == Composition::Op::And);

        CHECK_THROWS_AS(parse_query_rules("   "), Error);
    }

    TEST_CASE("backend parse uses the registered response") {
        ScriptedBackend b;
        b.register_script(ScriptKey::rule(Purpose::Parse),
                          R"({"entity_type":"dataset","conditions":[{"id":"c1","text":"used for multi-hop QA"}],
                              "composition":{"op":"leaf","condition":"c1"}})");
        const auto q = parse_query("How many datasets are used for multi-hop question answering?", &b, "q7");
        CHECK(q.query_id == "q7");
        CHECK(q.entity_type == "dataset");
        CHECK(q.conditions.at(0).text == "used for multi-hop QA");

        ScriptedBackend bad;
        bad.register_script(ScriptKey::rule(Purpose::Parse), "I cannot help with that");
        try {
            parse_query("How many x?", &bad);
            FAIL("expected a parse error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::Parse);
            CHECK(e.detail() == "I cannot help with that");
        }
    }

    TEST_CASE("rule classifier labels the four annotated examples") {
        CHECK(has_code(rule_labels("How many high-impact NLP authors?"), AmbiguityCode::A1));
        CHECK(has_code(rule_labels("How many stores opened near HQ recently?"), AmbiguityCode::A2));
        CHECK(has_code(rule_labels("How many employees did not complete at least three safety-training courses?"),
                       AmbiguityCode::B1));
        CHECK(has_code(rule_labels("How many conference papers on climate change in Europe were accepted?"),
                       AmbiguityCode::B2));
    }

    TEST_CASE("rule classifier is quiet on plain questions and stays in the taxonomy") {
        CHECK(rule_labels("How many datasets are used for multi-hop question answering?").empty());
        const auto labels = rule_labels("How many large recent papers did not cite at least two surveys on graphs in Asia?");
        for (const auto& l : labels) CHECK(try_ambiguity_code(to_string(l.code)).has_value());
        CHECK(rule_labels("How many high-impact NLP authors?") == rule_labels("How many high-impact NLP authors?"));
    }

    TEST_CASE("backend classifier filters codes outside the taxonomy") {
        ScriptedBackend b;
        b.register_script(ScriptKey::rule(Purpose::Classify),
                          R"({"labels":[{"code":"A1","fragment":"high-impact","rationale":"gradable"},
                                        {"code":"Z9","fragment":"x"}]})");
        const auto q = parse_query_rules("How many high-impact NLP authors?");
        const auto labels = classify_ambiguity(q, &b);
        REQUIRE(labels.size() == 1);
        CHECK(labels[0].code == AmbiguityCode::A1);

        ScriptedBackend junk;
        junk.register_script(ScriptKey::rule(Purpose::Classify), "no idea");
        CHECK(classify_ambiguity(q, &junk).empty());
    }

    TEST_CASE("clarification questions follow the per-code templates") {
        const auto q = parse_query_rules("How many high-impact NLP authors?");
        const auto labels = classify_ambiguity_rules(q);
        const auto cl = generate_clarifications(q, labels, nullptr);
        REQUIRE(cl.size() >= 1);
        const auto& a1 = *std::find_if(cl.begin(), cl.end(), [](const Clarification& c) { return c.code == AmbiguityCode::A1; });
        CHECK(a1.question.find("high-impact") != std::string::npos);
        CHECK(a1.question.find("citation") != std::string::npos);
        CHECK(a1.question.find("percentile") != std::string::npos);
        CHECK_FALSE(a1.resolved());

        const auto q2 = parse_query_rules("How many stores opened near HQ recently?");
        const auto cl2 = generate_clarifications(q2, classify_ambiguity_rules(q2), nullptr);
        const auto a2 = std::find_if(cl2.begin(), cl2.end(), [](const Clarification& c) { return c.code == AmbiguityCode::A2; });
        REQUIRE(a2 != cl2.end());
        CHECK(a2->question.find("6 months") != std::string::npos);

        CHECK(generate_clarifications(q, {}, nullptr).empty());
        const ClarificationTemplates only_a1({{AmbiguityCode::A1, {"{{fragment}}?", "", "x"}}});
        CHECK_THROWS_AS(generate_clarifications(q2, classify_ambiguity_rules(q2), nullptr, only_a1), Error);
    }

    TEST_CASE("backend-generated questions keep the fragment") {
        ScriptedBackend b;
        b.register_script(ScriptKey::rule(Purpose::Clarify), "Which threshold should apply?");
        const auto q = parse_query_rules("How many high-impact NLP authors?");
        AmbiguityLabel l{AmbiguityCode::A1, "", kWholeQuery, "high-impact"};
        const auto cl = generate_clarifications(q, {l}, &b);
        CHECK(cl.at(0).question.find("high-impact") != std::string::npos);
    }

    TEST_CASE("apply_answer records constraints without touching the input") {
        auto q = parse_query_rules("How many high-impact NLP authors?");
        auto cl = generate_clarifications(q, classify_ambiguity_rules(q), nullptr);
        q.clarifications = cl;
        const auto& c = q.clarifications.front();
        const QuerySpec before = q;
        const auto r = apply_answer(q, c, "h-index \xE2\x89\xA5 50");
        CHECK(q == before);
        std::vector<std::string> notes;
        for (const auto& cond : r.conditions) {
            for (const auto& x : cond.constraints) notes.push_back(x.text);
        }
        for (const auto& x : r.query_constraints) notes.push_back(x.text);
        CHECK(std::find(notes.begin(), notes.end(), "h-index \xE2\x89\xA5 50") != notes.end());
        CHECK(r.pending_clarifications().size() + 1 == q.pending_clarifications().size());

        // Answering again is a conflict.
        try {
            apply_answer(r, c, "h-index \xE2\x89\xA5 50");
            FAIL("expected conflict");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::Conflict);
        }
    }

    TEST_CASE("answer matching the current resolution leaves constraints unchanged") {
        auto q = parse_query_rules("How many high-impact NLP authors?");
        Clarification c1{"x1", AmbiguityCode::A1, kWholeQuery, "high-impact", "?", {}, "", false};
        Clarification c2{"x2", AmbiguityCode::A1, kWholeQuery, "high-impact", "?", {}, "", false};
        q.clarifications = {c1, c2};
        const auto once = apply_answer(q, c1, "h-index >= 50");
        const auto twice = apply_answer(once, c2, "h-index >= 50");
        CHECK(twice.query_constraints == once.query_constraints);
    }

    TEST_CASE("A2 answers split into separate window notes and resolutions accumulate") {
        auto q = parse_query_rules("How many stores opened near HQ recently?");
        q.clarifications = generate_clarifications(q, classify_ambiguity_rules(q), nullptr);
        const auto a2 = *std::find_if(q.clarifications.begin(), q.clarifications.end(),
                                      [](const Clarification& c) { return c.code == AmbiguityCode::A2; });
        const auto r = apply_answer(q, a2, "last 3 years, 20 km");
        std::vector<std::string> notes;
        for (const auto& cond : r.conditions) {
            for (const auto& x : cond.constraints) notes.push_back(x.text);
        }
        for (const auto& x : r.query_constraints) notes.push_back(x.text);
        CHECK(std::count(notes.begin(), notes.end(), "last 3 years") == 1);
        CHECK(std::count(notes.begin(), notes.end(), "20 km") == 1);

        // Later answers never remove earlier constraints.
        QuerySpec cur = r;
        for (const auto& c : cur.clarifications) {
            if (!c.resolved()) cur = apply_answer(cur, c, "answer for " + c.id);
        }
        for (const auto& n : notes) {
            bool found = false;
            for (const auto& cond : cur.conditions) {
                for (const auto& x : cond.constraints) found = found || x.text == n;
            }
            for (const auto& x : cur.query_constraints) found = found || x.text == n;
            CHECK(found);
        }
    }

    TEST_CASE("guided rewrite embeds every constraint and refuses pending clarifications") {
        auto q = parse_query_rules("How many high-impact NLP authors?");
        q.clarifications = generate_clarifications(q, classify_ambiguity_rules(q), nullptr);
        CHECK_THROWS_AS(rewrite_query(q, RewriteMode::ClassificationGuided, nullptr), Error);
        for (const auto& c : q.clarifications) q = apply_answer(q, c, "h-index \xE2\x89\xA5 50");
        const auto r = rewrite_query(q, RewriteMode::ClassificationGuided, nullptr);
        CHECK(r.raw_text.find("h-index \xE2\x89\xA5 50") != std::string::npos);
        CHECK(r.entity_type == q.entity_type);

        ScriptedBackend lossy;
        lossy.register_script(ScriptKey::rule(Purpose::Rewrite), "How many influential NLP authors?");
        const auto r2 = rewrite_query(q, RewriteMode::ClassificationGuided, &lossy);
        CHECK(r2.raw_text.find("h-index \xE2\x89\xA5 50") != std::string::npos);

        const auto plain = parse_query_rules("How many datasets are used for multi-hop question answering?");
        CHECK(rewrite_query(plain, RewriteMode::ClassificationGuided, nullptr) == plain);
        CHECK_NOTHROW(rewrite_query(parse_query_rules("How many high-impact NLP authors?"), RewriteMode::Direct, nullptr));
    }

    TEST_CASE("C1 resolution changes the aggregation unit") {
        auto q = parse_query_rules("How many authors wrote about graphs?");
        Clarification c{"clr-1", AmbiguityCode::C1, kWholeQuery, "authors", "Count at which level?", {}, "", false};
        q.clarifications = {c};
        q = apply_answer(q, c, "unit = paper level");
        const auto r = rewrite_query(q, RewriteMode::ClassificationGuided, nullptr);
        CHECK(r.entity_type == "paper");
    }

    TEST_CASE("skip records the default interpretation") {
        auto q = parse_query_rules("How many high-impact NLP authors?");
        q.clarifications = generate_clarifications(q, classify_ambiguity_rules(q), nullptr);
        for (const auto& c : q.clarifications) {
            if (c.resolved()) continue;
            q = skip_clarification(q, c);
        }
        CHECK(q.pending_clarifications().empty());
        for (const auto& c : q.clarifications) {
            CHECK(c.skipped);
            CHECK(c.answer.has_value());
        }
        // Every code has a default that renders.
        for (AmbiguityCode code : {AmbiguityCode::A1, AmbiguityCode::A2, AmbiguityCode::B1, AmbiguityCode::B2,
                                   AmbiguityCode::C1, AmbiguityCode::C2, AmbiguityCode::C3}) {
            auto base = parse_query_rules("How many papers on graphs?");
            Clarification c{"k", code, kWholeQuery, "graphs", "?", {}, "", false};
            base.clarifications = {c};
            CHECK_NOTHROW(skip_clarification(base, c));
        }
    }

    TEST_CASE("query json round trip") {
        auto q = testkit::make_query("q1", "How many x are a or b?", "x", {"a", "b"}, true);
        q.clarifications.push_back({"clr-1", AmbiguityCode::B2, "c1", "on a", "?", std::string("topic"), "topic", false});
        q.query_constraints.push_back({AmbiguityCode::A1, "clr-9", "note", true});
        CHECK(query_from_json(to_json(q)) == q);
        CHECK_THROWS_AS(query_from_json(json{{"query_id", "x"}}), Error);
        CHECK_THROWS_AS(ambiguity_code_from_string("D4"), Error);
    }

    TEST_CASE("composition semantics") {
        const auto q = testkit::make_query("q", "?", "x", {"a", "b"}, true);
        CHECK(q.composition.evaluate({{"c1", true}}));
        CHECK_FALSE(q.composition.evaluate({}));
        const auto a = testkit::make_query("q", "?", "x", {"a", "b"}, false);
        CHECK_FALSE(a.composition.evaluate({{"c1", true}}));
        CHECK(a.composition.evaluate({{"c1", true}, {"c2", true}}));
    }
}
