#include <atomic>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "support.hpp"

#include "aggquery/error.hpp"
#include "aggquery/llm.hpp"

using namespace aggquery;
using nlohmann::json;

namespace {

CompletionRequest request(const std::string& text, Purpose p = Purpose::Judge, std::string key = {}) {
    CompletionRequest r;
    r.messages = {{"user", text}};
    r.purpose = p;
    r.script_key = std::move(key);
    return r;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an aggquery::Error");
    return ErrorCode::Io;
}

} // namespace

TEST_SUITE("llm") {
    TEST_CASE("scripted lookup by key, hash and rule") {
        ScriptedBackend b;
        b.register_script(ScriptKey::exact("k1"), "by key");
        const auto hashed = request("hash me");
        b.register_script(ScriptKey::exact(hashed.content_hash()), "by hash");
        b.register_script(ScriptKey::rule(Purpose::Plan, "legal"), "by rule");
        b.register_script(ScriptKey::rule(Purpose::Plan), "fallback rule");

        CHECK(b.complete(request("anything", Purpose::Judge, "k1")).text == "by key");
        CHECK(b.complete(hashed).text == "by hash");
        CHECK(b.complete(request("the legal domain", Purpose::Plan)).text == "by rule");
        CHECK(b.complete(request("other", Purpose::Plan)).text == "fallback rule");
        CHECK(b.size() == 4);
    }

    TEST_CASE("scripted backend is a pure lookup") {
        ScriptedBackend b;
        b.register_script(ScriptKey::exact("a"), "x");
        b.register_script(ScriptKey::exact("b"), "y");
        for (int i = 0; i < 3; ++i) {
            CHECK(b.complete(request("q", Purpose::Judge, "a")).text == "x");
            CHECK(b.complete(request("q", Purpose::Judge, "b")).text == "y");
        }
    }

    TEST_CASE("unscripted prompts and duplicates are explicit errors") {
        ScriptedBackend b;
        b.register_script(ScriptKey::exact("k"), "v");
        CHECK(code_of([&] { b.complete(request("nothing registered")); }) == ErrorCode::Unscripted);
        CHECK(code_of([&] { b.register_script(ScriptKey::exact("k"), "w"); }) == ErrorCode::Duplicate);
        b.register_script(ScriptKey::rule(Purpose::Parse, "x"), "1");
        CHECK(code_of([&] { b.register_script(ScriptKey::rule(Purpose::Parse, "x"), "2"); }) == ErrorCode::Duplicate);
    }

    TEST_CASE("request validation") {
        ScriptedBackend b;
        CompletionRequest empty;
        CHECK(code_of([&] { b.complete(empty); }) == ErrorCode::InvalidArgument);
        auto hot = request("x");
        hot.temperature = -1;
        CHECK(code_of([&] { b.complete(hot); }) == ErrorCode::InvalidArgument);
    }

    TEST_CASE("ledger accounting and conservation") {
        auto ledger = std::make_shared<BudgetLedger>();
        CallbackBackend b([](const CompletionRequest&) { return std::string("ok"); }, ledger);
        std::string hundred;
        for (int i = 0; i < 100; ++i) hundred += "tok ";
        b.complete(request(hundred, Purpose::Judge));
        b.complete(request(hundred, Purpose::Plan));
        b.complete(request(hundred, Purpose::Probe));
        CHECK(ledger->total().calls == 3);
        CHECK(ledger->total().prompt_tokens == 300);
        CHECK(ledger->total().output_tokens == 3);
        std::size_t calls = 0, prompt = 0;
        for (Purpose p : {Purpose::Parse, Purpose::Classify, Purpose::Clarify, Purpose::Rewrite, Purpose::Plan,
                          Purpose::Judge, Purpose::Probe}) {
            calls += ledger->for_purpose(p).calls;
            prompt += ledger->for_purpose(p).prompt_tokens;
        }
        CHECK(calls == 3);
        CHECK(prompt == 300);
        CHECK(ledger->to_json()["by_purpose"]["plan"]["calls"] == 1);
    }

    TEST_CASE("budget ceilings halt further calls") {
        BudgetCeilings c;
        c.max_calls = 2;
        auto ledger = std::make_shared<BudgetLedger>(c);
        CallbackBackend b([](const CompletionRequest&) { return std::string("ok"); }, ledger);
        b.complete(request("a"));
        b.complete(request("b"));
        CHECK(code_of([&] { b.complete(request("c")); }) == ErrorCode::BudgetExceeded);
        CHECK(ledger->total().calls == 2);
    }

    TEST_CASE("ledger is safe under concurrent calls") {
        auto ledger = std::make_shared<BudgetLedger>();
        CallbackBackend b([](const CompletionRequest&) { return std::string("one two"); }, ledger);
        std::vector<std::thread> threads;
        for (int t = 0; t < 4; ++t) {
            threads.emplace_back([&] {
                for (int i = 0; i < 50; ++i) b.complete(request("x y z"));
            });
        }
        for (auto& t : threads) t.join();
        CHECK(ledger->total().calls == 200);
        CHECK(ledger->total().prompt_tokens == 600);
        CHECK(ledger->total().output_tokens == 400);
    }

    TEST_CASE("make_backend builds scripted backends from config") {
        const auto dir = testkit::scratch_dir("llm-config");
        {
            std::ofstream out(dir / "script.json");
            out << R"([{"key":"k","response":"from file"},{"key":{"purpose":"plan","contains":"z"},"response":"rule"}])";
        }
        const json cfg{{"kind", "scripted"},
                       {"script", "script.json"},
                       {"entries", json::array({{{"key", "inline"}, {"response", "from config"}}})},
                       {"budget", {{"max_calls", 2}}},
                       {"context_limit", 1234}};
        auto b = make_backend(cfg, dir);
        CHECK(b->context_limit() == 1234);
        CHECK(b->complete(request("", Purpose::Judge, "k")).text == "from file");
        CHECK(b->complete(request("", Purpose::Judge, "inline")).text == "from config");
        CHECK(code_of([&] { b->complete(request("z", Purpose::Plan)); }) == ErrorCode::BudgetExceeded);
        CHECK(code_of([&] { make_backend(json{{"kind", "telepathy"}}); }) == ErrorCode::Config);
        CHECK(code_of([&] { make_backend(json{{"kind", "http"}}); }) == ErrorCode::Config);
    }

    TEST_CASE("json extraction from model output") {
        CHECK(parse_json_response(R"({"a":1})", "t")["a"] == 1);
        CHECK(parse_json_response("Sure!\n```json\n{\"a\": {\"b\": \"}\"}}\n```\nDone.", "t")["a"]["b"] == "}");
        CHECK(code_of([] { parse_json_response("no json here", "t"); }) == ErrorCode::Parse);
        try {
            parse_json_response("{broken", "t");
        } catch (const Error& e) {
            CHECK(e.detail() == "{broken");
        }
    }

    TEST_CASE("template rendering") {
        CHECK(render_template("Hi {{name}}, {x}", {{"name", "Ada"}}) == "Hi Ada, {x}");
        CHECK(code_of([] { render_template("{{missing}}", {}); }) == ErrorCode::Config);
        const auto& lib = PromptLibrary::instance();
        CHECK(lib.raw("judge_system.txt").find("only") != std::string::npos);
        CHECK(code_of([&] { lib.raw("does_not_exist.txt"); }) == ErrorCode::Config);
    }

    TEST_CASE("http backend speaks chat completions and retries transient failures") {
        httplib::Server server;
        std::atomic<int> hits{0};
        server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
            if (hits++ == 0) {
                res.status = 503;
                return;
            }
            const auto body = json::parse(req.body);
            const std::string echo = body["messages"].back()["content"].get<std::string>();
            const json reply{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", "echo:" + echo}}}}})},
                             {"usage", {{"prompt_tokens", 11}, {"completion_tokens", 7}}}};
            res.set_content(reply.dump(), "application/json");
        });
        server.Post("/bad", [](const httplib::Request&, httplib::Response& res) { res.status = 400; });
        const int port = server.bind_to_any_port("127.0.0.1");
        std::thread t([&] { server.listen_after_bind(); });
        server.wait_until_ready();

        RemoteConfig rc;
        rc.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
        rc.model = "m";
        rc.initial_backoff = std::chrono::milliseconds(1);
        HttpChatBackend b(rc);
        const auto c = b.complete(request("hello"));
        CHECK(c.text == "echo:hello");
        CHECK(c.usage.prompt_tokens == 11);
        CHECK(b.ledger().total().output_tokens == 7);
        CHECK(hits == 2);

        RemoteConfig bad = rc;
        bad.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/bad";
        HttpChatBackend b2(bad);
        CHECK(code_of([&] { b2.complete(request("x")); }) == ErrorCode::Transport);

        server.stop();
        t.join();
    }
}
