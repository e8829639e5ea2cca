#include "aggquery/llm.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <semaphore>
#include <sstream>
#include <thread>

#include "httplib.h"

#include "aggquery/error.hpp"
#include "aggquery/jsonl.hpp"
#include "aggquery/text.hpp"

#ifndef AGGQUERY_DEFAULT_PROMPT_DIR
#define AGGQUERY_DEFAULT_PROMPT_DIR "prompts"
#endif

namespace aggquery {

using nlohmann::json;

namespace {
constexpr std::array<std::string_view, kPurposeCount> kPurposeNames = {"parse", "classify", "clarify", "rewrite",
                                                                       "plan",  "judge",    "probe"};
}

std::string_view to_string(Purpose p) { return kPurposeNames[static_cast<std::size_t>(p)]; }

Purpose purpose_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kPurposeNames.size(); ++i) {
        if (kPurposeNames[i] == s) return static_cast<Purpose>(i);
    }
    throw Error(ErrorCode::Schema, "unknown purpose: " + std::string(s));
}

void CompletionRequest::validate() const {
    if (messages.empty()) throw Error(ErrorCode::InvalidArgument, "completion request has no messages");
    if (temperature < 0.0) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 0");
}

std::string CompletionRequest::joined_content() const {
    std::string out;
    for (const auto& m : messages) {
        out += m.content;
        out += '\n';
    }
    return out;
}

std::string CompletionRequest::content_hash() const {
    std::uint64_t h = text::fnv1a64(to_string(purpose));
    for (const auto& m : messages) {
        h = text::fnv1a64(std::string_view("\x1f", 1), h);
        h = text::fnv1a64(m.role, h);
        h = text::fnv1a64(std::string_view("\x1e", 1), h);
        h = text::fnv1a64(m.content, h);
    }
    return text::hex64(h);
}

void BudgetLedger::check() const {
    std::lock_guard lock(mu_);
    auto reached = [](const std::optional<std::size_t>& ceiling, std::size_t value) {
        return ceiling && value >= *ceiling;
    };
    if (reached(ceilings_.max_calls, total_.calls)) {
        throw Error(ErrorCode::BudgetExceeded, "call budget exhausted (" + std::to_string(total_.calls) + " calls)");
    }
    if (reached(ceilings_.max_prompt_tokens, total_.prompt_tokens)) {
        throw Error(ErrorCode::BudgetExceeded, "prompt token budget exhausted");
    }
    if (reached(ceilings_.max_output_tokens, total_.output_tokens)) {
        throw Error(ErrorCode::BudgetExceeded, "output token budget exhausted");
    }
}

void BudgetLedger::record(Purpose purpose, const Usage& usage) {
    std::lock_guard lock(mu_);
    auto& slot = by_purpose_[static_cast<std::size_t>(purpose)];
    for (Totals* t : {&slot, &total_}) {
        t->calls += 1;
        t->prompt_tokens += usage.prompt_tokens;
        t->output_tokens += usage.output_tokens;
    }
}

BudgetLedger::Totals BudgetLedger::total() const {
    std::lock_guard lock(mu_);
    return total_;
}

BudgetLedger::Totals BudgetLedger::for_purpose(Purpose p) const {
    std::lock_guard lock(mu_);
    return by_purpose_[static_cast<std::size_t>(p)];
}

json BudgetLedger::to_json() const {
    std::lock_guard lock(mu_);
    auto row = [](const Totals& t) {
        return json{{"calls", t.calls}, {"prompt_tokens", t.prompt_tokens}, {"output_tokens", t.output_tokens}};
    };
    json by = json::object();
    for (std::size_t i = 0; i < kPurposeCount; ++i) by[std::string(kPurposeNames[i])] = row(by_purpose_[i]);
    return {{"total", row(total_)}, {"by_purpose", by}};
}

LlmBackend::LlmBackend(std::shared_ptr<BudgetLedger> ledger)
    : ledger_(ledger ? std::move(ledger) : std::make_shared<BudgetLedger>()) {}

Completion LlmBackend::complete(const CompletionRequest& req) {
    req.validate();
    ledger_->check();
    Completion c = dispatch(req);
    ledger_->record(req.purpose, c.usage);
    return c;
}

Completion complete(const CompletionRequest& req, LlmBackend& backend) { return backend.complete(req); }

namespace {

Usage estimate_usage(const CompletionRequest& req, const std::string& response) {
    Usage u;
    for (const auto& m : req.messages) u.prompt_tokens += text::count_tokens(m.content);
    u.output_tokens = text::count_tokens(response);
    return u;
}

} // namespace

ScriptKey ScriptKey::from_json(const json& j) {
    if (j.is_string()) return exact(j.get<std::string>());
    if (j.is_object() && j.contains("purpose")) {
        return rule(purpose_from_string(j.at("purpose").get<std::string>()), j.value("contains", std::string()));
    }
    throw Error(ErrorCode::Schema, "script key must be a string or {purpose, contains}: " + j.dump());
}

void ScriptedBackend::register_script(const ScriptKey& key, std::string response) {
    std::lock_guard lock(mu_);
    if (const auto* k = std::get_if<std::string>(&key.match)) {
        if (!exact_.emplace(*k, std::move(response)).second) {
            throw Error(ErrorCode::Duplicate, "script key already registered: " + *k);
        }
        return;
    }
    const auto& r = std::get<ScriptKey::Rule>(key.match);
    for (const auto& [existing, _] : rules_) {
        if (existing == r) {
            throw Error(ErrorCode::Duplicate, "script rule already registered: " + std::string(to_string(r.purpose)) +
                                                  " contains \"" + r.contains + "\"");
        }
    }
    rules_.emplace_back(r, std::move(response));
}

void ScriptedBackend::load_script(const json& entries) {
    if (!entries.is_array()) throw Error(ErrorCode::Schema, "script must be a JSON list of {key, response}");
    for (const auto& e : entries) {
        if (!e.contains("key") || !e.contains("response")) {
            throw Error(ErrorCode::Schema, "script entry requires key and response: " + e.dump());
        }
        const auto& resp = e.at("response");
        register_script(ScriptKey::from_json(e.at("key")), resp.is_string() ? resp.get<std::string>() : resp.dump());
    }
}

void ScriptedBackend::load_script_file(const std::filesystem::path& path) { load_script(read_json_file(path)); }

std::size_t ScriptedBackend::size() const {
    std::lock_guard lock(mu_);
    return exact_.size() + rules_.size();
}

Completion ScriptedBackend::dispatch(const CompletionRequest& req) {
    std::lock_guard lock(mu_);
    const std::string* hit = nullptr;
    if (!req.script_key.empty()) {
        if (auto it = exact_.find(req.script_key); it != exact_.end()) hit = &it->second;
    }
    const std::string hash = req.content_hash();
    if (hit == nullptr) {
        if (auto it = exact_.find(hash); it != exact_.end()) hit = &it->second;
    }
    if (hit == nullptr) {
        const std::string body = req.joined_content();
        for (const auto& [rule, response] : rules_) {
            if (rule.purpose == req.purpose && body.find(rule.contains) != std::string::npos) {
                hit = &response;
                break;
            }
        }
    }
    if (hit == nullptr) {
        std::string where = "purpose=" + std::string(to_string(req.purpose)) + " hash=" + hash;
        if (!req.script_key.empty()) where += " script_key=" + req.script_key;
        throw Error(ErrorCode::Unscripted, "unscripted prompt (" + where + ")", req.joined_content());
    }
    return {*hit, estimate_usage(req, *hit)};
}

Completion CallbackBackend::dispatch(const CompletionRequest& req) {
    std::string out = handler_(req);
    return {out, estimate_usage(req, out)};
}

namespace {

struct ParsedUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

ParsedUrl split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw Error(ErrorCode::Config, "endpoint must be an absolute URL: " + url);
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
}

} // namespace

json post_json_with_retry(const RemoteConfig& config, const json& body) {
    const auto url = split_url(config.endpoint);
    httplib::Client client(url.origin);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(config.timeout).count());
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(config.timeout).count());
    httplib::Headers headers;
    if (!config.api_key.empty()) headers.emplace("Authorization", "Bearer " + config.api_key);

    std::string last_cause;
    auto backoff = config.initial_backoff;
    for (std::size_t attempt = 0; attempt <= config.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        auto res = client.Post(url.path, headers, body.dump(), "application/json");
        if (!res) {
            last_cause = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_cause = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512);
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            throw Error(ErrorCode::Transport, "HTTP " + std::to_string(res->status) + " from " + config.endpoint,
                        res->body);
        }
        try {
            return json::parse(res->body);
        } catch (const json::exception&) {
            throw Error(ErrorCode::Transport, "non-JSON response from " + config.endpoint, res->body);
        }
    }
    throw Error(ErrorCode::Transport,
                "request to " + config.endpoint + " failed after " + std::to_string(config.max_retries + 1) +
                    " attempts",
                last_cause);
}

struct HttpChatBackend::Gate {
    explicit Gate(std::size_t n) : slots(static_cast<std::ptrdiff_t>(std::max<std::size_t>(n, 1))) {}
    std::counting_semaphore<1024> slots;
};

HttpChatBackend::HttpChatBackend(RemoteConfig config, std::shared_ptr<BudgetLedger> ledger)
    : LlmBackend(std::move(ledger)), config_(std::move(config)), gate_(std::make_unique<Gate>(config_.max_parallel)) {
    if (config_.endpoint.empty() || config_.model.empty()) {
        throw Error(ErrorCode::Config, "remote backend requires endpoint and model");
    }
}

HttpChatBackend::~HttpChatBackend() = default;

Completion HttpChatBackend::dispatch(const CompletionRequest& req) {
    json messages = json::array();
    for (const auto& m : req.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    json body = {{"model", config_.model},
                 {"messages", messages},
                 {"temperature", req.temperature},
                 {"max_tokens", req.max_output_tokens}};

    gate_->slots.acquire();
    json reply;
    try {
        reply = post_json_with_retry(config_, body);
    } catch (...) {
        gate_->slots.release();
        throw;
    }
    gate_->slots.release();

    Completion c;
    try {
        c.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception&) {
        throw Error(ErrorCode::Transport, "chat response missing choices[0].message.content", reply.dump());
    }
    c.usage = estimate_usage(req, c.text);
    if (reply.contains("usage") && reply["usage"].is_object()) {
        c.usage.prompt_tokens = reply["usage"].value("prompt_tokens", c.usage.prompt_tokens);
        c.usage.output_tokens = reply["usage"].value("completion_tokens", c.usage.output_tokens);
    }
    return c;
}

HttpEmbeddingProvider::HttpEmbeddingProvider(RemoteConfig config, std::size_t dimension)
    : config_(std::move(config)), dimension_(dimension) {
    if (config_.endpoint.empty() || config_.model.empty()) {
        throw Error(ErrorCode::Config, "embedding provider requires endpoint and model");
    }
}

std::vector<FeatureVector> HttpEmbeddingProvider::embed(std::span<const std::string> texts) {
    if (texts.empty()) return {};
    json body = {{"model", config_.model}, {"input", std::vector<std::string>(texts.begin(), texts.end())}};
    const json reply = post_json_with_retry(config_, body);
    std::vector<FeatureVector> out;
    try {
        for (const auto& row : reply.at("data")) {
            out.push_back({FeatureKind::Embedding, row.at("embedding").get<std::vector<double>>()});
        }
    } catch (const json::exception&) {
        throw Error(ErrorCode::Transport, "embedding response missing data[].embedding", reply.dump());
    }
    return out;
}

std::unique_ptr<LlmBackend> make_backend(const json& config, const std::filesystem::path& base_dir) {
    BudgetCeilings ceilings;
    if (config.contains("budget")) {
        const auto& b = config.at("budget");
        if (b.contains("max_calls")) ceilings.max_calls = b.at("max_calls").get<std::size_t>();
        if (b.contains("max_prompt_tokens")) ceilings.max_prompt_tokens = b.at("max_prompt_tokens").get<std::size_t>();
        if (b.contains("max_output_tokens")) ceilings.max_output_tokens = b.at("max_output_tokens").get<std::size_t>();
    }
    auto ledger = std::make_shared<BudgetLedger>(ceilings);
    const std::string kind = config.value("kind", std::string("scripted"));
    const std::size_t ctx = config.value("context_limit", std::size_t{8000});
    if (kind == "scripted") {
        auto backend = std::make_unique<ScriptedBackend>(ledger, ctx);
        if (config.contains("script")) {
            std::filesystem::path p = config.at("script").get<std::string>();
            if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
            backend->load_script_file(p);
        }
        if (config.contains("entries")) backend->load_script(config.at("entries"));
        return backend;
    }
    if (kind == "http") {
        RemoteConfig rc;
        rc.endpoint = config.value("endpoint", std::string());
        rc.model = config.value("model", std::string());
        const std::string key_env = config.value("api_key_env", std::string("AGGQUERY_API_KEY"));
        if (const char* key = std::getenv(key_env.c_str())) rc.api_key = key;
        rc.max_parallel = config.value("max_parallel", rc.max_parallel);
        rc.max_retries = config.value("max_retries", rc.max_retries);
        rc.initial_backoff = std::chrono::milliseconds(config.value("initial_backoff_ms", 500));
        rc.context_limit = ctx;
        return std::make_unique<HttpChatBackend>(std::move(rc), ledger);
    }
    throw Error(ErrorCode::Config, "unknown backend kind: " + kind);
}

json parse_json_response(const std::string& raw, std::string_view what) {
    const auto open_obj = raw.find('{');
    const auto open_arr = raw.find('[');
    const auto open = std::min(open_obj, open_arr);
    if (open == std::string::npos) {
        throw Error(ErrorCode::Parse, std::string(what) + ": response contains no JSON", raw);
    }
    const char close_ch = raw[open] == '{' ? '}' : ']';
    const auto close = raw.rfind(close_ch);
    if (close == std::string::npos || close < open) {
        throw Error(ErrorCode::Parse, std::string(what) + ": unterminated JSON in response", raw);
    }
    try {
        return json::parse(raw.substr(open, close - open + 1));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Parse, std::string(what) + ": malformed JSON (" + e.what() + ")", raw);
    }
}

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const auto open = tmpl.find("{{", pos);
        if (open == std::string::npos) {
            out.append(tmpl, pos, std::string::npos);
            break;
        }
        const auto close = tmpl.find("}}", open + 2);
        if (close == std::string::npos) throw Error(ErrorCode::Config, "unterminated placeholder in template");
        out.append(tmpl, pos, open - pos);
        const std::string name = text::trim(std::string_view(tmpl).substr(open + 2, close - open - 2));
        auto it = vars.find(name);
        if (it == vars.end()) throw Error(ErrorCode::Config, "template placeholder has no value: " + name);
        out += it->second;
        pos = close + 2;
    }
    return out;
}

PromptLibrary::PromptLibrary(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path PromptLibrary::default_dir() {
    if (const char* env = std::getenv("AGGQUERY_PROMPT_DIR"); env != nullptr && *env != '\0') return env;
    return AGGQUERY_DEFAULT_PROMPT_DIR;
}

const PromptLibrary& PromptLibrary::instance() {
    static const PromptLibrary lib(default_dir());
    return lib;
}

const std::string& PromptLibrary::raw(const std::string& name) const {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    const auto path = dir_ / name;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Config, "missing prompt template " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return cache_.emplace(name, buf.str()).first->second;
}

std::string PromptLibrary::render(const std::string& name, const std::map<std::string, std::string>& vars) const {
    return render_template(raw(name), vars);
}

} // namespace aggquery
