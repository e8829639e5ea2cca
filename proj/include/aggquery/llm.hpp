#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "aggquery/text_index.hpp"

namespace aggquery {

enum class Purpose { Parse, Classify, Clarify, Rewrite, Plan, Judge, Probe };
inline constexpr std::size_t kPurposeCount = 7;

std::string_view to_string(Purpose p);
Purpose purpose_from_string(std::string_view s);

struct Message {
    std::string role;
    std::string content;
};

struct CompletionRequest {
    std::vector<Message> messages;
    double temperature = 0.0;
    std::size_t max_output_tokens = 1024;
    Purpose purpose = Purpose::Judge;
    /// Optional stable key for scripted lookups; ignored by remote backends.
    std::string script_key;

    void validate() const;
    /// Hex FNV-1a over purpose and every (role, content) pair.
    std::string content_hash() const;
    std::string joined_content() const;
};

struct Usage {
    std::size_t prompt_tokens = 0;
    std::size_t output_tokens = 0;
};

struct Completion {
    std::string text;
    Usage usage;
};

struct BudgetCeilings {
    std::optional<std::size_t> max_calls;
    std::optional<std::size_t> max_prompt_tokens;
    std::optional<std::size_t> max_output_tokens;
};

/// Thread-safe call and token accounting. A call is refused once any
/// ceiling has been reached.
class BudgetLedger {
public:
    struct Totals {
        std::size_t calls = 0;
        std::size_t prompt_tokens = 0;
        std::size_t output_tokens = 0;
    };

    explicit BudgetLedger(BudgetCeilings ceilings = {}) : ceilings_(ceilings) {}

    /// Throws BudgetExceeded when a ceiling is already reached.
    void check() const;
    void record(Purpose purpose, const Usage& usage);

    Totals total() const;
    Totals for_purpose(Purpose p) const;
    const BudgetCeilings& ceilings() const noexcept { return ceilings_; }
    nlohmann::json to_json() const;

private:
    mutable std::mutex mu_;
    BudgetCeilings ceilings_;
    std::array<Totals, kPurposeCount> by_purpose_{};
    Totals total_;
};

class LlmBackend {
public:
    explicit LlmBackend(std::shared_ptr<BudgetLedger> ledger = nullptr);
    virtual ~LlmBackend() = default;
    LlmBackend(const LlmBackend&) = delete;
    LlmBackend& operator=(const LlmBackend&) = delete;

    virtual std::string name() const = 0;
    /// Context window in tokens, used to size judge batches.
    virtual std::size_t context_limit() const { return 8000; }

    /// Validates, checks the budget, dispatches and records usage.
    Completion complete(const CompletionRequest& req);

    BudgetLedger& ledger() noexcept { return *ledger_; }
    std::shared_ptr<BudgetLedger> shared_ledger() const noexcept { return ledger_; }

protected:
    virtual Completion dispatch(const CompletionRequest& req) = 0;

private:
    std::shared_ptr<BudgetLedger> ledger_;
};

Completion complete(const CompletionRequest& req, LlmBackend& backend);

/// Match rule for scripted responses. A `Key` entry matches a request whose
/// script_key or content_hash() equals it; a `Rule` matches on purpose and
/// an optional substring of the concatenated message contents.
struct ScriptKey {
    struct Rule {
        Purpose purpose;
        std::string contains;
        friend bool operator==(const Rule&, const Rule&) = default;
    };
    std::variant<std::string, Rule> match;

    static ScriptKey exact(std::string key) { return {std::move(key)}; }
    static ScriptKey rule(Purpose p, std::string contains = {}) { return {Rule{p, std::move(contains)}}; }
    static ScriptKey from_json(const nlohmann::json& j);
};

/// Offline backend: every response comes from a registered script entry.
/// Lookup order is exact keys first, then rules in registration order.
class ScriptedBackend final : public LlmBackend {
public:
    explicit ScriptedBackend(std::shared_ptr<BudgetLedger> ledger = nullptr, std::size_t context_limit = 8000)
        : LlmBackend(std::move(ledger)), context_limit_(context_limit) {}

    std::string name() const override { return "scripted"; }
    std::size_t context_limit() const override { return context_limit_; }

    void register_script(const ScriptKey& key, std::string response);
    /// Loads a JSON list of {"key", "response"} entries.
    void load_script_file(const std::filesystem::path& path);
    void load_script(const nlohmann::json& entries);
    std::size_t size() const;

protected:
    Completion dispatch(const CompletionRequest& req) override;

private:
    mutable std::mutex mu_;
    std::size_t context_limit_;
    std::map<std::string, std::string> exact_;
    std::vector<std::pair<ScriptKey::Rule, std::string>> rules_;
};

/// Backend driven by a function; used for fixtures whose responses are
/// computed from the prompt (for example a judge that reads chunk text).
class CallbackBackend final : public LlmBackend {
public:
    using Handler = std::function<std::string(const CompletionRequest&)>;
    explicit CallbackBackend(Handler handler, std::shared_ptr<BudgetLedger> ledger = nullptr,
                             std::size_t context_limit = 8000)
        : LlmBackend(std::move(ledger)), handler_(std::move(handler)), context_limit_(context_limit) {}

    std::string name() const override { return "callback"; }
    std::size_t context_limit() const override { return context_limit_; }

protected:
    Completion dispatch(const CompletionRequest& req) override;

private:
    Handler handler_;
    std::size_t context_limit_;
};

struct RemoteConfig {
    std::string endpoint;  // e.g. https://host/v1/chat/completions
    std::string model;
    std::string api_key;
    std::size_t max_parallel = 4;
    std::size_t max_retries = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::seconds timeout{120};
    std::size_t context_limit = 8000;
};

/// Chat-completions style JSON over HTTP(S).
class HttpChatBackend final : public LlmBackend {
public:
    explicit HttpChatBackend(RemoteConfig config, std::shared_ptr<BudgetLedger> ledger = nullptr);
    ~HttpChatBackend() override;

    std::string name() const override { return "http:" + config_.model; }
    std::size_t context_limit() const override { return config_.context_limit; }

protected:
    Completion dispatch(const CompletionRequest& req) override;

private:
    struct Gate;
    RemoteConfig config_;
    std::unique_ptr<Gate> gate_;
};

/// Embeddings endpoint (`{"model", "input": [...]}` → `data[i].embedding`).
class HttpEmbeddingProvider final : public EmbeddingProvider {
public:
    HttpEmbeddingProvider(RemoteConfig config, std::size_t dimension);
    std::string name() const override { return "http:" + config_.model; }
    std::size_t dimension() const override { return dimension_; }
    std::vector<FeatureVector> embed(std::span<const std::string> texts) override;

private:
    RemoteConfig config_;
    std::size_t dimension_;
};

/// POSTs JSON with bounded exponential backoff on connection errors, 429
/// and 5xx. Other HTTP errors fail immediately.
nlohmann::json post_json_with_retry(const RemoteConfig& config, const nlohmann::json& body);

/// Builds a backend from {"kind": "scripted"|"http", ...}; see README.
std::unique_ptr<LlmBackend> make_backend(const nlohmann::json& config,
                                         const std::filesystem::path& base_dir = {});

/// Extracts the JSON object from a model response (tolerates code fences
/// and surrounding prose). Throws Parse with the raw text as detail.
nlohmann::json parse_json_response(const std::string& raw, std::string_view what);

/// Prompt templates stored as files under a prompt directory. Placeholders
/// use {{name}} syntax.
class PromptLibrary {
public:
    explicit PromptLibrary(std::filesystem::path dir);
    /// AGGQUERY_PROMPT_DIR if set, else the directory shipped with the source.
    static const PromptLibrary& instance();
    static std::filesystem::path default_dir();

    const std::string& raw(const std::string& name) const;
    std::string render(const std::string& name, const std::map<std::string, std::string>& vars) const;
    const std::filesystem::path& dir() const noexcept { return dir_; }

private:
    std::filesystem::path dir_;
    mutable std::mutex mu_;
    mutable std::map<std::string, std::string> cache_;
};

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& vars);

} // namespace aggquery
