#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "aggquery/llm.hpp"
#include "aggquery/query.hpp"

namespace aggquery {

/// Per-code clarification templates, loaded from a JSON config of the form
/// {"A1": {"question": "...", "prompt": "...", "default": "..."}, ...}.
/// Placeholders: {{fragment}}, {{question}}, {{entity_type}}, {{code}}.
class ClarificationTemplates {
public:
    struct Entry {
        std::string question;
        std::string prompt;
        std::string default_answer;
    };

    ClarificationTemplates() = default;
    explicit ClarificationTemplates(std::map<AmbiguityCode, Entry> entries) : entries_(std::move(entries)) {}
    static ClarificationTemplates load(const std::filesystem::path& path);
    static ClarificationTemplates from_json(const nlohmann::json& j);
    /// clarifications.json from the prompt library.
    static const ClarificationTemplates& defaults();

    /// Throws Config when the code has no template.
    const Entry& at(AmbiguityCode code) const;
    bool contains(AmbiguityCode code) const { return entries_.count(code) != 0; }

private:
    std::map<AmbiguityCode, Entry> entries_;
};

/// Heuristic "How many <entity> <condition>?" parser used when no backend
/// is configured. Entity type is the singularised head noun.
QuerySpec parse_query_rules(const std::string& raw, std::string query_id = "q");

/// LLM extraction of (T, Φ, composition). A null backend uses the rules.
QuerySpec parse_query(const std::string& raw, LlmBackend* backend, std::string query_id = "q");

/// Deterministic pattern classifier (pure function of the query text):
/// gradable adjectives → A1, relative time/space phrases → A2, negation
/// combined with a quantifier → B1, stacked prepositional modifiers → B2,
/// granularity-sensitive entity words → C1, "distinct"/"unique" → C2.
std::vector<AmbiguityLabel> classify_ambiguity_rules(const QuerySpec& q);

/// LLM classifier with the taxonomy embedded in the prompt; codes outside
/// the taxonomy are dropped. A null backend uses the rules.
std::vector<AmbiguityLabel> classify_ambiguity(const QuerySpec& q, LlmBackend* backend);

/// One clarification per label; question text from the template for the
/// label's code (filled directly, or generated by the backend when given).
std::vector<Clarification> generate_clarifications(const QuerySpec& q, const std::vector<AmbiguityLabel>& labels,
                                                   LlmBackend* backend,
                                                   const ClarificationTemplates& templates = ClarificationTemplates::defaults());

/// Records the answer as a constraint on the clarification's target and
/// marks the clarification resolved in the returned copy. A2 answers are
/// split on ',', ';' and '&' into separate window notes. Existing identical
/// notes are not duplicated.
QuerySpec apply_answer(const QuerySpec& q, const Clarification& c, const std::string& answer);

/// Resolves with the template's default interpretation (flagged as default).
QuerySpec skip_clarification(const QuerySpec& q, const Clarification& c,
                             const ClarificationTemplates& templates = ClarificationTemplates::defaults());

enum class RewriteMode { ClassificationGuided, Direct };

/// Guided mode requires every clarification resolved and embeds every
/// constraint text verbatim; a C1 resolution naming a unit ("paper level")
/// replaces the entity type. Direct mode rewrites from the answers alone.
QuerySpec rewrite_query(const QuerySpec& q, RewriteMode mode, LlmBackend* backend);

} // namespace aggquery
