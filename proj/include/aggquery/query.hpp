#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace aggquery {

enum class AmbiguityCode { A1, A2, B1, B2, C1, C2, C3 };

std::string_view to_string(AmbiguityCode code);
/// Throws Schema for codes outside the closed taxonomy.
AmbiguityCode ambiguity_code_from_string(std::string_view s);
std::optional<AmbiguityCode> try_ambiguity_code(std::string_view s);

/// Marker used as a label/constraint target when it applies to the whole query.
inline constexpr const char* kWholeQuery = "*";

/// An interpretation confirmed by the user (or a recorded default).
struct ResolvedConstraint {
    AmbiguityCode code = AmbiguityCode::A1;
    std::string clarification_id;
    std::string text;
    bool is_default = false;

    friend bool operator==(const ResolvedConstraint&, const ResolvedConstraint&) = default;
};

struct Condition {
    std::string id;
    std::string text;
    std::vector<ResolvedConstraint> constraints;

    friend bool operator==(const Condition&, const Condition&) = default;
};

/// Boolean composition over condition ids.
struct Composition {
    enum class Op { Leaf, And, Or };
    Op op = Op::Leaf;
    std::string condition_id;
    std::vector<Composition> children;

    static Composition leaf(std::string id) { return {Op::Leaf, std::move(id), {}}; }
    static Composition all_of(std::vector<Composition> c) { return {Op::And, {}, std::move(c)}; }
    static Composition any_of(std::vector<Composition> c) { return {Op::Or, {}, std::move(c)}; }

    /// Missing verdicts count as false.
    bool evaluate(const std::map<std::string, bool>& verdicts) const;
    void collect_leaves(std::vector<std::string>& out) const;

    friend bool operator==(const Composition&, const Composition&) = default;
};

struct AmbiguityLabel {
    AmbiguityCode code = AmbiguityCode::A1;
    std::string rationale;
    std::string target = kWholeQuery;
    std::string fragment;

    friend bool operator==(const AmbiguityLabel&, const AmbiguityLabel&) = default;
};

struct Clarification {
    std::string id;
    AmbiguityCode code = AmbiguityCode::A1;
    std::string target = kWholeQuery;
    std::string fragment;
    std::string question;
    std::optional<std::string> answer;
    std::string resolution_note;
    bool skipped = false;

    bool resolved() const noexcept { return answer.has_value(); }
    friend bool operator==(const Clarification&, const Clarification&) = default;
};

struct QuerySpec {
    std::string query_id;
    std::string raw_text;
    /// Question as first submitted; rewrites always start from it.
    std::string original_text;
    std::string entity_type;
    std::vector<Condition> conditions;
    Composition composition;
    std::vector<ResolvedConstraint> query_constraints;
    std::vector<Clarification> clarifications;

    /// Enforces: one entity type, non-empty composition whose leaves are
    /// known conditions, non-empty predicate texts.
    void validate() const;
    const Condition* find_condition(const std::string& id) const;
    Condition* find_condition(const std::string& id);
    std::vector<std::string> pending_clarifications() const;

    friend bool operator==(const QuerySpec&, const QuerySpec&) = default;
};

nlohmann::json to_json(const Composition& c);
Composition composition_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AmbiguityLabel& l);
nlohmann::json to_json(const Clarification& c);
Clarification clarification_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QuerySpec& q);
QuerySpec query_from_json(const nlohmann::json& j);

} // namespace aggquery
