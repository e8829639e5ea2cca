#include "aggquery/query.hpp"

#include <array>
#include <set>

#include "aggquery/error.hpp"

namespace aggquery {

using nlohmann::json;

namespace {
constexpr std::array<std::string_view, 7> kCodeNames = {"A1", "A2", "B1", "B2", "C1", "C2", "C3"};
}

std::string_view to_string(AmbiguityCode code) { return kCodeNames[static_cast<std::size_t>(code)]; }

std::optional<AmbiguityCode> try_ambiguity_code(std::string_view s) {
    for (std::size_t i = 0; i < kCodeNames.size(); ++i) {
        if (kCodeNames[i] == s) return static_cast<AmbiguityCode>(i);
    }
    return std::nullopt;
}

AmbiguityCode ambiguity_code_from_string(std::string_view s) {
    if (auto c = try_ambiguity_code(s)) return *c;
    throw Error(ErrorCode::Schema, "ambiguity code outside taxonomy: " + std::string(s));
}

bool Composition::evaluate(const std::map<std::string, bool>& verdicts) const {
    switch (op) {
    case Op::Leaf: {
        auto it = verdicts.find(condition_id);
        return it != verdicts.end() && it->second;
    }
    case Op::And:
        for (const auto& c : children) {
            if (!c.evaluate(verdicts)) return false;
        }
        return !children.empty();
    case Op::Or:
        for (const auto& c : children) {
            if (c.evaluate(verdicts)) return true;
        }
        return false;
    }
    return false;
}

void Composition::collect_leaves(std::vector<std::string>& out) const {
    if (op == Op::Leaf) {
        out.push_back(condition_id);
        return;
    }
    for (const auto& c : children) c.collect_leaves(out);
}

void QuerySpec::validate() const {
    if (entity_type.empty()) throw Error(ErrorCode::Schema, "query " + query_id + ": entity_type is empty");
    if (conditions.empty()) throw Error(ErrorCode::Schema, "query " + query_id + ": no conditions");
    std::set<std::string> ids;
    for (const auto& c : conditions) {
        if (c.id.empty()) throw Error(ErrorCode::Schema, "query " + query_id + ": condition without id");
        if (c.text.empty()) throw Error(ErrorCode::Schema, "query " + query_id + ": condition " + c.id + " has no text");
        if (!ids.insert(c.id).second) throw Error(ErrorCode::Schema, "query " + query_id + ": duplicate condition " + c.id);
    }
    std::vector<std::string> leaves;
    composition.collect_leaves(leaves);
    if (leaves.empty()) throw Error(ErrorCode::Schema, "query " + query_id + ": empty composition");
    for (const auto& l : leaves) {
        if (!ids.count(l)) throw Error(ErrorCode::Schema, "query " + query_id + ": composition references unknown condition " + l);
    }
}

const Condition* QuerySpec::find_condition(const std::string& id) const {
    for (const auto& c : conditions) {
        if (c.id == id) return &c;
    }
    return nullptr;
}

Condition* QuerySpec::find_condition(const std::string& id) {
    for (auto& c : conditions) {
        if (c.id == id) return &c;
    }
    return nullptr;
}

std::vector<std::string> QuerySpec::pending_clarifications() const {
    std::vector<std::string> out;
    for (const auto& c : clarifications) {
        if (!c.resolved()) out.push_back(c.id);
    }
    return out;
}

json to_json(const Composition& c) {
    switch (c.op) {
    case Composition::Op::Leaf: return {{"op", "leaf"}, {"condition", c.condition_id}};
    case Composition::Op::And:
    case Composition::Op::Or: {
        json kids = json::array();
        for (const auto& k : c.children) kids.push_back(to_json(k));
        return {{"op", c.op == Composition::Op::And ? "and" : "or"}, {"children", kids}};
    }
    }
    return {};
}

Composition composition_from_json(const json& j) {
    if (!j.is_object() || !j.contains("op")) throw Error(ErrorCode::Schema, "composition node requires op");
    const auto op = j.at("op").get<std::string>();
    if (op == "leaf") {
        return Composition::leaf(j.contains("condition") ? j.at("condition").get<std::string>()
                                                         : j.at("condition_id").get<std::string>());
    }
    if (op != "and" && op != "or") throw Error(ErrorCode::Schema, "composition op must be leaf, and, or: " + op);
    std::vector<Composition> kids;
    for (const auto& k : j.at("children")) kids.push_back(composition_from_json(k));
    if (kids.empty()) throw Error(ErrorCode::Schema, "composition node '" + op + "' has no children");
    return op == "and" ? Composition::all_of(std::move(kids)) : Composition::any_of(std::move(kids));
}

namespace {

json to_json(const ResolvedConstraint& r) {
    return {{"code", to_string(r.code)}, {"clarification_id", r.clarification_id}, {"text", r.text},
            {"is_default", r.is_default}};
}

ResolvedConstraint constraint_from_json(const json& j) {
    return {ambiguity_code_from_string(j.at("code").get<std::string>()), j.value("clarification_id", std::string()),
            j.at("text").get<std::string>(), j.value("is_default", false)};
}

} // namespace

json to_json(const AmbiguityLabel& l) {
    return {{"code", to_string(l.code)}, {"rationale", l.rationale}, {"target", l.target}, {"fragment", l.fragment}};
}

json to_json(const Clarification& c) {
    json j = {{"clarification_id", c.id}, {"code", to_string(c.code)}, {"target", c.target},
              {"fragment", c.fragment}, {"question", c.question}, {"resolved", c.resolved()},
              {"resolution_note", c.resolution_note}, {"skipped", c.skipped}};
    j["answer"] = c.answer ? json(*c.answer) : json(nullptr);
    return j;
}

Clarification clarification_from_json(const json& j) {
    Clarification c;
    c.id = j.at("clarification_id").get<std::string>();
    c.code = ambiguity_code_from_string(j.at("code").get<std::string>());
    c.target = j.value("target", std::string(kWholeQuery));
    c.fragment = j.value("fragment", std::string());
    c.question = j.value("question", std::string());
    if (j.contains("answer") && j.at("answer").is_string()) c.answer = j.at("answer").get<std::string>();
    c.resolution_note = j.value("resolution_note", std::string());
    c.skipped = j.value("skipped", false);
    return c;
}

json to_json(const QuerySpec& q) {
    json conds = json::array();
    for (const auto& c : q.conditions) {
        json cons = json::array();
        for (const auto& r : c.constraints) cons.push_back(to_json(r));
        conds.push_back({{"condition_id", c.id}, {"text", c.text}, {"constraints", cons}});
    }
    json qc = json::array();
    for (const auto& r : q.query_constraints) qc.push_back(to_json(r));
    json clar = json::array();
    for (const auto& c : q.clarifications) clar.push_back(to_json(c));
    return {{"query_id", q.query_id},
            {"raw_text", q.raw_text},
            {"original_text", q.original_text},
            {"entity_type", q.entity_type},
            {"conditions", conds},
            {"composition", to_json(q.composition)},
            {"query_constraints", qc},
            {"clarifications", clar}};
}

QuerySpec query_from_json(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::Schema, "query spec must be a JSON object");
    for (const char* f : {"query_id", "raw_text", "entity_type", "conditions"}) {
        if (!j.contains(f)) throw Error(ErrorCode::Schema, std::string("query spec missing field: ") + f);
    }
    QuerySpec q;
    q.query_id = j.at("query_id").get<std::string>();
    q.raw_text = j.at("raw_text").get<std::string>();
    q.original_text = j.value("original_text", q.raw_text);
    if (q.original_text.empty()) q.original_text = q.raw_text;
    q.entity_type = j.at("entity_type").get<std::string>();
    std::vector<Composition> leaves;
    for (const auto& c : j.at("conditions")) {
        Condition cond;
        cond.id = c.contains("condition_id") ? c.at("condition_id").get<std::string>() : c.at("id").get<std::string>();
        cond.text = c.at("text").get<std::string>();
        if (c.contains("constraints")) {
            for (const auto& r : c.at("constraints")) cond.constraints.push_back(constraint_from_json(r));
        }
        leaves.push_back(Composition::leaf(cond.id));
        q.conditions.push_back(std::move(cond));
    }
    if (j.contains("composition")) {
        q.composition = composition_from_json(j.at("composition"));
    } else if (leaves.size() == 1) {
        q.composition = leaves.front();
    } else {
        q.composition = Composition::all_of(std::move(leaves));
    }
    if (j.contains("query_constraints")) {
        for (const auto& r : j.at("query_constraints")) q.query_constraints.push_back(constraint_from_json(r));
    }
    if (j.contains("clarifications")) {
        for (const auto& c : j.at("clarifications")) q.clarifications.push_back(clarification_from_json(c));
    }
    q.validate();
    return q;
}

} // namespace aggquery
