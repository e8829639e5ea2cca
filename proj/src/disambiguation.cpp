#include "aggquery/disambiguation.hpp"

#include <algorithm>
#include <regex>
#include <set>

#include "aggquery/error.hpp"
#include "aggquery/jsonl.hpp"
#include "aggquery/text.hpp"

namespace aggquery {

using nlohmann::json;

ClarificationTemplates ClarificationTemplates::from_json(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::Config, "clarification templates must be a JSON object");
    std::map<AmbiguityCode, Entry> entries;
    for (const auto& [code, e] : j.items()) {
        auto parsed = try_ambiguity_code(code);
        if (!parsed) throw Error(ErrorCode::Config, "clarification template for unknown code " + code);
        if (!e.contains("question")) throw Error(ErrorCode::Config, "clarification template " + code + " lacks question");
        entries[*parsed] = {e.at("question").get<std::string>(), e.value("prompt", std::string()),
                            e.value("default", std::string())};
    }
    return ClarificationTemplates(std::move(entries));
}

ClarificationTemplates ClarificationTemplates::load(const std::filesystem::path& path) {
    try {
        return from_json(read_json_file(path));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::Io) throw Error(ErrorCode::Config, "missing clarification templates: " + path.string());
        throw;
    }
}

const ClarificationTemplates& ClarificationTemplates::defaults() {
    static const ClarificationTemplates t = load(PromptLibrary::instance().dir() / "clarifications.json");
    return t;
}

const ClarificationTemplates::Entry& ClarificationTemplates::at(AmbiguityCode code) const {
    auto it = entries_.find(code);
    if (it == entries_.end()) {
        throw Error(ErrorCode::Config, "no clarification template for " + std::string(to_string(code)));
    }
    return it->second;
}

namespace {

// Word tokens of the question with surrounding punctuation removed; `lower`
// is the case-folded form of each surface token.
struct Words {
    std::vector<std::string> surface;
    std::vector<std::string> lower;
};

Words split_words(const std::string& raw) {
    Words w;
    for (auto tok : text::whitespace_split(raw)) {
        std::string_view s = tok;
        while (!s.empty() && std::ispunct(static_cast<unsigned char>(s.front())) && s.front() != '\'') s.remove_prefix(1);
        while (!s.empty() && std::ispunct(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        if (s.empty()) continue;
        w.surface.emplace_back(s);
        w.lower.push_back(text::fold_case(s));
    }
    return w;
}

std::string join(const std::vector<std::string>& v, std::size_t from, std::size_t to, const char* sep = " ") {
    std::string out;
    for (std::size_t i = from; i < to && i < v.size(); ++i) {
        if (!out.empty()) out += sep;
        out += v[i];
    }
    return out;
}

std::string singularize(const std::string& w) {
    auto ends = [&](std::string_view suf) {
        return w.size() > suf.size() && std::string_view(w).substr(w.size() - suf.size()) == suf;
    };
    if (ends("ies")) return w.substr(0, w.size() - 3) + "y";
    if (ends("sses") || ends("ches") || ends("shes") || ends("xes")) return w.substr(0, w.size() - 2);
    if (ends("ss") || ends("us") || ends("is")) return w;
    if (ends("s")) return w.substr(0, w.size() - 1);
    return w;
}

const std::set<std::string>& boundary_words() {
    static const std::set<std::string> s = {
        "are", "is", "were", "was", "be", "been", "did", "do", "does", "have", "has", "had", "that", "which",
        "who", "whose", "where", "can", "could", "will", "would", "should", "may", "might", "must",
        "mention", "mentions", "mentioned", "use", "uses", "used", "apply", "applies", "applied",
        "appear", "appears", "appeared", "contain", "contains", "report", "reports", "reported",
        "propose", "proposes", "proposed", "include", "includes", "opened", "released", "published",
        "discovered", "completed", "won", "achieve", "achieves", "achieved", "evaluate", "evaluated"};
    return s;
}

const std::set<std::string>& noun_phrase_stops() {
    static const std::set<std::string> s = {"on", "in", "about", "from", "with", "at", "by", "for", "of", "to",
                                            "near", "during", "within", "under", "over", "across", "regarding"};
    return s;
}

bool ends_with(std::string_view s, std::string_view suf) {
    return s.size() >= suf.size() && s.substr(s.size() - suf.size()) == suf;
}

} // namespace

QuerySpec parse_query_rules(const std::string& raw, std::string query_id) {
    if (text::trim(raw).empty()) throw Error(ErrorCode::InvalidArgument, "query text is empty");
    const Words w = split_words(raw);
    QuerySpec q;
    q.query_id = std::move(query_id);
    q.raw_text = text::trim(raw);
    q.original_text = q.raw_text;

    std::size_t start = 0;
    if (w.lower.size() >= 2 && w.lower[0] == "how" && w.lower[1] == "many") start = 2;
    else if (!w.lower.empty() && (w.lower[0] == "count" || w.lower[0] == "list")) start = 1;
    if (start < w.lower.size() && (w.lower[start] == "distinct" || w.lower[start] == "unique")) ++start;

    std::size_t head_end = start;
    while (head_end < w.lower.size() && !boundary_words().count(w.lower[head_end]) &&
           !(head_end > start && noun_phrase_stops().count(w.lower[head_end]))) {
        ++head_end;
    }
    // Without an explicit boundary, the noun phrase ends at the first word
    // after the head that looks like a past participle.
    if (head_end == w.lower.size()) {
        for (std::size_t i = start + 1; i < w.lower.size(); ++i) {
            if (ends_with(w.lower[i], "ed")) {
                head_end = i;
                break;
            }
        }
    }
    std::string rest;
    std::string head;
    if (head_end > start) {
        head = singularize(w.lower[head_end - 1]);
        rest = join(w.surface, head_end, w.surface.size());
        if (rest.empty()) rest = join(w.surface, start, head_end - 1);
    }
    q.entity_type = head.empty() ? "entity" : head;
    if (rest.empty()) rest = q.raw_text;

    // Top-level " and " / " or " split into separate conditions.
    auto split_on = [&](const std::string& sep) {
        std::vector<std::string> parts;
        std::size_t pos = 0;
        while (true) {
            auto at = rest.find(sep, pos);
            parts.push_back(text::trim(rest.substr(pos, at == std::string::npos ? std::string::npos : at - pos)));
            if (at == std::string::npos) break;
            pos = at + sep.size();
        }
        return parts;
    };
    const bool has_and = rest.find(" and ") != std::string::npos;
    const bool has_or = rest.find(" or ") != std::string::npos;
    std::vector<std::string> parts = {rest};
    Composition::Op op = Composition::Op::And;
    if (has_and != has_or) {
        parts = split_on(has_and ? " and " : " or ");
        op = has_and ? Composition::Op::And : Composition::Op::Or;
    }
    std::vector<Composition> leaves;
    for (const auto& p : parts) {
        if (p.empty()) continue;
        Condition c{"c" + std::to_string(q.conditions.size() + 1), p, {}};
        leaves.push_back(Composition::leaf(c.id));
        q.conditions.push_back(std::move(c));
    }
    if (leaves.size() == 1) q.composition = leaves.front();
    else q.composition = {op, {}, std::move(leaves)};
    q.validate();
    return q;
}

QuerySpec parse_query(const std::string& raw, LlmBackend* backend, std::string query_id) {
    if (text::trim(raw).empty()) throw Error(ErrorCode::InvalidArgument, "query text is empty");
    if (backend == nullptr) return parse_query_rules(raw, std::move(query_id));

    CompletionRequest req;
    req.purpose = Purpose::Parse;
    req.messages = {{"system", PromptLibrary::instance().raw("parse_system.txt")},
                    {"user", PromptLibrary::instance().render("parse_user.txt", {{"question", raw}})}};
    const auto reply = backend->complete(req);
    const json j = parse_json_response(reply.text, "parse_query");
    try {
        json spec = j;
        spec["query_id"] = query_id;
        spec["raw_text"] = text::trim(raw);
        spec["original_text"] = text::trim(raw);
        return query_from_json(spec);
    } catch (const Error& e) {
        throw Error(ErrorCode::Parse, std::string("parse_query: ") + e.what(), reply.text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Parse, std::string("parse_query: ") + e.what(), reply.text);
    }
}

namespace {

const std::set<std::string>& gradable_adjectives() {
    static const std::set<std::string> s = {
        "high-impact", "high", "low", "large", "small", "big", "major", "minor", "significant", "important",
        "influential", "prominent", "popular", "famous", "well-known", "leading", "top", "notable",
        "successful", "strong", "weak", "long", "short", "expensive", "cheap", "frequent", "rare",
        "good", "bad", "best", "worst", "highly", "heavily", "widely", "impactful", "renowned"};
    return s;
}

const std::set<std::string>& relative_window_words() {
    static const std::set<std::string> s = {"recently", "recent", "lately", "nowadays", "currently", "soon",
                                            "newly", "latest", "nearby"};
    return s;
}

const std::vector<std::vector<std::string>>& relative_window_phrases() {
    static const std::vector<std::vector<std::string>> p = {
        {"this", "decade"}, {"this", "year"},  {"this", "month"}, {"these", "days"},
        {"in", "the", "past"}, {"close", "to"}, {"far", "from"}, {"around", "here"}};
    return p;
}

const std::set<std::string>& negations() {
    static const std::set<std::string> s = {"not", "never", "no", "without", "none", "neither", "nor", "cannot"};
    return s;
}

const std::vector<std::vector<std::string>>& quantifiers() {
    static const std::vector<std::vector<std::string>> q = {
        {"at", "least"}, {"at", "most"}, {"more", "than"}, {"fewer", "than"}, {"less", "than"},
        {"exactly"}, {"all"}, {"every"}, {"each"}, {"any"}, {"only"}, {"both"}};
    return q;
}

const std::set<std::string>& auxiliaries() {
    static const std::set<std::string> s = {"did", "does", "do", "is", "are", "was", "were", "has", "have",
                                            "had", "can", "could", "will", "would", "should"};
    return s;
}

const std::set<std::string>& attachment_prepositions() {
    static const std::set<std::string> s = {"on", "in", "about", "from", "with", "at", "by", "for",
                                            "regarding", "within", "during", "under", "over", "across"};
    return s;
}

const std::set<std::string>& granularity_words() {
    static const std::set<std::string> s = {"experiment", "experiments", "run", "runs", "section", "sections",
                                            "result", "results", "trial", "trials", "evaluation", "evaluations",
                                            "study", "studies", "mention", "mentions"};
    return s;
}

bool phrase_at(const std::vector<std::string>& words, std::size_t i, const std::vector<std::string>& phrase) {
    if (i + phrase.size() > words.size()) return false;
    for (std::size_t k = 0; k < phrase.size(); ++k) {
        if (words[i + k] != phrase[k]) return false;
    }
    return true;
}

bool is_negation(const std::string& w) { return negations().count(w) != 0 || ends_with(w, "n't"); }

// Prepositions that open a quantifier phrase do not count as attachment sites.
bool starts_quantifier(const std::vector<std::string>& words, std::size_t i) {
    for (const auto& q : quantifiers()) {
        if (q.size() > 1 && phrase_at(words, i, q)) return true;
    }
    return false;
}

std::string target_for(const QuerySpec& q, const std::string& fragment) {
    const std::string needle = text::fold_case(fragment);
    for (const auto& c : q.conditions) {
        if (text::fold_case(c.text).find(needle) != std::string::npos) return c.id;
    }
    if (q.conditions.size() == 1) return q.conditions.front().id;
    return kWholeQuery;
}

} // namespace

std::vector<AmbiguityLabel> classify_ambiguity_rules(const QuerySpec& q) {
    const std::string& source = q.original_text.empty() ? q.raw_text : q.original_text;
    const Words w = split_words(source);
    const auto& lw = w.lower;
    std::vector<AmbiguityLabel> labels;
    auto add = [&](AmbiguityCode code, std::vector<std::string> fragments, std::string rationale) {
        if (fragments.empty()) return;
        AmbiguityLabel l;
        l.code = code;
        l.rationale = std::move(rationale);
        l.target = target_for(q, fragments.front());
        std::string joined;
        for (const auto& f : fragments) {
            if (!joined.empty()) joined += ", ";
            joined += f;
        }
        l.fragment = joined;
        labels.push_back(std::move(l));
    };

    std::vector<std::string> a1;
    for (std::size_t i = 0; i < lw.size(); ++i) {
        const auto& t = lw[i];
        if (gradable_adjectives().count(t) || t.rfind("high-", 0) == 0 || t.rfind("low-", 0) == 0) {
            if (t == "high" || t == "low") {
                // Bare high/low is gradable only as a modifier ("high citation count").
                if (i + 1 >= lw.size()) continue;
            }
            a1.push_back(w.surface[i]);
        }
    }
    add(AmbiguityCode::A1, a1, "gradable adjective without an explicit cut-off");

    std::vector<std::string> a2;
    for (std::size_t i = 0; i < lw.size(); ++i) {
        if (lw[i] == "near" && i + 1 < lw.size()) {
            a2.push_back(w.surface[i] + " " + w.surface[i + 1]);
            ++i;
            continue;
        }
        if (relative_window_words().count(lw[i])) {
            a2.push_back(w.surface[i]);
            continue;
        }
        for (const auto& p : relative_window_phrases()) {
            if (phrase_at(lw, i, p)) {
                a2.push_back(join(w.surface, i, i + p.size()));
                i += p.size() - 1;
                break;
            }
        }
    }
    add(AmbiguityCode::A2, a2, "relative time or distance phrase with an unknown window");

    for (std::size_t i = 0; i < lw.size(); ++i) {
        if (!is_negation(lw[i])) continue;
        bool found = false;
        for (std::size_t j = i + 1; j < lw.size() && j <= i + 6 && !found; ++j) {
            for (const auto& quant : quantifiers()) {
                if (!phrase_at(lw, j, quant)) continue;
                const std::size_t from = (i > 0 && auxiliaries().count(lw[i - 1])) ? i - 1 : i;
                const std::size_t to = std::min(lw.size(), j + quant.size() + 1);
                add(AmbiguityCode::B1, {join(w.surface, from, to)}, "negation interacts with a quantifier");
                found = true;
                break;
            }
        }
        if (found) break;
    }

    for (std::size_t i = 0; i < lw.size(); ++i) {
        if (!attachment_prepositions().count(lw[i]) || starts_quantifier(lw, i)) continue;
        bool found = false;
        for (std::size_t j = i + 2; j < lw.size() && j <= i + 4; ++j) {
            if (boundary_words().count(lw[j - 1])) break;
            if (!attachment_prepositions().count(lw[j]) || starts_quantifier(lw, j)) continue;
            std::size_t to = j + 1;
            while (to < lw.size() && to <= j + 3 && !boundary_words().count(lw[to]) &&
                   !attachment_prepositions().count(lw[to])) {
                ++to;
            }
            add(AmbiguityCode::B2, {join(w.surface, i, to)}, "stacked prepositional modifiers may attach to different heads");
            found = true;
            break;
        }
        if (found) break;
    }

    std::vector<std::string> c1;
    if (lw.size() >= 3 && lw[0] == "how" && lw[1] == "many") {
        for (std::size_t i = 2; i < lw.size() && !boundary_words().count(lw[i]); ++i) {
            if (granularity_words().count(lw[i])) c1.push_back(w.surface[i]);
        }
    }
    add(AmbiguityCode::C1, c1, "aggregation unit could be counted at several granularities");

    std::vector<std::string> c2;
    for (std::size_t i = 0; i < lw.size(); ++i) {
        if (lw[i] == "distinct" || lw[i] == "unique") c2.push_back(w.surface[i]);
    }
    add(AmbiguityCode::C2, c2, "deduplication rule across documents is unspecified");

    return labels;
}

std::vector<AmbiguityLabel> classify_ambiguity(const QuerySpec& q, LlmBackend* backend) {
    if (backend == nullptr) return classify_ambiguity_rules(q);
    CompletionRequest req;
    req.purpose = Purpose::Classify;
    req.messages = {{"system", PromptLibrary::instance().raw("classify_system.txt")},
                    {"user", PromptLibrary::instance().render("classify_user.txt",
                                                              {{"question", q.raw_text}, {"query", to_json(q).dump()}})}};
    const auto reply = backend->complete(req);
    json j;
    try {
        j = parse_json_response(reply.text, "classify_ambiguity");
    } catch (const Error&) {
        return {};
    }
    std::vector<AmbiguityLabel> out;
    const json& list = j.is_array() ? j : j.value("labels", json::array());
    for (const auto& row : list) {
        if (!row.is_object() || !row.contains("code") || !row.at("code").is_string()) continue;
        auto code = try_ambiguity_code(row.at("code").get<std::string>());
        if (!code) continue;
        AmbiguityLabel l;
        l.code = *code;
        l.rationale = row.value("rationale", std::string());
        l.fragment = row.value("fragment", std::string());
        l.target = row.value("target", std::string());
        if (l.target.empty() || (l.target != kWholeQuery && q.find_condition(l.target) == nullptr)) {
            l.target = l.fragment.empty() ? std::string(kWholeQuery) : target_for(q, l.fragment);
        }
        out.push_back(std::move(l));
    }
    return out;
}

std::vector<Clarification> generate_clarifications(const QuerySpec& q, const std::vector<AmbiguityLabel>& labels,
                                                   LlmBackend* backend, const ClarificationTemplates& templates) {
    std::vector<Clarification> out;
    for (const auto& l : labels) {
        const auto& entry = templates.at(l.code);
        const std::map<std::string, std::string> vars = {{"fragment", l.fragment},
                                                          {"question", q.raw_text},
                                                          {"entity_type", q.entity_type},
                                                          {"code", std::string(to_string(l.code))}};
        Clarification c;
        c.id = "clr-" + std::to_string(out.size() + 1);
        c.code = l.code;
        c.target = l.target;
        c.fragment = l.fragment;
        c.question = render_template(entry.question, vars);
        if (backend != nullptr && !entry.prompt.empty()) {
            CompletionRequest req;
            req.purpose = Purpose::Clarify;
            req.messages = {{"user", render_template(entry.prompt, vars)}};
            const std::string generated = text::trim(backend->complete(req).text);
            if (!generated.empty()) c.question = generated;
            if (!l.fragment.empty() && c.question.find(l.fragment) == std::string::npos) {
                c.question += " (regarding \"" + l.fragment + "\")";
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

std::vector<std::string> split_answer(AmbiguityCode code, const std::string& answer) {
    if (code != AmbiguityCode::A2) return {text::trim(answer)};
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : answer) {
        if (ch == ',' || ch == ';' || ch == '&') {
            if (auto t = text::trim(cur); !t.empty()) parts.push_back(t);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (auto t = text::trim(cur); !t.empty()) parts.push_back(t);
    return parts;
}

QuerySpec resolve(const QuerySpec& q, const Clarification& c, const std::string& answer, bool is_default) {
    if (c.resolved()) throw Error(ErrorCode::Conflict, "clarification " + c.id + " is already resolved");
    for (const auto& existing : q.clarifications) {
        if (existing.id == c.id && existing.resolved()) {
            throw Error(ErrorCode::Conflict, "clarification " + c.id + " is already resolved");
        }
    }
    if (text::trim(answer).empty()) throw Error(ErrorCode::InvalidArgument, "clarification answer is empty");

    QuerySpec out = q;
    std::vector<ResolvedConstraint>* sink = &out.query_constraints;
    if (c.target != kWholeQuery) {
        Condition* cond = out.find_condition(c.target);
        if (cond == nullptr) throw Error(ErrorCode::NotFound, "clarification targets unknown condition " + c.target);
        sink = &cond->constraints;
    }
    for (auto& note : split_answer(c.code, answer)) {
        const bool present = std::any_of(sink->begin(), sink->end(),
                                         [&](const ResolvedConstraint& r) { return r.text == note; });
        if (!present) sink->push_back({c.code, c.id, std::move(note), is_default});
    }

    Clarification done = c;
    done.answer = text::trim(answer);
    done.skipped = is_default;
    done.resolution_note = is_default ? "default interpretation: " + *done.answer : *done.answer;
    auto it = std::find_if(out.clarifications.begin(), out.clarifications.end(),
                           [&](const Clarification& x) { return x.id == c.id; });
    if (it == out.clarifications.end()) out.clarifications.push_back(std::move(done));
    else *it = std::move(done);
    return out;
}

std::optional<std::string> unit_from_c1(const std::string& answer) {
    static const std::regex unit_eq(R"(unit\s*=\s*([A-Za-z][A-Za-z-]*))", std::regex::icase);
    static const std::regex level(R"(([A-Za-z][A-Za-z]*)[ -]level)", std::regex::icase);
    std::smatch m;
    if (std::regex_search(answer, m, unit_eq)) return text::fold_case(m[1].str());
    if (std::regex_search(answer, m, level)) return text::fold_case(m[1].str());
    return std::nullopt;
}

std::string base_question(const QuerySpec& q) {
    std::string s = text::trim(q.original_text.empty() ? q.raw_text : q.original_text);
    return s;
}

std::string deterministic_rewrite(const QuerySpec& q, bool with_codes) {
    std::vector<std::string> parts;
    for (const auto& c : q.conditions) {
        if (c.constraints.empty()) continue;
        std::string notes;
        for (const auto& r : c.constraints) {
            if (!notes.empty()) notes += "; ";
            if (with_codes) notes += std::string(to_string(r.code)) + ": ";
            notes += r.text;
        }
        parts.push_back("\"" + c.text + "\" means " + notes);
    }
    for (const auto& r : q.query_constraints) {
        parts.push_back(with_codes ? std::string(to_string(r.code)) + ": " + r.text : r.text);
    }
    if (parts.empty()) return base_question(q);
    std::string out = base_question(q) + " (interpretation: ";
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += "; ";
        out += parts[i];
    }
    return out + ")";
}

std::vector<std::string> all_constraint_texts(const QuerySpec& q) {
    std::vector<std::string> out;
    for (const auto& c : q.conditions) {
        for (const auto& r : c.constraints) out.push_back(r.text);
    }
    for (const auto& r : q.query_constraints) out.push_back(r.text);
    return out;
}

} // namespace

QuerySpec apply_answer(const QuerySpec& q, const Clarification& c, const std::string& answer) {
    return resolve(q, c, answer, false);
}

QuerySpec skip_clarification(const QuerySpec& q, const Clarification& c, const ClarificationTemplates& templates) {
    const auto& entry = templates.at(c.code);
    if (entry.default_answer.empty()) {
        throw Error(ErrorCode::Config, "no default interpretation configured for " + std::string(to_string(c.code)));
    }
    return resolve(q, c, render_template(entry.default_answer, {{"fragment", c.fragment},
                                                           {"question", q.raw_text},
                                                           {"entity_type", q.entity_type},
                                                           {"code", std::string(to_string(c.code))}}), true);
}

QuerySpec rewrite_query(const QuerySpec& q, RewriteMode mode, LlmBackend* backend) {
    QuerySpec out = q;
    if (out.original_text.empty()) out.original_text = out.raw_text;
    if (mode == RewriteMode::ClassificationGuided) {
        const auto pending = q.pending_clarifications();
        if (!pending.empty()) {
            std::string ids;
            for (const auto& id : pending) ids += (ids.empty() ? "" : ", ") + id;
            throw Error(ErrorCode::Conflict, "unresolved clarifications: " + ids);
        }
        auto consider_c1 = [&](const ResolvedConstraint& r) {
            if (r.code != AmbiguityCode::C1) return;
            if (auto unit = unit_from_c1(r.text)) out.entity_type = *unit;
        };
        for (const auto& r : q.query_constraints) consider_c1(r);
        for (const auto& c : q.conditions) {
            for (const auto& r : c.constraints) consider_c1(r);
        }
    }
    const auto notes = all_constraint_texts(out);
    if (notes.empty()) return out;

    const bool guided = mode == RewriteMode::ClassificationGuided;
    std::string rewritten = deterministic_rewrite(out, guided);
    if (backend != nullptr) {
        CompletionRequest req;
        req.purpose = Purpose::Rewrite;
        req.messages = {{"user", PromptLibrary::instance().render(
                                     guided ? "rewrite_guided.txt" : "rewrite_direct.txt",
                                     {{"question", base_question(out)},
                                      {"interpretation", deterministic_rewrite(out, guided)},
                                      {"entity_type", out.entity_type}})}};
        const std::string reply = text::trim(backend->complete(req).text);
        if (!reply.empty()) rewritten = reply;
    }
    // The rewritten question must carry every confirmed constraint verbatim.
    std::vector<std::string> missing;
    for (const auto& n : notes) {
        if (rewritten.find(n) == std::string::npos) missing.push_back(n);
    }
    if (!missing.empty()) {
        rewritten += " [";
        for (std::size_t i = 0; i < missing.size(); ++i) rewritten += (i ? "; " : "") + missing[i];
        rewritten += "]";
    }
    out.raw_text = rewritten;
    return out;
}

} // namespace aggquery
