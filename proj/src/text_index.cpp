#include "aggquery/text_index.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "aggquery/error.hpp"
#include "aggquery/jsonl.hpp"
#include "aggquery/text.hpp"

namespace aggquery {

using nlohmann::json;

namespace {
constexpr int kIndexFormatVersion = 1;
constexpr const char* kIndexFormatName = "aggquery-bm25";
} // namespace

Bm25Index Bm25Index::build(std::span<const std::pair<std::string, std::string>> docs, Bm25Params params) {
    if (docs.empty()) throw Error(ErrorCode::InvalidArgument, "cannot build BM25 index over an empty corpus");
    if (!(params.k1 > 0.0)) throw Error(ErrorCode::InvalidArgument, "BM25 k1 must be > 0");
    if (params.b < 0.0 || params.b > 1.0) throw Error(ErrorCode::InvalidArgument, "BM25 b must be in [0, 1]");

    Bm25Index idx;
    idx.params_ = params;
    std::set<std::string> seen;
    std::uint64_t total = 0;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        const auto& [id, body] = docs[d];
        if (!seen.insert(id).second) throw Error(ErrorCode::Duplicate, "duplicate index id: " + id);
        idx.ids_.push_back(id);
        std::map<std::string, std::uint32_t> tf;
        const auto terms = text::word_terms(body);
        for (const auto& t : terms) ++tf[t];
        idx.lengths_.push_back(static_cast<std::uint32_t>(terms.size()));
        total += terms.size();
        for (const auto& [term, count] : tf) {
            idx.postings_[term].push_back({static_cast<std::uint32_t>(d), count});
        }
    }
    idx.avgdl_ = static_cast<double>(total) / static_cast<double>(docs.size());
    return idx;
}

Bm25Index Bm25Index::build(const CorpusHandle& corpus, Bm25Params params) {
    std::vector<std::pair<std::string, std::string>> docs;
    docs.reserve(corpus.size());
    for (const auto& c : corpus.chunks()) docs.emplace_back(c.chunk_id, c.text);
    return build(docs, params);
}

double Bm25Index::idf(const std::string& term) const {
    const double n = static_cast<double>(ids_.size());
    const double df = static_cast<double>(postings(term).size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

std::span<const Bm25Index::Posting> Bm25Index::postings(const std::string& term) const {
    auto it = postings_.find(term);
    if (it == postings_.end()) return {};
    return it->second;
}

std::vector<double> Bm25Index::score_all(std::string_view query_text) const {
    std::vector<double> scores(ids_.size(), 0.0);
    if (avgdl_ <= 0.0) return scores;
    for (const auto& term : text::word_terms(query_text)) {
        const auto plist = postings(term);
        if (plist.empty()) continue;
        const double w = idf(term);
        for (const auto& p : plist) {
            const double tf = p.tf;
            const double norm = params_.k1 * (1.0 - params_.b + params_.b * lengths_[p.doc] / avgdl_);
            scores[p.doc] += w * tf * (params_.k1 + 1.0) / (tf + norm);
        }
    }
    return scores;
}

std::vector<std::pair<std::string, double>> Bm25Index::topk(std::string_view query_text, std::size_t k) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "top-k requires k >= 1");
    std::vector<bool> matched(ids_.size(), false);
    for (const auto& term : text::word_terms(query_text)) {
        for (const auto& p : postings(term)) matched[p.doc] = true;
    }
    const auto scores = score_all(query_text);
    std::vector<std::pair<std::string, double>> ranked;
    for (std::size_t d = 0; d < ids_.size(); ++d) {
        if (matched[d]) ranked.emplace_back(ids_[d], scores[d]);
    }
    auto by_rank = [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    };
    if (ranked.size() > k) {
        std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(), by_rank);
        ranked.resize(k);
    } else {
        std::sort(ranked.begin(), ranked.end(), by_rank);
    }
    return ranked;
}

std::string Bm25Index::serialize() const {
    json manifest = {{"format", kIndexFormatName}, {"format_version", kIndexFormatVersion},
                     {"k1", params_.k1},           {"b", params_.b},
                     {"doc_count", ids_.size()},    {"avg_length", avgdl_},
                     {"ids", ids_},                 {"lengths", lengths_},
                     {"term_count", postings_.size()}};
    std::string out = manifest.dump() + "\n";
    for (const auto& [term, plist] : postings_) {
        json row = json::array();
        for (const auto& p : plist) row.push_back({p.doc, p.tf});
        out += json{{"term", term}, {"postings", row}}.dump() + "\n";
    }
    return out;
}

void Bm25Index::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const std::string body = serialize();
    const auto split = body.find('\n');
    write_text_file(dir / "manifest.json", json::parse(body.substr(0, split)).dump(2) + "\n");
    write_text_file(dir / "postings.jsonl", body.substr(split + 1));
}

Bm25Index Bm25Index::load(const std::filesystem::path& dir) {
    const json manifest = read_json_file(dir / "manifest.json");
    if (manifest.value("format", std::string()) != kIndexFormatName ||
        manifest.value("format_version", 0) != kIndexFormatVersion) {
        throw Error(ErrorCode::Parse, "not a version " + std::to_string(kIndexFormatVersion) + " BM25 index: " +
                                          dir.string());
    }
    Bm25Index idx;
    idx.params_ = {manifest.at("k1").get<double>(), manifest.at("b").get<double>()};
    idx.ids_ = manifest.at("ids").get<std::vector<std::string>>();
    idx.lengths_ = manifest.at("lengths").get<std::vector<std::uint32_t>>();
    idx.avgdl_ = manifest.at("avg_length").get<double>();
    if (idx.ids_.size() != idx.lengths_.size()) throw Error(ErrorCode::Parse, "index ids/lengths size mismatch");
    for (const auto& row : read_jsonl(dir / "postings.jsonl")) {
        auto& plist = idx.postings_[row.at("term").get<std::string>()];
        for (const auto& p : row.at("postings")) {
            plist.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
        }
    }
    return idx;
}

Bm25Index build_bm25(const CorpusHandle& corpus, double k1, double b) {
    return Bm25Index::build(corpus, Bm25Params{k1, b});
}

std::vector<std::pair<std::string, double>> bm25_topk(const Bm25Index& index, std::string_view query_text,
                                                      std::size_t k) {
    return index.topk(query_text, k);
}

double cosine_sim(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw Error(ErrorCode::InvalidArgument, "cosine_sim dimension mismatch: " + std::to_string(u.size()) +
                                                    " vs " + std::to_string(v.size()));
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

double cosine_sim(const FeatureVector& u, const FeatureVector& v) { return cosine_sim(u.values, v.values); }

void l2_normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    if (n == 0.0) return;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
}

TfidfResult tfidf_features(std::span<const Chunk> chunks) {
    if (chunks.empty()) throw Error(ErrorCode::InvalidArgument, "tfidf_features requires at least one chunk");
    std::vector<std::map<std::string, std::size_t>> counts;
    std::map<std::string, std::size_t> df;
    for (const auto& c : chunks) {
        auto& tf = counts.emplace_back();
        for (const auto& t : text::word_terms(c.text)) ++tf[t];
        for (const auto& [t, _] : tf) ++df[t];
    }
    TfidfResult r;
    std::unordered_map<std::string, std::size_t> column;
    const double n = static_cast<double>(chunks.size());
    for (const auto& [t, d] : df) {
        column.emplace(t, r.vocabulary.size());
        r.vocabulary.push_back(t);
        r.idf.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(d))) + 1.0);
    }
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        FeatureVector fv{FeatureKind::Tfidf, std::vector<double>(r.vocabulary.size(), 0.0)};
        for (const auto& [t, tf] : counts[i]) {
            const std::size_t col = column.at(t);
            fv.values[col] = static_cast<double>(tf) * r.idf[col];
        }
        l2_normalize(fv.values);
        r.vectors[chunks[i].chunk_id] = std::move(fv);
    }
    return r;
}

TrigramHashEmbedder::TrigramHashEmbedder(std::size_t dimension) : dimension_(dimension) {
    if (dimension_ == 0) throw Error(ErrorCode::Config, "embedding dimension must be >= 1");
}

FeatureVector TrigramHashEmbedder::embed_one(std::string_view body) const {
    FeatureVector fv{FeatureKind::Embedding, std::vector<double>(dimension_, 0.0)};
    const auto cps = text::decode_utf8(text::fold_case(body));
    if (cps.empty()) return fv;
    auto add = [&](std::size_t from, std::size_t len) {
        std::string gram;
        for (std::size_t i = from; i < from + len; ++i) text::append_utf8(gram, cps[i]);
        fv.values[text::fnv1a64(gram) % dimension_] += 1.0;
    };
    if (cps.size() < 3) {
        add(0, cps.size());
    } else {
        for (std::size_t i = 0; i + 3 <= cps.size(); ++i) add(i, 3);
    }
    l2_normalize(fv.values);
    return fv;
}

std::vector<FeatureVector> TrigramHashEmbedder::embed(std::span<const std::string> texts) {
    std::vector<FeatureVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
}

std::vector<FeatureVector> embed_texts(std::span<const std::string> texts, EmbeddingProvider& provider) {
    if (texts.empty()) return {};
    auto out = provider.embed(texts);
    if (out.size() != texts.size()) {
        throw Error(ErrorCode::Transport, "embedding provider " + provider.name() + " returned " +
                                              std::to_string(out.size()) + " vectors for " +
                                              std::to_string(texts.size()) + " texts");
    }
    for (const auto& v : out) {
        if (v.dim() != provider.dimension()) {
            throw Error(ErrorCode::Transport, "embedding provider " + provider.name() + " returned wrong dimension");
        }
        for (double x : v.values) {
            if (!std::isfinite(x)) throw Error(ErrorCode::Transport, "embedding provider returned non-finite value");
        }
    }
    return out;
}

} // namespace aggquery
