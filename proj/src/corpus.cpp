#include "aggquery/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "aggquery/error.hpp"
#include "aggquery/jsonl.hpp"
#include "aggquery/text.hpp"

namespace aggquery {

using nlohmann::json;

void ChunkPolicy::validate() const {
    if (max_tokens < 1) throw Error(ErrorCode::InvalidArgument, "chunk policy: max_tokens must be >= 1");
    if (overlap >= max_tokens) {
        throw Error(ErrorCode::InvalidArgument, "chunk policy: overlap must be smaller than max_tokens");
    }
}

std::string make_chunk_id(const std::string& doc_id, std::size_t ordinal) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", kChunkOrdinalWidth, ordinal);
    return doc_id + "#" + buf;
}

std::vector<Chunk> chunk_document(const Document& doc, const ChunkPolicy& policy) {
    policy.validate();
    const auto tokens = text::whitespace_tokens(doc.text);
    if (tokens.empty()) throw Error(ErrorCode::InvalidArgument, "empty document: " + doc.doc_id);

    const std::size_t n = tokens.size();
    const std::size_t step = policy.max_tokens - policy.overlap;
    std::vector<Chunk> out;
    for (std::size_t start = 0;; start += step) {
        const bool last = start + policy.max_tokens >= n;
        const std::size_t stop = last ? n : start + policy.max_tokens;
        Chunk c;
        c.doc_id = doc.doc_id;
        c.ordinal = out.size();
        c.chunk_id = make_chunk_id(doc.doc_id, c.ordinal);
        c.span.begin = start == 0 ? 0 : tokens[start].begin;
        c.span.end = last ? doc.text.size() : tokens[stop].begin;
        c.text = doc.text.substr(c.span.begin, c.span.end - c.span.begin);
        c.token_count = stop - start;
        out.push_back(std::move(c));
        if (last) break;
    }
    return out;
}

CorpusHandle::CorpusHandle(std::string corpus_id, ChunkPolicy policy, std::vector<DocumentInfo> docs,
                           std::vector<Chunk> chunks)
    : corpus_id_(std::move(corpus_id)), policy_(policy), docs_(std::move(docs)), chunks_(std::move(chunks)) {
    std::sort(chunks_.begin(), chunks_.end(),
              [](const Chunk& a, const Chunk& b) { return a.chunk_id < b.chunk_id; });
    std::sort(docs_.begin(), docs_.end(),
              [](const DocumentInfo& a, const DocumentInfo& b) { return a.doc_id < b.doc_id; });
    for (std::size_t i = 0; i < chunks_.size(); ++i) {
        if (!chunk_index_.emplace(chunks_[i].chunk_id, i).second) {
            throw Error(ErrorCode::Duplicate, "duplicate chunk_id: " + chunks_[i].chunk_id);
        }
    }
    for (std::size_t i = 0; i < docs_.size(); ++i) {
        if (!doc_index_.emplace(docs_[i].doc_id, i).second) {
            throw Error(ErrorCode::Duplicate, "duplicate doc_id: " + docs_[i].doc_id);
        }
    }
}

bool CorpusHandle::contains(const std::string& chunk_id) const { return chunk_index_.count(chunk_id) != 0; }

std::size_t CorpusHandle::index_of(const std::string& chunk_id) const {
    auto it = chunk_index_.find(chunk_id);
    if (it == chunk_index_.end()) throw Error(ErrorCode::NotFound, "unknown chunk_id: " + chunk_id);
    return it->second;
}

const Chunk& CorpusHandle::chunk(const std::string& chunk_id) const { return chunks_[index_of(chunk_id)]; }

const DocumentInfo& CorpusHandle::document(const std::string& doc_id) const {
    auto it = doc_index_.find(doc_id);
    if (it == doc_index_.end()) throw Error(ErrorCode::NotFound, "unknown doc_id: " + doc_id);
    return docs_[it->second];
}

namespace {

constexpr int kCorpusFormatVersion = 1;

} // namespace

void CorpusHandle::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::size_t token_total = 0;
    std::string chunk_lines;
    for (const auto& c : chunks_) {
        token_total += c.token_count;
        json j = {{"chunk_id", c.chunk_id}, {"doc_id", c.doc_id},   {"ordinal", c.ordinal},
                  {"span", {c.span.begin, c.span.end}}, {"text", c.text}, {"token_count", c.token_count}};
        chunk_lines += j.dump() + "\n";
    }
    std::string doc_lines;
    for (const auto& d : docs_) {
        json j = {{"doc_id", d.doc_id}, {"meta", d.meta}, {"length", d.length},
                  {"token_count", d.token_count}, {"chunk_ids", d.chunk_ids}};
        doc_lines += j.dump() + "\n";
    }
    json manifest = {
        {"format_version", kCorpusFormatVersion},
        {"corpus_id", corpus_id_},
        {"policy", {{"max_tokens", policy_.max_tokens}, {"overlap", policy_.overlap}}},
        {"tokenizer", std::string(text::kTokenizerName)},
        {"document_count", docs_.size()},
        {"chunk_count", chunks_.size()},
        {"token_total", token_total},
    };
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    write_text_file(dir / "documents.jsonl", doc_lines);
    write_text_file(dir / "chunks.jsonl", chunk_lines);
}

CorpusHandle CorpusHandle::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw Error(ErrorCode::NotFound, "no corpus manifest in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Parse, "corpus manifest: " + std::string(e.what()));
    }
    if (manifest.value("format_version", 0) != kCorpusFormatVersion) {
        throw Error(ErrorCode::Parse, "unsupported corpus format_version in " + dir.string());
    }
    if (manifest.value("tokenizer", std::string()) != text::kTokenizerName) {
        throw Error(ErrorCode::Config, "corpus was built with tokenizer " + manifest.value("tokenizer", std::string()));
    }
    ChunkPolicy policy{manifest.at("policy").at("max_tokens").get<std::size_t>(),
                       manifest.at("policy").at("overlap").get<std::size_t>()};

    std::vector<DocumentInfo> docs;
    for (const auto& j : read_jsonl(dir / "documents.jsonl")) {
        DocumentInfo d;
        d.doc_id = j.at("doc_id").get<std::string>();
        d.meta = j.value("meta", std::map<std::string, std::string>{});
        d.length = j.at("length").get<std::size_t>();
        d.token_count = j.at("token_count").get<std::size_t>();
        d.chunk_ids = j.at("chunk_ids").get<std::vector<std::string>>();
        docs.push_back(std::move(d));
    }
    std::vector<Chunk> chunks;
    for (const auto& j : read_jsonl(dir / "chunks.jsonl")) {
        Chunk c;
        c.chunk_id = j.at("chunk_id").get<std::string>();
        c.doc_id = j.at("doc_id").get<std::string>();
        c.ordinal = j.at("ordinal").get<std::size_t>();
        c.span = {j.at("span").at(0).get<std::size_t>(), j.at("span").at(1).get<std::size_t>()};
        c.text = j.at("text").get<std::string>();
        c.token_count = j.at("token_count").get<std::size_t>();
        chunks.push_back(std::move(c));
    }
    if (chunks.size() != manifest.at("chunk_count").get<std::size_t>()) {
        throw Error(ErrorCode::Parse, "chunk count does not match manifest in " + dir.string());
    }
    return CorpusHandle(manifest.at("corpus_id").get<std::string>(), policy, std::move(docs), std::move(chunks));
}

CorpusHandle ingest_documents(std::span<const Document> records, const ChunkPolicy& policy,
                              std::string corpus_id) {
    policy.validate();
    std::set<std::string> seen;
    for (const auto& d : records) {
        if (!seen.insert(d.doc_id).second) throw Error(ErrorCode::Duplicate, "duplicate doc_id: " + d.doc_id);
    }
    std::vector<DocumentInfo> docs;
    std::vector<Chunk> chunks;
    for (const auto& d : records) {
        if (d.doc_id.empty()) throw Error(ErrorCode::InvalidArgument, "document with empty doc_id");
        auto pieces = chunk_document(d, policy);
        DocumentInfo info{d.doc_id, d.meta, d.text.size(), text::count_tokens(d.text), {}};
        for (auto& c : pieces) {
            info.chunk_ids.push_back(c.chunk_id);
            chunks.push_back(std::move(c));
        }
        docs.push_back(std::move(info));
    }
    return CorpusHandle(std::move(corpus_id), policy, std::move(docs), std::move(chunks));
}

std::vector<Chunk> get_chunks(const CorpusHandle& corpus, std::span<const std::string> ids) {
    std::vector<Chunk> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(corpus.chunk(id));
    return out;
}

double evidence_density(std::size_t evidence_chunks, std::size_t total_chunks) {
    if (total_chunks == 0) throw Error(ErrorCode::InvalidArgument, "evidence density of an empty corpus");
    return static_cast<double>(evidence_chunks) / static_cast<double>(total_chunks);
}

StatsReport corpus_stats(const CorpusHandle& corpus, const std::vector<std::string>* gold_evidence) {
    StatsReport r;
    r.document_count = corpus.documents().size();
    r.chunk_count = corpus.size();
    for (const auto& c : corpus.chunks()) r.token_total += c.token_count;
    if (gold_evidence != nullptr) {
        std::set<std::string> unique;
        for (const auto& id : *gold_evidence) {
            if (!corpus.contains(id)) throw Error(ErrorCode::NotFound, "unknown gold chunk id: " + id);
            unique.insert(id);
        }
        r.evidence_chunk_count = unique.size();
        r.evidence_density = evidence_density(unique.size(), r.chunk_count);
    }
    return r;
}

json to_json(const StatsReport& report) {
    json j = {{"document_count", report.document_count},
              {"chunk_count", report.chunk_count},
              {"token_total", report.token_total}};
    if (report.evidence_chunk_count) j["evidence_chunk_count"] = *report.evidence_chunk_count;
    if (report.evidence_density) j["evidence_density"] = *report.evidence_density;
    return j;
}

Document document_from_json(const json& j) {
    if (!j.is_object() || !j.contains("doc_id") || !j.contains("text")) {
        throw Error(ErrorCode::Schema, "document record requires doc_id and text");
    }
    Document d;
    d.doc_id = j.at("doc_id").get<std::string>();
    d.text = j.at("text").get<std::string>();
    if (j.contains("meta") && j.at("meta").is_object()) {
        for (const auto& [k, v] : j.at("meta").items()) d.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    return d;
}

std::vector<Document> read_documents_jsonl(const std::filesystem::path& path) {
    std::vector<Document> out;
    for (const auto& j : read_jsonl(path)) out.push_back(document_from_json(j));
    return out;
}

} // namespace aggquery
