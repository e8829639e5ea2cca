#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace aggquery {

struct Document {
    std::string doc_id;
    std::string text;
    std::map<std::string, std::string> meta;
};

/// Byte offsets into the parent document.
struct CharSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct Chunk {
    std::string chunk_id;
    std::string doc_id;
    std::size_t ordinal = 0;
    std::string text;
    std::size_t token_count = 0;
    CharSpan span;

    friend bool operator==(const Chunk&, const Chunk&) = default;
};

/// Fixed-size sliding window over whitespace tokens.
struct ChunkPolicy {
    std::size_t max_tokens = 512;
    std::size_t overlap = 64;

    void validate() const;
};

struct DocumentInfo {
    std::string doc_id;
    std::map<std::string, std::string> meta;
    std::size_t length = 0;
    std::size_t token_count = 0;
    std::vector<std::string> chunk_ids;
};

/// Width of the zero-padded ordinal in "<doc_id>#<ordinal>".
inline constexpr int kChunkOrdinalWidth = 6;
std::string make_chunk_id(const std::string& doc_id, std::size_t ordinal);

/// Splits one document. Window starts advance by max_tokens - overlap; the
/// final window ends at the last token. A chunk's span runs from its first
/// token (offset 0 for the first chunk) up to the first token of the next
/// window position, or the end of the document for the last chunk, so the
/// non-overlapping parts of consecutive chunks tile the document.
std::vector<Chunk> chunk_document(const Document& doc, const ChunkPolicy& policy);

/// Immutable chunked corpus. Chunks are held sorted by chunk_id.
class CorpusHandle {
public:
    CorpusHandle() = default;
    CorpusHandle(std::string corpus_id, ChunkPolicy policy, std::vector<DocumentInfo> docs,
                 std::vector<Chunk> chunks);

    const std::string& corpus_id() const noexcept { return corpus_id_; }
    const ChunkPolicy& policy() const noexcept { return policy_; }
    std::span<const Chunk> chunks() const noexcept { return chunks_; }
    std::span<const DocumentInfo> documents() const noexcept { return docs_; }
    std::size_t size() const noexcept { return chunks_.size(); }
    bool empty() const noexcept { return chunks_.empty(); }

    bool contains(const std::string& chunk_id) const;
    /// Position of the chunk in sorted order; throws NotFound.
    std::size_t index_of(const std::string& chunk_id) const;
    const Chunk& chunk(const std::string& chunk_id) const;
    const Chunk& chunk_at(std::size_t index) const { return chunks_.at(index); }
    const DocumentInfo& document(const std::string& doc_id) const;

    /// Writes manifest.json, documents.jsonl and chunks.jsonl.
    void save(const std::filesystem::path& dir) const;
    static CorpusHandle load(const std::filesystem::path& dir);

private:
    std::string corpus_id_;
    ChunkPolicy policy_;
    std::vector<DocumentInfo> docs_;
    std::vector<Chunk> chunks_;
    std::unordered_map<std::string, std::size_t> chunk_index_;
    std::unordered_map<std::string, std::size_t> doc_index_;
};

CorpusHandle ingest_documents(std::span<const Document> records, const ChunkPolicy& policy,
                              std::string corpus_id = "corpus");

std::vector<Chunk> get_chunks(const CorpusHandle& corpus, std::span<const std::string> ids);

struct StatsReport {
    std::size_t document_count = 0;
    std::size_t chunk_count = 0;
    std::size_t token_total = 0;
    std::optional<std::size_t> evidence_chunk_count;
    std::optional<double> evidence_density;
};

/// Evidence density from raw counts: evidence / chunks.
double evidence_density(std::size_t evidence_chunks, std::size_t total_chunks);

StatsReport corpus_stats(const CorpusHandle& corpus,
                         const std::vector<std::string>* gold_evidence = nullptr);

nlohmann::json to_json(const StatsReport& report);

/// Reads line-delimited {"doc_id", "text", "meta"} records.
std::vector<Document> read_documents_jsonl(const std::filesystem::path& path);
Document document_from_json(const nlohmann::json& j);

} // namespace aggquery
