#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aggquery/corpus.hpp"

namespace aggquery {

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;

    friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

/// Okapi BM25 over word_terms() of each chunk.
///
///   idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
///   score(q, d) = sum over query terms t (repeats included) of
///                 idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
///
/// Only chunks sharing at least one term with the query are scored.
class Bm25Index {
public:
    struct Posting {
        std::uint32_t doc = 0;
        std::uint32_t tf = 0;
        friend bool operator==(const Posting&, const Posting&) = default;
    };

    Bm25Index() = default;

    static Bm25Index build(const CorpusHandle& corpus, Bm25Params params = {});
    /// Builds over an arbitrary (id, text) list; ids must be unique.
    static Bm25Index build(std::span<const std::pair<std::string, std::string>> docs, Bm25Params params = {});

    std::vector<std::pair<std::string, double>> topk(std::string_view query_text, std::size_t k) const;
    /// Score of every indexed chunk, in index order.
    std::vector<double> score_all(std::string_view query_text) const;

    double idf(const std::string& term) const;
    std::size_t doc_count() const noexcept { return ids_.size(); }
    double avg_length() const noexcept { return avgdl_; }
    const Bm25Params& params() const noexcept { return params_; }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    const std::vector<std::uint32_t>& lengths() const noexcept { return lengths_; }
    /// Postings sorted by ascending doc position; empty for unknown terms.
    std::span<const Posting> postings(const std::string& term) const;

    /// manifest.json + postings.jsonl, see docs/index_format.md.
    void save(const std::filesystem::path& dir) const;
    static Bm25Index load(const std::filesystem::path& dir);
    std::string serialize() const;

    friend bool operator==(const Bm25Index&, const Bm25Index&) = default;

private:
    Bm25Params params_;
    std::vector<std::string> ids_;
    std::vector<std::uint32_t> lengths_;
    double avgdl_ = 0.0;
    std::map<std::string, std::vector<Posting>> postings_;
};

Bm25Index build_bm25(const CorpusHandle& corpus, double k1 = 1.2, double b = 0.75);
std::vector<std::pair<std::string, double>> bm25_topk(const Bm25Index& index, std::string_view query_text,
                                                      std::size_t k);

enum class FeatureKind { Tfidf, Embedding, Combined };

struct FeatureVector {
    FeatureKind kind = FeatureKind::Embedding;
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
    friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

/// Returns 0 when either vector is all zeros. Throws on dimension mismatch.
double cosine_sim(std::span<const double> u, std::span<const double> v);
double cosine_sim(const FeatureVector& u, const FeatureVector& v);
void l2_normalize(std::vector<double>& v);

/// Raw term counts, smoothed idf ln((1 + n) / (1 + df)) + 1, L2-normalised.
/// Vocabulary is the sorted set of word_terms over the input chunks.
struct TfidfResult {
    std::vector<std::string> vocabulary;
    std::vector<double> idf;
    std::map<std::string, FeatureVector> vectors;
};
TfidfResult tfidf_features(std::span<const Chunk> chunks);

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string name() const = 0;
    virtual std::size_t dimension() const = 0;
    virtual std::vector<FeatureVector> embed(std::span<const std::string> texts) = 0;
};

/// Deterministic offline embedder. For the case-folded text, every window
/// of three consecutive code points (the whole string if shorter) is
/// UTF-8 encoded and hashed with 64-bit FNV-1a; bucket hash % dimension is
/// incremented by one. The count vector is L2-normalised; empty text maps to
/// the zero vector.
class TrigramHashEmbedder final : public EmbeddingProvider {
public:
    explicit TrigramHashEmbedder(std::size_t dimension = 256);
    std::string name() const override { return "trigram-hash"; }
    std::size_t dimension() const override { return dimension_; }
    std::vector<FeatureVector> embed(std::span<const std::string> texts) override;
    FeatureVector embed_one(std::string_view text) const;

private:
    std::size_t dimension_;
};

std::vector<FeatureVector> embed_texts(std::span<const std::string> texts, EmbeddingProvider& provider);

} // namespace aggquery
