#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace aggquery::text {

/// Byte range [begin, end) of one token inside its source string.
struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// Name recorded in corpus manifests for the tokenizer below.
inline constexpr std::string_view kTokenizerName = "unicode-whitespace-v1";

bool is_unicode_space(char32_t cp) noexcept;

/// Splits on Unicode White_Space code points. Malformed UTF-8 bytes are
/// treated as single non-space code points so the split never fails.
std::vector<TokenSpan> whitespace_tokens(std::string_view s);
std::vector<std::string> whitespace_split(std::string_view s);
std::size_t count_tokens(std::string_view s);

/// Simple case folding: ASCII, Latin-1, Latin Extended-A, Greek and
/// Cyrillic capitals map to their lowercase forms; everything else is kept.
std::string fold_case(std::string_view s);

/// Lowercased word tokens with leading/trailing punctuation stripped; empty
/// results are dropped. Used by TF-IDF, BM25 and fuzzy matching.
std::vector<std::string> word_terms(std::string_view s);

/// Canonical entity key: case-fold, collapse runs of whitespace to a single
/// space, strip surrounding ASCII punctuation.
std::string canonical_key(std::string_view s);

std::string trim(std::string_view s);

/// Plain Levenshtein distance over Unicode code points.
std::size_t levenshtein(std::string_view a, std::string_view b);

/// levenshtein(a, b) / max(len(a), len(b)) in code points; 0 for two empty strings.
double normalized_levenshtein(std::string_view a, std::string_view b);

std::u32string decode_utf8(std::string_view s);
void append_utf8(std::string& out, char32_t cp);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;
std::string hex64(std::uint64_t v);

} // namespace aggquery::text
