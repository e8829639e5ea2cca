#include "aggquery/text.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

namespace aggquery::text {

namespace {

// Decodes one code point starting at s[i]; advances i. Invalid sequences
// yield the raw byte value and advance by one.
char32_t next_code_point(std::string_view s, std::size_t& i) noexcept {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    int len = 0;
    char32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        ++i;
        return b0;
    }
    if (i + len > s.size()) {
        ++i;
        return b0;
    }
    for (int k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) {
            ++i;
            return b0;
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    i += len;
    return cp;
}

char32_t fold_code_point(char32_t cp) noexcept {
    if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
    if (cp < 0x80) return cp;
    if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
    if (cp >= 0x100 && cp <= 0x137 && cp % 2 == 0) return cp + 1;
    if (cp >= 0x139 && cp <= 0x148 && cp % 2 == 1) return cp + 1;
    if (cp >= 0x14A && cp <= 0x177 && cp % 2 == 0) return cp + 1;
    if (cp == 0x178) return 0xFF;
    if (cp >= 0x179 && cp <= 0x17E && cp % 2 == 1) return cp + 1;
    if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 0x20;
    if (cp >= 0x410 && cp <= 0x42F) return cp + 0x20;
    if (cp >= 0x400 && cp <= 0x40F) return cp + 0x50;
    return cp;
}

bool is_ascii_punct(char c) noexcept {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

} // namespace

bool is_unicode_space(char32_t cp) noexcept {
    switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
        return true;
    default:
        return cp >= 0x2000 && cp <= 0x200A;
    }
}

std::vector<TokenSpan> whitespace_tokens(std::string_view s) {
    std::vector<TokenSpan> out;
    std::size_t i = 0;
    bool in_token = false;
    std::size_t start = 0;
    while (i < s.size()) {
        const std::size_t at = i;
        const char32_t cp = next_code_point(s, i);
        if (is_unicode_space(cp)) {
            if (in_token) {
                out.push_back({start, at});
                in_token = false;
            }
        } else if (!in_token) {
            start = at;
            in_token = true;
        }
    }
    if (in_token) out.push_back({start, s.size()});
    return out;
}

std::vector<std::string> whitespace_split(std::string_view s) {
    std::vector<std::string> out;
    for (const auto& t : whitespace_tokens(s)) out.emplace_back(s.substr(t.begin, t.end - t.begin));
    return out;
}

std::size_t count_tokens(std::string_view s) { return whitespace_tokens(s).size(); }

std::u32string decode_utf8(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) out.push_back(next_code_point(s, i));
    return out;
}

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

std::string fold_case(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t at = i;
        const char32_t cp = next_code_point(s, i);
        const char32_t folded = fold_code_point(cp);
        if (folded == cp) {
            out.append(s.substr(at, i - at));
        } else {
            append_utf8(out, folded);
        }
    }
    return out;
}

std::string trim(std::string_view s) {
    const auto toks = whitespace_tokens(s);
    if (toks.empty()) return {};
    return std::string(s.substr(toks.front().begin, toks.back().end - toks.front().begin));
}

namespace {

std::string_view strip_punct(std::string_view s) {
    while (!s.empty() && is_ascii_punct(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_ascii_punct(s.back())) s.remove_suffix(1);
    return s;
}

} // namespace

std::vector<std::string> word_terms(std::string_view s) {
    std::vector<std::string> out;
    const std::string folded = fold_case(s);
    for (const auto& t : whitespace_tokens(folded)) {
        auto w = strip_punct(std::string_view(folded).substr(t.begin, t.end - t.begin));
        if (!w.empty()) out.emplace_back(w);
    }
    return out;
}

std::string canonical_key(std::string_view s) {
    const std::string folded = fold_case(s);
    std::string joined;
    for (const auto& t : whitespace_tokens(folded)) {
        if (!joined.empty()) joined.push_back(' ');
        joined.append(folded, t.begin, t.end - t.begin);
    }
    return std::string(strip_punct(joined));
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
    const auto ua = decode_utf8(a);
    const auto ub = decode_utf8(b);
    std::vector<std::size_t> prev(ub.size() + 1), cur(ub.size() + 1);
    for (std::size_t j = 0; j <= ub.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= ua.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= ub.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (ua[i - 1] == ub[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[ub.size()];
}

double normalized_levenshtein(std::string_view a, std::string_view b) {
    const std::size_t la = decode_utf8(a).size();
    const std::size_t lb = decode_utf8(b).size();
    const std::size_t denom = std::max(la, lb);
    if (denom == 0) return 0.0;
    return static_cast<double>(levenshtein(a, b)) / static_cast<double>(denom);
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed) noexcept {
    std::uint64_t h = seed;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace aggquery::text
