#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace counsel::text {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// ASCII punctuation only; bytes of multi-byte UTF-8 sequences stay inside words.
inline bool is_punct(char c) {
    auto u = static_cast<unsigned char>(c);
    return u < 128 && std::ispunct(u) != 0;
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) {
        auto u = static_cast<unsigned char>(c);
        if (u < 128) c = static_cast<char>(std::tolower(u));
    }
    return out;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// Lowercases and splits on whitespace; every punctuation character becomes
// its own token.
inline std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char c : s) {
        if (is_space(c)) {
            flush();
        } else if (is_punct(c)) {
            flush();
            out.emplace_back(1, c);
        } else {
            auto u = static_cast<unsigned char>(c);
            cur.push_back(u < 128 ? static_cast<char>(std::tolower(u)) : c);
        }
    }
    flush();
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

// Canonical token-spaced form: "I don't  know." -> "i don ' t know ."
inline std::string normalize(std::string_view s) { return join(split_words(s)); }

inline bool is_sentence_end(char c) { return c == '.' || c == '!' || c == '?'; }

// Splits at '.', '!' and '?' (each run of terminators closes a sentence).
// Terminators stay attached; empty pieces are dropped.
inline std::vector<std::string> split_sentences(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 0; i < s.size(); ++i) {
        cur.push_back(s[i]);
        if (is_sentence_end(s[i]) && (i + 1 == s.size() || !is_sentence_end(s[i + 1]))) {
            std::string t = trim(cur);
            if (!t.empty()) out.push_back(std::move(t));
            cur.clear();
        }
    }
    std::string t = trim(cur);
    if (!t.empty()) out.push_back(std::move(t));
    return out;
}

// Inverse of the token spacing for display: punctuation attaches to the
// preceding word and an apostrophe also joins the next one.
// normalize(detokenize(t)) == t for any normalized t.
inline std::string detokenize(std::string_view spaced) {
    std::string out;
    bool glue_next = false;
    for (const auto& tok : split_words(spaced)) {
        const bool punct = tok.size() == 1 && is_punct(tok[0]);
        if (!out.empty() && !punct && !glue_next) out += ' ';
        out += tok;
        glue_next = tok == "'";
    }
    return out;
}

}  // namespace counsel::text
