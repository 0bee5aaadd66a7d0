#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "counsel/text.hpp"

namespace counsel {

using TokenId = std::size_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr std::size_t kMaxTokens = 128;

class VocabularyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Word-level vocabulary. Ids 0..3 are always <pad>, <bos>, <eos>, <unk>;
// optional caller-reserved tokens (e.g. a turn separator) follow, then
// corpus tokens by descending frequency with lexicographic tie-break.
class Vocabulary {
public:
    static constexpr TokenId pad = 0;
    static constexpr TokenId bos = 1;
    static constexpr TokenId eos = 2;
    static constexpr TokenId unk = 3;
    static constexpr std::size_t kSpecialCount = 4;

    static const std::vector<std::string>& special_tokens() {
        static const std::vector<std::string> s{"<pad>", "<bos>", "<eos>", "<unk>"};
        return s;
    }

    Vocabulary() : Vocabulary(std::vector<std::string>(special_tokens())) {}

    static Vocabulary build(const std::vector<std::string>& corpus, std::size_t max_size,
                            const std::vector<std::string>& reserved = {}) {
        if (max_size < 5) throw std::invalid_argument("vocabulary max_size must be at least 5");
        std::vector<std::string> tokens = special_tokens();
        for (const auto& r : reserved) tokens.push_back(r);
        if (tokens.size() > max_size) {
            throw std::invalid_argument("reserved tokens exceed vocabulary max_size");
        }
        std::map<std::string, std::size_t> counts;
        for (const auto& line : corpus)
            for (auto& w : text::split_words(line)) ++counts[w];
        for (const auto& t : tokens) counts.erase(t);
        std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        for (const auto& [tok, _] : ranked) {
            if (tokens.size() >= max_size) break;
            tokens.push_back(tok);
        }
        return Vocabulary(std::move(tokens));
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw VocabularyError("cannot open vocabulary file '" + path + "'");
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            tokens.push_back(line);
        }
        return Vocabulary(std::move(tokens));
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw VocabularyError("cannot write vocabulary file '" + path + "'");
        for (const auto& t : id_to_token_) out << t << '\n';
        if (!out) throw VocabularyError("failed writing vocabulary file '" + path + "'");
    }

    explicit Vocabulary(std::vector<std::string> tokens) : id_to_token_(std::move(tokens)) {
        const auto& sp = special_tokens();
        if (id_to_token_.size() < sp.size() ||
            !std::equal(sp.begin(), sp.end(), id_to_token_.begin())) {
            throw VocabularyError("vocabulary must start with <pad>, <bos>, <eos>, <unk>");
        }
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
            if (id_to_token_[i].empty()) {
                throw VocabularyError("empty token at id " + std::to_string(i));
            }
            if (!token_to_id_.emplace(id_to_token_[i], i).second) {
                throw VocabularyError("duplicate token '" + id_to_token_[i] + "' at id " +
                                      std::to_string(i));
            }
        }
    }

    std::size_t size() const { return id_to_token_.size(); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    bool contains(std::string_view token) const {
        return token_to_id_.count(std::string(token)) != 0;
    }

    TokenId id(std::string_view token) const {
        auto it = token_to_id_.find(std::string(token));
        return it == token_to_id_.end() ? unk : it->second;
    }

    const std::string& token(TokenId id) const {
        if (id >= id_to_token_.size()) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(id_to_token_.size()));
        }
        return id_to_token_[id];
    }

    static bool is_special(TokenId id) { return id < kSpecialCount; }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.id_to_token_ == b.id_to_token_;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> token_to_id_;
};

// Word ids without framing.
inline TokenSequence to_ids(std::string_view text, const Vocabulary& vocab) {
    TokenSequence ids;
    for (const auto& w : text::split_words(text)) ids.push_back(vocab.id(w));
    return ids;
}

// [BOS, words..., EOS], head-truncated so the result never exceeds max_len
// and always ends in EOS.
inline TokenSequence encode(std::string_view text, const Vocabulary& vocab,
                            std::size_t max_len = kMaxTokens) {
    if (max_len < 2) throw std::invalid_argument("encode needs max_len >= 2");
    TokenSequence words = to_ids(text, vocab);
    TokenSequence out;
    out.reserve(std::min(words.size() + 2, max_len));
    out.push_back(Vocabulary::bos);
    const std::size_t keep = std::min(words.size(), max_len - 2);
    out.insert(out.end(), words.begin(), words.begin() + static_cast<std::ptrdiff_t>(keep));
    out.push_back(Vocabulary::eos);
    return out;
}

// Drops <pad>/<bos>/<eos>/<unk> and joins the remaining tokens with spaces.
inline std::string decode(const TokenSequence& ids, const Vocabulary& vocab) {
    std::string out;
    for (TokenId id : ids) {
        const std::string& tok = vocab.token(id);
        if (Vocabulary::is_special(id)) continue;
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

}  // namespace counsel
