#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/text.hpp"

namespace counsel {

enum class NliLabel { contradiction = 0, neutral = 1, entailment = 2 };

inline const char* label_name(NliLabel l) {
    switch (l) {
        case NliLabel::contradiction: return "contradiction";
        case NliLabel::neutral: return "neutral";
        case NliLabel::entailment: return "entailment";
    }
    return "?";
}

enum class ToxicClass { threat = 0, insult = 1, obscene = 2 };
inline constexpr std::size_t kToxicClasses = 3;

inline const char* class_name(ToxicClass c) {
    switch (c) {
        case ToxicClass::threat: return "threat";
        case ToxicClass::insult: return "insult";
        case ToxicClass::obscene: return "obscene";
    }
    return "?";
}

// Reads a one-entry-per-line list. Blank lines and lines starting with '#'
// are skipped; entries come back normalized.
inline std::vector<std::string> read_phrase_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open phrase file '" + path.string() + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        std::string t = text::trim(line);
        if (t.empty() || t.front() == '#') continue;
        out.push_back(text::normalize(t));
    }
    return out;
}

// True when the token sequence of `phrase` occurs in `words` at word
// boundaries ("kill" does not fire inside "skill").
inline bool contains_words(const std::vector<std::string>& words, const std::vector<std::string>& phrase) {
    if (phrase.empty() || phrase.size() > words.size()) return false;
    for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i) {
        std::size_t k = 0;
        while (k < phrase.size() && words[i + k] == phrase[k]) ++k;
        if (k == phrase.size()) return true;
    }
    return false;
}

// Per-class toxic term lists.
struct Lexicon {
    std::array<std::vector<std::string>, kToxicClasses> terms;

    const std::vector<std::string>& of(ToxicClass c) const& { return terms[static_cast<std::size_t>(c)]; }
    // By value on temporaries, so `Lexicon::defaults().of(c)` cannot dangle.
    std::vector<std::string> of(ToxicClass c) && { return std::move(terms[static_cast<std::size_t>(c)]); }

    static Lexicon defaults() {
        Lexicon l;
        l.terms[0] = {"kill", "stab", "shoot", "strangle", "murder", "choke", "beat you up", "hunt you down"};
        l.terms[1] = {"idiot", "moron", "loser", "stupid", "pathetic", "worthless", "imbecile", "dumb"};
        l.terms[2] = {"fuck", "fucking", "shit", "crap", "bullshit", "piss", "bollocks", "arse"};
        return l;
    }

    // Expects threat.txt, insult.txt and obscene.txt inside `dir`.
    static Lexicon load_dir(const std::filesystem::path& dir) {
        Lexicon l;
        for (std::size_t c = 0; c < kToxicClasses; ++c)
            l.terms[c] = read_phrase_file(dir / (std::string(class_name(ToxicClass(c))) + ".txt"));
        return l;
    }

    bool hits(const std::vector<std::string>& words, ToxicClass c) const {
        for (const auto& t : of(c))
            if (contains_words(words, text::split_words(t))) return true;
        return false;
    }
};

}  // namespace counsel
