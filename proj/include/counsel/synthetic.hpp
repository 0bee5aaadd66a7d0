#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "counsel/lexicon.hpp"
#include "counsel/random.hpp"
#include "counsel/text.hpp"

// Template-driven corpora standing in for the external datasets: NLI pairs,
// toxic/clean texts, paraphrase pairs and counselling-style dialogue.
namespace counsel::synth {

// A first-person (or third-person, when `subject` is set) statement. Bodies
// are written from the speaker's side; "my" flips to "your" when the clause
// is rendered in the second person.
struct Fact {
    const char* topic;
    const char* subject;  // nullptr: the speaker
    bool do_form;         // "i like x" vs "i am x"
    const char* body;
};

inline const std::vector<Fact>& facts() {
    static const std::vector<Fact> f{
        {"sleep", nullptr, false, "sleeping well"},
        {"sleep", nullptr, true, "sleep through the night"},
        {"sleep", nullptr, false, "tired all the time"},
        {"work", nullptr, true, "like my job"},
        {"work", nullptr, false, "stressed at work"},
        {"work", nullptr, true, "get along with my boss"},
        {"family", nullptr, true, "talk to my mother"},
        {"family", nullptr, false, "close to my family"},
        {"family", nullptr, true, "trust my brother"},
        {"mood", nullptr, true, "feel sad today"},
        {"mood", nullptr, false, "happy"},
        {"mood", nullptr, false, "anxious"},
        {"mood", nullptr, true, "feel lonely"},
        {"school", nullptr, false, "doing well at school"},
        {"school", nullptr, true, "enjoy my classes"},
        {"friends", nullptr, true, "see my friends often"},
        {"friends", nullptr, false, "angry with my friend"},
        {"health", nullptr, true, "eat enough"},
        {"health", nullptr, false, "sick"},
        {"money", nullptr, false, "worried about money"},
        {"money", nullptr, true, "have enough money"},
        {"weather", "the weather", false, "cold"},
        {"weather", "the sky", false, "grey"},
    };
    return f;
}

// (canonical, alternative) word pairs with the same meaning in context.
inline const std::vector<std::pair<std::string, std::string>>& synonyms() {
    static const std::vector<std::pair<std::string, std::string>> s{
        {"sad", "unhappy"},   {"happy", "glad"},    {"job", "work"},       {"like", "enjoy"},
        {"tired", "exhausted"}, {"anxious", "nervous"}, {"cold", "chilly"}, {"grey", "gloomy"},
        {"sick", "ill"},      {"mother", "mom"},    {"talk", "speak"},     {"worried", "concerned"},
        {"angry", "upset"},   {"classes", "lessons"}, {"stressed", "tense"}, {"often", "regularly"},
        {"lonely", "isolated"}, {"trust", "believe"}, {"boss", "manager"},  {"night", "evening"},
    };
    return s;
}

// Maps a word to the canonical member of its synonym pair.
inline const std::string& canonical_word(const std::string& w) {
    for (const auto& [c, a] : synonyms())
        if (w == a) return c;
    return w;
}

inline const std::vector<std::string>& emotions() {
    static const std::vector<std::string> e{"sad",   "anxious", "angry",      "lonely",
                                            "tired", "scared",  "overwhelmed", "frustrated"};
    return e;
}

struct Clause {
    std::size_t fact = 0;
    bool second_person = false;
    bool negated = false;
};

inline bool is_speaker_fact(const Clause& c) { return facts().at(c.fact).subject == nullptr; }

inline std::string shift_word(const std::string& w) {
    if (w == "my") return "your";
    if (w == "myself") return "yourself";
    if (w == "your") return "my";
    if (w == "yourself") return "myself";
    return w;
}

inline std::string render(const Clause& c) {
    const Fact& f = facts().at(c.fact);
    std::vector<std::string> out;
    const bool second = c.second_person && f.subject == nullptr;
    if (f.subject) {
        out.push_back(f.subject);
        out.push_back("is");
        if (c.negated) out.push_back("not");
    } else if (f.do_form) {
        out.push_back(second ? "you" : "i");
        if (c.negated) {
            out.push_back("do");
            out.push_back("not");
        }
    } else {
        out.push_back(second ? "you" : "i");
        out.push_back(second ? "are" : "am");
        if (c.negated) out.push_back("not");
    }
    for (auto& w : text::split_words(f.body)) out.push_back(second ? shift_word(w) : w);
    return text::join(out);
}

// Replaces one synonym-table word (chosen at random) with its partner.
inline std::string swap_synonym(const std::string& s, Rng& rng) {
    auto words = text::split_words(s);
    std::vector<std::pair<std::size_t, std::string>> options;
    for (std::size_t i = 0; i < words.size(); ++i) {
        for (const auto& [c, a] : synonyms()) {
            if (words[i] == c) options.push_back({i, a});
            if (words[i] == a) options.push_back({i, c});
        }
    }
    if (options.empty()) return text::join(words);
    const auto& pick = options[rng.below(options.size())];
    words[pick.first] = pick.second;
    return text::join(words);
}

inline Clause random_clause(Rng& rng) {
    Clause c;
    c.fact = rng.below(facts().size());
    c.second_person = is_speaker_fact(c) && rng.below(2) == 1;
    c.negated = rng.below(2) == 1;
    return c;
}

inline std::size_t fact_from_other_topic(std::size_t fact, Rng& rng) {
    const std::string topic = facts()[fact].topic;
    for (;;) {
        std::size_t f = rng.below(facts().size());
        if (facts()[f].topic != topic) return f;
    }
}

inline void require_count(std::size_t n) {
    if (n < 1) throw std::invalid_argument("synthetic corpus size must be at least 1");
}

// ----- NLI -----

struct NliExample {
    std::string premise;
    std::string hypothesis;
    NliLabel label;
};

// Labels cycle through the three classes before shuffling, so every class
// gets floor(n/3) or ceil(n/3) examples.
//   contradiction: the premise clause with its negation toggled (and possibly
//                  the speaker perspective flipped), nothing else changed
//   entailment:    the same clause, possibly perspective-flipped, possibly
//                  with one synonym swapped
//   neutral:       a clause about a different topic
inline std::vector<NliExample> generate_nli(std::uint64_t seed, std::size_t n) {
    require_count(n);
    Rng rng(seed);
    std::vector<NliExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto label = static_cast<NliLabel>(i % 3);
        Clause p = random_clause(rng);
        Clause h = p;
        if (is_speaker_fact(p) && rng.below(2) == 1) h.second_person = !p.second_person;
        std::string hyp;
        switch (label) {
            case NliLabel::contradiction:
                h.negated = !p.negated;
                hyp = render(h);
                break;
            case NliLabel::entailment:
                hyp = render(h);
                if (rng.below(10) < 7) hyp = swap_synonym(hyp, rng);
                break;
            case NliLabel::neutral:
                h.fact = fact_from_other_topic(p.fact, rng);
                h.second_person = is_speaker_fact(h) && rng.below(2) == 1;
                h.negated = rng.below(2) == 1;
                hyp = render(h);
                if (rng.below(2) == 1) hyp = swap_synonym(hyp, rng);
                break;
        }
        out.push_back({render(p), hyp, label});
    }
    rng.shuffle(out);
    return out;
}

// ----- toxicity -----

struct ToxicityExample {
    std::string text;
    std::array<bool, kToxicClasses> labels{};  // threat, insult, obscene
};

inline const std::vector<std::string>& supportive_sentences() {
    static const std::vector<std::string> s{
        "thank you for sharing that with me",
        "that sounds really hard",
        "i am here to listen",
        "it makes sense that you feel this way",
        "can you tell me more about that",
        "how long has this been going on",
        "what would help you right now",
        "you are doing your best",
    };
    return s;
}

inline std::string clean_sentence(Rng& rng) {
    if (rng.below(3) == 0) return rng.pick(supportive_sentences());
    return render(random_clause(rng));
}

// Class cycle: clean, threat, insult, obscene. Toxic examples embed one
// lexicon term in a template, sometimes next to a clean clause.
inline std::vector<ToxicityExample> generate_toxicity(std::uint64_t seed, std::size_t n,
                                                      const Lexicon& lexicon = Lexicon::defaults()) {
    require_count(n);
    static const std::array<std::vector<std::string>, kToxicClasses> templates{{
        {"i will {} you", "i am going to {} you", "someone should {} you", "i want to {} you tonight"},
        {"you are such a {}", "what a {} you are", "you are {}", "stop being so {}"},
        {"this is {}", "what the {}", "{} this", "that is total {}"},
    }};
    Rng rng(seed);
    std::vector<ToxicityExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ToxicityExample ex;
        const std::size_t kind = i % 4;
        if (kind == 0) {
            ex.text = clean_sentence(rng);
        } else {
            const std::size_t c = kind - 1;
            const auto& terms = lexicon.terms[c];
            if (terms.empty()) throw std::invalid_argument("lexicon class has no terms");
            std::string t = rng.pick(templates[c]);
            const std::string term = rng.pick(terms);
            // Phrase-style threat terms already carry their object.
            if (c == 0 && term.find(' ') != std::string::npos) t = "i will {}";
            t.replace(t.find("{}"), 2, term);
            switch (rng.below(3)) {
                case 0: ex.text = clean_sentence(rng) + " " + t; break;
                case 1: ex.text = t + " " + clean_sentence(rng); break;
                default: ex.text = t; break;
            }
            ex.labels[c] = true;
        }
        out.push_back(std::move(ex));
    }
    rng.shuffle(out);
    return out;
}

// ----- paraphrases -----

struct ParaphraseExample {
    std::string a;
    std::string b;
    bool paraphrase;
};

// Even indices: b restates a via perspective flip and/or synonym swaps.
// Odd indices: b is a clause about another topic.
inline std::vector<ParaphraseExample> generate_paraphrases(std::uint64_t seed, std::size_t n) {
    require_count(n);
    Rng rng(seed);
    std::vector<ParaphraseExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Clause c = random_clause(rng);
        const std::string a = render(c);
        if (i % 2 == 0) {
            Clause d = c;
            if (is_speaker_fact(c) && rng.below(2) == 1) d.second_person = !c.second_person;
            std::string b = swap_synonym(render(d), rng);
            if (rng.below(2) == 1) b = swap_synonym(b, rng);
            out.push_back({a, b, true});
        } else {
            Clause d = random_clause(rng);
            d.fact = fact_from_other_topic(c.fact, rng);
            d.second_person = is_speaker_fact(d) && d.second_person;
            out.push_back({a, render(d), false});
        }
    }
    rng.shuffle(out);
    return out;
}

// ----- counselling dialogue -----

struct DialoguePair {
    std::string prompt;
    std::string response;
};

inline std::string topic_phrase(const std::string& topic, bool second) {
    const std::string my = second ? "your" : "my";
    if (topic == "sleep") return my + " sleep";
    if (topic == "work") return my + " job";
    if (topic == "family") return my + " family";
    if (topic == "mood") return my + " mood";
    if (topic == "school") return "school";
    if (topic == "friends") return my + " friends";
    if (topic == "health") return my + " health";
    if (topic == "money") return "money";
    return "the weather";
}

// Person-centred prompt/response templates. The response template is fixed
// by the prompt template, so the mapping is learnable; three of the five
// responses are open questions and two are reflections.
inline DialoguePair dialogue_pair(std::size_t tmpl, const Clause& clause, const std::string& emotion) {
    Clause mine = clause;
    mine.second_person = false;
    Clause yours = clause;
    yours.second_person = true;
    const std::string c = render(mine);
    const std::string cs = render(yours);
    const std::string topic = facts().at(clause.fact).topic;
    switch (tmpl % 5) {
        case 0: return {c + ".", "it sounds like " + cs + ". can you tell me more about that?"};
        case 1: return {"i feel " + emotion + " because " + c + ".",
                        "you feel " + emotion + " because " + cs + ". that sounds really hard."};
        case 2: return {"lately " + c + " and i feel " + emotion + ".",
                        "what has it been like for you to feel " + emotion + "?"};
        case 3: return {"i do not know what to do about " + topic_phrase(topic, false) + ".",
                        "what would you like to be different about " + topic_phrase(topic, true) + "?"};
        default: return {c + ". i just feel " + emotion + ".",
                         "feeling " + emotion + " makes sense. i am here with you."};
    }
}

inline std::vector<DialoguePair> generate_dialogue(std::uint64_t seed, std::size_t n) {
    require_count(n);
    Rng rng(seed);
    std::vector<DialoguePair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t tmpl = rng.below(5);
        Clause c = random_clause(rng);
        out.push_back(dialogue_pair(tmpl, c, rng.pick(emotions())));
    }
    return out;
}

}  // namespace counsel::synth
