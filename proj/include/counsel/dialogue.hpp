#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/beam.hpp"
#include "counsel/classifiers.hpp"
#include "counsel/session.hpp"
#include "counsel/synthetic.hpp"
#include "counsel/transformer.hpp"

namespace counsel {

class CorpusError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training corpus: one "prompt<TAB>response" pair per line. Blank lines
// are skipped; anything else without exactly one tab and two non-empty
// sides is an error naming its 1-based line.
inline std::vector<synth::DialoguePair> read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorpusError("cannot open corpus '" + path.string() + "'");
    std::vector<synth::DialoguePair> out;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::trim(line).empty()) continue;
        const auto tab = line.find('\t');
        auto fail = [&](const char* why) {
            return CorpusError(path.string() + " line " + std::to_string(n) + ": " + why);
        };
        if (tab == std::string::npos) throw fail("expected prompt<TAB>response");
        if (line.find('\t', tab + 1) != std::string::npos) throw fail("more than one tab");
        synth::DialoguePair p{text::trim(line.substr(0, tab)), text::trim(line.substr(tab + 1))};
        if (p.prompt.empty()) throw fail("empty prompt");
        if (p.response.empty()) throw fail("empty response");
        out.push_back(std::move(p));
    }
    if (out.empty()) throw CorpusError("corpus '" + path.string() + "' has no pairs");
    return out;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<synth::DialoguePair>& pairs) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorpusError("cannot write corpus '" + path.string() + "'");
    for (const auto& p : pairs) {
        if (p.prompt.find_first_of("\t\n") != std::string::npos ||
            p.response.find_first_of("\t\n") != std::string::npos)
            throw CorpusError("pair contains a tab or newline");
        out << p.prompt << '\t' << p.response << '\n';
    }
    if (!out) throw CorpusError("failed writing corpus '" + path.string() + "'");
}

inline Vocabulary build_dialogue_vocab(const std::vector<synth::DialoguePair>& pairs, std::size_t max_size = 4000) {
    std::vector<std::string> lines;
    for (const auto& p : pairs) {
        lines.push_back(p.prompt);
        lines.push_back(p.response);
    }
    return Vocabulary::build(lines, max_size, {kSeparatorToken});
}

// Each prompt is framed exactly as a one-turn session context.
inline std::vector<TrainingPair> to_training_pairs(const std::vector<synth::DialoguePair>& pairs,
                                                   const Vocabulary& vocab) {
    std::vector<TrainingPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back({encode(p.prompt, vocab), encode(p.response, vocab)});
    return out;
}

// As above, but a `history_fraction` of prompts is preceded by another
// pair's exchange, framed exactly as a three-turn session context. The
// model then learns to answer the newest turn when history is present.
inline std::vector<TrainingPair> to_training_pairs(const std::vector<synth::DialoguePair>& pairs,
                                                   const Vocabulary& vocab, double history_fraction,
                                                   std::uint64_t seed) {
    if (!(history_fraction >= 0.0 && history_fraction <= 1.0))
        throw std::invalid_argument("history_fraction must lie in [0, 1]");
    auto out = to_training_pairs(pairs, vocab);
    if (pairs.size() < 2) return out;
    Rng rng(derive_seed(seed, 17));
    // append_turn caches reply embeddings; they are discarded here.
    static const HashingEmbedder scratch(2);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (rng.uniform() >= history_fraction) continue;
        std::size_t j = rng.below(pairs.size() - 1);
        if (j >= i) ++j;
        SessionState s = create_session(0);
        append_turn(s, {Speaker::user, pairs[j].prompt, 0, std::nullopt}, scratch);
        append_turn(s, {Speaker::system, pairs[j].response, 0, "train"}, scratch);
        append_turn(s, {Speaker::user, pairs[i].prompt, 0, std::nullopt}, scratch);
        out[i].prompt = build_model_context(s, vocab);
    }
    return out;
}

// Beam settings used for replies: ten candidates, and the turn separator
// and <unk> are never generated.
inline BeamConfig reply_beam_config(const Vocabulary& vocab) {
    BeamConfig c;
    c.banned.push_back(Vocabulary::unk);
    if (vocab.contains(kSeparatorToken)) c.banned.push_back(vocab.id(kSeparatorToken));
    return c;
}

// A trained reply model with its vocabulary.
struct DialogueModel {
    Seq2SeqModel model;
    Vocabulary vocab;
    BeamConfig beam;

    DialogueModel(Seq2SeqModel m, Vocabulary v) : model(std::move(m)), vocab(std::move(v)), beam(reply_beam_config(vocab)) {
        if (model.config().vocab_size != vocab.size())
            throw ConfigError("model vocabulary size " + std::to_string(model.config().vocab_size) +
                              " differs from vocabulary file size " + std::to_string(vocab.size()));
        beam.max_len = std::min(beam.max_len, model.config().max_positions);
    }

    static DialogueModel load(const std::string& checkpoint, const std::string& vocab_path) {
        return DialogueModel(load_checkpoint(checkpoint), Vocabulary::load(vocab_path));
    }

    // Ranked candidates with display text.
    std::vector<Candidate> generate(const TokenSequence& context) const {
        auto beam_out = beam_search(model, context, beam, &vocab);
        for (auto& c : beam_out) c.text = text::detokenize(c.text);
        return beam_out;
    }
};

}  // namespace counsel
