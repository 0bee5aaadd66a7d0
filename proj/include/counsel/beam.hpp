#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/tokenizer.hpp"
#include "counsel/transformer.hpp"

namespace counsel {

struct BeamConfig {
    std::size_t beam_width = 10;
    std::size_t max_len = kMaxTokens;  // includes the leading BOS
    double length_penalty_alpha = 0.65;
    std::size_t min_len = 2;           // generated tokens (EOS included) before EOS is allowed
    std::vector<TokenId> banned = {Vocabulary::pad, Vocabulary::bos};

    void validate() const {
        if (beam_width < 1) throw std::invalid_argument("beam_width must be at least 1");
        if (min_len >= max_len) throw std::invalid_argument("min_len must be below max_len");
        if (max_len < 2) throw std::invalid_argument("max_len must be at least 2");
        if (length_penalty_alpha < 0.0) throw std::invalid_argument("length penalty must be >= 0");
    }
};

struct Candidate {
    TokenSequence ids;   // starts with BOS; ends with EOS unless it hit max_len
    std::string text;
    double log_prob = 0.0;
    double score = 0.0;  // log_prob / len(ids)^alpha

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

inline double length_normalized(double log_prob, std::size_t length, double alpha) {
    if (alpha == 0.0) return log_prob;
    return log_prob / std::pow(static_cast<double>(length), alpha);
}

inline Candidate rescore(Candidate c, double alpha) {
    if (alpha < 0.0) throw std::invalid_argument("length penalty alpha must be non-negative");
    c.score = length_normalized(c.log_prob, c.ids.size(), alpha);
    return c;
}

// Beam order: higher score first, then lexicographically smaller ids.
inline bool ranks_before(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;
}

inline std::vector<Candidate> rerank(std::vector<Candidate> beam, double alpha) {
    for (auto& c : beam) c = rescore(std::move(c), alpha);
    std::sort(beam.begin(), beam.end(), ranks_before);
    return beam;
}

// Anything that yields log-probabilities over the vocabulary for the next
// token given a decoder prefix.
template <typename S>
concept NextTokenScorer = requires(S& s, const TokenSequence& prefix) {
    { s.next_log_probs(prefix) } -> std::convertible_to<std::vector<double>>;
};

inline std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

// Encodes the context once and scores decoder prefixes against it.
class Seq2SeqScorer {
public:
    Seq2SeqScorer(const Seq2SeqModel& model, const TokenSequence& context)
        : decoder_(model, encode_memory(model, context)) {}

    // Reuses the decoder state of prefix[0..n-1) when it was scored before,
    // which is always the case inside beam_search.
    std::vector<double> next_log_probs(const TokenSequence& prefix) const {
        if (prefix.empty()) throw std::invalid_argument("prefix must hold at least BOS");
        IncrementalDecoder::State state;
        std::size_t have = 0;
        const TokenSequence parent(prefix.begin(), prefix.end() - 1);
        if (auto it = states_.find(parent); it != states_.end()) {
            state = it->second;
            have = parent.size();
        } else {
            state = decoder_.start();
        }
        std::vector<double> logits;
        for (std::size_t i = have; i < prefix.size(); ++i) logits = decoder_.step(state, prefix[i]);
        // Search advances one level at a time; shorter states are dead.
        std::erase_if(states_, [&](const auto& kv) { return kv.first.size() + 1 < prefix.size(); });
        states_.insert_or_assign(prefix, std::move(state));
        return log_softmax(logits);
    }

private:
    static Tensor encode_memory(const Seq2SeqModel& model, const TokenSequence& context) {
        Graph g(false);
        layers::Context ctx(g, model.params(), model.config().activation);
        return g.value(encode_source(ctx, model, context));
    }

    IncrementalDecoder decoder_;
    mutable std::map<TokenSequence, IncrementalDecoder::State> states_;
};

// Breadth-limited best-first search.
//
// Each step expands every live hypothesis by every allowed token, orders the
// expansions by cumulative log-probability (ties: smaller ids first) and
// walks them until beam_width live hypotheses are kept. Expansions ending in
// EOS, or reaching max_len, retire to the finished pool and are never
// extended. Search stops when no live hypothesis remains or when the pool
// holds beam_width entries and no live hypothesis can still beat the worst
// of them (log-probabilities only fall, so lp / max_len^alpha bounds any
// continuation).
template <NextTokenScorer Scorer>
std::vector<Candidate> beam_search(Scorer& scorer, const BeamConfig& config,
                                   const Vocabulary* vocab = nullptr) {
    config.validate();
    struct Hyp {
        TokenSequence ids;
        double log_prob;
    };
    auto hyp_before = [](const Hyp& a, const Hyp& b) {
        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
        return a.ids < b.ids;
    };
    const double alpha = config.length_penalty_alpha;
    auto finish = [&](Hyp h) {
        Candidate c;
        c.ids = std::move(h.ids);
        c.log_prob = std::min(h.log_prob, 0.0);
        c.score = length_normalized(c.log_prob, c.ids.size(), alpha);
        if (vocab) c.text = decode(c.ids, *vocab);
        return c;
    };

    std::vector<Hyp> live{{{Vocabulary::bos}, 0.0}};
    std::vector<Candidate> pool;
    while (!live.empty()) {
        std::vector<Hyp> expansions;
        for (const Hyp& h : live) {
            const std::vector<double> lp = scorer.next_log_probs(h.ids);
            const std::size_t generated = h.ids.size();  // tokens after BOS once extended
            for (TokenId t = 0; t < lp.size(); ++t) {
                if (std::find(config.banned.begin(), config.banned.end(), t) != config.banned.end())
                    continue;
                if (t == Vocabulary::eos && generated < config.min_len) continue;
                Hyp e{h.ids, h.log_prob + lp[t]};
                e.ids.push_back(t);
                expansions.push_back(std::move(e));
            }
        }
        std::sort(expansions.begin(), expansions.end(), hyp_before);
        std::vector<Hyp> next;
        for (Hyp& e : expansions) {
            if (next.size() == config.beam_width) break;
            if (e.ids.back() == Vocabulary::eos || e.ids.size() >= config.max_len)
                pool.push_back(finish(std::move(e)));
            else
                next.push_back(std::move(e));
        }
        live = std::move(next);

        if (pool.size() >= config.beam_width && !live.empty()) {
            std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(config.beam_width - 1),
                             pool.end(), ranks_before);
            const double worst = pool[config.beam_width - 1].score;
            double best_live = -std::numeric_limits<double>::infinity();
            for (const Hyp& h : live)
                best_live = std::max(best_live, length_normalized(h.log_prob, config.max_len, alpha));
            if (best_live < worst) break;
        }
    }
    std::sort(pool.begin(), pool.end(), ranks_before);
    if (pool.size() > config.beam_width) pool.resize(config.beam_width);
    return pool;
}

inline std::vector<Candidate> beam_search(const Seq2SeqModel& model, const TokenSequence& context,
                                          const BeamConfig& config, const Vocabulary* vocab = nullptr) {
    if (context.size() > kMaxTokens) {
        throw SequenceRangeError("context has " + std::to_string(context.size()) +
                                 " ids; limit is " + std::to_string(kMaxTokens));
    }
    Seq2SeqScorer scorer(model, context);
    return beam_search(scorer, config, vocab);
}

// Argmax decoding; stops at EOS or max_len ids. PAD and BOS are never emitted.
inline TokenSequence greedy_decode(const Seq2SeqModel& model, const TokenSequence& context,
                                   std::size_t max_len = kMaxTokens) {
    Seq2SeqScorer scorer(model, context);
    TokenSequence ids{Vocabulary::bos};
    while (ids.size() < max_len) {
        const auto lp = scorer.next_log_probs(ids);
        TokenId best = Vocabulary::eos;
        for (TokenId t = 0; t < lp.size(); ++t) {
            if (t == Vocabulary::pad || t == Vocabulary::bos) continue;
            if (lp[t] > lp[best]) best = t;
        }
        ids.push_back(best);
        if (best == Vocabulary::eos) break;
    }
    return ids;
}

}  // namespace counsel
