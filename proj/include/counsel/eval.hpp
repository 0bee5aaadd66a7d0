#pragma once

// Self-checking evaluation suites shared by the operator CLI and the
// acceptance binary. Each returns named checks with measured values.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "counsel/beam.hpp"
#include "counsel/classifiers.hpp"
#include "counsel/gradcheck.hpp"
#include "counsel/pipeline.hpp"
#include "counsel/session.hpp"
#include "counsel/synthetic.hpp"
#include "counsel/transformer.hpp"

namespace counsel::eval {

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SuiteReport {
    std::string suite;
    std::vector<Check> checks;
    double seconds = 0.0;

    bool passed() const {
        return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
    }

    void add(std::string name, bool ok, std::string detail = "") {
        checks.push_back({std::move(name), ok, std::move(detail)});
    }

    std::string render() const {
        std::ostringstream os;
        for (const auto& c : checks)
            os << (c.passed ? "ok   " : "FAIL ") << suite << ": " << c.name
               << (c.detail.empty() ? "" : "  (" + c.detail + ")") << '\n';
        os << suite << ": " << (passed() ? "PASS" : "FAIL") << " in " << fmt_real(seconds) << " s\n";
        return os.str();
    }
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

// ------------------------------------------------------------ gradients

// A random small encoder-decoder; at most a few thousand parameters.
inline TransformerConfig random_toy_config(Rng& rng) {
    TransformerConfig c;
    c.n_encoder_layers = 1 + rng.below(2);
    c.n_decoder_layers = 1 + rng.below(2);
    c.n_heads = 1 + rng.below(2);
    c.d_model = c.n_heads * (4 + 2 * rng.below(3));
    c.d_ff = c.d_model * (1 + rng.below(2));
    c.vocab_size = 8 + rng.below(8);
    c.max_positions = 12;
    c.dropout = 0.0;
    c.activation = rng.below(2) ? Activation::gelu : Activation::relu;
    return c;
}

inline SuiteReport gradient_suite(std::uint64_t seed = 1, std::size_t n_configs = 3) {
    SuiteReport r{"gradient", {}, 0.0};
    Stopwatch sw;
    Rng rng(seed);
    for (std::size_t k = 0; k < n_configs; ++k) {
        const auto c = random_toy_config(rng);
        auto model = init_model(c, derive_seed(seed, k));
        auto random_seq = [&](std::size_t n) {
            TokenSequence s{Vocabulary::bos};
            for (std::size_t i = 0; i < n; ++i) s.push_back(Vocabulary::kSpecialCount + rng.below(c.vocab_size - Vocabulary::kSpecialCount));
            s.push_back(Vocabulary::eos);
            return s;
        };
        const TrainingPair pair{random_seq(2 + rng.below(4)), random_seq(2 + rng.below(4))};
        const auto res = oracle::check_gradients(
            model.params(),
            [&] {
                Graph g(false);
                return g.value(pair_loss(g, model, pair)).item();
            },
            [&] {
                Graph g;
                g.backward(pair_loss(g, model, pair));
            });
        const std::size_t n_params = model.parameter_count();
        std::ostringstream name;
        name << "config " << k << " enc" << c.n_encoder_layers << "/dec" << c.n_decoder_layers << " d" << c.d_model
             << " h" << c.n_heads << " ff" << c.d_ff << " V" << c.vocab_size;
        r.add(name.str(), res.max_rel_error < 1e-4 && res.checked == n_params && n_params <= 50000,
              std::to_string(n_params) + " params, max rel err " + sci(res.max_rel_error));
    }
    r.seconds = sw.seconds();
    return r;
}

// ------------------------------------------------------------ beam oracle

// Log-probability of a full sequence from one teacher-forced forward pass.
inline double sequence_log_prob(const Seq2SeqModel& m, const TokenSequence& src, const TokenSequence& ids) {
    const TokenSequence prefix(ids.begin(), ids.end() - 1);
    const Tensor logits = forward(m, src, prefix);
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
        std::vector<double> row(logits.cols());
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = logits(t, j);
        total += log_softmax(row)[ids[t + 1]];
    }
    return total;
}

// Every sequence the decoder could emit, scored independently and ranked.
inline std::vector<Candidate> exhaustive_top_k(const Seq2SeqModel& m, const TokenSequence& src, const BeamConfig& cfg) {
    std::vector<TokenSequence> complete, frontier{{Vocabulary::bos}};
    while (!frontier.empty()) {
        std::vector<TokenSequence> next;
        for (const auto& p : frontier) {
            for (TokenId t = 0; t < m.config().vocab_size; ++t) {
                if (std::find(cfg.banned.begin(), cfg.banned.end(), t) != cfg.banned.end()) continue;
                if (t == Vocabulary::eos && p.size() < cfg.min_len) continue;
                TokenSequence s = p;
                s.push_back(t);
                (t == Vocabulary::eos || s.size() == cfg.max_len ? complete : next).push_back(std::move(s));
            }
        }
        frontier = std::move(next);
    }
    std::vector<Candidate> out;
    for (auto& ids : complete) {
        Candidate c;
        c.log_prob = sequence_log_prob(m, src, ids);
        c.score = c.log_prob / std::pow(static_cast<double>(ids.size()), cfg.length_penalty_alpha);
        c.ids = std::move(ids);
        out.push_back(std::move(c));
    }
    std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
        return a.score != b.score ? a.score > b.score : a.ids < b.ids;
    });
    if (out.size() > cfg.beam_width) out.resize(cfg.beam_width);
    return out;
}

inline SuiteReport beam_oracle_suite(std::uint64_t seed = 3) {
    SuiteReport r{"beam-oracle", {}, 0.0};
    Stopwatch sw;
    TransformerConfig c;
    c.n_encoder_layers = 1;
    c.n_decoder_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = 6;
    c.max_positions = 16;
    c.dropout = 0.0;
    for (std::uint64_t k = 0; k < 3; ++k) {
        const auto model = init_model(c, derive_seed(seed, k));
        const TokenSequence src{Vocabulary::bos, 4, 5, 4, Vocabulary::eos};
        for (double alpha : {0.0, 0.65, 1.0}) {
            BeamConfig cfg;
            cfg.max_len = 4;
            cfg.min_len = 1 + k % 2;
            cfg.length_penalty_alpha = alpha;
            cfg.beam_width = 6 * 6 * 6 * 6;
            const auto got = beam_search(model, src, cfg);
            const auto want = exhaustive_top_k(model, src, cfg);
            bool same = got.size() == want.size();
            double worst = 0.0;
            for (std::size_t i = 0; same && i < got.size(); ++i) {
                same = got[i].ids == want[i].ids;
                worst = std::max({worst, std::abs(got[i].score - want[i].score),
                                  std::abs(got[i].log_prob - want[i].log_prob)});
            }
            r.add("model " + std::to_string(k) + " alpha " + fmt_real(alpha) + " min_len " + std::to_string(cfg.min_len),
                  same && worst < 1e-9,
                  std::to_string(want.size()) + " sequences, max score diff " + sci(worst));
        }
    }
    r.seconds = sw.seconds();
    return r;
}

// ------------------------------------------------------------ classifiers

inline SuiteReport nli_suite(const NliClassifier& model, std::uint64_t test_seed = 202, std::size_t n = 900) {
    SuiteReport r{"nli", {}, 0.0};
    Stopwatch sw;
    const double acc = nli_accuracy(model, synth::generate_nli(test_seed, n));
    r.add("held-out accuracy >= 0.90", acc >= 0.90, "accuracy " + fmt_real(acc) + " on " + std::to_string(n));
    r.seconds = sw.seconds();
    return r;
}

inline SuiteReport toxicity_suite(const ToxicityScorer& scorer, std::uint64_t test_seed = 202, std::size_t n = 800) {
    SuiteReport r{"toxicity", {}, 0.0};
    Stopwatch sw;
    const auto acc = toxicity_accuracy(scorer, synth::generate_toxicity(test_seed, n, Lexicon::defaults()));
    for (std::size_t c = 0; c < kToxicClasses; ++c)
        r.add(std::string(class_name(static_cast<ToxicClass>(c))) + " accuracy >= 0.90", acc[c] >= 0.90,
              "accuracy " + fmt_real(acc[c]) + " on " + std::to_string(n));
    r.seconds = sw.seconds();
    return r;
}

// ------------------------------------------------------------ pipeline

// The exclusion property is checked with a plain restatement of the rule:
// lowercase, collapse whitespace, substring.
inline std::string fold_spaces_lower(std::string_view s) {
    std::string out;
    bool space = false;
    for (char ch : s) {
        if (text::is_space(ch)) {
            space = !out.empty();
            continue;
        }
        if (space) out += ' ';
        space = false;
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
}

inline bool leaks_phrase(std::string_view reply, const std::vector<std::string>& phrases) {
    const std::string r = fold_spaces_lower(reply);
    return std::any_of(phrases.begin(), phrases.end(),
                       [&](const std::string& p) { return r.find(fold_spaces_lower(p)) != std::string::npos; });
}

struct PropertyWorld {
    std::vector<Candidate> beam;
    std::string prompt;
    SessionState session;
    PipelineConfig config;
};

// Sentences mixing every way a candidate can fail, with random casing and
// spacing so exclusion matching has to normalize.
inline std::string random_sentence(Rng& rng, const std::vector<std::string>& history) {
    static const std::vector<std::string> questions{
        "how did that make you feel?", "can you tell me more about that?", "what would you like to be different?",
        "what has it been like for you?", "how are you sleeping?"};
    static const std::vector<std::string> excluded{
        "I don't know what to say.", "You just have to get over it.", "i   DON'T know what to say",
        "you just HAVE to get   over it", "I have seen you before.", "i remember you.", "When we last spoke, you were sad."};
    const auto lex = Lexicon::defaults();
    auto shout = [&](std::string s) {
        if (rng.below(3) == 0)
            for (auto& ch : s)
                if (rng.below(2)) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        return s;
    };
    switch (rng.below(9)) {
        case 0: return rng.pick(synth::supportive_sentences()) + ".";
        case 1:
        case 2: return rng.pick(questions);
        case 3: return shout(rng.pick(excluded));
        case 4: {
            const auto c = static_cast<ToxicClass>(rng.below(kToxicClasses));
            return "you are " + rng.pick(lex.of(c)) + ".";
        }
        case 5: {
            auto cl = synth::random_clause(rng);
            std::string s = synth::render(cl) + ". ";
            cl.negated = !cl.negated;
            return s + synth::render(cl) + ".";
        }
        case 6:
            if (!history.empty()) return rng.pick(history);
            [[fallthrough]];
        default: return "it sounds like " + synth::render(synth::random_clause(rng)) + ".";
    }
}

inline PropertyWorld random_world(Rng& rng) {
    PropertyWorld w;
    static const HashingEmbedder history_embedder(64);
    w.session = create_session(0);
    std::vector<std::string> said;
    const std::size_t history = rng.below(7);
    for (std::size_t i = 0; i < history; ++i) {
        append_turn(w.session, {Speaker::user, synth::render(synth::random_clause(rng)) + ".",
                                static_cast<Micros>(2 * i + 1), std::nullopt},
                    history_embedder);
        std::string reply = rng.below(2) ? random_sentence(rng, {}) : "can you tell me more about that?";
        said.push_back(reply);
        append_turn(w.session, {Speaker::system, reply, static_cast<Micros>(2 * i + 2), "t" + std::to_string(i)},
                    history_embedder);
    }
    auto clause = synth::random_clause(rng);
    w.prompt = synth::render(clause) + ".";

    const std::size_t n = rng.below(12);  // includes empty beams
    std::set<TokenSequence> used;
    while (w.beam.size() < n) {
        Candidate c;
        const std::size_t parts = 1 + rng.below(2);
        for (std::size_t k = 0; k < parts; ++k) c.text += (k ? " " : "") + random_sentence(rng, said);
        if (rng.below(6) == 0) {
            clause.negated = !clause.negated;  // contradicts the prompt
            c.text = synth::render(clause) + ".";
            clause.negated = !clause.negated;
        }
        c.ids = {Vocabulary::bos};
        for (std::size_t k = 0, len = 1 + rng.below(4); k < len; ++k) c.ids.push_back(4 + rng.below(5));
        c.ids.push_back(Vocabulary::eos);
        if (!used.insert(c.ids).second) continue;
        // Coarse log-probs make exact ties common.
        c.log_prob = -0.5 * static_cast<double>(1 + rng.below(12));
        c.score = length_normalized(c.log_prob, c.ids.size(), 0.65);
        w.beam.push_back(std::move(c));
    }

    PipelineConfig& cfg = w.config;
    std::vector<std::string> order = filter::all();
    rng.shuffle(order);
    std::vector<std::string> kept;
    for (const auto& f : order)
        if (f == filter::exclusions || rng.below(5) != 0) kept.push_back(f);
    cfg.filter_order = kept;
    const double rep[] = {0.5, 0.8, 0.9, 1.0};
    cfg.repetition_threshold = rep[rng.below(4)];
    cfg.toxicity_threshold = rng.below(2) ? 0.5 : 0.99;
    cfg.contradiction_mode = rng.below(2) ? ContradictionMode::argmax_label : ContradictionMode::probability;
    cfg.contradiction_threshold = rng.below(2) ? 0.5 : 0.9;
    cfg.max_consecutive_questions = 1 + rng.below(3);
    return w;
}

struct PropertyTally {
    std::size_t beams = 0;
    std::size_t subset = 0, determinism = 0, order_independence = 0, safety = 0, argmax = 0, fallback = 0,
                monotonicity = 0, trace_shape = 0;
    std::size_t excluded_seen = 0, quoted_phrases_seen = 0, fallbacks = 0, degraded = 0;
};

// Runs `n` randomized beams through the pipeline and counts property
// violations. Acceptance is recomputed without short-circuiting, directly
// from the individual filters.
inline PropertyTally run_pipeline_properties(std::uint64_t seed, std::size_t n, const Judges& judges) {
    PropertyTally t;
    Rng rng(seed);
    const ExclusionList exclusions = ExclusionList::defaults();
    const std::vector<std::string> quoted{"i don't know what to say", "you just have to get over it"};
    for (std::size_t b = 0; b < n; ++b) {
        PropertyWorld w = random_world(rng);
        ++t.beams;
        const ResponsePipeline pipe(w.config, exclusions, judges);
        const Selection sel = pipe.select(w.beam, w.prompt, w.session, "trace");

        // Oracle: failing filter set per candidate, evaluated exhaustively.
        std::vector<std::set<std::string>> fails(w.beam.size());
        for (std::size_t i = 0; i < w.beam.size(); ++i) {
            for (const auto& f : w.config.filter_order)
                if (!pipe.run_filter(f, w.beam[i], w.prompt, w.session).passed) fails[i].insert(f);
            if (leaks_phrase(w.beam[i].text, exclusions.phrases())) ++t.excluded_seen;
            if (leaks_phrase(w.beam[i].text, quoted)) ++t.quoted_phrases_seen;
        }
        auto argmax = [&](auto&& ok) -> std::optional<std::size_t> {
            std::optional<std::size_t> best;
            for (std::size_t i = 0; i < w.beam.size(); ++i)
                if (ok(i) && (!best || w.beam[i].log_prob > w.beam[*best].log_prob ||
                              (w.beam[i].log_prob == w.beam[*best].log_prob && w.beam[i].ids < w.beam[*best].ids)))
                    best = i;
            return best;
        };
        std::optional<std::size_t> want = argmax([&](std::size_t i) { return fails[i].empty(); });
        bool want_degraded = false;
        if (!want && w.config.enabled(filter::question_rate)) {
            want = argmax([&](std::size_t i) {
                return fails[i] == std::set<std::string>{filter::question_rate};
            });
            want_degraded = want.has_value();
        }

        if (sel.fallback) ++t.fallbacks;
        if (sel.trace.degraded) ++t.degraded;

        // Subset: the reply is a beam member that passed (or, degraded, failed only question-rate).
        if (!sel.fallback) {
            const auto idx = sel.trace.chosen;
            const bool member = idx && *idx < w.beam.size() && sel.candidate && *sel.candidate == w.beam[*idx] &&
                                sel.text == w.beam[*idx].text;
            const bool clean = member && (fails[*idx].empty() ||
                                          (sel.trace.degraded && fails[*idx] == std::set<std::string>{filter::question_rate}));
            if (!clean) ++t.subset;
        }
        // Argmax by raw log-prob with lexicographic tie-break.
        if (sel.trace.chosen != want || sel.trace.degraded != want_degraded) ++t.argmax;
        // Fallback exactly when nothing is admissible.
        if (sel.fallback != !want.has_value() || (sel.fallback && sel.text != w.config.fallback_message) ||
            (sel.fallback && sel.trace.chosen))
            ++t.fallback;
        // Safety dominance.
        if (leaks_phrase(sel.text, exclusions.phrases())) ++t.safety;
        // Determinism.
        const Selection again = pipe.select(w.beam, w.prompt, w.session, "trace");
        if (!again.trace.same_decisions(sel.trace) || again.text != sel.text) ++t.determinism;
        // Order independence: another filter order and a shuffled beam.
        {
            PipelineConfig other = w.config;
            rng.shuffle(other.filter_order);
            std::vector<std::size_t> perm(w.beam.size());
            for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
            rng.shuffle(perm);
            std::vector<Candidate> shuffled;
            for (auto i : perm) shuffled.push_back(w.beam[i]);
            const ResponsePipeline pipe2(other, exclusions, judges);
            const Selection s2 = pipe2.select(shuffled, w.prompt, w.session, "trace");
            bool same = s2.text == sel.text && s2.fallback == sel.fallback;
            for (std::size_t k = 0; k < perm.size(); ++k)
                same = same && s2.trace.candidates[k].passed == sel.trace.candidates[perm[k]].passed;
            if (!same) ++t.order_independence;
        }
        // Monotonicity: dropping a non-chosen candidate keeps the reply.
        if (w.beam.size() > 1) {
            std::size_t drop = rng.below(w.beam.size());
            if (sel.trace.chosen && drop == *sel.trace.chosen) drop = (drop + 1) % w.beam.size();
            auto smaller = w.beam;
            smaller.erase(smaller.begin() + static_cast<std::ptrdiff_t>(drop));
            if (pipe.select(smaller, w.prompt, w.session).text != sel.text) ++t.monotonicity;
        }
        // Trace shape: one entry per candidate, verdicts in configured order,
        // rejections carry reasons, exactly one of chosen/fallback.
        bool shape = sel.trace.candidates.size() == w.beam.size() && (sel.trace.chosen.has_value() != sel.trace.fallback);
        for (const auto& ct : sel.trace.candidates) {
            shape = shape && !ct.verdicts.empty() && ct.verdicts.size() <= w.config.filter_order.size();
            for (std::size_t k = 0; k < ct.verdicts.size() && shape; ++k) {
                shape = ct.verdicts[k].filter == w.config.filter_order[k] &&
                        (ct.verdicts[k].passed || !ct.verdicts[k].reason.empty());
            }
            shape = shape && ct.passed == (ct.verdicts.size() == w.config.filter_order.size() &&
                                           std::all_of(ct.verdicts.begin(), ct.verdicts.end(),
                                                       [](const FilterVerdict& v) { return v.passed; }));
        }
        if (w.beam.empty()) shape = shape && sel.fallback && sel.trace.note == "empty beam";
        if (!shape) ++t.trace_shape;
    }
    return t;
}

inline SuiteReport pipeline_suite(const Judges& judges, std::uint64_t seed = 7, std::size_t n = 1000) {
    SuiteReport r{"pipeline", {}, 0.0};
    Stopwatch sw;
    const auto t = run_pipeline_properties(seed, n, judges);
    const std::string of = " violations in " + std::to_string(t.beams) + " beams";
    r.add("subset property", t.subset == 0, std::to_string(t.subset) + of);
    r.add("determinism", t.determinism == 0, std::to_string(t.determinism) + of);
    r.add("order-independence of acceptance", t.order_independence == 0, std::to_string(t.order_independence) + of);
    r.add("safety dominance", t.safety == 0 && t.quoted_phrases_seen > 0,
          std::to_string(t.safety) + " leaks; " + std::to_string(t.excluded_seen) + " candidates carried excluded phrases, " +
              std::to_string(t.quoted_phrases_seen) + " of them quoted ones");
    r.add("argmax-by-log_prob selection", t.argmax == 0, std::to_string(t.argmax) + of);
    r.add("fallback when all rejected", t.fallback == 0 && t.fallbacks > 0,
          std::to_string(t.fallback) + of + "; " + std::to_string(t.fallbacks) + " fallbacks, " +
              std::to_string(t.degraded) + " degraded");
    r.add("monotonicity", t.monotonicity == 0, std::to_string(t.monotonicity) + of);
    r.add("trace shape", t.trace_shape == 0, std::to_string(t.trace_shape) + of);
    r.seconds = sw.seconds();
    return r;
}

}  // namespace counsel::eval
