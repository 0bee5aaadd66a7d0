#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/beam.hpp"
#include "counsel/classifiers.hpp"
#include "counsel/session.hpp"
#include "counsel/text.hpp"

namespace counsel {

namespace filter {
inline constexpr const char* exclusions = "exclusions";
inline constexpr const char* question_rate = "question-rate";
inline constexpr const char* repetition = "repetition";
inline constexpr const char* toxicity = "toxicity";
inline constexpr const char* contradiction = "contradiction";

inline const std::vector<std::string>& all() {
    static const std::vector<std::string> names{exclusions, question_rate, repetition, toxicity, contradiction};
    return names;
}
}  // namespace filter

class PipelineConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ContradictionMode { argmax_label, probability };

struct PipelineConfig {
    double repetition_threshold = 0.9;
    double toxicity_threshold = 0.5;
    ContradictionMode contradiction_mode = ContradictionMode::argmax_label;
    double contradiction_threshold = 0.5;  // used in probability mode
    std::size_t max_consecutive_questions = 2;
    std::string exclusion_list_path;       // empty: built-in list
    std::vector<std::string> filter_order = filter::all();
    std::string fallback_message = "thank you for sharing that with me. i am here to listen.";

    // filter_order lists the enabled filters; names must be known and unique.
    void validate() const {
        auto unit = [](double v, const char* name) {
            if (!(v >= 0.0 && v <= 1.0))
                throw PipelineConfigError(std::string(name) + " must lie in [0, 1]");
        };
        unit(repetition_threshold, "repetition_threshold");
        unit(toxicity_threshold, "toxicity_threshold");
        unit(contradiction_threshold, "contradiction_threshold");
        std::set<std::string> seen;
        for (const auto& f : filter_order) {
            if (std::find(filter::all().begin(), filter::all().end(), f) == filter::all().end())
                throw PipelineConfigError("unknown filter '" + f + "'");
            if (!seen.insert(f).second) throw PipelineConfigError("filter '" + f + "' listed twice");
        }
        if (text::trim(fallback_message).empty()) throw PipelineConfigError("fallback_message is empty");
    }

    bool enabled(const std::string& f) const {
        return std::find(filter_order.begin(), filter_order.end(), f) != filter_order.end();
    }
};

// Normalized phrases; a text is excluded when any phrase is a substring of
// its normalized form.
class ExclusionList {
public:
    ExclusionList() = default;

    explicit ExclusionList(const std::vector<std::string>& phrases) {
        for (const auto& p : phrases) {
            std::string n = text::normalize(p);
            if (n.empty()) continue;
            if (std::find(phrases_.begin(), phrases_.end(), n) == phrases_.end()) phrases_.push_back(n);
        }
    }

    static ExclusionList defaults() {
        return ExclusionList({"i don't know what to say", "you just have to get over it",
                              "i have seen you before", "i remember you", "when we last spoke"});
    }

    // One phrase per line; '#' comments and blank lines ignored.
    static ExclusionList load(const std::filesystem::path& path) { return ExclusionList(read_phrase_file(path)); }

    const std::vector<std::string>& phrases() const { return phrases_; }

    // The first phrase found in `text`, if any.
    std::optional<std::string> find_in(std::string_view text) const {
        const std::string n = text::normalize(text);
        for (const auto& p : phrases_)
            if (n.find(p) != std::string::npos) return p;
        return std::nullopt;
    }

private:
    std::vector<std::string> phrases_;
};

struct FilterVerdict {
    std::string filter;
    bool passed = true;
    double score = 0.0;
    std::string reason;  // non-empty when rejected

    friend bool operator==(const FilterVerdict&, const FilterVerdict&) = default;
};

inline FilterVerdict reject(const char* f, double score, std::string reason) {
    return {f, false, score, std::move(reason)};
}

// A response is a question when its final sentence ends with '?'.
inline bool is_question(std::string_view response) {
    const std::string t = text::trim(response);
    return !t.empty() && t.back() == '?';
}

inline std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

// ---------------------------------------------------------------- filters

inline FilterVerdict check_exclusions(const Candidate& c, const ExclusionList& list) {
    if (auto hit = list.find_in(c.text)) return reject(filter::exclusions, 1.0, "contains excluded phrase \"" + *hit + "\"");
    return {filter::exclusions, true, 0.0, ""};
}

inline FilterVerdict check_repetition(const Candidate& c, const SessionState& session, double threshold,
                                      const SentenceEmbedder& embedder) {
    double best = 0.0;
    if (!session.response_embeddings.empty()) {
        const auto e = embedder.embed(c.text);
        best = -1.0;
        for (const auto& prev : session.response_embeddings) best = std::max(best, cosine_similarity(e, prev));
    }
    if (best >= threshold)
        return reject(filter::repetition, best,
                      "similarity " + fmt_real(best) + " to an earlier reply reaches " + fmt_real(threshold));
    return {filter::repetition, true, best, ""};
}

inline FilterVerdict check_toxicity(const Candidate& c, double threshold, const ToxicityScorer& scorer) {
    const auto s = scorer.score(c.text);
    if (s.overall >= threshold) {
        std::string worst = "threat";
        if (s.insult == s.overall) worst = "insult";
        if (s.obscene == s.overall) worst = "obscene";
        if (s.threat == s.overall) worst = "threat";
        return reject(filter::toxicity, s.overall, worst + " score " + fmt_real(s.overall) + " reaches " + fmt_real(threshold));
    }
    return {filter::toxicity, true, s.overall, ""};
}

// NLI over every ordered pair of distinct candidate sentences and over
// (prompt, sentence) for each candidate sentence.
inline FilterVerdict check_contradiction(const Candidate& c, std::string_view prompt, const PipelineConfig& cfg,
                                         const NliClassifier& nli) {
    const auto sentences = text::split_sentences(c.text);
    double worst = 0.0;
    auto contradicts = [&](std::string_view premise, std::string_view hypothesis) {
        const NliResult r = nli.classify(premise, hypothesis);
        const double p = r.prob(NliLabel::contradiction);
        worst = std::max(worst, p);
        return cfg.contradiction_mode == ContradictionMode::argmax_label ? r.label == NliLabel::contradiction
                                                                         : p >= cfg.contradiction_threshold;
    };
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        for (std::size_t j = 0; j < sentences.size(); ++j) {
            if (i != j && contradicts(sentences[i], sentences[j]))
                return reject(filter::contradiction, worst,
                              "\"" + sentences[j] + "\" contradicts \"" + sentences[i] + "\"");
        }
    }
    for (const auto& s : sentences) {
        if (contradicts(prompt, s))
            return reject(filter::contradiction, worst, "\"" + s + "\" contradicts the user prompt");
    }
    return {filter::contradiction, true, worst, ""};
}

inline FilterVerdict check_question_rate(const Candidate& c, const SessionState& session, std::size_t max_consecutive) {
    const auto sys = session.system_turns();
    std::size_t streak = 0;
    for (auto it = sys.rbegin(); it != sys.rend() && is_question((*it)->text); ++it) ++streak;
    const bool question = is_question(c.text);
    if (question && streak >= max_consecutive)
        return reject(filter::question_rate, static_cast<double>(streak),
                      "would be question number " + std::to_string(streak + 1) + " in a row (limit " +
                          std::to_string(max_consecutive) + ")");
    return {filter::question_rate, true, static_cast<double>(question ? streak + 1 : 0), ""};
}

// ---------------------------------------------------------------- selection

struct CandidateTrace {
    std::size_t index = 0;  // position in the input beam
    Candidate candidate;
    std::vector<FilterVerdict> verdicts;
    bool passed = false;      // passed every enabled filter
    bool readmitted = false;  // chosen pool of the degrade step

    friend bool operator==(const CandidateTrace&, const CandidateTrace&) = default;
};

struct PipelineTrace {
    std::string id;
    std::vector<CandidateTrace> candidates;
    std::optional<std::size_t> chosen;  // index into the input beam
    bool fallback = false;
    bool degraded = false;
    std::string note;
    std::vector<std::string> filter_order;
    std::vector<std::pair<std::string, double>> stage_ms;  // wall time per filter

    // Everything except timings.
    bool same_decisions(const PipelineTrace& o) const {
        return id == o.id && candidates == o.candidates && chosen == o.chosen && fallback == o.fallback &&
               degraded == o.degraded && note == o.note && filter_order == o.filter_order;
    }
};

struct Selection {
    std::string text;
    std::optional<Candidate> candidate;  // empty on fallback
    bool fallback = false;
    PipelineTrace trace;
};

struct Judges {
    const NliClassifier& nli;
    const ToxicityScorer& toxicity;
    const SentenceEmbedder& embedder;
};

class ResponsePipeline {
public:
    ResponsePipeline(PipelineConfig config, ExclusionList exclusions, Judges judges)
        : config_(std::move(config)), exclusions_(std::move(exclusions)), judges_(judges) {
        config_.validate();
        if (auto hit = exclusions_.find_in(config_.fallback_message))
            throw PipelineConfigError("fallback_message contains excluded phrase \"" + *hit + "\"");
    }

    const PipelineConfig& config() const { return config_; }
    const ExclusionList& exclusions() const { return exclusions_; }
    const Judges& judges() const { return judges_; }

    FilterVerdict run_filter(const std::string& f, const Candidate& c, std::string_view prompt,
                             const SessionState& session) const {
        if (f == filter::exclusions) return check_exclusions(c, exclusions_);
        if (f == filter::question_rate) return check_question_rate(c, session, config_.max_consecutive_questions);
        if (f == filter::repetition) return check_repetition(c, session, config_.repetition_threshold, judges_.embedder);
        if (f == filter::toxicity) return check_toxicity(c, config_.toxicity_threshold, judges_.toxicity);
        if (f == filter::contradiction) return check_contradiction(c, prompt, config_, judges_.nli);
        throw PipelineConfigError("unknown filter '" + f + "'");
    }

    // Filters each candidate in the configured order, stopping at its first
    // rejection, then picks the highest raw log-probability among the
    // survivors (ties: smaller token ids). With no survivors, candidates
    // whose only failure is the question-rate rule are re-admitted; failing
    // that, the fallback message is returned.
    Selection select(const std::vector<Candidate>& beam, std::string_view prompt, const SessionState& session,
                     std::string trace_id = "") const {
        Selection sel;
        PipelineTrace& tr = sel.trace;
        tr.id = std::move(trace_id);
        tr.filter_order = config_.filter_order;
        for (const auto& f : config_.filter_order) tr.stage_ms.push_back({f, 0.0});
        if (beam.empty()) {
            tr.fallback = true;
            tr.note = "empty beam";
            sel.fallback = true;
            sel.text = config_.fallback_message;
            return sel;
        }

        auto timed = [&](std::size_t stage, const Candidate& c) {
            const auto t0 = std::chrono::steady_clock::now();
            FilterVerdict v = run_filter(config_.filter_order[stage], c, prompt, session);
            tr.stage_ms[stage].second +=
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            return v;
        };

        std::vector<std::size_t> first_failure(beam.size(), config_.filter_order.size());
        for (std::size_t i = 0; i < beam.size(); ++i) {
            CandidateTrace ct{i, beam[i], {}, true, false};
            for (std::size_t k = 0; k < config_.filter_order.size(); ++k) {
                ct.verdicts.push_back(timed(k, beam[i]));
                if (!ct.verdicts.back().passed) {
                    ct.passed = false;
                    first_failure[i] = k;
                    break;
                }
            }
            tr.candidates.push_back(std::move(ct));
        }

        auto best_of = [&](auto&& eligible) -> std::optional<std::size_t> {
            std::optional<std::size_t> best;
            for (std::size_t i = 0; i < beam.size(); ++i) {
                if (!eligible(i)) continue;
                if (!best || beam[i].log_prob > beam[*best].log_prob ||
                    (beam[i].log_prob == beam[*best].log_prob && beam[i].ids < beam[*best].ids))
                    best = i;
            }
            return best;
        };

        tr.chosen = best_of([&](std::size_t i) { return tr.candidates[i].passed; });
        if (!tr.chosen && config_.enabled(filter::question_rate)) {
            // Degrade: finish the remaining filters for question-rate rejects.
            for (std::size_t i = 0; i < beam.size(); ++i) {
                CandidateTrace& ct = tr.candidates[i];
                if (first_failure[i] >= config_.filter_order.size() ||
                    config_.filter_order[first_failure[i]] != filter::question_rate)
                    continue;
                bool ok = true;
                for (std::size_t k = first_failure[i] + 1; k < config_.filter_order.size() && ok; ++k) {
                    ct.verdicts.push_back(timed(k, beam[i]));
                    ok = ct.verdicts.back().passed;
                }
                ct.readmitted = ok;
            }
            tr.chosen = best_of([&](std::size_t i) { return tr.candidates[i].readmitted; });
            if (tr.chosen) {
                tr.degraded = true;
                tr.note = "no candidate passed every filter; re-admitted question-rate rejects";
            }
        }
        if (!tr.chosen) {
            tr.fallback = true;
            tr.note = "every candidate was rejected";
            sel.fallback = true;
            sel.text = config_.fallback_message;
            return sel;
        }
        sel.candidate = beam[*tr.chosen];
        sel.text = sel.candidate->text;
        return sel;
    }

private:
    PipelineConfig config_;
    ExclusionList exclusions_;
    Judges judges_;
};

}  // namespace counsel
