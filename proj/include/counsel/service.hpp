#pragma once

#include <ctime>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>

#include "json.hpp"

#include "counsel/config.hpp"
#include "counsel/dialogue.hpp"
#include "counsel/log.hpp"
#include "counsel/pipeline.hpp"
#include "counsel/session.hpp"

namespace counsel {

using nlohmann::json;

inline constexpr std::size_t kMaxMessageChars = 2000;

// Anything that turns a model context into a ranked candidate beam.
class ReplyGenerator {
public:
    virtual ~ReplyGenerator() = default;
    virtual const Vocabulary& vocab() const = 0;
    virtual std::vector<Candidate> generate(const TokenSequence& context) const = 0;
};

class ModelGenerator final : public ReplyGenerator {
public:
    explicit ModelGenerator(DialogueModel m) : model_(std::move(m)) {}
    const Vocabulary& vocab() const override { return model_.vocab; }
    std::vector<Candidate> generate(const TokenSequence& context) const override { return model_.generate(context); }
    const DialogueModel& model() const { return model_; }

private:
    DialogueModel model_;
};

// Owns the three judges. Trained checkpoints are used when configured,
// otherwise the rule, lexicon and hashing implementations.
struct JudgeSet {
    std::unique_ptr<NliClassifier> nli;
    std::unique_ptr<ToxicityScorer> toxicity;
    std::unique_ptr<SentenceEmbedder> embedder;

    Judges view() const { return {*nli, *toxicity, *embedder}; }

    static JudgeSet rules() {
        return {std::make_unique<RuleNli>(), std::make_unique<LexiconToxicity>(), std::make_unique<HashingEmbedder>()};
    }

    static JudgeSet from_config(const ServiceConfig& c) {
        JudgeSet j = rules();
        if (!c.nli_checkpoint.empty()) j.nli = std::make_unique<TrainedNli>(TrainedNli::load(c.nli_checkpoint));
        if (!c.toxicity_checkpoint.empty())
            j.toxicity = std::make_unique<TrainedToxicity>(TrainedToxicity::load(c.toxicity_checkpoint));
        if (!c.embedder_checkpoint.empty())
            j.embedder = std::make_unique<TrainedEmbedder>(TrainedEmbedder::load(c.embedder_checkpoint));
        return j;
    }
};

// ------------------------------------------------------------ wire format

inline std::string iso8601(Micros t) {
    const std::time_t secs = static_cast<std::time_t>(t / 1000000);
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[64];
    std::snprintf(out, sizeof out, "%s.%06lldZ", buf, static_cast<long long>(t % 1000000));
    return out;
}

inline json verdict_json(const FilterVerdict& v) {
    json j{{"filter", v.filter}, {"passed", v.passed}, {"score", v.score}};
    if (!v.passed) j["reason"] = v.reason;
    return j;
}

inline json trace_json(const PipelineTrace& t) {
    json cands = json::array();
    for (const auto& c : t.candidates) {
        json verdicts = json::array();
        for (const auto& v : c.verdicts) verdicts.push_back(verdict_json(v));
        cands.push_back({{"index", c.index},
                         {"text", c.candidate.text},
                         {"log_prob", c.candidate.log_prob},
                         {"score", c.candidate.score},
                         {"passed", c.passed},
                         {"readmitted", c.readmitted},
                         {"verdicts", verdicts}});
    }
    json timing = json::object();
    for (const auto& [f, ms] : t.stage_ms) timing[f] = ms;
    json j{{"id", t.id},
           {"candidates", cands},
           {"chosen", t.chosen ? json(*t.chosen) : json(nullptr)},
           {"fallback", t.fallback},
           {"degraded", t.degraded},
           {"filter_order", t.filter_order},
           {"stage_ms", timing}};
    if (!t.note.empty()) j["note"] = t.note;
    return j;
}

struct ApiResponse {
    int status = 200;
    json body;
};

inline ApiResponse api_error(int status, const std::string& code, const std::string& message,
                             const std::string& field = "") {
    json b{{"code", code}, {"message", message}};
    if (!field.empty()) b["field"] = field;
    return {status, b};
}

inline std::size_t utf8_length(std::string_view s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

// ------------------------------------------------------------ service

// Endpoint logic independent of the HTTP transport. Sessions are
// serialized per id; distinct sessions run concurrently. A message turn
// is generated on a copy of the session and persisted in one append, so a
// failure leaves the stored transcript untouched.
class ChatService {
public:
    ChatService(ServiceConfig config, JudgeSet judges)
        : config_(std::move(config)),
          judges_(std::move(judges)),
          pipeline_(config_.pipeline,
                    config_.pipeline.exclusion_list_path.empty() ? ExclusionList::defaults()
                                                                 : ExclusionList::load(config_.pipeline.exclusion_list_path),
                    judges_.view()),
          store_(config_.store_dir) {
        const auto survey_dir = std::filesystem::path(config_.surveys()).parent_path();
        if (!survey_dir.empty()) std::filesystem::create_directories(survey_dir);
    }

    const ServiceConfig& config() const { return config_; }
    const ResponsePipeline& pipeline() const { return pipeline_; }
    const SessionStore& store() const { return store_; }

    void install(std::shared_ptr<const ReplyGenerator> generator) {
        std::lock_guard g(generator_mu_);
        generator_ = std::move(generator);
    }

    std::shared_ptr<const ReplyGenerator> generator() const {
        std::lock_guard g(generator_mu_);
        return generator_;
    }

    bool model_loaded() const { return generator() != nullptr; }

    ApiResponse health() const {
        const bool loaded = model_loaded();
        return {200, {{"status", loaded ? "ok" : "loading"}, {"model_loaded", loaded}}};
    }

    ApiResponse create_session() {
        SessionState s = counsel::create_session();
        auto lock = lock_session(s.session_id);
        store_.persist(s);
        return {201, {{"session_id", s.session_id}, {"created_at", iso8601(s.created_at)}}};
    }

    ApiResponse get_session(const std::string& id) {
        if (!store_.exists(id)) return not_found(id);
        auto lock = lock_session(id);
        const SessionState s = store_.load(id);
        json turns = json::array();
        for (const auto& t : s.turns)
            turns.push_back({{"speaker", speaker_name(t.speaker)}, {"text", t.text}, {"timestamp", iso8601(t.timestamp)}});
        return {200, {{"session_id", s.session_id}, {"created_at", iso8601(s.created_at)}, {"turns", turns}}};
    }

    ApiResponse post_message(const std::string& id, const std::string& body) {
        if (!store_.exists(id)) return not_found(id);
        json req;
        if (auto err = parse_object(body, req)) return *err;
        if (!req.contains("text")) return api_error(400, "validation_error", "text is required", "text");
        if (!req["text"].is_string()) return api_error(400, "validation_error", "text must be a string", "text");
        const std::string message = req["text"].get<std::string>();
        if (text::trim(message).empty()) return api_error(400, "validation_error", "text is empty", "text");
        if (utf8_length(message) > kMaxMessageChars)
            return api_error(400, "validation_error",
                             "text exceeds " + std::to_string(kMaxMessageChars) + " characters", "text");
        bool debug = false;
        if (req.contains("debug")) {
            if (!req["debug"].is_boolean()) return api_error(400, "validation_error", "debug must be a boolean", "debug");
            debug = req["debug"].get<bool>();
        }
        const auto generator = this->generator();
        if (!generator) return api_error(503, "model_loading", "the reply model is not loaded yet");

        auto lock = lock_session(id);
        try {
            SessionState next = store_.load(id);
            Micros ts = std::max(now_micros(), next.turns.empty() ? next.created_at : next.turns.back().timestamp);
            append_turn(next, {Speaker::user, text::trim(message), ts, std::nullopt}, *judges_.embedder);
            const TokenSequence context = build_model_context(next, generator->vocab());
            const auto beam = generator->generate(context);
            const std::string trace_id = id + ":" + std::to_string(next.turns.size());
            Selection sel = pipeline_.select(beam, next.turns.back().text, next, trace_id);
            ts = std::max(now_micros(), ts);
            append_turn(next, {Speaker::system, sel.text, ts, trace_id}, *judges_.embedder);
            append_trace(id, sel.trace, ts);
            store_.persist(next);
            json out{{"reply", sel.text}, {"turn_index", next.turns.size() - 1}, {"fallback", sel.fallback}};
            if (debug) out["trace"] = trace_json(sel.trace);
            return {200, out};
        } catch (const std::exception& ex) {
            log(LogLevel::error, "message for session " + id + " failed: " + ex.what());
            return api_error(500, "internal_error", "the reply could not be produced; nothing was recorded");
        }
    }

    ApiResponse post_survey(const std::string& id, const std::string& body) {
        if (!store_.exists(id)) return not_found(id);
        json req;
        if (auto err = parse_object(body, req)) return *err;
        json record{{"session_id", id}};
        for (const char* field : {"understands", "engaging", "helpful"}) {
            if (!req.contains(field)) return api_error(400, "validation_error", std::string(field) + " is required", field);
            const json& v = req[field];
            if (!v.is_number_integer() || v.get<long long>() < 1 || v.get<long long>() > 5)
                return api_error(400, "validation_error", std::string(field) + " must be an integer from 1 to 5", field);
            record[field] = v.get<int>();
        }
        if (req.contains("comment") && !req["comment"].is_null()) {
            if (!req["comment"].is_string())
                return api_error(400, "validation_error", "comment must be a string", "comment");
            const std::string comment = req["comment"].get<std::string>();
            if (utf8_length(comment) > kMaxMessageChars)
                return api_error(400, "validation_error", "comment is too long", "comment");
            record["comment"] = comment;
        }
        const Micros at = now_micros();
        record["submitted_at"] = iso8601(at);
        {
            std::lock_guard lock(survey_mu_);
            std::ofstream out(config_.surveys(), std::ios::app | std::ios::binary);
            out << record.dump() << '\n';
            out.flush();
            if (!out) return api_error(500, "internal_error", "survey could not be stored");
        }
        return {201, {{"status", "recorded"}, {"submitted_at", record["submitted_at"]}}};
    }

private:
    static ApiResponse not_found(const std::string& id) {
        return api_error(404, "not_found", "session '" + id + "' does not exist");
    }

    static std::optional<ApiResponse> parse_object(const std::string& body, json& out) {
        try {
            out = json::parse(body);
        } catch (const json::exception&) {
            return api_error(400, "invalid_json", "request body is not valid JSON");
        }
        if (!out.is_object()) return api_error(400, "invalid_json", "request body must be a JSON object");
        return std::nullopt;
    }

    std::unique_lock<std::mutex> lock_session(const std::string& id) {
        std::shared_ptr<std::mutex> mu;
        {
            std::lock_guard g(map_mu_);
            auto& slot = session_mu_[id];
            if (!slot) slot = std::make_shared<std::mutex>();
            mu = slot;
        }
        // The map keeps the mutex alive for the life of the service.
        return std::unique_lock<std::mutex>(*mu);
    }

    void append_trace(const std::string& id, const PipelineTrace& trace, Micros ts) const {
        const auto path = store_.dir() / (id + ".traces.jsonl");
        std::ofstream out(path, std::ios::app | std::ios::binary);
        out << json{{"type", "trace"}, {"timestamp", ts}, {"payload", trace_json(trace)}}.dump() << '\n';
        out.flush();
        if (!out) throw SessionError("failed writing trace for '" + id + "'");
    }

    ServiceConfig config_;
    JudgeSet judges_;
    ResponsePipeline pipeline_;
    SessionStore store_;
    mutable std::mutex generator_mu_;
    std::shared_ptr<const ReplyGenerator> generator_;
    std::mutex map_mu_;
    std::unordered_map<std::string, std::shared_ptr<std::mutex>> session_mu_;
    std::mutex survey_mu_;
};

}  // namespace counsel
