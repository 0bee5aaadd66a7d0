#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "counsel/classifiers.hpp"
#include "counsel/tokenizer.hpp"

namespace counsel {

class SessionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SessionNotFound : public SessionError {
public:
    explicit SessionNotFound(const std::string& id) : SessionError("session '" + id + "' not found") {}
};

class TurnOrderError : public SessionError {
public:
    using SessionError::SessionError;
};

// A malformed line in a session's event log; `line` is 1-based.
class SessionLogError : public SessionError {
public:
    SessionLogError(const std::string& id, std::size_t line, const std::string& what)
        : SessionError("session '" + id + "' log line " + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

enum class Speaker { user, system };

inline const char* speaker_name(Speaker s) { return s == Speaker::user ? "user" : "system"; }

// Microseconds since the Unix epoch, UTC.
using Micros = std::int64_t;

inline Micros now_micros() {
    using namespace std::chrono;
    return duration_cast<microseconds>(system_clock::now().time_since_epoch()).count();
}

struct Turn {
    Speaker speaker = Speaker::user;
    std::string text;
    Micros timestamp = 0;
    std::optional<std::string> trace_ref;  // system turns only

    friend bool operator==(const Turn&, const Turn&) = default;
};

struct SessionState {
    std::string session_id;
    Micros created_at = 0;
    std::vector<Turn> turns;
    std::vector<SentenceEmbedding> response_embeddings;  // one per system turn, in order
    std::size_t persisted_turns = 0;                     // store bookkeeping

    std::vector<const Turn*> system_turns() const {
        std::vector<const Turn*> out;
        for (const auto& t : turns)
            if (t.speaker == Speaker::system) out.push_back(&t);
        return out;
    }

    bool same_content(const SessionState& o) const {
        return session_id == o.session_id && created_at == o.created_at && turns == o.turns &&
               response_embeddings == o.response_embeddings;
    }
};

// 128 random bits as 32 lowercase hex digits.
inline std::string random_session_id() {
    thread_local std::mt19937_64 gen = [] {
        std::random_device rd;
        std::seed_seq seq{rd(), rd(), rd(), rd(), rd(), rd(), rd(), rd()};
        return std::mt19937_64(seq);
    }();
    static constexpr char hex[] = "0123456789abcdef";
    std::string id;
    for (int half = 0; half < 2; ++half) {
        std::uint64_t v = gen();
        for (int i = 0; i < 16; ++i, v >>= 4) id.push_back(hex[v & 0xf]);
    }
    return id;
}

inline bool valid_session_id(std::string_view id) {
    return id.size() == 32 && std::all_of(id.begin(), id.end(), [](char c) {
               return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
           });
}

inline SessionState create_session(Micros now = now_micros()) {
    SessionState s;
    s.session_id = random_session_id();
    s.created_at = now;
    return s;
}

// Appends a turn; system turns get their embedding cached. Timestamps may
// repeat but never go backwards.
inline void append_turn(SessionState& s, Turn turn, const SentenceEmbedder& embedder) {
    const Micros last = s.turns.empty() ? s.created_at : s.turns.back().timestamp;
    if (turn.timestamp < last) {
        throw TurnOrderError("turn timestamp " + std::to_string(turn.timestamp) + " precedes " +
                             std::to_string(last));
    }
    if (turn.speaker == Speaker::system && !turn.trace_ref)
        throw SessionError("system turns must reference a pipeline trace");
    if (turn.speaker == Speaker::user && turn.trace_ref)
        throw SessionError("user turns carry no trace reference");
    if (turn.speaker == Speaker::system) s.response_embeddings.push_back(embedder.embed(turn.text));
    s.turns.push_back(std::move(turn));
}

// Model input for the newest user turn: earlier turns precede it, joined by
// the separator token, and tokens are dropped from the oldest end until the
// sequence fits. The newest user turn is never cut unless it alone exceeds
// the budget, in which case its head is kept. Later turns (if any) are not
// part of the context.
inline TokenSequence build_model_context(const SessionState& s, const Vocabulary& vocab,
                                         std::size_t max_tokens = kMaxTokens) {
    if (max_tokens < 3) throw std::invalid_argument("context budget must be at least 3");
    auto newest = std::find_if(s.turns.rbegin(), s.turns.rend(),
                               [](const Turn& t) { return t.speaker == Speaker::user; });
    if (newest == s.turns.rend()) throw SessionError("context needs at least one user turn");
    const std::size_t last = static_cast<std::size_t>(s.turns.rend() - newest) - 1;
    const TokenId sep = vocab.id(kSeparatorToken);
    if (sep == Vocabulary::unk) throw SessionError("vocabulary lacks the <sep> token");

    const std::size_t room = max_tokens - 2;  // BOS and EOS
    TokenSequence body = to_ids(s.turns[last].text, vocab);
    if (body.size() >= room) {
        body.resize(room);
    } else {
        for (std::size_t i = last; i-- > 0;) {
            TokenSequence older = to_ids(s.turns[i].text, vocab);
            older.push_back(sep);
            body.insert(body.begin(), older.begin(), older.end());
            if (body.size() >= room) break;
        }
        if (body.size() > room) body.erase(body.begin(), body.end() - static_cast<std::ptrdiff_t>(room));
        if (!body.empty() && body.front() == sep) body.erase(body.begin());
    }
    TokenSequence out{Vocabulary::bos};
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(Vocabulary::eos);
    return out;
}

// Embeddings recomputed from the system turn texts.
inline std::vector<SentenceEmbedding> recompute_embeddings(const SessionState& s, const SentenceEmbedder& e) {
    std::vector<SentenceEmbedding> out;
    for (const Turn* t : s.system_turns()) out.push_back(e.embed(t->text));
    return out;
}

// Directory of append-only JSONL event logs, one file per session id.
// Each line: {"type", "timestamp" (microseconds), "payload"}.
class SessionStore {
public:
    explicit SessionStore(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    const std::filesystem::path& dir() const { return dir_; }

    std::filesystem::path path_for(const std::string& id) const { return dir_ / (id + ".jsonl"); }

    bool exists(const std::string& id) const {
        return valid_session_id(id) && std::filesystem::exists(path_for(id));
    }

    // Appends events for everything not yet written.
    void persist(SessionState& s) const {
        if (!valid_session_id(s.session_id)) throw SessionError("invalid session id '" + s.session_id + "'");
        std::string lines;
        const bool fresh = !std::filesystem::exists(path_for(s.session_id));
        if (fresh) {
            if (s.persisted_turns != 0) throw SessionError("log for '" + s.session_id + "' disappeared");
            lines += event("session_created", s.created_at, {{"session_id", s.session_id}});
        }
        std::size_t sys = 0;
        for (std::size_t i = 0; i < s.turns.size(); ++i) {
            const Turn& t = s.turns[i];
            if (i >= s.persisted_turns) {
                nlohmann::json p{{"speaker", speaker_name(t.speaker)}, {"text", t.text}};
                if (t.trace_ref) p["trace_ref"] = *t.trace_ref;
                if (t.speaker == Speaker::system) p["embedding"] = s.response_embeddings.at(sys).values;
                lines += event("turn", t.timestamp, p);
            }
            if (t.speaker == Speaker::system) ++sys;
        }
        if (lines.empty()) return;
        std::ofstream out(path_for(s.session_id), std::ios::app | std::ios::binary);
        out.write(lines.data(), static_cast<std::streamsize>(lines.size()));
        out.flush();
        if (!out) throw SessionError("failed writing log for '" + s.session_id + "'");
        s.persisted_turns = s.turns.size();
    }

    SessionState load(const std::string& id) const {
        if (!exists(id)) throw SessionNotFound(id);
        std::ifstream in(path_for(id), std::ios::binary);
        if (!in) throw SessionNotFound(id);
        SessionState s;
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            auto fail = [&](const std::string& why) { return SessionLogError(id, n, why); };
            nlohmann::json ev;
            try {
                ev = nlohmann::json::parse(line);
                const std::string type = ev.at("type").get<std::string>();
                const Micros ts = ev.at("timestamp").get<Micros>();
                const auto& p = ev.at("payload");
                if (n == 1) {
                    if (type != "session_created") throw fail("first event must be session_created");
                    s.session_id = p.at("session_id").get<std::string>();
                    if (s.session_id != id) throw fail("log belongs to session '" + s.session_id + "'");
                    s.created_at = ts;
                    continue;
                }
                if (type != "turn") throw fail("unknown event type '" + type + "'");
                Turn t;
                const std::string who = p.at("speaker").get<std::string>();
                if (who != "user" && who != "system") throw fail("unknown speaker '" + who + "'");
                t.speaker = who == "user" ? Speaker::user : Speaker::system;
                t.text = p.at("text").get<std::string>();
                t.timestamp = ts;
                if (p.contains("trace_ref")) t.trace_ref = p.at("trace_ref").get<std::string>();
                const Micros last = s.turns.empty() ? s.created_at : s.turns.back().timestamp;
                if (ts < last) throw fail("timestamp goes backwards");
                if ((t.speaker == Speaker::system) != t.trace_ref.has_value())
                    throw fail("trace reference does not match speaker");
                if (t.speaker == Speaker::system)
                    s.response_embeddings.push_back({p.at("embedding").get<std::vector<double>>()});
                s.turns.push_back(std::move(t));
            } catch (const SessionLogError&) {
                throw;
            } catch (const nlohmann::json::exception& e) {
                throw fail(e.what());
            }
        }
        if (n == 0) throw SessionLogError(id, 1, "empty log");
        s.persisted_turns = s.turns.size();
        return s;
    }

private:
    static std::string event(const char* type, Micros ts, const nlohmann::json& payload) {
        return nlohmann::json{{"type", type}, {"timestamp", ts}, {"payload", payload}}.dump() + "\n";
    }

    std::filesystem::path dir_;
};

}  // namespace counsel
