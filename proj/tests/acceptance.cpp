// Acceptance run. Prints one PASS or FAIL line per criterion and exits
// nonzero if any fails. Suite details go to stderr.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"

#include "counsel/eval.hpp"
#include "counsel/http.hpp"
#include "counsel/service.hpp"

namespace fs = std::filesystem;
using namespace counsel;
using eval::sci;
using eval::Stopwatch;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::string secs(double s) { return fmt_real(s) + " s"; }

Outcome from_suite(const eval::SuiteReport& r, double budget_seconds) {
    std::cerr << r.render();
    const bool in_time = r.seconds < budget_seconds;
    std::size_t ok = 0;
    for (const auto& c : r.checks) ok += c.passed;
    return {r.passed() && in_time, std::to_string(ok) + "/" + std::to_string(r.checks.size()) + " checks, " +
                                       secs(r.seconds) + " (budget " + secs(budget_seconds) + ")"};
}

// Shared by the criteria that need a trained reply model.
struct ToyModel {
    std::optional<DialogueModel> model;
    std::vector<synth::DialoguePair> corpus;
};

ToyModel& toy() {
    static ToyModel t;
    return t;
}

DialogueModel& require_model() {
    if (!toy().model) throw std::runtime_error("the toy reply model was not trained");
    return *toy().model;
}

TransformerConfig toy_config(std::size_t vocab_size) {
    TransformerConfig c;
    c.n_encoder_layers = 2;
    c.n_decoder_layers = 2;
    c.d_model = 64;
    c.n_heads = 4;
    c.d_ff = 128;
    c.dropout = 0.1;
    c.vocab_size = vocab_size;
    return c;
}

// ------------------------------------------------------------ criteria

Outcome gradients() { return from_suite(eval::gradient_suite(1, 3), 120.0); }

Outcome beam_oracle() { return from_suite(eval::beam_oracle_suite(3), 60.0); }

Outcome toy_training() {
    Stopwatch sw;
    auto& t = toy();
    t.corpus = synth::generate_dialogue(5, 500);
    Vocabulary vocab = build_dialogue_vocab(t.corpus);
    const auto pairs = to_training_pairs(t.corpus, vocab);
    const auto config = toy_config(vocab.size());

    Seq2SeqModel model = init_model(config, 5);
    TrainSchedule schedule;
    schedule.seed = 5;
    std::optional<std::size_t> first_below;
    double below_at = 0.0;
    const auto report = train(model, pairs, schedule, [&](std::size_t e, double loss) {
        std::cerr << "toy training epoch " << e + 1 << " loss " << loss << '\n';
        if (!first_below && loss < 0.5) {
            first_below = e + 1;
            below_at = sw.seconds();
        }
    });
    const double full_seconds = sw.seconds();
    const double final_loss = report.epoch_loss.back();
    t.model.emplace(std::move(model), std::move(vocab));

    // A fresh model of the same shape memorizes ten pairs.
    const std::vector<TrainingPair> ten(pairs.begin(), pairs.begin() + 10);
    Seq2SeqModel small = init_model(config, 6);
    TrainSchedule mem;
    mem.seed = 6;
    mem.epochs = 200;
    train(small, ten, mem);
    const double mem_loss = evaluate_loss(small, ten);

    const bool ok = first_below.has_value() && below_at < 1800.0 && final_loss < 0.5 && mem_loss < 0.1;
    std::ostringstream d;
    d << parameter_count(config) << " params, 500 pairs: loss < 0.5 at epoch "
      << (first_below ? std::to_string(*first_below) : std::string("never")) << " after " << secs(below_at)
      << ", final " << sci(final_loss) << " after " << secs(full_seconds) << "; 10-pair subset loss "
      << sci(mem_loss);
    return {ok, d.str()};
}

Outcome context_budget() {
    const Vocabulary& vocab = require_model().vocab;
    const auto& corpus = toy().corpus;
    const HashingEmbedder embedder;
    Rng rng(404);
    std::size_t within = 0, longest_source = 0;
    for (int trial = 0; trial < 100; ++trial) {
        SessionState s = create_session(0);
        const std::size_t turns = 1 + 2 * (5 + rng.below(40));
        std::size_t total_words = 0;
        for (std::size_t k = 0; k < turns; ++k) {
            std::string text;
            const std::size_t words = 1 + rng.below(rng.below(4) == 0 ? 150 : 25);
            for (std::size_t w = 0; w < words; ++w) {
                if (rng.below(10) == 0) {
                    text += "zq" + std::to_string(rng.below(1000)) + ' ';
                } else {
                    const auto& p = corpus[rng.below(corpus.size())];
                    const auto tokens = text::split_words(text::normalize(rng.below(2) ? p.prompt : p.response));
                    text += tokens[rng.below(tokens.size())] + ' ';
                }
            }
            total_words += words;
            const Speaker who = k % 2 == 0 ? Speaker::user : Speaker::system;
            append_turn(s, {who, text, static_cast<Micros>(k), who == Speaker::system ? std::optional<std::string>("t")
                                                                                      : std::nullopt},
                        embedder);
        }
        longest_source = std::max(longest_source, total_words);
        const TokenSequence ctx = build_model_context(s, vocab);
        within += !ctx.empty() && ctx.size() <= kMaxTokens;
    }
    return {within == 100, std::to_string(within) + "/100 contexts within " + std::to_string(kMaxTokens) +
                               " ids; longest session " + std::to_string(longest_source) + " words"};
}

ServiceConfig service_config(const fs::path& dir) {
    ServiceConfig c;
    c.store_dir = (dir / "sessions").string();
    c.survey_path = (dir / "surveys.jsonl").string();
    c.worker_threads = 16;
    return c;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("counsel_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::shared_ptr<const ReplyGenerator> toy_generator() {
    return std::make_shared<ModelGenerator>(require_model());
}

Outcome beam_width() {
    const auto& m = require_model();
    ChatService service(service_config(scratch("width")), JudgeSet::rules());
    service.install(toy_generator());
    const std::vector<std::string> prompts = {toy().corpus[0].prompt, toy().corpus[1].prompt, "i feel sad today",
                                              "work has been hard and i cannot sleep"};
    std::size_t exact = 0;
    std::string sizes;
    for (const auto& p : prompts) {
        const std::string id = service.create_session().body["session_id"];
        const auto r = service.post_message(id, json{{"text", p}, {"debug", true}}.dump());
        const std::size_t n = r.status == 200 ? r.body["trace"]["candidates"].size() : 0;
        exact += n == 10;
        sizes += (sizes.empty() ? "" : ",") + std::to_string(n);
    }
    const bool ok = m.beam.beam_width == 10 && exact == prompts.size();
    return {ok, "configured width " + std::to_string(m.beam.beam_width) + "; debug trace candidate counts " + sizes};
}

Outcome aux_classifiers() {
    Stopwatch nli_sw;
    auto nli = train_nli(synth::generate_nli(1, kNliTrainSize), nli_schedule(1));
    const auto nli_report = eval::nli_suite(nli.model);
    const double nli_seconds = nli_sw.seconds();

    Stopwatch tox_sw;
    auto tox = train_toxicity(synth::generate_toxicity(1, 1200, Lexicon::defaults()));
    const auto tox_report = eval::toxicity_suite(tox.model);
    const double tox_seconds = tox_sw.seconds();

    std::cerr << nli_report.render() << tox_report.render();
    const bool ok = nli_report.passed() && tox_report.passed() && nli_seconds < 600.0 && tox_seconds < 600.0;
    std::ostringstream d;
    auto summary = [](const eval::SuiteReport& r) {
        std::string s;
        for (const auto& c : r.checks) s += (s.empty() ? "" : "; ") + c.name + " " + c.detail;
        return s;
    };
    d << "nli [" << summary(nli_report) << "] in " << secs(nli_seconds) << "; toxicity [" << summary(tox_report)
      << "] in " << secs(tox_seconds);
    return {ok, d.str()};
}

Outcome pipeline_properties() {
    const JudgeSet judges = JudgeSet::rules();
    return from_suite(eval::pipeline_suite(judges.view(), 7, 1000), 600.0);
}

// Keeps only the top `k` candidates, so a rejected top choice has no
// alternative and the fallback path is exercised.
class TruncatedGenerator final : public ReplyGenerator {
public:
    TruncatedGenerator(std::shared_ptr<const ReplyGenerator> inner, std::size_t k) : inner_(std::move(inner)), k_(k) {}
    const Vocabulary& vocab() const override { return inner_->vocab(); }
    std::vector<Candidate> generate(const TokenSequence& ctx) const override {
        auto c = inner_->generate(ctx);
        if (c.size() > k_) c.resize(k_);
        return c;
    }

private:
    std::shared_ptr<const ReplyGenerator> inner_;
    std::size_t k_;
};

Outcome repetition() {
    std::vector<std::string> prompts;
    for (std::size_t i = 0; i < 30; ++i) prompts.push_back(toy().corpus[i * 13 % toy().corpus.size()].prompt);
    for (const char* p : {"i feel sad today", "my family does not listen to me", "i am so tired of everything",
                          "hello", "i do not know"})
        prompts.push_back(p);

    std::size_t sessions = 0, identical = 0, fallbacks = 0, blocked_repeats = 0;
    for (const std::size_t width : {std::size_t{10}, std::size_t{1}}) {
        ChatService service(service_config(scratch("repeat" + std::to_string(width))), JudgeSet::rules());
        service.install(std::make_shared<TruncatedGenerator>(toy_generator(), width));
        for (const auto& p : prompts) {
            const std::string id = service.create_session().body["session_id"];
            const std::string body = json{{"text", p}, {"debug", true}}.dump();
            const auto first = service.post_message(id, body);
            const auto second = service.post_message(id, body);
            if (first.status != 200 || second.status != 200) return {false, "message failed for '" + p + "'"};
            ++sessions;
            const std::string r1 = first.body["reply"], r2 = second.body["reply"];
            const bool fb = second.body["fallback"];
            fallbacks += fb;
            if (r1 == r2 && !fb) ++identical;
            // Count second-turn candidates equal to the first reply and confirm each was rejected for repetition.
            for (const auto& c : second.body["trace"]["candidates"]) {
                if (c["text"] != r1) continue;
                bool rejected = false;
                for (const auto& v : c["verdicts"])
                    if (v["filter"] == filter::repetition && !v["passed"]) rejected = true;
                if (!rejected) ++identical;
                ++blocked_repeats;
            }
        }
    }
    return {identical == 0 && blocked_repeats > 0,
            std::to_string(sessions) + " repeated-prompt sessions, " + std::to_string(identical) +
                " identical non-fallback replies; " + std::to_string(blocked_repeats) +
                " candidates equal to the previous reply were rejected; " + std::to_string(fallbacks) + " fallbacks"};
}

// ------------------------------------------------------------ service

std::size_t trace_records(const ChatService& service, const std::string& id) {
    std::ifstream in(service.store().dir() / (id + ".traces.jsonl"));
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
}

class ThrowingGenerator final : public ReplyGenerator {
public:
    explicit ThrowingGenerator(const Vocabulary& v) : vocab_(v) {}
    const Vocabulary& vocab() const override { return vocab_; }
    std::vector<Candidate> generate(const TokenSequence&) const override {
        throw std::runtime_error("injected generation failure");
    }

private:
    const Vocabulary& vocab_;
};

struct Http {
    explicit Http(int port) : cli("127.0.0.1", port) {
        cli.set_read_timeout(120, 0);
        cli.set_write_timeout(30, 0);
    }
    std::pair<int, json> post(const std::string& path, const json& body) {
        auto r = cli.Post(path, body.dump(), "application/json");
        if (!r) throw std::runtime_error("POST " + path + " failed: " + httplib::to_string(r.error()));
        return {r->status, json::parse(r->body)};
    }
    std::pair<int, json> get(const std::string& path) {
        auto r = cli.Get(path);
        if (!r) throw std::runtime_error("GET " + path + " failed: " + httplib::to_string(r.error()));
        return {r->status, json::parse(r->body)};
    }
    httplib::Client cli;
};

// One scripted client. Returns an empty string on success, else what broke.
std::string scripted_session(int port, int who, std::string& id_out) {
    Http h(port);
    auto [cs, created] = h.post("/api/sessions", json::object());
    if (cs != 201) return "create returned " + std::to_string(cs);
    const std::string id = created["session_id"];
    id_out = id;
    const auto& corpus = toy().corpus;
    std::vector<std::string> sent, replies;
    for (int k = 0; k < 5; ++k) {
        const std::string text = corpus[(static_cast<std::size_t>(who) * 7 + k * 3) % corpus.size()].prompt;
        auto [st, r] = h.post("/api/sessions/" + id + "/messages", {{"text", text}});
        if (st != 200) return "message " + std::to_string(k) + " returned " + std::to_string(st);
        if (r["turn_index"] != 2 * k + 1) return "turn_index " + r["turn_index"].dump() + " at message " + std::to_string(k);
        if (r.contains("trace")) return "trace returned without debug";
        sent.push_back(text);
        replies.push_back(r["reply"]);
    }
    auto [hs, hist] = h.get("/api/sessions/" + id);
    if (hs != 200) return "history returned " + std::to_string(hs);
    const auto& turns = hist["turns"];
    if (turns.size() != 10) return "history has " + std::to_string(turns.size()) + " turns";
    std::string last;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        const auto& t = turns[i];
        const bool user = i % 2 == 0;
        if (t["speaker"] != (user ? "user" : "system")) return "speaker out of order at turn " + std::to_string(i);
        if (t["text"] != (user ? sent[i / 2] : replies[i / 2])) return "text mismatch at turn " + std::to_string(i);
        if (t.contains("trace_ref")) return "trace_ref leaked in history";
        const std::string ts = t["timestamp"];
        if (ts < last) return "timestamps decrease at turn " + std::to_string(i);
        last = ts;
    }
    auto [ss, sv] = h.post("/api/sessions/" + id + "/survey",
                           {{"understands", 4}, {"engaging", 3 + who % 3}, {"helpful", 5}, {"comment", "client " + std::to_string(who)}});
    if (ss != 201 || sv["status"] != "recorded") return "survey returned " + std::to_string(ss);
    return "";
}

Outcome service_integration() {
    const auto dir = scratch("service");
    ChatService service(service_config(dir), JudgeSet::rules());
    service.install(toy_generator());
    HttpServer server(service);
    const int port = server.bind("127.0.0.1", 0);
    if (port <= 0) return {false, "could not bind"};
    std::thread serving([&] { server.run(); });
    server.wait_until_ready();
    std::vector<std::string> problems;
    auto finish = [&](Outcome o) {
        server.stop();
        serving.join();
        return o;
    };

    try {
        Stopwatch sw;
        constexpr int kClients = 20;
        std::vector<std::string> errors(kClients), ids(kClients);
        {
            std::vector<std::thread> clients;
            for (int c = 0; c < kClients; ++c)
                clients.emplace_back([&, c] {
                    try {
                        errors[c] = scripted_session(port, c, ids[c]);
                    } catch (const std::exception& e) {
                        errors[c] = e.what();
                    }
                });
            for (auto& t : clients) t.join();
        }
        const double scripted_seconds = sw.seconds();
        for (int c = 0; c < kClients; ++c)
            if (!errors[c].empty()) problems.push_back("client " + std::to_string(c) + ": " + errors[c]);
        if (std::set<std::string>(ids.begin(), ids.end()).size() != kClients) problems.push_back("session ids collide");

        // Stored state matches what the clients saw.
        for (int c = 0; c < kClients && problems.empty(); ++c) {
            const SessionState s = service.store().load(ids[c]);
            const std::size_t trace_lines = trace_records(service, ids[c]);
            if (s.turns.size() != 10 || trace_lines != 5)
                problems.push_back("stored session " + ids[c] + " has " + std::to_string(s.turns.size()) + " turns and " +
                                   std::to_string(trace_lines) + " traces");
        }
        std::size_t surveys = 0;
        {
            std::ifstream in(service.config().surveys());
            for (std::string line; std::getline(in, line);) surveys += json::parse(line)["understands"] == 4;
        }
        if (surveys != kClients) problems.push_back(std::to_string(surveys) + " survey records");

        Http h(port);
        // Concurrent writers on one session keep user/system pairs intact.
        const std::string shared = ids[0];
        {
            std::vector<std::thread> writers;
            std::atomic<int> failures{0};
            for (int w = 0; w < 4; ++w)
                writers.emplace_back([&, w] {
                    Http hw(port);
                    for (int k = 0; k < 2; ++k) {
                        auto [st, r] = hw.post("/api/sessions/" + shared + "/messages",
                                               {{"text", "writer " + std::to_string(w) + " message " + std::to_string(k)}});
                        if (st != 200) {
                            ++failures;
                            std::cerr << "writer " << w << ": " << st << " " << r.dump() << '\n';
                        }
                    }
                });
            for (auto& t : writers) t.join();
            const auto turns = h.get("/api/sessions/" + shared).second["turns"];
            bool paired = turns.size() == 10 + 2 * 4 * 2 && failures == 0;
            std::multiset<std::string> seen;
            for (std::size_t i = 0; paired && i < turns.size(); ++i) {
                paired = turns[i]["speaker"] == (i % 2 == 0 ? "user" : "system");
                if (i >= 10 && i % 2 == 0) seen.insert(turns[i]["text"].get<std::string>());
            }
            for (int w = 0; paired && w < 4; ++w)
                for (int k = 0; k < 2; ++k)
                    paired = paired && seen.count("writer " + std::to_string(w) + " message " + std::to_string(k)) == 1;
            if (!paired)
                problems.push_back("interleaved writers: " + std::to_string(turns.size()) + " turns, " +
                                   std::to_string(failures.load()) + " failed posts");
        }

        // A failed generation records nothing.
        const std::string victim = ids[1];
        const auto before = service.store().load(victim);
        service.install(std::make_shared<ThrowingGenerator>(require_model().vocab));
        auto [fs_, fb] = h.post("/api/sessions/" + victim + "/messages", {{"text", "this should not be stored"}});
        service.install(toy_generator());
        if (fs_ != 500) problems.push_back("injected failure returned " + std::to_string(fs_));
        if (!service.store().load(victim).same_content(before)) problems.push_back("failed message altered the transcript");
        if (trace_records(service, victim) != 5) problems.push_back("failed message wrote a trace");
        auto [rs, rr] = h.post("/api/sessions/" + victim + "/messages", {{"text", "and this should"}});
        if (rs != 200 || rr["turn_index"] != 11) problems.push_back("session unusable after a failure");

        // Invalid ratings carry the offending field.
        std::size_t field_errors = 0;
        const std::vector<std::pair<json, std::string>> bad = {
            {{{"understands", 6}, {"engaging", 3}, {"helpful", 3}}, "understands"},
            {{{"understands", 3}, {"engaging", 0}, {"helpful", 3}}, "engaging"},
            {{{"understands", 3}, {"engaging", 3}, {"helpful", "5"}}, "helpful"},
            {{{"understands", 3}, {"engaging", 3}, {"helpful", 2.5}}, "helpful"},
            {{{"understands", 3}, {"engaging", 3}}, "helpful"},
        };
        for (const auto& [body, field] : bad) {
            auto [st, r] = h.post("/api/sessions/" + victim + "/survey", body);
            if (st == 400 && r["code"] == "validation_error" && r["field"] == field) ++field_errors;
            else problems.push_back("bad survey " + body.dump() + " got " + std::to_string(st) + " " + r.dump());
        }
        std::size_t after = 0;
        {
            std::ifstream in(service.config().surveys());
            for (std::string line; std::getline(in, line);) ++after;
        }
        if (after != kClients) problems.push_back("rejected surveys were stored");

        if (!problems.empty()) {
            std::string all;
            for (const auto& p : problems) all += (all.empty() ? "" : "; ") + p;
            return finish({false, all});
        }
        return finish({true, std::to_string(kClients) + " concurrent scripted sessions in " + secs(scripted_seconds) +
                                 "; stored transcripts, traces and surveys consistent; failed turn left no trace; " +
                                 std::to_string(field_errors) + "/" + std::to_string(bad.size()) +
                                 " invalid surveys rejected with the right field"});
    } catch (const std::exception& e) {
        return finish({false, e.what()});
    }
}

}  // namespace

// Arguments, when given, select criteria by number. Criteria 3, 4, 8 and 9
// use the model trained by criterion 5, which then runs as well.
int main(int argc, char** argv) {
    log_threshold() = LogLevel::off;
    struct Criterion {
        int number;
        std::string name;
        std::function<Outcome()> run;
    };
    // Training runs first because later checks reuse the model.
    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", gradients},
        {2, "beam search matches exhaustive top-k", beam_oracle},
        {5, "toy training convergence", toy_training},
        {4, "context budget", context_budget},
        {3, "beam width constant", beam_width},
        {6, "auxiliary classifiers", aux_classifiers},
        {7, "pipeline property suite", pipeline_properties},
        {8, "repetition filter end to end", repetition},
        {9, "service integration", service_integration},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    if (!wanted.empty() && (wanted.contains(3) || wanted.contains(4) || wanted.contains(8) || wanted.contains(9)))
        wanted.insert(5);

    std::map<int, std::string> lines;
    bool all = true;
    for (const auto& c : criteria) {
        if (!wanted.empty() && !wanted.contains(c.number)) continue;
        Outcome o;
        Stopwatch sw;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        all = all && o.passed;
        lines[c.number] = std::string(o.passed ? "PASS" : "FAIL") + " criterion " + std::to_string(c.number) + " " +
                          c.name + ": " + o.detail + " [" + secs(sw.seconds()) + "]";
        std::cerr << lines[c.number] << '\n';
    }
    for (const auto& [n, l] : lines) std::cout << l << '\n';
    return all ? 0 : 1;
}
