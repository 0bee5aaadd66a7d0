// Operator entry point: corpora, training, evaluation, terminal chat, HTTP.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"

#include "counsel/config.hpp"
#include "counsel/dialogue.hpp"
#include "counsel/eval.hpp"
#include "counsel/http.hpp"
#include "counsel/service.hpp"

using namespace counsel;
namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void echo(const std::string& command, const std::map<std::string, std::string>& settings) {
    std::cerr << "# counsel " << command << '\n';
    for (const auto& [k, v] : settings) std::cerr << "#   " << k << " = " << v << '\n';
}

std::string tsv_field(std::string s) {
    for (char& c : s)
        if (c == '\t' || c == '\n') c = ' ';
    return s;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) return out;
        start = tab + 1;
    }
}

// Reads TSV records with a fixed column count; `parse` turns columns into a record.
template <typename T, typename F>
std::vector<T> read_tsv(const std::string& path, std::size_t columns, F&& parse) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorpusError("cannot open '" + path + "'");
    std::vector<T> out;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::trim(line).empty()) continue;
        const auto cols = split_tabs(line);
        if (cols.size() != columns)
            throw CorpusError(path + " line " + std::to_string(n) + ": expected " + std::to_string(columns) +
                              " tab-separated fields, got " + std::to_string(cols.size()));
        try {
            out.push_back(parse(cols));
        } catch (const std::invalid_argument& e) {
            throw CorpusError(path + " line " + std::to_string(n) + ": " + e.what());
        }
    }
    if (out.empty()) throw CorpusError("'" + path + "' has no records");
    return out;
}

bool parse_flag(const std::string& s) {
    if (s == "1") return true;
    if (s == "0") return false;
    throw std::invalid_argument("expected 0 or 1, got '" + s + "'");
}

std::vector<synth::NliExample> read_nli(const std::string& path) {
    return read_tsv<synth::NliExample>(path, 3, [](const std::vector<std::string>& c) {
        for (NliLabel l : {NliLabel::contradiction, NliLabel::neutral, NliLabel::entailment})
            if (c[2] == label_name(l)) return synth::NliExample{c[0], c[1], l};
        throw std::invalid_argument("unknown label '" + c[2] + "'");
    });
}

std::vector<synth::ToxicityExample> read_toxicity(const std::string& path) {
    return read_tsv<synth::ToxicityExample>(path, 4, [](const std::vector<std::string>& c) {
        return synth::ToxicityExample{c[0], {parse_flag(c[1]), parse_flag(c[2]), parse_flag(c[3])}};
    });
}

std::vector<synth::ParaphraseExample> read_paraphrases(const std::string& path) {
    return read_tsv<synth::ParaphraseExample>(path, 3, [](const std::vector<std::string>& c) {
        return synth::ParaphraseExample{c[0], c[1], parse_flag(c[2])};
    });
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorpusError("cannot write '" + path + "'");
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw CorpusError("failed writing '" + path + "'");
}

void write_loss_trace(const std::string& path, const std::vector<double>& losses) {
    std::vector<std::string> lines;
    char buf[64];
    for (std::size_t e = 0; e < losses.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu\t%.17g", e + 1, losses[e]);
        lines.push_back(buf);
    }
    write_lines(path, lines);
}

// ------------------------------------------------------------ gen-data

struct GenDataArgs {
    std::string kind;
    std::size_t n = 500;
    std::uint64_t seed = 0;
    std::string out;
};

int gen_data(const GenDataArgs& a) {
    echo("gen-data", {{"kind", a.kind}, {"n", std::to_string(a.n)}, {"seed", std::to_string(a.seed)}, {"out", a.out}});
    std::vector<std::string> lines;
    if (a.kind == "dialogue") {
        write_corpus(a.out, synth::generate_dialogue(a.seed, a.n));
        return 0;
    }
    if (a.kind == "nli") {
        for (const auto& e : synth::generate_nli(a.seed, a.n))
            lines.push_back(e.premise + '\t' + e.hypothesis + '\t' + label_name(e.label));
    } else if (a.kind == "toxicity") {
        for (const auto& e : synth::generate_toxicity(a.seed, a.n, Lexicon::defaults()))
            lines.push_back(tsv_field(e.text) + '\t' + (e.labels[0] ? "1" : "0") + '\t' + (e.labels[1] ? "1" : "0") +
                            '\t' + (e.labels[2] ? "1" : "0"));
    } else {
        for (const auto& e : synth::generate_paraphrases(a.seed, a.n))
            lines.push_back(e.a + '\t' + e.b + '\t' + (e.paraphrase ? "1" : "0"));
    }
    write_lines(a.out, lines);
    return 0;
}

// ------------------------------------------------------------ train

struct TrainArgs {
    std::string corpus, config, out;
    std::uint64_t seed = 0;
    std::size_t epochs = 30;
};

// Transformer keys plus batch_size, learning_rate, clip_norm, max_vocab and
// history_fraction. vocab_size is taken from the corpus vocabulary.
int train_cmd(const TrainArgs& a) {
    std::map<std::string, std::string> kv;
    if (!a.config.empty()) kv = read_key_values(a.config);
    TrainSchedule schedule;
    schedule.seed = a.seed;
    schedule.epochs = a.epochs;
    std::size_t max_vocab = 4000;
    double history_fraction = 0.5;
    auto take = [&](const char* key, auto& out) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        try {
            if constexpr (std::is_same_v<std::decay_t<decltype(out)>, double>)
                out = std::stod(it->second);
            else
                out = std::stoul(it->second);
        } catch (const std::exception&) {
            throw ConfigFileError("bad value '" + it->second + "' for " + key);
        }
        kv.erase(it);
    };
    take("batch_size", schedule.batch_size);
    take("learning_rate", schedule.learning_rate);
    take("clip_norm", schedule.clip_norm);
    take("max_vocab", max_vocab);
    take("history_fraction", history_fraction);
    kv.erase("vocab_size");
    TransformerConfig tc = TransformerConfig::from_map(kv);

    const auto pairs = read_corpus(a.corpus);
    const Vocabulary vocab = build_dialogue_vocab(pairs, max_vocab);
    tc.vocab_size = vocab.size();
    tc.validate();

    std::map<std::string, std::string> shown = tc.to_map();
    shown["corpus"] = a.corpus;
    shown["pairs"] = std::to_string(pairs.size());
    shown["seed"] = std::to_string(a.seed);
    shown["epochs"] = std::to_string(a.epochs);
    shown["batch_size"] = std::to_string(schedule.batch_size);
    shown["learning_rate"] = detail::real_str(schedule.learning_rate);
    shown["clip_norm"] = detail::real_str(schedule.clip_norm);
    shown["history_fraction"] = detail::real_str(history_fraction);
    shown["parameters"] = std::to_string(parameter_count(tc));
    shown["out"] = a.out;
    echo("train", shown);

    auto model = init_model(tc, a.seed);
    const auto training = to_training_pairs(pairs, vocab, history_fraction, a.seed);
    const auto report = train(model, training, schedule, [](std::size_t e, double loss) {
        std::cerr << "epoch " << e + 1 << "  loss " << loss << '\n';
    });
    save_checkpoint(model, a.out);
    vocab.save(a.out + ".vocab");
    write_loss_trace(a.out + ".loss.tsv", report.epoch_loss);
    std::cout << "wrote " << a.out << ", " << a.out << ".vocab, " << a.out << ".loss.tsv\n";
    return 0;
}

// ------------------------------------------------------------ train-aux

struct TrainAuxArgs {
    std::string kind, data, out;
    std::uint64_t seed = 0;
    std::size_t n = 0;
    std::size_t epochs = 0;  // 0: the model's default schedule
};

int train_aux(const TrainAuxArgs& a) {
    FitSchedule s = a.kind == "nli" ? nli_schedule(a.seed) : FitSchedule{};
    s.seed = a.seed;
    if (a.epochs) s.epochs = a.epochs;
    const std::size_t n = a.n ? a.n : (a.kind == "nli" ? kNliTrainSize : 1200);
    echo("train-aux", {{"kind", a.kind},
                       {"data", a.data.empty() ? "(synthetic, n=" + std::to_string(n) + ")" : a.data},
                       {"seed", std::to_string(a.seed)},
                       {"epochs", std::to_string(s.epochs)},
                       {"batch_size", std::to_string(s.batch_size)},
                       {"learning_rate", detail::real_str(s.learning_rate)},
                       {"out", a.out}});
    std::vector<double> trace;
    if (a.kind == "nli") {
        auto r = train_nli(a.data.empty() ? synth::generate_nli(a.seed, n) : read_nli(a.data), s);
        r.model.save(a.out);
        trace = r.loss_trace;
    } else if (a.kind == "toxicity") {
        auto r = train_toxicity(a.data.empty() ? synth::generate_toxicity(a.seed, n, Lexicon::defaults())
                                               : read_toxicity(a.data),
                                s);
        r.model.save(a.out);
        trace = r.loss_trace;
    } else {
        auto r = train_embedder(a.data.empty() ? synth::generate_paraphrases(a.seed, n) : read_paraphrases(a.data), s);
        r.model.save(a.out);
        trace = r.loss_trace;
    }
    write_loss_trace(a.out + ".loss.tsv", trace);
    std::cout << "wrote " << a.out << " and " << a.out << ".loss.tsv\n";
    return 0;
}

// ------------------------------------------------------------ eval

struct EvalArgs {
    std::string suite, checkpoint, nli, toxicity, embedder;
    std::uint64_t seed = 0;
    std::size_t n = 1000;
};

int eval_cmd(const EvalArgs& a) {
    echo("eval", {{"suite", a.suite},
                  {"checkpoint", a.checkpoint.empty() ? "(none)" : a.checkpoint},
                  {"seed", std::to_string(a.seed)},
                  {"n", std::to_string(a.n)}});
    eval::SuiteReport r;
    auto need_checkpoint = [&] {
        if (a.checkpoint.empty()) throw UsageError("suite '" + a.suite + "' needs --checkpoint");
        if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint '" + a.checkpoint + "' does not exist");
    };
    if (a.suite == "gradient") {
        r = eval::gradient_suite(a.seed + 1);
    } else if (a.suite == "beam-oracle") {
        r = eval::beam_oracle_suite(a.seed + 3);
    } else if (a.suite == "nli") {
        need_checkpoint();
        r = eval::nli_suite(TrainedNli::load(a.checkpoint));
    } else if (a.suite == "toxicity") {
        need_checkpoint();
        r = eval::toxicity_suite(TrainedToxicity::load(a.checkpoint));
    } else {
        ServiceConfig sc;
        sc.nli_checkpoint = a.nli;
        sc.toxicity_checkpoint = a.toxicity;
        sc.embedder_checkpoint = a.embedder;
        const JudgeSet judges = JudgeSet::from_config(sc);
        r = eval::pipeline_suite(judges.view(), a.seed + 7, a.n);
    }
    std::cout << r.render();
    return r.passed() ? 0 : 1;
}

// ------------------------------------------------------------ chat

struct ChatArgs {
    std::string checkpoint, vocab, config, store;
    bool debug = false;
};

ServiceConfig service_config(const std::string& path) {
    return ServiceConfig::load(path);
}

void print_trace(const json& trace) {
    for (const auto& c : trace["candidates"]) {
        std::cout << "  [" << c["index"].get<std::size_t>() << "] lp=" << fmt_real(c["log_prob"].get<double>()) << "  "
                  << c["text"].get<std::string>() << '\n';
        for (const auto& v : c["verdicts"]) {
            std::cout << "      " << (v["passed"].get<bool>() ? "pass " : "FAIL ") << v["filter"].get<std::string>()
                      << " score=" << fmt_real(v["score"].get<double>());
            if (v.contains("reason")) std::cout << "  " << v["reason"].get<std::string>();
            std::cout << '\n';
        }
    }
    std::cout << "  chosen: " << (trace["chosen"].is_null() ? "fallback" : trace["chosen"].dump())
              << (trace["degraded"].get<bool>() ? " (degraded)" : "") << '\n';
}

int chat(const ChatArgs& a) {
    ServiceConfig sc = service_config(a.config);
    if (!a.store.empty()) sc.store_dir = a.store;
    sc.model_checkpoint = a.checkpoint;
    sc.vocab_path = a.vocab.empty() ? a.checkpoint + ".vocab" : a.vocab;
    auto shown = sc.echo();
    shown["debug"] = a.debug ? "true" : "false";
    echo("chat", shown);

    ChatService service(sc, JudgeSet::from_config(sc));
    service.install(std::make_shared<ModelGenerator>(DialogueModel::load(sc.model_checkpoint, sc.vocab_path)));
    const std::string id = service.create_session().body["session_id"];
    std::cout << "session " << id << " (type /quit to leave)\n";
    std::string line;
    for (;;) {
        std::cout << "you> " << std::flush;
        if (!std::getline(std::cin, line)) break;
        const std::string t = text::trim(line);
        if (t.empty()) continue;
        if (t == "/quit") break;
        const auto r = service.post_message(id, json{{"text", t}, {"debug", a.debug}}.dump());
        if (r.status != 200) {
            std::cout << "error: " << r.body["message"].get<std::string>() << '\n';
            continue;
        }
        if (a.debug) print_trace(r.body["trace"]);
        std::cout << "bot> " << r.body["reply"].get<std::string>() << '\n';
    }
    std::cout << "session saved to " << service.store().path_for(id).string() << '\n';
    return 0;
}

// ------------------------------------------------------------ serve

struct ServeArgs {
    std::string config, host;
    int port = -1;
};

HttpServer* g_server = nullptr;

int serve(const ServeArgs& a) {
    ServiceConfig sc = service_config(a.config);
    if (!a.host.empty()) sc.host = a.host;
    if (a.port >= 0) sc.port = a.port;
    sc.validate();
    if (sc.model_checkpoint.empty()) throw UsageError("serve needs model_checkpoint in the config");
    if (sc.vocab_path.empty()) sc.vocab_path = sc.model_checkpoint + ".vocab";
    echo("serve", sc.echo());

    ChatService service(sc, JudgeSet::from_config(sc));
    HttpServer server(service);
    const int port = server.bind(sc.host, sc.port);
    if (port < 0) throw std::runtime_error("cannot bind " + sc.host + ":" + std::to_string(sc.port));
    std::cout << "listening on http://" << sc.host << ":" << port << '\n' << std::flush;

    g_server = &server;
    std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
    std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });

    // Health reports model_loaded=false until this finishes.
    std::thread loader([&] {
        try {
            service.install(std::make_shared<ModelGenerator>(DialogueModel::load(sc.model_checkpoint, sc.vocab_path)));
            log(LogLevel::info, "model loaded");
        } catch (const std::exception& e) {
            log(LogLevel::error, std::string("model load failed: ") + e.what());
            server.stop();
        }
    });
    const bool ok = server.run();
    loader.join();
    g_server = nullptr;
    return ok && service.model_loaded() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"counsel: counselling dialogue model toolkit"};
    app.require_subcommand(1);
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "debug, info, warn, error or off")
        ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "write a synthetic corpus");
    gen->add_option("--kind", gd.kind)->required()->check(CLI::IsMember({"dialogue", "nli", "toxicity", "paraphrase"}));
    gen->add_option("--n", gd.n, "number of records")->check(CLI::Range(1, 10000000));
    gen->add_option("--seed", gd.seed);
    gen->add_option("--out", gd.out)->required();

    TrainArgs tr;
    auto* train_sc = app.add_subcommand("train", "train the reply model on a prompt<TAB>response corpus");
    train_sc->add_option("--corpus", tr.corpus)->required()->check(CLI::ExistingFile);
    train_sc->add_option("--config", tr.config, "key = value model and schedule settings")->check(CLI::ExistingFile);
    train_sc->add_option("--out", tr.out, "checkpoint path; .vocab and .loss.tsv are written beside it")->required();
    train_sc->add_option("--seed", tr.seed);
    train_sc->add_option("--epochs", tr.epochs);

    TrainAuxArgs ta;
    auto* aux = app.add_subcommand("train-aux", "train an NLI, toxicity or embedding model");
    aux->add_option("--kind", ta.kind)->required()->check(CLI::IsMember({"nli", "toxicity", "embedder"}));
    aux->add_option("--data", ta.data, "TSV from gen-data; synthetic data when omitted")->check(CLI::ExistingFile);
    aux->add_option("--n", ta.n, "synthetic examples when --data is omitted");
    aux->add_option("--out", ta.out)->required();
    aux->add_option("--seed", ta.seed);
    aux->add_option("--epochs", ta.epochs);

    EvalArgs ev;
    auto* eval_sc = app.add_subcommand("eval", "run a self-checking suite; exit code 0 iff it passes");
    eval_sc->add_option("--suite", ev.suite)
        ->required()
        ->check(CLI::IsMember({"beam-oracle", "gradient", "pipeline", "nli", "toxicity"}));
    eval_sc->add_option("--checkpoint", ev.checkpoint, "trained model for the nli and toxicity suites");
    eval_sc->add_option("--nli", ev.nli, "pipeline suite: NLI checkpoint (default rule judge)");
    eval_sc->add_option("--toxicity", ev.toxicity, "pipeline suite: toxicity checkpoint");
    eval_sc->add_option("--embedder", ev.embedder, "pipeline suite: embedder checkpoint");
    eval_sc->add_option("--seed", ev.seed);
    eval_sc->add_option("--n", ev.n, "pipeline suite: randomized beams");

    ChatArgs ch;
    auto* chat_sc = app.add_subcommand("chat", "talk to a trained model in the terminal");
    chat_sc->add_option("--checkpoint", ch.checkpoint)->required()->check(CLI::ExistingFile);
    chat_sc->add_option("--vocab", ch.vocab, "default: <checkpoint>.vocab");
    chat_sc->add_option("--config", ch.config, "service config for pipeline settings")->check(CLI::ExistingFile);
    chat_sc->add_option("--store", ch.store, "session directory");
    chat_sc->add_flag("--debug", ch.debug, "print the beam and filter verdicts");

    ServeArgs sv;
    auto* serve_sc = app.add_subcommand("serve", "run the HTTP service");
    serve_sc->add_option("--config", sv.config)->check(CLI::ExistingFile);
    serve_sc->add_option("--host", sv.host);
    serve_sc->add_option("--port", sv.port);

    CLI11_PARSE(app, argc, argv);
    const LogLevel levels[] = {LogLevel::debug, LogLevel::info, LogLevel::warn, LogLevel::error, LogLevel::off};
    const char* names[] = {"debug", "info", "warn", "error", "off"};
    for (int i = 0; i < 5; ++i)
        if (log_level == names[i]) log_threshold() = levels[i];

    try {
        if (*gen) return gen_data(gd);
        if (*train_sc) return train_cmd(tr);
        if (*aux) return train_aux(ta);
        if (*eval_sc) return eval_cmd(ev);
        if (*chat_sc) return chat(ch);
        if (*serve_sc) return serve(sv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
