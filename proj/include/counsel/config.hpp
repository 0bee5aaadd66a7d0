#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "counsel/pipeline.hpp"
#include "counsel/text.hpp"

namespace counsel {

class ConfigFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// "key = value" lines; '#' starts a comment line. Later keys win.
inline std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigFileError("cannot open config '" + path.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        const std::string t = text::trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigFileError(path.string() + " line " + std::to_string(n) + ": expected key = value");
        const std::string key = text::trim(t.substr(0, eq));
        if (key.empty()) throw ConfigFileError(path.string() + " line " + std::to_string(n) + ": empty key");
        kv[key] = text::trim(t.substr(eq + 1));
    }
    return kv;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        item = text::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string model_checkpoint;   // seq2seq weights
    std::string vocab_path;         // its vocabulary
    std::string nli_checkpoint;     // empty: rule-based judge
    std::string toxicity_checkpoint;
    std::string embedder_checkpoint;
    std::string store_dir = "sessions";
    std::string survey_path;        // empty: <store_dir>/surveys.jsonl
    std::size_t worker_threads = 8;
    PipelineConfig pipeline;

    static const std::vector<std::string>& keys() {
        static const std::vector<std::string> k{
            "host", "port", "model_checkpoint", "vocab_path", "nli_checkpoint", "toxicity_checkpoint",
            "embedder_checkpoint", "store_dir", "survey_path", "worker_threads", "exclusion_list_path",
            "repetition_threshold", "toxicity_threshold", "contradiction_mode", "contradiction_threshold",
            "max_consecutive_questions", "filter_order", "fallback_message"};
        return k;
    }

    std::string surveys() const {
        return survey_path.empty() ? (std::filesystem::path(store_dir) / "surveys.jsonl").string() : survey_path;
    }

    void set(const std::string& key, const std::string& value) {
        auto number = [&](auto& out) {
            std::size_t used = 0;
            if (std::is_unsigned_v<std::decay_t<decltype(out)>> && text::trim(value).starts_with("-"))
                throw ConfigFileError("negative value '" + value + "' for " + key);
            try {
                if constexpr (std::is_same_v<std::decay_t<decltype(out)>, double>)
                    out = std::stod(value, &used);
                else
                    out = static_cast<std::decay_t<decltype(out)>>(std::stoll(value, &used));
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != value.size()) throw ConfigFileError("bad number '" + value + "' for " + key);
        };
        if (key == "host") host = value;
        else if (key == "port") number(port);
        else if (key == "model_checkpoint") model_checkpoint = value;
        else if (key == "vocab_path") vocab_path = value;
        else if (key == "nli_checkpoint") nli_checkpoint = value;
        else if (key == "toxicity_checkpoint") toxicity_checkpoint = value;
        else if (key == "embedder_checkpoint") embedder_checkpoint = value;
        else if (key == "store_dir") store_dir = value;
        else if (key == "survey_path") survey_path = value;
        else if (key == "worker_threads") number(worker_threads);
        else if (key == "exclusion_list_path") pipeline.exclusion_list_path = value;
        else if (key == "repetition_threshold") number(pipeline.repetition_threshold);
        else if (key == "toxicity_threshold") number(pipeline.toxicity_threshold);
        else if (key == "contradiction_threshold") number(pipeline.contradiction_threshold);
        else if (key == "max_consecutive_questions") number(pipeline.max_consecutive_questions);
        else if (key == "filter_order") pipeline.filter_order = split_list(value);
        else if (key == "fallback_message") pipeline.fallback_message = value;
        else if (key == "contradiction_mode") {
            if (value == "argmax") pipeline.contradiction_mode = ContradictionMode::argmax_label;
            else if (value == "probability") pipeline.contradiction_mode = ContradictionMode::probability;
            else throw ConfigFileError("contradiction_mode must be argmax or probability, got '" + value + "'");
        } else {
            throw ConfigFileError("unknown config key '" + key + "'");
        }
    }

    void validate() const {
        if (port < 0 || port > 65535) throw ConfigFileError("port out of range");
        if (worker_threads < 1) throw ConfigFileError("worker_threads must be at least 1");
        try {
            pipeline.validate();
        } catch (const PipelineConfigError& e) {
            throw ConfigFileError(e.what());
        }
    }

    // Environment override for `key`: COUNSEL_ + uppercased key.
    static std::string env_name(const std::string& key) {
        std::string n = "COUNSEL_";
        for (char c : key) n += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        return n;
    }

    // Defaults, then the file (if any), then environment variables.
    static ServiceConfig load(const std::string& path = "") {
        ServiceConfig c;
        if (!path.empty())
            for (const auto& [k, v] : read_key_values(path)) c.set(k, v);
        for (const auto& k : keys())
            if (const char* v = std::getenv(env_name(k).c_str())) c.set(k, v);
        c.validate();
        return c;
    }

    std::map<std::string, std::string> echo() const {
        std::string order;
        for (const auto& f : pipeline.filter_order) order += (order.empty() ? "" : ",") + f;
        return {{"host", host},
                {"port", std::to_string(port)},
                {"model_checkpoint", model_checkpoint},
                {"vocab_path", vocab_path},
                {"nli_checkpoint", nli_checkpoint.empty() ? "(rule)" : nli_checkpoint},
                {"toxicity_checkpoint", toxicity_checkpoint.empty() ? "(lexicon)" : toxicity_checkpoint},
                {"embedder_checkpoint", embedder_checkpoint.empty() ? "(hashing)" : embedder_checkpoint},
                {"store_dir", store_dir},
                {"survey_path", surveys()},
                {"worker_threads", std::to_string(worker_threads)},
                {"exclusion_list_path", pipeline.exclusion_list_path.empty() ? "(built-in)" : pipeline.exclusion_list_path},
                {"repetition_threshold", fmt_real(pipeline.repetition_threshold)},
                {"toxicity_threshold", fmt_real(pipeline.toxicity_threshold)},
                {"contradiction_mode", pipeline.contradiction_mode == ContradictionMode::argmax_label ? "argmax" : "probability"},
                {"contradiction_threshold", fmt_real(pipeline.contradiction_threshold)},
                {"max_consecutive_questions", std::to_string(pipeline.max_consecutive_questions)},
                {"filter_order", order},
                {"fallback_message", pipeline.fallback_message}};
    }
};

}  // namespace counsel
