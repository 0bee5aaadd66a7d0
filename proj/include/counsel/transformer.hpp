#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/autograd.hpp"
#include "counsel/checkpoint.hpp"
#include "counsel/layers.hpp"
#include "counsel/optimizer.hpp"
#include "counsel/parameters.hpp"
#include "counsel/random.hpp"
#include "counsel/tokenizer.hpp"

namespace counsel {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SequenceRangeError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class TrainingDataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TransformerConfig {
    std::size_t n_encoder_layers = 2;
    std::size_t n_decoder_layers = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t vocab_size = 200;
    std::size_t max_positions = kMaxTokens;
    double dropout = 0.1;
    Activation activation = Activation::gelu;

    // 2 encoder / 24 decoder layers, 2560-wide embeddings, 32 heads. The
    // feed-forward width and vocabulary are those of the upstream 2.7B
    // checkpoint family, which the architecture description leaves implicit.
    static TransformerConfig large_reference() {
        TransformerConfig c;
        c.n_encoder_layers = 2;
        c.n_decoder_layers = 24;
        c.d_model = 2560;
        c.n_heads = 32;
        c.d_ff = 10240;
        c.vocab_size = 8008;
        c.max_positions = kMaxTokens;
        return c;
    }

    static TransformerConfig toy(std::size_t vocab_size) {
        TransformerConfig c;
        c.vocab_size = vocab_size;
        return c;
    }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v < 1) throw ConfigError(std::string(name) + " must be at least 1");
        };
        positive(n_encoder_layers, "n_encoder_layers");
        positive(n_decoder_layers, "n_decoder_layers");
        positive(d_model, "d_model");
        positive(n_heads, "n_heads");
        positive(d_ff, "d_ff");
        positive(vocab_size, "vocab_size");
        positive(max_positions, "max_positions");
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    }

    std::map<std::string, std::string> to_map() const {
        std::ostringstream dr;
        dr.precision(17);
        dr << dropout;
        return {{"n_encoder_layers", std::to_string(n_encoder_layers)},
                {"n_decoder_layers", std::to_string(n_decoder_layers)},
                {"d_model", std::to_string(d_model)},
                {"n_heads", std::to_string(n_heads)},
                {"d_ff", std::to_string(d_ff)},
                {"vocab_size", std::to_string(vocab_size)},
                {"max_positions", std::to_string(max_positions)},
                {"dropout", dr.str()},
                {"activation", activation == Activation::gelu ? "gelu" : "relu"}};
    }

    // Unknown keys are rejected; missing keys keep their defaults.
    static TransformerConfig from_map(const std::map<std::string, std::string>& kv) {
        TransformerConfig c;
        for (const auto& [k, v] : kv) {
            try {
                if (k == "n_encoder_layers") c.n_encoder_layers = std::stoul(v);
                else if (k == "n_decoder_layers") c.n_decoder_layers = std::stoul(v);
                else if (k == "d_model") c.d_model = std::stoul(v);
                else if (k == "n_heads") c.n_heads = std::stoul(v);
                else if (k == "d_ff") c.d_ff = std::stoul(v);
                else if (k == "vocab_size") c.vocab_size = std::stoul(v);
                else if (k == "max_positions") c.max_positions = std::stoul(v);
                else if (k == "dropout") c.dropout = std::stod(v);
                else if (k == "activation") {
                    if (v == "gelu") c.activation = Activation::gelu;
                    else if (v == "relu") c.activation = Activation::relu;
                    else throw ConfigError("activation must be gelu or relu, got '" + v + "'");
                } else {
                    throw ConfigError("unknown transformer config key '" + k + "'");
                }
            } catch (const std::logic_error& e) {
                if (dynamic_cast<const ConfigError*>(&e)) throw;
                throw ConfigError("bad value '" + v + "' for '" + k + "'");
            }
        }
        return c;
    }

    friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

// Names, shapes and init rules of every parameter, in init order.
inline layers::ParamSpecs describe_parameters(const TransformerConfig& c) {
    using layers::ParamSpec;
    c.validate();
    const std::size_t d = c.d_model;
    layers::ParamSpecs specs;
    specs.push_back({"tok_emb", {c.vocab_size, d}, ParamSpec::Init::xavier});
    specs.push_back({"enc_pos", {c.max_positions, d}, ParamSpec::Init::xavier});
    specs.push_back({"dec_pos", {c.max_positions, d}, ParamSpec::Init::xavier});
    for (std::size_t i = 0; i < c.n_encoder_layers; ++i)
        layers::encoder_block_spec(specs, "enc." + std::to_string(i), d, c.d_ff);
    layers::layer_norm_spec(specs, "enc.ln_final", d);
    for (std::size_t i = 0; i < c.n_decoder_layers; ++i)
        layers::decoder_block_spec(specs, "dec." + std::to_string(i), d, c.d_ff);
    layers::layer_norm_spec(specs, "dec.ln_final", d);
    layers::linear_spec(specs, "out", d, c.vocab_size);
    return specs;
}

inline std::size_t parameter_count(const TransformerConfig& c) {
    return layers::spec_element_count(describe_parameters(c));
}

class Seq2SeqModel {
public:
    Seq2SeqModel(TransformerConfig config, ParameterStore params)
        : config_(config), params_(std::move(params)) {}

    const TransformerConfig& config() const { return config_; }
    const ParameterStore& params() const { return params_; }
    ParameterStore& params() { return params_; }
    std::size_t parameter_count() const { return params_.element_count(); }

    Seq2SeqModel clone() const { return Seq2SeqModel(config_, params_.clone()); }

private:
    TransformerConfig config_;
    ParameterStore params_;
};

inline Seq2SeqModel init_model(const TransformerConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    return Seq2SeqModel(config, layers::materialize(describe_parameters(config), rng));
}

struct ForwardOptions {
    bool train = false;                 // enables dropout
    std::uint64_t dropout_seed = 0;
    std::vector<Tensor>* attention_capture = nullptr;
};

namespace detail {

inline void check_sequence(const TokenSequence& ids, const TransformerConfig& c, const char* what) {
    if (ids.empty()) throw SequenceRangeError(std::string(what) + " sequence is empty");
    if (ids.size() > c.max_positions) {
        throw SequenceRangeError(std::string(what) + " sequence has " + std::to_string(ids.size()) +
                                 " ids; limit is " + std::to_string(c.max_positions));
    }
    for (TokenId id : ids) {
        if (id >= c.vocab_size) {
            throw SequenceRangeError(std::string(what) + " id " + std::to_string(id) +
                                     " outside vocabulary of " + std::to_string(c.vocab_size));
        }
    }
}

inline Var embed(layers::Context& ctx, const std::string& pos_table, const TokenSequence& ids) {
    Graph& g = ctx.graph;
    Var tok = g.embedding(ctx.param("tok_emb"), ids);
    Var pos = g.embedding(ctx.param(pos_table), layers::positions(ids.size()));
    return ctx.maybe_dropout(g.add(tok, pos));
}

}  // namespace detail

// Encoder output ("memory"), [src_len, d_model].
inline Var encode_source(layers::Context& ctx, const Seq2SeqModel& model, const TokenSequence& src) {
    const auto& c = model.config();
    detail::check_sequence(src, c, "source");
    Var x = detail::embed(ctx, "enc_pos", src);
    for (std::size_t i = 0; i < c.n_encoder_layers; ++i)
        x = layers::encoder_block(ctx, "enc." + std::to_string(i), x, c.n_heads);
    return layers::layer_norm(ctx, "enc.ln_final", x);
}

// Next-token logits for every target position, [tgt_len, vocab_size].
inline Var decode_target(layers::Context& ctx, const Seq2SeqModel& model, Var memory,
                         const TokenSequence& tgt) {
    const auto& c = model.config();
    detail::check_sequence(tgt, c, "target");
    Graph& g = ctx.graph;
    Var mask = g.constant(layers::causal_mask(tgt.size()));
    Var x = detail::embed(ctx, "dec_pos", tgt);
    for (std::size_t i = 0; i < c.n_decoder_layers; ++i)
        x = layers::decoder_block(ctx, "dec." + std::to_string(i), x, memory, c.n_heads, mask);
    x = layers::layer_norm(ctx, "dec.ln_final", x);
    return layers::linear(ctx, "out", x);
}

// Evaluation-mode decoding one target position at a time. Keys and values
// of earlier positions are kept per hypothesis, so a step costs one row
// instead of the whole prefix. Logits equal the matching row of
// decode_target.
class IncrementalDecoder {
public:
    struct State {
        std::vector<Tensor> self_k, self_v;  // per layer, [length, d_model]
        std::size_t length = 0;
    };

    IncrementalDecoder(const Seq2SeqModel& model, const Tensor& memory) : model_(model) {
        Graph g(false);
        layers::Context ctx(g, model.params(), model.config().activation);
        Var m = g.constant(memory);
        for (std::size_t i = 0; i < model.config().n_decoder_layers; ++i) {
            const std::string p = "dec." + std::to_string(i) + ".cross";
            cross_k_.push_back(g.value(layers::linear(ctx, p + ".k", m)));
            cross_v_.push_back(g.value(layers::linear(ctx, p + ".v", m)));
        }
    }

    State start() const {
        const std::size_t d = model_.config().d_model;
        State s;
        s.self_k.assign(model_.config().n_decoder_layers, Tensor({0, d}));
        s.self_v = s.self_k;
        return s;
    }

    // Appends `token` at position s.length; returns next-token logits.
    std::vector<double> step(State& s, TokenId token) const {
        const auto& c = model_.config();
        detail::check_sequence({token}, c, "target");
        if (s.length >= c.max_positions)
            throw SequenceRangeError("target longer than " + std::to_string(c.max_positions) + " positions");
        Graph g(false);
        layers::Context ctx(g, model_.params(), c.activation);
        const std::size_t tok[] = {token}, pos[] = {s.length};
        Var x = g.add(g.embedding(ctx.param("tok_emb"), tok), g.embedding(ctx.param("dec_pos"), pos));
        for (std::size_t i = 0; i < c.n_decoder_layers; ++i) {
            const std::string p = "dec." + std::to_string(i);
            Var h = layers::layer_norm(ctx, p + ".ln_self", x);
            append_row(s.self_k[i], g.value(layers::linear(ctx, p + ".self.k", h)));
            append_row(s.self_v[i], g.value(layers::linear(ctx, p + ".self.v", h)));
            Var q = layers::linear(ctx, p + ".self.q", h);
            x = g.add(x, layers::attend(ctx, p + ".self", q, g.constant(s.self_k[i]), g.constant(s.self_v[i]),
                                        c.n_heads));
            h = layers::layer_norm(ctx, p + ".ln_cross", x);
            q = layers::linear(ctx, p + ".cross.q", h);
            x = g.add(x, layers::attend(ctx, p + ".cross", q, g.constant(cross_k_[i]), g.constant(cross_v_[i]),
                                        c.n_heads));
            h = layers::layer_norm(ctx, p + ".ln_ff", x);
            x = g.add(x, layers::feed_forward(ctx, p + ".ff", h));
        }
        ++s.length;
        const Tensor& logits = g.value(layers::linear(ctx, "out", layers::layer_norm(ctx, "dec.ln_final", x)));
        return {logits.data().begin(), logits.data().end()};
    }

private:
    static void append_row(Tensor& m, const Tensor& row) {
        std::vector<double> v(m.data().begin(), m.data().end());
        v.insert(v.end(), row.data().begin(), row.data().end());
        m = Tensor({m.rows() + 1, row.cols()}, std::move(v));
    }

    const Seq2SeqModel& model_;
    std::vector<Tensor> cross_k_, cross_v_;
};

inline Var forward(Graph& g, const Seq2SeqModel& model, const TokenSequence& src,
                   const TokenSequence& tgt_prefix, const ForwardOptions& opt = {}) {
    layers::Context ctx(g, model.params(), model.config().activation);
    Rng rng(opt.dropout_seed);
    if (opt.train) {
        ctx.dropout = model.config().dropout;
        ctx.rng = &rng;
    }
    ctx.attention_capture = opt.attention_capture;
    Var memory = encode_source(ctx, model, src);
    return decode_target(ctx, model, memory, tgt_prefix);
}

// Evaluation-mode logits without gradient tracking.
inline Tensor forward(const Seq2SeqModel& model, const TokenSequence& src,
                      const TokenSequence& tgt_prefix) {
    Graph g(false);
    return g.value(forward(g, model, src, tgt_prefix));
}

struct TrainingPair {
    TokenSequence prompt;
    TokenSequence response;
};

struct TrainSchedule {
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double learning_rate = 2e-3;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
};

struct TrainReport {
    std::vector<double> epoch_loss;  // token-weighted mean cross-entropy per epoch
};

// Teacher-forced loss of one pair: decoder reads response[0..n-1) and is
// scored on response[1..n). PAD targets are ignored.
inline Var pair_loss(Graph& g, const Seq2SeqModel& model, const TrainingPair& pair,
                     const ForwardOptions& opt = {}) {
    TokenSequence input(pair.response.begin(), pair.response.end() - 1);
    std::vector<std::size_t> targets(pair.response.begin() + 1, pair.response.end());
    Var logits = forward(g, model, pair.prompt, input, opt);
    return g.cross_entropy(logits, targets, Vocabulary::pad);
}

inline std::size_t scored_tokens(const TrainingPair& p) {
    return static_cast<std::size_t>(
        std::count_if(p.response.begin() + 1, p.response.end(), [](TokenId t) { return t != Vocabulary::pad; }));
}

inline void validate_pairs(const std::vector<TrainingPair>& pairs, const TransformerConfig& c) {
    if (pairs.empty()) throw TrainingDataError("no training pairs");
    const std::size_t limit = std::min(kMaxTokens, c.max_positions);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        auto fail = [&](const std::string& why) {
            throw TrainingDataError("pair " + std::to_string(i) + ": " + why);
        };
        if (p.prompt.empty()) fail("empty prompt");
        if (p.response.size() < 2) fail("response needs at least 2 ids");
        if (p.prompt.size() > limit)
            fail("prompt has " + std::to_string(p.prompt.size()) + " ids; limit " + std::to_string(limit));
        if (p.response.size() > limit)
            fail("response has " + std::to_string(p.response.size()) + " ids; limit " +
                 std::to_string(limit));
        for (TokenId t : p.prompt)
            if (t >= c.vocab_size) fail("prompt id " + std::to_string(t) + " outside vocabulary");
        for (TokenId t : p.response)
            if (t >= c.vocab_size) fail("response id " + std::to_string(t) + " outside vocabulary");
    }
}

// Token-weighted mean cross-entropy in evaluation mode.
inline double evaluate_loss(const Seq2SeqModel& model, const std::vector<TrainingPair>& pairs) {
    double total = 0.0;
    std::size_t tokens = 0;
    for (const auto& p : pairs) {
        Graph g(false);
        const std::size_t n = scored_tokens(p);
        total += g.value(pair_loss(g, model, p)).item() * static_cast<double>(n);
        tokens += n;
    }
    return tokens ? total / static_cast<double>(tokens) : 0.0;
}

inline void clip_gradients(const std::vector<Parameter>& params, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p->grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double s = max_norm / norm;
    for (const auto& p : params)
        for (double& g : p->grad()) g *= s;
}

// Mini-batch Adam on teacher-forced cross-entropy. Each batch averages the
// per-pair losses. Deterministic for a fixed schedule seed.
inline TrainReport train(Seq2SeqModel& model, const std::vector<TrainingPair>& pairs,
                         const TrainSchedule& schedule,
                         const std::function<void(std::size_t, double)>& on_epoch = {}) {
    validate_pairs(pairs, model.config());
    if (schedule.batch_size == 0) throw TrainingDataError("batch_size must be at least 1");
    OptimizerConfig oc;
    oc.algorithm = Algorithm::adam;
    oc.learning_rate = schedule.learning_rate;
    Optimizer opt(oc);
    const auto params = model.params().list();
    model.params().zero_grad();

    TrainReport report;
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(schedule.seed);
    std::uint64_t item = 0;
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double total = 0.0;
        std::size_t tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
            const std::size_t stop = std::min(order.size(), start + schedule.batch_size);
            const double weight = 1.0 / static_cast<double>(stop - start);
            for (std::size_t b = start; b < stop; ++b) {
                const TrainingPair& pair = pairs[order[b]];
                Graph g;
                ForwardOptions fo;
                fo.train = true;
                fo.dropout_seed = derive_seed(schedule.seed, item++);
                Var loss = pair_loss(g, model, pair, fo);
                const std::size_t n = scored_tokens(pair);
                total += g.value(loss).item() * static_cast<double>(n);
                tokens += n;
                g.backward(g.scale(loss, weight));
            }
            clip_gradients(params, schedule.clip_norm);
            opt.step(params);
        }
        const double mean = tokens ? total / static_cast<double>(tokens) : 0.0;
        report.epoch_loss.push_back(mean);
        if (on_epoch) on_epoch(epoch, mean);
    }
    return report;
}

inline constexpr const char* kSeq2SeqMagic = "CNSL.S2S";

inline void save_checkpoint(const Seq2SeqModel& model, const std::string& path) {
    Checkpoint ck;
    ck.magic = kSeq2SeqMagic;
    for (auto& [k, v] : model.config().to_map()) ck.meta["config." + k] = v;
    ck.add_parameters(model.params());
    ck.save(path);
}

namespace detail {

inline Seq2SeqModel model_from_checkpoint(const Checkpoint& ck) {
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : ck.meta)
        if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
    TransformerConfig config;
    try {
        config = TransformerConfig::from_map(kv);
        config.validate();
    } catch (const ConfigError& e) {
        throw CheckpointIntegrityError(std::string("checkpoint config invalid: ") + e.what());
    }
    ParameterStore store;
    for (const auto& s : describe_parameters(config)) store.add(s.name, Tensor(s.shape));
    ck.restore_into(store);
    return Seq2SeqModel(config, std::move(store));
}

}  // namespace detail

inline Seq2SeqModel load_checkpoint(const std::string& path) {
    return detail::model_from_checkpoint(Checkpoint::load(path, kSeq2SeqMagic));
}

// Rejects checkpoints whose embedded config differs from `expected`.
inline Seq2SeqModel load_checkpoint(const std::string& path, const TransformerConfig& expected) {
    Seq2SeqModel m = load_checkpoint(path);
    if (!(m.config() == expected)) {
        const auto a = m.config().to_map(), b = expected.to_map();
        std::string diff;
        for (const auto& [k, v] : a)
            if (b.at(k) != v) diff += " " + k + "=" + v + " (expected " + b.at(k) + ")";
        throw CheckpointIntegrityError("checkpoint config mismatch:" + diff);
    }
    return m;
}

}  // namespace counsel
