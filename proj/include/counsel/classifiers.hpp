#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "counsel/checkpoint.hpp"
#include "counsel/layers.hpp"
#include "counsel/lexicon.hpp"
#include "counsel/log.hpp"
#include "counsel/optimizer.hpp"
#include "counsel/synthetic.hpp"
#include "counsel/tokenizer.hpp"
#include "counsel/transformer.hpp"

// Auxiliary judges used by the response filters: a three-way NLI model, a
// per-class toxicity scorer and a sentence embedder. Each has a trainable
// implementation and a deterministic rule-based one behind the same
// interface.
namespace counsel {

inline constexpr const char* kSeparatorToken = "<sep>";

// ---------------------------------------------------------------- interfaces

struct NliResult {
    NliLabel label = NliLabel::neutral;
    std::array<double, 3> probs{1.0 / 3, 1.0 / 3, 1.0 / 3};  // indexed by NliLabel

    double prob(NliLabel l) const { return probs[static_cast<std::size_t>(l)]; }
};

class NliClassifier {
public:
    virtual ~NliClassifier() = default;
    virtual NliResult classify(std::string_view premise, std::string_view hypothesis) const = 0;
};

struct ToxicityScores {
    double threat = 0.0;
    double insult = 0.0;
    double obscene = 0.0;
    double overall = 0.0;

    double of(ToxicClass c) const {
        switch (c) {
            case ToxicClass::threat: return threat;
            case ToxicClass::insult: return insult;
            case ToxicClass::obscene: return obscene;
        }
        return 0.0;
    }

    static ToxicityScores from(double threat, double insult, double obscene) {
        return {threat, insult, obscene, std::max({threat, insult, obscene})};
    }
};

class ToxicityScorer {
public:
    virtual ~ToxicityScorer() = default;
    virtual ToxicityScores score(std::string_view text) const = 0;
};

struct SentenceEmbedding {
    std::vector<double> values;
    std::size_t dim() const { return values.size(); }
    friend bool operator==(const SentenceEmbedding&, const SentenceEmbedding&) = default;
};

class SentenceEmbedder {
public:
    virtual ~SentenceEmbedder() = default;
    virtual SentenceEmbedding embed(std::string_view text) const = 0;
    virtual std::size_t dim() const = 0;
};

// The fixed unit vector every embedder returns for text without words.
inline SentenceEmbedding reserved_embedding(std::size_t dim) {
    SentenceEmbedding e{std::vector<double>(dim, 0.0)};
    if (dim) e.values[0] = 1.0;
    return e;
}

inline double cosine_similarity(const SentenceEmbedding& a, const SentenceEmbedding& b) {
    if (a.dim() != b.dim()) {
        throw std::invalid_argument("cosine_similarity: dimension " + std::to_string(a.dim()) +
                                    " vs " + std::to_string(b.dim()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------- rule oracles

// Surface form reduced to what the rule judges compare: punctuation dropped,
// second person folded onto first person, synonyms mapped to one member of
// their pair, and negation markers removed and counted.
struct CanonicalClause {
    std::vector<std::string> words;
    bool negated = false;
};

inline CanonicalClause canonicalize(std::string_view sentence) {
    static const std::map<std::string, std::string> contraction_stem{
        {"don", ""}, {"doesn", ""}, {"didn", ""}, {"isn", "is"}, {"aren", "am"},
        {"wasn", "was"}, {"can", "can"}, {"won", "will"}, {"couldn", "could"}};
    const auto raw = text::split_words(sentence);
    CanonicalClause out;
    int negations = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const std::string& w = raw[i];
        if (i + 2 < raw.size() && raw[i + 1] == "'" && raw[i + 2] == "t" && contraction_stem.count(w)) {
            const std::string& stem = contraction_stem.at(w);
            if (!stem.empty()) out.words.push_back(stem);
            ++negations;
            i += 2;
            continue;
        }
        if (w.size() == 1 && text::is_punct(w[0])) continue;
        if (w == "not" || w == "never") {
            if (!out.words.empty() && out.words.back() == "do") out.words.pop_back();
            ++negations;
            continue;
        }
        std::string c = w;
        if (c == "you") c = "i";
        else if (c == "your") c = "my";
        else if (c == "yours") c = "mine";
        else if (c == "yourself") c = "myself";
        else if (c == "are" && !out.words.empty() && out.words.back() == "i") c = "am";
        out.words.push_back(synth::canonical_word(c));
    }
    out.negated = negations % 2 == 1;
    return out;
}

// Same clause up to perspective and synonyms: entailment, or contradiction
// when exactly one side is negated. Anything else is neutral.
class RuleNli final : public NliClassifier {
public:
    NliResult classify(std::string_view premise, std::string_view hypothesis) const override {
        const auto p = canonicalize(premise);
        const auto h = canonicalize(hypothesis);
        NliResult r;
        if (p.words.empty() && h.words.empty()) return r;
        if (p.words == h.words)
            r.label = p.negated == h.negated ? NliLabel::entailment : NliLabel::contradiction;
        else
            r.label = NliLabel::neutral;
        r.probs = {0.0, 0.0, 0.0};
        r.probs[static_cast<std::size_t>(r.label)] = 1.0;
        return r;
    }
};

// 1.0 for a class when any of its lexicon terms occurs, else 0.0.
class LexiconToxicity final : public ToxicityScorer {
public:
    explicit LexiconToxicity(Lexicon lexicon = Lexicon::defaults()) : lexicon_(std::move(lexicon)) {}

    ToxicityScores score(std::string_view text) const override {
        const auto words = text::split_words(text);
        auto hit = [&](ToxicClass c) { return lexicon_.hits(words, c) ? 1.0 : 0.0; };
        return ToxicityScores::from(hit(ToxicClass::threat), hit(ToxicClass::insult),
                                    hit(ToxicClass::obscene));
    }

private:
    Lexicon lexicon_;
};

// Signed feature hashing of canonical words (plus a negation marker).
class HashingEmbedder final : public SentenceEmbedder {
public:
    explicit HashingEmbedder(std::size_t dim = 64) : dim_(dim) {
        if (dim < 2) throw std::invalid_argument("embedding dim must be at least 2");
    }

    std::size_t dim() const override { return dim_; }

    SentenceEmbedding embed(std::string_view text) const override {
        auto c = canonicalize(text);
        if (c.negated) c.words.push_back("<not>");
        if (c.words.empty()) return reserved_embedding(dim_);
        std::vector<double> v(dim_, 0.0);
        for (const auto& w : c.words) {
            const std::uint64_t h = Checkpoint::fnv1a(w);
            v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
        }
        double n = 0.0;
        for (double x : v) n += x * x;
        if (n == 0.0) return reserved_embedding(dim_);
        n = std::sqrt(n);
        for (double& x : v) x /= n;
        return {std::move(v)};
    }

private:
    std::size_t dim_;
};

// ---------------------------------------------------------------- training helpers

struct FitSchedule {
    std::size_t epochs = 12;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;
};

namespace detail {

inline std::string join_tokens(const Vocabulary& v) {
    std::string out;
    for (const auto& t : v.tokens()) out += t + "\n";
    return out;
}

inline Vocabulary vocab_from_meta(const Checkpoint& ck) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : ck.require_meta("vocab")) {
        if (c == '\n') {
            tokens.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    try {
        return Vocabulary(std::move(tokens));
    } catch (const VocabularyError& e) {
        throw CheckpointIntegrityError(std::string("embedded vocabulary invalid: ") + e.what());
    }
}

inline std::size_t meta_size(const Checkpoint& ck, const std::string& key) {
    try {
        return static_cast<std::size_t>(std::stoull(ck.require_meta(key)));
    } catch (const std::logic_error&) {
        throw CheckpointIntegrityError("checkpoint meta '" + key + "' is not a count");
    }
}

inline double meta_real(const Checkpoint& ck, const std::string& key) {
    try {
        return std::stod(ck.require_meta(key));
    } catch (const std::logic_error&) {
        throw CheckpointIntegrityError("checkpoint meta '" + key + "' is not a number");
    }
}

inline std::string real_str(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Mini-batch Adam. `batch_loss` builds the mean loss of one batch of
// example indices in the given graph. Returns the mean loss per epoch.
inline std::vector<double> fit(
    ParameterStore& params, std::size_t n_examples, const FitSchedule& s,
    const std::function<Var(Graph&, std::span<const std::size_t>)>& batch_loss) {
    if (s.batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
    OptimizerConfig oc;
    oc.learning_rate = s.learning_rate;
    Optimizer opt(oc);
    const auto list = params.list();
    params.zero_grad();
    std::vector<std::size_t> order(n_examples);
    for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
    Rng rng(derive_seed(s.seed, 1));
    std::vector<double> trace;
    for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
        rng.shuffle(order);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n_examples; start += s.batch_size) {
            const std::size_t stop = std::min(n_examples, start + s.batch_size);
            Graph g;
            Var loss = batch_loss(g, std::span<const std::size_t>(order).subspan(start, stop - start));
            if (!g.node(loss).requires_grad) continue;  // batch had nothing to learn from
            total += g.value(loss).item();
            ++batches;
            g.backward(loss);
            clip_gradients(list, s.clip_norm);
            opt.step(list);
        }
        trace.push_back(batches ? total / static_cast<double>(batches) : 0.0);
    }
    return trace;
}

inline Var mean_of(Graph& g, const std::vector<Var>& terms) {
    Var sum = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) sum = g.add(sum, terms[i]);
    return g.scale(sum, 1.0 / static_cast<double>(terms.size()));
}

inline std::array<double, 3> softmax3(const Tensor& logits) {
    const double mx = std::max({logits[0], logits[1], logits[2]});
    std::array<double, 3> p{};
    double z = 0.0;
    for (std::size_t i = 0; i < 3; ++i) z += (p[i] = std::exp(logits[i] - mx));
    for (double& v : p) v /= z;
    return p;
}

}  // namespace detail

// ---------------------------------------------------------------- trained NLI

struct NliModelConfig {
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t d_ff = 64;
    std::size_t n_layers = 1;
    std::size_t max_len = 64;

    void validate() const {
        if (!d_model || !n_heads || !d_ff || !n_layers || max_len < 4)
            throw ConfigError("NLI model sizes must be positive (max_len >= 4)");
        if (d_model % n_heads) throw ConfigError("NLI d_model must be divisible by n_heads");
    }
};

inline constexpr const char* kNliMagic = "CNSL.NLI";

// Encoder over "<bos> premise <sep> hypothesis <eos>" with segment
// embeddings, mean-pooled into a one-hidden-layer head.
class TrainedNli final : public NliClassifier {
public:
    TrainedNli(NliModelConfig config, Vocabulary vocab, ParameterStore params)
        : config_(config), vocab_(std::move(vocab)), params_(std::move(params)),
          sep_(vocab_.id(kSeparatorToken)) {}

    static layers::ParamSpecs describe(const NliModelConfig& c, std::size_t vocab_size) {
        using layers::ParamSpec;
        c.validate();
        layers::ParamSpecs s;
        s.push_back({"tok_emb", {vocab_size, c.d_model}, ParamSpec::Init::xavier});
        s.push_back({"pos_emb", {c.max_len, c.d_model}, ParamSpec::Init::xavier});
        s.push_back({"seg_emb", {2, c.d_model}, ParamSpec::Init::xavier});
        for (std::size_t i = 0; i < c.n_layers; ++i)
            layers::encoder_block_spec(s, "enc." + std::to_string(i), c.d_model, c.d_ff);
        layers::layer_norm_spec(s, "enc.ln_final", c.d_model);
        layers::linear_spec(s, "head.hidden", c.d_model, c.d_model);
        layers::linear_spec(s, "head.out", c.d_model, 3);
        return s;
    }

    static TrainedNli init(const NliModelConfig& c, Vocabulary vocab, std::uint64_t seed) {
        if (!vocab.contains(kSeparatorToken))
            throw std::invalid_argument("NLI vocabulary needs the <sep> token");
        Rng rng(seed);
        auto params = layers::materialize(describe(c, vocab.size()), rng);
        return TrainedNli(c, std::move(vocab), std::move(params));
    }

    const NliModelConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }
    const ParameterStore& params() const { return params_; }
    ParameterStore& params() { return params_; }

    // Token ids and segment ids, each side head-truncated until the pair fits.
    std::pair<TokenSequence, std::vector<std::size_t>> frame(std::string_view premise,
                                                             std::string_view hypothesis) const {
        TokenSequence p = to_ids(premise, vocab_), h = to_ids(hypothesis, vocab_);
        const std::size_t budget = config_.max_len - 3;
        while (p.size() + h.size() > budget) (p.size() >= h.size() ? p : h).pop_back();
        TokenSequence ids{Vocabulary::bos};
        ids.insert(ids.end(), p.begin(), p.end());
        ids.push_back(sep_);
        std::vector<std::size_t> seg(ids.size(), 0);
        ids.insert(ids.end(), h.begin(), h.end());
        ids.push_back(Vocabulary::eos);
        seg.resize(ids.size(), 1);
        return {ids, seg};
    }

    Var logits(layers::Context& ctx, std::string_view premise, std::string_view hypothesis) const {
        Graph& g = ctx.graph;
        auto [ids, seg] = frame(premise, hypothesis);
        Var x = g.add(g.embedding(ctx.param("tok_emb"), ids),
                      g.embedding(ctx.param("pos_emb"), layers::positions(ids.size())));
        x = g.add(x, g.embedding(ctx.param("seg_emb"), seg));
        for (std::size_t i = 0; i < config_.n_layers; ++i)
            x = layers::encoder_block(ctx, "enc." + std::to_string(i), x, config_.n_heads);
        x = layers::layer_norm(ctx, "enc.ln_final", x);
        Var pooled = g.matmul(g.constant(layers::mean_pool_row(ids.size())), x);
        Var h = layers::activate(ctx, layers::linear(ctx, "head.hidden", pooled));
        return layers::linear(ctx, "head.out", h);
    }

    NliResult classify(std::string_view premise, std::string_view hypothesis) const override {
        NliResult r;
        if (text::trim(premise).empty() && text::trim(hypothesis).empty()) {
            log(LogLevel::info, "nli: empty premise and hypothesis, returning neutral");
            return r;
        }
        Graph g(false);
        layers::Context ctx(g, params_);
        r.probs = detail::softmax3(g.value(logits(ctx, premise, hypothesis)));
        r.label = static_cast<NliLabel>(std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
        return r;
    }

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.magic = kNliMagic;
        ck.meta["vocab"] = detail::join_tokens(vocab_);
        ck.meta["d_model"] = std::to_string(config_.d_model);
        ck.meta["n_heads"] = std::to_string(config_.n_heads);
        ck.meta["d_ff"] = std::to_string(config_.d_ff);
        ck.meta["n_layers"] = std::to_string(config_.n_layers);
        ck.meta["max_len"] = std::to_string(config_.max_len);
        ck.add_parameters(params_);
        ck.save(path);
    }

    static TrainedNli load(const std::string& path) {
        const Checkpoint ck = Checkpoint::load(path, kNliMagic);
        NliModelConfig c;
        c.d_model = detail::meta_size(ck, "d_model");
        c.n_heads = detail::meta_size(ck, "n_heads");
        c.d_ff = detail::meta_size(ck, "d_ff");
        c.n_layers = detail::meta_size(ck, "n_layers");
        c.max_len = detail::meta_size(ck, "max_len");
        try {
            c.validate();
        } catch (const ConfigError& e) {
            throw CheckpointIntegrityError(e.what());
        }
        Vocabulary vocab = detail::vocab_from_meta(ck);
        ParameterStore store;
        for (const auto& s : describe(c, vocab.size())) store.add(s.name, Tensor(s.shape));
        ck.restore_into(store);
        return TrainedNli(c, std::move(vocab), std::move(store));
    }

private:
    NliModelConfig config_;
    Vocabulary vocab_;
    ParameterStore params_;
    TokenId sep_;
};

inline Vocabulary build_nli_vocab(const std::vector<synth::NliExample>& data, std::size_t max_size = 2000) {
    std::vector<std::string> corpus;
    for (const auto& e : data) {
        corpus.push_back(e.premise);
        corpus.push_back(e.hypothesis);
    }
    return Vocabulary::build(corpus, max_size, {kSeparatorToken});
}

// Corpus size and schedule that clear 0.9 held-out accuracy with margin.
inline constexpr std::size_t kNliTrainSize = 3000;

inline FitSchedule nli_schedule(std::uint64_t seed = 0) {
    FitSchedule s;
    s.epochs = 20;
    s.seed = seed;
    return s;
}

struct NliTraining {
    TrainedNli model;
    std::vector<double> loss_trace;
};

inline NliTraining train_nli(const std::vector<synth::NliExample>& data, const FitSchedule& schedule = {},
                             const NliModelConfig& config = {}) {
    std::set<NliLabel> labels;
    for (const auto& e : data) labels.insert(e.label);
    if (labels.size() < 2) throw std::invalid_argument("NLI training data must contain at least two labels");
    TrainedNli model = TrainedNli::init(config, build_nli_vocab(data), derive_seed(schedule.seed, 0));
    auto trace = detail::fit(model.params(), data.size(), schedule, [&](Graph& g, std::span<const std::size_t> batch) {
        layers::Context ctx(g, model.params());
        std::vector<Var> losses;
        for (std::size_t i : batch) {
            const std::size_t target = static_cast<std::size_t>(data[i].label);
            losses.push_back(g.cross_entropy(model.logits(ctx, data[i].premise, data[i].hypothesis),
                                             std::span<const std::size_t>(&target, 1)));
        }
        return detail::mean_of(g, losses);
    });
    return {std::move(model), std::move(trace)};
}

inline double nli_accuracy(const NliClassifier& model, const std::vector<synth::NliExample>& data) {
    if (data.empty()) return 0.0;
    std::size_t right = 0;
    for (const auto& e : data) right += model.classify(e.premise, e.hypothesis).label == e.label;
    return static_cast<double>(right) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------- trained toxicity

inline constexpr const char* kToxicityMagic = "CNSL.TOX";

// Sum-pooled word embeddings feeding one two-way softmax head per class.
class TrainedToxicity final : public ToxicityScorer {
public:
    TrainedToxicity(std::size_t d_model, Vocabulary vocab, ParameterStore params)
        : d_model_(d_model), vocab_(std::move(vocab)), params_(std::move(params)) {}

    static layers::ParamSpecs describe(std::size_t d_model, std::size_t vocab_size) {
        layers::ParamSpecs s;
        s.push_back({"tok_emb", {vocab_size, d_model}, layers::ParamSpec::Init::xavier});
        layers::linear_spec(s, "head", d_model, 2 * kToxicClasses);
        return s;
    }

    static TrainedToxicity init(std::size_t d_model, Vocabulary vocab, std::uint64_t seed) {
        Rng rng(seed);
        auto params = layers::materialize(describe(d_model, vocab.size()), rng);
        return TrainedToxicity(d_model, std::move(vocab), std::move(params));
    }

    const Vocabulary& vocab() const { return vocab_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    // [1, 6] logits: (clean, toxic) pairs for threat, insult, obscene.
    Var logits(layers::Context& ctx, const TokenSequence& words) const {
        Graph& g = ctx.graph;
        Var emb = g.embedding(ctx.param("tok_emb"), words);
        Var pooled = g.matmul(g.constant(Tensor({1, words.size()}, 1.0)), emb);
        return layers::linear(ctx, "head", pooled);
    }

    ToxicityScores score(std::string_view text) const override {
        const TokenSequence words = to_ids(text, vocab_);
        if (words.empty()) return {};
        Graph g(false);
        layers::Context ctx(g, params_);
        const Tensor& l = g.value(logits(ctx, words));
        std::array<double, kToxicClasses> p{};
        for (std::size_t c = 0; c < kToxicClasses; ++c)
            p[c] = 1.0 / (1.0 + std::exp(l[2 * c] - l[2 * c + 1]));
        return ToxicityScores::from(p[0], p[1], p[2]);
    }

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.magic = kToxicityMagic;
        ck.meta["vocab"] = detail::join_tokens(vocab_);
        ck.meta["d_model"] = std::to_string(d_model_);
        ck.add_parameters(params_);
        ck.save(path);
    }

    static TrainedToxicity load(const std::string& path) {
        const Checkpoint ck = Checkpoint::load(path, kToxicityMagic);
        const std::size_t d = detail::meta_size(ck, "d_model");
        Vocabulary vocab = detail::vocab_from_meta(ck);
        ParameterStore store;
        for (const auto& s : describe(d, vocab.size())) store.add(s.name, Tensor(s.shape));
        ck.restore_into(store);
        return TrainedToxicity(d, std::move(vocab), std::move(store));
    }

private:
    std::size_t d_model_;
    Vocabulary vocab_;
    ParameterStore params_;
};

struct ToxicityTraining {
    TrainedToxicity model;
    std::vector<double> loss_trace;
};

inline ToxicityTraining train_toxicity(const std::vector<synth::ToxicityExample>& data,
                                       const FitSchedule& schedule = {}, std::size_t d_model = 16) {
    for (std::size_t c = 0; c < kToxicClasses; ++c) {
        std::size_t pos = 0;
        for (const auto& e : data) pos += e.labels[c];
        if (pos == 0 || pos == data.size()) {
            throw std::invalid_argument(std::string("toxicity training data has a single class for '") +
                                        class_name(ToxicClass(c)) + "'");
        }
    }
    std::vector<std::string> corpus;
    for (const auto& e : data) corpus.push_back(e.text);
    std::vector<TokenSequence> encoded;
    auto model = TrainedToxicity::init(d_model, Vocabulary::build(corpus, 4000), derive_seed(schedule.seed, 0));
    for (const auto& e : data) encoded.push_back(to_ids(e.text, model.vocab()));
    auto trace = detail::fit(model.params(), data.size(), schedule, [&](Graph& g, std::span<const std::size_t> batch) {
        layers::Context ctx(g, model.params());
        std::vector<Var> losses;
        for (std::size_t i : batch) {
            if (encoded[i].empty()) continue;
            Var l = model.logits(ctx, encoded[i]);
            for (std::size_t c = 0; c < kToxicClasses; ++c) {
                const std::size_t target = data[i].labels[c] ? 1 : 0;
                losses.push_back(g.cross_entropy(g.slice(l, 1, 2 * c, 2 * c + 2),
                                                 std::span<const std::size_t>(&target, 1)));
            }
        }
        if (losses.empty()) return g.constant(Tensor::scalar(0.0));
        return detail::mean_of(g, losses);
    });
    return {std::move(model), std::move(trace)};
}

// Fraction of examples whose thresholded score matches the label, per class.
inline std::array<double, kToxicClasses> toxicity_accuracy(const ToxicityScorer& scorer,
                                                           const std::vector<synth::ToxicityExample>& data,
                                                           double threshold = 0.5) {
    std::array<double, kToxicClasses> acc{};
    if (data.empty()) return acc;
    for (const auto& e : data) {
        const auto s = scorer.score(e.text);
        for (std::size_t c = 0; c < kToxicClasses; ++c)
            acc[c] += (s.of(ToxicClass(c)) >= threshold) == e.labels[c];
    }
    for (double& a : acc) a /= static_cast<double>(data.size());
    return acc;
}

// ---------------------------------------------------------------- trained embedder

inline constexpr const char* kEmbedderMagic = "CNSL.EMB";

struct EmbedderConfig {
    std::size_t d_model = 32;
    std::size_t dim = 32;
    double temperature = 0.1;  // contrastive logits are cos / temperature
};

// Mean-pooled word embeddings, a linear projection, then L2 normalization.
class TrainedEmbedder final : public SentenceEmbedder {
public:
    TrainedEmbedder(EmbedderConfig config, Vocabulary vocab, ParameterStore params)
        : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {}

    static layers::ParamSpecs describe(const EmbedderConfig& c, std::size_t vocab_size) {
        if (c.d_model == 0 || c.dim < 2 || c.temperature <= 0.0)
            throw ConfigError("embedder needs d_model >= 1, dim >= 2, temperature > 0");
        layers::ParamSpecs s;
        s.push_back({"tok_emb", {vocab_size, c.d_model}, layers::ParamSpec::Init::xavier});
        layers::linear_spec(s, "proj", c.d_model, c.dim);
        return s;
    }

    static TrainedEmbedder init(const EmbedderConfig& c, Vocabulary vocab, std::uint64_t seed) {
        Rng rng(seed);
        auto params = layers::materialize(describe(c, vocab.size()), rng);
        return TrainedEmbedder(c, std::move(vocab), std::move(params));
    }

    std::size_t dim() const override { return config_.dim; }
    const EmbedderConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    // Unit-norm [1, dim] row for a non-empty word sequence.
    Var embed_row(layers::Context& ctx, const TokenSequence& words) const {
        Graph& g = ctx.graph;
        Var emb = g.embedding(ctx.param("tok_emb"), words);
        Var pooled = g.matmul(g.constant(layers::mean_pool_row(words.size())), emb);
        return g.l2_normalize_rows(layers::linear(ctx, "proj", pooled));
    }

    SentenceEmbedding embed(std::string_view text) const override {
        const TokenSequence words = to_ids(text, vocab_);
        if (words.empty()) return reserved_embedding(config_.dim);
        Graph g(false);
        layers::Context ctx(g, params_);
        const Tensor& row = g.value(embed_row(ctx, words));
        double n = 0.0;
        for (double x : row.values()) n += x * x;
        if (n < 1e-20) return reserved_embedding(config_.dim);
        // Renormalize in double precision so the norm is 1 to rounding.
        SentenceEmbedding e{row.values()};
        n = std::sqrt(n);
        for (double& x : e.values) x /= n;
        return e;
    }

    void save(const std::string& path) const {
        Checkpoint ck;
        ck.magic = kEmbedderMagic;
        ck.meta["vocab"] = detail::join_tokens(vocab_);
        ck.meta["d_model"] = std::to_string(config_.d_model);
        ck.meta["dim"] = std::to_string(config_.dim);
        ck.meta["temperature"] = detail::real_str(config_.temperature);
        ck.add_parameters(params_);
        ck.save(path);
    }

    static TrainedEmbedder load(const std::string& path) {
        const Checkpoint ck = Checkpoint::load(path, kEmbedderMagic);
        EmbedderConfig c;
        c.d_model = detail::meta_size(ck, "d_model");
        c.dim = detail::meta_size(ck, "dim");
        c.temperature = detail::meta_real(ck, "temperature");
        Vocabulary vocab = detail::vocab_from_meta(ck);
        ParameterStore store;
        try {
            for (const auto& s : describe(c, vocab.size())) store.add(s.name, Tensor(s.shape));
        } catch (const ConfigError& e) {
            throw CheckpointIntegrityError(e.what());
        }
        ck.restore_into(store);
        return TrainedEmbedder(c, std::move(vocab), std::move(store));
    }

private:
    EmbedderConfig config_;
    Vocabulary vocab_;
    ParameterStore params_;
};

struct EmbedderTraining {
    TrainedEmbedder model;
    std::vector<double> loss_trace;
};

// In-batch contrastive training on the paraphrase pairs: each anchor must
// pick its own paraphrase out of the batch, in both directions. `extra_text`
// only widens the vocabulary (e.g. with dialogue text the filters will see).
inline EmbedderTraining train_embedder(const std::vector<synth::ParaphraseExample>& data,
                                       const FitSchedule& schedule = {}, const EmbedderConfig& config = {},
                                       const std::vector<std::string>& extra_text = {}) {
    std::vector<const synth::ParaphraseExample*> pos;
    for (const auto& e : data)
        if (e.paraphrase) pos.push_back(&e);
    if (pos.size() < 2) throw std::invalid_argument("embedder training needs at least two paraphrase pairs");
    std::vector<std::string> corpus = extra_text;
    for (const auto& e : data) {
        corpus.push_back(e.a);
        corpus.push_back(e.b);
    }
    auto model = TrainedEmbedder::init(config, Vocabulary::build(corpus, 4000), derive_seed(schedule.seed, 0));
    auto trace = detail::fit(model.params(), pos.size(), schedule, [&](Graph& g, std::span<const std::size_t> batch) {
        layers::Context ctx(g, model.params());
        std::vector<Var> a, b;
        std::vector<std::size_t> diag;
        for (std::size_t i : batch) {
            const auto wa = to_ids(pos[i]->a, model.vocab()), wb = to_ids(pos[i]->b, model.vocab());
            if (wa.empty() || wb.empty()) continue;
            a.push_back(model.embed_row(ctx, wa));
            b.push_back(model.embed_row(ctx, wb));
            diag.push_back(diag.size());
        }
        if (a.size() < 2) return g.constant(Tensor::scalar(0.0));
        Var sim = g.scale(g.matmul(g.concat(a, 0), g.transpose(g.concat(b, 0))), 1.0 / config.temperature);
        Var fwd = g.cross_entropy(sim, diag);
        Var bwd = g.cross_entropy(g.transpose(sim), diag);
        return g.scale(g.add(fwd, bwd), 0.5);
    });
    return {std::move(model), std::move(trace)};
}

// Mean cosine of paraphrase pairs and of unrelated pairs.
inline std::pair<double, double> paraphrase_separation(const SentenceEmbedder& e,
                                                       const std::vector<synth::ParaphraseExample>& data) {
    double sp = 0.0, sn = 0.0;
    std::size_t np = 0, nn = 0;
    for (const auto& x : data) {
        const double c = cosine_similarity(e.embed(x.a), e.embed(x.b));
        if (x.paraphrase) {
            sp += c;
            ++np;
        } else {
            sn += c;
            ++nn;
        }
    }
    return {np ? sp / double(np) : 0.0, nn ? sn / double(nn) : 0.0};
}

}  // namespace counsel
