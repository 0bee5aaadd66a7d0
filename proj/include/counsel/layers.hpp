#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "counsel/autograd.hpp"
#include "counsel/parameters.hpp"

namespace counsel {

enum class Activation { gelu, relu };

// Additive mask value for disallowed attention positions. exp() of it
// underflows to exactly zero, so masked keys carry no weight or gradient.
inline constexpr double kMaskedScore = -1e30;

namespace layers {

// Shape and initial value of one named parameter.
struct ParamSpec {
    enum class Init { xavier, zeros, ones };
    std::string name;
    Shape shape;
    Init init = Init::zeros;
};

using ParamSpecs = std::vector<ParamSpec>;

inline std::size_t spec_element_count(const ParamSpecs& specs) {
    std::size_t n = 0;
    for (const auto& s : specs) n += shape_numel(s.shape);
    return n;
}

// Allocates the described parameters, drawing Xavier values in spec order.
inline ParameterStore materialize(const ParamSpecs& specs, Rng& rng) {
    ParameterStore store;
    for (const auto& s : specs) {
        switch (s.init) {
            case ParamSpec::Init::xavier: store.add(s.name, xavier_uniform(s.shape[0], s.shape[1], rng)); break;
            case ParamSpec::Init::zeros: store.add(s.name, Tensor(s.shape, 0.0)); break;
            case ParamSpec::Init::ones: store.add(s.name, Tensor(s.shape, 1.0)); break;
        }
    }
    return store;
}

inline void linear_spec(ParamSpecs& out, const std::string& prefix, std::size_t in, std::size_t n) {
    out.push_back({prefix + ".w", {in, n}, ParamSpec::Init::xavier});
    out.push_back({prefix + ".b", {n}, ParamSpec::Init::zeros});
}

inline void layer_norm_spec(ParamSpecs& out, const std::string& prefix, std::size_t d) {
    out.push_back({prefix + ".gain", {d}, ParamSpec::Init::ones});
    out.push_back({prefix + ".bias", {d}, ParamSpec::Init::zeros});
}

inline void attention_spec(ParamSpecs& out, const std::string& prefix, std::size_t d) {
    for (const char* part : {".q", ".k", ".v", ".o"}) linear_spec(out, prefix + part, d, d);
}

inline void feed_forward_spec(ParamSpecs& out, const std::string& prefix, std::size_t d,
                              std::size_t d_ff) {
    linear_spec(out, prefix + ".in", d, d_ff);
    linear_spec(out, prefix + ".out", d_ff, d);
}

// Pre-norm encoder block: self-attention and feed-forward sublayers.
inline void encoder_block_spec(ParamSpecs& out, const std::string& prefix, std::size_t d,
                               std::size_t d_ff) {
    layer_norm_spec(out, prefix + ".ln_attn", d);
    attention_spec(out, prefix + ".attn", d);
    layer_norm_spec(out, prefix + ".ln_ff", d);
    feed_forward_spec(out, prefix + ".ff", d, d_ff);
}

// Pre-norm decoder block: masked self-attention, cross-attention, feed-forward.
inline void decoder_block_spec(ParamSpecs& out, const std::string& prefix, std::size_t d,
                               std::size_t d_ff) {
    layer_norm_spec(out, prefix + ".ln_self", d);
    attention_spec(out, prefix + ".self", d);
    layer_norm_spec(out, prefix + ".ln_cross", d);
    attention_spec(out, prefix + ".cross", d);
    layer_norm_spec(out, prefix + ".ln_ff", d);
    feed_forward_spec(out, prefix + ".ff", d, d_ff);
}

// Forward-pass state: the graph, the weights, and train/eval switches.
class Context {
public:
    Context(Graph& g, const ParameterStore& params, Activation act = Activation::gelu)
        : graph(g), activation(act), params_(params) {}

    Graph& graph;
    Activation activation;
    double dropout = 0.0;          // applied only when rng is set
    Rng* rng = nullptr;
    std::vector<Tensor>* attention_capture = nullptr;

    // One leaf per parameter per graph, however often it is used.
    Var param(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var v = graph.parameter(params_.get(name));
        bound_.emplace(name, v);
        return v;
    }

    Var maybe_dropout(Var x) {
        if (!rng || dropout <= 0.0) return x;
        return graph.dropout(x, dropout, *rng);
    }

private:
    const ParameterStore& params_;
    std::unordered_map<std::string, Var> bound_;
};

inline Var linear(Context& ctx, const std::string& prefix, Var x) {
    Graph& g = ctx.graph;
    return g.add(g.matmul(x, ctx.param(prefix + ".w")), ctx.param(prefix + ".b"));
}

inline Var layer_norm(Context& ctx, const std::string& prefix, Var x) {
    return ctx.graph.layer_norm(x, ctx.param(prefix + ".gain"), ctx.param(prefix + ".bias"));
}

inline Var activate(Context& ctx, Var x) {
    return ctx.activation == Activation::gelu ? ctx.graph.gelu(x) : ctx.graph.relu(x);
}

// Multi-head scaled dot-product attention over already projected queries,
// keys and values. `mask`, when given, is an additive [n_query, n_key] constant.
inline Var attend(Context& ctx, const std::string& prefix, Var q, Var k, Var v, std::size_t n_heads,
                  const Var* mask = nullptr) {
    Graph& g = ctx.graph;
    const std::size_t d = g.value(q).cols();
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Var qh = g.slice(q, 1, h * dh, (h + 1) * dh);
        Var kh = g.slice(k, 1, h * dh, (h + 1) * dh);
        Var vh = g.slice(v, 1, h * dh, (h + 1) * dh);
        Var scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
        if (mask) scores = g.add(scores, *mask);
        Var weights = g.softmax_rows(scores);
        if (ctx.attention_capture) ctx.attention_capture->push_back(g.value(weights));
        heads.push_back(g.matmul(weights, vh));
    }
    Var joined = n_heads == 1 ? heads[0] : g.concat(heads, 1);
    return linear(ctx, prefix + ".o", joined);
}

inline Var attention(Context& ctx, const std::string& prefix, Var query_in, Var kv_in,
                     std::size_t n_heads, const Var* mask = nullptr) {
    Var q = linear(ctx, prefix + ".q", query_in);
    Var k = linear(ctx, prefix + ".k", kv_in);
    Var v = linear(ctx, prefix + ".v", kv_in);
    return attend(ctx, prefix, q, k, v, n_heads, mask);
}

inline Var feed_forward(Context& ctx, const std::string& prefix, Var x) {
    Var h = activate(ctx, linear(ctx, prefix + ".in", x));
    return linear(ctx, prefix + ".out", h);
}

inline Var encoder_block(Context& ctx, const std::string& prefix, Var x, std::size_t n_heads) {
    Graph& g = ctx.graph;
    Var h = layer_norm(ctx, prefix + ".ln_attn", x);
    x = g.add(x, ctx.maybe_dropout(attention(ctx, prefix + ".attn", h, h, n_heads)));
    h = layer_norm(ctx, prefix + ".ln_ff", x);
    return g.add(x, ctx.maybe_dropout(feed_forward(ctx, prefix + ".ff", h)));
}

inline Var decoder_block(Context& ctx, const std::string& prefix, Var x, Var memory,
                         std::size_t n_heads, Var causal_mask) {
    Graph& g = ctx.graph;
    Var h = layer_norm(ctx, prefix + ".ln_self", x);
    x = g.add(x, ctx.maybe_dropout(attention(ctx, prefix + ".self", h, h, n_heads, &causal_mask)));
    h = layer_norm(ctx, prefix + ".ln_cross", x);
    x = g.add(x, ctx.maybe_dropout(attention(ctx, prefix + ".cross", h, memory, n_heads)));
    h = layer_norm(ctx, prefix + ".ln_ff", x);
    return g.add(x, ctx.maybe_dropout(feed_forward(ctx, prefix + ".ff", h)));
}

inline Tensor causal_mask(std::size_t n) {
    Tensor m({n, n});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = r + 1; c < n; ++c) m(r, c) = kMaskedScore;
    return m;
}

inline std::vector<std::size_t> positions(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    return p;
}

// [1, n] row of 1/n; left-multiplying averages the rows of an [n, d] input.
inline Tensor mean_pool_row(std::size_t n) {
    return Tensor({1, n}, std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

}  // namespace layers
}  // namespace counsel
