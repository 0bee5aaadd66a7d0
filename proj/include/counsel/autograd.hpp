#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "counsel/random.hpp"
#include "counsel/tensor.hpp"

namespace counsel {

class UnsupportedOperation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

enum class OpKind {
    leaf,
    matmul,
    add,
    mul,
    scale,
    softmax_rows,
    layer_norm,
    relu,
    gelu,
    embedding_lookup,
    concat,
    slice,
    transpose,
    cross_entropy,
    dropout,
    l2_normalize_rows,
};

inline std::string_view op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::softmax_rows: return "softmax-rows";
        case OpKind::layer_norm: return "layer-norm";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::embedding_lookup: return "embedding-lookup";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::transpose: return "transpose";
        case OpKind::cross_entropy: return "cross-entropy";
        case OpKind::dropout: return "dropout";
        case OpKind::l2_normalize_rows: return "l2-normalize-rows";
    }
    return "?";
}

inline OpKind op_kind_from_name(std::string_view name) {
    for (int k = static_cast<int>(OpKind::matmul); k <= static_cast<int>(OpKind::l2_normalize_rows); ++k) {
        if (op_name(static_cast<OpKind>(k)) == name) return static_cast<OpKind>(k);
    }
    throw UnsupportedOperation("unsupported operation '" + std::string(name) + "'");
}

// Per-operation parameters. Only the fields an operation reads are used.
struct OpAttrs {
    double scalar = 1.0;                 // scale factor, dropout rate, layer-norm epsilon
    std::size_t axis = 0;                // concat / slice
    std::size_t begin = 0;               // slice
    std::size_t end = 0;                 // slice
    std::vector<std::size_t> indices;    // embedding ids, cross-entropy targets
    std::size_t ignore_index = std::numeric_limits<std::size_t>::max();
    Rng* rng = nullptr;                  // dropout
};

struct Var {
    std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in creation order, which is a
// topological order: every input id is smaller than the node's own id.
class Graph {
public:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<std::size_t> inputs;
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        Parameter param;              // set for parameter leaves
        OpAttrs attrs;
        std::vector<double> cache;    // op-specific saved values
    };

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(Var v) const { return nodes_.at(v.id); }
    const Tensor& value(Var v) const { return val(nodes_.at(v.id)); }
    std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }

    Var constant(Tensor t) {
        Node n;
        n.value = std::move(t);
        return push(std::move(n));
    }

    // Leaf bound to a shared parameter; backward accumulates into it.
    Var parameter(const Parameter& p) {
        Node n;
        n.requires_grad = grad_enabled_ && p->requires_grad();
        n.param = p;
        return push(std::move(n));
    }

    Var apply(OpKind kind, std::span<const Var> in, const OpAttrs& attrs = {}) {
        auto need = [&](std::size_t k) {
            if (in.size() != k) {
                throw ShapeError(std::string(op_name(kind)) + " expects " + std::to_string(k) +
                                 " inputs, got " + std::to_string(in.size()));
            }
        };
        switch (kind) {
            case OpKind::matmul: need(2); return matmul(in[0], in[1]);
            case OpKind::add: need(2); return add(in[0], in[1]);
            case OpKind::mul: need(2); return mul(in[0], in[1]);
            case OpKind::scale: need(1); return scale(in[0], attrs.scalar);
            case OpKind::softmax_rows: need(1); return softmax_rows(in[0]);
            case OpKind::layer_norm: need(3); return layer_norm(in[0], in[1], in[2], attrs.scalar);
            case OpKind::relu: need(1); return relu(in[0]);
            case OpKind::gelu: need(1); return gelu(in[0]);
            case OpKind::embedding_lookup: need(1); return embedding(in[0], attrs.indices);
            case OpKind::concat: return concat(in, attrs.axis);
            case OpKind::slice: need(1); return slice(in[0], attrs.axis, attrs.begin, attrs.end);
            case OpKind::transpose: need(1); return transpose(in[0]);
            case OpKind::cross_entropy:
                need(1);
                return cross_entropy(in[0], attrs.indices, attrs.ignore_index);
            case OpKind::dropout:
                need(1);
                if (!attrs.rng) throw GraphError("dropout needs a random generator");
                return dropout(in[0], attrs.scalar, *attrs.rng);
            case OpKind::l2_normalize_rows: need(1); return l2_normalize_rows(in[0]);
            case OpKind::leaf: break;
        }
        throw UnsupportedOperation("unsupported operation '" + std::string(op_name(kind)) + "'");
    }

    // ---- operations -------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
        if (B.rows() != k) {
            throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()) +
                             " inner dimensions differ (" + std::to_string(k) + " vs " +
                             std::to_string(B.rows()) + ")");
        }
        Tensor C({m, n});
        gemm_nn(A.data().data(), B.data().data(), C.data().data(), m, k, n);
        return record(OpKind::matmul, {a, b}, std::move(C));
    }

    // Elementwise sum; b may also be a single row broadcast over a's rows.
    Var add(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        Tensor C = A;
        if (B.numel() == A.numel() && B.rows() == A.rows()) {
            for (std::size_t i = 0; i < C.numel(); ++i) C[i] += B[i];
        } else if (B.rows() == 1 && B.cols() == A.cols()) {
            const std::size_t n = A.cols();
            for (std::size_t r = 0; r < A.rows(); ++r)
                for (std::size_t c = 0; c < n; ++c) C[r * n + c] += B[c];
        } else {
            throw ShapeError("add: cannot combine " + shape_str(A.shape()) + " with " +
                             shape_str(B.shape()));
        }
        return record(OpKind::add, {a, b}, std::move(C));
    }

    Var mul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.shape() != B.shape()) {
            throw ShapeError("mul: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
        }
        Tensor C = A;
        for (std::size_t i = 0; i < C.numel(); ++i) C[i] *= B[i];
        return record(OpKind::mul, {a, b}, std::move(C));
    }

    Var scale(Var a, double s) {
        Tensor C = value(a);
        for (double& v : C.data()) v *= s;
        OpAttrs at;
        at.scalar = s;
        return record(OpKind::scale, {a}, std::move(C), std::move(at));
    }

    Var softmax_rows(Var a) {
        Tensor Y = value(a);
        const std::size_t n = Y.cols();
        for (std::size_t r = 0; r < Y.rows(); ++r) {
            double* row = Y.data().data() + r * n;
            double mx = *std::max_element(row, row + n);
            double sum = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                row[c] = std::exp(row[c] - mx);
                sum += row[c];
            }
            for (std::size_t c = 0; c < n; ++c) row[c] /= sum;
        }
        return record(OpKind::softmax_rows, {a}, std::move(Y));
    }

    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Tensor& X = value(x);
        const Tensor& G = value(gain);
        const Tensor& Bt = value(bias);
        const std::size_t n = X.cols();
        if (G.numel() != n || Bt.numel() != n) {
            throw ShapeError("layer-norm: input width " + std::to_string(n) + " vs gain " +
                             shape_str(G.shape()) + " / bias " + shape_str(Bt.shape()));
        }
        Tensor Y(X.shape());
        std::vector<double> cache(X.numel() + X.rows());  // xhat, then rstd per row
        for (std::size_t r = 0; r < X.rows(); ++r) {
            const double* row = X.data().data() + r * n;
            double mean = 0.0;
            for (std::size_t c = 0; c < n; ++c) mean += row[c];
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
            var /= static_cast<double>(n);
            const double rstd = 1.0 / std::sqrt(var + eps);
            cache[X.numel() + r] = rstd;
            for (std::size_t c = 0; c < n; ++c) {
                const double xh = (row[c] - mean) * rstd;
                cache[r * n + c] = xh;
                Y[r * n + c] = xh * G[c] + Bt[c];
            }
        }
        OpAttrs at;
        at.scalar = eps;
        Var out = record(OpKind::layer_norm, {x, gain, bias}, std::move(Y), std::move(at));
        nodes_[out.id].cache = std::move(cache);
        return out;
    }

    Var relu(Var a) {
        Tensor Y = value(a);
        for (double& v : Y.data()) v = v > 0.0 ? v : 0.0;
        return record(OpKind::relu, {a}, std::move(Y));
    }

    // Exact (erf) form.
    Var gelu(Var a) {
        Tensor Y = value(a);
        for (double& v : Y.data()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
        return record(OpKind::gelu, {a}, std::move(Y));
    }

    Var embedding(Var table, std::span<const std::size_t> ids) {
        const Tensor& T = value(table);
        const std::size_t d = T.cols();
        Tensor Y({ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= T.rows()) {
                throw ShapeError("embedding-lookup: id " + std::to_string(ids[i]) +
                                 " out of range for table with " + std::to_string(T.rows()) +
                                 " rows");
            }
            std::copy_n(T.data().data() + ids[i] * d, d, Y.data().data() + i * d);
        }
        OpAttrs at;
        at.indices.assign(ids.begin(), ids.end());
        return record(OpKind::embedding_lookup, {table}, std::move(Y), std::move(at));
    }

    Var concat(std::span<const Var> parts, std::size_t axis) {
        if (parts.empty()) throw ShapeError("concat: no inputs");
        if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
        std::size_t rows = 0, cols = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const Tensor& P = value(parts[i]);
            if (axis == 0) {
                if (i && P.cols() != cols)
                    throw ShapeError("concat rows: width " + std::to_string(P.cols()) + " vs " +
                                     std::to_string(cols));
                cols = P.cols();
                rows += P.rows();
            } else {
                if (i && P.rows() != rows)
                    throw ShapeError("concat cols: height " + std::to_string(P.rows()) + " vs " +
                                     std::to_string(rows));
                rows = P.rows();
                cols += P.cols();
            }
        }
        Tensor Y({rows, cols});
        std::size_t offset = 0;
        for (Var p : parts) {
            const Tensor& P = value(p);
            for (std::size_t r = 0; r < P.rows(); ++r)
                for (std::size_t c = 0; c < P.cols(); ++c) {
                    if (axis == 0)
                        Y(offset + r, c) = P(r, c);
                    else
                        Y(r, offset + c) = P(r, c);
                }
            offset += axis == 0 ? P.rows() : P.cols();
        }
        OpAttrs at;
        at.axis = axis;
        std::vector<std::size_t> ids;
        for (Var p : parts) ids.push_back(p.id);
        return record_ids(OpKind::concat, std::move(ids), std::move(Y), std::move(at));
    }

    Var concat(std::initializer_list<Var> parts, std::size_t axis) {
        return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
    }

    // Half-open range [begin, end) along axis 0 (rows) or 1 (columns).
    Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
        const Tensor& A = value(a);
        const std::size_t extent = axis == 0 ? A.rows() : A.cols();
        if (axis > 1 || begin > end || end > extent) {
            throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") on axis " + std::to_string(axis) + " of " + shape_str(A.shape()));
        }
        const std::size_t rows = axis == 0 ? end - begin : A.rows();
        const std::size_t cols = axis == 1 ? end - begin : A.cols();
        Tensor Y({rows, cols});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                Y(r, c) = axis == 0 ? A(begin + r, c) : A(r, begin + c);
        OpAttrs at;
        at.axis = axis;
        at.begin = begin;
        at.end = end;
        return record(OpKind::slice, {a}, std::move(Y), std::move(at));
    }

    Var transpose(Var a) {
        const Tensor& A = value(a);
        Tensor Y({A.cols(), A.rows()});
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) Y(c, r) = A(r, c);
        return record(OpKind::transpose, {a}, std::move(Y));
    }

    // Mean negative log-likelihood of targets[r] under softmax(logits row r).
    // Rows whose target equals ignore_index do not contribute.
    Var cross_entropy(Var logits, std::span<const std::size_t> targets,
                      std::size_t ignore_index = std::numeric_limits<std::size_t>::max()) {
        const Tensor& L = value(logits);
        if (targets.size() != L.rows()) {
            throw ShapeError("cross-entropy: " + std::to_string(targets.size()) +
                             " targets for logits " + shape_str(L.shape()));
        }
        const std::size_t n = L.cols();
        std::vector<double> probs(L.numel());
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t r = 0; r < L.rows(); ++r) {
            const double* row = L.data().data() + r * n;
            double mx = *std::max_element(row, row + n);
            double sum = 0.0;
            for (std::size_t c = 0; c < n; ++c) sum += std::exp(row[c] - mx);
            const double lse = mx + std::log(sum);
            for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(row[c] - lse);
            if (targets[r] == ignore_index) continue;
            if (targets[r] >= n) {
                throw ShapeError("cross-entropy: target " + std::to_string(targets[r]) +
                                 " out of range for " + std::to_string(n) + " classes");
            }
            total += lse - row[targets[r]];
            ++count;
        }
        OpAttrs at;
        at.indices.assign(targets.begin(), targets.end());
        at.ignore_index = ignore_index;
        at.scalar = static_cast<double>(count);
        Var out = record(OpKind::cross_entropy, {logits},
                         Tensor::scalar(count ? total / static_cast<double>(count) : 0.0),
                         std::move(at));
        nodes_[out.id].cache = std::move(probs);
        return out;
    }

    // Inverted dropout: kept entries are scaled by 1 / (1 - rate).
    Var dropout(Var a, double rate, Rng& rng) {
        if (rate < 0.0 || rate >= 1.0) throw GraphError("dropout rate must lie in [0, 1)");
        Tensor Y = value(a);
        std::vector<double> mask(Y.numel());
        const double keep = 1.0 / (1.0 - rate);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            mask[i] = rng.uniform() < rate ? 0.0 : keep;
            Y[i] *= mask[i];
        }
        OpAttrs at;
        at.scalar = rate;
        Var out = record(OpKind::dropout, {a}, std::move(Y), std::move(at));
        nodes_[out.id].cache = std::move(mask);
        return out;
    }

    Var l2_normalize_rows(Var a) {
        Tensor Y = value(a);
        const std::size_t n = Y.cols();
        std::vector<double> norms(Y.rows());
        for (std::size_t r = 0; r < Y.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < n; ++c) s += Y(r, c) * Y(r, c);
            norms[r] = std::max(std::sqrt(s), 1e-12);
            for (std::size_t c = 0; c < n; ++c) Y(r, c) /= norms[r];
        }
        Var out = record(OpKind::l2_normalize_rows, {a}, std::move(Y));
        nodes_[out.id].cache = std::move(norms);
        return out;
    }

    // ---- reverse pass -----------------------------------------------------

    // Computes node gradients of a scalar loss and adds them to the bound
    // parameters' grad buffers. Calling it again accumulates again.
    void backward(Var loss) {
        propagate(loss);
        flush_parameter_grads();
    }

    // Fills node gradients only; parameters are untouched until
    // flush_parameter_grads(). Lets callers control accumulation order.
    void propagate(Var loss) {
        const Node& L = nodes_.at(loss.id);
        if (val(L).numel() != 1) {
            throw GraphError("backward needs a scalar loss, got shape " +
                             shape_str(val(L).shape()));
        }
        if (!L.requires_grad) {
            throw GraphError("backward on a loss that is detached from every trainable input");
        }
        for (Node& n : nodes_) n.grad.clear();
        nodes_[loss.id].grad.assign(1, 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty() || n.kind == OpKind::leaf) continue;
            backprop(i);
        }
    }

    void flush_parameter_grads() {
        for (Node& n : nodes_) {
            if (!n.param || !n.requires_grad) continue;
            if (n.grad.empty()) {
                if (!n.param->has_grad()) n.param->zero_grad();
                continue;
            }
            n.param->accumulate_grad(n.grad);
        }
    }

    // Raw kernels, exposed for reuse by inference code.
    // C[m,n] = A[m,k] * B[k,n]
    static void gemm_nn(const double* A, const double* B, double* C, std::size_t m,
                        std::size_t k, std::size_t n) {
        std::fill(C, C + m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            double* c = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double a = A[i * k + p];
                if (a == 0.0) continue;
                const double* b = B + p * n;
                for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
            }
        }
    }

private:
    // Parameter leaves read the shared tensor directly instead of a copy.
    static const Tensor& val(const Node& n) { return n.param ? *n.param : n.value; }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    Var record(OpKind kind, std::initializer_list<Var> in, Tensor out, OpAttrs attrs = {}) {
        std::vector<std::size_t> ids;
        ids.reserve(in.size());
        for (Var v : in) ids.push_back(v.id);
        return record_ids(kind, std::move(ids), std::move(out), std::move(attrs));
    }

    Var record_ids(OpKind kind, std::vector<std::size_t> ids, Tensor out, OpAttrs attrs) {
        Node n;
        n.kind = kind;
        n.requires_grad = false;
        for (std::size_t id : ids) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
        n.inputs = std::move(ids);
        n.value = std::move(out);
        n.attrs = std::move(attrs);
        n.attrs.rng = nullptr;
        return push(std::move(n));
    }

    std::vector<double>& grad_of(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(val(n).numel(), 0.0);
        return n.grad;
    }

    bool wants(std::size_t id) const { return nodes_[id].requires_grad; }

    void backprop(std::size_t i) {
        const Node& n = nodes_[i];
        const std::vector<double>& g = n.grad;
        const std::vector<std::size_t>& in = n.inputs;
        switch (n.kind) {
            case OpKind::matmul: {
                const Tensor& A = val(nodes_[in[0]]);
                const Tensor& B = val(nodes_[in[1]]);
                const std::size_t m = A.rows(), k = A.cols(), p = B.cols();
                if (wants(in[0])) {
                    auto& gA = grad_of(in[0]);
                    for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < k; ++c) {
                            const double* gr = g.data() + r * p;
                            const double* br = B.data().data() + c * p;
                            double s = 0.0;
                            for (std::size_t j = 0; j < p; ++j) s += gr[j] * br[j];
                            gA[r * k + c] += s;
                        }
                }
                if (wants(in[1])) {
                    auto& gB = grad_of(in[1]);
                    for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < k; ++c) {
                            const double a = A(r, c);
                            if (a == 0.0) continue;
                            const double* gr = g.data() + r * p;
                            double* out = gB.data() + c * p;
                            for (std::size_t j = 0; j < p; ++j) out[j] += a * gr[j];
                        }
                }
                break;
            }
            case OpKind::add: {
                if (wants(in[0])) {
                    auto& gA = grad_of(in[0]);
                    for (std::size_t j = 0; j < g.size(); ++j) gA[j] += g[j];
                }
                if (wants(in[1])) {
                    auto& gB = grad_of(in[1]);
                    if (gB.size() == g.size()) {
                        for (std::size_t j = 0; j < g.size(); ++j) gB[j] += g[j];
                    } else {
                        const std::size_t w = gB.size();
                        for (std::size_t j = 0; j < g.size(); ++j) gB[j % w] += g[j];
                    }
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& A = val(nodes_[in[0]]);
                const Tensor& B = val(nodes_[in[1]]);
                if (wants(in[0])) {
                    auto& gA = grad_of(in[0]);
                    for (std::size_t j = 0; j < g.size(); ++j) gA[j] += g[j] * B[j];
                }
                if (wants(in[1])) {
                    auto& gB = grad_of(in[1]);
                    for (std::size_t j = 0; j < g.size(); ++j) gB[j] += g[j] * A[j];
                }
                break;
            }
            case OpKind::scale: {
                auto& gA = grad_of(in[0]);
                for (std::size_t j = 0; j < g.size(); ++j) gA[j] += n.attrs.scalar * g[j];
                break;
            }
            case OpKind::softmax_rows: {
                const Tensor& Y = val(n);
                auto& gA = grad_of(in[0]);
                const std::size_t w = Y.cols();
                for (std::size_t r = 0; r < Y.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < w; ++c) dot += g[r * w + c] * Y[r * w + c];
                    for (std::size_t c = 0; c < w; ++c)
                        gA[r * w + c] += Y[r * w + c] * (g[r * w + c] - dot);
                }
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& X = val(nodes_[in[0]]);
                const Tensor& G = val(nodes_[in[1]]);
                const std::size_t w = X.cols(), rows = X.rows();
                const std::vector<double>& xhat = n.cache;
                if (wants(in[1])) {
                    auto& gG = grad_of(in[1]);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c) gG[c] += g[r * w + c] * xhat[r * w + c];
                }
                if (wants(in[2])) {
                    auto& gB = grad_of(in[2]);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c) gB[c] += g[r * w + c];
                }
                if (wants(in[0])) {
                    auto& gX = grad_of(in[0]);
                    std::vector<double> dxh(w);
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double rstd = xhat[X.numel() + r];
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < w; ++c) {
                            dxh[c] = g[r * w + c] * G[c];
                            mean_d += dxh[c];
                            mean_dx += dxh[c] * xhat[r * w + c];
                        }
                        mean_d /= static_cast<double>(w);
                        mean_dx /= static_cast<double>(w);
                        for (std::size_t c = 0; c < w; ++c)
                            gX[r * w + c] += rstd * (dxh[c] - mean_d - xhat[r * w + c] * mean_dx);
                    }
                }
                break;
            }
            case OpKind::relu: {
                const Tensor& X = val(nodes_[in[0]]);
                auto& gA = grad_of(in[0]);
                for (std::size_t j = 0; j < g.size(); ++j)
                    if (X[j] > 0.0) gA[j] += g[j];
                break;
            }
            case OpKind::gelu: {
                const Tensor& X = val(nodes_[in[0]]);
                auto& gA = grad_of(in[0]);
                constexpr double inv_sqrt_2pi = 0.3989422804014327;
                for (std::size_t j = 0; j < g.size(); ++j) {
                    const double x = X[j];
                    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    gA[j] += g[j] * (cdf + x * pdf);
                }
                break;
            }
            case OpKind::embedding_lookup: {
                auto& gT = grad_of(in[0]);
                const std::size_t d = val(n).cols();
                for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
                    double* dst = gT.data() + n.attrs.indices[r] * d;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
                }
                break;
            }
            case OpKind::concat: {
                const std::size_t W = val(n).cols();
                std::size_t offset = 0;
                for (std::size_t id : in) {
                    const Tensor& P = val(nodes_[id]);
                    if (wants(id)) {
                        auto& gP = grad_of(id);
                        for (std::size_t r = 0; r < P.rows(); ++r)
                            for (std::size_t c = 0; c < P.cols(); ++c) {
                                const std::size_t src = n.attrs.axis == 0 ? (offset + r) * W + c
                                                                          : r * W + offset + c;
                                gP[r * P.cols() + c] += g[src];
                            }
                    }
                    offset += n.attrs.axis == 0 ? P.rows() : P.cols();
                }
                break;
            }
            case OpKind::slice: {
                const Tensor& A = val(nodes_[in[0]]);
                auto& gA = grad_of(in[0]);
                const std::size_t rows = val(n).rows(), cols = val(n).cols(), W = A.cols();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t dst = n.attrs.axis == 0 ? (n.attrs.begin + r) * W + c
                                                                  : r * W + n.attrs.begin + c;
                        gA[dst] += g[r * cols + c];
                    }
                break;
            }
            case OpKind::transpose: {
                auto& gA = grad_of(in[0]);
                const std::size_t rows = val(n).rows(), cols = val(n).cols();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gA[c * rows + r] += g[r * cols + c];
                break;
            }
            case OpKind::cross_entropy: {
                const double count = n.attrs.scalar;
                if (count == 0.0) break;
                auto& gL = grad_of(in[0]);
                const std::size_t w = val(nodes_[in[0]]).cols();
                const double scale = g[0] / count;
                for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
                    const std::size_t t = n.attrs.indices[r];
                    if (t == n.attrs.ignore_index) continue;
                    for (std::size_t c = 0; c < w; ++c)
                        gL[r * w + c] += scale * (n.cache[r * w + c] - (c == t ? 1.0 : 0.0));
                }
                break;
            }
            case OpKind::dropout: {
                auto& gA = grad_of(in[0]);
                for (std::size_t j = 0; j < g.size(); ++j) gA[j] += g[j] * n.cache[j];
                break;
            }
            case OpKind::l2_normalize_rows: {
                const Tensor& Y = val(n);
                auto& gA = grad_of(in[0]);
                const std::size_t w = Y.cols();
                for (std::size_t r = 0; r < Y.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < w; ++c) dot += Y(r, c) * g[r * w + c];
                    for (std::size_t c = 0; c < w; ++c)
                        gA[r * w + c] += (g[r * w + c] - Y(r, c) * dot) / n.cache[r];
                }
                break;
            }
            case OpKind::leaf: break;
        }
    }

    std::deque<Node> nodes_;  // stable references across appends
    bool grad_enabled_ = true;
};

}  // namespace counsel
