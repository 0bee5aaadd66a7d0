#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "counsel/autograd.hpp"
#include "counsel/layers.hpp"
#include "counsel/optimizer.hpp"
#include "counsel/parameters.hpp"
#include "counsel/gradcheck.hpp"

using namespace counsel;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Tensor t({r, c});
    for (double& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
}

}  // namespace

TEST(Softmax, UniformRowIsOneThird) {
    Graph g;
    Var y = g.softmax_rows(g.constant(Tensor::matrix(1, 3, {1, 1, 1})));
    for (double v : g.value(y).data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, TwoZeroMatchesHighPrecisionValue) {
    // mpmath, 40 digits: e^2 / (e^2 + 1)
    Graph g;
    Var y = g.softmax_rows(g.constant(Tensor::matrix(1, 2, {2, 0})));
    EXPECT_NEAR(g.value(y)[0], 0.8807970779778824, 1e-6);
    EXPECT_NEAR(g.value(y)[1], 0.1192029220221176, 1e-6);
}

TEST(Softmax, RowsSumToOneAndIgnoreShift) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(9);
        Tensor x = random_matrix(rows, cols, rng, 30.0);
        Tensor shifted = x;
        const double c = rng.uniform(-50, 50);
        for (double& v : shifted.data()) v += c;
        Graph g;
        const Tensor& a = g.value(g.softmax_rows(g.constant(x)));
        const Tensor& b = g.value(g.softmax_rows(g.constant(shifted)));
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t k = 0; k < cols; ++k) {
                EXPECT_GE(a(r, k), 0.0);
                EXPECT_NEAR(a(r, k), b(r, k), 1e-12);
                s += a(r, k);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Graph g;
    Tensor a = Tensor::matrix(2, 2, {1.5, -2, 3, 0.25});
    Var y = g.matmul(g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})), g.constant(a));
    EXPECT_EQ(g.value(y).values(), a.values());
}

TEST(Graph, ShapeMismatchNamesDimensions) {
    Graph g;
    Var a = g.constant(Tensor({2, 3}));
    Var b = g.constant(Tensor({2, 3}));
    try {
        g.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    }
    EXPECT_THROW(g.add(a, g.constant(Tensor({3, 2}))), ShapeError);
    EXPECT_THROW(g.slice(a, 1, 2, 5), ShapeError);
}

TEST(Graph, UnknownOperationIsRejected) {
    EXPECT_THROW(op_kind_from_name("convolve"), UnsupportedOperation);
    EXPECT_EQ(op_kind_from_name("softmax-rows"), OpKind::softmax_rows);
    Graph g;
    Var a = g.constant(Tensor({1, 1}));
    std::vector<Var> in{a};
    EXPECT_THROW(g.apply(OpKind::leaf, in), UnsupportedOperation);
    EXPECT_EQ(g.value(g.apply(op_kind_from_name("relu"), in)).numel(), 1u);
}

TEST(Graph, NodesAreTopologicallyOrdered) {
    Rng rng(3);
    Graph g;
    Var x = g.parameter(make_parameter(random_matrix(3, 4, rng)));
    Var w = g.parameter(make_parameter(random_matrix(4, 2, rng)));
    Var y = g.softmax_rows(g.gelu(g.matmul(x, w)));
    g.cross_entropy(y, std::vector<std::size_t>{0, 1, 1});
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t in : g.node(Var{i}).inputs) EXPECT_LT(in, i);
}

TEST(Backward, SquareHasAnalyticDerivative) {
    auto x = make_parameter(Tensor::matrix(1, 1, {3.0}));
    Graph g;
    Var xv = g.parameter(x);
    g.backward(g.matmul(xv, xv));
    EXPECT_DOUBLE_EQ(x->grad()[0], 6.0);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
    auto x = make_parameter(Tensor::matrix(1, 1, {3.0}));
    auto y = make_parameter(Tensor::matrix(1, 1, {-4.0}));
    Graph g;
    Var xv = g.parameter(x);
    g.parameter(y);
    g.backward(g.matmul(xv, xv));
    ASSERT_TRUE(y->has_grad());
    EXPECT_EQ(y->grad()[0], 0.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
    auto x = make_parameter(Tensor::matrix(1, 1, {3.0}));
    Graph g;
    Var xv = g.parameter(x);
    Var loss = g.matmul(xv, xv);
    g.backward(loss);
    g.backward(loss);
    EXPECT_DOUBLE_EQ(x->grad()[0], 12.0);
}

TEST(Backward, RejectsNonScalarAndDetachedLoss) {
    auto x = make_parameter(Tensor::matrix(2, 1, {1.0, 2.0}));
    Graph g;
    Var xv = g.parameter(x);
    EXPECT_THROW(g.backward(g.scale(xv, 2.0)), GraphError);
    Var c = g.constant(Tensor::matrix(1, 1, {5.0}));
    EXPECT_THROW(g.backward(g.scale(c, 2.0)), GraphError);
}

// Every differentiable op, one at a time, against central differences.
TEST(Backward, EachOperationMatchesFiniteDifferences) {
    Rng rng(11);
    ParameterStore ps;
    auto& a = ps.add("a", random_matrix(3, 4, rng));
    auto& b = ps.add("b", random_matrix(4, 5, rng));
    auto& c = ps.add("c", random_matrix(3, 4, rng));
    auto& gain = ps.add("gain", random_matrix(1, 4, rng));
    auto& bias = ps.add("bias", random_matrix(1, 4, rng));
    auto& table = ps.add("table", random_matrix(6, 4, rng));
    const std::vector<std::size_t> ids{5, 0, 2, 2};
    const std::vector<std::size_t> targets{1, 4, 0, 2, 3, 3, 1};

    auto build = [&](Graph& g) {
        Var A = g.parameter(a), B = g.parameter(b), C = g.parameter(c);
        Var h = g.layer_norm(g.add(g.mul(A, C), g.parameter(bias)), g.parameter(gain), g.parameter(bias));
        Var e = g.embedding(g.parameter(table), ids);                 // [4,4]
        Var stacked = g.concat({g.gelu(h), g.relu(e)}, 0);           // [7,4]
        Var t = g.transpose(g.slice(stacked, 1, 1, 4));              // [3,7]
        Var back = g.transpose(g.l2_normalize_rows(t));              // [7,3]
        Var wide = g.concat({back, g.slice(stacked, 1, 0, 2)}, 1);   // [7,5]
        Var sb = g.matmul(stacked, B);                                // [7,5]
        Var mixed = g.matmul(g.matmul(g.softmax_rows(sb), g.scale(g.transpose(B), 0.7)), B);
        Var logits = g.add(mixed, g.scale(sb, 0.5));
        return g.cross_entropy(g.add(logits, wide), targets);
    };
    auto r = oracle::check_gradients(
        ps,
        [&] {
            Graph g(false);
            return g.value(build(g)).item();
        },
        [&] {
            Graph g;
            g.backward(build(g));
        });
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Backward, RandomThreeLayerNetworkMatchesFiniteDifferences) {
    Rng rng(2024);
    for (int trial = 0; trial < 3; ++trial) {
        ParameterStore ps;
        layers::ParamSpecs specs;
        layers::linear_spec(specs, "l1", 6, 10);
        layers::linear_spec(specs, "l2", 10, 8);
        layers::linear_spec(specs, "l3", 8, 5);
        ps = layers::materialize(specs, rng);
        Tensor x = random_matrix(4, 6, rng);
        const std::vector<std::size_t> y{0, 3, 4, 1};
        auto build = [&](Graph& g) {
            layers::Context ctx(g, ps);
            Var h = layers::activate(ctx, layers::linear(ctx, "l1", g.constant(x)));
            h = layers::activate(ctx, layers::linear(ctx, "l2", h));
            return g.cross_entropy(layers::linear(ctx, "l3", h), y);
        };
        auto r = oracle::check_gradients(
            ps, [&] { Graph g(false); return g.value(build(g)).item(); },
            [&] { Graph g; g.backward(build(g)); });
        EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
        EXPECT_EQ(r.checked, ps.element_count());
    }
}

TEST(Backward, IsBitwiseDeterministic) {
    auto run = [] {
        Rng rng(99);
        ParameterStore ps;
        layers::ParamSpecs specs;
        layers::linear_spec(specs, "l1", 5, 7);
        layers::layer_norm_spec(specs, "ln", 7);
        ps = layers::materialize(specs, rng);
        Graph g;
        layers::Context ctx(g, ps);
        Var h = layers::layer_norm(ctx, "ln", layers::linear(ctx, "l1", g.constant(random_matrix(3, 5, rng))));
        g.backward(g.cross_entropy(h, std::vector<std::size_t>{1, 2, 6}));
        std::vector<double> all;
        for (const auto& [_, p] : ps) all.insert(all.end(), p->grad().begin(), p->grad().end());
        return all;
    };
    EXPECT_EQ(run(), run());
}

TEST(CrossEntropy, IgnoredTargetsDoNotContribute) {
    Graph g;
    Var logits = g.constant(Tensor::matrix(2, 2, {0, 0, 5, -5}));
    const double full = g.value(g.cross_entropy(logits, std::vector<std::size_t>{0, 0})).item();
    const double first = g.value(g.cross_entropy(logits, std::vector<std::size_t>{0, 9}, 9)).item();
    EXPECT_NEAR(first, std::log(2.0), 1e-15);
    EXPECT_LT(full, first);
}

TEST(Dropout, KeepsExpectationAndIsSeeded) {
    Rng r1(5), r2(5);
    Graph g;
    Var x = g.constant(Tensor({1, 20000}, 1.0));
    const Tensor& a = g.value(g.dropout(x, 0.1, r1));
    const Tensor& b = g.value(g.dropout(x, 0.1, r2));
    EXPECT_EQ(a.values(), b.values());
    double mean = 0.0;
    for (double v : a.data()) mean += v;
    EXPECT_NEAR(mean / 20000.0, 1.0, 0.02);
}

TEST(Optimizer, SgdStepMatchesDefinition) {
    auto w = make_parameter(Tensor::matrix(1, 1, {1.0}));
    w->zero_grad();
    w->grad()[0] = 0.5;
    Optimizer opt({Algorithm::sgd, 0.1});
    std::vector<Parameter> ps{w};
    opt.step(ps);
    EXPECT_DOUBLE_EQ((*w)[0], 0.95);
    EXPECT_EQ(w->grad()[0], 0.0);
}

TEST(Optimizer, SgdZeroGradientLeavesWeight) {
    auto w = make_parameter(Tensor::matrix(1, 2, {1.0, -3.0}));
    w->zero_grad();
    Optimizer opt({Algorithm::sgd, 0.1});
    std::vector<Parameter> ps{w};
    opt.step(ps);
    EXPECT_EQ(w->values(), (std::vector<double>{1.0, -3.0}));
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
    // t=1: mhat = g, vhat = g^2, so |dw| = lr * |g| / (|g| + eps).
    for (double g : {0.5, -3.0, 1e-3}) {
        auto w = make_parameter(Tensor::matrix(1, 1, {2.0}));
        w->zero_grad();
        w->grad()[0] = g;
        const double lr = 1e-3;
        Optimizer opt({Algorithm::adam, lr});
        std::vector<Parameter> ps{w};
        opt.step(ps);
        const double moved = std::abs((*w)[0] - 2.0);
        EXPECT_GE(moved, 0.9 * lr);
        EXPECT_LE(moved, 1.0 * lr);
        EXPECT_NEAR(moved, lr * std::abs(g) / (std::abs(g) + 1e-8), 1e-15);
    }
}

TEST(Optimizer, MissingGradientIsAnError) {
    auto w = make_parameter(Tensor::matrix(1, 1, {1.0}));
    Optimizer opt;
    std::vector<Parameter> ps{w};
    EXPECT_THROW(opt.step(ps), OptimizerError);
}

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor t({2, 3});
    t.zero_grad();
    EXPECT_EQ(t.grad().size(), t.numel());
}
