#include <gtest/gtest.h>

#include <random>

#include "strokesight/autodiff.hpp"
#include "test_util.hpp"

using namespace strokesight;
using namespace strokesight::ad;

namespace {

Parameter random_param(const std::string& name, Shape shape, std::mt19937_64& rng, double scale = 1.0)
{
    Parameter p(name, std::move(shape));
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : p.value) v = n(rng);
    return p;
}

// Contracts an op output with fixed random weights so every output element
// carries a distinct upstream gradient.
Var contract(Graph& g, Var y, std::uint64_t seed)
{
    std::mt19937_64 rng(seed ^ 0xabcdefULL);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> w(y.size());
    for (auto& v : w) v = n(rng);
    return sum(mul(y, g.constant(y.shape(), w)));
}

} // namespace

TEST(Autodiff, ClosedFormValues)
{
    Graph g;
    const auto s = softmax(g.constant({1, 3}, {0, 0, 0}));
    for (double v : s.value()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
    EXPECT_EQ(sigmoid(g.constant({1}, {0.0})).item(), 0.5);
    EXPECT_EQ(ad::tanh(g.constant({1}, {0.0})).item(), 0.0);
    EXPECT_EQ(relu(g.constant({2}, {-1.0, 2.0})).value()[0], 0.0);
}

TEST(Autodiff, SumGradientIsOnes)
{
    Graph g;
    auto x = g.leaf({4}, {1, -2, 3, 0.5});
    g.backward(sum(x));
    for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Autodiff, SquareGradient)
{
    Graph g;
    auto x = g.leaf({2}, {1, 2});
    g.backward(sum(mul(x, x)));
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Autodiff, BackwardTwiceIsAnError)
{
    Graph g;
    auto x = g.leaf({2}, {1, 2});
    auto loss = sum(x);
    g.backward(loss);
    EXPECT_THROW(g.backward(loss), Error);
}

TEST(Autodiff, BackwardNeedsScalar)
{
    Graph g;
    auto x = g.leaf({2}, {1, 2});
    EXPECT_THROW(g.backward(x), Error);
}

TEST(Autodiff, ParameterGradientsAccumulate)
{
    Parameter p("w", {2});
    p.value = {3.0, -1.0};
    for (int rep = 0; rep < 2; ++rep) {
        Graph g;
        auto w = g.param(p);
        g.backward(sum(mul(w, w)));
    }
    EXPECT_EQ(p.grad[0], 12.0);
    EXPECT_EQ(p.grad[1], -4.0);
}

TEST(Autodiff, ShapeMismatchesRejected)
{
    Graph g;
    auto a = g.constant({2, 3}, std::vector<double>(6, 1.0));
    auto b = g.constant({2, 2}, std::vector<double>(4, 1.0));
    EXPECT_THROW(add(a, b), Error);
    EXPECT_THROW(matmul(a, b), Error);
    EXPECT_THROW(add_bias(a, g.constant({2}, {1, 1})), Error);
    EXPECT_THROW(slice(a, 1, 2, 4), Error);
    EXPECT_THROW(reshape(a, {5}), Error);
}

TEST(Autodiff, FiniteCheckSurfacesNaN)
{
    Graph g;
    auto x = g.constant({1}, {-1.0});
    auto bad = g.constant({1}, {std::numeric_limits<double>::quiet_NaN()});
    g.set_finite_check(true);
    EXPECT_NO_THROW(scale(x, 2.0));
    EXPECT_THROW(add(x, bad), Error);
}

TEST(Autodiff, SoftmaxRowsAreStrictlyPositiveSimplices)
{
    std::mt19937_64 rng(3);
    for (int seed = 0; seed < 100; ++seed) {
        auto p = random_param("x", {5, 4}, rng, 20.0);
        Graph g;
        auto s = softmax(g.param(p));
        for (std::size_t r = 0; r < 5; ++r) {
            double total = 0.0;
            for (std::size_t k = 0; k < 4; ++k) {
                EXPECT_GT(s.value()[r * 4 + k], 0.0);
                total += s.value()[r * 4 + k];
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(DilatedConv, DeltaKernelIsIdentityOnValidRegion)
{
    std::mt19937_64 rng(5);
    for (std::size_t d : {1u, 2u, 4u}) {
        auto x = random_param("x", {2, 9, 3}, rng);
        Parameter w("w", {3, 3, 3});
        for (std::size_t c = 0; c < 3; ++c) w.value[0 * 9 + c * 3 + c] = 1.0;  // tap 0 = I
        Parameter b("b", {3});
        Graph g;
        auto y = dilated_conv1d(g.param(x), g.param(w), g.param(b), d, 0);
        ASSERT_EQ(y.shape(), (Shape{2, 9, 3}));
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], x.value[i]);
    }
}

TEST(DilatedConv, MatchesDirectSum)
{
    // y[t] = b + sum_i w_i x[t + offset - i d], zero outside the sequence.
    std::mt19937_64 rng(6);
    const std::size_t T = 11, K = 3, d = 2, off = 2;
    auto x = random_param("x", {1, T, 1}, rng);
    auto w = random_param("w", {K, 1, 1}, rng);
    Parameter b("b", {1});
    b.value = {0.25};
    Graph g;
    auto y = dilated_conv1d(g.param(x), g.param(w), g.param(b), d, off);
    for (std::size_t t = 0; t < T; ++t) {
        double expect = 0.25;
        for (std::size_t i = 0; i < K; ++i) {
            const auto src = static_cast<std::ptrdiff_t>(t + off) - static_cast<std::ptrdiff_t>(i * d);
            if (src >= 0 && src < static_cast<std::ptrdiff_t>(T)) expect += w.value[i] * x.value[static_cast<std::size_t>(src)];
        }
        EXPECT_NEAR(y.value()[t], expect, 1e-14);
    }
}

// ---------------------------------------------------------------------------
// Per-op gradient property: reverse mode vs central differences on random
// inputs, 100 seeds per op.

namespace {

struct OpCase {
    const char* name;
    std::vector<Shape> inputs;
    std::function<Var(Graph&, std::vector<Var>&)> apply;
};

std::vector<OpCase> op_cases()
{
    static const std::vector<int> labels = {2, 0, 1};
    static const std::vector<double> targets = {1.0, 0.0, 0.3};
    static const std::vector<int> picks = {1, 3, 0};
    return {
        {"matmul", {{3, 4}, {4, 2}}, [](Graph&, std::vector<Var>& v) { return matmul(v[0], v[1]); }},
        {"add", {{3, 4}, {3, 4}}, [](Graph&, std::vector<Var>& v) { return add(v[0], v[1]); }},
        {"sub", {{3, 4}, {3, 4}}, [](Graph&, std::vector<Var>& v) { return sub(v[0], v[1]); }},
        {"mul", {{3, 4}, {3, 4}}, [](Graph&, std::vector<Var>& v) { return mul(v[0], v[1]); }},
        {"scale", {{5}}, [](Graph&, std::vector<Var>& v) { return scale(v[0], -1.7); }},
        {"add_bias", {{2, 3, 4}, {4}}, [](Graph&, std::vector<Var>& v) { return add_bias(v[0], v[1]); }},
        {"sigmoid", {{3, 4}}, [](Graph&, std::vector<Var>& v) { return sigmoid(v[0]); }},
        {"tanh", {{3, 4}}, [](Graph&, std::vector<Var>& v) { return ad::tanh(v[0]); }},
        {"relu", {{3, 4}}, [](Graph&, std::vector<Var>& v) { return relu(v[0]); }},
        {"softmax", {{3, 4}}, [](Graph&, std::vector<Var>& v) { return softmax(v[0]); }},
        {"concat", {{2, 3}, {2, 2}}, [](Graph&, std::vector<Var>& v) { return concat({v[0], v[1]}, 1); }},
        {"slice", {{2, 5, 3}}, [](Graph&, std::vector<Var>& v) { return slice(v[0], 1, 1, 4); }},
        {"reshape", {{2, 6}}, [](Graph&, std::vector<Var>& v) { return reshape(v[0], {3, 4}); }},
        {"mean_over_axis", {{2, 5, 3}}, [](Graph&, std::vector<Var>& v) { return mean_over_axis(v[0], 1); }},
        {"pick", {{3, 4}}, [](Graph&, std::vector<Var>& v) { return pick(v[0], picks); }},
        {"conv_causal", {{2, 7, 3}, {3, 3, 2}, {2}},
         [](Graph&, std::vector<Var>& v) { return dilated_conv1d(v[0], v[1], v[2], 2, 0); }},
        {"conv_centred", {{2, 7, 3}, {3, 3, 2}, {2}},
         [](Graph&, std::vector<Var>& v) { return dilated_conv1d(v[0], v[1], v[2], 1, 1); }},
        {"softmax_cross_entropy", {{3, 3}},
         [](Graph&, std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); }},
        {"sigmoid_bce", {{3, 1}}, [](Graph&, std::vector<Var>& v) { return sigmoid_bce(v[0], targets); }},
    };
}

} // namespace

TEST(AutodiffProperty, EveryOpMatchesCentralDifferences)
{
    for (const auto& op : op_cases()) {
        std::size_t skipped = 0, checked = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            std::mt19937_64 rng(seed * 7919 + 1);
            std::vector<Parameter> params;
            for (std::size_t i = 0; i < op.inputs.size(); ++i)
                params.push_back(random_param("in" + std::to_string(i), op.inputs[i], rng));
            ParamRefs refs;
            for (auto& p : params) refs.push_back(&p);
            auto build = [&](Graph& g) {
                std::vector<Var> vars;
                for (auto& p : params) vars.push_back(g.param(p));
                return contract(g, op.apply(g, vars), seed);
            };
            const auto rep = grad_check(build, refs);
            EXPECT_LT(rep.max_rel_error, 1e-4) << op.name << " seed " << seed;
            skipped += rep.skipped_kinks;
            checked += rep.checked;
        }
        EXPECT_GT(checked, 0u) << op.name;
        // Random normal inputs sit at least 1e-4 from a kink almost surely.
        EXPECT_LT(skipped, checked / 100 + 1) << op.name;
    }
}

TEST(GradCheck, LinearModelIsExactToRoundoff)
{
    std::mt19937_64 rng(10);
    auto w = random_param("w", {6, 2}, rng);
    auto b = random_param("b", {2}, rng);
    std::vector<double> xs(8 * 6);
    for (auto& v : xs) v = std::normal_distribution<double>(0, 1)(rng);
    auto build = [&](Graph& g) {
        auto y = add_bias(matmul(g.constant({8, 6}, xs), g.param(w)), g.param(b));
        return contract(g, y, 3);
    };
    const auto rep = grad_check(build, {&w, &b});
    EXPECT_LT(rep.max_rel_error, 1e-10);
    EXPECT_EQ(rep.checked, 14u);
}

TEST(GradCheck, DetectsAWrongGradient)
{
    // A deliberately broken op: forward 2x, backward claims 3x.
    Parameter p("x", {3});
    p.value = {0.5, -1.0, 2.0};
    auto build = [&](Graph& g) {
        auto x = g.param(p);
        std::vector<double> out(3);
        for (int i = 0; i < 3; ++i) out[i] = 2.0 * x.value()[i];
        const auto ix = x.id(), io = g.size();
        auto y = g.push({3}, out, g.needs_grad({x}), [ix, io](Graph& gr) {
            for (int i = 0; i < 3; ++i) gr.grad_of(ix)[i] += 3.0 * gr.node(io).grad[i];
        });
        return sum(y);
    };
    const auto rep = grad_check(build, {&p});
    EXPECT_FALSE(rep.passed);
    EXPECT_NEAR(rep.max_rel_error, 1.0 / 3.0, 1e-8);
}

TEST(GradCheck, SkipsEntriesStraddlingReluKink)
{
    Parameter p("x", {2});
    p.value = {5e-5, 1.0};  // first entry within h of the kink
    auto build = [&](Graph& g) { return sum(relu(g.param(p))); };
    const auto rep = grad_check(build, {&p});
    EXPECT_EQ(rep.skipped_kinks, 1u);
    EXPECT_EQ(rep.checked, 1u);
    EXPECT_TRUE(rep.passed);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientZeroDecayLeavesParameters)
{
    std::mt19937_64 rng(1);
    auto p = random_param("p", {4}, rng);
    const auto before = p.value;
    AdamState st;
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    for (int i = 0; i < 5; ++i) adam_step({&p}, st, cfg);
    EXPECT_EQ(p.value, before);
    EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepOnUnitGradient)
{
    // t = 1: m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 -> step lr / (1 + eps).
    Parameter p("p", {1});
    p.value = {0.0};
    p.grad = {1.0};
    AdamState st;
    const AdamConfig cfg;
    adam_step({&p}, st, cfg);
    EXPECT_NEAR(p.value[0], -1e-3 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, WeightDecayIsDecoupled)
{
    // With g = 0 the moment term is 0 and only lr * wd * p remains.
    Parameter p("p", {1});
    p.value = {2.0};
    AdamState st;
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    adam_step({&p}, st, cfg);
    EXPECT_DOUBLE_EQ(p.value[0], 2.0 - 0.01 * 0.1 * 2.0);
}

TEST(Adam, DeterministicAcrossRuns)
{
    auto run = [] {
        std::mt19937_64 rng(77);
        auto w = random_param("w", {3, 3}, rng);
        std::vector<double> xs(9);
        for (auto& v : xs) v = std::normal_distribution<double>(0, 1)(rng);
        AdamState st;
        for (int it = 0; it < 20; ++it) {
            w.zero_grad();
            Graph g;
            g.backward(sum(ad::tanh(matmul(g.constant({3, 3}, xs), g.param(w)))));
            adam_step({&w}, st, {});
        }
        return w.value;
    };
    EXPECT_EQ(run(), run());
}

TEST(ClipGradNorm, RescalesToMaxNorm)
{
    Parameter a("a", {2}), b("b", {1});
    a.grad = {3.0, 0.0};
    b.grad = {4.0};
    EXPECT_DOUBLE_EQ(clip_grad_norm({&a, &b}, 1.0), 5.0);
    EXPECT_NEAR(a.grad[0], 0.6, 1e-15);
    EXPECT_NEAR(b.grad[0], 0.8, 1e-15);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitExact)
{
    strokesight::testing::TempDir dir("ckpt");
    std::mt19937_64 rng(2);
    auto a = random_param("layer.w", {3, 4}, rng);
    auto b = random_param("layer.b", {4}, rng);
    save_checkpoint(dir.path() / "ckpt", {&a, &b});
    Parameter a2("layer.w", {3, 4}), b2("layer.b", {4});
    load_checkpoint(dir.path() / "ckpt", {&b2, &a2});
    EXPECT_EQ(a2.value, a.value);
    EXPECT_EQ(b2.value, b.value);

    const auto index = nlohmann::json::parse(read_file(dir.path() / "ckpt.json"));
    EXPECT_EQ(index["params"][1]["name"], "layer.b");
    EXPECT_EQ(index["params"][1]["offset"], 12);
    EXPECT_EQ(index["params"][0]["shape"], nlohmann::json({3, 4}));
}

TEST(Checkpoint, ShapeOrNameMismatchRejected)
{
    strokesight::testing::TempDir dir("ckpt");
    Parameter a("w", {2, 2});
    save_checkpoint(dir.path() / "c", {&a});
    Parameter wrong_shape("w", {4});
    EXPECT_THROW(load_checkpoint(dir.path() / "c", {&wrong_shape}), Error);
    Parameter wrong_name("v", {2, 2});
    EXPECT_THROW(load_checkpoint(dir.path() / "c", {&wrong_name}), Error);
}
