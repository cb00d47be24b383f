#include <gtest/gtest.h>

#include <cmath>

#include "gradshift/rng.hpp"
#include "gradshift/tape.hpp"
#include "test_support.hpp"

using namespace gradshift;
using namespace gradshift::diff;
using gradshift::testing::central_difference;
using gradshift::testing::random_array;
using gradshift::testing::relative_error;

TEST(Forward, ReluClampsNegatives) {
    Tape t;
    auto y = relu(t.input(Array::vector({-1.0, 2.0})));
    EXPECT_EQ(y.value(), Array::vector({0.0, 2.0}));
}

TEST(Forward, MatmulMatchesHandProduct) {
    Tape t;
    auto a = t.input(Array::matrix({{1, 2, 3}, {4, 5, 6}}));
    auto b = t.input(Array::matrix({{1}, {0}, {-1}}));
    auto c = matmul(a, b);
    // [1-3, 4-6]
    EXPECT_EQ(c.value(), Array::matrix({{-2}, {-2}}));
}

TEST(Forward, MeanOfThree) {
    Tape t;
    EXPECT_DOUBLE_EQ(mean(t.input(Array::vector({1, 2, 3}))).value().item(), 2.0);
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
    Tape t;
    auto a = t.input(Array::zeros({2, 3}));
    auto b = t.input(Array::zeros({2, 1}));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[2,1]"), std::string::npos);
    }
    EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Forward, NonFiniteInputRejected) {
    Tape t;
    EXPECT_THROW(t.input(Array::vector({1.0, NAN})), std::domain_error);
    EXPECT_THROW(t.parameter("w", Array::vector({INFINITY})), std::domain_error);
}

TEST(Backward, PowerRule) {
    Tape t;
    auto x = t.parameter("x", Array::scalar(3.0));
    auto y = square(x);
    auto g = t.backward(y, {"x"});
    EXPECT_DOUBLE_EQ(g.at("x").item(), 6.0);
}

TEST(Backward, ReluFlatOnNegatives) {
    Tape t;
    auto x = t.parameter("x", Array::scalar(-1.0));
    auto g = t.backward(relu(x), {"x"});
    EXPECT_EQ(g.at("x").item(), 0.0);
}

TEST(Backward, ReluSubgradientAtZeroIsZero) {
    Tape t;
    auto x = t.parameter("x", Array::scalar(0.0));
    EXPECT_EQ(t.backward(relu(x), {"x"}).at("x").item(), 0.0);
}

TEST(Backward, Errors) {
    Tape t;
    auto x = t.parameter("x", Array::vector({1.0, 2.0}));
    auto y = square(x);
    EXPECT_THROW(t.backward(y, {"x"}), std::invalid_argument);
    auto s = sum(y);
    EXPECT_THROW(t.backward(s, {"nope"}), std::invalid_argument);
    const auto before = t.size();
    t.backward(s, {"x"});
    EXPECT_EQ(t.size(), before);
}

TEST(Backward, UnreachedParameterGetsZeros) {
    Tape t;
    auto x = t.parameter("x", Array::scalar(2.0));
    t.parameter("unused", Array::vector({1.0, 1.0}));
    auto g = t.backward(square(x), {"x", "unused"});
    EXPECT_EQ(g.at("unused"), Array::zeros({2}));
}

namespace {

// Mean-squared error of a 3-layer tanh perceptron; returns loss and grads.
struct MlpCase {
    Array x, y, w0, b0, w1, b1, w2, b2;
};

MlpCase random_mlp_case(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = 5, d = 3, h1 = 4, h2 = 3, k = 2;
    return {random_array(rng, {n, d}),  random_array(rng, {n, k}),  random_array(rng, {d, h1}),
            random_array(rng, {h1}),    random_array(rng, {h1, h2}), random_array(rng, {h2}),
            random_array(rng, {h2, k}), random_array(rng, {k})};
}

Var layer(Var x, Var w, Var b) {
    auto z = matmul(x, w);
    return add(z, broadcast(b, z.shape()));
}

Var mlp_mse(Tape& t, const MlpCase& c, std::vector<Var>& params) {
    params = {t.parameter("w0", c.w0), t.parameter("b0", c.b0), t.parameter("w1", c.w1),
              t.parameter("b1", c.b1), t.parameter("w2", c.w2), t.parameter("b2", c.b2)};
    auto h = tanh(layer(t.input(c.x), params[0], params[1]));
    h = tanh(layer(h, params[2], params[3]));
    auto out = layer(h, params[4], params[5]);
    return mean(square(sub(out, t.constant(c.y))));
}

}  // namespace

TEST(Backward, ThreeLayerPerceptronMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        MlpCase c = random_mlp_case(seed);
        Tape t;
        std::vector<Var> params;
        auto loss = mlp_mse(t, c, params);
        auto grads = t.backward(loss, std::span<const Var>(params));
        Array* fields[] = {&c.w0, &c.b0, &c.w1, &c.b1, &c.w2, &c.b2};
        for (std::size_t p = 0; p < 6; ++p) {
            auto f = [&](const Array& v) {
                MlpCase cc = c;
                Array* ff[] = {&cc.w0, &cc.b0, &cc.w1, &cc.b1, &cc.w2, &cc.b2};
                *ff[p] = v;
                Tape tt;
                std::vector<Var> ps;
                return mlp_mse(tt, cc, ps).value().item();
            };
            auto fd = central_difference(f, *fields[p]);
            EXPECT_LT(relative_error(grads[p], fd), 1e-5) << "seed " << seed << " param " << p;
        }
    }
}

// Every primitive against central differences on 100 random instances. The
// scalar output is sum(op(x) * r) for a random weighting r.
TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
    struct Case {
        const char* name;
        double lo, hi;
        bool binary;
        std::function<Var(Var, Var)> op;
    };
    const std::vector<Case> cases = {
        {"add", -1, 1, true, [](Var a, Var b) { return add(a, b); }},
        {"sub", -1, 1, true, [](Var a, Var b) { return sub(a, b); }},
        {"mul", -1, 1, true, [](Var a, Var b) { return mul(a, b); }},
        {"div", 0.5, 2, true, [](Var a, Var b) { return div(a, b); }},
        {"matmul", -1, 1, true, [](Var a, Var b) { return matmul(a, transpose(b)); }},
        {"relu", -1, 1, false, [](Var a, Var) { return relu(a); }},
        {"tanh", -2, 2, false, [](Var a, Var) { return tanh(a); }},
        {"sigmoid", -3, 3, false, [](Var a, Var) { return sigmoid(a); }},
        {"exp", -1, 1, false, [](Var a, Var) { return exp(a); }},
        {"log", 0.5, 2, false, [](Var a, Var) { return log(a); }},
        {"square", -1, 1, false, [](Var a, Var) { return square(a); }},
        {"sqrt", 0.5, 2, false, [](Var a, Var) { return sqrt(a); }},
        {"sum_rows", -1, 1, false, [](Var a, Var) { return sum(a, 1); }},
        {"mean_cols", -1, 1, false, [](Var a, Var) { return mean(a, 0); }},
        {"mean_all", -1, 1, false, [](Var a, Var) { return broadcast(mean(a), {2, 2}); }},
        {"concat0", -1, 1, true, [](Var a, Var b) { return concat(a, b, 0); }},
        {"concat1", -1, 1, true, [](Var a, Var b) { return concat(a, b, 1); }},
        {"slice", -1, 1, false, [](Var a, Var) { return slice(a, 1, 1, 3); }},
        {"broadcast", -1, 1, false, [](Var a, Var) { return broadcast(slice(a, 0, 0, 1), {4, 3}); }},
        {"log_softmax", -2, 2, false, [](Var a, Var) { return log_softmax(a); }},
        {"clamp_max", -1, 1, false, [](Var a, Var) { return clamp_max(a, 0.3); }},
        {"affine", -1, 1, false, [](Var a, Var) { return affine(a, -2.5, 0.7); }},
    };
    for (const auto& c : cases) {
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(derive_seed(seed, {7}));
            Array a = random_array(rng, {3, 3}, c.lo, c.hi);
            Array b = random_array(rng, {3, 3}, c.lo, c.hi);
            // keep kinks out of the finite-difference stencil
            for (auto* arr : {&a, &b})
                for (auto& v : arr->data())
                    if (std::abs(v) < 1e-3 || std::abs(v - 0.3) < 1e-3) v += 0.01;
            auto eval = [&](const Array& av, const Array& bv, bool record, std::vector<Array>* grads) {
                Tape t;
                auto pa = t.parameter("a", av);
                auto pb = t.parameter("b", bv);
                auto y = c.op(pa, pb);
                Rng weights(seed + 99);
                auto r = t.constant(random_array(weights, y.shape()));
                auto s = sum(mul(y, r));
                if (record) {
                    auto g = t.backward(s, {"a", "b"});
                    grads->push_back(g.at("a"));
                    grads->push_back(g.at("b"));
                }
                return s.value().item();
            };
            std::vector<Array> grads;
            eval(a, b, true, &grads);
            auto fa = central_difference([&](const Array& v) { return eval(v, b, false, nullptr); }, a);
            EXPECT_LT(relative_error(grads[0], fa), 1e-5) << c.name << " seed " << seed;
            if (c.binary) {
                auto fb = central_difference([&](const Array& v) { return eval(a, v, false, nullptr); }, b);
                EXPECT_LT(relative_error(grads[1], fb), 1e-5) << c.name << " seed " << seed;
            }
        }
    }
}

TEST(InputGradient, LinearCriticGivesWeights) {
    Tape t;
    auto x = t.input(Array::matrix({{0.3, -1.2, 2.0}}));
    auto w = t.parameter("w", Array::matrix({{0.5}, {-2.0}, {1.5}}));
    auto f = sum(matmul(x, w));
    auto g = t.input_gradient(f, x);
    EXPECT_EQ(g.value(), Array::matrix({{0.5, -2.0, 1.5}}));
}

TEST(InputGradient, HalfSquaredNormGivesInput) {
    Tape t;
    Array xv = Array::matrix({{0.3, -1.2}, {2.0, 0.25}});
    auto x = t.input(xv);
    auto f = scale(sum(square(x)), 0.5);
    EXPECT_EQ(t.input_gradient(f, x).value(), xv);
}

TEST(InputGradient, NestingLimitIsOne) {
    Tape t;
    auto x = t.input(Array::matrix({{1.0, 2.0}}));
    auto g = t.input_gradient(sum(square(x)), x);
    try {
        t.input_gradient(sum(square(g)), x);
        FAIL() << "expected nesting error";
    } catch (const std::logic_error& e) {
        EXPECT_STREQ(e.what(), "second-order nesting limit is one");
    }
}

TEST(InputGradient, RequiresInputLeaf) {
    Tape t;
    auto w = t.parameter("w", Array::matrix({{1.0}}));
    EXPECT_THROW(t.input_gradient(sum(w), w), std::invalid_argument);
}

namespace {

// Closed form of the penalty for f(x) = tanh(x W1 + b1) W2 + b2, written
// without the tape: grad_x f = W1 diag(1 - a^2) W2.
double penalty_closed_form(const Array& x, const Array& w1, const Array& b1, const Array& w2) {
    const std::size_t n = x.shape()[0], d = x.shape()[1], h = w1.shape()[1];
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> slope(h);
        for (std::size_t j = 0; j < h; ++j) {
            double z = b1[j];
            for (std::size_t p = 0; p < d; ++p) z += x(i, p) * w1(p, j);
            const double a = std::tanh(z);
            slope[j] = (1.0 - a * a) * w2(j, 0);
        }
        double sq = 0.0;
        for (std::size_t p = 0; p < d; ++p) {
            double gp = 0.0;
            for (std::size_t j = 0; j < h; ++j) gp += w1(p, j) * slope[j];
            sq += gp * gp;
        }
        const double dev = std::sqrt(sq + 1e-12) - 1.0;
        total += dev * dev;
    }
    return total / static_cast<double>(n);
}

}  // namespace

TEST(InputGradient, PenaltyParameterGradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(derive_seed(seed, {3}));
        Array x = random_array(rng, {6, 3});
        Array w1 = random_array(rng, {3, 5});
        Array b1 = random_array(rng, {5});
        Array w2 = random_array(rng, {5, 1});
        Tape t;
        auto xi = t.input(x);
        auto pw1 = t.parameter("w1", w1);
        auto pb1 = t.parameter("b1", b1);
        auto pw2 = t.parameter("w2", w2);
        auto f = sum(matmul(tanh(layer(xi, pw1, pb1)), pw2));
        auto g = t.input_gradient(f, xi);
        auto norm = sqrt(affine(sum(square(g), 1), 1.0, 1e-12));
        auto gp = mean(square(affine(norm, 1.0, -1.0)));
        EXPECT_NEAR(gp.value().item(), penalty_closed_form(x, w1, b1, w2), 1e-12);
        auto grads = t.backward(gp, {"w1", "b1", "w2"});
        auto fd_w1 = central_difference([&](const Array& v) { return penalty_closed_form(x, v, b1, w2); }, w1);
        auto fd_b1 = central_difference([&](const Array& v) { return penalty_closed_form(x, w1, v, w2); }, b1);
        auto fd_w2 = central_difference([&](const Array& v) { return penalty_closed_form(x, w1, b1, v); }, w2);
        EXPECT_LT(relative_error(grads.at("w1"), fd_w1), 1e-4) << seed;
        EXPECT_LT(relative_error(grads.at("b1"), fd_b1), 1e-4) << seed;
        EXPECT_LT(relative_error(grads.at("w2"), fd_w2), 1e-4) << seed;
    }
}

TEST(Replay, ReproducesRecordedValuesBitExactly) {
    MlpCase c = random_mlp_case(11);
    Tape t;
    std::vector<Var> params;
    auto loss = mlp_mse(t, c, params);
    NodeId x = 0;
    while (t.node(x).leaf != LeafKind::Input) ++x;
    t.input_gradient(loss, Var{&t, x});
    auto vals = t.replay();
    ASSERT_EQ(vals.size(), t.size());
    for (NodeId i = 0; i < t.size(); ++i) EXPECT_EQ(vals[i], t.node(i).value) << i;
}

TEST(Replay, IdenticalInputsGiveIdenticalGradients) {
    MlpCase c = random_mlp_case(5);
    Tape t1, t2;
    std::vector<Var> p1, p2;
    auto l1 = mlp_mse(t1, c, p1);
    auto l2 = mlp_mse(t2, c, p2);
    EXPECT_EQ(l1.value(), l2.value());
    auto g1 = t1.backward(l1, std::span<const Var>(p1));
    auto g2 = t2.backward(l2, std::span<const Var>(p2));
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

TEST(Tape, NodesReferenceEarlierNodes) {
    MlpCase c = random_mlp_case(1);
    Tape t;
    std::vector<Var> params;
    mlp_mse(t, c, params);
    for (NodeId i = 0; i < t.size(); ++i) {
        const auto& n = t.node(i);
        for (int j = 0; j < arity(n.op); ++j) EXPECT_LT(n.in[j], i);
    }
}

TEST(RngFill, Deterministic) {
    auto a = rng_fill(42, {3, 4}, Normal{0.0, 1.0});
    auto b = rng_fill(42, {3, 4}, Normal{0.0, 1.0});
    EXPECT_EQ(a, b);
    auto c = rng_fill(43, {3, 4}, Normal{0.0, 1.0});
    EXPECT_FALSE(a == c);
    EXPECT_EQ(rng_fill(7, {5}, Uniform{-1, 1}), rng_fill(7, {5}, Uniform{-1, 1}));
}

TEST(RngFill, ZeroVarianceNormalIsZero) { EXPECT_EQ(rng_fill(9, {10}, Normal{0.0, 0.0}), Array::zeros({10})); }

TEST(RngFill, NormalMeanConcentrates) {
    auto a = rng_fill(2024, {100000}, Normal{0.0, 1.0});
    double m = 0.0;
    for (double v : a.data()) m += v;
    m /= 1e5;
    EXPECT_LT(std::abs(m), 0.02);
}

TEST(RngFill, RejectsBadParameters) {
    EXPECT_THROW(rng_fill(1, {2}, Normal{0.0, -1.0}), std::invalid_argument);
    EXPECT_THROW(rng_fill(1, {2}, Uniform{1.0, 0.0}), std::invalid_argument);
}

TEST(RngFill, UniformStaysInRange) {
    auto a = rng_fill(3, {1000}, Uniform{-0.5, 0.25});
    for (double v : a.data()) {
        EXPECT_GE(v, -0.5);
        EXPECT_LT(v, 0.25);
    }
}
