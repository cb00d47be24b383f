#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradshift/transport.hpp"
#include "test_support.hpp"

using namespace gradshift;

namespace {

// Minimum over all n! permutations of the mean matched distance.
double brute_force_w1(const Array& a, const Array& b) {
    const std::size_t n = a.shape()[0];
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double q = 0.0;
            for (std::size_t j = 0; j < a.shape()[1]; ++j) q += std::pow(a(i, j) - b(perm[i], j), 2);
            s += std::sqrt(q);
        }
        best = std::min(best, s / static_cast<double>(n));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

Array column(const std::vector<double>& v) {
    return Array({v.size(), 1}, std::vector<double>(v));
}

}  // namespace

TEST(W1Exact, TwoPointExamples) {
    EXPECT_DOUBLE_EQ(w1_exact(Array::matrix({{0, 0}, {1, 0}}), Array::matrix({{0, 1}, {1, 1}})).distance, 1.0);
    EXPECT_DOUBLE_EQ(w1_exact(Array::matrix({{0, 0}, {1, 0}}), Array::matrix({{1, 0}, {0, 0}})).distance, 0.0);
    auto r = w1_exact(Array::matrix({{0, 0}, {2, 0}}), Array::matrix({{1, 0}, {3, 0}}));
    EXPECT_DOUBLE_EQ(r.distance, 1.0);
    EXPECT_EQ(r.method, TransportMethod::ExactAssignment);
    EXPECT_EQ(r.assignment, (std::vector<std::size_t>{0, 1}));
}

TEST(W1Sorted, LineExample) {
    auto r = w1_sorted_1d({0.0, 1.0}, {1.0, 2.0});
    EXPECT_DOUBLE_EQ(r.distance, 1.0);
    EXPECT_EQ(r.method, TransportMethod::Sorted1d);
}

TEST(W1Exact, MatchesBruteForceUpToSix) {
    Rng rng(2024);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + trial % 6, d = 1 + trial % 3;
        Array a = gradshift::testing::random_array(rng, {n, d}, -2.0, 2.0);
        Array b = gradshift::testing::random_array(rng, {n, d}, -2.0, 2.0);
        EXPECT_NEAR(w1_exact(a, b).distance, brute_force_w1(a, b), 1e-9) << "trial " << trial;
    }
}

TEST(W1Exact, AgreesWithSortedOnTheLine) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Array a = gradshift::testing::random_array(rng, {32, 1}, -3.0, 3.0);
        Array b = gradshift::testing::random_array(rng, {32, 1}, -1.0, 5.0);
        EXPECT_NEAR(w1_exact(a, b).distance, w1_sorted_1d(a.values(), b.values()).distance, 1e-9);
    }
}

TEST(W1Exact, MetricProperties) {
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        Array a = gradshift::testing::random_array(rng, {12, 2}, -1.0, 1.0);
        Array b = gradshift::testing::random_array(rng, {12, 2}, -1.0, 1.0);
        Array c = gradshift::testing::random_array(rng, {12, 2}, -1.0, 1.0);
        const double ab = w1_exact(a, b).distance, ba = w1_exact(b, a).distance;
        EXPECT_NEAR(ab, ba, 1e-12);
        EXPECT_LE(ab, w1_exact(a, c).distance + w1_exact(c, b).distance + 1e-12);
        EXPECT_NEAR(w1_exact(a, a).distance, 0.0, 1e-12);
    }
}

TEST(W1Exact, AssignmentIsAPermutationAttainingDistance) {
    Rng rng(3);
    Array a = gradshift::testing::random_array(rng, {20, 3}, 0.0, 1.0);
    Array b = gradshift::testing::random_array(rng, {20, 3}, 0.0, 1.0);
    auto r = w1_exact(a, b);
    auto sorted = r.assignment;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], i);
    const Array c = cost_matrix(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < 20; ++i) s += c(i, r.assignment[i]);
    EXPECT_NEAR(s / 20.0, r.distance, 1e-12);
}

TEST(W1Exact, Errors) {
    try {
        w1_exact(Array::matrix({{0.0}, {1.0}}), Array::matrix({{0.0}}));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("resample_to_equal"), std::string::npos);
    }
    EXPECT_THROW(w1_exact(Array::matrix({{0.0, 1.0}}), Array::matrix({{0.0}})), ShapeError);
    Array big = Array::zeros({kExactAssignmentLimit + 1, 1});
    try {
        w1_exact(big, big);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("sinkhorn"), std::string::npos);
    }
}

TEST(WpSorted, MonotoneInP) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto a = gradshift::testing::random_array(rng, {16, 1}, -2.0, 2.0).values();
        auto b = gradshift::testing::random_array(rng, {16, 1}, -1.0, 3.0).values();
        const double w1 = wp_sorted_1d(a, b, 1.0).distance;
        const double w2 = wp_sorted_1d(a, b, 2.0).distance;
        const double w3 = wp_sorted_1d(a, b, 3.0).distance;
        EXPECT_LE(w1, w2 + 1e-12);
        EXPECT_LE(w2, w3 + 1e-12);
    }
    EXPECT_THROW(wp_sorted_1d({0.0}, {1.0}, 0.5), std::invalid_argument);
}

TEST(WpSorted, TranslationGivesShiftForEveryP) {
    std::vector<double> a{0.3, -1.0, 2.5, 0.0}, b;
    for (double v : a) b.push_back(v + 0.7);
    for (double p : {1.0, 2.0, 4.0}) EXPECT_NEAR(wp_sorted_1d(a, b, p).distance, 0.7, 1e-12);
}

TEST(Sinkhorn, IdenticalSetsNearZero) {
    Rng rng(13);
    for (std::size_t n : {5u, 20u, 40u}) {
        Array a = gradshift::testing::random_array(rng, {n, 2}, -1.0, 1.0);
        const double eps = 0.05;
        auto r = sinkhorn(a, a, {eps, 100000, 1e-7});
        EXPECT_TRUE(r.converged);
        EXPECT_LE(r.distance, eps * std::log(static_cast<double>(n)) + 1e-6);
    }
}

TEST(Sinkhorn, CloseToExactAtSmallEpsilon) {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        Array a = gradshift::testing::random_array(rng, {50, 2}, -1.0, 1.0);
        Array b = gradshift::testing::random_array(rng, {50, 2}, 0.0, 2.0);
        const double exact = w1_exact(a, b).distance;
        auto r = sinkhorn(a, b, {0.005 * mean_cost(a, b), 200000, 1e-9});
        EXPECT_NEAR(r.distance, exact, 0.05 * exact);
    }
}

TEST(Sinkhorn, MarginalsAreUniform) {
    Rng rng(19);
    Array a = gradshift::testing::random_array(rng, {30, 3}, -1.0, 1.0);
    Array b = gradshift::testing::random_array(rng, {30, 3}, -1.0, 1.0);
    auto r = sinkhorn(a, b, {0.1, 100000, 1e-10});
    ASSERT_TRUE(r.coupling.has_value());
    const Array& p = *r.coupling;
    for (std::size_t i = 0; i < 30; ++i) {
        double row = 0.0, col = 0.0;
        for (std::size_t j = 0; j < 30; ++j) {
            row += p(i, j);
            col += p(j, i);
        }
        EXPECT_NEAR(row, 1.0 / 30.0, 1e-9);
        EXPECT_NEAR(col, 1.0 / 30.0, 1e-9);
    }
    EXPECT_GE(r.distance, w1_exact(a, b).distance - 1e-12);
}

TEST(Sinkhorn, ReportsNonConvergence) {
    Rng rng(23);
    Array a = gradshift::testing::random_array(rng, {10, 2}, -1.0, 1.0);
    Array b = gradshift::testing::random_array(rng, {10, 2}, -1.0, 1.0);
    auto r = sinkhorn(a, b, {0.001, 2, 1e-15});
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.iterations, 2u);
    EXPECT_THROW(sinkhorn(a, b, {0.0, 10, 1e-9}), std::invalid_argument);
}

TEST(Resample, ShrinksLargerSide) {
    Array a = Array::matrix({{0.0}, {1.0}, {2.0}, {3.0}});
    Array b = Array::matrix({{5.0}, {6.0}});
    auto [ra, rb] = resample_to_equal(a, b, 1);
    EXPECT_EQ(ra.shape()[0], 2u);
    EXPECT_EQ(rb, b);
    for (double v : ra.values()) EXPECT_TRUE(v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0);
    auto [sa, sb] = resample_to_equal(a, b, 1);
    EXPECT_EQ(sa, ra);
}

TEST(ClassConditionalDelta, TranslatedDomainsGiveTranslation) {
    DomainSequence seq;
    Array x0 = column({0.0, 0.2, 1.0, 1.3});
    Array x1 = column({0.5, 0.7, 1.5, 1.8});
    seq.domains.push_back({0, x0, {0, 0, 1, 1}, 2});
    seq.domains.push_back({1, x1, {0, 0, 1, 1}, 2});
    auto rep = class_conditional_delta(seq);
    ASSERT_EQ(rep.per_class.size(), 1u);
    EXPECT_NEAR(rep.per_class[0][0], 0.5, 1e-12);
    EXPECT_NEAR(rep.per_class[0][1], 0.5, 1e-12);
    EXPECT_NEAR(rep.max_delta, 0.5, 1e-12);
}

TEST(ClassConditionalDelta, TakesMaxOverClassesAndSteps) {
    DomainSequence seq;
    seq.domains.push_back({0, Array::matrix({{0, 0}, {5, 5}}), {0, 1}, 2});
    seq.domains.push_back({1, Array::matrix({{0, 1}, {5, 5}}), {0, 1}, 2});
    seq.domains.push_back({2, Array::matrix({{0, 1}, {8, 9}}), {0, 1}, 2});
    auto rep = class_conditional_delta(seq);
    EXPECT_EQ(rep.per_step, (std::vector<double>{1.0, 5.0}));
    EXPECT_EQ(rep.max_delta, 5.0);
}

TEST(ClassConditionalDelta, MissingClassNamesDomainAndLabel) {
    DomainSequence seq;
    seq.domains.push_back({0, Array::matrix({{0.0}, {1.0}}), {0, 1}, 2});
    seq.domains.push_back({1, Array::matrix({{0.0}, {1.0}}), {0, 0}, 2});
    try {
        class_conditional_delta(seq);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("t=1, y=1"), std::string::npos) << e.what();
    }
}

TEST(ClassConditionalDelta, SinkhornEstimatorTracksExact) {
    auto seq = make_shifting_gaussians(3, 120, 0.4, {{0.0, 0.0}, {3.0, 3.0}}, 0.3, 9);
    auto exact = class_conditional_delta(seq, DeltaEstimator::Exact, 1);
    auto approx = class_conditional_delta(seq, DeltaEstimator::Sinkhorn, 1, {0.01, 200000, 1e-9});
    EXPECT_NEAR(approx.max_delta, exact.max_delta, 0.05 * exact.max_delta);
}
