#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "gradshift/domains.hpp"
#include "gradshift/transport.hpp"

using namespace gradshift;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("gradshift_domains_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream(p) << s;
}

double polar_angle_deg(double x, double y) { return std::atan2(y, x) * 180.0 / std::numbers::pi; }

}  // namespace

TEST(RotatingMoons, LinearAngleSchedule) {
    EXPECT_EQ(rotation_angle(0, 6, 120.0), 0.0);
    EXPECT_EQ(rotation_angle(5, 6, 120.0), 120.0);
    EXPECT_DOUBLE_EQ(rotation_angle(1, 6, 120.0), 24.0);
}

TEST(RotatingMoons, FirstDomainUnrotatedLastFullyRotated) {
    // Rotation is applied after sampling, so an unrotated sequence with the
    // same seed holds the same base points.
    auto rotated = make_rotating_moons(4, 50, 90.0, 0.0, 3);
    auto flat = make_rotating_moons(4, 50, 0.0, 0.0, 3);
    EXPECT_EQ(rotated.domains[0], flat.domains[0]);
    const auto& a = rotated.domains[3].features;
    const auto& b = flat.domains[3].features;
    for (std::size_t i = 0; i < 50; ++i) {
        double diff = polar_angle_deg(a(i, 0), a(i, 1)) - polar_angle_deg(b(i, 0), b(i, 1));
        diff = std::fmod(diff + 540.0, 360.0) - 180.0;
        EXPECT_NEAR(diff, 90.0, 1e-9);
        EXPECT_NEAR(std::hypot(a(i, 0), a(i, 1)), std::hypot(b(i, 0), b(i, 1)), 1e-12);
    }
}

TEST(RotatingMoons, ClassProportionsNearHalf) {
    auto seq = make_rotating_moons(5, 10000, 120.0, 0.1, 1);
    for (const auto& b : seq.domains) {
        const auto c = b.class_counts();
        EXPECT_NEAR(static_cast<double>(c[0]) / 10000.0, 0.5, 0.02);
    }
}

TEST(RotatingMoons, ErrorsAndDeterminism) {
    EXPECT_THROW(make_rotating_moons(1, 10, 30.0, 0.1, 0), std::invalid_argument);
    EXPECT_EQ(make_rotating_moons(3, 20, 60.0, 0.1, 9), make_rotating_moons(3, 20, 60.0, 0.1, 9));
}

TEST(ShiftingGaussians, ZeroDriftDomainsAlike) {
    auto seq = make_shifting_gaussians(3, 2000, 0.0, {{-1.0}, {1.0}}, 0.5, 2);
    auto rep = class_conditional_delta(seq);
    EXPECT_LE(rep.max_delta, 0.1);
}

TEST(ShiftingGaussians, ReportsTrueDelta) {
    auto seq = make_shifting_gaussians(3, 100, 0.3, {{0.0}, {2.0}}, 0.5, 1);
    ASSERT_TRUE(seq.meta.delta_true.has_value());
    EXPECT_EQ(*seq.meta.delta_true, 0.3);
}

TEST(ShiftingGaussians, EmpiricalDriftNearTranslation) {
    auto seq = make_shifting_gaussians(4, 2000, 0.3, {{-1.0}, {1.0}}, 0.5, 5);
    for (std::size_t t = 0; t + 1 < seq.T(); ++t)
        for (std::size_t y = 0; y < 2; ++y) {
            auto [a, b] = resample_to_equal(seq.domains[t].class_rows(y), seq.domains[t + 1].class_rows(y), 1);
            EXPECT_NEAR(w1_sorted_1d(a.values(), b.values()).distance, 0.3, 0.05);
        }
}

TEST(ShiftingGaussians, DriftConvergesAtRootNRate) {
    // Per-class consecutive W1 within 3/sqrt(n) of the truth.
    for (std::size_t n : {500u, 2000u, 8000u}) {
        auto seq = make_shifting_gaussians(3, n, 0.3, {{0.0}, {3.0}}, 0.5, 77);
        auto rep = class_conditional_delta(seq, DeltaEstimator::Exact, 4);
        for (const auto& row : rep.per_class)
            for (double w : row) EXPECT_NEAR(w, 0.3, 3.0 / std::sqrt(static_cast<double>(n))) << n;
    }
}

TEST(ShiftingGaussians, DirectionCycleKeepsStepNorm) {
    auto seq = make_shifting_gaussians(5, 4000, 0.5, {{0.0, 0.0}, {3.0, 0.0}}, 0.0, 3,
                                       {{0, 1}, {1, 0}, {0, -1}, {-1, 0}});
    // sigma = 0: every class-y point sits exactly at its mean.
    const double expect[5][2] = {{0, 0}, {0, 0.5}, {0.5, 0.5}, {0.5, 0}, {0, 0}};
    for (std::size_t t = 0; t < 5; ++t) {
        auto rows = seq.domains[t].class_rows(0);
        EXPECT_NEAR(rows(0, 0), expect[t][0], 1e-12);
        EXPECT_NEAR(rows(0, 1), expect[t][1], 1e-12);
    }
    EXPECT_THROW(make_shifting_gaussians(3, 10, 0.1, {{0.0}}, -1.0, 0), std::invalid_argument);
}

TEST(LabelMarginal, ChiSquaredAcrossDomainsDoesNotReject) {
    // 2 x T contingency table; critical value of chi^2 with T-1 = 5 dof at
    // p = 0.001 is 20.515.
    auto seq = make_rotating_moons(6, 1000, 120.0, 0.1, 31);
    double total0 = 0, total = 0;
    for (const auto& b : seq.domains) {
        total0 += static_cast<double>(b.class_counts()[0]);
        total += static_cast<double>(b.n());
    }
    double chi2 = 0.0;
    for (const auto& b : seq.domains) {
        const auto c = b.class_counts();
        for (std::size_t y = 0; y < 2; ++y) {
            const double p = y == 0 ? total0 / total : 1.0 - total0 / total;
            const double e = p * static_cast<double>(b.n());
            chi2 += (static_cast<double>(c[y]) - e) * (static_cast<double>(c[y]) - e) / e;
        }
    }
    EXPECT_LT(chi2, 20.515);
}

TEST(Persistence, RoundTripIsFieldForField) {
    auto dir = temp_dir("roundtrip");
    for (auto seq : {make_rotating_moons(3, 40, 60.0, 0.1, 4),
                     make_shifting_gaussians(3, 30, 0.2, {{0.0, 1.0}, {1.0, 0.0}, {2.0, 2.0}}, 0.3, 8)}) {
        auto path = dir / (seq.meta.generator + ".csv");
        save_sequence(seq, path);
        EXPECT_TRUE(fs::exists(meta_path_for(path)));
        EXPECT_EQ(load_sequence(path), seq);
    }
}

TEST(Persistence, HandWrittenCsv) {
    auto dir = temp_dir("hand");
    write_text(dir / "tiny.csv", "t,y,x0,x1\n0,0,0.0,1.0\n0,1,1.0,0.0\n1,0,0.5,0.5\n");
    auto seq = load_sequence(dir / "tiny.csv");
    EXPECT_EQ(seq.T(), 2u);
    EXPECT_EQ(seq.d(), 2u);
    EXPECT_EQ(seq.k(), 2u);
    EXPECT_EQ(seq.domains[0].n(), 2u);
    EXPECT_EQ(seq.domains[1].n(), 1u);
    EXPECT_EQ(seq.domains[1].features, Array::matrix({{0.5, 0.5}}));
}

TEST(Persistence, LabelEqualToKRejected) {
    auto dir = temp_dir("badlabel");
    write_text(dir / "d.csv", "t,y,x0\n0,0,1.0\n0,2,2.0\n");
    write_text(dir / "d.meta.json", R"({"generator":"file","k":2,"d":1})");
    try {
        load_sequence(dir / "d.csv");
        FAIL();
    } catch (const DatasetFormatError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}

TEST(Persistence, MalformedRowsReportLine) {
    auto dir = temp_dir("malformed");
    write_text(dir / "a.csv", "t,y,x0,x1\n0,0,1.0,2.0\n0,1,1.0\n");
    try {
        load_sequence(dir / "a.csv");
        FAIL();
    } catch (const DatasetFormatError& e) {
        EXPECT_EQ(e.line(), 3u);
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
    write_text(dir / "b.csv", "t,y,x0\n0,0,abc\n");
    EXPECT_THROW(load_sequence(dir / "b.csv"), DatasetFormatError);
    write_text(dir / "c.csv", "t,y,x0\n1,0,1.0\n0,0,1.0\n");
    EXPECT_THROW(load_sequence(dir / "c.csv"), DatasetFormatError);
    write_text(dir / "d.csv", "t,label,x0\n0,0,1.0\n");
    EXPECT_THROW(load_sequence(dir / "d.csv"), DatasetFormatError);
    write_text(dir / "e.csv", "t,y,x0\n0,-1,1.0\n");
    EXPECT_THROW(load_sequence(dir / "e.csv"), DatasetFormatError);
}

TEST(SplitHoldout, HalfSplitIsStratified) {
    auto seq = make_rotating_moons(3, 100, 60.0, 0.1, 6);
    auto [train, eval] = split_holdout(seq, 0.5, 1);
    for (std::size_t t = 0; t < 3; ++t) {
        EXPECT_EQ(train.domains[t].n(), 50u);
        EXPECT_EQ(eval.domains[t].n(), 50u);
        const auto c = seq.domains[t].class_counts();
        const auto ce = eval.domains[t].class_counts();
        for (std::size_t y = 0; y < 2; ++y) EXPECT_LE(std::abs(static_cast<double>(ce[y]) - c[y] * 0.5), 1.0);
    }
}

TEST(SplitHoldout, DisjointAndCovering) {
    auto seq = make_shifting_gaussians(2, 37, 0.1, {{0.0}, {1.0}, {2.0}}, 0.5, 2);
    auto [train, eval] = split_holdout(seq, 0.3, 5);
    for (std::size_t t = 0; t < 2; ++t) {
        std::multiset<double> all, parts;
        for (double v : seq.domains[t].features.data()) all.insert(v);
        for (double v : train.domains[t].features.data()) parts.insert(v);
        for (double v : eval.domains[t].features.data()) {
            EXPECT_EQ(std::count(train.domains[t].features.data().begin(), train.domains[t].features.data().end(), v), 0);
            parts.insert(v);
        }
        EXPECT_EQ(all, parts);
    }
}

TEST(SplitHoldout, DeterministicAndValidated) {
    auto seq = make_rotating_moons(2, 60, 30.0, 0.1, 6);
    EXPECT_EQ(split_holdout(seq, 0.4, 3), split_holdout(seq, 0.4, 3));
    EXPECT_THROW(split_holdout(seq, 0.0, 1), std::invalid_argument);
    EXPECT_THROW(split_holdout(seq, 1.0, 1), std::invalid_argument);
    DomainSequence tiny;
    tiny.domains.push_back({0, Array::matrix({{0.0}, {1.0}, {2.0}}), {0, 0, 1}, 2});
    EXPECT_THROW(split_holdout(tiny, 0.5, 1), std::invalid_argument);
}
