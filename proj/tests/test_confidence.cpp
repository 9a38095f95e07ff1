// Copyright (C) 2026 confkv contributors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "confkv/confidence.hpp"
#include "confkv/rng.hpp"

using namespace confkv;

namespace {

const ConfidenceWeights kDefault{0.4, 0.3, 0.3};

std::vector<double> random_distribution(SeededRng& rng, std::size_t v) {
    std::vector<double> p(v);
    double sum = 0.0;
    for (double& x : p) {
        // Exponential draws give a uniform point on the simplex; cubing spreads out peakedness.
        x = std::pow(-std::log(1.0 - rng.uniform()), 3.0);
        sum += x;
    }
    for (double& x : p) x /= sum;
    return p;
}

}  // namespace

TEST(Softmax, Examples) {
    const auto a = stable_softmax(std::vector<double>{0.0, 0.0});
    EXPECT_DOUBLE_EQ(a[0], 0.5);
    EXPECT_DOUBLE_EQ(a[1], 0.5);
    const auto b = stable_softmax(std::vector<double>{1000.0, 1000.0});
    EXPECT_DOUBLE_EQ(b[0], 0.5);
    EXPECT_DOUBLE_EQ(b[1], 0.5);
    const auto c = stable_softmax(std::vector<double>{std::log(3.0), 0.0});
    EXPECT_NEAR(c[0], 0.75, 1e-12);
    EXPECT_NEAR(c[1], 0.25, 1e-12);
}

TEST(Softmax, ExtremeLogitsStayFinite) {
    const auto p = stable_softmax(std::vector<double>{1e4, -1e4, 0.0, 1e4 - 1.0});
    double sum = 0.0;
    for (double x : p) {
        ASSERT_TRUE(std::isfinite(x));
        sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_NEAR(p[0] / p[3], std::exp(1.0), 1e-9);
}

TEST(Softmax, Errors) {
    EXPECT_THROW(stable_softmax(std::vector<double>{1.0}), Error);
    EXPECT_THROW(stable_softmax(std::vector<double>{1.0, NAN}), Error);
    EXPECT_THROW(stable_softmax(std::vector<double>{1.0, INFINITY}), Error);
}

TEST(ConfidenceScore, NearOneHot) {
    std::vector<double> p(8, 1e-12);
    p[0] = 1.0 - 7e-12;
    EXPECT_NEAR(confidence_score(p, kDefault).score, 1.0, 1e-6);
}

TEST(ConfidenceScore, UniformOverFour) {
    const auto f = confidence_score(std::vector<double>(4, 0.25), kDefault);
    EXPECT_NEAR(f.entropy_norm, 1.0, 1e-12);
    EXPECT_NEAR(f.margin, 0.0, 1e-12);
    EXPECT_NEAR(f.margin_sig, 0.5, 1e-12);
    EXPECT_NEAR(f.top_prob, 0.25, 1e-12);
    EXPECT_NEAR(f.score, 0.225, 1e-12);
}

TEST(ConfidenceScore, NinetyTen) {
    // Scalar evaluation: H = -(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2, logistic(ln 9) = 9/10.
    const double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0);
    const double expected = 0.4 * (1.0 - h) + 0.3 * 0.9 + 0.3 * 0.9;
    const auto f = confidence_score(std::vector<double>{0.9, 0.1}, kDefault);
    EXPECT_NEAR(f.entropy_norm, 0.4690, 1e-4);
    EXPECT_NEAR(f.margin_sig, 0.9, 1e-12);
    EXPECT_NEAR(f.score, expected, 1e-6);
    EXPECT_NEAR(f.score, 0.7524, 1e-4);
}

TEST(ConfidenceScore, DegenerateUsesMarginFloor) {
    const auto f = confidence_score(std::vector<double>{1.0, 0.0, 0.0}, kDefault);
    EXPECT_NEAR(f.margin, -std::log(1e-12), 1e-9);
    EXPECT_LT(f.margin_sig, 1.0 + 1e-15);
    EXPECT_NEAR(f.entropy_norm, 0.0, 1e-15);
    EXPECT_NEAR(f.score, 1.0, 1e-9);
}

TEST(ConfidenceScore, RejectsUnnormalized) {
    EXPECT_THROW(confidence_score(std::vector<double>{0.5, 0.6}, kDefault), Error);
    EXPECT_THROW(confidence_score(std::vector<double>{1.0}, kDefault), Error);
    EXPECT_THROW(confidence_score(std::vector<double>{1.5, -0.5}, kDefault), Error);
}

TEST(ConfidenceScore, MonotoneUnderSharpening) {
    SeededRng rng(2024);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t v = 2 + rng.below(100);
        const auto p = random_distribution(rng, v);
        const double power = 1.0 + 3.0 * rng.uniform() + 1e-3;
        std::vector<double> q(v);
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            q[j] = std::pow(p[j], power);
            sum += q[j];
        }
        for (double& x : q) x /= sum;
        ASSERT_GE(confidence_score(q, kDefault).score, confidence_score(p, kDefault).score - 1e-12)
            << "case " << i << " V=" << v << " power=" << power;
    }
}

TEST(ConfidenceScore, PermutationInvariantAndInRange) {
    SeededRng rng(7);
    for (int i = 0; i < 500; ++i) {
        const std::size_t v = 2 + rng.below(50);
        auto p = random_distribution(rng, v);
        const double c = confidence_score(p, kDefault).score;
        EXPECT_GT(c, 0.0);
        EXPECT_LE(c, 1.0);
        for (std::size_t j = v - 1; j > 0; --j) {
            std::swap(p[j], p[rng.below(j + 1)]);
        }
        EXPECT_NEAR(confidence_score(p, kDefault).score, c, 1e-12);
    }
}

TEST(SelectBudget, ThresholdIsInclusive) {
    PolicyConfig cfg;
    EXPECT_EQ(select_budget(0.70, cfg), 128u);
    EXPECT_EQ(select_budget(0.6999, cfg), 256u);
    EXPECT_EQ(select_budget(1.0, cfg), 128u);
}
