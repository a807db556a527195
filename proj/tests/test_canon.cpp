#include "dipcg/canon.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dipcg;

namespace {

GeneratorSchema one_param(ParamSpec p) { return GeneratorSchema{"test", 1, {std::move(p)}}; }

ParamSpec discrete_k(std::size_t k) {
    std::vector<std::string> c;
    for (std::size_t i = 0; i < k; ++i) c.push_back("c" + std::to_string(i));
    return ParamSpec::discrete("d", c);
}

} // namespace

TEST(Canon, ContinuousMidpointAndBoundary) {
    const auto s = one_param(ParamSpec::continuous("a", 0.0, 10.0));
    EXPECT_EQ(canonicalize(s, {"test", {5.0}}).x[0], 0.0);
    EXPECT_EQ(decanonicalize(s, {"test", {1.0}}).values[0], 10.0);
    EXPECT_EQ(decanonicalize(s, {"test", {-1.0}}).values[0], 0.0);
}

TEST(Canon, DiscretePieceCenters) {
    const auto s2 = one_param(discrete_k(2));
    EXPECT_EQ(canonicalize(s2, {"test", {0.0}}).x[0], -0.5);
    EXPECT_EQ(canonicalize(s2, {"test", {1.0}}).x[0], 0.5);
    const auto s4 = one_param(discrete_k(4));
    EXPECT_EQ(canonicalize(s4, {"test", {2.0}}).x[0], 0.25);
    EXPECT_EQ(decanonicalize(s4, {"test", {0.3}}).values[0], 2.0);
    EXPECT_EQ(decanonicalize(s2, {"test", {1.07}}).values[0], 1.0);
    EXPECT_EQ(decanonicalize(s2, {"test", {-3.0}}).values[0], 0.0);
    EXPECT_EQ(decanonicalize(s4, {"test", {1.0}}).values[0], 3.0);
}

TEST(Canon, Errors) {
    const auto s = one_param(ParamSpec::continuous("a", 0.0, 10.0));
    EXPECT_THROW(decanonicalize(s, {"test", {std::nan("")}}), InvalidInput);
    EXPECT_THROW(decanonicalize(s, {"test", {0.0, 0.0}}), InvalidParam);
    EXPECT_THROW(canonicalize(s, {"test", {11.0}}), InvalidParam);
    EXPECT_THROW(canonicalize(s, {"test", {}}), InvalidParam);
}

TEST(Canon, DiscreteRoundTripForAllK) {
    for (std::size_t k = 2; k <= 64; ++k) {
        const auto s = one_param(discrete_k(k));
        for (std::size_t c = 0; c < k; ++c) {
            const ParamVector p{"test", {static_cast<double>(c)}};
            EXPECT_EQ(decanonicalize(s, canonicalize(s, p)).values[0], static_cast<double>(c)) << "K=" << k;
        }
    }
}

TEST(Canon, PieceCenterRobustness) {
    Rng rng(4);
    for (std::size_t k = 2; k <= 64; ++k) {
        for (std::size_t c = 0; c < k; ++c) {
            const double center = piece_center(c, k);
            for (int trial = 0; trial < 20; ++trial) {
                // strictly inside (-1/K, 1/K)
                const double delta = (2.0 * rng.uniform() - 1.0) * (1.0 - 1e-9) / static_cast<double>(k);
                EXPECT_EQ(piece_of(center + delta, k), c) << "K=" << k << " delta=" << delta;
            }
        }
    }
}

TEST(Canon, GeneratorRoundTrips) {
    for (const auto& id : list_generators()) {
        const auto& s = schema(id);
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            const auto p = sample_params(s, seed);
            const auto x = canonicalize(s, p);
            for (double v : x.x) {
                EXPECT_GE(v, -1.0);
                EXPECT_LE(v, 1.0);
            }
            const auto q = decanonicalize(s, x);
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (s.params[i].is_discrete())
                    EXPECT_EQ(q.values[i], p.values[i]);
                else
                    EXPECT_LE(std::abs(q.values[i] - p.values[i]), 1e-9 * (s.params[i].max - s.params[i].min));
            }
        }
    }
}

TEST(Canon, MonotoneInContinuousParameters) {
    const auto s = one_param(ParamSpec::continuous("a", -3.0, 7.0));
    double prev = -2.0;
    for (int i = 0; i <= 1000; ++i) {
        const double x = canonicalize(s, {"test", {-3.0 + 10.0 * i / 1000.0}}).x[0];
        EXPECT_GT(x, prev);
        prev = x;
    }
}

TEST(Canon, SnapClampsAndCenters) {
    const auto& s = schema("table");
    CanonVector c{"table", {1.3, -0.2, 0.0, 0.5, -1.4, 0.1}};
    const auto snapped = snap(s, c);
    EXPECT_EQ(snapped.x[0], 1.0);
    EXPECT_EQ(snapped.x[4], -1.0);
    EXPECT_EQ(snapped.x[5], 0.5);
    EXPECT_NEAR(snapped.x[1], -0.2, 1e-12);
}
