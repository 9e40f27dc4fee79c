#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "catk/random.hpp"
#include "catk/world.hpp"

using namespace catk;

namespace {

constexpr double kTol = 1e-12;

AgentState pose(double x, double y, double yaw, double len = 4.5, double wid = 2.0) {
    return {x, y, yaw, len, wid};
}

// Ray cast toward +x counting crossings, with an explicit boundary check.
bool ray_cast_inside(const std::vector<Point>& poly, Point p) {
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Point a = poly[i];
        const Point b = poly[(i + 1) % n];
        const double cr = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        const bool within = std::min(a.x, b.x) - 1e-12 <= p.x && p.x <= std::max(a.x, b.x) + 1e-12 &&
                            std::min(a.y, b.y) - 1e-12 <= p.y && p.y <= std::max(a.y, b.y) + 1e-12;
        if (std::abs(cr) < 1e-12 && within) {
            return true;
        }
    }
    int crossings = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Point a = poly[i];
        const Point b = poly[(i + 1) % n];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double xi = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (xi > p.x) {
                ++crossings;
            }
        }
    }
    return crossings % 2 == 1;
}

// Star-shaped polygon around the origin; always simple.
std::vector<Point> random_star(Rng& rng, std::size_t n) {
    std::vector<double> angles(n);
    for (auto& a : angles) {
        a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
    std::sort(angles.begin(), angles.end());
    std::vector<Point> out;
    for (double a : angles) {
        const double r = uniform(rng, 1.0, 5.0);
        out.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return out;
}

bool point_in_rect(const AgentState& s, double px, double py) {
    const double c = std::cos(s.yaw);
    const double sn = std::sin(s.yaw);
    const double lx = c * (px - s.x) + sn * (py - s.y);
    const double ly = -sn * (px - s.x) + c * (py - s.y);
    return std::abs(lx) <= 0.5 * s.length && std::abs(ly) <= 0.5 * s.width;
}

// Dense sampling of rectangle a, testing membership in b.
bool sampled_overlap(const AgentState& a, const AgentState& b, int n = 120) {
    const double c = std::cos(a.yaw);
    const double sn = std::sin(a.yaw);
    for (int i = 0; i <= n; ++i) {
        for (int j = 0; j <= n; ++j) {
            const double lx = (static_cast<double>(i) / n - 0.5) * a.length;
            const double ly = (static_cast<double>(j) / n - 0.5) * a.width;
            if (point_in_rect(b, a.x + c * lx - sn * ly, a.y + sn * lx + c * ly)) {
                return true;
            }
        }
    }
    return false;
}

}  // namespace

TEST(ApplyToken, IdentityHeadingTranslation) {
    const auto s = apply_token(pose(0, 0, 0), {1, 0, 0});
    EXPECT_NEAR(s.x, 1.0, kTol);
    EXPECT_NEAR(s.y, 0.0, kTol);
    EXPECT_NEAR(s.yaw, 0.0, kTol);
}

TEST(ApplyToken, QuarterTurnHeading) {
    const auto s = apply_token(pose(0, 0, std::numbers::pi / 2), {1, 0, 0});
    EXPECT_NEAR(s.x, 0.0, kTol);
    EXPECT_NEAR(s.y, 1.0, kTol);
    EXPECT_NEAR(s.yaw, std::numbers::pi / 2, kTol);
}

TEST(ApplyToken, RotatedDiagonalStep) {
    const auto s = apply_token(pose(2, 3, std::numbers::pi / 4), {std::sqrt(2.0), 0, std::numbers::pi / 4});
    EXPECT_NEAR(s.x, 3.0, kTol);
    EXPECT_NEAR(s.y, 4.0, kTol);
    EXPECT_NEAR(s.yaw, std::numbers::pi / 2, kTol);
}

TEST(ApplyToken, YawStaysInHalfOpenRange) {
    Rng rng(7);
    AgentState s = pose(0, 0, 0);
    for (int i = 0; i < 10000; ++i) {
        s = apply_token(s, {uniform(rng, -2, 2), uniform(rng, -1, 1), uniform(rng, -4, 4)});
        ASSERT_GT(s.yaw, -std::numbers::pi);
        ASSERT_LE(s.yaw, std::numbers::pi);
    }
    EXPECT_EQ(wrap_angle(-std::numbers::pi), std::numbers::pi);
}

TEST(ApplyToken, DeterministicAndFootprintPreserving) {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const AgentState s = pose(uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, -3, 3), 4.0, 1.8);
        const ActionToken t{uniform(rng, -5, 5), uniform(rng, -1, 1), uniform(rng, -1, 1)};
        const auto a = apply_token(s, t);
        const auto b = apply_token(s, t);
        ASSERT_EQ(a, b);
        ASSERT_EQ(a.length, 4.0);
        ASSERT_EQ(a.width, 1.8);
        const auto id = apply_token(s, {0, 0, 0});
        ASSERT_EQ(id, s);
    }
}

TEST(ApplyToken, RelativeDeltaInverts) {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const AgentState a = pose(uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, -3, 3));
        const AgentState b = pose(uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, -3, 3));
        const auto c = apply_token(a, relative_delta(a, b));
        ASSERT_NEAR(c.x, b.x, 1e-9);
        ASSERT_NEAR(c.y, b.y, 1e-9);
        ASSERT_NEAR(wrap_angle(c.yaw - b.yaw), 0.0, 1e-12);
    }
}

TEST(StateDistance, Examples) {
    EXPECT_EQ(state_distance(pose(1, 2, 0.3), pose(1, 2, 0.3)), 0.0);
    EXPECT_NEAR(state_distance(pose(0, 0, 0), pose(3, 4, 0), 1.0), 5.0, kTol);
    EXPECT_NEAR(state_distance(pose(0, 0, 0), pose(0, 0, std::numbers::pi), 0.5), 0.5 * std::numbers::pi, kTol);
}

TEST(StateDistance, WrapsYawAcrossBranchCut) {
    EXPECT_NEAR(state_distance(pose(0, 0, 3.1), pose(0, 0, -3.1), 1.0), 2 * std::numbers::pi - 6.2, 1e-12);
}

TEST(StateDistance, SymmetricAndTriangle) {
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        const AgentState a = pose(uniform(rng, -10, 10), uniform(rng, -10, 10), uniform(rng, -3.14, 3.14));
        const AgentState b = pose(uniform(rng, -10, 10), uniform(rng, -10, 10), uniform(rng, -3.14, 3.14));
        const AgentState c = pose(uniform(rng, -10, 10), uniform(rng, -10, 10), uniform(rng, -3.14, 3.14));
        ASSERT_EQ(state_distance(a, b), state_distance(b, a));
        ASSERT_LE(state_distance(a, c), state_distance(a, b) + state_distance(b, c) + 1e-12);
        ASSERT_GE(state_distance(a, b), 0.0);
    }
}

TEST(InDrivable, UnitSquare) {
    MapContext map;
    map.drivable_region = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    EXPECT_TRUE(in_drivable(map, 0.5, 0.5));
    EXPECT_FALSE(in_drivable(map, 2, 2));
    EXPECT_TRUE(in_drivable(map, 1.0, 0.5));
    EXPECT_TRUE(ray_cast_inside(map.drivable_region, {1.0, 0.5}));
    EXPECT_TRUE(in_drivable(map, 0.0, 0.0));
    EXPECT_TRUE(in_drivable(map, 1.0, 1.0));
    EXPECT_FALSE(in_drivable(map, 1.0 + 1e-9, 0.5));
}

TEST(InDrivable, OrientationIndependent) {
    MapContext cw;
    cw.drivable_region = {{0, 0}, {0, 1}, {1, 1}, {1, 0}};
    EXPECT_TRUE(in_drivable(cw, 1.0, 0.5));
    EXPECT_TRUE(in_drivable(cw, 0.25, 0.75));
    EXPECT_FALSE(in_drivable(cw, -0.25, 0.75));
}

TEST(InDrivable, MatchesRayCastOracle) {
    Rng rng(19);
    for (int poly = 0; poly < 5; ++poly) {
        MapContext map;
        map.drivable_region = random_star(rng, 5 + 3 * static_cast<std::size_t>(poly));
        for (int i = 0; i < 10000; ++i) {
            const Point p{uniform(rng, -6, 6), uniform(rng, -6, 6)};
            ASSERT_EQ(in_drivable(map, p.x, p.y), ray_cast_inside(map.drivable_region, p))
                << "polygon " << poly << " point " << p.x << "," << p.y;
        }
        for (const Point& v : map.drivable_region) {
            ASSERT_TRUE(in_drivable(map, v.x, v.y));
        }
    }
}

TEST(FootprintsOverlap, Examples) {
    EXPECT_TRUE(footprints_overlap(pose(0, 0, 0, 1, 1), pose(0, 0, 0, 1, 1)));
    EXPECT_FALSE(footprints_overlap(pose(0, 0, 0, 1, 1), pose(10, 0, 0, 1, 1)));
    const AgentState a = pose(0, 0, 0, 1, 1);
    const AgentState b = pose(0.9, 0, std::numbers::pi / 4, 1, 1);
    EXPECT_TRUE(footprints_overlap(a, b));
    EXPECT_TRUE(sampled_overlap(a, b));
}

TEST(FootprintsOverlap, TouchingAndDegenerate) {
    EXPECT_TRUE(footprints_overlap(pose(0, 0, 0, 1, 1), pose(1, 0, 0, 1, 1)));
    EXPECT_FALSE(footprints_overlap(pose(0, 0, 0, 1, 1), pose(1.0001, 0, 0, 1, 1)));
    EXPECT_FALSE(footprints_overlap(pose(0, 0, 0, 0, 1), pose(0, 0, 0, 1, 1)));
    EXPECT_FALSE(footprints_overlap(pose(0, 0, 0, 1, 1), pose(0, 0, 0, 1, 0)));
}

TEST(FootprintsOverlap, SymmetricAndAgreesWithSampling) {
    Rng rng(23);
    int thin = 0;
    const int n = 600;
    for (int i = 0; i < n; ++i) {
        const AgentState a = pose(0, 0, uniform(rng, -3, 3), uniform(rng, 1, 5), uniform(rng, 0.5, 2.5));
        const AgentState b = pose(uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -3, 3), uniform(rng, 1, 5),
                                  uniform(rng, 0.5, 2.5));
        const bool sat = footprints_overlap(a, b);
        ASSERT_EQ(sat, footprints_overlap(b, a));
        const bool sampled = sampled_overlap(a, b) || sampled_overlap(b, a);
        if (sampled) {
            ASSERT_TRUE(sat);
        } else if (sat) {
            ++thin;  // sliver overlaps thinner than the sampling grid
        }
    }
    EXPECT_LT(thin, n / 100);
}
