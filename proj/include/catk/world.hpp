#pragma once

// Planar world: agent poses, local-frame action tokens, the forward dynamics
// that applies a token to a pose, the state distance used for token
// selection, and the geometric predicates behind off-road and collision
// metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace catk {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kDefaultYawWeight = 0.5;  // m/rad

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    double r = std::remainder(a, 2.0 * kPi);
    if (r <= -kPi) {
        r += 2.0 * kPi;
    }
    return r;
}

struct AgentState {
    double x = 0.0;
    double y = 0.0;
    double yaw = 0.0;
    double length = 4.5;
    double width = 2.0;

    friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// Rigid pose delta expressed in the frame of the state it is applied to.
struct ActionToken {
    double dx = 0.0;
    double dy = 0.0;
    double dyaw = 0.0;

    friend bool operator==(const ActionToken&, const ActionToken&) = default;
};

struct Point {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point&, const Point&) = default;
};

using Polyline = std::vector<Point>;

struct MapContext {
    std::vector<Point> drivable_region;  // simple polygon, either orientation
    std::vector<Polyline> lane_centerlines;
    std::vector<std::optional<Point>> goal_hints;  // per agent, may be empty

    friend bool operator==(const MapContext&, const MapContext&) = default;
};

/// Deterministic dynamics: rotate (dx, dy) into the world frame by the
/// current yaw, translate, then turn by dyaw.
inline AgentState apply_token(const AgentState& s, const ActionToken& a) {
    const double c = std::cos(s.yaw);
    const double sn = std::sin(s.yaw);
    AgentState next = s;
    next.x = s.x + c * a.dx - sn * a.dy;
    next.y = s.y + sn * a.dx + c * a.dy;
    next.yaw = wrap_angle(s.yaw + a.dyaw);
    return next;
}

/// Inverse of apply_token: the local-frame delta that takes `from` exactly to `to`.
inline ActionToken relative_delta(const AgentState& from, const AgentState& to) {
    const double c = std::cos(from.yaw);
    const double sn = std::sin(from.yaw);
    const double ex = to.x - from.x;
    const double ey = to.y - from.y;
    return {c * ex + sn * ey, -sn * ex + c * ey, wrap_angle(to.yaw - from.yaw)};
}

inline double planar_distance(const AgentState& a, const AgentState& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

/// d(a, b) = |p_a - p_b| + w_yaw * |wrap(yaw_a - yaw_b)|.
inline double state_distance(const AgentState& a, const AgentState& b,
                             double yaw_weight = kDefaultYawWeight) {
    return planar_distance(a, b) + yaw_weight * std::abs(wrap_angle(a.yaw - b.yaw));
}

namespace detail {

inline double cross(Point o, Point a, Point b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool on_segment(Point p, Point a, Point b) {
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const double tol = 1e-12 * std::max(1.0, len);
    // |cross| is len times the perpendicular distance.
    if (std::abs(cross(a, b, p)) > tol * std::max(1.0, len)) {
        return false;
    }
    return p.x >= std::min(a.x, b.x) - tol && p.x <= std::max(a.x, b.x) + tol &&
           p.y >= std::min(a.y, b.y) - tol && p.y <= std::max(a.y, b.y) + tol;
}

}  // namespace detail

/// Even-odd point-in-polygon test; points on the boundary count as inside.
inline bool point_in_polygon(std::span<const Point> poly, Point p) {
    const std::size_t n = poly.size();
    if (n < 3) {
        return false;
    }
    bool inside = false;
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Point a = poly[i];
        const Point b = poly[j];
        if (detail::on_segment(p, a, b)) {
            return true;
        }
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (p.x < x_cross) {
                inside = !inside;
            }
        }
    }
    return inside;
}

inline bool in_drivable(const MapContext& map, double x, double y) {
    return point_in_polygon(map.drivable_region, {x, y});
}

struct SegmentProjection {
    double distance = 0.0;  // unsigned distance to the segment
    double t = 0.0;         // clamped parameter in [0, 1]
    Point foot;
};

inline SegmentProjection project_to_segment(Point p, Point a, Point b) {
    const double vx = b.x - a.x;
    const double vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = 0.0;
    if (len2 > 0.0) {
        t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / len2, 0.0, 1.0);
    }
    const Point foot{a.x + t * vx, a.y + t * vy};
    return {std::hypot(p.x - foot.x, p.y - foot.y), t, foot};
}

/// Distance to the polygon boundary, positive inside, negative outside.
inline double signed_boundary_distance(std::span<const Point> poly, Point p) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        best = std::min(best, project_to_segment(p, poly[j], poly[i]).distance);
    }
    return point_in_polygon(poly, p) ? best : -best;
}

/// Corners of the oriented footprint rectangle, counter-clockwise.
inline std::array<Point, 4> footprint_corners(const AgentState& s) {
    const double c = std::cos(s.yaw);
    const double sn = std::sin(s.yaw);
    const double hl = 0.5 * s.length;
    const double hw = 0.5 * s.width;
    std::array<Point, 4> out{};
    const std::array<std::array<double, 2>, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    for (std::size_t k = 0; k < 4; ++k) {
        out[k] = {s.x + c * local[k][0] - sn * local[k][1], s.y + sn * local[k][0] + c * local[k][1]};
    }
    return out;
}

/// Separating-axis test on the two oriented rectangles. Touching counts as
/// overlap; zero-area footprints never overlap.
inline bool footprints_overlap(const AgentState& a, const AgentState& b) {
    if (a.length <= 0.0 || a.width <= 0.0 || b.length <= 0.0 || b.width <= 0.0) {
        return false;
    }
    const auto ca = footprint_corners(a);
    const auto cb = footprint_corners(b);
    const std::array<double, 4> yaws{a.yaw, a.yaw + 0.5 * kPi, b.yaw, b.yaw + 0.5 * kPi};
    for (double yaw : yaws) {
        const double ax = std::cos(yaw);
        const double ay = std::sin(yaw);
        double amin = std::numeric_limits<double>::infinity();
        double amax = -amin;
        double bmin = amin;
        double bmax = -amin;
        for (std::size_t k = 0; k < 4; ++k) {
            const double pa = ca[k].x * ax + ca[k].y * ay;
            const double pb = cb[k].x * ax + cb[k].y * ay;
            amin = std::min(amin, pa);
            amax = std::max(amax, pa);
            bmin = std::min(bmin, pb);
            bmax = std::max(bmax, pb);
        }
        if (amax < bmin || bmax < amin) {
            return false;
        }
    }
    return true;
}

}  // namespace catk
