#pragma once

// Synthetic four-way-intersection scenarios ("fork world") and their
// JSON-lines persistence. Every agent approaches the junction in its
// right-hand lane and leaves through one of three branches, so the future
// is multimodal given the observed history.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "catk/errors.hpp"
#include "catk/random.hpp"
#include "catk/vocabulary.hpp"
#include "catk/world.hpp"

namespace catk {

enum class Branch { left, straight, right };

inline const char* to_string(Branch b) {
    switch (b) {
        case Branch::left: return "left";
        case Branch::straight: return "straight";
        case Branch::right: return "right";
    }
    return "?";
}

inline Branch branch_from_string(const std::string& s) {
    if (s == "left") return Branch::left;
    if (s == "straight") return Branch::straight;
    if (s == "right") return Branch::right;
    throw InvalidConfig("unknown branch label '" + s + "'");
}

struct Scenario {
    std::string id;
    MapContext map;
    std::vector<Trajectory> gt;       // N agents x (T+1) states
    std::size_t history_len = 4;      // H
    std::vector<Branch> mode_labels;  // empty, or one per agent

    std::size_t num_agents() const { return gt.size(); }
    std::size_t horizon() const { return gt.empty() ? 0 : gt.front().size() - 1; }  // T
    std::size_t future_steps() const { return horizon() - history_len; }            // T - H

    friend bool operator==(const Scenario&, const Scenario&) = default;
};

namespace detail {

inline bool segments_cross(Point a, Point b, Point c, Point d) {
    const double d1 = cross(c, d, a);
    const double d2 = cross(c, d, b);
    const double d3 = cross(a, b, c);
    const double d4 = cross(a, b, d);
    return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 &&
           d4 != 0;
}

}  // namespace detail

inline void validate(const MapContext& map) {
    const auto& poly = map.drivable_region;
    const std::size_t n = poly.size();
    if (n < 3) {
        throw InvalidConfig("drivable region needs at least 3 vertices");
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (j == i + 1 || (i == 0 && j == n - 1)) {
                continue;
            }
            if (detail::segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])) {
                throw InvalidConfig("drivable region self-intersects");
            }
        }
    }
    for (const auto& lane : map.lane_centerlines) {
        if (lane.size() < 2) {
            throw InvalidConfig("lane centerline needs at least 2 points");
        }
    }
}

inline void validate(const Scenario& s) {
    validate(s.map);
    if (s.gt.empty()) {
        return;
    }
    const std::size_t len = s.gt.front().size();
    if (s.history_len < 1 || len < s.history_len + 2) {
        throw InvalidConfig("scenario " + s.id + ": need H >= 1 and T >= H + 1");
    }
    for (const auto& traj : s.gt) {
        if (traj.size() != len) {
            throw InvalidConfig("scenario " + s.id + ": agents have different horizons");
        }
        for (const auto& st : traj) {
            if (!(st.length > 0.0) || !(st.width > 0.0) || !std::isfinite(st.x) || !std::isfinite(st.y) ||
                !std::isfinite(st.yaw)) {
                throw InvalidConfig("scenario " + s.id + ": invalid agent state");
            }
            if (st.length != traj.front().length || st.width != traj.front().width) {
                throw InvalidConfig("scenario " + s.id + ": footprint changes along trajectory");
            }
        }
    }
    if (!s.mode_labels.empty() && s.mode_labels.size() != s.gt.size()) {
        throw InvalidConfig("scenario " + s.id + ": mode_label count differs from agent count");
    }
}

// ---------------------------------------------------------------------------
// Fork-world geometry. Canonical frame: approach from the south heading north
// in the lane x = +2; the other three arms are 90 degree rotations of it.

struct ForkWorldConfig {
    std::size_t n_agents = 4;
    std::array<double, 3> branch_probs{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // left, straight, right
    double noise_std = 0.15;
    std::size_t history_len = 4;  // 2 s at 2 Hz
    std::size_t horizon = 20;     // T: 2 s history + 8 s future
    double dt = kDefaultReplanningPeriod;
    double min_speed = 6.0;
    double max_speed = 9.0;
    double min_entry_time = 2.5;  // time at which the junction is reached
    double max_entry_time = 5.5;
    double vehicle_length = 4.5;
    double vehicle_width = 2.0;
};

namespace fork_geometry {

inline constexpr double kHalfWidth = 4.0;    // road half-width, lanes at +-2
inline constexpr double kLaneOffset = 2.0;
inline constexpr double kJunction = 8.0;     // distance from center where turns start
inline constexpr double kArmLength = 100.0;
inline constexpr double kChamfer = 4.0;
inline constexpr std::size_t kArcSegments = 8;

inline Point rotate(Point p, int quarter_turns) {
    const double a = 0.5 * kPi * quarter_turns;
    const double c = std::cos(a);
    const double s = std::sin(a);
    return {c * p.x - s * p.y, s * p.x + c * p.y};
}

/// Plus-shaped polygon with chamfered inner corners, counter-clockwise.
inline std::vector<Point> drivable_polygon() {
    const double w = kHalfWidth;
    const double c = kChamfer;
    const double l = kArmLength;
    std::vector<Point> quarter{{w, -l}, {w, -w - c}, {w + c, -w}, {l, -w}};
    std::vector<Point> out;
    for (int q = 0; q < 4; ++q) {
        for (const auto& p : quarter) {
            out.push_back(rotate(p, q));
        }
    }
    return out;
}

/// Arc-length parameterised canonical path for one branch.
struct Path {
    Branch branch = Branch::straight;
    double approach = 0.0;  // length before the junction entry

    double turn_radius() const { return branch == Branch::left ? kJunction + kLaneOffset : kJunction - kLaneOffset; }

    double turn_length() const {
        return branch == Branch::straight ? 2.0 * kJunction : 0.5 * kPi * turn_radius();
    }

    /// Pose at arc length s from the start (x, y, yaw).
    std::array<double, 3> at(double s) const {
        const double x0 = kLaneOffset;
        if (s <= approach) {
            return {x0, -kJunction - (approach - s), 0.5 * kPi};
        }
        const double u = s - approach;
        if (branch == Branch::straight) {
            return {x0, -kJunction + u, 0.5 * kPi};
        }
        const double r = turn_radius();
        const double tl = turn_length();
        const double sign = branch == Branch::left ? 1.0 : -1.0;  // +1 turns CCW
        const Point center{-sign * kJunction, -kJunction};
        if (u <= tl) {
            const double th = u / r;
            // Start angle points from center to (x0, -J).
            const double a0 = branch == Branch::left ? 0.0 : kPi;
            const double a = a0 + sign * th;
            return {center.x + r * std::cos(a), center.y + r * std::sin(a), wrap_angle(0.5 * kPi + sign * th)};
        }
        const double e = u - tl;
        if (branch == Branch::left) {
            return {-kJunction - e, kLaneOffset, kPi};
        }
        return {kJunction + e, -kLaneOffset, 0.0};
    }
};

inline std::vector<Polyline> lane_centerlines() {
    std::vector<Polyline> canonical;
    canonical.push_back({{kLaneOffset, -kArmLength}, {kLaneOffset, -kJunction}});    // inbound
    canonical.push_back({{-kLaneOffset, -kJunction}, {-kLaneOffset, -kArmLength}});  // outbound
    for (Branch b : {Branch::left, Branch::straight, Branch::right}) {
        Path p{b, 0.0};
        Polyline arc;
        const std::size_t segs = b == Branch::straight ? 1 : kArcSegments;
        for (std::size_t k = 0; k <= segs; ++k) {
            const auto pose = p.at(p.turn_length() * static_cast<double>(k) / static_cast<double>(segs));
            arc.push_back({pose[0], pose[1]});
        }
        canonical.push_back(std::move(arc));
    }
    std::vector<Polyline> out;
    for (int q = 0; q < 4; ++q) {
        for (const auto& line : canonical) {
            Polyline r;
            for (const auto& p : line) {
                r.push_back(rotate(p, q));
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

inline MapContext make_map() {
    return {drivable_polygon(), lane_centerlines(), {}};
}

}  // namespace fork_geometry

inline void validate(const ForkWorldConfig& cfg) {
    double sum = 0.0;
    for (double p : cfg.branch_probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw InvalidConfig("branch probabilities must be finite and non-negative");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw InvalidConfig("branch probabilities must sum to 1");
    }
    if (!(cfg.noise_std >= 0.0)) {
        throw InvalidConfig("noise_std must be >= 0");
    }
    if (cfg.history_len < 1 || cfg.horizon < cfg.history_len + 1) {
        throw InvalidConfig("need H >= 1 and T >= H + 1");
    }
    if (cfg.n_agents < 1) {
        throw InvalidConfig("need at least one agent");
    }
}

namespace detail {

inline Branch sample_branch(const std::array<double, 3>& probs, Rng& rng) {
    const double u = uniform01(rng);
    if (u < probs[0]) return Branch::left;
    if (u < probs[0] + probs[1] || probs[2] == 0.0) return Branch::straight;
    return Branch::right;
}

}  // namespace detail

/// One fork-world scenario; a pure function of (config, seed, index).
inline Scenario generate_fork_scenario(const ForkWorldConfig& cfg, std::uint64_t seed, std::size_t index) {
    Rng rng(derive_seed(seed, index, 0x666f726bULL));
    Scenario sc;
    sc.id = "fork-" + std::to_string(seed) + "-" + std::to_string(index);
    sc.map = fork_geometry::make_map();
    sc.history_len = cfg.history_len;
    const std::size_t steps = cfg.horizon + 1;

    std::vector<Trajectory> clean;
    for (std::size_t i = 0; i < cfg.n_agents; ++i) {
        const int arm = static_cast<int>(rng() % 4);
        const Branch branch = detail::sample_branch(cfg.branch_probs, rng);
        Trajectory traj;
        for (int attempt = 0; attempt < 50; ++attempt) {
            const double v = cfg.min_speed + (cfg.max_speed - cfg.min_speed) * uniform01(rng);
            const double te = cfg.min_entry_time + (cfg.max_entry_time - cfg.min_entry_time) * uniform01(rng);
            const fork_geometry::Path path{branch, v * te};
            traj.clear();
            for (std::size_t t = 0; t < steps; ++t) {
                const auto pose = path.at(v * cfg.dt * static_cast<double>(t));
                const Point p = fork_geometry::rotate({pose[0], pose[1]}, arm);
                traj.push_back({p.x, p.y, wrap_angle(pose[2] + 0.5 * kPi * arm), cfg.vehicle_length,
                                cfg.vehicle_width});
            }
            bool clear = true;
            for (const auto& other : clean) {
                for (std::size_t t = 0; t < steps && clear; ++t) {
                    AgentState a = traj[t];
                    AgentState b = other[t];
                    a.length += 1.0;
                    a.width += 0.5;
                    b.length += 1.0;
                    b.width += 0.5;
                    clear = !footprints_overlap(a, b);
                }
                if (!clear) {
                    break;
                }
            }
            if (clear) {
                break;
            }
        }
        clean.push_back(traj);
        sc.mode_labels.push_back(branch);
    }

    for (auto traj : clean) {
        if (cfg.noise_std > 0.0) {
            for (auto& s : traj) {
                s.x += cfg.noise_std * gaussian(rng);
                s.y += cfg.noise_std * gaussian(rng);
            }
            // Heading follows the noisy motion direction (backward difference).
            for (std::size_t t = steps; t-- > 1;) {
                traj[t].yaw = std::atan2(traj[t].y - traj[t - 1].y, traj[t].x - traj[t - 1].x);
            }
            traj[0].yaw = std::atan2(traj[1].y - traj[0].y, traj[1].x - traj[0].x);
        }
        sc.gt.push_back(std::move(traj));
    }
    return sc;
}

inline std::vector<Scenario> generate_fork_world(std::size_t n_scenarios, const ForkWorldConfig& cfg,
                                                 std::uint64_t seed) {
    validate(cfg);
    std::vector<Scenario> out;
    out.reserve(n_scenarios);
    for (std::size_t i = 0; i < n_scenarios; ++i) {
        out.push_back(generate_fork_scenario(cfg, seed, i));
    }
    return out;
}

/// Held-out membership from a stable hash of the scenario id.
inline bool is_heldout(const std::string& id, double fraction = 0.1) {
    return static_cast<double>(fnv1a64(id) % 1000000ULL) < fraction * 1e6;
}

struct ScenarioSplit {
    std::vector<Scenario> train;
    std::vector<Scenario> heldout;
};

/// Generates scenarios by increasing index and routes each by its id hash
/// until both sides are full. Membership of a given id never changes.
inline ScenarioSplit generate_fork_split(std::size_t n_train, std::size_t n_heldout, const ForkWorldConfig& cfg,
                                         std::uint64_t seed, double heldout_fraction = 0.1) {
    validate(cfg);
    ScenarioSplit split;
    for (std::size_t i = 0; split.train.size() < n_train || split.heldout.size() < n_heldout; ++i) {
        auto sc = generate_fork_scenario(cfg, seed, i);
        auto& side = is_heldout(sc.id, heldout_fraction) ? split.heldout : split.train;
        const std::size_t cap = &side == &split.heldout ? n_heldout : n_train;
        if (side.size() < cap) {
            side.push_back(std::move(sc));
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence. Line 1 is a header object, then one scenario per line.

inline nlohmann::json to_json(const Scenario& s) {
    using nlohmann::json;
    json region = json::array();
    for (const auto& p : s.map.drivable_region) {
        region.push_back({p.x, p.y});
    }
    json lanes = json::array();
    for (const auto& lane : s.map.lane_centerlines) {
        json l = json::array();
        for (const auto& p : lane) {
            l.push_back({p.x, p.y});
        }
        lanes.push_back(std::move(l));
    }
    json map{{"drivable_region", std::move(region)}, {"lanes", std::move(lanes)}};
    if (!s.map.goal_hints.empty()) {
        json hints = json::array();
        for (const auto& h : s.map.goal_hints) {
            hints.push_back(h ? json{h->x, h->y} : json(nullptr));
        }
        map["goal_hints"] = std::move(hints);
    }
    json agents = json::array();
    for (const auto& traj : s.gt) {
        json states = json::array();
        for (const auto& st : traj) {
            states.push_back({st.x, st.y, st.yaw});
        }
        const double length = traj.empty() ? 0.0 : traj.front().length;
        const double width = traj.empty() ? 0.0 : traj.front().width;
        agents.push_back({{"length", length}, {"width", width}, {"traj", std::move(states)}});
    }
    json out{{"id", s.id}, {"map", std::move(map)}, {"agents", std::move(agents)}, {"H", s.history_len}};
    if (!s.mode_labels.empty()) {
        json labels = json::array();
        for (Branch b : s.mode_labels) {
            labels.push_back(to_string(b));
        }
        out["mode_label"] = std::move(labels);
    }
    return out;
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
    Scenario s;
    s.id = j.at("id").get<std::string>();
    const auto& map = j.at("map");
    for (const auto& p : map.at("drivable_region")) {
        s.map.drivable_region.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    for (const auto& lane : map.at("lanes")) {
        Polyline l;
        for (const auto& p : lane) {
            l.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        }
        s.map.lane_centerlines.push_back(std::move(l));
    }
    if (map.contains("goal_hints")) {
        for (const auto& h : map.at("goal_hints")) {
            s.map.goal_hints.push_back(h.is_null() ? std::nullopt
                                                   : std::optional<Point>(Point{h.at(0).get<double>(),
                                                                                h.at(1).get<double>()}));
        }
    }
    for (const auto& a : j.at("agents")) {
        const double length = a.at("length").get<double>();
        const double width = a.at("width").get<double>();
        Trajectory traj;
        for (const auto& st : a.at("traj")) {
            traj.push_back({st.at(0).get<double>(), st.at(1).get<double>(), st.at(2).get<double>(), length, width});
        }
        s.gt.push_back(std::move(traj));
    }
    s.history_len = j.at("H").get<std::size_t>();
    if (j.contains("mode_label")) {
        for (const auto& b : j.at("mode_label")) {
            s.mode_labels.push_back(branch_from_string(b.get<std::string>()));
        }
    }
    return s;
}

inline constexpr const char* kScenarioFormat = "catk-scenarios";

inline void write_scenarios(std::ostream& out, std::span<const Scenario> scenarios) {
    out << nlohmann::json{{"format", kScenarioFormat}, {"version", 1}, {"count", scenarios.size()}}.dump() << '\n';
    for (const auto& s : scenarios) {
        out << to_json(s).dump() << '\n';
    }
}

inline std::vector<Scenario> read_scenarios(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) {
        throw FormatError(lineno, "missing header");
    }
    std::size_t count = 0;
    try {
        const auto header = nlohmann::json::parse(line);
        if (header.at("format").get<std::string>() != kScenarioFormat || header.at("version").get<int>() != 1) {
            throw FormatError(lineno, "not a catk-scenarios v1 file");
        }
        count = header.at("count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(lineno, std::string("bad header: ") + e.what());
    }
    std::vector<Scenario> out;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(scenario_from_json(nlohmann::json::parse(line)));
            validate(out.back());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(lineno, e.what());
        } catch (const InvalidConfig& e) {
            throw FormatError(lineno, e.what());
        }
    }
    if (out.size() != count) {
        throw FormatError(lineno, "header announces " + std::to_string(count) + " scenarios, found " +
                                      std::to_string(out.size()));
    }
    return out;
}

inline void save_scenarios(const std::string& path, std::span<const Scenario> scenarios) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path + " for writing");
    }
    write_scenarios(f, scenarios);
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

inline std::vector<Scenario> load_scenarios(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path);
    }
    return read_scenarios(f);
}

/// Every GT trajectory of every agent, for vocabulary construction.
inline std::vector<Trajectory> all_trajectories(std::span<const Scenario> scenarios) {
    std::vector<Trajectory> out;
    for (const auto& s : scenarios) {
        out.insert(out.end(), s.gt.begin(), s.gt.end());
    }
    return out;
}

}  // namespace catk
