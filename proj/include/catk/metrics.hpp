#pragma once

// Closed-loop evaluation: ADE, minADE over rollout sets, collision and
// off-road rates, and histogram divergences of motion statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "catk/errors.hpp"
#include "catk/policy.hpp"
#include "catk/random.hpp"
#include "catk/rollout.hpp"
#include "catk/scenario.hpp"
#include "catk/world.hpp"

namespace catk {

/// Mean planar distance over all agents and steps.
inline double ade(std::span<const Trajectory> rollout, std::span<const Trajectory> gt) {
    if (rollout.size() != gt.size()) {
        throw LengthMismatch("ade: agent counts differ");
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < rollout.size(); ++i) {
        if (rollout[i].size() != gt[i].size()) {
            throw LengthMismatch("ade: trajectory lengths differ");
        }
        for (std::size_t t = 0; t < rollout[i].size(); ++t) {
            sum += planar_distance(rollout[i][t], gt[i][t]);
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

/// GT future (steps 1..T') of each record row, aligned with states[r][1..].
inline std::vector<Trajectory> future_pair(const RolloutRecord& rec, const Scenario& sc,
                                           std::vector<Trajectory>* gt_out) {
    std::vector<Trajectory> roll(rec.rows());
    gt_out->assign(rec.rows(), {});
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        const auto& g = sc.gt[rec.agents[r]];
        if (rec.states[r].size() + sc.history_len != g.size()) {
            throw LengthMismatch("rollout length does not match the scenario horizon");
        }
        roll[r].assign(rec.states[r].begin() + 1, rec.states[r].end());
        (*gt_out)[r].assign(g.begin() + static_cast<std::ptrdiff_t>(sc.history_len + 1), g.end());
    }
    return roll;
}

/// ADE of one record against its scenario's GT future.
inline double ade(const RolloutRecord& rec, const Scenario& sc) {
    std::vector<Trajectory> gt;
    const auto roll = future_pair(rec, sc, &gt);
    return ade(roll, gt);
}

/// minADE over R rollouts of the same scenario: per-agent minimum averaged
/// over agents by default, or the minimum of the all-agent ADE when joint.
inline double min_ade(std::span<const RolloutRecord> set, const Scenario& sc, bool joint = false) {
    if (set.empty()) {
        throw InvalidConfig("min_ade needs at least one rollout");
    }
    const std::size_t rows = set.front().rows();
    if (joint) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& rec : set) {
            best = std::min(best, ade(rec, sc));
        }
        return best;
    }
    std::vector<double> best(rows, std::numeric_limits<double>::infinity());
    for (const auto& rec : set) {
        if (rec.rows() != rows) {
            throw LengthMismatch("min_ade: rollouts control different agent sets");
        }
        std::vector<Trajectory> gt;
        const auto roll = future_pair(rec, sc, &gt);
        for (std::size_t r = 0; r < rows; ++r) {
            best[r] = std::min(best[r], ade(std::span<const Trajectory>(&roll[r], 1), std::span<const Trajectory>(&gt[r], 1)));
        }
    }
    double sum = 0.0;
    for (double b : best) {
        sum += b;
    }
    return rows == 0 ? 0.0 : sum / static_cast<double>(rows);
}

namespace detail {

/// States of every scenario agent at rollout step t as seen by row r.
inline std::vector<AgentState> scene_for_row(const Scenario& sc, const RolloutRecord& rec, std::size_t r,
                                             std::size_t t) {
    std::vector<AgentState> scene(sc.num_agents());
    for (std::size_t a = 0; a < sc.num_agents(); ++a) {
        scene[a] = sc.gt[a][sc.history_len + t];
    }
    if (rec.log_replay) {
        scene[rec.agents[r]] = rec.states[r][t];
    } else {
        for (std::size_t q = 0; q < rec.rows(); ++q) {
            scene[rec.agents[q]] = rec.states[q][t];
        }
    }
    return scene;
}

inline const Scenario& find_scenario(std::span<const Scenario> scenarios, const std::string& id) {
    for (const auto& sc : scenarios) {
        if (sc.id == id) {
            return sc;
        }
    }
    throw InvalidConfig("rollout refers to unknown scenario '" + id + "'");
}

}  // namespace detail

/// Whether row r of the record overlaps any other agent at a step >= 1.
/// Pairs already overlapping in GT at that step are ignored.
inline bool row_collides(const RolloutRecord& rec, const Scenario& sc, std::size_t r) {
    const std::size_t me = rec.agents[r];
    for (std::size_t t = 1; t <= rec.steps(); ++t) {
        const auto scene = detail::scene_for_row(sc, rec, r, t);
        for (std::size_t a = 0; a < scene.size(); ++a) {
            if (a == me) {
                continue;
            }
            const std::size_t g = sc.history_len + t;
            if (footprints_overlap(scene[me], scene[a]) && !footprints_overlap(sc.gt[me][g], sc.gt[a][g])) {
                return true;
            }
        }
    }
    return false;
}

inline bool row_offroad(const RolloutRecord& rec, const Scenario& sc, std::size_t r) {
    for (const auto& s : rec.states[r]) {
        if (!in_drivable(sc.map, s.x, s.y)) {
            return true;
        }
    }
    return false;
}

/// Fraction of (scenario, rollout, agent) triples that collide at any step.
inline double collision_rate(std::span<const RolloutRecord> rollouts, std::span<const Scenario> scenarios) {
    std::size_t hits = 0;
    std::size_t total = 0;
    for (const auto& rec : rollouts) {
        const auto& sc = detail::find_scenario(scenarios, rec.scenario_id);
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            hits += row_collides(rec, sc, r) ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

/// Fraction of agent-rollouts whose center leaves the drivable region at any step.
inline double offroad_rate(std::span<const RolloutRecord> rollouts, std::span<const Scenario> scenarios) {
    std::size_t hits = 0;
    std::size_t total = 0;
    for (const auto& rec : rollouts) {
        const auto& sc = detail::find_scenario(scenarios, rec.scenario_id);
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            hits += row_offroad(rec, sc, r) ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Realism histograms

struct HistogramSpec {
    double lo;
    double hi;
    std::size_t bins;
};

inline constexpr HistogramSpec kSpeedBins{0.0, 20.0, 40};          // m/s
inline constexpr HistogramSpec kAccelBins{-10.0, 10.0, 40};        // m/s^2
inline constexpr HistogramSpec kYawRateBins{-2.0, 2.0, 40};        // rad/s
inline constexpr HistogramSpec kNearestBins{0.0, 50.0, 50};        // m

/// Counts with out-of-range values clamped into the edge bins.
inline std::vector<double> histogram(std::span<const double> values, const HistogramSpec& spec) {
    std::vector<double> h(spec.bins, 0.0);
    const double width = (spec.hi - spec.lo) / static_cast<double>(spec.bins);
    for (double v : values) {
        if (!std::isfinite(v)) {
            continue;
        }
        auto k = static_cast<long long>(std::floor((v - spec.lo) / width));
        k = std::clamp<long long>(k, 0, static_cast<long long>(spec.bins) - 1);
        h[static_cast<std::size_t>(k)] += 1.0;
    }
    return h;
}

/// Jensen-Shannon divergence in bits between two (unnormalized) histograms.
inline double jensen_shannon(std::span<const double> p_counts, std::span<const double> q_counts) {
    if (p_counts.size() != q_counts.size()) {
        throw LengthMismatch("histograms differ in bin count");
    }
    double sp = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < p_counts.size(); ++i) {
        sp += p_counts[i];
        sq += q_counts[i];
    }
    if (sp == 0.0 || sq == 0.0) {
        return sp == sq ? 0.0 : 1.0;
    }
    double js = 0.0;
    for (std::size_t i = 0; i < p_counts.size(); ++i) {
        const double p = p_counts[i] / sp;
        const double q = q_counts[i] / sq;
        const double m = 0.5 * (p + q);
        if (p > 0.0) {
            js += 0.5 * p * std::log2(p / m);
        }
        if (q > 0.0) {
            js += 0.5 * q * std::log2(q / m);
        }
    }
    return std::clamp(js, 0.0, 1.0);
}

struct RealismScores {
    double speed = 0.0;
    double acceleration = 0.0;
    double yaw_rate = 0.0;
    double nearest_distance = 0.0;

    friend bool operator==(const RealismScores&, const RealismScores&) = default;
};

struct MotionSamples {
    std::vector<double> speed;
    std::vector<double> acceleration;
    std::vector<double> yaw_rate;
    std::vector<double> nearest_distance;
};

/// Appends the motion statistics of one trajectory; `scene_at(t)` yields the
/// positions of the other agents at step t.
template <class Others>
void add_motion(const Trajectory& traj, double dt, Others&& others_at, MotionSamples& out) {
    double prev_speed = 0.0;
    for (std::size_t t = 1; t < traj.size(); ++t) {
        const double v = planar_distance(traj[t], traj[t - 1]) / dt;
        out.speed.push_back(v);
        out.yaw_rate.push_back(wrap_angle(traj[t].yaw - traj[t - 1].yaw) / dt);
        if (t >= 2) {
            out.acceleration.push_back((v - prev_speed) / dt);
        }
        prev_speed = v;
    }
    for (std::size_t t = 0; t < traj.size(); ++t) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& o : others_at(t)) {
            best = std::min(best, planar_distance(traj[t], o));
        }
        if (std::isfinite(best)) {
            out.nearest_distance.push_back(best);
        }
    }
}

inline RealismScores divergence(const MotionSamples& a, const MotionSamples& b) {
    RealismScores s;
    s.speed = jensen_shannon(histogram(a.speed, kSpeedBins), histogram(b.speed, kSpeedBins));
    s.acceleration = jensen_shannon(histogram(a.acceleration, kAccelBins), histogram(b.acceleration, kAccelBins));
    s.yaw_rate = jensen_shannon(histogram(a.yaw_rate, kYawRateBins), histogram(b.yaw_rate, kYawRateBins));
    s.nearest_distance =
        jensen_shannon(histogram(a.nearest_distance, kNearestBins), histogram(b.nearest_distance, kNearestBins));
    return s;
}

/// Per-feature JSD between the rollout population and the GT futures of the
/// same agents.
inline RealismScores realism_divergence(std::span<const RolloutRecord> rollouts, std::span<const Scenario> scenarios,
                                        double dt = kDefaultReplanningPeriod) {
    if (rollouts.empty()) {
        throw InvalidConfig("realism_divergence needs at least one rollout");
    }
    MotionSamples roll;
    MotionSamples gt;
    for (const auto& rec : rollouts) {
        const auto& sc = detail::find_scenario(scenarios, rec.scenario_id);
        const std::size_t h = sc.history_len;
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            const std::size_t me = rec.agents[r];
            add_motion(rec.states[r], dt,
                       [&](std::size_t t) {
                           auto scene = detail::scene_for_row(sc, rec, r, t);
                           scene.erase(scene.begin() + static_cast<std::ptrdiff_t>(me));
                           return scene;
                       },
                       roll);
            const Trajectory future(sc.gt[me].begin() + static_cast<std::ptrdiff_t>(h), sc.gt[me].end());
            add_motion(future, dt,
                       [&](std::size_t t) {
                           std::vector<AgentState> others;
                           for (std::size_t a = 0; a < sc.num_agents(); ++a) {
                               if (a != me) {
                                   others.push_back(sc.gt[a][h + t]);
                               }
                           }
                           return others;
                       },
                       gt);
        }
    }
    return divergence(roll, gt);
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    double ade = 0.0;
    double min_ade = 0.0;
    double collision_rate = 0.0;
    double offroad_rate = 0.0;
    RealismScores realism;
    std::size_t n_scenarios = 0;
    std::size_t n_rollouts = 0;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline std::string format_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline constexpr const char* kEvalCsvHeader =
    "ade,min_ade,collision_rate,offroad_rate,jsd_speed,jsd_accel,jsd_yaw_rate,jsd_nearest,n_scenarios,n_rollouts";

inline std::string to_csv_row(const EvalReport& r) {
    std::ostringstream out;
    out << format_metric(r.ade) << ',' << format_metric(r.min_ade) << ',' << format_metric(r.collision_rate) << ','
        << format_metric(r.offroad_rate) << ',' << format_metric(r.realism.speed) << ','
        << format_metric(r.realism.acceleration) << ',' << format_metric(r.realism.yaw_rate) << ','
        << format_metric(r.realism.nearest_distance) << ',' << r.n_scenarios << ',' << r.n_rollouts;
    return out.str();
}

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"ade", r.ade},
            {"min_ade", r.min_ade},
            {"collision_rate", r.collision_rate},
            {"offroad_rate", r.offroad_rate},
            {"realism",
             {{"speed", r.realism.speed},
              {"acceleration", r.realism.acceleration},
              {"yaw_rate", r.realism.yaw_rate},
              {"nearest_distance", r.realism.nearest_distance}}},
            {"n_scenarios", r.n_scenarios},
            {"n_rollouts", r.n_rollouts}};
}

/// Aggregates R rollouts per scenario (grouped as consecutive blocks of
/// `per_scenario` records in scenario order) into a report.
inline EvalReport summarize(std::span<const RolloutRecord> rollouts, std::span<const Scenario> scenarios,
                            std::size_t per_scenario, bool joint_min = false, double dt = kDefaultReplanningPeriod) {
    if (per_scenario == 0 || rollouts.size() != per_scenario * scenarios.size()) {
        throw LengthMismatch("summarize: expected R rollouts for every scenario");
    }
    EvalReport rep;
    rep.n_scenarios = scenarios.size();
    rep.n_rollouts = per_scenario;
    double ade_sum = 0.0;
    double min_sum = 0.0;
    std::size_t agents = 0;
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
        const auto block = rollouts.subspan(s * per_scenario, per_scenario);
        const std::size_t rows = block.front().rows();
        for (const auto& rec : block) {
            ade_sum += ade(rec, scenarios[s]) * static_cast<double>(rows);
        }
        min_sum += min_ade(block, scenarios[s], joint_min) * static_cast<double>(rows);
        agents += rows;
    }
    rep.ade = agents == 0 ? 0.0 : ade_sum / static_cast<double>(agents * per_scenario);
    rep.min_ade = agents == 0 ? 0.0 : min_sum / static_cast<double>(agents);
    rep.collision_rate = collision_rate(rollouts, scenarios);
    rep.offroad_rate = offroad_rate(rollouts, scenarios);
    rep.realism = realism_divergence(rollouts, scenarios, dt);
    return rep;
}

struct EvalConfig {
    std::size_t rollouts = 16;  // R
    std::size_t K_infer = 8;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool joint_min = false;
};

inline std::uint64_t eval_rollout_seed(std::uint64_t seed, std::size_t scenario, std::size_t r) {
    return derive_seed(seed, 0x6576616c0000ULL + scenario, r);
}

/// Samples R top-K rollouts per scenario with seeds that depend only on
/// (seed, scenario position, rollout index), so different models are
/// compared under identical sampling noise.
inline std::vector<RolloutRecord> sample_rollouts(const PolicyModel& model, std::span<const Scenario> scenarios,
                                                  const TokenVocabulary& vocab, const EvalConfig& cfg) {
    std::vector<RolloutRecord> out;
    out.reserve(scenarios.size() * cfg.rollouts);
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
        for (std::size_t r = 0; r < cfg.rollouts; ++r) {
            if (model.config.kind == HeadKind::gmm) {
                out.push_back(rollout_gmm_sample(model, scenarios[s], cfg.K_infer, cfg.temperature,
                                                 eval_rollout_seed(cfg.seed, s, r), vocab.replanning_period));
            } else {
                out.push_back(rollout_sample(model, scenarios[s], vocab, cfg.K_infer, cfg.temperature,
                                             eval_rollout_seed(cfg.seed, s, r)));
            }
        }
    }
    return out;
}

inline EvalReport evaluate(const PolicyModel& model, std::span<const Scenario> scenarios,
                           const TokenVocabulary& vocab, const EvalConfig& cfg) {
    if (cfg.rollouts < 1) {
        throw InvalidConfig("eval needs at least one rollout per scenario");
    }
    if (scenarios.empty()) {
        throw InvalidConfig("eval needs at least one scenario");
    }
    const auto rolls = sample_rollouts(model, scenarios, vocab, cfg);
    return summarize(rolls, scenarios, cfg.rollouts, cfg.joint_min, vocab.replanning_period);
}

}  // namespace catk
