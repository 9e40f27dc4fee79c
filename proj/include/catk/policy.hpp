#pragma once

// Feature-conditioned policies: a shared 2-layer tanh MLP trunk with either a
// categorical head over the token vocabulary or a Gaussian-mixture head over
// continuous (dx, dy, dyaw) deltas. Gradients are derived by hand.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "catk/errors.hpp"
#include "catk/random.hpp"
#include "catk/world.hpp"

namespace catk {

// ---------------------------------------------------------------------------
// Feature encoding

inline constexpr std::size_t kNeighborSlots = 4;
inline constexpr double kFeatureClamp = 50.0;

/// Width of the feature vector for a history of H past steps.
inline constexpr std::size_t feature_dim(std::size_t history_len) {
    return 3 * history_len + 1 + 3 + 3 * kNeighborSlots + 1;
}

struct LaneProjection {
    double lateral = 0.0;        // signed, positive to the left of travel direction
    double remaining = 0.0;      // arc length from the foot point to the polyline end
    double heading_error = 0.0;  // wrap(yaw - lane heading)
    bool found = false;
};

/// Nearest centerline segment under distance + 4 m * (1 - cos heading error),
/// which keeps opposite-direction lanes from winning on proximity alone.
inline LaneProjection nearest_lane(const MapContext& map, const AgentState& s) {
    LaneProjection best;
    double best_score = std::numeric_limits<double>::infinity();
    const Point p{s.x, s.y};
    const double cy = std::cos(s.yaw);
    const double sy = std::sin(s.yaw);
    std::size_t best_lane = 0;
    std::size_t best_seg = 0;
    SegmentProjection best_proj;
    for (std::size_t li = 0; li < map.lane_centerlines.size(); ++li) {
        const auto& lane = map.lane_centerlines[li];
        for (std::size_t k = 0; k + 1 < lane.size(); ++k) {
            const double vx = lane[k + 1].x - lane[k].x;
            const double vy = lane[k + 1].y - lane[k].y;
            const double len = std::hypot(vx, vy);
            if (len == 0.0) {
                continue;
            }
            const auto proj = project_to_segment(p, lane[k], lane[k + 1]);
            const double cos_err = (cy * vx + sy * vy) / len;
            const double score = proj.distance + 4.0 * (1.0 - cos_err);
            if (score < best_score) {
                best_score = score;
                best_lane = li;
                best_seg = k;
                best_proj = proj;
                best.found = true;
            }
        }
    }
    if (!best.found) {
        return best;
    }
    const auto& lane = map.lane_centerlines[best_lane];
    const Point a = lane[best_seg];
    const Point b = lane[best_seg + 1];
    const double seg_len = std::hypot(b.x - a.x, b.y - a.y);
    best.lateral = detail::cross(a, b, p) >= 0.0 ? best_proj.distance : -best_proj.distance;
    best.remaining = (1.0 - best_proj.t) * seg_len;
    for (std::size_t k = best_seg + 1; k + 1 < lane.size(); ++k) {
        best.remaining += std::hypot(lane[k + 1].x - lane[k].x, lane[k + 1].y - lane[k].y);
    }
    best.heading_error = wrap_angle(s.yaw - std::atan2(b.y - a.y, b.x - a.x));
    return best;
}

/// Ego-frame features of the latest state in `history` (H+1 states, oldest
/// first): past poses, speed, nearest-lane offsets, the k nearest neighbors
/// (zero padded) and the signed distance to the drivable boundary. Every
/// component is clamped to [-50, 50].
inline void encode_into(std::span<const AgentState> history, std::span<const AgentState> neighbors,
                        const MapContext& map, double dt, std::span<double> out) {
    const std::size_t h = history.size() - 1;
    const AgentState& ego = history.back();
    const double c = std::cos(ego.yaw);
    const double sn = std::sin(ego.yaw);
    auto local = [&](const AgentState& o, double* dst) {
        const double ex = o.x - ego.x;
        const double ey = o.y - ego.y;
        dst[0] = (c * ex + sn * ey) / 10.0;
        dst[1] = (-sn * ex + c * ey) / 10.0;
        dst[2] = wrap_angle(o.yaw - ego.yaw);
    };
    std::size_t k = 0;
    for (std::size_t back = 1; back <= h; ++back) {
        local(history[h - back], &out[k]);
        k += 3;
    }
    out[k++] = h >= 1 ? planar_distance(history[h], history[h - 1]) / dt / 10.0 : 0.0;

    const auto lane = nearest_lane(map, ego);
    out[k++] = lane.lateral / 2.0;
    out[k++] = lane.remaining / 20.0;
    out[k++] = lane.heading_error;

    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(neighbors.size());
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        order.emplace_back(planar_distance(neighbors[i], ego), i);
    }
    std::sort(order.begin(), order.end());
    for (std::size_t slot = 0; slot < kNeighborSlots; ++slot) {
        if (slot < order.size()) {
            local(neighbors[order[slot].second], &out[k]);
        } else {
            out[k] = out[k + 1] = out[k + 2] = 0.0;
        }
        k += 3;
    }
    out[k++] = map.drivable_region.size() >= 3
                   ? signed_boundary_distance(map.drivable_region, {ego.x, ego.y}) / 5.0
                   : 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        out[i] = std::clamp(out[i], -kFeatureClamp, kFeatureClamp);
    }
}

inline std::vector<double> encode(std::span<const AgentState> history, std::span<const AgentState> neighbors,
                                  const MapContext& map, double dt = 0.5) {
    std::vector<double> out(feature_dim(history.size() - 1));
    encode_into(history, neighbors, map, dt, out);
    return out;
}

// ---------------------------------------------------------------------------
// Model

enum class HeadKind : std::uint64_t { categorical = 0, gmm = 1 };

struct ModelConfig {
    HeadKind kind = HeadKind::categorical;
    std::size_t features = feature_dim(4);
    std::size_t hidden = 64;
    std::size_t outputs = 64;  // |V| for categorical, mixture modes for gmm
    double sigma = 0.2;        // gmm only
};

/// Offsets of each parameter block inside the flat parameter vector. The
/// order is also the checkpoint layout: W1, b1, W2, b2, then the head
/// (categorical: Wo, bo; gmm: Wmix, bmix, Wmu, bmu). Matrices are
/// column-major, rows = output units.
struct ParamLayout {
    std::size_t w1, b1, w2, b2, wo, bo, wmu, bmu, total;

    explicit ParamLayout(const ModelConfig& c) {
        const std::size_t f = c.features;
        const std::size_t h = c.hidden;
        const std::size_t o = c.outputs;
        w1 = 0;
        b1 = w1 + h * f;
        w2 = b1 + h;
        b2 = w2 + h * h;
        wo = b2 + h;
        bo = wo + o * h;
        wmu = bo + o;
        bmu = c.kind == HeadKind::gmm ? wmu + 3 * o * h : wmu;
        total = c.kind == HeadKind::gmm ? bmu + 3 * o : wmu;
    }
};

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;

struct PolicyModel {
    ModelConfig config;
    Vector params;

    ParamLayout layout() const { return ParamLayout(config); }

    ConstMatMap block(std::size_t offset, std::size_t rows, std::size_t cols) const {
        return {params.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
    }

    friend bool operator==(const PolicyModel& a, const PolicyModel& b) {
        return a.config.kind == b.config.kind && a.config.features == b.config.features &&
               a.config.hidden == b.config.hidden && a.config.outputs == b.config.outputs &&
               std::bit_cast<std::uint64_t>(a.config.sigma) == std::bit_cast<std::uint64_t>(b.config.sigma) &&
               a.params.size() == b.params.size() &&
               std::memcmp(a.params.data(), b.params.data(), sizeof(double) * a.params.size()) == 0;
    }
};

/// Weights ~ N(0, 1/fan_in), biases 0.
inline PolicyModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.features == 0 || cfg.hidden == 0 || cfg.outputs == 0) {
        throw InvalidConfig("model dimensions must be positive");
    }
    if (cfg.kind == HeadKind::categorical && cfg.outputs < 2) {
        throw InvalidConfig("categorical head needs at least 2 outputs");
    }
    if (cfg.kind == HeadKind::gmm && !(cfg.sigma > 0.0)) {
        throw InvalidConfig("gmm sigma must be positive");
    }
    PolicyModel m{cfg, Vector::Zero(static_cast<Eigen::Index>(ParamLayout(cfg).total))};
    const ParamLayout l(cfg);
    Rng rng(seed);
    auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < count; ++i) {
            m.params[static_cast<Eigen::Index>(offset + i)] = scale * gaussian(rng);
        }
    };
    fill(l.w1, cfg.hidden * cfg.features, cfg.features);
    fill(l.w2, cfg.hidden * cfg.hidden, cfg.hidden);
    fill(l.wo, cfg.outputs * cfg.hidden, cfg.hidden);
    if (cfg.kind == HeadKind::gmm) {
        fill(l.wmu, 3 * cfg.outputs * cfg.hidden, cfg.hidden);
    }
    return m;
}

namespace detail {

struct TrunkActivations {
    Matrix a1;
    Matrix a2;
};

inline TrunkActivations trunk_forward(const PolicyModel& m, const Matrix& x) {
    const auto& c = m.config;
    const ParamLayout l(c);
    TrunkActivations act;
    act.a1 = (m.block(l.w1, c.hidden, c.features) * x).colwise() + m.block(l.b1, c.hidden, 1).col(0);
    act.a1 = act.a1.array().tanh();
    act.a2 = (m.block(l.w2, c.hidden, c.hidden) * act.a1).colwise() + m.block(l.b2, c.hidden, 1).col(0);
    act.a2 = act.a2.array().tanh();
    return act;
}

/// Accumulates trunk gradients given dLoss/dA2.
inline void trunk_backward(const PolicyModel& m, const Matrix& x, const TrunkActivations& act, const Matrix& d_a2,
                           Vector& grad) {
    const auto& c = m.config;
    const ParamLayout l(c);
    const auto h = static_cast<Eigen::Index>(c.hidden);
    const auto f = static_cast<Eigen::Index>(c.features);
    const Matrix dz2 = d_a2.array() * (1.0 - act.a2.array().square());
    MatMap(grad.data() + l.w2, h, h) += dz2 * act.a1.transpose();
    grad.segment(static_cast<Eigen::Index>(l.b2), h) += dz2.rowwise().sum();
    const Matrix d_a1 = m.block(l.w2, c.hidden, c.hidden).transpose() * dz2;
    const Matrix dz1 = d_a1.array() * (1.0 - act.a1.array().square());
    MatMap(grad.data() + l.w1, h, f) += dz1 * x.transpose();
    grad.segment(static_cast<Eigen::Index>(l.b1), h) += dz1.rowwise().sum();
}

/// Column-wise numerically stable softmax.
inline Matrix softmax_cols(const Matrix& logits) {
    Matrix p = logits.rowwise() - logits.colwise().maxCoeff();
    p = p.array().exp();
    p.array().rowwise() /= p.colwise().sum().array();
    return p;
}

}  // namespace detail

/// Stacks feature vectors as columns.
inline Matrix feature_matrix(std::span<const std::vector<double>> rows) {
    if (rows.empty()) {
        return {};
    }
    Matrix x(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j) {
        x.col(static_cast<Eigen::Index>(j)) = ConstVecMap(rows[j].data(), static_cast<Eigen::Index>(rows[j].size()));
    }
    return x;
}

/// Logits for a batch of feature columns (|V| x B).
inline Matrix categorical_logits(const PolicyModel& m, const Matrix& x) {
    const auto& c = m.config;
    const ParamLayout l(c);
    const auto act = detail::trunk_forward(m, x);
    return (m.block(l.wo, c.outputs, c.hidden) * act.a2).colwise() + m.block(l.bo, c.outputs, 1).col(0);
}

struct CategoricalOutput {
    std::vector<double> logits;
    std::vector<double> probs;
};

/// Numerically stable softmax of one logit vector.
inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        sum += p[i];
    }
    for (double& v : p) {
        v /= sum;
    }
    return p;
}

inline CategoricalOutput forward_categorical(const PolicyModel& m, std::span<const double> features) {
    if (m.config.kind != HeadKind::categorical) {
        throw InvalidConfig("forward_categorical needs a categorical model");
    }
    const Matrix x = ConstVecMap(features.data(), static_cast<Eigen::Index>(features.size()));
    const Matrix logits = categorical_logits(m, x);
    CategoricalOutput out;
    out.logits.assign(logits.data(), logits.data() + logits.size());
    out.probs = softmax(out.logits);
    return out;
}

struct LossGrad {
    double loss = 0.0;
    Vector grad;
};

/// Mean cross-entropy over the batch and its gradient w.r.t. all parameters.
inline LossGrad ce_loss_grad(const PolicyModel& m, const Matrix& x, std::span<const std::size_t> targets) {
    const auto& c = m.config;
    if (c.kind != HeadKind::categorical) {
        throw InvalidConfig("ce_loss_grad needs a categorical model");
    }
    const ParamLayout l(c);
    const auto b = x.cols();
    const auto act = detail::trunk_forward(m, x);
    const Matrix logits =
        (m.block(l.wo, c.outputs, c.hidden) * act.a2).colwise() + m.block(l.bo, c.outputs, 1).col(0);
    Matrix p = detail::softmax_cols(logits);

    LossGrad out;
    out.grad = Vector::Zero(m.params.size());
    const double inv_b = 1.0 / static_cast<double>(b);
    for (Eigen::Index j = 0; j < b; ++j) {
        if (targets[static_cast<std::size_t>(j)] >= c.outputs) {
            throw InvalidConfig("target index out of range");
        }
        const auto t = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(j)]);
        // log p_t via log-sum-exp keeps the loss finite when p_t underflows.
        const double mx = logits.col(j).maxCoeff();
        const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
        out.loss += (lse - logits(t, j)) * inv_b;
        p(t, j) -= 1.0;
    }
    p *= inv_b;  // dLoss/dlogits
    const auto o = static_cast<Eigen::Index>(c.outputs);
    const auto h = static_cast<Eigen::Index>(c.hidden);
    MatMap(out.grad.data() + l.wo, o, h) = p * act.a2.transpose();
    out.grad.segment(static_cast<Eigen::Index>(l.bo), o) = p.rowwise().sum();
    const Matrix d_a2 = m.block(l.wo, c.outputs, c.hidden).transpose() * p;
    detail::trunk_backward(m, x, act, d_a2, out.grad);
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian-mixture head

struct GmmOutput {
    std::vector<double> weights;
    std::vector<ActionToken> means;
    double sigma = 0.0;
};

struct GmmBatch {
    Matrix mix_logits;  // M x B
    Matrix means;       // 3M x B, row 3m + d
};

inline GmmBatch gmm_forward_batch(const PolicyModel& m, const Matrix& x) {
    const auto& c = m.config;
    const ParamLayout l(c);
    const auto act = detail::trunk_forward(m, x);
    GmmBatch out;
    out.mix_logits = (m.block(l.wo, c.outputs, c.hidden) * act.a2).colwise() + m.block(l.bo, c.outputs, 1).col(0);
    out.means = (m.block(l.wmu, 3 * c.outputs, c.hidden) * act.a2).colwise() + m.block(l.bmu, 3 * c.outputs, 1).col(0);
    return out;
}

inline GmmOutput gmm_output_column(const PolicyModel& m, const GmmBatch& batch, Eigen::Index col) {
    GmmOutput out;
    const auto modes = m.config.outputs;
    std::vector<double> logits(modes);
    for (std::size_t k = 0; k < modes; ++k) {
        logits[k] = batch.mix_logits(static_cast<Eigen::Index>(k), col);
    }
    out.weights = softmax(logits);
    for (std::size_t k = 0; k < modes; ++k) {
        const auto r = static_cast<Eigen::Index>(3 * k);
        out.means.push_back({batch.means(r, col), batch.means(r + 1, col), batch.means(r + 2, col)});
    }
    out.sigma = m.config.sigma;
    return out;
}

inline GmmOutput forward_gmm(const PolicyModel& m, std::span<const double> features) {
    if (m.config.kind != HeadKind::gmm) {
        throw InvalidConfig("forward_gmm needs a gmm model");
    }
    const Matrix x = ConstVecMap(features.data(), static_cast<Eigen::Index>(features.size()));
    return gmm_output_column(m, gmm_forward_batch(m, x), 0);
}

/// Mean negative log-likelihood of target deltas under the mixture
/// sum_m w_m N(a; mu_m, sigma^2 I_3), with its gradient.
inline LossGrad gmm_nll_grad(const PolicyModel& m, const Matrix& x, std::span<const ActionToken> targets) {
    const auto& c = m.config;
    if (c.kind != HeadKind::gmm) {
        throw InvalidConfig("gmm_nll_grad needs a gmm model");
    }
    const ParamLayout l(c);
    const auto b = x.cols();
    const auto modes = static_cast<Eigen::Index>(c.outputs);
    const auto h = static_cast<Eigen::Index>(c.hidden);
    const auto act = detail::trunk_forward(m, x);
    const Matrix mix = (m.block(l.wo, c.outputs, c.hidden) * act.a2).colwise() + m.block(l.bo, c.outputs, 1).col(0);
    const Matrix mu = (m.block(l.wmu, 3 * c.outputs, c.hidden) * act.a2).colwise() + m.block(l.bmu, 3 * c.outputs, 1).col(0);

    const double var = c.sigma * c.sigma;
    const double log_norm = -1.5 * std::log(2.0 * kPi * var);
    const double inv_b = 1.0 / static_cast<double>(b);
    Matrix d_mix(modes, b);
    Matrix d_mu(3 * modes, b);
    LossGrad out;
    out.grad = Vector::Zero(m.params.size());
    Vector joint(modes);
    for (Eigen::Index j = 0; j < b; ++j) {
        const auto& a = targets[static_cast<std::size_t>(j)];
        const double mx_l = mix.col(j).maxCoeff();
        const double lse_l = mx_l + std::log((mix.col(j).array() - mx_l).exp().sum());
        for (Eigen::Index k = 0; k < modes; ++k) {
            const double ex = a.dx - mu(3 * k, j);
            const double ey = a.dy - mu(3 * k + 1, j);
            const double ez = a.dyaw - mu(3 * k + 2, j);
            joint(k) = (mix(k, j) - lse_l) + log_norm - 0.5 * (ex * ex + ey * ey + ez * ez) / var;
        }
        const double mx = joint.maxCoeff();
        const double lse = mx + std::log((joint.array() - mx).exp().sum());
        out.loss -= lse * inv_b;
        for (Eigen::Index k = 0; k < modes; ++k) {
            const double resp = std::exp(joint(k) - lse);
            const double w = std::exp(mix(k, j) - lse_l);
            d_mix(k, j) = (w - resp) * inv_b;
            d_mu(3 * k, j) = -resp * (a.dx - mu(3 * k, j)) / var * inv_b;
            d_mu(3 * k + 1, j) = -resp * (a.dy - mu(3 * k + 1, j)) / var * inv_b;
            d_mu(3 * k + 2, j) = -resp * (a.dyaw - mu(3 * k + 2, j)) / var * inv_b;
        }
    }
    MatMap(out.grad.data() + l.wo, modes, h) = d_mix * act.a2.transpose();
    out.grad.segment(static_cast<Eigen::Index>(l.bo), modes) = d_mix.rowwise().sum();
    MatMap(out.grad.data() + l.wmu, 3 * modes, h) = d_mu * act.a2.transpose();
    out.grad.segment(static_cast<Eigen::Index>(l.bmu), 3 * modes) = d_mu.rowwise().sum();
    const Matrix d_a2 = m.block(l.wo, c.outputs, c.hidden).transpose() * d_mix +
                        m.block(l.wmu, 3 * c.outputs, c.hidden).transpose() * d_mu;
    detail::trunk_backward(m, x, act, d_a2, out.grad);
    return out;
}

// ---------------------------------------------------------------------------
// Adam with linear learning-rate decay to a floor fraction of the initial rate.

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double floor_fraction = 0.01;
    std::uint64_t total_steps = 1;
};

struct AdamState {
    Vector m;
    Vector v;
    std::uint64_t step = 0;

    friend bool operator==(const AdamState& a, const AdamState& b) {
        return a.step == b.step && a.m.size() == b.m.size() && a.v.size() == b.v.size() &&
               std::memcmp(a.m.data(), b.m.data(), sizeof(double) * a.m.size()) == 0 &&
               std::memcmp(a.v.data(), b.v.data(), sizeof(double) * a.v.size()) == 0;
    }
};

inline AdamState make_adam_state(const PolicyModel& model) {
    return {Vector::Zero(model.params.size()), Vector::Zero(model.params.size()), 0};
}

inline double scheduled_learning_rate(const AdamConfig& cfg, std::uint64_t step) {
    if (cfg.total_steps <= 1) {
        return cfg.learning_rate;
    }
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.total_steps - 1));
    return cfg.learning_rate * (1.0 - (1.0 - cfg.floor_fraction) * frac);
}

inline void adam_step(Vector& params, const Vector& grad, AdamState& st, const AdamConfig& cfg) {
    if (grad.size() != params.size() || st.m.size() != params.size()) {
        throw InvalidConfig("gradient shape does not match the model");
    }
    const double lr = scheduled_learning_rate(cfg, st.step);
    ++st.step;
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    params.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + cfg.eps);
}

inline void optimizer_step(PolicyModel& model, const Vector& grad, AdamState& st, const AdamConfig& cfg) {
    adam_step(model.params, grad, st, cfg);
    if (!model.params.allFinite()) {
        throw DivergenceError("non-finite parameters after optimizer step");
    }
}

// ---------------------------------------------------------------------------
// Binary checkpoints: magic "CATKMDL1", then little-endian u64 kind, features,
// hidden, outputs, f64 sigma, u64 parameter count, f64 parameters.

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct Reader {
    std::string_view data;
    std::size_t pos = 0;

    std::uint64_t u64() {
        if (pos + 8 > data.size()) {
            throw FormatError(1, "checkpoint truncated at byte " + std::to_string(pos));
        }
        std::uint64_t v = 0;
        std::memcpy(&v, data.data() + pos, 8);
        pos += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path + " for writing");
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

}  // namespace detail

inline constexpr std::string_view kModelMagic = "CATKMDL1";
inline constexpr std::string_view kOptimizerMagic = "CATKOPT1";

inline std::string serialize_model(const PolicyModel& m) {
    std::string out(kModelMagic);
    detail::put_u64(out, static_cast<std::uint64_t>(m.config.kind));
    detail::put_u64(out, m.config.features);
    detail::put_u64(out, m.config.hidden);
    detail::put_u64(out, m.config.outputs);
    detail::put_f64(out, m.config.sigma);
    detail::put_u64(out, static_cast<std::uint64_t>(m.params.size()));
    for (Eigen::Index i = 0; i < m.params.size(); ++i) {
        detail::put_f64(out, m.params[i]);
    }
    return out;
}

inline PolicyModel parse_model(std::string_view bytes) {
    if (bytes.substr(0, 8) != kModelMagic) {
        throw FormatError(1, "missing CATKMDL1 magic");
    }
    detail::Reader r{bytes, 8};
    PolicyModel m;
    const auto kind = r.u64();
    if (kind > 1) {
        throw FormatError(1, "unknown head kind " + std::to_string(kind));
    }
    m.config.kind = static_cast<HeadKind>(kind);
    m.config.features = r.u64();
    m.config.hidden = r.u64();
    m.config.outputs = r.u64();
    m.config.sigma = r.f64();
    const auto n = r.u64();
    if (n != ParamLayout(m.config).total) {
        throw FormatError(1, "parameter count does not match the declared architecture");
    }
    m.params.resize(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < m.params.size(); ++i) {
        m.params[i] = r.f64();
    }
    if (r.pos != bytes.size()) {
        throw FormatError(1, "trailing bytes after parameters");
    }
    return m;
}

inline void save_model(const std::string& path, const PolicyModel& m) { detail::write_file(path, serialize_model(m)); }

inline PolicyModel load_model(const std::string& path) { return parse_model(detail::read_file(path)); }

inline std::string serialize_optimizer(const AdamState& st) {
    std::string out(kOptimizerMagic);
    detail::put_u64(out, st.step);
    detail::put_u64(out, static_cast<std::uint64_t>(st.m.size()));
    for (Eigen::Index i = 0; i < st.m.size(); ++i) {
        detail::put_f64(out, st.m[i]);
    }
    for (Eigen::Index i = 0; i < st.v.size(); ++i) {
        detail::put_f64(out, st.v[i]);
    }
    return out;
}

inline AdamState parse_optimizer(std::string_view bytes) {
    if (bytes.substr(0, 8) != kOptimizerMagic) {
        throw FormatError(1, "missing CATKOPT1 magic");
    }
    detail::Reader r{bytes, 8};
    AdamState st;
    st.step = r.u64();
    const auto n = static_cast<Eigen::Index>(r.u64());
    st.m.resize(n);
    st.v.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        st.m[i] = r.f64();
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        st.v[i] = r.f64();
    }
    return st;
}

}  // namespace catk
