#pragma once

// Closed-loop rollouts and policy-free trajectory noising. Every generator
// returns a RolloutRecord whose states start at the last history state and
// satisfy states[t + 1] = apply_token(states[t], vocab[chosen[t]]).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "catk/errors.hpp"
#include "catk/policy.hpp"
#include "catk/random.hpp"
#include "catk/scenario.hpp"
#include "catk/vocabulary.hpp"
#include "catk/world.hpp"

namespace catk {

enum class RolloutKind { catk, sample, deterministic, trajeglish, smart, teacher, gmm_catk, gmm_sample, gmm_teacher };

inline const char* to_string(RolloutKind k) {
    switch (k) {
        case RolloutKind::catk: return "catk";
        case RolloutKind::sample: return "sample";
        case RolloutKind::deterministic: return "deterministic";
        case RolloutKind::trajeglish: return "trajeglish";
        case RolloutKind::smart: return "smart";
        case RolloutKind::teacher: return "teacher";
        case RolloutKind::gmm_catk: return "gmm_catk";
        case RolloutKind::gmm_sample: return "gmm_sample";
        case RolloutKind::gmm_teacher: return "gmm_teacher";
    }
    return "?";
}

enum class SampleRule { neg_dist, uniform };

inline SampleRule sample_rule_from_string(const std::string& s) {
    if (s == "neg_dist" || s == "neg-dist") return SampleRule::neg_dist;
    if (s == "uniform") return SampleRule::uniform;
    throw InvalidConfig("unknown sample rule '" + s + "'");
}

inline const char* to_string(SampleRule r) { return r == SampleRule::neg_dist ? "neg_dist" : "uniform"; }

struct SamplerConfig {
    std::size_t K = 16;                 // training-time selection width
    std::size_t K_infer = 8;            // inference-time top-K sampling width
    double tau = 1.0;                   // noisy-tokenization and distance-weighting temperature
    double temperature = 1.0;           // softmax temperature for top-K sampling
    double distance_threshold = 2.0;    // meters, filter variants
    std::size_t candidates = 4;         // rollouts drawn per scenario for distance-weighted choice
    SampleRule rule = SampleRule::neg_dist;
};

inline void validate(const SamplerConfig& s, std::size_t vocab_size) {
    if (s.K < 1 || s.K > vocab_size) {
        throw InvalidConfig("sampler K must lie in [1, |V|]");
    }
    if (s.K_infer < 1 || s.K_infer > vocab_size) {
        throw InvalidConfig("sampler K_infer must lie in [1, |V|]");
    }
    if (!(s.tau > 0.0) || !(s.temperature > 0.0)) {
        throw InvalidConfig("sampler temperatures must be positive");
    }
    if (!(s.distance_threshold >= 0.0)) {
        throw InvalidConfig("distance_threshold must be non-negative");
    }
    if (s.candidates < 1) {
        throw InvalidConfig("sampler candidates must be at least 1");
    }
}

struct RolloutRecord {
    std::string scenario_id;
    std::vector<std::size_t> agents;                   // scenario agent index of each row
    std::vector<Trajectory> states;                    // rows x (T'+1), T' = T - H
    std::vector<std::vector<std::size_t>> chosen;      // rows x T'
    std::vector<std::vector<std::size_t>> targets;     // rows x pairs, token indices
    std::vector<std::vector<ActionToken>> target_deltas;  // rows x pairs, gmm targets
    std::vector<std::vector<ActionToken>> actions;     // rows x T', gmm chosen means
    std::vector<std::vector<double>> probs_at_chosen;  // rows x T'
    std::vector<char> active;                          // rows; inactive rows carry no loss
    std::size_t target_offset = 0;                     // pair t is taken at states[t + target_offset]
    bool log_replay = false;                           // rows see other agents' GT, not their rollouts
    RolloutKind kind = RolloutKind::catk;
    std::uint64_t seed = 0;

    std::size_t rows() const { return agents.size(); }
    std::size_t steps() const { return states.empty() ? 0 : states.front().size() - 1; }

    friend bool operator==(const RolloutRecord&, const RolloutRecord&) = default;
};

// ---------------------------------------------------------------------------
// Selection primitives

/// Indices of the K largest probabilities, descending, lower index first on ties.
inline std::vector<std::size_t> topk_indices(std::span<const double> probs, std::size_t k) {
    if (k < 1 || k > probs.size()) {
        throw InvalidConfig("topk_indices needs 1 <= K <= |V|");
    }
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
        return probs[a] > probs[b] || (probs[a] == probs[b] && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
}

/// Among the K most probable tokens, the one whose successor state is closest
/// to gt_next. Candidates are visited in probability order and only a strictly
/// smaller distance replaces the incumbent, which realizes the tie rule.
inline std::size_t catk_select(std::span<const double> probs, const AgentState& state, const AgentState& gt_next,
                               const TokenVocabulary& vocab, std::size_t k, double yaw_weight = kDefaultYawWeight,
                               double* achieved = nullptr) {
    if (probs.size() != vocab.size()) {
        throw InvalidConfig("catk_select: probability vector and vocabulary differ in size");
    }
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c : topk_indices(probs, k)) {
        const double d = state_distance(apply_token(state, vocab[c]), gt_next, yaw_weight);
        if (d < bd) {
            bd = d;
            best = c;
        }
    }
    if (achieved != nullptr) {
        *achieved = bd;
    }
    return best;
}

/// Renormalized softmax(logits / temperature) over the top-K indices; entries
/// outside the top K are zero.
inline std::vector<double> truncated_distribution(std::span<const double> logits, std::span<const double> probs,
                                                  std::size_t k, double temperature) {
    const auto top = topk_indices(probs, k);
    std::vector<double> q(logits.size(), 0.0);
    const double mx = logits[top.front()];
    double sum = 0.0;
    for (std::size_t c : top) {
        q[c] = std::exp((logits[c] - mx) / temperature);
        sum += q[c];
    }
    for (std::size_t c : top) {
        q[c] /= sum;
    }
    return q;
}

/// Inverse-CDF draw over `order` with weights `w` (indexed like `order`).
inline std::size_t draw_index(std::span<const std::size_t> order, std::span<const double> w, double u) {
    double total = 0.0;
    for (double v : w) {
        total += v;
    }
    double acc = 0.0;
    const double target = u * total;
    for (std::size_t i = 0; i < order.size(); ++i) {
        acc += w[i];
        if (target < acc) {
            return order[i];
        }
    }
    // u * total can round up to total.
    for (std::size_t i = order.size(); i-- > 0;) {
        if (w[i] > 0.0) {
            return order[i];
        }
    }
    return order.front();
}

/// One top-K sampling step; consumes exactly one uniform from `rng`.
inline std::size_t sample_topk(std::span<const double> logits, std::span<const double> probs, std::size_t k,
                               double temperature, Rng& rng) {
    const double u = uniform01(rng);
    const auto top = topk_indices(probs, k);
    std::vector<double> w(top.size());
    const double mx = logits[top.front()];
    for (std::size_t i = 0; i < top.size(); ++i) {
        w[i] = std::exp((logits[top[i]] - mx) / temperature);
    }
    return draw_index(top, w, u);
}

/// The K tokens whose successor states are closest to gt_next, nearest first,
/// lower index on ties, with their distances.
struct NearCandidates {
    std::vector<std::size_t> index;
    std::vector<double> distance;
};

inline NearCandidates nearest_candidates(const AgentState& state, const AgentState& gt_next,
                                         const TokenVocabulary& vocab, std::size_t k,
                                         double yaw_weight = kDefaultYawWeight) {
    if (k < 1 || k > vocab.size()) {
        throw InvalidConfig("candidate count must lie in [1, |V|]");
    }
    std::vector<std::pair<double, std::size_t>> all(vocab.size());
    for (std::size_t c = 0; c < vocab.size(); ++c) {
        all[c] = {state_distance(apply_token(state, vocab[c]), gt_next, yaw_weight), c};
    }
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    NearCandidates out;
    for (std::size_t i = 0; i < k; ++i) {
        out.distance.push_back(all[i].first);
        out.index.push_back(all[i].second);
    }
    return out;
}

/// Sampling weights over nearest candidates: exp(-(d - d_min)/tau) or uniform.
inline std::vector<double> candidate_weights(const NearCandidates& cand, SampleRule rule, double tau) {
    std::vector<double> w(cand.index.size(), 1.0);
    if (rule == SampleRule::neg_dist) {
        const double d0 = cand.distance.front();
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = std::exp(-(cand.distance[i] - d0) / tau);
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// Closed-loop engine

namespace detail {

/// History window (H+1 states, oldest first) of row `row` at rollout step t:
/// ground truth up to the last history state, rollout states afterwards.
inline void history_window(const Scenario& sc, std::size_t agent, const Trajectory& rollout, std::size_t t,
                           std::vector<AgentState>& out) {
    const std::size_t h = sc.history_len;
    out.clear();
    for (std::size_t g = t; g <= h + t; ++g) {
        out.push_back(g <= h ? sc.gt[agent][g] : rollout[g - h]);
    }
}

/// Current states of all scenario agents at rollout step t. Rows of the
/// record supply their rollout state unless the record is a log replay;
/// other agents replay ground truth.
inline std::vector<AgentState> scene_at(const Scenario& sc, const RolloutRecord& rec, std::size_t t) {
    std::vector<AgentState> scene(sc.num_agents());
    for (std::size_t a = 0; a < sc.num_agents(); ++a) {
        scene[a] = sc.gt[a][sc.history_len + t];
    }
    if (rec.log_replay) {
        return scene;
    }
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        scene[rec.agents[r]] = rec.states[r][t];
    }
    return scene;
}

}  // namespace detail

/// Features of every row at rollout step t, one column per row. The encoder
/// only ever sees rollout states for controlled rows.
inline Matrix step_features(const Scenario& sc, const RolloutRecord& rec, std::size_t t, double dt) {
    const std::size_t f = feature_dim(sc.history_len);
    Matrix x(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(rec.rows()));
    const auto scene = detail::scene_at(sc, rec, t);
    std::vector<AgentState> hist;
    std::vector<AgentState> neighbors;
    std::vector<double> buf(f);
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        const std::size_t agent = rec.agents[r];
        detail::history_window(sc, agent, rec.states[r], t, hist);
        neighbors.clear();
        for (std::size_t a = 0; a < scene.size(); ++a) {
            if (a != agent) {
                neighbors.push_back(scene[a]);
            }
        }
        encode_into(hist, neighbors, sc.map, dt, buf);
        x.col(static_cast<Eigen::Index>(r)) = ConstVecMap(buf.data(), static_cast<Eigen::Index>(f));
    }
    return x;
}

inline RolloutRecord empty_record(const Scenario& sc, std::span<const std::size_t> agents, RolloutKind kind,
                                  std::uint64_t seed) {
    RolloutRecord rec;
    rec.scenario_id = sc.id;
    rec.agents.assign(agents.begin(), agents.end());
    rec.kind = kind;
    rec.seed = seed;
    const std::size_t n = agents.size();
    rec.states.resize(n);
    rec.chosen.resize(n);
    rec.targets.resize(n);
    rec.target_deltas.resize(n);
    rec.actions.resize(n);
    rec.probs_at_chosen.resize(n);
    rec.active.assign(n, 1);
    for (std::size_t r = 0; r < n; ++r) {
        rec.states[r].push_back(sc.gt[agents[r]][sc.history_len]);
    }
    return rec;
}

inline std::vector<std::size_t> all_agents(const Scenario& sc) {
    std::vector<std::size_t> a(sc.num_agents());
    std::iota(a.begin(), a.end(), std::size_t{0});
    return a;
}

/// Closed-loop categorical rollout of every agent. `select(row, logits,
/// probs, state, gt_next)` returns the token index for one row at one step.
template <class Select>
RolloutRecord closed_loop(const PolicyModel& model, const Scenario& sc, const TokenVocabulary& vocab,
                          RolloutKind kind, std::uint64_t seed, double yaw_weight, Select&& select) {
    if (model.config.kind != HeadKind::categorical) {
        throw InvalidConfig("categorical rollout needs a categorical model");
    }
    if (model.config.outputs != vocab.size()) {
        throw InvalidConfig("model output width differs from vocabulary size");
    }
    if (model.config.features != feature_dim(sc.history_len)) {
        throw InvalidConfig("model feature width differs from the scenario history length");
    }
    const auto agents = all_agents(sc);
    RolloutRecord rec = empty_record(sc, agents, kind, seed);
    const std::size_t steps = sc.future_steps();
    const std::size_t v = vocab.size();
    std::vector<double> logits(v);
    for (std::size_t t = 0; t < steps; ++t) {
        const Matrix x = step_features(sc, rec, t, vocab.replanning_period);
        const Matrix lg = categorical_logits(model, x);
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            for (std::size_t c = 0; c < v; ++c) {
                logits[c] = lg(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(r));
            }
            const auto probs = softmax(logits);
            const AgentState& s = rec.states[r][t];
            const AgentState& gt_next = sc.gt[rec.agents[r]][sc.history_len + t + 1];
            const std::size_t c = select(r, std::span<const double>(logits), std::span<const double>(probs), s, gt_next);
            rec.chosen[r].push_back(c);
            rec.probs_at_chosen[r].push_back(probs[c]);
            rec.targets[r].push_back(nearest_token(s, gt_next, vocab, yaw_weight));
            rec.states[r].push_back(apply_token(s, vocab[c]));
        }
    }
    return rec;
}

inline RolloutRecord rollout_catk(const PolicyModel& model, const Scenario& sc, const TokenVocabulary& vocab,
                                  std::size_t k, double yaw_weight = kDefaultYawWeight) {
    return closed_loop(model, sc, vocab, RolloutKind::catk, 0, yaw_weight,
                       [&](std::size_t, std::span<const double>, std::span<const double> probs, const AgentState& s,
                           const AgentState& gt_next) { return catk_select(probs, s, gt_next, vocab, k, yaw_weight); });
}

inline RolloutRecord rollout_deterministic(const PolicyModel& model, const Scenario& sc,
                                           const TokenVocabulary& vocab, double yaw_weight = kDefaultYawWeight) {
    return closed_loop(model, sc, vocab, RolloutKind::deterministic, 0, yaw_weight,
                       [&](std::size_t, std::span<const double>, std::span<const double> probs, const AgentState&,
                           const AgentState&) { return topk_indices(probs, 1).front(); });
}

/// Top-K_infer sampling at the given temperature. One uniform is drawn per
/// (step, agent) regardless of K_infer, step-major.
inline RolloutRecord rollout_sample(const PolicyModel& model, const Scenario& sc, const TokenVocabulary& vocab,
                                    std::size_t k_infer, double temperature, std::uint64_t seed,
                                    double yaw_weight = kDefaultYawWeight) {
    if (!(temperature > 0.0)) {
        throw InvalidConfig("sampling temperature must be positive");
    }
    Rng rng(seed);
    return closed_loop(model, sc, vocab, RolloutKind::sample, seed, yaw_weight,
                       [&](std::size_t, std::span<const double> logits, std::span<const double> probs,
                           const AgentState&, const AgentState&) {
                           return sample_topk(logits, probs, k_infer, temperature, rng);
                       });
}

// ---------------------------------------------------------------------------
// Policy-free noising

namespace detail {

template <class Targets>
RolloutRecord noised_tokenization(const Scenario& sc, const TokenVocabulary& vocab, std::size_t k, double tau,
                                  SampleRule rule, std::uint64_t seed, RolloutKind kind, double yaw_weight,
                                  Targets&& fill_targets) {
    if (!(tau > 0.0)) {
        throw InvalidConfig("tau must be positive");
    }
    const auto agents = all_agents(sc);
    RolloutRecord rec = empty_record(sc, agents, kind, seed);
    Rng rng(seed);
    for (std::size_t t = 0; t < sc.future_steps(); ++t) {
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            const double u = uniform01(rng);
            const AgentState& s = rec.states[r][t];
            const AgentState& gt_next = sc.gt[agents[r]][sc.history_len + t + 1];
            const auto cand = nearest_candidates(s, gt_next, vocab, k, yaw_weight);
            const auto w = candidate_weights(cand, rule, tau);
            const std::size_t c = draw_index(cand.index, w, u);
            const double total = std::accumulate(w.begin(), w.end(), 0.0);
            const auto pos = static_cast<std::size_t>(std::find(cand.index.begin(), cand.index.end(), c) -
                                                      cand.index.begin());
            rec.chosen[r].push_back(c);
            rec.probs_at_chosen[r].push_back(w[pos] / total);
            rec.states[r].push_back(apply_token(s, vocab[c]));
        }
    }
    fill_targets(rec);
    return rec;
}

}  // namespace detail

/// Noisy tokenization: sample among the K tokens nearest to the GT next state,
/// supervised toward the recovery target from the noised state.
inline RolloutRecord noisy_tokenize_trajeglish(const Scenario& sc, const TokenVocabulary& vocab, std::size_t k,
                                               double tau, SampleRule rule, std::uint64_t seed,
                                               double yaw_weight = kDefaultYawWeight) {
    return detail::noised_tokenization(sc, vocab, k, tau, rule, seed, RolloutKind::trajeglish, yaw_weight,
                                       [&](RolloutRecord& rec) {
                                           for (std::size_t r = 0; r < rec.rows(); ++r) {
                                               for (std::size_t t = 0; t < rec.steps(); ++t) {
                                                   rec.targets[r].push_back(nearest_token(
                                                       rec.states[r][t], sc.gt[rec.agents[r]][sc.history_len + t + 1],
                                                       vocab, yaw_weight));
                                               }
                                           }
                                       });
}

/// Trajectory perturbation: same candidate sampling, but the target at state
/// t+1 is the perturbed sequence's own next token; the final step has no pair.
inline RolloutRecord perturb_smart(const Scenario& sc, const TokenVocabulary& vocab, std::size_t k, SampleRule rule,
                                   std::uint64_t seed, double tau = 1.0, double yaw_weight = kDefaultYawWeight) {
    auto rec = detail::noised_tokenization(sc, vocab, k, tau, rule, seed, RolloutKind::smart, yaw_weight,
                                           [](RolloutRecord& r) {
                                               for (std::size_t i = 0; i < r.rows(); ++i) {
                                                   r.targets[i].assign(r.chosen[i].begin() + 1, r.chosen[i].end());
                                               }
                                           });
    rec.target_offset = 1;
    return rec;
}

/// Teacher record for behavior cloning: sequential tokenization of each
/// agent's GT future from the last history state.
inline RolloutRecord teacher_record(const Scenario& sc, const TokenVocabulary& vocab,
                                    double yaw_weight = kDefaultYawWeight) {
    const auto agents = all_agents(sc);
    RolloutRecord rec = empty_record(sc, agents, RolloutKind::teacher, 0);
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        const auto& gt = sc.gt[agents[r]];
        const auto tok = tokenize_trajectory(
            std::span<const AgentState>(gt).subspan(sc.history_len), vocab, yaw_weight);
        rec.states[r] = tok.states;
        rec.chosen[r] = tok.indices;
        rec.targets[r] = tok.indices;
        rec.probs_at_chosen[r].assign(tok.indices.size(), 1.0);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Record post-processing

/// Marks rows whose final state ends farther than `threshold` from the GT
/// final state as inactive; records left with no active rows are dropped.
inline std::vector<RolloutRecord> distance_filter(std::span<const RolloutRecord> records, const Scenario& sc,
                                                  double threshold) {
    std::vector<RolloutRecord> kept;
    for (const auto& rec : records) {
        RolloutRecord r = rec;
        bool any = false;
        for (std::size_t i = 0; i < r.rows(); ++i) {
            const double d = planar_distance(r.states[i].back(), sc.gt[r.agents[i]].back());
            r.active[i] = (r.active[i] != 0 && d <= threshold) ? 1 : 0;
            any = any || r.active[i] != 0;
        }
        if (any) {
            kept.push_back(std::move(r));
        }
    }
    return kept;
}

/// Mean planar error of the record's future states (steps 1..T') against GT.
inline double record_ade(const RolloutRecord& rec, const Scenario& sc) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        for (std::size_t t = 1; t < rec.states[r].size(); ++t) {
            sum += planar_distance(rec.states[r][t], sc.gt[rec.agents[r]][sc.history_len + t]);
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

/// Index of one candidate drawn with probability proportional to exp(-ADE/tau).
inline std::size_t distance_weighted_index(std::span<const RolloutRecord> candidates, const Scenario& sc, double tau,
                                           std::uint64_t seed) {
    if (candidates.empty()) {
        throw InvalidConfig("distance_weighted_choice needs at least one candidate");
    }
    if (!(tau > 0.0)) {
        throw InvalidConfig("tau must be positive");
    }
    std::vector<double> ade(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        ade[i] = record_ade(candidates[i], sc);
    }
    const double best = *std::min_element(ade.begin(), ade.end());
    std::vector<double> w(ade.size());
    for (std::size_t i = 0; i < ade.size(); ++i) {
        w[i] = std::exp(-(ade[i] - best) / tau);
    }
    std::vector<std::size_t> order(ade.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    return draw_index(order, w, uniform01(rng));
}

inline RolloutRecord distance_weighted_choice(std::span<const RolloutRecord> candidates, const Scenario& sc,
                                              double tau, std::uint64_t seed) {
    return candidates[distance_weighted_index(candidates, sc, tau, seed)];
}

/// Recomputes every state from the chosen tokens; true when bitwise equal.
inline bool dynamics_consistent(const RolloutRecord& rec, const TokenVocabulary& vocab) {
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        if (rec.states[r].size() != rec.chosen[r].size() + 1) {
            return false;
        }
        for (std::size_t t = 0; t < rec.chosen[r].size(); ++t) {
            if (!(apply_token(rec.states[r][t], vocab[rec.chosen[r][t]]) == rec.states[r][t + 1])) {
                return false;
            }
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Gaussian-mixture ego rollouts

struct GmmChoice {
    std::size_t mode = 0;
    ActionToken action;
};

/// Among the K highest-weight modes, the mode whose mean-advanced state is
/// closest to gt_next; ties go to the higher weight, then the lower index.
inline GmmChoice catk_select_gmm(const GmmOutput& out, const AgentState& state, const AgentState& gt_next,
                                 std::size_t k, double yaw_weight = kDefaultYawWeight) {
    GmmChoice best;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t m : topk_indices(out.weights, k)) {
        const double d = state_distance(apply_token(state, out.means[m]), gt_next, yaw_weight);
        if (d < bd) {
            bd = d;
            best = {m, out.means[m]};
        }
    }
    return best;
}

/// Top-K mode sampling: renormalized w^(1/temperature) over the K heaviest
/// modes, then the chosen mode's mean.
inline GmmChoice sample_gmm_mode(const GmmOutput& out, std::size_t k, double temperature, Rng& rng) {
    const double u = uniform01(rng);
    const auto top = topk_indices(out.weights, k);
    std::vector<double> w(top.size());
    const double lw0 = std::log(out.weights[top.front()]);
    for (std::size_t i = 0; i < top.size(); ++i) {
        w[i] = std::exp((std::log(out.weights[top[i]]) - lw0) / temperature);
    }
    const std::size_t m = draw_index(top, w, u);
    return {m, out.means[m]};
}

/// Closed-loop GMM rollout where each row is an independent ego: its own
/// features come from its rollout states while every other agent replays
/// ground truth. Targets are recovery deltas toward the GT next state.
template <class Select>
RolloutRecord gmm_closed_loop(const PolicyModel& model, const Scenario& sc, std::span<const std::size_t> egos,
                              double dt, RolloutKind kind, std::uint64_t seed, Select&& select) {
    if (model.config.kind != HeadKind::gmm) {
        throw InvalidConfig("gmm rollout needs a gmm model");
    }
    if (model.config.features != feature_dim(sc.history_len)) {
        throw InvalidConfig("model feature width differs from the scenario history length");
    }
    for (std::size_t e : egos) {
        if (e >= sc.num_agents()) {
            throw InvalidConfig("ego index out of range");
        }
    }
    RolloutRecord rec = empty_record(sc, egos, kind, seed);
    rec.log_replay = true;
    for (std::size_t t = 0; t < sc.future_steps(); ++t) {
        const Matrix x = step_features(sc, rec, t, dt);
        const GmmBatch batch = gmm_forward_batch(model, x);
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            const auto out = gmm_output_column(model, batch, static_cast<Eigen::Index>(r));
            const AgentState& s = rec.states[r][t];
            const AgentState& gt_next = sc.gt[rec.agents[r]][sc.history_len + t + 1];
            const GmmChoice ch = select(out, s, gt_next);
            rec.chosen[r].push_back(ch.mode);
            rec.actions[r].push_back(ch.action);
            rec.probs_at_chosen[r].push_back(out.weights[ch.mode]);
            rec.target_deltas[r].push_back(relative_delta(s, gt_next));
            rec.states[r].push_back(apply_token(s, ch.action));
        }
    }
    return rec;
}

inline RolloutRecord rollout_gmm_catk(const PolicyModel& model, const Scenario& sc, std::size_t k,
                                      double dt = kDefaultReplanningPeriod, double yaw_weight = kDefaultYawWeight) {
    const auto egos = all_agents(sc);
    return gmm_closed_loop(model, sc, egos, dt, RolloutKind::gmm_catk, 0,
                           [&](const GmmOutput& out, const AgentState& s, const AgentState& gt_next) {
                               return catk_select_gmm(out, s, gt_next, k, yaw_weight);
                           });
}

inline RolloutRecord rollout_gmm_sample(const PolicyModel& model, const Scenario& sc, std::size_t k,
                                        double temperature, std::uint64_t seed,
                                        double dt = kDefaultReplanningPeriod) {
    const auto egos = all_agents(sc);
    Rng rng(seed);
    return gmm_closed_loop(model, sc, egos, dt, RolloutKind::gmm_sample, seed,
                           [&](const GmmOutput& out, const AgentState&, const AgentState&) {
                               return sample_gmm_mode(out, k, temperature, rng);
                           });
}

/// GMM behavior-cloning pairs: every agent's GT future with GT deltas as
/// targets and other agents replaying GT.
inline RolloutRecord gmm_teacher_record(const Scenario& sc) {
    const auto egos = all_agents(sc);
    RolloutRecord rec = empty_record(sc, egos, RolloutKind::gmm_teacher, 0);
    rec.log_replay = true;
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        const auto& gt = sc.gt[egos[r]];
        for (std::size_t g = sc.history_len; g + 1 < gt.size(); ++g) {
            const ActionToken a = relative_delta(gt[g], gt[g + 1]);
            rec.states[r].push_back(gt[g + 1]);
            rec.actions[r].push_back(a);
            rec.target_deltas[r].push_back(a);
            rec.chosen[r].push_back(0);
            rec.probs_at_chosen[r].push_back(1.0);
        }
    }
    return rec;
}

// ---------------------------------------------------------------------------
// JSON-lines dump

inline nlohmann::json to_json(const RolloutRecord& rec) {
    using nlohmann::json;
    json j;
    j["scenario"] = rec.scenario_id;
    j["kind"] = to_string(rec.kind);
    j["seed"] = rec.seed;
    j["target_offset"] = rec.target_offset;
    j["rows"] = json::array();
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        json row;
        row["agent"] = rec.agents[r];
        row["active"] = rec.active[r] != 0;
        json st = json::array();
        for (const auto& s : rec.states[r]) {
            st.push_back({s.x, s.y, s.yaw});
        }
        row["states"] = st;
        row["chosen"] = rec.chosen[r];
        row["targets"] = rec.targets[r];
        json td = json::array();
        for (const auto& a : rec.target_deltas[r]) {
            td.push_back({a.dx, a.dy, a.dyaw});
        }
        row["target_deltas"] = td;
        row["probs_at_chosen"] = rec.probs_at_chosen[r];
        j["rows"].push_back(row);
    }
    return j;
}

}  // namespace catk
