#pragma once

// Behavior-cloning pre-training and closed-loop supervised fine-tuning.
// Each epoch shuffles scenarios with the run seed, walks them in batches,
// generates one training record per scenario with the configured strategy
// (using the current parameters), and takes one optimizer step per batch.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "catk/errors.hpp"
#include "catk/metrics.hpp"
#include "catk/policy.hpp"
#include "catk/random.hpp"
#include "catk/rollout.hpp"
#include "catk/scenario.hpp"
#include "catk/vocabulary.hpp"

namespace catk {

enum class Strategy { bc, catk, topk_sample, topk_filter, topk_distsample, trajeglish, smart, deterministic };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::bc: return "bc";
        case Strategy::catk: return "catk";
        case Strategy::topk_sample: return "topk_sample";
        case Strategy::topk_filter: return "topk_filter";
        case Strategy::topk_distsample: return "topk_distsample";
        case Strategy::trajeglish: return "trajeglish";
        case Strategy::smart: return "smart";
        case Strategy::deterministic: return "deterministic";
    }
    return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
    for (auto v : {Strategy::bc, Strategy::catk, Strategy::topk_sample, Strategy::topk_filter,
                   Strategy::topk_distsample, Strategy::trajeglish, Strategy::smart, Strategy::deterministic}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw InvalidConfig("unknown strategy '" + s + "'");
}

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_scenarios = 2;  // 8 agents per step in four-agent scenes
    double learning_rate = 1e-3;
    double lr_floor = 0.01;           // final learning rate as a fraction of the initial one
    Strategy strategy = Strategy::catk;
    SamplerConfig sampler;
    std::uint64_t seed = 0;
    double yaw_weight = kDefaultYawWeight;
    double min_speed_filter = 0.0;  // m/s; agents with slower mean GT future speed carry no loss
};

inline void validate(const TrainConfig& c, const PolicyModel& model) {
    if (c.batch_scenarios < 1) {
        throw InvalidConfig("batch_scenarios must be at least 1");
    }
    if (!(c.learning_rate > 0.0)) {
        throw InvalidConfig("learning_rate must be positive");
    }
    if (!(c.lr_floor > 0.0) || c.lr_floor > 1.0) {
        throw InvalidConfig("lr_floor must lie in (0, 1]");
    }
    if (!(c.yaw_weight >= 0.0) || !(c.min_speed_filter >= 0.0)) {
        throw InvalidConfig("yaw_weight and min_speed_filter must be non-negative");
    }
    if (model.config.kind == HeadKind::categorical) {
        if (c.strategy != Strategy::bc) {
            validate(c.sampler, model.config.outputs);
        }
        if (c.strategy == Strategy::topk_filter && !(c.sampler.distance_threshold >= 0.0)) {
            throw InvalidConfig("topk_filter needs a non-negative distance_threshold");
        }
    } else {
        if (c.strategy != Strategy::bc && c.strategy != Strategy::catk && c.strategy != Strategy::deterministic) {
            throw InvalidConfig(std::string("strategy ") + to_string(c.strategy) + " is not defined for gmm models");
        }
        if (c.sampler.K < 1 || c.sampler.K > model.config.outputs) {
            throw InvalidConfig("gmm K must lie in [1, modes]");
        }
    }
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double loss = 0.0;
    double ade_rollout_gt = 0.0;
    std::size_t pairs = 0;
    std::size_t steps = 0;

    friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct TrainState {
    PolicyModel model;
    AdamState optimizer;
    std::size_t epochs_done = 0;
    std::vector<EpochMetrics> trace;
};

inline TrainState start_training(const PolicyModel& model) { return {model, make_adam_state(model), 0, {}}; }

/// Supervised pairs extracted from one record: feature columns, token
/// targets (categorical) and delta targets (gmm).
struct TrainingPairs {
    Matrix x;
    std::vector<std::size_t> targets;
    std::vector<ActionToken> deltas;

    std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
};

inline bool passes_speed_filter(const Scenario& sc, std::size_t agent, double min_speed, double dt) {
    if (min_speed <= 0.0) {
        return true;
    }
    const auto& g = sc.gt[agent];
    double dist = 0.0;
    for (std::size_t t = sc.history_len + 1; t < g.size(); ++t) {
        dist += planar_distance(g[t], g[t - 1]);
    }
    return dist / (static_cast<double>(sc.future_steps()) * dt) >= min_speed;
}

/// Pairs ordered step-major, then row. Pair p of row r is taken at state
/// index p + target_offset, from features computed on the record's states.
inline TrainingPairs record_pairs(const RolloutRecord& rec, const Scenario& sc, double dt, double min_speed = 0.0) {
    std::vector<char> use(rec.rows());
    std::size_t max_pairs = 0;
    for (std::size_t r = 0; r < rec.rows(); ++r) {
        use[r] = rec.active[r] != 0 && passes_speed_filter(sc, rec.agents[r], min_speed, dt);
        const std::size_t n = std::max(rec.targets[r].size(), rec.target_deltas[r].size());
        max_pairs = std::max(max_pairs, n);
    }
    std::vector<Eigen::Index> cols;
    TrainingPairs out;
    std::vector<Matrix> blocks;
    std::size_t total = 0;
    for (std::size_t p = 0; p < max_pairs; ++p) {
        bool any = false;
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            any = any || use[r] != 0;
        }
        if (!any) {
            break;
        }
        const Matrix x = step_features(sc, rec, p + rec.target_offset, dt);
        cols.clear();
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            if (use[r] == 0) {
                continue;
            }
            if (p < rec.targets[r].size()) {
                out.targets.push_back(rec.targets[r][p]);
            } else if (p < rec.target_deltas[r].size()) {
                out.deltas.push_back(rec.target_deltas[r][p]);
            } else {
                continue;
            }
            cols.push_back(static_cast<Eigen::Index>(r));
        }
        Matrix sel(x.rows(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t j = 0; j < cols.size(); ++j) {
            sel.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
        }
        total += cols.size();
        blocks.push_back(std::move(sel));
    }
    out.x.resize(static_cast<Eigen::Index>(feature_dim(sc.history_len)), static_cast<Eigen::Index>(total));
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
        out.x.middleCols(at, b.cols()) = b;
        at += b.cols();
    }
    return out;
}

/// Seed of the stochastic generator for scenario `index` in `epoch`.
inline std::uint64_t rollout_seed(std::uint64_t seed, std::size_t epoch, std::size_t index) {
    return derive_seed(seed, 0x726f6c6c00000000ULL + epoch, index);
}

/// Training records for one scenario under the configured strategy, plus the
/// pre-filter records used for the epoch ADE trace.
struct GeneratedRecords {
    std::vector<RolloutRecord> train;
    std::vector<RolloutRecord> traced;
};

inline GeneratedRecords generate_records(const PolicyModel& model, const Scenario& sc, const TokenVocabulary& vocab,
                                         const TrainConfig& cfg, std::uint64_t seed) {
    const auto& sm = cfg.sampler;
    GeneratedRecords g;
    if (model.config.kind == HeadKind::gmm) {
        switch (cfg.strategy) {
            case Strategy::bc: g.train.push_back(gmm_teacher_record(sc)); break;
            case Strategy::deterministic:
                g.train.push_back(rollout_gmm_catk(model, sc, 1, vocab.replanning_period, cfg.yaw_weight));
                break;
            default:
                g.train.push_back(rollout_gmm_catk(model, sc, sm.K, vocab.replanning_period, cfg.yaw_weight));
                break;
        }
        g.traced = g.train;
        return g;
    }
    switch (cfg.strategy) {
        case Strategy::bc: g.train.push_back(teacher_record(sc, vocab, cfg.yaw_weight)); break;
        case Strategy::catk: g.train.push_back(rollout_catk(model, sc, vocab, sm.K, cfg.yaw_weight)); break;
        case Strategy::deterministic: g.train.push_back(rollout_deterministic(model, sc, vocab, cfg.yaw_weight)); break;
        case Strategy::topk_sample:
            g.train.push_back(rollout_sample(model, sc, vocab, sm.K, sm.temperature, seed, cfg.yaw_weight));
            break;
        case Strategy::topk_filter: {
            const auto rec = rollout_sample(model, sc, vocab, sm.K, sm.temperature, seed, cfg.yaw_weight);
            g.traced.push_back(rec);
            g.train = distance_filter(std::span<const RolloutRecord>(&rec, 1), sc, sm.distance_threshold);
            return g;
        }
        case Strategy::topk_distsample: {
            std::vector<RolloutRecord> cands;
            for (std::size_t c = 0; c < sm.candidates; ++c) {
                cands.push_back(
                    rollout_sample(model, sc, vocab, sm.K, sm.temperature, derive_seed(seed, c), cfg.yaw_weight));
            }
            g.train.push_back(distance_weighted_choice(cands, sc, sm.tau, derive_seed(seed, sm.candidates)));
            break;
        }
        case Strategy::trajeglish:
            g.train.push_back(noisy_tokenize_trajeglish(sc, vocab, sm.K, sm.tau, sm.rule, seed, cfg.yaw_weight));
            break;
        case Strategy::smart:
            g.train.push_back(perturb_smart(sc, vocab, sm.K, sm.rule, seed, sm.tau, cfg.yaw_weight));
            break;
    }
    g.traced = g.train;
    return g;
}

/// Concatenates pair sets column-wise.
inline TrainingPairs concat_pairs(std::span<const TrainingPairs> parts, std::size_t features) {
    TrainingPairs out;
    std::size_t total = 0;
    for (const auto& p : parts) {
        total += p.size();
    }
    out.x.resize(static_cast<Eigen::Index>(features), static_cast<Eigen::Index>(total));
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.x.middleCols(at, p.x.cols()) = p.x;
        at += p.x.cols();
        out.targets.insert(out.targets.end(), p.targets.begin(), p.targets.end());
        out.deltas.insert(out.deltas.end(), p.deltas.begin(), p.deltas.end());
    }
    return out;
}

inline std::size_t batches_per_epoch(std::size_t n_scenarios, const TrainConfig& cfg) {
    return (n_scenarios + cfg.batch_scenarios - 1) / cfg.batch_scenarios;
}

using EpochCallback = std::function<void(const TrainState&)>;

/// Runs epochs state.epochs_done .. until-1 (until defaults to cfg.epochs).
/// Resuming from a saved (model, optimizer, epochs_done) continues the exact
/// same stream of updates.
inline void train_epochs(TrainState& state, std::span<const Scenario> scenarios, const TokenVocabulary& vocab,
                         const TrainConfig& cfg, std::optional<std::size_t> until = std::nullopt,
                         const EpochCallback& on_epoch = {}) {
    validate(cfg, state.model);
    if (scenarios.empty()) {
        throw InsufficientData("training needs at least one scenario");
    }
    const std::size_t stop = std::min(until.value_or(cfg.epochs), cfg.epochs);
    const bool gmm = state.model.config.kind == HeadKind::gmm;
    const double dt = vocab.replanning_period;
    AdamConfig adam;
    adam.learning_rate = cfg.learning_rate;
    adam.floor_fraction = cfg.lr_floor;
    adam.total_steps = cfg.epochs * batches_per_epoch(scenarios.size(), cfg);

    // Teacher pairs do not depend on the parameters.
    const bool cached = cfg.strategy == Strategy::bc;
    std::vector<TrainingPairs> cache;
    std::vector<double> cache_ade;
    if (cached && state.epochs_done < stop) {
        for (const auto& sc : scenarios) {
            const auto g = generate_records(state.model, sc, vocab, cfg, 0);
            cache.push_back(record_pairs(g.train.front(), sc, dt, cfg.min_speed_filter));
            cache_ade.push_back(ade(g.train.front(), sc));
        }
    }

    for (std::size_t epoch = state.epochs_done; epoch < stop; ++epoch) {
        std::vector<std::size_t> order(scenarios.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        Rng shuffle_rng(derive_seed(cfg.seed, 0x7368756600000000ULL + epoch));
        shuffle_in_place(order, shuffle_rng);

        EpochMetrics em;
        em.epoch = epoch;
        double loss_sum = 0.0;
        double ade_sum = 0.0;
        std::size_t ade_n = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_scenarios) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_scenarios);
            std::vector<TrainingPairs> parts;
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t idx = order[k];
                if (cached) {
                    parts.push_back(cache[idx]);
                    ade_sum += cache_ade[idx];
                    ++ade_n;
                    continue;
                }
                const auto g = generate_records(state.model, scenarios[idx], vocab, cfg,
                                                rollout_seed(cfg.seed, epoch, idx));
                for (const auto& rec : g.traced) {
                    ade_sum += ade(rec, scenarios[idx]);
                    ++ade_n;
                }
                for (const auto& rec : g.train) {
                    parts.push_back(record_pairs(rec, scenarios[idx], dt, cfg.min_speed_filter));
                }
            }
            const auto batch = concat_pairs(parts, state.model.config.features);
            if (batch.size() == 0) {
                continue;
            }
            const LossGrad lg = gmm ? gmm_nll_grad(state.model, batch.x, batch.deltas)
                                    : ce_loss_grad(state.model, batch.x, batch.targets);
            if (!std::isfinite(lg.loss)) {
                throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch));
            }
            optimizer_step(state.model, lg.grad, state.optimizer, adam);
            loss_sum += lg.loss * static_cast<double>(batch.size());
            em.pairs += batch.size();
            ++em.steps;
        }
        em.loss = em.pairs == 0 ? 0.0 : loss_sum / static_cast<double>(em.pairs);
        em.ade_rollout_gt = ade_n == 0 ? 0.0 : ade_sum / static_cast<double>(ade_n);
        state.trace.push_back(em);
        state.epochs_done = epoch + 1;
        if (on_epoch) {
            on_epoch(state);
        }
    }
}

inline TrainState pretrain_bc(const PolicyModel& model, std::span<const Scenario> scenarios,
                              const TokenVocabulary& vocab, TrainConfig cfg) {
    cfg.strategy = Strategy::bc;
    TrainState st = start_training(model);
    train_epochs(st, scenarios, vocab, cfg);
    return st;
}

inline TrainState finetune_closed_loop(const PolicyModel& model, std::span<const Scenario> scenarios,
                                       const TokenVocabulary& vocab, const TrainConfig& cfg) {
    if (model.config.kind != HeadKind::categorical) {
        throw InvalidConfig("finetune_closed_loop needs a categorical model");
    }
    TrainState st = start_training(model);
    train_epochs(st, scenarios, vocab, cfg);
    return st;
}

/// CAT-K over mixture modes with NLL on recovery deltas; K = 1 is
/// deterministic-rollout fine-tuning.
inline TrainState finetune_gmm(const PolicyModel& model, std::span<const Scenario> scenarios,
                               const TokenVocabulary& vocab, TrainConfig cfg) {
    if (model.config.kind != HeadKind::gmm) {
        throw InvalidConfig("finetune_gmm needs a gmm model");
    }
    if (cfg.strategy == Strategy::bc) {
        cfg.strategy = Strategy::catk;
    }
    TrainState st = start_training(model);
    train_epochs(st, scenarios, vocab, cfg);
    return st;
}

}  // namespace catk
