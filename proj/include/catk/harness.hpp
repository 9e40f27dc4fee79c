#pragma once

// Experiment orchestration: a JSON experiment spec, a run-directory layout
// that holds every artifact of an experiment, the ablation runner that
// fine-tunes several strategies from one shared BC checkpoint, K_infer
// sweeps, and CSV/JSON result emission.
//
// Run directory:
//   config.json                  verbatim spec snapshot
//   scenarios/train.jsonl        scenario splits
//   scenarios/heldout.jsonl
//   vocab.txt                    token vocabulary
//   base/                        BC pre-training
//   variants/<name>/             one fine-tuning variant each
//   sweeps/<param>-<value>/      one directory per sweep value
//   results.csv                  merged table
// Each training directory holds model.bin, optimizer.bin, train_state.json,
// metrics.csv, eval.csv and eval.json.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "catk/errors.hpp"
#include "catk/metrics.hpp"
#include "catk/policy.hpp"
#include "catk/random.hpp"
#include "catk/rollout.hpp"
#include "catk/scenario.hpp"
#include "catk/training.hpp"
#include "catk/vocabulary.hpp"

namespace catk {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kMetricsHeader = "# catk-metrics v1";

struct VariantSpec {
    std::string name;
    TrainConfig train;
};

struct ExperimentSpec {
    std::string name = "experiment";
    std::uint64_t seed = 1;
    std::size_t n_train = 3000;
    std::size_t n_heldout = 300;
    ForkWorldConfig world;
    std::size_t vocab_size = 64;
    ModelConfig model;
    TrainConfig pretrain;
    std::size_t checkpoint_every = 5;  // epochs
    std::vector<VariantSpec> variants;
    EvalConfig eval;
    std::vector<std::size_t> k_infer_grid;
};

// ---------------------------------------------------------------------------
// Spec parsing

namespace detail {

template <class T>
T take(const json& j, const char* key, T fallback, std::set<std::string>& seen) {
    seen.insert(key);
    if (!j.contains(key)) {
        return fallback;
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("config key '") + key + "': " + e.what());
    }
}

inline void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!seen.contains(it.key())) {
            throw InvalidConfig("unknown config key '" + where + it.key() + "'");
        }
    }
}

inline void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) {
        throw InvalidConfig("config section '" + where + "' must be an object");
    }
}

inline TrainConfig parse_train(const json& j, TrainConfig t, const std::string& where) {
    require_object(j, where);
    std::set<std::string> seen;
    t.epochs = take(j, "epochs", t.epochs, seen);
    t.batch_scenarios = take(j, "batch_scenarios", t.batch_scenarios, seen);
    t.learning_rate = take(j, "learning_rate", t.learning_rate, seen);
    t.lr_floor = take(j, "lr_floor", t.lr_floor, seen);
    t.strategy = strategy_from_string(take(j, "strategy", std::string(to_string(t.strategy)), seen));
    t.yaw_weight = take(j, "yaw_weight", t.yaw_weight, seen);
    t.min_speed_filter = take(j, "min_speed_filter", t.min_speed_filter, seen);
    t.sampler.K = take(j, "K", t.sampler.K, seen);
    t.sampler.K_infer = take(j, "K_infer", t.sampler.K_infer, seen);
    t.sampler.tau = take(j, "tau", t.sampler.tau, seen);
    t.sampler.temperature = take(j, "temperature", t.sampler.temperature, seen);
    t.sampler.distance_threshold = take(j, "distance_threshold", t.sampler.distance_threshold, seen);
    t.sampler.candidates = take(j, "candidates", t.sampler.candidates, seen);
    t.sampler.rule = sample_rule_from_string(take(j, "sample_rule", std::string(to_string(t.sampler.rule)), seen));
    seen.insert("name");
    reject_unknown(j, seen, where);
    return t;
}

inline json train_to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"batch_scenarios", t.batch_scenarios},
            {"learning_rate", t.learning_rate},
            {"lr_floor", t.lr_floor},
            {"strategy", to_string(t.strategy)},
            {"yaw_weight", t.yaw_weight},
            {"min_speed_filter", t.min_speed_filter},
            {"K", t.sampler.K},
            {"K_infer", t.sampler.K_infer},
            {"tau", t.sampler.tau},
            {"temperature", t.sampler.temperature},
            {"distance_threshold", t.sampler.distance_threshold},
            {"candidates", t.sampler.candidates},
            {"sample_rule", to_string(t.sampler.rule)}};
}

}  // namespace detail

/// Default pre-training and fine-tuning settings of the desk-scale study.
inline TrainConfig default_pretrain() {
    TrainConfig t;
    t.strategy = Strategy::bc;
    t.epochs = 25;
    t.learning_rate = 3e-3;
    return t;
}

inline TrainConfig default_finetune() {
    TrainConfig t;
    t.strategy = Strategy::catk;
    t.epochs = 5;
    t.learning_rate = 1e-3;
    return t;
}

inline ExperimentSpec parse_spec(const json& j) {
    using detail::take;
    detail::require_object(j, "");
    ExperimentSpec s;
    s.pretrain = default_pretrain();
    std::set<std::string> seen;
    s.name = take(j, "name", s.name, seen);
    s.seed = take(j, "seed", s.seed, seen);
    s.checkpoint_every = take(j, "checkpoint_every", s.checkpoint_every, seen);

    seen.insert("scenarios");
    if (j.contains("scenarios")) {
        const auto& w = j.at("scenarios");
        detail::require_object(w, "scenarios");
        std::set<std::string> ws;
        s.n_train = take(w, "n_train", s.n_train, ws);
        s.n_heldout = take(w, "n_heldout", s.n_heldout, ws);
        s.world.n_agents = take(w, "n_agents", s.world.n_agents, ws);
        s.world.branch_probs = take(w, "branch_probs", s.world.branch_probs, ws);
        s.world.noise_std = take(w, "noise_std", s.world.noise_std, ws);
        s.world.history_len = take(w, "history_len", s.world.history_len, ws);
        s.world.horizon = take(w, "horizon", s.world.horizon, ws);
        s.world.min_speed = take(w, "min_speed", s.world.min_speed, ws);
        s.world.max_speed = take(w, "max_speed", s.world.max_speed, ws);
        s.world.min_entry_time = take(w, "min_entry_time", s.world.min_entry_time, ws);
        s.world.max_entry_time = take(w, "max_entry_time", s.world.max_entry_time, ws);
        detail::reject_unknown(w, ws, "scenarios.");
    }
    seen.insert("vocab");
    if (j.contains("vocab")) {
        const auto& v = j.at("vocab");
        detail::require_object(v, "vocab");
        std::set<std::string> vs;
        s.vocab_size = take(v, "size", s.vocab_size, vs);
        detail::reject_unknown(v, vs, "vocab.");
    }
    seen.insert("model");
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::require_object(m, "model");
        std::set<std::string> ms;
        const auto kind = take(m, "kind", std::string("categorical"), ms);
        if (kind != "categorical" && kind != "gmm") {
            throw InvalidConfig("model.kind must be categorical or gmm");
        }
        s.model.kind = kind == "gmm" ? HeadKind::gmm : HeadKind::categorical;
        s.model.hidden = take(m, "hidden", s.model.hidden, ms);
        s.model.sigma = take(m, "sigma", s.model.sigma, ms);
        const std::size_t modes = take(m, "modes", std::size_t{16}, ms);
        if (s.model.kind == HeadKind::gmm) {
            s.model.outputs = modes;
        }
        detail::reject_unknown(m, ms, "model.");
    }
    seen.insert("pretrain");
    if (j.contains("pretrain")) {
        s.pretrain = detail::parse_train(j.at("pretrain"), s.pretrain, "pretrain.");
    }
    s.pretrain.strategy = Strategy::bc;
    seen.insert("finetune");
    if (j.contains("finetune")) {
        const auto& list = j.at("finetune");
        if (!list.is_array()) {
            throw InvalidConfig("finetune must be a list of variants");
        }
        std::set<std::string> names;
        for (const auto& v : list) {
            detail::require_object(v, "finetune[]");
            VariantSpec vs;
            vs.train = detail::parse_train(v, default_finetune(), "finetune[].");
            vs.name = v.contains("name") ? v.at("name").get<std::string>() : to_string(vs.train.strategy);
            if (vs.name.empty() || vs.name.find_first_of("/\\ ,") != std::string::npos || vs.name == "base") {
                throw InvalidConfig("variant name '" + vs.name + "' is not a valid directory name");
            }
            if (!names.insert(vs.name).second) {
                throw InvalidConfig("duplicate variant name '" + vs.name + "'");
            }
            s.variants.push_back(vs);
        }
    }
    seen.insert("eval");
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::require_object(e, "eval");
        std::set<std::string> es;
        s.eval.rollouts = take(e, "rollouts", s.eval.rollouts, es);
        s.eval.K_infer = take(e, "K_infer", s.eval.K_infer, es);
        s.eval.temperature = take(e, "temperature", s.eval.temperature, es);
        s.eval.joint_min = take(e, "joint_min", s.eval.joint_min, es);
        s.k_infer_grid = take(e, "K_infer_grid", s.k_infer_grid, es);
        detail::reject_unknown(e, es, "eval.");
    }
    detail::reject_unknown(j, seen, "");
    s.eval.seed = derive_seed(s.seed, 4);

    validate(s.world);
    if (s.vocab_size < 2) {
        throw InvalidConfig("vocab.size must be at least 2");
    }
    if (s.model.kind == HeadKind::categorical) {
        s.model.outputs = s.vocab_size;
    }
    s.model.features = feature_dim(s.world.history_len);
    if (s.model.hidden < 1 || s.model.outputs < 1 || !(s.model.sigma > 0.0)) {
        throw InvalidConfig("model sizes and sigma must be positive");
    }
    const std::size_t width = s.model.outputs;
    if (s.eval.rollouts < 1 || s.eval.K_infer < 1 || s.eval.K_infer > width || !(s.eval.temperature > 0.0)) {
        throw InvalidConfig("eval needs rollouts >= 1, 1 <= K_infer <= outputs and temperature > 0");
    }
    for (std::size_t k : s.k_infer_grid) {
        if (k < 1 || k > width) {
            throw InvalidConfig("eval.K_infer_grid values must lie in [1, outputs]");
        }
    }
    if (s.n_train < 1 || s.n_heldout < 1) {
        throw InvalidConfig("scenarios.n_train and n_heldout must be positive");
    }
    return s;
}

inline ExperimentSpec load_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path);
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidConfig("config " + path + " is not valid JSON: " + e.what());
    }
    return parse_spec(j);
}

/// The spec with every default spelled out.
inline json spec_to_json(const ExperimentSpec& s) {
    json j;
    j["name"] = s.name;
    j["seed"] = s.seed;
    j["checkpoint_every"] = s.checkpoint_every;
    j["scenarios"] = {{"n_train", s.n_train},
                      {"n_heldout", s.n_heldout},
                      {"n_agents", s.world.n_agents},
                      {"branch_probs", s.world.branch_probs},
                      {"noise_std", s.world.noise_std},
                      {"history_len", s.world.history_len},
                      {"horizon", s.world.horizon},
                      {"min_speed", s.world.min_speed},
                      {"max_speed", s.world.max_speed},
                      {"min_entry_time", s.world.min_entry_time},
                      {"max_entry_time", s.world.max_entry_time}};
    j["vocab"] = {{"size", s.vocab_size}};
    j["model"] = {{"kind", s.model.kind == HeadKind::gmm ? "gmm" : "categorical"},
                  {"hidden", s.model.hidden},
                  {"modes", s.model.kind == HeadKind::gmm ? s.model.outputs : std::size_t{16}},
                  {"sigma", s.model.sigma}};
    json pre = detail::train_to_json(s.pretrain);
    pre.erase("strategy");
    j["pretrain"] = pre;
    j["finetune"] = json::array();
    for (const auto& v : s.variants) {
        json vj = detail::train_to_json(v.train);
        vj["name"] = v.name;
        j["finetune"].push_back(vj);
    }
    j["eval"] = {{"rollouts", s.eval.rollouts},
                 {"K_infer", s.eval.K_infer},
                 {"temperature", s.eval.temperature},
                 {"joint_min", s.eval.joint_min},
                 {"K_infer_grid", s.k_infer_grid}};
    return j;
}

struct ConfigKeyDoc {
    const char* key;
    const char* doc;
};

inline const std::vector<ConfigKeyDoc>& config_key_docs() {
    static const std::vector<ConfigKeyDoc> docs{
        {"name", "Experiment label, copied into reports."},
        {"seed", "Root seed. Scenarios, vocabulary, initialization, training and evaluation seeds derive from it."},
        {"checkpoint_every", "Epoch interval between checkpoint writes during training."},
        {"scenarios.n_train", "Training scenarios."},
        {"scenarios.n_heldout", "Held-out scenarios used for evaluation."},
        {"scenarios.n_agents", "Agents per scenario."},
        {"scenarios.branch_probs", "Probabilities of the left, straight and right branches."},
        {"scenarios.noise_std", "Std of the Gaussian position noise added to every GT state (m)."},
        {"scenarios.history_len", "History steps H."},
        {"scenarios.horizon", "Total steps T; the rollout covers T - H steps."},
        {"scenarios.min_speed", "Lower bound of the per-agent constant speed (m/s)."},
        {"scenarios.max_speed", "Upper bound of the per-agent constant speed (m/s)."},
        {"scenarios.min_entry_time", "Earliest time at which an agent reaches the junction (s)."},
        {"scenarios.max_entry_time", "Latest time at which an agent reaches the junction (s)."},
        {"vocab.size", "Token vocabulary size |V| (k-means over per-step deltas)."},
        {"model.kind", "categorical (token head) or gmm (Gaussian-mixture head)."},
        {"model.hidden", "Width of both tanh hidden layers."},
        {"model.modes", "Mixture modes of the gmm head."},
        {"model.sigma", "Fixed per-dimension std of every mixture component."},
        {"pretrain.epochs", "Behavior-cloning epochs."},
        {"pretrain.batch_scenarios", "Scenarios per optimizer step."},
        {"pretrain.learning_rate", "Initial Adam learning rate."},
        {"pretrain.lr_floor", "Final learning rate as a fraction of the initial one (linear decay)."},
        {"pretrain.yaw_weight", "Yaw weight of the state distance (m/rad)."},
        {"pretrain.min_speed_filter", "Agents with a slower mean GT future speed carry no loss (m/s)."},
        {"pretrain.K", "Unused by behavior cloning."},
        {"pretrain.K_infer", "Unused by behavior cloning."},
        {"pretrain.tau", "Unused by behavior cloning."},
        {"pretrain.temperature", "Unused by behavior cloning."},
        {"pretrain.distance_threshold", "Unused by behavior cloning."},
        {"pretrain.candidates", "Unused by behavior cloning."},
        {"pretrain.sample_rule", "Unused by behavior cloning."},
        {"finetune[].name", "Variant directory name; defaults to the strategy."},
        {"finetune[].strategy",
         "bc, catk, topk_sample, topk_filter, topk_distsample, trajeglish, smart or deterministic."},
        {"finetune[].epochs", "Fine-tuning epochs."},
        {"finetune[].batch_scenarios", "Scenarios per optimizer step."},
        {"finetune[].learning_rate", "Initial Adam learning rate."},
        {"finetune[].lr_floor", "Final learning rate as a fraction of the initial one."},
        {"finetune[].yaw_weight", "Yaw weight of the state distance (m/rad)."},
        {"finetune[].min_speed_filter", "Agents with a slower mean GT future speed carry no loss (m/s)."},
        {"finetune[].K", "Top-K width of CAT-K and top-K sampling, or candidate count of trajeglish/smart."},
        {"finetune[].K_infer", "Unused during fine-tuning."},
        {"finetune[].tau", "Temperature of trajeglish noise and of distance-weighted choice (m)."},
        {"finetune[].temperature", "Softmax temperature of top-K sampling rollouts."},
        {"finetune[].distance_threshold", "Final-state distance bound of topk_filter (m)."},
        {"finetune[].candidates", "Rollouts drawn per scenario by topk_distsample."},
        {"finetune[].sample_rule", "neg_dist or uniform candidate sampling for trajeglish/smart."},
        {"eval.rollouts", "Sampled rollouts R per held-out scenario."},
        {"eval.K_infer", "Top-K width of inference-time sampling."},
        {"eval.temperature", "Inference softmax temperature."},
        {"eval.joint_min", "Use the joint (all-agent) minimum instead of the per-agent minimum for minADE."},
        {"eval.K_infer_grid", "K_infer values evaluated by `sweep --param K_infer` when --values is omitted."},
    };
    return docs;
}

namespace detail {

inline void flatten(const json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix + it.key();
        if (it->is_object()) {
            flatten(*it, key + ".", out);
        } else {
            out[key] = it->dump();
        }
    }
}

}  // namespace detail

/// Markdown reference of every config key with its default.
inline std::string config_reference_markdown() {
    ExperimentSpec s;
    s.pretrain = default_pretrain();
    std::map<std::string, std::string> defaults;
    detail::flatten(spec_to_json(s), "", defaults);
    std::map<std::string, std::string> variant_defaults;
    json v = detail::train_to_json(default_finetune());
    detail::flatten(v, "finetune[].", variant_defaults);
    variant_defaults["finetune[].name"] = "strategy name";

    std::ostringstream out;
    out << "# Experiment config reference\n\n"
        << "Generated by `catk report --config-reference`. Every key is optional; unknown keys are rejected.\n"
        << "`finetune` is a list of variant objects, each fine-tuned from the same pre-trained checkpoint.\n\n"
        << "| key | default | meaning |\n|---|---|---|\n";
    for (const auto& d : config_key_docs()) {
        std::string def;
        if (auto it = defaults.find(d.key); it != defaults.end()) {
            def = it->second;
        } else if (auto vt = variant_defaults.find(d.key); vt != variant_defaults.end()) {
            def = vt->second;
        }
        out << "| `" << d.key << "` | `" << def << "` | " << d.doc << " |\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Run directory I/O

inline void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    detail::write_file(path.string(), text);
}

inline std::string read_text(const fs::path& path) { return detail::read_file(path.string()); }

inline std::string format_csv_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline std::string metrics_csv(std::span<const EpochMetrics> trace) {
    std::ostringstream out;
    out << kMetricsHeader << "\n" << "epoch,loss,ade_rollout_gt,pairs,steps\n";
    for (const auto& e : trace) {
        out << e.epoch << ',' << format_csv_number(e.loss) << ',' << format_csv_number(e.ade_rollout_gt) << ','
            << e.pairs << ',' << e.steps << '\n';
    }
    return out.str();
}

inline json trace_to_json(std::span<const EpochMetrics> trace) {
    json a = json::array();
    for (const auto& e : trace) {
        a.push_back({{"epoch", e.epoch},
                     {"loss", e.loss},
                     {"ade_rollout_gt", e.ade_rollout_gt},
                     {"pairs", e.pairs},
                     {"steps", e.steps}});
    }
    return a;
}

inline std::vector<EpochMetrics> trace_from_json(const json& a) {
    std::vector<EpochMetrics> out;
    for (const auto& e : a) {
        out.push_back({e.at("epoch").get<std::size_t>(), e.at("loss").get<double>(),
                       e.at("ade_rollout_gt").get<double>(), e.at("pairs").get<std::size_t>(),
                       e.at("steps").get<std::size_t>()});
    }
    return out;
}

/// Writes model, optimizer, progress and metrics of a training directory.
inline void save_train_state(const fs::path& dir, const TrainState& st) {
    fs::create_directories(dir);
    save_model((dir / "model.bin").string(), st.model);
    detail::write_file((dir / "optimizer.bin").string(), serialize_optimizer(st.optimizer));
    json progress = {{"epochs_done", st.epochs_done}, {"trace", trace_to_json(st.trace)}};
    write_text(dir / "train_state.json", progress.dump(2) + "\n");
    write_text(dir / "metrics.csv", metrics_csv(st.trace));
}

inline TrainState load_train_state(const fs::path& dir) {
    TrainState st;
    st.model = load_model((dir / "model.bin").string());
    st.optimizer = parse_optimizer(read_text(dir / "optimizer.bin"));
    json progress;
    try {
        progress = json::parse(read_text(dir / "train_state.json"));
        st.epochs_done = progress.at("epochs_done").get<std::size_t>();
        st.trace = trace_from_json(progress.at("trace"));
    } catch (const json::exception& e) {
        throw FormatError(1, (dir / "train_state.json").string() + ": " + e.what());
    }
    if (st.optimizer.m.size() != st.model.params.size()) {
        throw FormatError(1, "optimizer state does not match the model in " + dir.string());
    }
    return st;
}

inline std::string model_hash(const PolicyModel& m) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(serialize_model(m))));
    return buf;
}

struct RunPaths {
    fs::path root;

    fs::path config() const { return root / "config.json"; }
    fs::path train_scenarios() const { return root / "scenarios" / "train.jsonl"; }
    fs::path heldout_scenarios() const { return root / "scenarios" / "heldout.jsonl"; }
    fs::path vocab() const { return root / "vocab.txt"; }
    fs::path base() const { return root / "base"; }
    fs::path variant(const std::string& name) const { return root / "variants" / name; }
    fs::path sweep(const std::string& param, const std::string& value) const {
        return root / "sweeps" / (param + "-" + value);
    }
    fs::path results() const { return root / "results.csv"; }
};

/// Copies the spec file verbatim into the run directory, or checks that an
/// existing snapshot is identical.
inline void snapshot_config(const RunPaths& run, const std::string& config_text) {
    if (fs::exists(run.config())) {
        if (read_text(run.config()) != config_text) {
            throw InvalidConfig("run directory " + run.root.string() + " already holds a different config");
        }
        return;
    }
    write_text(run.config(), config_text);
}

inline ExperimentSpec run_spec(const RunPaths& run) {
    if (!fs::exists(run.config())) {
        throw InvalidConfig("no config.json in " + run.root.string() + "; run gen-scenarios first");
    }
    return load_spec(run.config().string());
}

inline void generate_run_scenarios(const RunPaths& run, const ExperimentSpec& spec) {
    const auto split = generate_fork_split(spec.n_train, spec.n_heldout, spec.world, spec.seed);
    fs::create_directories(run.train_scenarios().parent_path());
    save_scenarios(run.train_scenarios().string(), split.train);
    save_scenarios(run.heldout_scenarios().string(), split.heldout);
}

inline TokenVocabulary build_run_vocab(const RunPaths& run, const ExperimentSpec& spec) {
    const auto train = load_scenarios(run.train_scenarios().string());
    std::vector<Trajectory> corpus = all_trajectories(train);
    const auto vocab = build_vocabulary(std::span<const Trajectory>(corpus), spec.vocab_size, spec.seed,
                                        spec.world.dt);
    save_vocabulary(run.vocab().string(), vocab);
    return vocab;
}

/// Trains into `dir`, resuming from its saved state when `resume` is set.
inline TrainState train_into(const fs::path& dir, const PolicyModel& init, std::span<const Scenario> train,
                             const TokenVocabulary& vocab, const TrainConfig& cfg, std::size_t checkpoint_every,
                             bool resume) {
    TrainState st = resume && fs::exists(dir / "train_state.json") ? load_train_state(dir) : start_training(init);
    train_epochs(st, train, vocab, cfg, std::nullopt, [&](const TrainState& s) {
        if (checkpoint_every > 0 && s.epochs_done % checkpoint_every == 0) {
            save_train_state(dir, s);
        }
    });
    save_train_state(dir, st);
    return st;
}

inline std::uint64_t init_seed(const ExperimentSpec& s) { return derive_seed(s.seed, 1); }
inline std::uint64_t pretrain_seed(const ExperimentSpec& s) { return derive_seed(s.seed, 2); }
inline std::uint64_t finetune_seed(const ExperimentSpec& s) { return derive_seed(s.seed, 3); }

inline TrainState run_pretrain(const RunPaths& run, const ExperimentSpec& spec, bool resume = false) {
    const auto train = load_scenarios(run.train_scenarios().string());
    const auto vocab = load_vocabulary(run.vocab().string());
    TrainConfig cfg = spec.pretrain;
    cfg.seed = pretrain_seed(spec);
    return train_into(run.base(), init_model(spec.model, init_seed(spec)), train, vocab, cfg, spec.checkpoint_every,
                      resume);
}

inline const VariantSpec& find_variant(const ExperimentSpec& spec, const std::string& name) {
    for (const auto& v : spec.variants) {
        if (v.name == name) {
            return v;
        }
    }
    throw InvalidConfig("no fine-tuning variant named '" + name + "' in the config");
}

inline TrainState run_finetune(const RunPaths& run, const ExperimentSpec& spec, const VariantSpec& variant,
                               const fs::path& out_dir, bool resume = false) {
    const auto train = load_scenarios(run.train_scenarios().string());
    const auto vocab = load_vocabulary(run.vocab().string());
    const auto base = load_model((run.base() / "model.bin").string());
    TrainConfig cfg = variant.train;
    cfg.seed = finetune_seed(spec);
    return train_into(out_dir, base, train, vocab, cfg, spec.checkpoint_every, resume);
}

inline EvalReport run_eval(const RunPaths& run, const ExperimentSpec& spec, const fs::path& model_dir,
                           std::optional<std::size_t> k_infer = std::nullopt) {
    const auto heldout = load_scenarios(run.heldout_scenarios().string());
    const auto vocab = load_vocabulary(run.vocab().string());
    const auto model = load_model((model_dir / "model.bin").string());
    EvalConfig ec = spec.eval;
    if (k_infer) {
        ec.K_infer = *k_infer;
    }
    const EvalReport rep = evaluate(model, heldout, vocab, ec);
    write_text(model_dir / "eval.csv", std::string(kMetricsHeader) + "\n" + kEvalCsvHeader + "\n" + to_csv_row(rep) + "\n");
    write_text(model_dir / "eval.json", to_json(rep).dump(2) + "\n");
    return rep;
}

// ---------------------------------------------------------------------------
// Results tables

struct ResultRow {
    std::string name;
    std::string strategy;
    std::string key;  // sweep value or K
    std::string base_hash;
    std::string status = "ok";
    std::optional<EvalReport> report;
};

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c == '"' ? std::string("\"\"") : std::string(1, c);
    }
    return out + "\"";
}

inline std::string results_csv(std::span<const ResultRow> rows, const std::string& key_name = "K") {
    std::ostringstream out;
    out << kMetricsHeader << "\n"
        << "name,strategy," << key_name << ",base_hash,status," << kEvalCsvHeader << "\n";
    for (const auto& r : rows) {
        out << csv_field(r.name) << ',' << r.strategy << ',' << r.key << ',' << r.base_hash << ','
            << csv_field(r.status) << ',';
        if (r.report) {
            out << to_csv_row(*r.report);
        } else {
            out << ",,,,,,,,,";
        }
        out << '\n';
    }
    return out.str();
}

inline EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.ade = j.at("ade").get<double>();
    r.min_ade = j.at("min_ade").get<double>();
    r.collision_rate = j.at("collision_rate").get<double>();
    r.offroad_rate = j.at("offroad_rate").get<double>();
    const auto& re = j.at("realism");
    r.realism.speed = re.at("speed").get<double>();
    r.realism.acceleration = re.at("acceleration").get<double>();
    r.realism.yaw_rate = re.at("yaw_rate").get<double>();
    r.realism.nearest_distance = re.at("nearest_distance").get<double>();
    r.n_scenarios = j.at("n_scenarios").get<std::size_t>();
    r.n_rollouts = j.at("n_rollouts").get<std::size_t>();
    return r;
}

inline std::optional<EvalReport> read_eval(const fs::path& dir) {
    const auto p = dir / "eval.json";
    if (!fs::exists(p)) {
        return std::nullopt;
    }
    try {
        return report_from_json(json::parse(read_text(p)));
    } catch (const json::exception& e) {
        throw FormatError(1, p.string() + ": " + e.what());
    }
}

inline std::string variant_key(const TrainConfig& t) {
    switch (t.strategy) {
        case Strategy::bc: return "-";
        case Strategy::deterministic: return "1";
        default: return std::to_string(t.sampler.K);
    }
}

using ProgressFn = std::function<void(const std::string&)>;

/// BC base plus one fine-tuned variant per configured strategy, all evaluated
/// on the held-out split with identical rollout seeds. A failing variant is
/// recorded with its error and the remaining variants still run.
inline std::vector<ResultRow> run_ablation(const RunPaths& run, const ExperimentSpec& spec,
                                           const ProgressFn& progress = {}) {
    auto note = [&](const std::string& m) {
        if (progress) {
            progress(m);
        }
    };
    if (!fs::exists(run.train_scenarios()) || !fs::exists(run.heldout_scenarios())) {
        note("generating scenarios");
        generate_run_scenarios(run, spec);
    }
    if (!fs::exists(run.vocab())) {
        note("building vocabulary");
        build_run_vocab(run, spec);
    }
    std::vector<ResultRow> rows;
    note("pre-training base");
    const TrainState base = run_pretrain(run, spec, true);
    const std::string hash = model_hash(base.model);
    ResultRow b{"base", "bc", "-", hash, "ok", std::nullopt};
    note("evaluating base");
    b.report = run_eval(run, spec, run.base());
    rows.push_back(b);
    for (const auto& v : spec.variants) {
        ResultRow r{v.name, to_string(v.train.strategy), variant_key(v.train), hash, "ok", std::nullopt};
        try {
            note("fine-tuning " + v.name);
            run_finetune(run, spec, v, run.variant(v.name), true);
            note("evaluating " + v.name);
            r.report = run_eval(run, spec, run.variant(v.name));
        } catch (const std::exception& e) {
            r.status = std::string("failed: ") + e.what();
        }
        rows.push_back(r);
    }
    write_text(run.results(), results_csv(rows));
    return rows;
}

/// Rebuilds the merged table from the snapshots in a run directory.
inline std::vector<ResultRow> collect_results(const RunPaths& run) {
    const ExperimentSpec spec = run_spec(run);
    std::vector<ResultRow> rows;
    std::string hash;
    if (fs::exists(run.base() / "model.bin")) {
        hash = model_hash(load_model((run.base() / "model.bin").string()));
    }
    rows.push_back({"base", "bc", "-", hash, fs::exists(run.base() / "eval.json") ? "ok" : "missing",
                    read_eval(run.base())});
    for (const auto& v : spec.variants) {
        const auto dir = run.variant(v.name);
        rows.push_back({v.name, to_string(v.train.strategy), variant_key(v.train), hash,
                        fs::exists(dir / "eval.json") ? "ok" : "missing", read_eval(dir)});
    }
    return rows;
}

/// Evaluates one model for every K_infer in the grid with R rollouts per
/// scenario and identical seeds across grid values.
inline std::vector<std::pair<std::size_t, EvalReport>> k_infer_sweep(const PolicyModel& model,
                                                                      std::span<const Scenario> scenarios,
                                                                      const TokenVocabulary& vocab,
                                                                      std::span<const std::size_t> grid,
                                                                      std::size_t rollouts, std::uint64_t seed,
                                                                      double temperature = 1.0) {
    std::vector<std::pair<std::size_t, EvalReport>> out;
    for (std::size_t k : grid) {
        EvalConfig ec;
        ec.rollouts = rollouts;
        ec.K_infer = k;
        ec.temperature = temperature;
        ec.seed = seed;
        out.emplace_back(k, evaluate(model, scenarios, vocab, ec));
    }
    return out;
}

inline std::string k_infer_csv(std::span<const std::pair<std::size_t, EvalReport>> rows) {
    std::ostringstream out;
    out << kMetricsHeader << "\n" << "K_infer," << kEvalCsvHeader << "\n";
    for (const auto& [k, rep] : rows) {
        out << k << ',' << to_csv_row(rep) << '\n';
    }
    return out.str();
}

/// One run directory per swept value. `K`, `tau` and `epochs` fine-tune a
/// variant derived from the first configured one (CAT-K by default);
/// `K_infer` re-evaluates the base model.
inline std::vector<ResultRow> run_sweep(const RunPaths& run, const ExperimentSpec& spec, const std::string& param,
                                        const std::vector<std::string>& values, const ProgressFn& progress = {}) {
    auto note = [&](const std::string& m) {
        if (progress) {
            progress(m);
        }
    };
    if (param != "K" && param != "K_infer" && param != "tau" && param != "epochs") {
        throw InvalidConfig("sweep --param must be one of K, K_infer, tau, epochs");
    }
    if (values.empty()) {
        throw InvalidConfig("sweep needs at least one value");
    }
    if (!fs::exists(run.train_scenarios()) || !fs::exists(run.heldout_scenarios())) {
        note("generating scenarios");
        generate_run_scenarios(run, spec);
    }
    if (!fs::exists(run.vocab())) {
        note("building vocabulary");
        build_run_vocab(run, spec);
    }
    note("pre-training base");
    const TrainState base = run_pretrain(run, spec, true);
    const std::string hash = model_hash(base.model);
    std::vector<ResultRow> rows;
    for (const auto& value : values) {
        const auto dir = run.sweep(param, value);
        ResultRow r{param + "=" + value, "", value, hash, "ok", std::nullopt};
        try {
            if (param == "K_infer") {
                std::size_t k = 0;
                try {
                    k = std::stoul(value);
                } catch (const std::exception&) {
                    throw InvalidConfig("sweep value '" + value + "' is not a count");
                }
                r.strategy = "bc";
                fs::create_directories(dir);
                save_model((dir / "model.bin").string(), base.model);
                if (k < 1 || k > base.model.config.outputs) {
                    throw InvalidConfig("K_infer value out of range");
                }
                note("evaluating K_infer=" + value);
                r.report = run_eval(run, spec, dir, k);
            } else {
                VariantSpec v = spec.variants.empty() ? VariantSpec{"catk", default_finetune()} : spec.variants.front();
                try {
                    if (param == "K") {
                        v.train.sampler.K = std::stoul(value);
                    } else if (param == "epochs") {
                        v.train.epochs = std::stoul(value);
                    } else {
                        v.train.sampler.tau = std::stod(value);
                    }
                } catch (const std::invalid_argument&) {
                    throw InvalidConfig("sweep value '" + value + "' is not a number");
                }
                r.strategy = to_string(v.train.strategy);
                note("fine-tuning " + r.name);
                run_finetune(run, spec, v, dir, true);
                r.report = run_eval(run, spec, dir);
            }
        } catch (const InvalidConfig&) {
            throw;
        } catch (const std::exception& e) {
            r.status = std::string("failed: ") + e.what();
        }
        rows.push_back(r);
    }
    write_text(run.root / "sweeps" / (param + ".csv"), results_csv(rows, param));
    return rows;
}

}  // namespace catk
