// catk: command-line driver for scenario generation, tokenization, training,
// rollouts, evaluation and sweeps. See README.md for the grammar.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "catk/catk.hpp"

namespace {

using namespace catk;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct Options {
    std::string config;
    std::string run;
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::string model = "base";
    std::string kind = "sample";
    std::optional<std::size_t> K;
    std::optional<std::size_t> k_infer;
    std::optional<std::size_t> rollouts;
    std::optional<double> temperature;
    std::size_t limit = 0;
    std::string param;
    std::string values;
    bool resume = false;
    bool quiet = false;
    bool config_reference = false;
};

fs::path seed_file(const RunPaths& run) { return run.root / "seed.txt"; }

/// The spec of a run directory with the effective seed applied: an explicit
/// --seed wins, then the seed recorded by gen-scenarios, then the config.
ExperimentSpec effective_spec(const RunPaths& run, const Options& o) {
    ExperimentSpec spec = run_spec(run);
    std::optional<std::uint64_t> seed = o.seed;
    if (!seed && fs::exists(seed_file(run))) {
        try {
            seed = std::stoull(read_text(seed_file(run)));
        } catch (const std::exception&) {
            throw FormatError(1, seed_file(run).string() + ": not a seed");
        }
    }
    if (seed) {
        spec.seed = *seed;
        spec.eval.seed = derive_seed(*seed, 4);
    }
    return spec;
}

void require_file(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) {
        throw InvalidConfig("missing " + p.string() + "; " + hint);
    }
}

fs::path model_dir(const RunPaths& run, const std::string& name) {
    const fs::path dir = name == "base" ? run.base() : run.variant(name);
    require_file(dir / "model.bin", "train the model first");
    return dir;
}

void log_line(const Options& o, const std::string& msg) {
    if (!o.quiet) {
        std::fprintf(stderr, "%s\n", msg.c_str());
    }
}

EpochCallback epoch_logger(const Options& o) {
    return [&o](const TrainState& st) {
        const auto& e = st.trace.back();
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %zu loss %.6f ade_rollout_gt %.6f pairs %zu", e.epoch, e.loss,
                      e.ade_rollout_gt, e.pairs);
        log_line(o, buf);
    };
}

int cmd_gen_scenarios(const Options& o) {
    const RunPaths run{o.run};
    const std::string text = read_text(o.config);
    ExperimentSpec spec = load_spec(o.config);
    if (o.seed) {
        spec.seed = *o.seed;
    }
    fs::create_directories(run.root);
    snapshot_config(run, text);
    write_text(seed_file(run), std::to_string(spec.seed) + "\n");
    generate_run_scenarios(run, spec);
    log_line(o, "wrote " + run.train_scenarios().string() + " and " + run.heldout_scenarios().string());
    return kExitOk;
}

int cmd_build_vocab(const Options& o) {
    const RunPaths run{o.run};
    const ExperimentSpec spec = effective_spec(run, o);
    require_file(run.train_scenarios(), "run gen-scenarios first");
    const auto vocab = build_run_vocab(run, spec);
    const auto train = load_scenarios(run.train_scenarios().string());
    double q = 0.0;
    std::size_t n = 0;
    for (const auto& sc : train) {
        for (const auto& traj : sc.gt) {
            q += quantization_ade(traj, vocab);
            ++n;
        }
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "vocabulary of %zu tokens, mean quantization ADE %.6f m", vocab.size(),
                  n ? q / static_cast<double>(n) : 0.0);
    log_line(o, buf);
    return kExitOk;
}

TrainState train_logged(const fs::path& dir, const PolicyModel& init, const ExperimentSpec& spec,
                        const TrainConfig& cfg, const Options& o) {
    const RunPaths run{o.run};
    const auto train = load_scenarios(run.train_scenarios().string());
    const auto vocab = load_vocabulary(run.vocab().string());
    const bool resume = o.resume && fs::exists(dir / "train_state.json");
    TrainState st = resume ? load_train_state(dir) : start_training(init);
    if (resume) {
        log_line(o, "resuming at epoch " + std::to_string(st.epochs_done));
    }
    const auto logger = epoch_logger(o);
    train_epochs(st, train, vocab, cfg, std::nullopt, [&](const TrainState& s) {
        logger(s);
        if (spec.checkpoint_every > 0 && s.epochs_done % spec.checkpoint_every == 0) {
            save_train_state(dir, s);
        }
    });
    save_train_state(dir, st);
    return st;
}

int cmd_pretrain(const Options& o) {
    const RunPaths run{o.run};
    const ExperimentSpec spec = effective_spec(run, o);
    require_file(run.vocab(), "run build-vocab first");
    TrainConfig cfg = spec.pretrain;
    cfg.seed = pretrain_seed(spec);
    const auto st = train_logged(run.base(), init_model(spec.model, init_seed(spec)), spec, cfg, o);
    log_line(o, "base checkpoint " + model_hash(st.model));
    return kExitOk;
}

int cmd_finetune(const Options& o) {
    const RunPaths run{o.run};
    const ExperimentSpec spec = effective_spec(run, o);
    require_file(run.vocab(), "run build-vocab first");
    require_file(run.base() / "model.bin", "run pretrain first");
    const VariantSpec& v = find_variant(spec, o.variant);
    TrainConfig cfg = v.train;
    cfg.seed = finetune_seed(spec);
    const auto base = load_model((run.base() / "model.bin").string());
    const auto st = train_logged(run.variant(v.name), base, spec, cfg, o);
    log_line(o, v.name + " checkpoint " + model_hash(st.model));
    return kExitOk;
}

int cmd_rollout(const Options& o) {
    const RunPaths run{o.run};
    const ExperimentSpec spec = effective_spec(run, o);
    const auto heldout = load_scenarios(run.heldout_scenarios().string());
    const auto vocab = load_vocabulary(run.vocab().string());
    const std::size_t n = o.limit == 0 ? heldout.size() : std::min(o.limit, heldout.size());
    const std::uint64_t seed = derive_seed(spec.seed, 5);
    const double temp = o.temperature.value_or(spec.eval.temperature);

    std::optional<PolicyModel> model;
    const bool needs_model = o.kind != "teacher" && o.kind != "trajeglish" && o.kind != "smart";
    if (needs_model) {
        model = load_model((model_dir(run, o.model) / "model.bin").string());
    }
    const bool gmm = model && model->config.kind == HeadKind::gmm;
    const std::size_t width = gmm ? model->config.outputs : vocab.size();
    const std::size_t k = o.K.value_or(o.kind == "catk" ? std::min<std::size_t>(16, width)
                                                          : std::min(spec.eval.K_infer, width));
    if (k < 1 || k > width) {
        throw InvalidConfig("--K must lie in [1, " + std::to_string(width) + "]");
    }

    std::ostringstream out;
    for (std::size_t s = 0; s < n; ++s) {
        const auto& sc = heldout[s];
        const std::uint64_t rs = derive_seed(seed, s);
        RolloutRecord rec;
        if (o.kind == "catk") {
            rec = gmm ? rollout_gmm_catk(*model, sc, k, vocab.replanning_period) : rollout_catk(*model, sc, vocab, k);
        } else if (o.kind == "deterministic") {
            rec = gmm ? rollout_gmm_sample(*model, sc, 1, 1.0, rs, vocab.replanning_period)
                      : rollout_deterministic(*model, sc, vocab);
        } else if (o.kind == "sample") {
            rec = gmm ? rollout_gmm_sample(*model, sc, k, temp, rs, vocab.replanning_period)
                      : rollout_sample(*model, sc, vocab, k, temp, rs);
        } else if (o.kind == "teacher") {
            rec = teacher_record(sc, vocab);
        } else if (o.kind == "trajeglish") {
            rec = noisy_tokenize_trajeglish(sc, vocab, o.K.value_or(5), temp, SampleRule::neg_dist, rs);
        } else if (o.kind == "smart") {
            rec = perturb_smart(sc, vocab, o.K.value_or(5), SampleRule::uniform, rs);
        } else {
            throw InvalidConfig("unknown rollout kind '" + o.kind + "'");
        }
        out << to_json(rec).dump() << '\n';
    }
    const fs::path path = run.root / "rollouts" / (o.model + "-" + o.kind + ".jsonl");
    write_text(path, out.str());
    log_line(o, "wrote " + std::to_string(n) + " rollouts to " + path.string());
    return kExitOk;
}

int cmd_eval(const Options& o) {
    const RunPaths run{o.run};
    ExperimentSpec spec = effective_spec(run, o);
    if (o.rollouts) {
        spec.eval.rollouts = *o.rollouts;
    }
    if (o.temperature) {
        spec.eval.temperature = *o.temperature;
    }
    const fs::path dir = model_dir(run, o.model);
    const auto rep = run_eval(run, spec, dir, o.k_infer);
    std::printf("%s\n%s\n", kEvalCsvHeader, to_csv_row(rep).c_str());
    return kExitOk;
}

std::vector<std::string> split_values(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void print_rows(std::span<const ResultRow> rows) {
    for (const auto& r : rows) {
        std::printf("%-24s %-16s %s", r.name.c_str(), r.strategy.c_str(), r.status.c_str());
        if (r.report) {
            std::printf("  minADE %.4f  collision %.4f  offroad %.5f", r.report->min_ade, r.report->collision_rate,
                        r.report->offroad_rate);
        }
        std::printf("\n");
    }
}

int cmd_sweep(const Options& o) {
    const RunPaths run{o.run};
    if (!o.config.empty()) {
        fs::create_directories(run.root);
        snapshot_config(run, read_text(o.config));
        if (o.seed) {
            write_text(seed_file(run), std::to_string(*o.seed) + "\n");
        }
    }
    const ExperimentSpec spec = effective_spec(run, o);
    if (!fs::exists(seed_file(run))) {
        write_text(seed_file(run), std::to_string(spec.seed) + "\n");
    }
    const auto note = [&o](const std::string& m) { log_line(o, m); };
    if (o.param.empty()) {
        const auto rows = run_ablation(run, spec, note);
        print_rows(rows);
        log_line(o, "wrote " + run.results().string());
        return kExitOk;
    }
    std::vector<std::string> values = split_values(o.values);
    if (values.empty() && o.param == "K_infer") {
        for (std::size_t k : spec.k_infer_grid) {
            values.push_back(std::to_string(k));
        }
    }
    const auto rows = run_sweep(run, spec, o.param, values, note);
    print_rows(rows);
    log_line(o, "wrote " + (run.root / "sweeps" / (o.param + ".csv")).string());
    return kExitOk;
}

int cmd_report(const Options& o) {
    if (o.config_reference) {
        std::fputs(config_reference_markdown().c_str(), stdout);
        return kExitOk;
    }
    if (o.run.empty()) {
        throw InvalidConfig("report needs --run or --config-reference");
    }
    const RunPaths run{o.run};
    const auto rows = collect_results(run);
    const std::string csv = results_csv(rows);
    write_text(run.results(), csv);
    std::fputs(csv.c_str(), stdout);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"catk: closed-loop supervised fine-tuning of tokenized traffic policies"};
    app.require_subcommand(1);

    auto add_run = [&o](CLI::App* c, bool required = true) {
        auto* opt = c->add_option("--run", o.run, "Run directory");
        if (required) {
            opt->required();
        }
    };
    auto add_seed = [&o](CLI::App* c) { c->add_option("--seed", o.seed, "Root seed (overrides the run's seed)"); };

    auto* gen = app.add_subcommand("gen-scenarios", "Snapshot a config and generate the scenario splits");
    gen->add_option("--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    add_run(gen);
    add_seed(gen);

    auto* voc = app.add_subcommand("build-vocab", "Build the token vocabulary from the training split");
    add_run(voc);
    add_seed(voc);

    auto* pre = app.add_subcommand("pretrain", "Behavior-cloning pre-training into <run>/base");
    add_run(pre);
    add_seed(pre);
    pre->add_flag("--resume", o.resume, "Continue from the last checkpoint");

    auto* fin = app.add_subcommand("finetune", "Fine-tune a configured variant from the base checkpoint");
    add_run(fin);
    add_seed(fin);
    fin->add_option("--variant", o.variant, "Variant name from the config")->required();
    fin->add_flag("--resume", o.resume, "Continue from the last checkpoint");

    auto* rol = app.add_subcommand("rollout", "Write held-out rollouts to <run>/rollouts/<model>-<kind>.jsonl");
    add_run(rol);
    add_seed(rol);
    rol->add_option("--model", o.model, "base or a variant name");
    rol->add_option("--kind", o.kind, "Rollout kind")
        ->check(CLI::IsMember({"catk", "sample", "deterministic", "teacher", "trajeglish", "smart"}));
    rol->add_option("--K", o.K, "Top-K width or candidate count");
    rol->add_option("--temperature", o.temperature, "Softmax temperature, or tau for trajeglish");
    rol->add_option("--limit", o.limit, "Only the first N held-out scenarios (0 = all)");

    auto* ev = app.add_subcommand("eval", "Evaluate a model on the held-out split");
    add_run(ev);
    add_seed(ev);
    ev->add_option("--model", o.model, "base or a variant name");
    ev->add_option("--K-infer", o.k_infer, "Inference top-K width");
    ev->add_option("--rollouts", o.rollouts, "Rollouts per scenario");
    ev->add_option("--temperature", o.temperature, "Inference temperature");

    auto* sw = app.add_subcommand("sweep", "Full ablation, or one directory per value of --param");
    add_run(sw);
    add_seed(sw);
    sw->add_option("--config", o.config, "Experiment config to snapshot first")->check(CLI::ExistingFile);
    sw->add_option("--param", o.param, "Swept parameter")->check(CLI::IsMember({"K", "K_infer", "tau", "epochs"}));
    sw->add_option("--values", o.values, "Comma-separated values");

    auto* rep = app.add_subcommand("report", "Rebuild results.csv from the run directory snapshots");
    add_run(rep, false);
    rep->add_flag("--config-reference", o.config_reference, "Print the config reference page");

    for (auto* c : {gen, voc, pre, fin, rol, ev, sw, rep}) {
        c->add_flag("--quiet", o.quiet, "No progress output");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return kExitConfig;
    }

    try {
        if (*gen) return cmd_gen_scenarios(o);
        if (*voc) return cmd_build_vocab(o);
        if (*pre) return cmd_pretrain(o);
        if (*fin) return cmd_finetune(o);
        if (*rol) return cmd_rollout(o);
        if (*ev) return cmd_eval(o);
        if (*sw) return cmd_sweep(o);
        if (*rep) return cmd_report(o);
    } catch (const InvalidConfig& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
