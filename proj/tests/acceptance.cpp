// Acceptance run: one PASS/FAIL line per criterion.
//
// Exit status covers the exact and statistical criteria (1-4, 8, 9). The
// desk-scale reproductions (5-7) are reported but do not change the exit
// status.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "catk/catk.hpp"
#include "oracles.hpp"

using namespace catk;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* title;
    bool gating;
    std::function<Outcome()> run;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

TokenVocabulary corpus_vocab(std::size_t n, std::uint64_t seed, std::size_t size) {
    const auto scs = generate_fork_world(n, ForkWorldConfig{}, seed);
    const auto corpus = all_trajectories(scs);
    return build_vocabulary(std::span<const Trajectory>(corpus), size, seed);
}

PolicyModel random_policy(Rng& rng, std::size_t outputs, HeadKind kind = HeadKind::categorical,
                          std::size_t hidden = 32) {
    ModelConfig c;
    c.kind = kind;
    c.outputs = outputs;
    c.hidden = hidden;
    return oracle::random_model(c, rng);
}

Scenario first_step_only(const Scenario& sc) {
    Scenario out = sc;
    for (auto& t : out.gt) {
        t.resize(sc.history_len + 2);
    }
    return out;
}

// ---------------------------------------------------------------------------

Outcome exact_equivalences() {
    const auto vocab = corpus_vocab(80, 11, 64);
    const auto scs = generate_fork_world(10, ForkWorldConfig{}, 12);
    Rng rng(13);
    std::size_t mismatches = 0;
    std::size_t checks = 0;
    for (int m = 0; m < 5; ++m) {
        const auto model = random_policy(rng, vocab.size());
        for (const auto& sc : scs) {
            const auto full = rollout_catk(model, sc, vocab, vocab.size());
            for (std::size_t r = 0; r < full.rows(); ++r) {
                const auto tok = tokenize_trajectory(std::span<const AgentState>(sc.gt[r]).subspan(sc.history_len), vocab);
                mismatches += full.states[r] == tok.states ? 0 : 1;
                ++checks;
            }
            const auto one = rollout_catk(model, sc, vocab, 1);
            const auto det = rollout_deterministic(model, sc, vocab);
            mismatches += (one.states == det.states && one.chosen == det.chosen) ? 0 : 1;
            ++checks;
        }
    }
    return {mismatches == 0, std::to_string(checks) + " comparisons, " + std::to_string(mismatches) + " mismatches"};
}

Outcome quantization_asymptote() {
    const auto split = generate_fork_split(3000, 300, ForkWorldConfig{}, 1);
    const auto corpus = all_trajectories(split.train);
    const auto vocab = build_vocabulary(std::span<const Trajectory>(corpus), 64, 1);
    Rng rng(21);
    const auto model = random_policy(rng, vocab.size());
    double worst = 0.0;
    double ade_sum = 0.0;
    double q_sum = 0.0;
    std::size_t rows = 0;
    for (const auto& sc : split.heldout) {
        const auto rec = rollout_catk(model, sc, vocab, vocab.size());
        std::vector<Trajectory> gt;
        const auto roll = future_pair(rec, sc, &gt);
        for (std::size_t r = 0; r < rec.rows(); ++r) {
            const double a = ade(std::span<const Trajectory>(&roll[r], 1), std::span<const Trajectory>(&gt[r], 1));
            const double q = quantization_ade(std::span<const AgentState>(sc.gt[r]).subspan(sc.history_len), vocab);
            worst = std::max(worst, std::abs(a - q));
            ade_sum += a;
            q_sum += q;
            ++rows;
        }
    }
    const double agg = std::abs(ade_sum - q_sum) / static_cast<double>(rows);
    return {worst <= 1e-12 && agg <= 1e-12,
            "held-out ADE " + fmt("%.6f", ade_sum / static_cast<double>(rows)) + " m, max |ADE - quantization| " +
                fmt("%.1e", worst)};
}

Outcome gradient_correctness() {
    Rng rng(31);
    double worst_ce = 0.0;
    double worst_gmm = 0.0;
    for (HeadKind kind : {HeadKind::categorical, HeadKind::gmm}) {
        for (int draw = 0; draw < 20; ++draw) {
            const auto m = random_policy(rng, kind == HeadKind::gmm ? 16 : 64, kind, 12);
            const Matrix x = oracle::random_features(rng, feature_dim(4), 6);
            std::vector<std::size_t> targets(6);
            std::vector<ActionToken> deltas(6);
            for (std::size_t i = 0; i < 6; ++i) {
                targets[i] = static_cast<std::size_t>(rng() % 64);
                deltas[i] = {uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -0.5, 0.5)};
            }
            auto loss = [&](const PolicyModel& p) {
                return kind == HeadKind::gmm ? gmm_nll_grad(p, x, deltas) : ce_loss_grad(p, x, targets);
            };
            PolicyModel probe = m;
            const auto check = oracle::check_gradient(
                [&](const Vector& p) {
                    probe.params = p;
                    return loss(probe).loss;
                },
                m.params, loss(m).grad);
            (kind == HeadKind::gmm ? worst_gmm : worst_ce) =
                std::max(kind == HeadKind::gmm ? worst_gmm : worst_ce, check.max_rel_error);
        }
    }
    return {worst_ce < 1e-4 && worst_gmm < 1e-4,
            "max relative error CE " + fmt("%.2e", worst_ce) + ", GMM NLL " + fmt("%.2e", worst_gmm)};
}

Outcome catk_monotonicity() {
    const auto vocab = corpus_vocab(80, 41, 64);
    Rng rng(42);
    std::size_t violations = 0;
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> logits(vocab.size());
        for (auto& l : logits) {
            l = 3.0 * gaussian(rng);
        }
        const auto p = softmax(logits);
        const AgentState s{uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, -kPi, kPi), 4.5, 2.0};
        const AgentState g = apply_token(s, {uniform(rng, 0, 5), uniform(rng, -1, 1), uniform(rng, -0.5, 0.5)});
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t k : {1, 2, 4, 8, 16, 32, 64}) {
            double d = 0.0;
            catk_select(p, s, g, vocab, k, kDefaultYawWeight, &d);
            violations += d > prev ? 1 : 0;
            prev = d;
        }
    }
    return {violations == 0, "10000 triples, " + std::to_string(violations) + " violations"};
}

// Desk-scale categorical study shared by criteria 5 and 6.
struct SeedResult {
    double bc_offroad = 0.0;
    double bc_minade = 0.0;
    std::map<std::string, double> offroad;
    std::map<std::string, double> minade;
};

struct EvalNumbers {
    double offroad = 0.0;
    double minade16 = 0.0;
};

EvalNumbers desk_eval(const PolicyModel& model, std::span<const Scenario> heldout, const TokenVocabulary& vocab,
                      std::uint64_t seed) {
    EvalConfig ec;
    ec.rollouts = 32;
    ec.K_infer = 8;
    ec.temperature = 1.0;
    ec.seed = seed;
    const auto rolls = sample_rollouts(model, heldout, vocab, ec);
    EvalNumbers out;
    out.offroad = offroad_rate(rolls, heldout);
    double sum = 0.0;
    std::size_t rows = 0;
    for (std::size_t s = 0; s < heldout.size(); ++s) {
        const auto first16 = std::span<const RolloutRecord>(rolls).subspan(s * ec.rollouts, 16);
        sum += min_ade(first16, heldout[s]) * static_cast<double>(first16.front().rows());
        rows += first16.front().rows();
    }
    out.minade16 = sum / static_cast<double>(rows);
    return out;
}

const std::vector<SeedResult>& desk_study() {
    static const std::vector<SeedResult> results = [] {
        std::vector<SeedResult> out;
        for (std::uint64_t seed : {1, 2, 3}) {
            const auto t0 = std::chrono::steady_clock::now();
            const ForkWorldConfig wc;
            const auto split = generate_fork_split(3000, 300, wc, seed);
            const auto corpus = all_trajectories(split.train);
            const auto vocab = build_vocabulary(std::span<const Trajectory>(corpus), 64, seed, wc.dt);
            ModelConfig mc;
            TrainConfig pre;
            pre.epochs = 25;
            pre.learning_rate = 3e-3;
            pre.seed = derive_seed(seed, 2);
            const auto bc = pretrain_bc(init_model(mc, derive_seed(seed, 1)), split.train, vocab, pre).model;
            SeedResult r;
            const auto be = desk_eval(bc, split.heldout, vocab, derive_seed(seed, 4));
            r.bc_offroad = be.offroad;
            r.bc_minade = be.minade16;
            struct Variant {
                const char* name;
                Strategy strategy;
                std::size_t k;
                SampleRule rule;
            };
            for (const Variant& v : {Variant{"catk", Strategy::catk, 16, SampleRule::neg_dist},
                                     Variant{"topk_sample", Strategy::topk_sample, 16, SampleRule::neg_dist},
                                     Variant{"trajeglish", Strategy::trajeglish, 5, SampleRule::neg_dist},
                                     Variant{"smart", Strategy::smart, 5, SampleRule::uniform}}) {
                TrainConfig ft;
                ft.epochs = 5;
                ft.learning_rate = 1e-3;
                ft.strategy = v.strategy;
                ft.sampler.K = v.k;
                ft.sampler.rule = v.rule;
                ft.sampler.tau = 1.0;
                ft.seed = derive_seed(seed, 3);
                const auto tuned = finetune_closed_loop(bc, split.train, vocab, ft).model;
                const auto e = desk_eval(tuned, split.heldout, vocab, derive_seed(seed, 4));
                r.offroad[v.name] = e.offroad;
                r.minade[v.name] = e.minade16;
            }
            std::printf("  seed %llu: off-road BC %.4f%% CAT-16 %.4f%% top-K %.4f%% trajeglish %.4f%% smart %.4f%% | "
                        "minADE16 BC %.4f CAT-16 %.4f (%.0fs)\n",
                        static_cast<unsigned long long>(seed), 100 * r.bc_offroad, 100 * r.offroad["catk"],
                        100 * r.offroad["topk_sample"], 100 * r.offroad["trajeglish"], 100 * r.offroad["smart"],
                        r.bc_minade, r.minade["catk"], seconds_since(t0));
            std::fflush(stdout);
            out.push_back(r);
        }
        return out;
    }();
    return results;
}

Outcome covariate_shift() {
    const auto& res = desk_study();
    bool per_seed = true;
    std::vector<double> bc;
    std::vector<double> cat;
    for (const auto& r : res) {
        per_seed = per_seed && r.offroad.at("catk") < r.bc_offroad && r.minade.at("catk") < r.bc_minade;
        bc.push_back(r.bc_offroad);
        cat.push_back(r.offroad.at("catk"));
    }
    const double reduction = median3(bc) > 0.0 ? 1.0 - median3(cat) / median3(bc) : 0.0;
    std::size_t minade_wins = 0;
    std::size_t offroad_wins = 0;
    for (const auto& r : res) {
        minade_wins += r.minade.at("catk") < r.bc_minade ? 1 : 0;
        offroad_wins += r.offroad.at("catk") < r.bc_offroad ? 1 : 0;
    }
    return {per_seed && reduction >= 0.2,
            "minADE16 lower on " + std::to_string(minade_wins) + "/3 seeds, off-road lower on " +
                std::to_string(offroad_wins) + "/3 seeds, median off-road reduction " + fmt("%.1f%%", 100 * reduction)};
}

Outcome baseline_ordering() {
    const auto& res = desk_study();
    std::map<std::string, std::vector<double>> col;
    std::vector<double> bc;
    for (const auto& r : res) {
        bc.push_back(r.bc_offroad);
        for (const auto& [k, v] : r.offroad) {
            col[k].push_back(v);
        }
    }
    const double mbc = median3(bc);
    const double topk = median3(col["topk_sample"]);
    const double cat = median3(col["catk"]);
    const double traj = median3(col["trajeglish"]) / mbc - 1.0;
    const double smart = median3(col["smart"]) / mbc - 1.0;
    const bool ok = topk >= cat && std::abs(traj) <= 0.2 && std::abs(smart) <= 0.2;
    return {ok, "median off-road top-K " + fmt("%.3f%%", 100 * topk) + " vs CAT-16 " + fmt("%.3f%%", 100 * cat) +
                    ", trajeglish " + fmt("%+.1f%%", 100 * traj) + " and smart " + fmt("%+.1f%%", 100 * smart) +
                    " relative to BC"};
}

Outcome gmm_extension() {
    std::vector<double> bc;
    std::vector<double> cat3;
    std::vector<double> cat1;
    bool per_seed = true;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto split = generate_fork_split(1000, 100, ForkWorldConfig{}, seed);
        TokenVocabulary unit;
        unit.tokens = {{1, 0, 0}};
        ModelConfig mc;
        mc.kind = HeadKind::gmm;
        mc.outputs = 16;
        mc.sigma = 0.5;
        TrainConfig pre;
        pre.epochs = 25;
        pre.learning_rate = 3e-3;
        pre.strategy = Strategy::bc;
        pre.sampler.K = 1;
        pre.seed = derive_seed(seed, 2);
        TrainState base = start_training(init_model(mc, derive_seed(seed, 1)));
        train_epochs(base, split.train, unit, pre);
        EvalConfig ec;
        ec.rollouts = 32;
        ec.K_infer = 3;
        ec.temperature = 1.0;
        ec.seed = derive_seed(seed, 4);
        const double b = evaluate(base.model, split.heldout, unit, ec).min_ade;
        double tuned[2] = {0.0, 0.0};
        for (std::size_t i = 0; i < 2; ++i) {
            TrainConfig ft;
            ft.epochs = 5;
            ft.learning_rate = 1e-3;
            ft.strategy = Strategy::catk;
            ft.sampler.K = i == 0 ? 3 : 1;
            ft.seed = derive_seed(seed, 3);
            const auto m = finetune_gmm(base.model, split.train, unit, ft).model;
            tuned[i] = evaluate(m, split.heldout, unit, ec).min_ade;
        }
        std::printf("  seed %llu: minADE32 BC %.4f CAT-3 %.4f CAT-1 %.4f (%.0fs)\n",
                    static_cast<unsigned long long>(seed), b, tuned[0], tuned[1], seconds_since(t0));
        std::fflush(stdout);
        bc.push_back(b);
        cat3.push_back(tuned[0]);
        cat1.push_back(tuned[1]);
        per_seed = per_seed && std::isfinite(tuned[0]);
    }
    const double mb = median3(bc);
    const double m3 = median3(cat3);
    const double m1 = median3(cat1);
    return {per_seed && m3 < mb && m3 < m1, "median minADE32 BC " + fmt("%.4f", mb) + ", CAT-3 " + fmt("%.4f", m3) +
                                                ", CAT-1 " + fmt("%.4f", m1)};
}

Outcome sampler_calibration() {
    const auto vocab = corpus_vocab(80, 81, 64);
    const Scenario sc = first_step_only(generate_fork_world(1, ForkWorldConfig{}, 82).front());
    Rng rng(83);
    const auto model = random_policy(rng, vocab.size());
    const int n = 10000;
    std::vector<std::string> failed;

    // top-K sampling at K_infer = 8, temperature 0.8
    {
        auto rec = empty_record(sc, all_agents(sc), RolloutKind::sample, 0);
        const Matrix x = step_features(sc, rec, 0, vocab.replanning_period);
        const Matrix lg = categorical_logits(model, x);
        std::vector<double> logits(vocab.size());
        for (std::size_t c = 0; c < logits.size(); ++c) {
            logits[c] = lg(static_cast<Eigen::Index>(c), 0);
        }
        const auto q = truncated_distribution(logits, softmax(logits), 8, 0.8);
        std::vector<double> counts(q.size(), 0.0);
        for (int i = 0; i < n; ++i) {
            counts[rollout_sample(model, sc, vocab, 8, 0.8, derive_seed(84, static_cast<std::uint64_t>(i))).chosen[0][0]] +=
                1.0;
        }
        if (!oracle::within_multinomial_bounds(counts, q, n)) {
            failed.push_back("rollout_sample");
        }
    }
    // noisy tokenization, neg_dist over the 5 nearest tokens
    {
        const AgentState& s = sc.gt[0][sc.history_len];
        const AgentState& g = sc.gt[0][sc.history_len + 1];
        const auto cand = nearest_candidates(s, g, vocab, 5);
        const double tau = 0.3;
        std::vector<double> expected(5);
        double z = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            expected[i] = std::exp(-cand.distance[i] / tau);
            z += expected[i];
        }
        for (auto& e : expected) {
            e /= z;
        }
        std::vector<double> counts(5, 0.0);
        for (int i = 0; i < n; ++i) {
            const auto rec =
                noisy_tokenize_trajeglish(sc, vocab, 5, tau, SampleRule::neg_dist, derive_seed(85, static_cast<std::uint64_t>(i)));
            const auto it = std::find(cand.index.begin(), cand.index.end(), rec.chosen[0][0]);
            counts[static_cast<std::size_t>(it - cand.index.begin())] += 1.0;
        }
        if (!oracle::within_multinomial_bounds(counts, expected, n)) {
            failed.push_back("noisy_tokenize_trajeglish");
        }
    }
    // distance-weighted choice among three rollouts with ADE 1, 1.5 and 2 m
    {
        const auto teacher = teacher_record(sc, vocab);
        auto with_ade = [&](double target) {
            RolloutRecord r = teacher;
            for (std::size_t i = 0; i < r.rows(); ++i) {
                const AgentState& g = sc.gt[r.agents[i]][sc.history_len + 1];
                r.states[i][1] = {g.x + target, g.y, g.yaw, g.length, g.width};
            }
            return r;
        };
        const std::vector<RolloutRecord> cands{with_ade(1.0), with_ade(1.5), with_ade(2.0)};
        std::vector<double> expected{1.0, std::exp(-0.5), std::exp(-1.0)};
        const double z = expected[0] + expected[1] + expected[2];
        for (auto& e : expected) {
            e /= z;
        }
        std::vector<double> counts(3, 0.0);
        for (int i = 0; i < n; ++i) {
            counts[distance_weighted_index(cands, sc, 1.0, derive_seed(86, static_cast<std::uint64_t>(i)))] += 1.0;
        }
        if (!oracle::within_multinomial_bounds(counts, expected, n)) {
            failed.push_back("distance_weighted_choice");
        }
    }
    std::string detail = "3 samplers x 10000 draws";
    for (const auto& f : failed) {
        detail += ", out of bounds: " + f;
    }
    return {failed.empty(), detail};
}

Outcome determinism_and_persistence() {
    const char* spec_text = R"({
  "name": "determinism",
  "seed": 5,
  "scenarios": {"n_train": 200, "n_heldout": 30},
  "vocab": {"size": 32},
  "model": {"hidden": 32},
  "pretrain": {"epochs": 4},
  "finetune": [{"name": "catk", "strategy": "catk", "K": 8, "epochs": 2},
               {"name": "topk", "strategy": "topk_sample", "K": 8, "epochs": 2}],
  "eval": {"rollouts": 4, "K_infer": 8}
})";
    std::vector<std::string> problems;
    std::vector<std::string> tables;
    const fs::path root = fs::temp_directory_path() / "catk_acceptance_determinism";
    for (int rep = 0; rep < 2; ++rep) {
        const RunPaths run{root / ("run" + std::to_string(rep))};
        fs::remove_all(run.root);
        fs::create_directories(run.root);
        snapshot_config(run, spec_text);
        run_ablation(run, run_spec(run));
        tables.push_back(read_text(run.results()) + read_text(run.base() / "metrics.csv") +
                         read_text(run.variant("catk") / "metrics.csv") + read_text(run.variant("topk") / "eval.csv"));
    }
    if (tables[0] != tables[1]) {
        problems.push_back("metrics CSV bytes differ between reruns");
    }
    const RunPaths run{root / "run0"};
    const std::string vocab_text = read_text(run.vocab());
    if (serialize_vocabulary(parse_vocabulary(vocab_text)) != vocab_text) {
        problems.push_back("vocabulary");
    }
    for (const auto& p : {run.train_scenarios(), run.heldout_scenarios()}) {
        std::ostringstream out;
        write_scenarios(out, load_scenarios(p.string()));
        if (out.str() != read_text(p)) {
            problems.push_back("scenario file " + p.filename().string());
        }
    }
    for (const auto& dir : {run.base(), run.variant("catk")}) {
        const std::string model = read_text(dir / "model.bin");
        const std::string opt = read_text(dir / "optimizer.bin");
        if (serialize_model(parse_model(model)) != model || serialize_optimizer(parse_optimizer(opt)) != opt) {
            problems.push_back("checkpoint " + dir.string());
        }
    }
    fs::remove_all(root);
    std::string detail = "results and metrics CSVs (" + std::to_string(tables[0].size()) + " bytes) identical across reruns, files round-trip";
    if (!problems.empty()) {
        detail = "mismatch:";
        for (const auto& p : problems) {
            detail += " " + p + ";";
        }
    }
    return {problems.empty(), detail};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "exact K=|V| and K=1 equivalences", true, exact_equivalences},
        {2, "quantization asymptote", true, quantization_asymptote},
        {3, "gradient correctness", true, gradient_correctness},
        {4, "one-step CAT-K monotonicity", true, catk_monotonicity},
        {8, "stochastic sampler calibration", true, sampler_calibration},
        {9, "determinism and persistence", true, determinism_and_persistence},
        {7, "GMM CAT-3 vs BC and CAT-1", false, gmm_extension},
        {5, "covariate-shift reproduction", false, covariate_shift},
        {6, "baseline ordering", false, baseline_ordering},
    };
    std::map<int, std::string> lines;
    bool gating_ok = true;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        char buf[1024];
        std::snprintf(buf, sizeof buf, "criterion %d %s: %s (%s; %.1fs)", c.id, o.pass ? "PASS" : "FAIL", c.title,
                      o.detail.c_str(), seconds_since(t0));
        std::printf("%s\n", buf);
        std::fflush(stdout);
        lines[c.id] = buf;
        if (c.gating && !o.pass) {
            gating_ok = false;
        }
    }
    std::printf("\nsummary\n");
    for (const auto& [id, line] : lines) {
        std::printf("%s\n", line.c_str());
    }
    return gating_ok ? 0 : 1;
}
