#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "catk/errors.hpp"
#include "catk/random.hpp"
#include "catk/vocabulary.hpp"

using namespace catk;

namespace {

TokenVocabulary make_vocab(std::vector<ActionToken> tokens) {
    TokenVocabulary v;
    v.tokens = std::move(tokens);
    return v;
}

Trajectory straight(std::size_t steps, double step) {
    Trajectory t;
    for (std::size_t i = 0; i <= steps; ++i) {
        t.push_back({step * static_cast<double>(i), 0.0, 0.0, 4.5, 2.0});
    }
    return t;
}

TokenVocabulary random_vocab(Rng& rng, std::size_t n) {
    TokenVocabulary v;
    for (std::size_t i = 0; i < n; ++i) {
        v.tokens.push_back({uniform(rng, 0.0, 5.0), uniform(rng, -0.6, 0.6), uniform(rng, -0.4, 0.4)});
    }
    return v;
}

Trajectory noisy_path(Rng& rng, std::size_t steps) {
    Trajectory t{{0.0, 0.0, 0.0, 4.5, 2.0}};
    for (std::size_t i = 0; i < steps; ++i) {
        t.push_back(apply_token(t.back(), {uniform(rng, 2.5, 4.0), uniform(rng, -0.2, 0.2), uniform(rng, -0.15, 0.15)}));
    }
    return t;
}

double mean_planar_error(const Trajectory& a, const Trajectory& b) {
    double s = 0.0;
    for (std::size_t t = 1; t < a.size(); ++t) {
        s += planar_distance(a[t], b[t]);
    }
    return s / static_cast<double>(a.size() - 1);
}

}  // namespace

TEST(BuildVocabulary, SingleDistinctDeltaIsInsufficient) {
    const std::vector<Trajectory> corpus(5, straight(10, 1.0));
    EXPECT_THROW(build_vocabulary(std::span<const Trajectory>(corpus), 2, 1), InsufficientData);
}

TEST(BuildVocabulary, TwoDistinctDeltasAreFixedPoints) {
    std::vector<ActionToken> deltas;
    for (int i = 0; i < 20; ++i) {
        deltas.push_back({1, 0, 0});
        deltas.push_back({0, 1, 0});
    }
    const auto v = build_vocabulary(std::span<const ActionToken>(deltas), 2, 4);
    ASSERT_EQ(v.size(), 2u);
    const bool order_a = v[0] == ActionToken{1, 0, 0} && v[1] == ActionToken{0, 1, 0};
    const bool order_b = v[1] == ActionToken{1, 0, 0} && v[0] == ActionToken{0, 1, 0};
    EXPECT_TRUE(order_a || order_b);
}

TEST(BuildVocabulary, RecoversSeparatedClustersLikeRestartOracle) {
    const std::vector<ActionToken> centers{{1, 0, 0}, {4, 0.5, 0.1}, {2, -1, -0.2}, {6, 1, 0.3}};
    Rng rng(99);
    std::vector<ActionToken> deltas;
    for (int i = 0; i < 2000; ++i) {
        const auto& c = centers[static_cast<std::size_t>(i) % centers.size()];
        deltas.push_back({c.dx + 0.05 * gaussian(rng), c.dy + 0.05 * gaussian(rng), c.dyaw + 0.01 * gaussian(rng)});
    }
    const auto v = build_vocabulary(std::span<const ActionToken>(deltas), 4, 17);

    // Oracle: best of many restarts.
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::uint64_t s = 0; s < 40; ++s) {
        auto r = kmeans(std::span<const ActionToken>(deltas), 4, 1000 + s);
        if (r.inertia < best.inertia) {
            best = r;
        }
    }
    for (const auto& c : centers) {
        double dv = 1e9;
        double doracle = 1e9;
        for (const auto& t : v.tokens) {
            dv = std::min(dv, token_distance(t, c));
        }
        for (const auto& t : best.centroids) {
            doracle = std::min(doracle, token_distance(t, c));
        }
        EXPECT_LT(dv, 0.05);
        EXPECT_LT(doracle, 0.05);
    }
    const auto again = kmeans(std::span<const ActionToken>(deltas), 4, 17);
    EXPECT_NEAR(again.inertia, best.inertia, 1e-6 * best.inertia);
}

TEST(BuildVocabulary, DeterministicDedupedAndExactSize) {
    Rng rng(5);
    std::vector<Trajectory> corpus;
    for (int i = 0; i < 40; ++i) {
        corpus.push_back(noisy_path(rng, 12));
    }
    const auto a = build_vocabulary(std::span<const Trajectory>(corpus), 32, 8);
    const auto b = build_vocabulary(std::span<const Trajectory>(corpus), 32, 8);
    ASSERT_EQ(a.size(), 32u);
    EXPECT_EQ(a.tokens, b.tokens);
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            ASSERT_GT(token_distance(a[i], a[j]), kDuplicateEps);
        }
    }
}

TEST(BuildVocabulary, DuplicateHeavyCorpusStillDeduplicated) {
    std::vector<ActionToken> deltas(500, ActionToken{1, 0, 0});
    deltas.push_back({1 + 1e-8, 0, 0});
    deltas.push_back({2, 0, 0});
    deltas.push_back({3, 0, 0});
    const auto v = build_vocabulary(std::span<const ActionToken>(deltas), 3, 2);
    ASSERT_EQ(v.size(), 3u);
    for (std::size_t i = 0; i < v.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            EXPECT_GT(token_distance(v[i], v[j]), kDuplicateEps);
        }
    }
}

TEST(NearestToken, Examples) {
    const auto v = make_vocab({{0, 0, 0}, {1, 0, 0}});
    EXPECT_EQ(nearest_token({0, 0, 0}, {0.9, 0, 0}, v), 1u);
    EXPECT_EQ(nearest_token({0, 0, 0}, {1, 0, 0}, v), 1u);
    EXPECT_EQ(nearest_token({0, 0, 0}, {0.5, 0, 0}, v), 0u);  // equidistant
    const auto exact = make_vocab({{3, 0, 0}, {2, 0.5, 0.1}, {1, 0, 0}});
    const AgentState s{4, 5, 0.7, 4.5, 2.0};
    const auto target = apply_token(s, exact[1]);
    EXPECT_EQ(nearest_token(s, target, exact), 1u);
    EXPECT_EQ(state_distance(apply_token(s, exact[1]), target), 0.0);
}

TEST(NearestToken, MatchesExhaustiveScan) {
    Rng rng(13);
    const auto v = random_vocab(rng, 64);
    for (int i = 0; i < 2000; ++i) {
        const AgentState s{uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -3, 3), 4.5, 2.0};
        const AgentState g = apply_token(s, {uniform(rng, 0, 5), uniform(rng, -1, 1), uniform(rng, -0.5, 0.5)});
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t c = 0; c < v.size(); ++c) {
            const double d = state_distance(apply_token(s, v[c]), g);
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        ASSERT_EQ(nearest_token(s, g, v), best);
    }
}

TEST(NearestToken, StableUnderSmallYawWeightChanges) {
    Rng rng(31);
    const auto v = random_vocab(rng, 64);
    int stable = 0;
    int flagged = 0;
    for (int i = 0; i < 2000; ++i) {
        const AgentState s{0, 0, uniform(rng, -3, 3), 4.5, 2.0};
        const AgentState g = apply_token(s, {uniform(rng, 0, 5), uniform(rng, -1, 1), uniform(rng, -0.5, 0.5)});
        const auto base = nearest_token(s, g, v, 0.5);
        const bool same = nearest_token(s, g, v, 0.45) == base && nearest_token(s, g, v, 0.55) == base;
        if (same) {
            ++stable;
            continue;
        }
        // Flag only: the argmin may legitimately move when two candidates are close.
        ++flagged;
        const double d_base = state_distance(apply_token(s, v[base]), g, 0.5);
        for (double w : {0.45, 0.55}) {
            const auto other = nearest_token(s, g, v, w);
            const double gap = state_distance(apply_token(s, v[other]), g, 0.5) - d_base;
            EXPECT_LT(gap, 0.1 * 0.5 * kPi);
        }
    }
    EXPECT_GT(stable, flagged);
    RecordProperty("argmin_changes", flagged);
}

TEST(TokenizeTrajectory, LosslessRoundTrip) {
    Rng rng(41);
    const auto v = random_vocab(rng, 16);
    Trajectory gt{{1, 2, 0.3, 4.5, 2.0}};
    std::vector<std::size_t> gen;
    for (int t = 0; t < 12; ++t) {
        gen.push_back(static_cast<std::size_t>(rng() % v.size()));
        gt.push_back(apply_token(gt.back(), v[gen.back()]));
    }
    const auto tok = tokenize_trajectory(gt, v);
    EXPECT_EQ(tok.indices, gen);
    for (std::size_t t = 0; t < gt.size(); ++t) {
        EXPECT_EQ(state_distance(tok.states[t], gt[t]), 0.0);
    }
    EXPECT_EQ(quantization_ade(gt, v), 0.0);
}

TEST(TokenizeTrajectory, SingleStepBaseCase) {
    Rng rng(2);
    const auto v = random_vocab(rng, 16);
    const Trajectory gt{{0, 0, 0, 4.5, 2.0}, {2.1, 0.3, 0.05, 4.5, 2.0}};
    const auto tok = tokenize_trajectory(gt, v);
    ASSERT_EQ(tok.indices.size(), 1u);
    EXPECT_EQ(tok.indices[0], nearest_token(gt[0], gt[1], v));
    EXPECT_EQ(tok.states.size(), 2u);
    EXPECT_THROW(tokenize_trajectory(std::span<const AgentState>(gt.data(), 1), v), InvalidConfig);
}

TEST(TokenizeTrajectory, NoisyPathWithinQuantizationBound) {
    Rng rng(43);
    std::vector<Trajectory> corpus;
    for (int i = 0; i < 60; ++i) {
        corpus.push_back(noisy_path(rng, 10));
    }
    const auto v = build_vocabulary(std::span<const Trajectory>(corpus), 16, 3);
    for (const auto& gt : corpus) {
        const auto tok = tokenize_trajectory(gt, v);
        const double q = quantization_ade(gt, v);
        EXPECT_NEAR(q, mean_planar_error(tok.states, gt), 1e-12);
        // Sequential: each state is the token applied to the previous tokenized state.
        for (std::size_t t = 0; t + 1 < gt.size(); ++t) {
            ASSERT_EQ(tok.states[t + 1], apply_token(tok.states[t], v[tok.indices[t]]));
        }
        // Per-step error never exceeds the greedy one-step bound accumulated so far.
        double bound = 0.0;
        for (std::size_t t = 1; t < gt.size(); ++t) {
            const double step = state_distance(tok.states[t], gt[t]);
            bound = std::max(bound, step);
        }
        EXPECT_LE(q, bound + 1e-12);
    }
}

TEST(QuantizationAde, PositiveForUnrepresentableBias) {
    const auto v = make_vocab({{1, 0, 0}, {2, 0, 0}});
    Trajectory gt;
    for (int t = 0; t <= 6; ++t) {
        gt.push_back({1.5 * t, 0.3, 0.0, 4.5, 2.0});
    }
    gt[0].y = 0.0;
    EXPECT_GT(quantization_ade(gt, v), 0.0);
}

TEST(QuantizationAde, MonotoneUnderVocabularySuperset) {
    Rng rng(47);
    for (int trial = 0; trial < 50; ++trial) {
        auto small = random_vocab(rng, 8);
        auto big = small;
        const auto extra = random_vocab(rng, 8);
        big.tokens.insert(big.tokens.end(), extra.tokens.begin(), extra.tokens.end());
        // Greedy sequential tokenization is not globally optimal, so the superset
        // property is checked in its one-step form at every GT state.
        const auto gt = noisy_path(rng, 10);
        for (std::size_t t = 0; t + 1 < gt.size(); ++t) {
            const double ds = state_distance(apply_token(gt[t], small[nearest_token(gt[t], gt[t + 1], small)]), gt[t + 1]);
            const double db = state_distance(apply_token(gt[t], big[nearest_token(gt[t], gt[t + 1], big)]), gt[t + 1]);
            ASSERT_LE(db, ds);
        }
        // Planar ADE is only guaranteed to shrink when selection ignores yaw.
        const Trajectory one_step{gt[0], gt[1]};
        ASSERT_LE(quantization_ade(one_step, big, 0.0), quantization_ade(one_step, small, 0.0));
    }
}

TEST(VocabularyFile, BitExactRoundTrip) {
    Rng rng(53);
    std::vector<Trajectory> corpus;
    for (int i = 0; i < 30; ++i) {
        corpus.push_back(noisy_path(rng, 12));
    }
    const auto v = build_vocabulary(std::span<const Trajectory>(corpus), 24, 9);
    const std::string text = serialize_vocabulary(v);
    EXPECT_EQ(text.rfind("catk-vocab v1 24 ", 0), 0u);
    const auto back = parse_vocabulary(text);
    EXPECT_EQ(back.tokens, v.tokens);
    EXPECT_EQ(back.replanning_period, v.replanning_period);
    EXPECT_EQ(serialize_vocabulary(back), text);
}

TEST(VocabularyFile, MalformedInputReportsLine) {
    EXPECT_THROW(parse_vocabulary("bogus\n"), FormatError);
    EXPECT_THROW(parse_vocabulary("catk-vocab v1 2 0.5\n0.1 0.2 0.3\n"), FormatError);
    try {
        parse_vocabulary("catk-vocab v1 2 0.5\n0.1 0.2 0.3\n0.1 x 0.3\n");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}
