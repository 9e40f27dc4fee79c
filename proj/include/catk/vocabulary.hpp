#pragma once

// Action-token vocabulary: k-means construction from ground-truth deltas,
// nearest-token recovery targets, sequential tokenization and the
// quantization floor it implies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "catk/errors.hpp"
#include "catk/random.hpp"
#include "catk/world.hpp"

namespace catk {

using Trajectory = std::vector<AgentState>;

inline constexpr double kDuplicateEps = 1e-6;
inline constexpr double kDefaultReplanningPeriod = 0.5;

/// Rounds to the 9-fractional-digit grid used by the vocabulary file, so a
/// save/load cycle is bit-exact.
inline double canonical_token_value(double v) {
    const double r = std::round(v * 1e9) / 1e9;
    return r == 0.0 ? 0.0 : r;  // no negative zero in files
}

inline ActionToken canonical_token(const ActionToken& t) {
    return {canonical_token_value(t.dx), canonical_token_value(t.dy), canonical_token_value(t.dyaw)};
}

struct TokenVocabulary {
    std::vector<ActionToken> tokens;
    double replanning_period = kDefaultReplanningPeriod;

    std::size_t size() const { return tokens.size(); }
    const ActionToken& operator[](std::size_t i) const { return tokens[i]; }

    friend bool operator==(const TokenVocabulary&, const TokenVocabulary&) = default;
};

inline double token_distance(const ActionToken& a, const ActionToken& b) {
    const double ex = a.dx - b.dx;
    const double ey = a.dy - b.dy;
    const double ez = a.dyaw - b.dyaw;
    return std::sqrt(ex * ex + ey * ey + ez * ez);
}

/// Checks the vocabulary invariants; throws InvalidConfig.
inline void validate(const TokenVocabulary& v) {
    if (v.size() < 2) {
        throw InvalidConfig("vocabulary needs at least 2 tokens");
    }
    if (!(v.replanning_period > 0.0)) {
        throw InvalidConfig("replanning period must be positive");
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto& t = v.tokens[i];
        if (!std::isfinite(t.dx) || !std::isfinite(t.dy) || !std::isfinite(t.dyaw)) {
            throw InvalidConfig("token " + std::to_string(i) + " is not finite");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (token_distance(t, v.tokens[j]) <= kDuplicateEps) {
                throw InvalidConfig("tokens " + std::to_string(j) + " and " + std::to_string(i) +
                                    " are duplicates");
            }
        }
    }
}

/// Per-step local-frame deltas of every trajectory in the corpus.
inline std::vector<ActionToken> corpus_deltas(std::span<const Trajectory> corpus) {
    std::vector<ActionToken> out;
    for (const auto& traj : corpus) {
        for (std::size_t t = 0; t + 1 < traj.size(); ++t) {
            out.push_back(relative_delta(traj[t], traj[t + 1]));
        }
    }
    return out;
}

namespace detail {

inline double sq_dist(const ActionToken& a, const ActionToken& b) {
    const double ex = a.dx - b.dx;
    const double ey = a.dy - b.dy;
    const double ez = a.dyaw - b.dyaw;
    return ex * ex + ey * ey + ez * ez;
}

/// Number of distinct samples on the eps grid, counting stops at `cap`.
inline std::size_t count_distinct(std::span<const ActionToken> samples, std::size_t cap) {
    std::set<std::tuple<long long, long long, long long>> seen;
    for (const auto& s : samples) {
        seen.emplace(std::llround(s.dx / kDuplicateEps), std::llround(s.dy / kDuplicateEps),
                     std::llround(s.dyaw / kDuplicateEps));
        if (seen.size() >= cap) {
            break;
        }
    }
    return seen.size();
}

inline std::size_t nearest_centroid(const ActionToken& s, std::span<const ActionToken> centroids,
                                    double* best_d2 = nullptr) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centroids.size(); ++k) {
        const double d = sq_dist(s, centroids[k]);
        if (d < bd) {
            bd = d;
            best = k;
        }
    }
    if (best_d2 != nullptr) {
        *best_d2 = bd;
    }
    return best;
}

}  // namespace detail

struct KMeansResult {
    std::vector<ActionToken> centroids;
    std::vector<std::size_t> assignment;
    double inertia = 0.0;
    int iterations = 0;
};

/// Lloyd's k-means with k-means++ seeding, at most `max_iter` iterations.
/// Empty clusters are re-seeded with the sample farthest from its centroid.
inline KMeansResult kmeans(std::span<const ActionToken> samples, std::size_t k, std::uint64_t seed,
                           int max_iter = 100) {
    Rng rng(seed);
    const std::size_t n = samples.size();
    KMeansResult res;
    res.centroids.reserve(k);
    res.centroids.push_back(samples[rng() % n]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = detail::sq_dist(samples[i], res.centroids[0]);
    }
    while (res.centroids.size() < k) {
        double total = 0.0;
        for (double v : d2) {
            total += v;
        }
        std::size_t pick = n - 1;
        if (total > 0.0) {
            double r = uniform01(rng) * total;
            for (std::size_t i = 0; i < n; ++i) {
                r -= d2[i];
                if (r < 0.0) {
                    pick = i;
                    break;
                }
            }
        }
        res.centroids.push_back(samples[pick]);
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], detail::sq_dist(samples[i], res.centroids.back()));
        }
    }

    res.assignment.assign(n, k);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = detail::nearest_centroid(samples[i], res.centroids, &d2[i]);
            if (c != res.assignment[i]) {
                res.assignment[i] = c;
                changed = true;
            }
        }
        res.iterations = it + 1;
        if (!changed) {
            break;
        }
        std::vector<ActionToken> sum(k);
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto& acc = sum[res.assignment[i]];
            acc.dx += samples[i].dx;
            acc.dy += samples[i].dy;
            acc.dyaw += samples[i].dyaw;
            ++count[res.assignment[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) {
                const auto far = static_cast<std::size_t>(
                    std::max_element(d2.begin(), d2.end()) - d2.begin());
                res.centroids[c] = samples[far];
                d2[far] = 0.0;
                continue;
            }
            const double inv = 1.0 / static_cast<double>(count[c]);
            res.centroids[c] = {sum[c].dx * inv, sum[c].dy * inv, sum[c].dyaw * inv};
        }
    }
    res.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        res.inertia += detail::sq_dist(samples[i], res.centroids[res.assignment[i]]);
    }
    return res;
}

/// Builds a vocabulary of exactly `target_size` deduplicated k-means
/// centroids over the corpus' local-frame deltas.
inline TokenVocabulary build_vocabulary(std::span<const ActionToken> deltas, std::size_t target_size,
                                        std::uint64_t seed,
                                        double replanning_period = kDefaultReplanningPeriod) {
    if (target_size < 2) {
        throw InvalidConfig("vocabulary size must be at least 2");
    }
    const std::size_t distinct = detail::count_distinct(deltas, target_size);
    if (distinct < target_size) {
        throw InsufficientData("corpus has " + std::to_string(distinct) +
                               " distinct deltas, need " + std::to_string(target_size));
    }
    auto km = kmeans(deltas, target_size, seed);

    TokenVocabulary vocab;
    vocab.replanning_period = replanning_period;
    for (const auto& c : km.centroids) {
        vocab.tokens.push_back(canonical_token(c));
    }
    // Replace any near-duplicate centroid with the sample farthest from the set.
    for (std::size_t i = 1; i < vocab.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (token_distance(vocab.tokens[i], vocab.tokens[j]) > kDuplicateEps) {
                continue;
            }
            double best = -1.0;
            ActionToken far{};
            for (const auto& s : deltas) {
                double d = std::numeric_limits<double>::infinity();
                for (const auto& t : vocab.tokens) {
                    d = std::min(d, detail::sq_dist(s, t));
                }
                if (d > best) {
                    best = d;
                    far = s;
                }
            }
            vocab.tokens[i] = canonical_token(far);
            i = 0;
            break;
        }
    }
    return vocab;
}

inline TokenVocabulary build_vocabulary(std::span<const Trajectory> corpus, std::size_t target_size,
                                        std::uint64_t seed,
                                        double replanning_period = kDefaultReplanningPeriod) {
    const auto deltas = corpus_deltas(corpus);
    return build_vocabulary(std::span<const ActionToken>(deltas), target_size, seed, replanning_period);
}

/// Recovery target: argmin_c d(f(state, x_c), gt_next), lowest index on ties.
inline std::size_t nearest_token(const AgentState& state, const AgentState& gt_next,
                                 const TokenVocabulary& vocab, double yaw_weight = kDefaultYawWeight,
                                 double* achieved = nullptr) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < vocab.size(); ++c) {
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

struct Tokenization {
    std::vector<std::size_t> indices;  // c_0 .. c_{T-1}
    Trajectory states;                 // s_0 .. s_T, s_0 = gt[0]
};

/// Sequential tokenization: each step picks the nearest token from the
/// current tokenized state, never resetting to ground truth.
inline Tokenization tokenize_trajectory(std::span<const AgentState> gt, const TokenVocabulary& vocab,
                                        double yaw_weight = kDefaultYawWeight) {
    if (gt.size() < 2) {
        throw InvalidConfig("tokenize_trajectory needs at least 2 states");
    }
    Tokenization out;
    out.states.reserve(gt.size());
    out.indices.reserve(gt.size() - 1);
    out.states.push_back(gt[0]);
    for (std::size_t t = 0; t + 1 < gt.size(); ++t) {
        const std::size_t c = nearest_token(out.states.back(), gt[t + 1], vocab, yaw_weight);
        out.indices.push_back(c);
        out.states.push_back(apply_token(out.states.back(), vocab[c]));
    }
    return out;
}

/// Mean planar error of the tokenized states over steps 1..T: the ADE floor
/// any rollout restricted to this vocabulary can reach.
inline double quantization_ade(std::span<const AgentState> gt, const TokenVocabulary& vocab,
                               double yaw_weight = kDefaultYawWeight) {
    const auto tok = tokenize_trajectory(gt, vocab, yaw_weight);
    double sum = 0.0;
    for (std::size_t t = 1; t < gt.size(); ++t) {
        sum += planar_distance(tok.states[t], gt[t]);
    }
    return sum / static_cast<double>(gt.size() - 1);
}

// ---------------------------------------------------------------------------
// File format: "catk-vocab v1 <size> <period_s>" then "dx dy dyaw" per line.

inline std::string format_fixed9(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9f", v);
    return buf;
}

inline std::string serialize_vocabulary(const TokenVocabulary& vocab) {
    std::string out = "catk-vocab v1 " + std::to_string(vocab.size()) + " " +
                      format_fixed9(vocab.replanning_period) + "\n";
    for (const auto& t : vocab.tokens) {
        out += format_fixed9(t.dx) + " " + format_fixed9(t.dy) + " " + format_fixed9(t.dyaw) + "\n";
    }
    return out;
}

inline TokenVocabulary parse_vocabulary(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) {
        throw FormatError(lineno, "missing header");
    }
    std::istringstream header(line);
    std::string magic;
    std::string version;
    std::size_t size = 0;
    double period = 0.0;
    if (!(header >> magic >> version >> size >> period) || magic != "catk-vocab" || version != "v1") {
        throw FormatError(lineno, "expected 'catk-vocab v1 <size> <period_s>'");
    }
    TokenVocabulary vocab;
    vocab.replanning_period = period;
    while (vocab.size() < size) {
        ++lineno;
        if (!std::getline(in, line)) {
            throw FormatError(lineno, "expected " + std::to_string(size) + " tokens, file ends after " +
                                          std::to_string(vocab.size()));
        }
        std::istringstream fields(line);
        ActionToken t;
        std::string extra;
        if (!(fields >> t.dx >> t.dy >> t.dyaw) || (fields >> extra)) {
            throw FormatError(lineno, "expected 'dx dy dyaw'");
        }
        vocab.tokens.push_back(canonical_token(t));
    }
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty()) {
            throw FormatError(lineno, "unexpected content after last token");
        }
    }
    try {
        validate(vocab);
    } catch (const InvalidConfig& e) {
        throw FormatError(1, e.what());
    }
    return vocab;
}

inline void save_vocabulary(const std::string& path, const TokenVocabulary& vocab) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path + " for writing");
    }
    f << serialize_vocabulary(vocab);
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

inline TokenVocabulary load_vocabulary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path);
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_vocabulary(ss.str());
}

}  // namespace catk
