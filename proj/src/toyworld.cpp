#include "hdiff/toyworld.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace hdiff {

ToyWorld gen_world(uint64_t seed, int V, int d_struct, double noise_sigma) {
    if (V < 2) throw std::invalid_argument("gen_world: V must be >= 2");
    if (d_struct < 1) throw std::invalid_argument("gen_world: d_struct must be >= 1");
    if (noise_sigma < 0.0) throw std::invalid_argument("gen_world: noise_sigma must be >= 0");

    ToyWorld w;
    w.V = V;
    w.dim = d_struct;
    w.noise_sigma = noise_sigma;
    w.seed = seed;

    // rows from a symmetric Dirichlet(1): normalized Exp(1) draws
    Rng trans_rng = derive_rng(seed, Stream::WorldTransition);
    w.transition.resize(static_cast<size_t>(V) * static_cast<size_t>(V));
    for (int r = 0; r < V; ++r) {
        double sum = 0.0;
        for (int c = 0; c < V; ++c) {
            double u = trans_rng.uniform();
            while (u <= 0.0) u = trans_rng.uniform();
            const double e = -std::log(u);
            w.transition[static_cast<size_t>(r) * static_cast<size_t>(V) + static_cast<size_t>(c)] = e;
            sum += e;
        }
        for (int c = 0; c < V; ++c)
            w.transition[static_cast<size_t>(r) * static_cast<size_t>(V) + static_cast<size_t>(c)] /= sum;
    }

    Rng init_rng = derive_rng(seed, Stream::WorldInitial);
    w.initial.resize(static_cast<size_t>(V));
    {
        double sum = 0.0;
        for (int c = 0; c < V; ++c) {
            double u = init_rng.uniform();
            while (u <= 0.0) u = init_rng.uniform();
            w.initial[static_cast<size_t>(c)] = -std::log(u);
            sum += w.initial[static_cast<size_t>(c)];
        }
        for (int c = 0; c < V; ++c) w.initial[static_cast<size_t>(c)] /= sum;
    }

    // frozen table over all (V+1)^3 windows; rows with an edge center are
    // filled too (deterministic layout) but never referenced
    Rng em_rng = derive_rng(seed, Stream::WorldEmission);
    const size_t n = static_cast<size_t>(V) + 1;
    w.emission.resize(n * n * n * static_cast<size_t>(d_struct));
    for (double& v : w.emission) v = em_rng.gaussian();

    return w;
}

TrackPair sample_protein(const ToyWorld& world, int L, Rng& rng) {
    if (L < 1) throw std::invalid_argument("sample_protein: L must be >= 1");

    TrackPair tp(L, world.dim);
    tp.seq[0] = 0;
    {
        const double u = rng.uniform();
        double acc = 0.0;
        for (int c = 0; c < world.V; ++c) {
            acc += world.initial[static_cast<size_t>(c)];
            if (u < acc) {
                tp.seq[0] = c;
                break;
            }
            tp.seq[0] = c;  // guard against rounding at acc ~ 1
        }
    }
    for (int i = 1; i < L; ++i) {
        const double u = rng.uniform();
        const double* row =
            world.transition.data() + static_cast<size_t>(tp.seq[static_cast<size_t>(i - 1)]) *
                                          static_cast<size_t>(world.V);
        double acc = 0.0;
        int pick = world.V - 1;
        for (int c = 0; c < world.V; ++c) {
            acc += row[c];
            if (u < acc) {
                pick = c;
                break;
            }
        }
        tp.seq[static_cast<size_t>(i)] = pick;
    }

    for (int i = 0; i < L; ++i) {
        auto mean = world.window_mean(tp.seq, i);
        auto row = tp.struct_row(i);
        for (int j = 0; j < world.dim; ++j)
            row[static_cast<size_t>(j)] =
                static_cast<float>(mean[static_cast<size_t>(j)] + world.noise_sigma * rng.gaussian());
    }
    return tp;
}

ToyDataset make_dataset(const ToyWorld& world, int n, int len_min, int len_max, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("make_dataset: n must be >= 1");
    if (len_min < 1 || len_max < len_min)
        throw std::invalid_argument("make_dataset: bad length range");

    ToyDataset ds;
    ds.world_seed = world.seed;
    ds.V = world.V;
    ds.dim = world.dim;
    ds.samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = derive_rng(seed, Stream::WorldSample, static_cast<uint64_t>(i));
        const int L = len_min + static_cast<int>(rng.uniform_int(
                                    static_cast<uint64_t>(len_max - len_min + 1)));
        ds.samples.push_back(sample_protein(world, L, rng));
    }
    return ds;
}

std::vector<float> oracle_fold(const ToyWorld& world, std::span<const int> seq) {
    const int L = static_cast<int>(seq.size());
    std::vector<float> out(static_cast<size_t>(L) * static_cast<size_t>(world.dim));
    for (int i = 0; i < L; ++i) {
        auto mean = world.window_mean(seq, i);
        for (int j = 0; j < world.dim; ++j)
            out[static_cast<size_t>(i) * static_cast<size_t>(world.dim) + static_cast<size_t>(j)] =
                static_cast<float>(mean[static_cast<size_t>(j)]);
    }
    return out;
}

namespace {

// -||z_i - mu(a, b, c)||^2 / (2 sigma^2)
double emission_log_score(const ToyWorld& w, std::span<const float> struct_tokens, int i, int a,
                          int b, int c) {
    auto mean = w.emission_mean(a, b, c);
    double ss = 0.0;
    for (int j = 0; j < w.dim; ++j) {
        const double d =
            static_cast<double>(
                struct_tokens[static_cast<size_t>(i) * static_cast<size_t>(w.dim) +
                              static_cast<size_t>(j)]) -
            mean[static_cast<size_t>(j)];
        ss += d * d;
    }
    return -ss / (2.0 * w.noise_sigma * w.noise_sigma);
}

} // namespace

std::vector<int> oracle_inverse_fold(const ToyWorld& world, std::span<const float> struct_tokens,
                                     int L) {
    if (L < 1) throw std::invalid_argument("oracle_inverse_fold: L must be >= 1");
    if (struct_tokens.size() != static_cast<size_t>(L) * static_cast<size_t>(world.dim))
        throw std::invalid_argument("oracle_inverse_fold: struct track has wrong size");

    const int V = world.V;
    const int E = world.edge_token();
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();

    if (L == 1) {
        int best = 0;
        double best_score = kNegInf;
        for (int a = 0; a < V; ++a) {
            const double s =
                std::log(world.initial[static_cast<size_t>(a)]) +
                emission_log_score(world, struct_tokens, 0, E, a, E);
            if (s > best_score) {
                best_score = s;
                best = a;
            }
        }
        return {best};
    }

    // Viterbi over pair states: the state at pair index i in [0, L-2] is
    // (s_i, s_{i+1}). The emission of position i depends on the full window
    // (s_{i-1}, s_i, s_{i+1}), so it is folded in when transitioning from the
    // state at i-1 to the state at i, inside the max over s_{i-1}.
    const size_t S = static_cast<size_t>(V) * static_cast<size_t>(V);
    const auto state = [V](int a, int b) {
        return static_cast<size_t>(a) * static_cast<size_t>(V) + static_cast<size_t>(b);
    };
    auto log_trans = [&](int a, int b) {
        return std::log(world.transition[state(a, b)]);
    };

    std::vector<double> score(S, kNegInf);
    for (int a = 0; a < V; ++a)
        for (int b = 0; b < V; ++b)
            score[state(a, b)] = std::log(world.initial[static_cast<size_t>(a)]) + log_trans(a, b) +
                                 emission_log_score(world, struct_tokens, 0, E, a, b);

    // back[i][(b, c)] = best s_{i-1} for the state (s_i, s_{i+1}) = (b, c)
    std::vector<std::vector<int>> back(static_cast<size_t>(L - 1), std::vector<int>(S, -1));
    std::vector<double> next(S);
    for (int i = 1; i <= L - 2; ++i) {
        for (int b = 0; b < V; ++b) {
            for (int c = 0; c < V; ++c) {
                double best = kNegInf;
                int best_a = -1;
                for (int a = 0; a < V; ++a) {
                    const double s = score[state(a, b)] +
                                     emission_log_score(world, struct_tokens, i, a, b, c);
                    if (s > best) {
                        best = s;
                        best_a = a;
                    }
                }
                next[state(b, c)] = best + log_trans(b, c);
                back[static_cast<size_t>(i)][state(b, c)] = best_a;
            }
        }
        score.swap(next);
    }

    // close with the emission of the last position (right edge padded)
    double best = kNegInf;
    int best_a = 0, best_b = 0;
    for (int a = 0; a < V; ++a) {
        for (int b = 0; b < V; ++b) {
            const double s = score[state(a, b)] +
                             emission_log_score(world, struct_tokens, L - 1, a, b, E);
            if (s > best) {
                best = s;
                best_a = a;
                best_b = b;
            }
        }
    }

    std::vector<int> seq(static_cast<size_t>(L));
    seq[static_cast<size_t>(L - 2)] = best_a;
    seq[static_cast<size_t>(L - 1)] = best_b;
    for (int i = L - 2; i >= 1; --i) {
        const int b = seq[static_cast<size_t>(i)];
        const int c = seq[static_cast<size_t>(i + 1)];
        seq[static_cast<size_t>(i - 1)] = back[static_cast<size_t>(i)][state(b, c)];
    }
    return seq;
}

double self_consistency(const ToyWorld& world, std::span<const int> seq,
                        std::span<const float> struct_tokens) {
    const int L = static_cast<int>(seq.size());
    if (struct_tokens.size() != static_cast<size_t>(L) * static_cast<size_t>(world.dim))
        throw std::invalid_argument("self_consistency: struct track has wrong size");
    const std::vector<float> expected = oracle_fold(world, seq);
    double ss = 0.0;
    for (size_t i = 0; i < expected.size(); ++i) {
        const double d = static_cast<double>(struct_tokens[i]) - static_cast<double>(expected[i]);
        ss += d * d;
    }
    return std::sqrt(ss / static_cast<double>(L));
}

} // namespace hdiff
