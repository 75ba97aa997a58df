#pragma once

// Synthetic joint sequence-structure law: a Markov chain over the discrete
// alphabet plus a windowed Gaussian emission map for the continuous track.
// Comes with exact oracles (conditional-expectation fold, MAP inverse fold via
// dynamic programming) so cross-modal learning is measurable.

#include <cstdint>
#include <span>
#include <vector>

#include "hdiff/rng.hpp"
#include "hdiff/token_space.hpp"

namespace hdiff {

struct ToyWorld {
    int V = 8;
    int dim = 4;
    double noise_sigma = 0.1;
    uint64_t seed = 0;

    std::vector<double> transition;  // [V * V], row-stochastic
    std::vector<double> initial;     // [V]
    // emission means indexed by the window (w_left, w_center, w_right), each
    // component in [0, V] where V is the reserved edge-context index
    std::vector<double> emission;    // [(V+1)^3 * dim]

    int edge_token() const { return V; }

    std::span<const double> emission_mean(int w_left, int w_center, int w_right) const {
        const size_t n = static_cast<size_t>(V) + 1;
        const size_t idx = (static_cast<size_t>(w_left) * n + static_cast<size_t>(w_center)) * n +
                           static_cast<size_t>(w_right);
        return {emission.data() + idx * static_cast<size_t>(dim), static_cast<size_t>(dim)};
    }

    // window around position i of seq, with edge padding
    std::span<const double> window_mean(std::span<const int> seq, int i) const {
        const int L = static_cast<int>(seq.size());
        const int wl = (i == 0) ? edge_token() : seq[static_cast<size_t>(i - 1)];
        const int wr = (i == L - 1) ? edge_token() : seq[static_cast<size_t>(i + 1)];
        return emission_mean(wl, seq[static_cast<size_t>(i)], wr);
    }
};

struct ToyDataset {
    std::vector<TrackPair> samples;
    uint64_t world_seed = 0;
    int V = 0;
    int dim = 0;
};

ToyWorld gen_world(uint64_t seed, int V, int d_struct, double noise_sigma);

TrackPair sample_protein(const ToyWorld& world, int L, Rng& rng);

// convenience: n samples with lengths uniform in [len_min, len_max]
ToyDataset make_dataset(const ToyWorld& world, int n, int len_min, int len_max, uint64_t seed);

// exact conditional expectation E[z | s]: the emission mean of every window
std::vector<float> oracle_fold(const ToyWorld& world, std::span<const int> seq);

// exact MAP sequence arg max_s p(s) p(z | s), dynamic programming over
// adjacent token pairs (the window emission makes this second-order)
std::vector<int> oracle_inverse_fold(const ToyWorld& world, std::span<const float> struct_tokens,
                                     int L);

// RMS over positions of || struct_i - oracle_fold(seq)_i ||
double self_consistency(const ToyWorld& world, std::span<const int> seq,
                        std::span<const float> struct_tokens);

} // namespace hdiff
