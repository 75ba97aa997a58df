#pragma once

// Structured text configuration: flat `key = value` lines, `#` comments,
// unknown keys rejected. Covers the world/data/model/train/sample/eval/sweep
// settings; the canonical snapshot doubles as the run manifest body and feeds
// the config digest stored in checkpoints.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hdiff/network.hpp"
#include "hdiff/sampling.hpp"
#include "hdiff/training.hpp"

namespace hdiff {

struct RunConfig {
    // world / data
    uint64_t world_seed = 1;
    int vocab = 8;
    int d_struct = 4;
    double noise_sigma = 0.1;
    int n_samples = 20000;
    int len_min = 16;
    int len_max = 64;
    uint64_t data_seed = 1;

    ModelConfig model{};
    TrainConfig train{};

    // sample section; unset keys fall back to the per-mode defaults
    int sample_length = 32;
    int sample_count = 8;
    int sample_T_lm = 0;
    int sample_T_prime = 100;
    double sample_tau_s = 1.0;
    double sample_tau_z = 0.35;
    double sample_cfg_scale = 2.0;
    UnmaskStrategy sample_unmask = UnmaskStrategy::TopK;
    int sample_anti_repeat = 0;
    bool sample_maintain_motif = true;

    std::vector<double> eval_thresholds{0.25, 0.5, 1.0};

    std::vector<double> sweep_tau_z{0.1, 0.35};
    std::vector<double> sweep_cfg_scale{1.0, 2.0};
    std::vector<int> sweep_T_lm{0};
    int sweep_n_samples = 16;

    std::set<std::string> explicit_keys;

    static RunConfig from_text(const std::string& text);
    static RunConfig load(const std::string& path);

    // canonical resolved snapshot (every key, fixed order)
    std::string to_text() const;
    uint64_t digest() const;

    bool is_set(const std::string& key) const { return explicit_keys.count(key) > 0; }

    // model config with the world's alphabet and dimension filled in
    ModelConfig model_config() const;

    // per-mode options: defaults for the mode, then explicit overrides
    SampleOptions sample_options(SampleMode mode, int length, uint64_t seed) const;
};

} // namespace hdiff
