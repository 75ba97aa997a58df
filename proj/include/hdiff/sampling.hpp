#pragma once

// Generation: the DDPM reverse chain with temperature and classifier-free
// guidance, categorical sampling with temperature / top-k unmasking /
// anti-repeat resampling, iterative co-generation, and the three conditional
// modes (motif-scaffolding, fold, inverse fold).
//
// Every random draw comes from a named substream keyed by (seed, purpose,
// lm-step, position), so enabling or disabling one consumer (e.g. the CFG
// branch, or the step-noise term at tau_z = 0) cannot shift any other
// consumer's stream. That makes omega = 1 runs bit-identical to
// guidance-disabled runs and tau_z = 0 runs independent of the step-noise
// stream.

#include <optional>
#include <span>
#include <vector>

#include "hdiff/network.hpp"
#include "hdiff/rng.hpp"
#include "hdiff/schedules.hpp"
#include "hdiff/token_space.hpp"

namespace hdiff {

enum class SampleMode { CoGen, Scaffold, Fold, InverseFold };
enum class UnmaskStrategy { Random, TopK };

struct MotifSpec {
    std::vector<int> positions;       // strictly increasing, within [0, L)
    std::vector<int> seq;             // [l], real token ids
    std::vector<float> struct_tokens; // [l * d_struct], world units
};

struct SampleOptions {
    SampleMode mode = SampleMode::CoGen;
    int length = 32;
    int T_lm = 0;                  // 0 = per-mode default (L; L - l for scaffold; 1 for fold)
    double tau_s = 1.0;
    double tau_z = 0.35;
    double cfg_scale = 2.0;        // omega; 1 disables guidance
    int T_prime = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    UnmaskStrategy unmask = UnmaskStrategy::TopK;
    int anti_repeat = 0;           // 0 = off, else the max allowed run r (>= 2)
    std::optional<MotifSpec> motif;
    bool maintain_motif = true;
    uint64_t seed = 0;
    uint64_t step_noise_salt = 0;  // re-keys only the DDPM step-noise substream
    bool cfg_force_uncond = false; // evaluate the unconditional branch even at omega = 1
    bool record_trace = false;

    static SampleOptions defaults_for(SampleMode mode, int L);

    void validate(const ModelConfig& cfg) const;
};

struct StepTrace {
    int t = 0;
    std::vector<int> seq_unmasked;
    std::vector<int> struct_unmasked;
};

struct GenerationResult {
    int length = 0;
    int dim = 0;
    std::vector<int> seq;               // [L], no mask ids
    std::vector<float> struct_tokens;   // [L * dim], world units
    std::vector<StepTrace> trace;
};

// (1 - omega) * eps_uncond + omega * eps_cond; at omega = 1 this is exactly
// eps_cond, returned bit-identically.
std::vector<float> cfg_combine(std::span<const float> eps_uncond, std::span<const float> eps_cond,
                               double omega);

// Reverse DDPM chain for one continuous token. Starts from the init-noise
// stream, applies T'..1 denoising steps with the step formula
// z <- (z - (1-a)/sqrt(1-ab) * eps_hat) / sqrt(a) + sigma * delta * tau_z,
// and adds no noise at t' = 1. `c_i_uncond` enables guidance (required
// whenever omega != 1).
std::vector<float> ddpm_generate_token(const ModelParams<float>& params, std::span<const float> c_i,
                                       const float* c_i_uncond, const DdpmSchedule& sched,
                                       double tau_z, double omega, Rng& init_rng, Rng& step_rng);

// tau_s > 0: draw from softmax(logits / tau_s); tau_s = 0: argmax with
// lowest-index tie break.
int sample_sequence_token(std::span<const float> logits, double tau_s, Rng& rng);

// Random: k uniform positions from masked_set. TopK: the k highest scores,
// ties broken toward the lower position index. k > |masked_set| selects all.
std::vector<int> select_unmask(UnmaskStrategy strategy, std::span<const double> scores,
                               std::span<const int> masked_set, int k, Rng& rng);

// If committing `candidate` at `position` would create a run of more than r
// equal adjacent non-masked tokens, resample from the renormalized
// temperature-adjusted distribution excluding the offender (up to V-1
// retries, then the argmax of the remaining tokens).
int apply_anti_repeat(std::span<const int> seq_partial, int mask_id, int position, int candidate,
                      std::span<const float> logits, double tau_s, int r, Rng& rng);

// Per-step unmask counts k_t for n positions over `steps` steps. Cumulative
// counts are round(n * s / steps), so the sum is exactly n and every step's k
// fits the remaining masked set.
std::vector<int> unmask_schedule(int n, int steps);

GenerationResult cogenerate(const ModelParams<float>& params, const TokenScaler& scaler,
                            const SampleOptions& opts);

// Conditional co-generation around a fixed motif. Motif tokens initialize
// both tracks; with maintain_motif the motif positions are excluded from
// every unmask set and the output carries the input motif values verbatim.
GenerationResult scaffold(const ModelParams<float>& params, const TokenScaler& scaler,
                          const SampleOptions& opts);

// Complete structure track for a full sequence in a single backbone pass.
std::vector<float> fold(const ModelParams<float>& params, const TokenScaler& scaler,
                        std::span<const int> seq, const SampleOptions& opts);

// Complete sequence track for a full structure track (world units) by
// iterative unmasking.
std::vector<int> inverse_fold(const ModelParams<float>& params, const TokenScaler& scaler,
                              std::span<const float> struct_world, int length,
                              const SampleOptions& opts);

} // namespace hdiff
