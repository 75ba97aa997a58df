#pragma once

// Training objective, optimizer, learning-rate program, and the loop.
// Per batch each sample draws its own scheduler task mode (sequence-only,
// structure-only, or coupled co-generation) and is corrupted accordingly;
// the loop is bit-deterministic given (seed, config, dataset).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hdiff/network.hpp"
#include "hdiff/schedules.hpp"
#include "hdiff/token_space.hpp"
#include "hdiff/toyworld.hpp"

namespace hdiff {

struct TrainConfig {
    double gamma = 0.2;            // loss mix: struct + gamma * seq
    int T = 100;                   // language-model diffusion steps
    int T_prime = 100;             // DDPM steps
    double beta_start = 1e-4;
    double beta_end = 0.02;
    MixProbs mix{};                // 0.2 / 0.2 / 0.6
    int batch_size = 32;
    int steps = 5500;
    double lr_peak = 1e-3;
    double lr_floor = 1e-4;
    double warmup_frac = 0.05;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double max_grad_norm = 0.0;    // 0 disables clipping
    int draws_per_position = 1;    // (t', eps) samples per masked position per step
    int draws_boost = 1;           // draws at positions whose window is fully visible
    uint64_t seed = 1;
    int checkpoint_every = 1000;
    int log_every = 50;

    void validate() const {
        if (!(gamma > 0.0)) throw std::invalid_argument("TrainConfig: gamma must be > 0");
        if (T < 1 || T_prime < 1) throw std::invalid_argument("TrainConfig: T and T' must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
        if (draws_per_position < 1)
            throw std::invalid_argument("TrainConfig: draws_per_position must be >= 1");
        if (draws_boost < 1)
            throw std::invalid_argument("TrainConfig: draws_boost must be >= 1");
        if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0))
            throw std::invalid_argument("TrainConfig: warmup_frac must be in [0, 1]");
        const double sum = mix.p_seq + mix.p_struct + mix.p_cogen;
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("TrainConfig: mix must sum to 1");
    }
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

template <typename Real>
struct OptimizerStateT {
    std::vector<Real> m;
    std::vector<Real> v;
    int64_t step = 0;
};

using OptimizerState = OptimizerStateT<float>;

// mean over batch of lambda(t_s) * sum of masked-position NLL.
// `logits` holds one [L * V] array per sample (pre-softmax).
template <typename Real>
double loss_seq(std::span<const std::vector<Real>> logits, std::span<const BatchSampleT<Real>> batch,
                int V, int mask_id, int T) {
    if (logits.size() != batch.size())
        throw std::invalid_argument("loss_seq: logits/batch size mismatch");
    double total = 0.0;
    for (size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        if (!s.seq_loss) continue;
        double nll = 0.0;
        bool any = false;
        for (int i = 0; i < s.length; ++i) {
            if (s.seq_in[static_cast<size_t>(i)] != mask_id) continue;
            any = true;
            const Real* row = logits[b].data() + static_cast<size_t>(i) * static_cast<size_t>(V);
            double mx = static_cast<double>(row[0]);
            for (int v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
            double z = 0.0;
            for (int v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
            const int target = s.seq_target[static_cast<size_t>(i)];
            nll += std::log(z) - (static_cast<double>(row[target]) - mx);
        }
        if (any) total += seq_reweight(s.t_s, T) * nll;
    }
    return total / static_cast<double>(batch.size());
}

// mean over batch of lambda(t_z) * sum over struct-masked positions of
// || eps - Denoiser(sqrt(ab) z0 + sqrt(1-ab) eps, t', c_i) ||^2, where z0 is
// the clean scaled token even though the encoder input shows the position
// masked. Uses the (t', eps) draws stored in the batch.
template <typename Real>
double loss_struct(const ModelParams<Real>& params, std::span<const BatchSampleT<Real>> batch,
                   const DdpmSchedule& sched) {
    LossSpec spec;
    spec.gamma = 0.0;
    spec.ddpm = &sched;
    spec.T = 1;
    double total = 0.0;
    EncodeCache<Real> cache;
    DenoiserCache<Real> dcache;
    const int D = params.cfg.struct_spec.dim;
    const int H = params.cfg.d_hidden;
    std::vector<Real> z_noisy(static_cast<size_t>(D)), eps_hat(static_cast<size_t>(D));
    for (const auto& s : batch) {
        if (!s.struct_loss) continue;
        encode_cached<Real>(params, s.seq_in, s.struct_in, s.struct_mask, cache);
        int k = 0;
        size_t draw = 0;
        double sq = 0.0;
        for (int i = 0; i < s.length; ++i) {
            if (!s.struct_mask[static_cast<size_t>(i)]) continue;
            std::span<const Real> z0{
                s.struct_target.data() + static_cast<size_t>(i) * static_cast<size_t>(D),
                static_cast<size_t>(D)};
            const int R = s.draw_counts.empty() ? std::max(1, s.draws_per_position)
                                                : s.draw_counts[static_cast<size_t>(k)];
            for (int r = 0; r < R; ++r, ++draw) {
                const int tp = s.t_prime[draw];
                std::span<const Real> eps{s.eps.data() + draw * static_cast<size_t>(D),
                                          static_cast<size_t>(D)};
                ddpm_forward_into<Real>(z0, tp, eps, sched, z_noisy);
                denoise_forward<Real>(params, z_noisy, tp,
                                {cache.ctx.data() + static_cast<size_t>(i) * static_cast<size_t>(H),
                                 static_cast<size_t>(H)},
                                dcache, eps_hat);
                for (int j = 0; j < D; ++j) {
                    const double d = static_cast<double>(eps[static_cast<size_t>(j)]) -
                                     static_cast<double>(eps_hat[static_cast<size_t>(j)]);
                    sq += d * d / R;
                }
            }
            ++k;
        }
        total += struct_reweight(s.t_z) * sq;
    }
    return total / static_cast<double>(batch.size());
}

inline double total_loss(double l_struct, double l_seq, double gamma) {
    return l_struct + gamma * l_seq;
}

// Decoupled-weight-decay adaptive-moment update with bias correction.
// Decay is skipped for normalization gains/biases.
template <typename Real>
void adamw_step(ModelParams<Real>& params, std::span<const Real> grads,
                OptimizerStateT<Real>& state, double lr, const AdamHyper& hyper) {
    const size_t n = params.flat.size();
    if (grads.size() != n) throw std::invalid_argument("adamw_step: grad shape mismatch");
    for (Real g : grads)
        if (!std::isfinite(static_cast<double>(g)))
            throw TrainingError("adamw_step: non-finite gradient");
    if (state.m.empty()) {
        state.m.assign(n, Real(0));
        state.v.assign(n, Real(0));
    }
    if (state.m.size() != n || state.v.size() != n)
        throw std::invalid_argument("adamw_step: optimizer state shape mismatch");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));

    for (const TensorInfo& t : params.layout.tensors) {
        const double wd = t.weight_decay ? hyper.weight_decay : 0.0;
        for (size_t i = t.offset; i < t.offset + t.size(); ++i) {
            const double g = static_cast<double>(grads[i]);
            const double m = hyper.beta1 * static_cast<double>(state.m[i]) + (1.0 - hyper.beta1) * g;
            const double v = hyper.beta2 * static_cast<double>(state.v[i]) + (1.0 - hyper.beta2) * g * g;
            state.m[i] = static_cast<Real>(m);
            state.v[i] = static_cast<Real>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            double p = static_cast<double>(params.flat[i]);
            p -= lr * (m_hat / (std::sqrt(v_hat) + hyper.eps) + wd * p);
            params.flat[i] = static_cast<Real>(p);
        }
    }
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg);

// Corrupts one clean (already scaled) sample for a task mode and draws the
// per-masked-position (t', eps) pairs. Loss support follows the mode: the
// track a mode pins fully masked at T is context only, not a loss target.
// draws_boost, when larger than draws_per_position, allocates extra (t', eps)
// draws to masked positions whose surrounding sequence window is fully
// visible; per-position means keep the loss estimate unbiased.
BatchSample assemble_sample(const TrackPair& clean_scaled, const TaskMode& mode, int T,
                            int T_prime, int mask_id, Rng& seq_rng, Rng& struct_rng,
                            Rng& noise_rng, int draws_per_position = 1, int draws_boost = 0);

struct TrainMetricsRow {
    int64_t step = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_seq = 0.0;
    double loss_struct = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

struct TrainHooks {
    std::function<void(const TrainMetricsRow&)> on_metrics;
    std::function<void(const ModelParams<float>&, const OptimizerState&, int64_t step)> on_checkpoint;
};

struct TrainResult {
    ModelParams<float> params;
    OptimizerState opt;
    int64_t steps_done = 0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    int64_t struct_loss_batches = 0;  // batches with any structure-loss support
    int64_t seq_loss_batches = 0;
};

// Full loop: sample batch -> per-sample task mode -> corrupt both tracks ->
// forward/backward on the combined objective -> AdamW with the warmup/decay
// program. Dataset samples must be in world units; they are scaled here.
TrainResult train(const TrainConfig& tcfg, const ModelConfig& mcfg, const ToyDataset& dataset,
                  const TokenScaler& scaler, const TrainHooks& hooks = {});

} // namespace hdiff
