#include "hdiff/training.hpp"

#include <chrono>
#include <algorithm>
#include <cmath>

namespace hdiff {

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
    if (step < 0 || step > total_steps) throw std::invalid_argument("lr_at: step out of range");
    const int64_t warmup = static_cast<int64_t>(
        std::llround(cfg.warmup_frac * static_cast<double>(total_steps)));
    if (warmup > 0 && step <= warmup) {
        const double f = static_cast<double>(step) / static_cast<double>(warmup);
        return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * f;
    }
    if (total_steps == warmup) return cfg.lr_peak;
    const double f = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return cfg.lr_peak + (cfg.lr_floor - cfg.lr_peak) * f;
}

BatchSample assemble_sample(const TrackPair& clean_scaled, const TaskMode& mode, int T,
                            int T_prime, int mask_id, Rng& seq_rng, Rng& struct_rng,
                            Rng& noise_rng, int draws_per_position, int draws_boost) {
    BatchSample s;
    s.length = clean_scaled.length;
    s.t_s = mode.t_s;
    s.t_z = mode.t_z;
    s.seq_target = clean_scaled.seq;
    s.struct_target.assign(clean_scaled.struct_tokens.begin(), clean_scaled.struct_tokens.end());
    s.seq_in = corrupt_sequence(clean_scaled.seq, mask_id, mode.t_s, T, seq_rng);
    s.struct_mask = corrupt_structure(clean_scaled.length, mode.t_z, T, struct_rng);
    s.struct_in = s.struct_target;
    s.seq_loss = true;
    s.struct_loss = true;

    s.draws_per_position = std::max(1, draws_per_position);
    const int boost = std::max(s.draws_per_position, draws_boost);
    if (s.struct_loss) {
        const int D = clean_scaled.dim;
        const int L = s.length;
        for (int i = 0; i < L; ++i) {
            if (!s.struct_mask[static_cast<size_t>(i)]) continue;
            const bool left_vis = (i == 0) || s.seq_in[static_cast<size_t>(i - 1)] != mask_id;
            const bool mid_vis = s.seq_in[static_cast<size_t>(i)] != mask_id;
            const bool right_vis = (i == L - 1) || s.seq_in[static_cast<size_t>(i + 1)] != mask_id;
            const int R = (left_vis && mid_vis && right_vis) ? boost : s.draws_per_position;
            s.draw_counts.push_back(R);
            for (int r = 0; r < R; ++r) {
                s.t_prime.push_back(1 + static_cast<int>(noise_rng.uniform_int(
                                            static_cast<uint64_t>(T_prime))));
                for (int j = 0; j < D; ++j)
                    s.eps.push_back(static_cast<float>(noise_rng.gaussian()));
            }
        }
    }
    return s;
}

TrainResult train(const TrainConfig& tcfg, const ModelConfig& mcfg, const ToyDataset& dataset,
                  const TokenScaler& scaler, const TrainHooks& hooks) {
    tcfg.validate();
    mcfg.validate();
    if (dataset.samples.empty()) throw std::invalid_argument("train: empty dataset");
    if (!scaler.fitted()) throw std::invalid_argument("train: scaler not fitted");

    // scale the whole dataset once
    std::vector<TrackPair> scaled = dataset.samples;
    for (TrackPair& tp : scaled) apply_scale_inplace(scaler, tp.struct_tokens);

    const DdpmSchedule sched = make_ddpm_schedule(tcfg.T_prime, tcfg.beta_start, tcfg.beta_end);
    LossSpec spec;
    spec.gamma = tcfg.gamma;
    spec.T = tcfg.T;
    spec.ddpm = &sched;

    TrainResult res;
    res.params = init_params<float>(mcfg, tcfg.seed);
    const int mask_id = mcfg.vocab.mask_id();

    std::vector<BatchSample> batch(static_cast<size_t>(tcfg.batch_size));
    const auto t_start = std::chrono::steady_clock::now();

    for (int64_t step = 0; step < tcfg.steps; ++step) {
        Rng batch_rng = derive_rng(tcfg.seed, Stream::BatchSelect, static_cast<uint64_t>(step));
        bool any_struct = false, any_seq = false;
        for (int b = 0; b < tcfg.batch_size; ++b) {
            const size_t idx = static_cast<size_t>(
                batch_rng.uniform_int(static_cast<uint64_t>(scaled.size())));
            Rng task_rng = derive_rng(tcfg.seed, Stream::TaskDraw, static_cast<uint64_t>(step),
                                      static_cast<uint64_t>(b));
            Rng seq_rng = derive_rng(tcfg.seed, Stream::CorruptSeq, static_cast<uint64_t>(step),
                                     static_cast<uint64_t>(b));
            Rng struct_rng = derive_rng(tcfg.seed, Stream::CorruptStruct,
                                        static_cast<uint64_t>(step), static_cast<uint64_t>(b));
            Rng noise_rng = derive_rng(tcfg.seed, Stream::StructNoise, static_cast<uint64_t>(step),
                                       static_cast<uint64_t>(b));
            const TaskMode mode = sample_task_mode(task_rng, tcfg.mix, tcfg.T);
            batch[static_cast<size_t>(b)] = assemble_sample(scaled[idx], mode, tcfg.T,
                                                            tcfg.T_prime, mask_id, seq_rng,
                                                            struct_rng, noise_rng,
                                                            tcfg.draws_per_position,
                                                            tcfg.draws_boost);
            if (!batch[static_cast<size_t>(b)].t_prime.empty()) any_struct = true;
            if (batch[static_cast<size_t>(b)].seq_loss) any_seq = true;
        }
        if (any_struct) res.struct_loss_batches += 1;
        if (any_seq) res.seq_loss_batches += 1;

        ForwardBackwardResult<float> fb = forward_backward<float>(res.params, batch, spec);
        if (step == 0) res.first_loss = fb.loss;
        res.final_loss = fb.loss;

        double gn = 0.0;
        for (float g : fb.grads) gn += static_cast<double>(g) * static_cast<double>(g);
        gn = std::sqrt(gn);
        if (tcfg.max_grad_norm > 0.0 && gn > tcfg.max_grad_norm) {
            const float scale = static_cast<float>(tcfg.max_grad_norm / gn);
            for (float& g : fb.grads) g *= scale;
        }

        const double lr = lr_at(step + 1, tcfg.steps, tcfg);
        AdamHyper hyper{tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps, tcfg.weight_decay};
        adamw_step<float>(res.params, fb.grads, res.opt, lr, hyper);
        res.steps_done = step + 1;

        if (hooks.on_metrics &&
            ((step + 1) % tcfg.log_every == 0 || step == 0 || step + 1 == tcfg.steps)) {
            const double wall_ms = std::chrono::duration<double, std::milli>(
                                       std::chrono::steady_clock::now() - t_start)
                                       .count();
            hooks.on_metrics({step + 1, lr, fb.loss, fb.loss_seq, fb.loss_struct, gn, wall_ms});
        }
        if (hooks.on_checkpoint &&
            ((step + 1) % tcfg.checkpoint_every == 0 || step + 1 == tcfg.steps)) {
            hooks.on_checkpoint(res.params, res.opt, step + 1);
        }
    }
    return res;
}

} // namespace hdiff
