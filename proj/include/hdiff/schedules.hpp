#pragma once

// Noising mathematics for both tracks: the linear absorbing-mask schedule over
// T language-model steps, per-step loss reweighting, the DDPM beta/alpha
// schedule over T' denoising steps, task-mode draws, and the forward
// corruption operators.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "hdiff/rng.hpp"

namespace hdiff {

struct MaskSchedule {
    int T = 100;

    void validate() const {
        if (T < 1) throw std::invalid_argument("MaskSchedule: T must be >= 1");
    }
};

// Linear beta schedule with derived alpha, alpha_bar (cumulative product) and
// sigma (sigma^2 = beta). Steps are 1-based: t' in {1..T'}.
struct DdpmSchedule {
    int T_prime = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;

    double beta_at(int t_prime) const { return beta[index(t_prime)]; }
    double alpha_at(int t_prime) const { return alpha[index(t_prime)]; }
    double alpha_bar_at(int t_prime) const { return alpha_bar[index(t_prime)]; }
    double sigma_at(int t_prime) const { return sigma[index(t_prime)]; }

private:
    size_t index(int t_prime) const {
        if (t_prime < 1 || t_prime > T_prime)
            throw std::invalid_argument("DdpmSchedule: step out of range [1, T']");
        return static_cast<size_t>(t_prime - 1);
    }
};

enum class TaskKind { SeqGen, StructGen, CoGen, Fold, InverseFold };

// Scheduler setting for one sample: the pair of step indices (t_s, t_z).
// SeqGen pins t_z = T, StructGen pins t_s = T, Fold pins t_s = 0,
// InverseFold pins t_z = 0, CoGen couples t_s = t_z.
struct TaskMode {
    TaskKind kind = TaskKind::CoGen;
    int t_s = 0;
    int t_z = 0;

    void validate(int T) const;
};

struct MixProbs {
    double p_seq = 0.2;
    double p_struct = 0.2;
    double p_cogen = 0.6;
};

// probability that a token survives t of T masking steps: 1 - t/T
double mask_keep_prob(int t, int T);

// sequence-loss weight 1 - (t_s - 1)/T
double seq_reweight(int t_s, int T);

// structure-loss weight, constant 1
double struct_reweight(int t_z);

DdpmSchedule make_ddpm_schedule(int T_prime, double beta_start = 1e-4, double beta_end = 0.02);

TaskMode sample_task_mode(Rng& rng, const MixProbs& mix, int T);

// number of positions masked at step t: round((t/T) * L)
int masked_count(int t, int T, int L);

// Replaces exactly masked_count(t_s, T, L) positions, drawn uniformly without
// replacement, with mask_id. The input must not already contain mask tokens.
std::vector<int> corrupt_sequence(std::span<const int> seq, int mask_id, int t_s, int T, Rng& rng);

// Same contract for the continuous track; returns the absorbing-state flags.
// Positions are drawn independently of any sequence-track draw.
std::vector<uint8_t> corrupt_structure(int length, int t_z, int T, Rng& rng);

// sqrt(alpha_bar_t') * z0 + sqrt(1 - alpha_bar_t') * eps
std::vector<double> ddpm_forward(std::span<const double> z0, int t_prime,
                                 std::span<const double> eps, const DdpmSchedule& sched);

template <typename Real>
void ddpm_forward_into(std::span<const Real> z0, int t_prime, std::span<const Real> eps,
                       const DdpmSchedule& sched, std::span<Real> out) {
    if (z0.size() != eps.size() || z0.size() != out.size())
        throw std::invalid_argument("ddpm_forward: dimension mismatch");
    const double ab = sched.alpha_bar_at(t_prime);
    const Real a = static_cast<Real>(std::sqrt(ab));
    const Real b = static_cast<Real>(std::sqrt(1.0 - ab));
    for (size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
}

} // namespace hdiff
