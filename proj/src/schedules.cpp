#include "hdiff/schedules.hpp"

#include <cmath>

namespace hdiff {

void TaskMode::validate(int T) const {
    auto in_range = [T](int t) { return t >= 0 && t <= T; };
    if (!in_range(t_s) || !in_range(t_z))
        throw std::invalid_argument("TaskMode: step index out of [0, T]");
    switch (kind) {
        case TaskKind::SeqGen:
            if (t_z != T) throw std::invalid_argument("TaskMode: SeqGen requires t_z = T");
            break;
        case TaskKind::StructGen:
            if (t_s != T) throw std::invalid_argument("TaskMode: StructGen requires t_s = T");
            break;
        case TaskKind::CoGen:
            if (t_s != t_z) throw std::invalid_argument("TaskMode: CoGen requires t_s = t_z");
            break;
        case TaskKind::Fold:
            if (t_s != 0) throw std::invalid_argument("TaskMode: Fold requires t_s = 0");
            break;
        case TaskKind::InverseFold:
            if (t_z != 0) throw std::invalid_argument("TaskMode: InverseFold requires t_z = 0");
            break;
    }
}

double mask_keep_prob(int t, int T) {
    if (T < 1 || t < 0 || t > T)
        throw std::invalid_argument("mask_keep_prob: t out of [0, T]");
    return 1.0 - static_cast<double>(t) / static_cast<double>(T);
}

double seq_reweight(int t_s, int T) {
    if (T < 1 || t_s < 1 || t_s > T)
        throw std::invalid_argument("seq_reweight: t_s out of [1, T]");
    return 1.0 - static_cast<double>(t_s - 1) / static_cast<double>(T);
}

double struct_reweight(int t_z) {
    (void)t_z;
    return 1.0;
}

DdpmSchedule make_ddpm_schedule(int T_prime, double beta_start, double beta_end) {
    if (T_prime < 1) throw std::invalid_argument("make_ddpm_schedule: T' must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("make_ddpm_schedule: need 0 < beta_start <= beta_end < 1");

    DdpmSchedule s;
    s.T_prime = T_prime;
    s.beta.resize(static_cast<size_t>(T_prime));
    s.alpha.resize(static_cast<size_t>(T_prime));
    s.alpha_bar.resize(static_cast<size_t>(T_prime));
    s.sigma.resize(static_cast<size_t>(T_prime));

    double prod = 1.0;
    for (int i = 0; i < T_prime; ++i) {
        const double frac = (T_prime == 1) ? 0.0
                                           : static_cast<double>(i) / static_cast<double>(T_prime - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<size_t>(i)] = b;
        s.alpha[static_cast<size_t>(i)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = prod;
        s.sigma[static_cast<size_t>(i)] = std::sqrt(b);
    }
    return s;
}

TaskMode sample_task_mode(Rng& rng, const MixProbs& mix, int T) {
    if (mix.p_seq < 0.0 || mix.p_struct < 0.0 || mix.p_cogen < 0.0)
        throw std::invalid_argument("sample_task_mode: negative mix probability");
    const double sum = mix.p_seq + mix.p_struct + mix.p_cogen;
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("sample_task_mode: mix must sum to 1");
    if (T < 1) throw std::invalid_argument("sample_task_mode: T must be >= 1");

    const double u = rng.uniform();
    const int t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(T)));
    TaskMode m;
    if (u < mix.p_seq) {
        m.kind = TaskKind::SeqGen;
        m.t_s = t;
        m.t_z = T;
    } else if (u < mix.p_seq + mix.p_struct) {
        m.kind = TaskKind::StructGen;
        m.t_s = T;
        m.t_z = t;
    } else {
        m.kind = TaskKind::CoGen;
        m.t_s = t;
        m.t_z = t;
    }
    return m;
}

int masked_count(int t, int T, int L) {
    return static_cast<int>(std::llround(
        static_cast<double>(t) / static_cast<double>(T) * static_cast<double>(L)));
}

std::vector<int> corrupt_sequence(std::span<const int> seq, int mask_id, int t_s, int T, Rng& rng) {
    const int L = static_cast<int>(seq.size());
    const int k = masked_count(t_s, T, L);
    std::vector<int> out(seq.begin(), seq.end());
    for (int pos : rng.sample_without_replacement(L, k)) out[static_cast<size_t>(pos)] = mask_id;
    return out;
}

std::vector<uint8_t> corrupt_structure(int length, int t_z, int T, Rng& rng) {
    const int k = masked_count(t_z, T, length);
    std::vector<uint8_t> flags(static_cast<size_t>(length), 0);
    for (int pos : rng.sample_without_replacement(length, k)) flags[static_cast<size_t>(pos)] = 1;
    return flags;
}

std::vector<double> ddpm_forward(std::span<const double> z0, int t_prime,
                                 std::span<const double> eps, const DdpmSchedule& sched) {
    std::vector<double> out(z0.size());
    ddpm_forward_into<double>(z0, t_prime, eps, sched, out);
    return out;
}

} // namespace hdiff
