#include "hdiff/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hdiff {

SampleOptions SampleOptions::defaults_for(SampleMode mode, int L) {
    SampleOptions o;
    o.mode = mode;
    o.length = L;
    switch (mode) {
        case SampleMode::CoGen:
            o.tau_s = 1.0;
            o.tau_z = 0.35;
            o.cfg_scale = 2.0;
            break;
        case SampleMode::Scaffold:
            o.tau_s = 1.0;
            o.tau_z = 0.1;
            o.cfg_scale = 1.0;
            break;
        case SampleMode::Fold:
            o.tau_z = 0.0;
            o.cfg_scale = 1.0;
            o.T_lm = 1;
            break;
        case SampleMode::InverseFold:
            o.tau_s = 0.1;
            o.cfg_scale = 1.0;
            break;
    }
    return o;
}

void SampleOptions::validate(const ModelConfig& cfg) const {
    if (length < 1) throw std::invalid_argument("SampleOptions: length must be >= 1");
    if (length > cfg.max_len) throw std::invalid_argument("SampleOptions: length exceeds max_len");
    if (T_lm < 0) throw std::invalid_argument("SampleOptions: T_lm must be >= 0");
    if (tau_s < 0.0 || tau_z < 0.0) throw std::invalid_argument("SampleOptions: temperatures must be >= 0");
    if (cfg_scale < 0.0) throw std::invalid_argument("SampleOptions: cfg_scale must be >= 0");
    if (T_prime < 1) throw std::invalid_argument("SampleOptions: T_prime must be >= 1");
    if (anti_repeat != 0 && anti_repeat < 2)
        throw std::invalid_argument("SampleOptions: anti_repeat must be 0 or >= 2");
    if (mode == SampleMode::Scaffold && !motif.has_value())
        throw std::invalid_argument("SampleOptions: scaffold requires a motif");
    if (motif.has_value()) {
        const MotifSpec& m = *motif;
        const size_t l = m.positions.size();
        if (l == 0) throw std::invalid_argument("MotifSpec: empty motif");
        if (m.seq.size() != l ||
            m.struct_tokens.size() != l * static_cast<size_t>(cfg.struct_spec.dim))
            throw std::invalid_argument("MotifSpec: tracks do not match the position list");
        for (size_t i = 0; i < l; ++i) {
            if (m.positions[i] < 0 || m.positions[i] >= length)
                throw std::invalid_argument("MotifSpec: position out of range");
            if (i > 0 && m.positions[i] <= m.positions[i - 1])
                throw std::invalid_argument("MotifSpec: positions must be strictly increasing");
            if (m.seq[i] < 0 || m.seq[i] >= cfg.vocab.size)
                throw std::invalid_argument("MotifSpec: motif sequence token out of alphabet");
        }
    }
}

std::vector<float> cfg_combine(std::span<const float> eps_uncond, std::span<const float> eps_cond,
                               double omega) {
    if (eps_uncond.size() != eps_cond.size())
        throw std::invalid_argument("cfg_combine: dimension mismatch");
    if (omega == 1.0) return std::vector<float>(eps_cond.begin(), eps_cond.end());
    std::vector<float> out(eps_cond.size());
    const float a = static_cast<float>(1.0 - omega);
    const float b = static_cast<float>(omega);
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * eps_uncond[i] + b * eps_cond[i];
    return out;
}

int sample_sequence_token(std::span<const float> logits, double tau_s, Rng& rng) {
    const int V = static_cast<int>(logits.size());
    if (tau_s == 0.0) {
        int best = 0;
        for (int v = 1; v < V; ++v)
            if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
        return best;
    }
    double mx = static_cast<double>(logits[0]) / tau_s;
    for (int v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(v)]) / tau_s);
    std::vector<double> p(static_cast<size_t>(V));
    double sum = 0.0;
    for (int v = 0; v < V; ++v) {
        p[static_cast<size_t>(v)] = std::exp(static_cast<double>(logits[static_cast<size_t>(v)]) / tau_s - mx);
        sum += p[static_cast<size_t>(v)];
    }
    const double u = rng.uniform() * sum;
    double acc = 0.0;
    for (int v = 0; v < V; ++v) {
        acc += p[static_cast<size_t>(v)];
        if (u < acc) return v;
    }
    return V - 1;
}

std::vector<int> select_unmask(UnmaskStrategy strategy, std::span<const double> scores,
                               std::span<const int> masked_set, int k, Rng& rng) {
    const int n = static_cast<int>(masked_set.size());
    if (k >= n) return std::vector<int>(masked_set.begin(), masked_set.end());
    if (k <= 0) return {};
    if (strategy == UnmaskStrategy::Random) {
        std::vector<int> picks = rng.sample_without_replacement(n, k);
        std::vector<int> out;
        out.reserve(static_cast<size_t>(k));
        for (int idx : picks) out.push_back(masked_set[static_cast<size_t>(idx)]);
        return out;
    }
    if (scores.size() != masked_set.size())
        throw std::invalid_argument("select_unmask: scores must align with masked_set");
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return masked_set[static_cast<size_t>(a)] < masked_set[static_cast<size_t>(b)];
    });
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(masked_set[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    return out;
}

namespace {

// run length through `position` if `token` were committed there
int run_length_with(std::span<const int> seq, int mask_id, int position, int token) {
    (void)mask_id;
    const int L = static_cast<int>(seq.size());
    int run = 1;
    for (int j = position - 1; j >= 0 && seq[static_cast<size_t>(j)] == token; --j) ++run;
    for (int j = position + 1; j < L && seq[static_cast<size_t>(j)] == token; ++j) ++run;
    return run;
}

std::vector<double> adjusted_probs(std::span<const float> logits, double tau_s) {
    const int V = static_cast<int>(logits.size());
    std::vector<double> p(static_cast<size_t>(V));
    const double tau = (tau_s == 0.0) ? 1.0 : tau_s;
    double mx = static_cast<double>(logits[0]) / tau;
    for (int v = 1; v < V; ++v)
        mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(v)]) / tau);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) {
        p[static_cast<size_t>(v)] = std::exp(static_cast<double>(logits[static_cast<size_t>(v)]) / tau - mx);
        sum += p[static_cast<size_t>(v)];
    }
    for (double& x : p) x /= sum;
    return p;
}

} // namespace

int apply_anti_repeat(std::span<const int> seq_partial, int mask_id, int position, int candidate,
                      std::span<const float> logits, double tau_s, int r, Rng& rng) {
    if (r < 2) throw std::invalid_argument("apply_anti_repeat: r must be >= 2");
    if (run_length_with(seq_partial, mask_id, position, candidate) <= r) return candidate;

    const int V = static_cast<int>(logits.size());
    std::vector<double> p = adjusted_probs(logits, tau_s);
    std::vector<uint8_t> excluded(static_cast<size_t>(V), 0);
    excluded[static_cast<size_t>(candidate)] = 1;

    for (int retry = 0; retry < V - 1; ++retry) {
        double mass = 0.0;
        for (int v = 0; v < V; ++v)
            if (!excluded[static_cast<size_t>(v)]) mass += p[static_cast<size_t>(v)];
        if (mass <= 0.0) break;
        const double u = rng.uniform() * mass;
        double acc = 0.0;
        int pick = -1;
        for (int v = 0; v < V; ++v) {
            if (excluded[static_cast<size_t>(v)]) continue;
            acc += p[static_cast<size_t>(v)];
            if (u < acc) {
                pick = v;
                break;
            }
            pick = v;
        }
        if (pick < 0) break;
        if (run_length_with(seq_partial, mask_id, position, pick) <= r) return pick;
        excluded[static_cast<size_t>(pick)] = 1;
    }
    int best = -1;
    for (int v = 0; v < V; ++v) {
        if (excluded[static_cast<size_t>(v)]) continue;
        if (best < 0 || p[static_cast<size_t>(v)] > p[static_cast<size_t>(best)]) best = v;
    }
    return best >= 0 ? best : candidate;
}

std::vector<int> unmask_schedule(int n, int steps) {
    if (n < 0 || steps < 1) throw std::invalid_argument("unmask_schedule: bad arguments");
    std::vector<int> ks(static_cast<size_t>(steps));
    auto cum = [&](int s) {
        return static_cast<int>(std::llround(static_cast<double>(n) * static_cast<double>(s) /
                                             static_cast<double>(steps)));
    };
    for (int s = 0; s < steps; ++s) ks[static_cast<size_t>(s)] = cum(s + 1) - cum(s);
    return ks;
}

// ---- DDPM chains -------------------------------------------------------------

namespace {

// Lockstep reverse chains for a set of positions sharing one schedule. The
// denoiser is evaluated batched across positions; each position owns its own
// init-noise and step-noise rng so results do not depend on batching.
struct ChainRunner {
    const ModelParams<float>& P;
    const DdpmSchedule& sched;
    double tau_z;
    double omega;
    int n = 0;

    std::vector<float> z;        // [n, D]
    std::vector<const float*> ctx;
    std::vector<const float*> ctx_uncond;  // empty when guidance is off
    std::vector<Rng> init_rng, step_rng;

    std::vector<float> input, hidden_a, hidden_b, eps_cond, eps_uncond;

    ChainRunner(const ModelParams<float>& params, const DdpmSchedule& schedule, double tz,
                double om, int count)
        : P(params), sched(schedule), tau_z(tz), omega(om), n(count) {}

    void run() {
        const ModelConfig& cfg = P.cfg;
        const int D = cfg.struct_spec.dim;
        const int TE = cfg.time_embed_dim;
        const int H = cfg.d_hidden;
        const int in0 = D + TE + H;
        int max_dim = in0;
        for (int d : P.layout.den_dims) max_dim = std::max(max_dim, d);

        z.assign(static_cast<size_t>(n) * static_cast<size_t>(D), 0.0f);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < D; ++j)
                z[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(j)] =
                    static_cast<float>(init_rng[static_cast<size_t>(i)].gaussian());

        input.assign(static_cast<size_t>(n) * static_cast<size_t>(in0), 0.0f);
        hidden_a.assign(static_cast<size_t>(n) * static_cast<size_t>(max_dim), 0.0f);
        hidden_b.assign(static_cast<size_t>(n) * static_cast<size_t>(max_dim), 0.0f);
        eps_cond.assign(static_cast<size_t>(n) * static_cast<size_t>(D), 0.0f);
        eps_uncond.assign(static_cast<size_t>(n) * static_cast<size_t>(D), 0.0f);
        std::vector<float> temb(static_cast<size_t>(TE));

        const bool guided = !ctx_uncond.empty();
        for (int tp = sched.T_prime; tp >= 1; --tp) {
            time_embedding<float>(tp, TE, temb);
            predict(temb, ctx, eps_cond);
            if (guided) predict(temb, ctx_uncond, eps_uncond);

            const double a = sched.alpha_at(tp);
            const double ab = sched.alpha_bar_at(tp);
            const float inv_sqrt_a = static_cast<float>(1.0 / std::sqrt(a));
            const float coef = static_cast<float>((1.0 - a) / std::sqrt(1.0 - ab));
            const float sig = static_cast<float>(sched.sigma_at(tp));
            const float wu = static_cast<float>(1.0 - omega);
            const float wc = static_cast<float>(omega);

            for (int i = 0; i < n; ++i) {
                float* zi = z.data() + static_cast<size_t>(i) * static_cast<size_t>(D);
                const float* ec = eps_cond.data() + static_cast<size_t>(i) * static_cast<size_t>(D);
                const float* eu = eps_uncond.data() + static_cast<size_t>(i) * static_cast<size_t>(D);
                for (int j = 0; j < D; ++j) {
                    const float eps_hat = (guided && omega != 1.0) ? (wu * eu[j] + wc * ec[j]) : ec[j];
                    zi[j] = inv_sqrt_a * (zi[j] - coef * eps_hat);
                }
                if (tau_z != 0.0 && tp > 1) {
                    Rng& rs = step_rng[static_cast<size_t>(i)];
                    for (int j = 0; j < D; ++j)
                        zi[j] += sig * static_cast<float>(rs.gaussian()) * static_cast<float>(tau_z);
                }
            }
        }
    }

private:
    void predict(const std::vector<float>& temb, const std::vector<const float*>& contexts,
                 std::vector<float>& out) {
        const ModelConfig& cfg = P.cfg;
        const int D = cfg.struct_spec.dim;
        const int TE = cfg.time_embed_dim;
        const int H = cfg.d_hidden;
        const int in0 = D + TE + H;
        const int M = cfg.denoiser_layers;

        for (int i = 0; i < n; ++i) {
            float* row = input.data() + static_cast<size_t>(i) * static_cast<size_t>(in0);
            std::copy(z.data() + static_cast<size_t>(i) * static_cast<size_t>(D),
                      z.data() + static_cast<size_t>(i + 1) * static_cast<size_t>(D), row);
            std::copy(temb.begin(), temb.end(), row + D);
            std::copy(contexts[static_cast<size_t>(i)], contexts[static_cast<size_t>(i)] + H,
                      row + D + TE);
        }
        const float* cur = input.data();
        float* buf = hidden_a.data();
        float* alt = hidden_b.data();
        for (int m = 0; m < M; ++m) {
            const int in = P.layout.den_dims[static_cast<size_t>(m)];
            const int outd = P.layout.den_dims[static_cast<size_t>(m) + 1];
            float* dst = (m == M - 1) ? out.data() : buf;
            detail::affine(cur, P.at(P.layout.den_w[static_cast<size_t>(m)]),
                           P.at(P.layout.den_b[static_cast<size_t>(m)]), dst, n, in, outd);
            if (m < M - 1) {
                for (int i = 0; i < n * outd; ++i) dst[i] = detail::gelu(dst[i]);
                cur = dst;
                std::swap(buf, alt);
            }
        }
    }
};

} // namespace

std::vector<float> ddpm_generate_token(const ModelParams<float>& params, std::span<const float> c_i,
                                       const float* c_i_uncond, const DdpmSchedule& sched,
                                       double tau_z, double omega, Rng& init_rng, Rng& step_rng) {
    if (omega != 1.0 && c_i_uncond == nullptr)
        throw std::invalid_argument("ddpm_generate_token: guidance requires the unconditional context");
    ChainRunner runner(params, sched, tau_z, omega, 1);
    runner.ctx = {c_i.data()};
    if (c_i_uncond) runner.ctx_uncond = {c_i_uncond};
    runner.init_rng.push_back(init_rng);
    runner.step_rng.push_back(step_rng);
    runner.run();
    init_rng = runner.init_rng[0];
    step_rng = runner.step_rng[0];
    return runner.z;
}

// ---- generation modes --------------------------------------------------------

namespace {

struct TrackState {
    int L = 0;
    int D = 0;
    int mask_id = 0;
    std::vector<int> seq;
    std::vector<float> z;            // scaled space
    std::vector<uint8_t> flags;

    std::vector<int> masked_seq() const {
        std::vector<int> out;
        for (int i = 0; i < L; ++i)
            if (seq[static_cast<size_t>(i)] == mask_id) out.push_back(i);
        return out;
    }
    std::vector<int> masked_struct() const {
        std::vector<int> out;
        for (int i = 0; i < L; ++i)
            if (flags[static_cast<size_t>(i)]) out.push_back(i);
        return out;
    }
};

// Shared iterative loop for co-generation and scaffolding. `frozen` positions
// are never touched. Runs `T` steps whose unmask counts cover every
// non-frozen position on both tracks.
GenerationResult run_cogen_loop(const ModelParams<float>& P, const TokenScaler& scaler,
                                const SampleOptions& opts, TrackState st,
                                const std::vector<uint8_t>& frozen, int T) {
    const ModelConfig& cfg = P.cfg;
    const int L = st.L;
    const int D = st.D;
    const int H = cfg.d_hidden;
    const double omega = opts.cfg_scale;
    const bool needs_uncond = (omega != 1.0) || opts.cfg_force_uncond;
    const DdpmSchedule sched = make_ddpm_schedule(opts.T_prime, opts.beta_start, opts.beta_end);
    const uint64_t salted = opts.seed ^ (opts.step_noise_salt * 0x9e3779b97f4a7c15ull);

    int free_count = 0;
    for (int i = 0; i < L; ++i)
        if (!frozen[static_cast<size_t>(i)]) ++free_count;
    const std::vector<int> ks = unmask_schedule(free_count, T);

    GenerationResult res;
    res.length = L;
    res.dim = D;

    std::vector<int> all_masked_seq(static_cast<size_t>(L), st.mask_id);

    for (int s = 0; s < T; ++s) {
        const int t = T - s;
        const int k = ks[static_cast<size_t>(s)];
        StepTrace trace;
        trace.t = t;

        Context<float> ctx = fuse_and_encode<float>(P, st.seq, st.z, st.flags);
        Context<float> ctx_u;
        if (needs_uncond) ctx_u = fuse_and_encode<float>(P, all_masked_seq, st.z, st.flags);

        // sequence track
        const std::vector<int> ms = st.masked_seq();
        if (k > 0 && !ms.empty()) {
            std::vector<int> sampled(ms.size());
            std::vector<double> scores(ms.size());
            for (size_t mi = 0; mi < ms.size(); ++mi) {
                const int i = ms[mi];
                auto logits = categorical_head<float>(P, ctx.row(i, H));
                Rng cat_rng = derive_rng(opts.seed, Stream::SampleCategorical,
                                         static_cast<uint64_t>(t), static_cast<uint64_t>(i));
                int tok = sample_sequence_token(logits, opts.tau_s, cat_rng);
                if (opts.anti_repeat >= 2) {
                    Rng ar_rng = derive_rng(opts.seed, Stream::SampleAntiRepeat,
                                            static_cast<uint64_t>(t), static_cast<uint64_t>(i));
                    tok = apply_anti_repeat(st.seq, st.mask_id, i, tok, logits, opts.tau_s,
                                            opts.anti_repeat, ar_rng);
                }
                sampled[mi] = tok;
                scores[mi] = adjusted_probs(logits, opts.tau_s)[static_cast<size_t>(tok)];
            }
            Rng sel_rng = derive_rng(opts.seed, Stream::SampleSelectSeq, static_cast<uint64_t>(t));
            const std::vector<int> picked = select_unmask(opts.unmask, scores, ms, k, sel_rng);
            for (int i : picked) {
                const size_t mi = static_cast<size_t>(
                    std::lower_bound(ms.begin(), ms.end(), i) - ms.begin());
                st.seq[static_cast<size_t>(i)] = sampled[mi];
                trace.seq_unmasked.push_back(i);
            }
        }

        // structure track: regenerate every masked token, keep k of them
        const std::vector<int> mz = st.masked_struct();
        if (k > 0 && !mz.empty()) {
            ChainRunner runner(P, sched, opts.tau_z, omega, static_cast<int>(mz.size()));
            for (int i : mz) {
                runner.ctx.push_back(ctx.h.data() + static_cast<size_t>(i) * static_cast<size_t>(H));
                if (needs_uncond)
                    runner.ctx_uncond.push_back(ctx_u.h.data() +
                                                static_cast<size_t>(i) * static_cast<size_t>(H));
                runner.init_rng.push_back(derive_rng(opts.seed, Stream::SampleInitNoise,
                                                     static_cast<uint64_t>(t),
                                                     static_cast<uint64_t>(i)));
                runner.step_rng.push_back(derive_rng(salted, Stream::SampleStepNoise,
                                                     static_cast<uint64_t>(t),
                                                     static_cast<uint64_t>(i)));
            }
            runner.run();
            Rng sel_rng = derive_rng(opts.seed, Stream::SampleSelectStruct, static_cast<uint64_t>(t));
            const std::vector<int> picked =
                select_unmask(UnmaskStrategy::Random, {}, mz, k, sel_rng);
            for (int i : picked) {
                const size_t mi = static_cast<size_t>(
                    std::lower_bound(mz.begin(), mz.end(), i) - mz.begin());
                std::copy(runner.z.data() + mi * static_cast<size_t>(D),
                          runner.z.data() + (mi + 1) * static_cast<size_t>(D),
                          st.z.data() + static_cast<size_t>(i) * static_cast<size_t>(D));
                st.flags[static_cast<size_t>(i)] = 0;
                trace.struct_unmasked.push_back(i);
            }
        }
        if (opts.record_trace) res.trace.push_back(std::move(trace));
    }

    for (int i = 0; i < L; ++i) {
        if (st.seq[static_cast<size_t>(i)] == st.mask_id || st.flags[static_cast<size_t>(i)])
            throw std::logic_error("generation did not complete: masked positions remain");
    }
    res.seq = std::move(st.seq);
    res.struct_tokens = std::move(st.z);
    invert_scale_inplace(scaler, res.struct_tokens);
    return res;
}

} // namespace

GenerationResult cogenerate(const ModelParams<float>& params, const TokenScaler& scaler,
                            const SampleOptions& opts) {
    if (opts.mode != SampleMode::CoGen)
        throw std::invalid_argument("cogenerate: options are for a different mode");
    opts.validate(params.cfg);
    const int L = opts.length;
    TrackState st;
    st.L = L;
    st.D = params.cfg.struct_spec.dim;
    st.mask_id = params.cfg.vocab.mask_id();
    st.seq.assign(static_cast<size_t>(L), st.mask_id);
    st.z.assign(static_cast<size_t>(L) * static_cast<size_t>(st.D), 0.0f);
    st.flags.assign(static_cast<size_t>(L), 1);
    const int T = opts.T_lm > 0 ? opts.T_lm : L;
    return run_cogen_loop(params, scaler, opts, std::move(st),
                          std::vector<uint8_t>(static_cast<size_t>(L), 0), T);
}

GenerationResult scaffold(const ModelParams<float>& params, const TokenScaler& scaler,
                          const SampleOptions& opts) {
    if (opts.mode != SampleMode::Scaffold)
        throw std::invalid_argument("scaffold: options are for a different mode");
    opts.validate(params.cfg);
    const MotifSpec& motif = *opts.motif;
    const int L = opts.length;
    const int D = params.cfg.struct_spec.dim;
    const int l = static_cast<int>(motif.positions.size());

    TrackState st;
    st.L = L;
    st.D = D;
    st.mask_id = params.cfg.vocab.mask_id();
    st.seq.assign(static_cast<size_t>(L), st.mask_id);
    st.z.assign(static_cast<size_t>(L) * static_cast<size_t>(D), 0.0f);
    st.flags.assign(static_cast<size_t>(L), 1);

    std::vector<float> motif_scaled = apply_scale(scaler, motif.struct_tokens);
    std::vector<uint8_t> frozen(static_cast<size_t>(L), 0);
    for (int m = 0; m < l; ++m) {
        const int p = motif.positions[static_cast<size_t>(m)];
        st.seq[static_cast<size_t>(p)] = motif.seq[static_cast<size_t>(m)];
        std::copy(motif_scaled.begin() + static_cast<size_t>(m) * static_cast<size_t>(D),
                  motif_scaled.begin() + static_cast<size_t>(m + 1) * static_cast<size_t>(D),
                  st.z.begin() + static_cast<size_t>(p) * static_cast<size_t>(D));
        st.flags[static_cast<size_t>(p)] = 0;
        if (opts.maintain_motif) frozen[static_cast<size_t>(p)] = 1;
    }

    GenerationResult res;
    if (l == L) {
        // the motif is the whole protein: zero sampling steps
        res.length = L;
        res.dim = D;
        res.seq = st.seq;
        res.struct_tokens = st.z;
        invert_scale_inplace(scaler, res.struct_tokens);
    } else {
        // default step count: L - l when maintaining the motif, L otherwise
        const int T = opts.T_lm > 0 ? opts.T_lm : (opts.maintain_motif ? L - l : L);
        res = run_cogen_loop(params, scaler, opts, std::move(st), frozen, T);
    }

    if (opts.maintain_motif) {
        // emit the caller's motif values verbatim on both tracks
        for (int m = 0; m < l; ++m) {
            const int p = motif.positions[static_cast<size_t>(m)];
            res.seq[static_cast<size_t>(p)] = motif.seq[static_cast<size_t>(m)];
            std::copy(motif.struct_tokens.begin() + static_cast<size_t>(m) * static_cast<size_t>(D),
                      motif.struct_tokens.begin() + static_cast<size_t>(m + 1) * static_cast<size_t>(D),
                      res.struct_tokens.begin() + static_cast<size_t>(p) * static_cast<size_t>(D));
        }
    }
    return res;
}

std::vector<float> fold(const ModelParams<float>& params, const TokenScaler& scaler,
                        std::span<const int> seq, const SampleOptions& opts) {
    if (opts.mode != SampleMode::Fold)
        throw std::invalid_argument("fold: options are for a different mode");
    const int L = static_cast<int>(seq.size());
    {
        SampleOptions check = opts;
        check.length = L;
        check.validate(params.cfg);
    }
    for (int s : seq)
        if (s < 0 || s >= params.cfg.vocab.size)
            throw std::invalid_argument("fold: input sequence must be complete (no masks)");

    const int D = params.cfg.struct_spec.dim;
    const int H = params.cfg.d_hidden;
    const double omega = opts.cfg_scale;
    const bool needs_uncond = (omega != 1.0) || opts.cfg_force_uncond;
    const DdpmSchedule sched = make_ddpm_schedule(opts.T_prime, opts.beta_start, opts.beta_end);
    const uint64_t salted = opts.seed ^ (opts.step_noise_salt * 0x9e3779b97f4a7c15ull);

    std::vector<float> z(static_cast<size_t>(L) * static_cast<size_t>(D), 0.0f);
    std::vector<uint8_t> flags(static_cast<size_t>(L), 1);
    Context<float> ctx = fuse_and_encode<float>(params, seq, z, flags);
    Context<float> ctx_u;
    if (needs_uncond) {
        const std::vector<int> all_masked(static_cast<size_t>(L), params.cfg.vocab.mask_id());
        ctx_u = fuse_and_encode<float>(params, all_masked, z, flags);
    }

    ChainRunner runner(params, sched, opts.tau_z, omega, L);
    for (int i = 0; i < L; ++i) {
        runner.ctx.push_back(ctx.h.data() + static_cast<size_t>(i) * static_cast<size_t>(H));
        if (needs_uncond)
            runner.ctx_uncond.push_back(ctx_u.h.data() + static_cast<size_t>(i) * static_cast<size_t>(H));
        runner.init_rng.push_back(derive_rng(opts.seed, Stream::SampleInitNoise, 1,
                                             static_cast<uint64_t>(i)));
        runner.step_rng.push_back(derive_rng(salted, Stream::SampleStepNoise, 1,
                                             static_cast<uint64_t>(i)));
    }
    runner.run();
    invert_scale_inplace(scaler, runner.z);
    return std::move(runner.z);
}

std::vector<int> inverse_fold(const ModelParams<float>& params, const TokenScaler& scaler,
                              std::span<const float> struct_world, int length,
                              const SampleOptions& opts) {
    if (opts.mode != SampleMode::InverseFold)
        throw std::invalid_argument("inverse_fold: options are for a different mode");
    const int L = length;
    {
        SampleOptions check = opts;
        check.length = L;
        check.validate(params.cfg);
    }
    const int D = params.cfg.struct_spec.dim;
    if (struct_world.size() != static_cast<size_t>(L) * static_cast<size_t>(D))
        throw std::invalid_argument("inverse_fold: structure track has wrong size");

    const int H = params.cfg.d_hidden;
    const int mask_id = params.cfg.vocab.mask_id();
    std::vector<float> z = apply_scale(scaler, struct_world);
    const std::vector<uint8_t> flags(static_cast<size_t>(L), 0);
    std::vector<int> seq(static_cast<size_t>(L), mask_id);

    const int T = opts.T_lm > 0 ? opts.T_lm : L;
    const std::vector<int> ks = unmask_schedule(L, T);

    for (int s = 0; s < T; ++s) {
        const int t = T - s;
        const int k = ks[static_cast<size_t>(s)];
        if (k == 0) continue;
        std::vector<int> ms;
        for (int i = 0; i < L; ++i)
            if (seq[static_cast<size_t>(i)] == mask_id) ms.push_back(i);
        if (ms.empty()) break;

        Context<float> ctx = fuse_and_encode<float>(params, seq, z, flags);
        std::vector<int> sampled(ms.size());
        std::vector<double> scores(ms.size());
        for (size_t mi = 0; mi < ms.size(); ++mi) {
            const int i = ms[mi];
            auto logits = categorical_head<float>(params, ctx.row(i, H));
            Rng cat_rng = derive_rng(opts.seed, Stream::SampleCategorical, static_cast<uint64_t>(t),
                                     static_cast<uint64_t>(i));
            int tok = sample_sequence_token(logits, opts.tau_s, cat_rng);
            if (opts.anti_repeat >= 2) {
                Rng ar_rng = derive_rng(opts.seed, Stream::SampleAntiRepeat,
                                        static_cast<uint64_t>(t), static_cast<uint64_t>(i));
                tok = apply_anti_repeat(seq, mask_id, i, tok, logits, opts.tau_s, opts.anti_repeat,
                                        ar_rng);
            }
            sampled[mi] = tok;
            scores[mi] = adjusted_probs(logits, opts.tau_s)[static_cast<size_t>(tok)];
        }
        Rng sel_rng = derive_rng(opts.seed, Stream::SampleSelectSeq, static_cast<uint64_t>(t));
        for (int i : select_unmask(opts.unmask, scores, ms, k, sel_rng)) {
            const size_t mi = static_cast<size_t>(std::lower_bound(ms.begin(), ms.end(), i) -
                                                  ms.begin());
            seq[static_cast<size_t>(i)] = sampled[mi];
        }
    }
    for (int v : seq)
        if (v == mask_id) throw std::logic_error("inverse_fold did not complete");
    return seq;
}

} // namespace hdiff
