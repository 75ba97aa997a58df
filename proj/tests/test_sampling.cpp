#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "hdiff/sampling.hpp"

using namespace hdiff;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_hidden = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_len = 32;
    cfg.vocab.size = 6;
    cfg.struct_spec.dim = 3;
    cfg.denoiser_hidden = 12;
    cfg.denoiser_layers = 2;
    cfg.time_embed_dim = 8;
    cfg.ffn_mult = 2;
    return cfg;
}

SampleOptions quick_cogen(int L, uint64_t seed) {
    SampleOptions o = SampleOptions::defaults_for(SampleMode::CoGen, L);
    o.T_prime = 8;
    o.seed = seed;
    return o;
}

} // namespace

TEST_CASE("cfg_combine identities and extrapolation") {
    const std::vector<float> u{0.1f, -0.4f};
    const std::vector<float> c{0.3f, 0.2f};
    CHECK(cfg_combine(u, c, 1.0) == c);
    CHECK(cfg_combine(u, c, 0.0) == u);
    const auto mixed = cfg_combine(std::vector<float>{0.1f}, std::vector<float>{0.3f}, 2.0);
    CHECK(mixed[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK_THROWS_AS(cfg_combine(u, std::vector<float>{0.0f}, 1.5), std::invalid_argument);
}

TEST_CASE("sample_sequence_token: argmax, uniformity, and temperature limit") {
    Rng rng(1);
    CHECK(sample_sequence_token(std::vector<float>{1.0f, 5.0f, 2.0f}, 0.0, rng) == 1);
    // lowest-index tie break
    CHECK(sample_sequence_token(std::vector<float>{3.0f, 3.0f, 1.0f}, 0.0, rng) == 0);

    const int V = 8, n = 100000;
    std::vector<float> random_logits(V);
    Rng gen(9);
    for (auto& v : random_logits) v = static_cast<float>(gen.gaussian());

    std::vector<int> counts_hot(V, 0), counts_flat(V, 0);
    const std::vector<float> flat(V, 0.37f);
    for (int i = 0; i < n; ++i) {
        ++counts_hot[static_cast<size_t>(sample_sequence_token(random_logits, 1e9, rng))];
        ++counts_flat[static_cast<size_t>(sample_sequence_token(flat, 1.0, rng))];
    }
    for (int v = 0; v < V; ++v) {
        CHECK(std::abs(counts_hot[static_cast<size_t>(v)] / double(n) - 1.0 / V) < 0.03);
        CHECK(std::abs(counts_flat[static_cast<size_t>(v)] / double(n) - 1.0 / V) < 0.03);
    }
}

TEST_CASE("select_unmask: exhaustion, top-k definition, and uniformity") {
    Rng rng(3);
    const std::vector<int> masked{2, 5, 7, 9};
    const std::vector<double> scores{0.1, 0.9, 0.4, 0.9};

    CHECK(select_unmask(UnmaskStrategy::TopK, scores, masked, 4, rng) == masked);
    CHECK(select_unmask(UnmaskStrategy::Random, {}, masked, 10, rng) == masked);

    // ties break toward the lower position index
    const auto top2 = select_unmask(UnmaskStrategy::TopK, scores, masked, 2, rng);
    CHECK(top2 == std::vector<int>{5, 9});
    const auto top3 = select_unmask(UnmaskStrategy::TopK, scores, masked, 3, rng);
    CHECK(top3 == std::vector<int>{5, 9, 7});

    std::vector<int> hits(10, 0);
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        Rng r = derive_rng(4, Stream::SampleSelectSeq, static_cast<uint64_t>(i));
        for (int pos : select_unmask(UnmaskStrategy::Random, {}, masked, 2, r))
            ++hits[static_cast<size_t>(pos)];
    }
    for (int pos : masked)
        CHECK(std::abs(hits[static_cast<size_t>(pos)] / double(trials) - 0.5) < 0.03);
}

TEST_CASE("unmask_schedule is exact for every (n, steps) pair") {
    for (int n = 0; n <= 128; ++n) {
        for (int steps = 1; steps <= std::max(1, std::min(n + 4, 128)); ++steps) {
            const std::vector<int> ks = unmask_schedule(n, steps);
            int total = 0;
            int remaining = n;
            for (int k : ks) {
                CHECK(k >= 0);
                CHECK(k <= remaining);
                remaining -= k;
                total += k;
            }
            CHECK(total == n);
        }
    }
    // k = floor(L/T) = 1 when L = T
    const auto ones = unmask_schedule(10, 10);
    for (int k : ones) CHECK(k == 1);
}

TEST_CASE("apply_anti_repeat pass-through and exclusion guarantee") {
    Rng rng(5);
    const std::vector<float> logits{0.0f, 0.0f, 4.0f, 0.0f};
    // no adjacent run: candidate unchanged
    const std::vector<int> open{4, 2, 9, 9, 1};  // mask id 9
    CHECK(apply_anti_repeat(open, 9, 2, 2, logits, 1.0, 2, rng) == 2);

    // committing 2 at position 2 would make a run of 3 > r = 2
    const std::vector<int> runny{2, 2, 9, 0, 1};
    for (int trial = 0; trial < 50; ++trial)
        CHECK(apply_anti_repeat(runny, 9, 2, 2, logits, 1.0, 2, rng) != 2);

    CHECK_THROWS_AS(apply_anti_repeat(open, 9, 2, 2, logits, 1.0, 1, rng), std::invalid_argument);
}

TEST_CASE("ddpm_generate_token: tau_z = 0 ignores the step-noise stream") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 10);
    const DdpmSchedule sched = make_ddpm_schedule(10, 1e-4, 0.02);
    std::vector<float> c(16);
    Rng gen(2);
    for (auto& v : c) v = static_cast<float>(gen.gaussian());

    Rng init1 = derive_rng(7, Stream::SampleInitNoise, 1, 0);
    Rng step1 = derive_rng(7, Stream::SampleStepNoise, 1, 0);
    const auto z1 = ddpm_generate_token(p, c, nullptr, sched, 0.0, 1.0, init1, step1);

    Rng init2 = derive_rng(7, Stream::SampleInitNoise, 1, 0);
    Rng step2 = derive_rng(12345, Stream::SampleStepNoise, 1, 0);  // different stream
    const auto z2 = ddpm_generate_token(p, c, nullptr, sched, 0.0, 1.0, init2, step2);
    CHECK(z1 == z2);

    // with tau_z > 0 the step stream matters
    Rng init3 = derive_rng(7, Stream::SampleInitNoise, 1, 0);
    Rng step3 = derive_rng(7, Stream::SampleStepNoise, 1, 0);
    const auto z3 = ddpm_generate_token(p, c, nullptr, sched, 0.5, 1.0, init3, step3);
    Rng init4 = derive_rng(7, Stream::SampleInitNoise, 1, 0);
    Rng step4 = derive_rng(12345, Stream::SampleStepNoise, 1, 0);
    const auto z4 = ddpm_generate_token(p, c, nullptr, sched, 0.5, 1.0, init4, step4);
    CHECK(z3 != z4);
}

TEST_CASE("ddpm_generate_token: omega = 1 equals the guidance-free path bitwise") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 11);
    const DdpmSchedule sched = make_ddpm_schedule(10, 1e-4, 0.02);
    Rng gen(6);
    std::vector<float> c(16), cu(16);
    for (auto& v : c) v = static_cast<float>(gen.gaussian());
    for (auto& v : cu) v = static_cast<float>(gen.gaussian());

    Rng i1 = derive_rng(3, Stream::SampleInitNoise, 2, 4);
    Rng s1 = derive_rng(3, Stream::SampleStepNoise, 2, 4);
    const auto with_uncond = ddpm_generate_token(p, c, cu.data(), sched, 0.35, 1.0, i1, s1);

    Rng i2 = derive_rng(3, Stream::SampleInitNoise, 2, 4);
    Rng s2 = derive_rng(3, Stream::SampleStepNoise, 2, 4);
    const auto without = ddpm_generate_token(p, c, nullptr, sched, 0.35, 1.0, i2, s2);
    CHECK(with_uncond == without);

    CHECK_THROWS_AS(ddpm_generate_token(p, c, nullptr, sched, 0.35, 2.0, i1, s1),
                    std::invalid_argument);
}

TEST_CASE("cogenerate completes with no masks and follows the k schedule") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 20);
    const TokenScaler scaler = TokenScaler::identity();

    for (const auto& [L, T] : std::vector<std::pair<int, int>>{{1, 1}, {5, 3}, {10, 10}, {12, 5}}) {
        SampleOptions o = quick_cogen(L, 42);
        o.T_lm = T;
        o.record_trace = true;
        const GenerationResult g = cogenerate(p, scaler, o);
        CHECK(static_cast<int>(g.seq.size()) == L);
        for (int v : g.seq) {
            CHECK(v >= 0);
            CHECK(v < cfg.vocab.size);  // never the mask id
        }
        CHECK(g.struct_tokens.size() == static_cast<size_t>(L) * 3);

        // monotone unmasking: no position is committed twice
        std::set<int> seen_seq, seen_struct;
        for (const StepTrace& st : g.trace) {
            for (int i : st.seq_unmasked) CHECK(seen_seq.insert(i).second);
            for (int i : st.struct_unmasked) CHECK(seen_struct.insert(i).second);
        }
        CHECK(static_cast<int>(seen_seq.size()) == L);
        CHECK(static_cast<int>(seen_struct.size()) == L);
        if (L == 10 && T == 10) {
            for (const StepTrace& st : g.trace) {
                CHECK(st.seq_unmasked.size() == 1);
                CHECK(st.struct_unmasked.size() == 1);
            }
        }
    }
}

TEST_CASE("cogenerate is bit-reproducible and seed-sensitive") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 20);
    const TokenScaler scaler{2.5, 0.0, 0.0};
    const SampleOptions o = quick_cogen(9, 77);
    const GenerationResult a = cogenerate(p, scaler, o);
    const GenerationResult b = cogenerate(p, scaler, o);
    CHECK(a.seq == b.seq);
    CHECK(a.struct_tokens == b.struct_tokens);

    SampleOptions o2 = o;
    o2.seed = 78;
    const GenerationResult c = cogenerate(p, scaler, o2);
    CHECK(a.seq != c.seq);
}

TEST_CASE("cogenerate: omega = 1 with a forced unconditional pass is bit-identical") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 23);
    const TokenScaler scaler = TokenScaler::identity();

    SampleOptions base = quick_cogen(8, 5);
    base.cfg_scale = 1.0;
    const GenerationResult plain = cogenerate(p, scaler, base);

    SampleOptions forced = base;
    forced.cfg_force_uncond = true;  // evaluates the unconditional branch every step
    const GenerationResult with_branch = cogenerate(p, scaler, forced);
    CHECK(plain.seq == with_branch.seq);
    CHECK(plain.struct_tokens == with_branch.struct_tokens);

    // omega != 1 actually changes the outcome
    SampleOptions guided = base;
    guided.cfg_scale = 2.0;
    const GenerationResult g = cogenerate(p, scaler, guided);
    CHECK(g.struct_tokens != plain.struct_tokens);
}

TEST_CASE("cogenerate: tau_z = 0 ignores the step-noise salt, tau_z > 0 does not") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 29);
    const TokenScaler scaler = TokenScaler::identity();

    SampleOptions o = quick_cogen(7, 13);
    o.tau_z = 0.0;
    const GenerationResult a = cogenerate(p, scaler, o);
    SampleOptions salted = o;
    salted.step_noise_salt = 999;
    const GenerationResult b = cogenerate(p, scaler, salted);
    CHECK(a.seq == b.seq);
    CHECK(a.struct_tokens == b.struct_tokens);

    SampleOptions noisy = o;
    noisy.tau_z = 0.5;
    const GenerationResult c = cogenerate(p, scaler, noisy);
    SampleOptions noisy_salted = noisy;
    noisy_salted.step_noise_salt = 999;
    const GenerationResult d = cogenerate(p, scaler, noisy_salted);
    CHECK(c.struct_tokens != d.struct_tokens);
}

TEST_CASE("scaffold preserves the motif bit-exactly on both tracks") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 31);
    const TokenScaler scaler{3.7, 0.0, 0.0};

    Rng gen(15);
    for (int trial = 0; trial < 20; ++trial) {
        const int L = 6 + static_cast<int>(gen.uniform_int(10));
        const int l = 1 + static_cast<int>(gen.uniform_int(static_cast<uint64_t>(L - 1)));
        MotifSpec motif;
        {
            Rng pick(trial);
            auto pos = pick.sample_without_replacement(L, l);
            std::sort(pos.begin(), pos.end());
            motif.positions = pos;
        }
        for (int m = 0; m < l; ++m) {
            motif.seq.push_back(static_cast<int>(gen.uniform_int(6)));
            for (int j = 0; j < 3; ++j)
                motif.struct_tokens.push_back(static_cast<float>(gen.gaussian()));
        }
        SampleOptions o = SampleOptions::defaults_for(SampleMode::Scaffold, L);
        o.T_prime = 6;
        o.seed = 1000 + static_cast<uint64_t>(trial);
        o.motif = motif;
        const GenerationResult g = scaffold(p, scaler, o);
        for (int m = 0; m < l; ++m) {
            const int pos = motif.positions[static_cast<size_t>(m)];
            CHECK(g.seq[static_cast<size_t>(pos)] == motif.seq[static_cast<size_t>(m)]);
            for (int j = 0; j < 3; ++j)
                CHECK(g.struct_tokens[static_cast<size_t>(pos * 3 + j)] ==
                      motif.struct_tokens[static_cast<size_t>(m * 3 + j)]);
        }
        for (int v : g.seq) CHECK(v < 6);
    }
}

TEST_CASE("scaffold with a whole-protein motif returns the motif itself") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 33);
    const TokenScaler scaler{1.5, 0.0, 0.0};
    const int L = 5;
    MotifSpec motif;
    Rng gen(8);
    for (int i = 0; i < L; ++i) {
        motif.positions.push_back(i);
        motif.seq.push_back(static_cast<int>(gen.uniform_int(6)));
        for (int j = 0; j < 3; ++j) motif.struct_tokens.push_back(static_cast<float>(gen.gaussian()));
    }
    SampleOptions o = SampleOptions::defaults_for(SampleMode::Scaffold, L);
    o.motif = motif;
    const GenerationResult g = scaffold(p, scaler, o);
    CHECK(g.seq == motif.seq);
    CHECK(g.struct_tokens == motif.struct_tokens);
}

TEST_CASE("scaffold rejects malformed motifs") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 34);
    const TokenScaler scaler = TokenScaler::identity();
    SampleOptions o = SampleOptions::defaults_for(SampleMode::Scaffold, 8);
    CHECK_THROWS_AS(scaffold(p, scaler, o), std::invalid_argument);  // no motif

    MotifSpec bad;
    bad.positions = {3, 3};
    bad.seq = {1, 2};
    bad.struct_tokens.assign(6, 0.0f);
    o.motif = bad;
    CHECK_THROWS_AS(scaffold(p, scaler, o), std::invalid_argument);  // overlapping

    bad.positions = {3, 9};
    o.motif = bad;
    CHECK_THROWS_AS(scaffold(p, scaler, o), std::invalid_argument);  // out of range
}

TEST_CASE("fold is deterministic and validates its input") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 35);
    const TokenScaler scaler{2.0, 0.0, 0.0};
    const std::vector<int> seq{0, 1, 2, 3, 4, 5, 0, 1};
    SampleOptions o = SampleOptions::defaults_for(SampleMode::Fold, 8);
    o.T_prime = 10;
    o.seed = 3;
    const auto z1 = fold(p, scaler, seq, o);
    const auto z2 = fold(p, scaler, seq, o);
    CHECK(z1 == z2);
    CHECK(z1.size() == 8 * 3);

    std::vector<int> masked = seq;
    masked[3] = cfg.vocab.mask_id();
    CHECK_THROWS_AS(fold(p, scaler, masked, o), std::invalid_argument);
}

TEST_CASE("inverse_fold completes, is deterministic, and validates input size") {
    const ModelConfig cfg = small_config();
    const auto p = init_params<float>(cfg, 36);
    const TokenScaler scaler{2.0, 0.0, 0.0};
    const int L = 9;
    std::vector<float> z(static_cast<size_t>(L) * 3);
    Rng gen(4);
    for (auto& v : z) v = static_cast<float>(gen.gaussian());

    SampleOptions o = SampleOptions::defaults_for(SampleMode::InverseFold, L);
    o.seed = 21;
    const auto s1 = inverse_fold(p, scaler, z, L, o);
    const auto s2 = inverse_fold(p, scaler, z, L, o);
    CHECK(s1 == s2);
    CHECK(static_cast<int>(s1.size()) == L);
    for (int v : s1) {
        CHECK(v >= 0);
        CHECK(v < 6);
    }
    CHECK_THROWS_AS(inverse_fold(p, scaler, z, L + 1, o), std::invalid_argument);
}

TEST_CASE("option validation catches bad settings") {
    const ModelConfig cfg = small_config();
    SampleOptions o = SampleOptions::defaults_for(SampleMode::CoGen, 8);
    o.tau_s = -0.1;
    CHECK_THROWS_AS(o.validate(cfg), std::invalid_argument);
    o = SampleOptions::defaults_for(SampleMode::CoGen, 8);
    o.anti_repeat = 1;
    CHECK_THROWS_AS(o.validate(cfg), std::invalid_argument);
    o = SampleOptions::defaults_for(SampleMode::CoGen, 100);
    CHECK_THROWS_AS(o.validate(cfg), std::invalid_argument);  // beyond max_len
}

TEST_CASE("per-mode sampling defaults are the shipped settings") {
    const SampleOptions co = SampleOptions::defaults_for(SampleMode::CoGen, 16);
    CHECK(co.tau_s == 1.0);
    CHECK(co.tau_z == 0.35);
    CHECK(co.cfg_scale == 2.0);
    CHECK(co.T_prime == 100);
    CHECK(co.T_lm == 0);  // resolves to L
    CHECK(co.unmask == UnmaskStrategy::TopK);

    const SampleOptions sc = SampleOptions::defaults_for(SampleMode::Scaffold, 16);
    CHECK(sc.tau_z == 0.1);
    CHECK(sc.cfg_scale == 1.0);
    CHECK(sc.maintain_motif);

    const SampleOptions fo = SampleOptions::defaults_for(SampleMode::Fold, 16);
    CHECK(fo.tau_z == 0.0);
    CHECK(fo.cfg_scale == 1.0);
    CHECK(fo.T_lm == 1);

    const SampleOptions iv = SampleOptions::defaults_for(SampleMode::InverseFold, 16);
    CHECK(iv.tau_s == 0.1);
    CHECK(iv.cfg_scale == 1.0);
}
