#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hdiff/rng.hpp"
#include "hdiff/training.hpp"

using namespace hdiff;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_hidden = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_len = 16;
    cfg.vocab.size = 8;
    cfg.struct_spec.dim = 3;
    cfg.denoiser_hidden = 12;
    cfg.denoiser_layers = 2;
    cfg.time_embed_dim = 8;
    cfg.ffn_mult = 2;
    return cfg;
}

BatchSampleT<double> masked_sample(int L, int V, int mask_id, int t_s, uint64_t seed) {
    Rng rng(seed);
    BatchSampleT<double> s;
    s.length = L;
    s.t_s = t_s;
    s.t_z = 1;
    s.struct_loss = false;
    for (int i = 0; i < L; ++i) {
        s.seq_target.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(V))));
        s.seq_in.push_back(i % 2 == 0 ? mask_id : s.seq_target.back());
        s.struct_mask.push_back(0);
        for (int j = 0; j < 3; ++j) s.struct_target.push_back(rng.gaussian());
    }
    s.struct_in = s.struct_target;
    return s;
}

} // namespace

TEST_CASE("loss_seq closed form with uniform logits") {
    const int V = 8, L = 10, T = 100;
    for (int t_s : {1, 25, 100}) {
        auto s = masked_sample(L, V, V, t_s, 5);
        int masked = 0;
        for (int v : s.seq_in) masked += (v == V);
        std::vector<std::vector<double>> logits{std::vector<double>(L * V, 0.7)};
        const std::vector<BatchSampleT<double>> batch{s};
        const double got = loss_seq<double>(logits, batch, V, V, T);
        const double lam = 1.0 - (t_s - 1) / static_cast<double>(T);
        CHECK(got == doctest::Approx(lam * masked * std::log(8.0)).epsilon(1e-12));
    }
}

TEST_CASE("loss_seq tends to zero as the correct logit margin grows") {
    const int V = 8, L = 6;
    auto s = masked_sample(L, V, V, 1, 9);
    std::vector<double> logits(L * V, 0.0);
    for (int i = 0; i < L; ++i) logits[i * V + s.seq_target[static_cast<size_t>(i)]] = 50.0;
    const std::vector<std::vector<double>> lg{logits};
    const std::vector<BatchSampleT<double>> batch{s};
    CHECK(loss_seq<double>(lg, batch, V, V, 100) < 1e-12);
}

TEST_CASE("loss_seq matches an independent scalar loop on random batches") {
    const int V = 8, T = 64;
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<BatchSampleT<double>> batch;
        std::vector<std::vector<double>> logits;
        const int B = 3;
        for (int b = 0; b < B; ++b) {
            const int L = 4 + static_cast<int>(rng.uniform_int(8));
            batch.push_back(masked_sample(L, V, V, 1 + static_cast<int>(rng.uniform_int(T)),
                                          rng.next_u64()));
            std::vector<double> lg(static_cast<size_t>(L) * V);
            for (double& v : lg) v = 3.0 * rng.gaussian();
            logits.push_back(std::move(lg));
        }
        // scalar-loop oracle: no shared code with the implementation
        double expect = 0.0;
        for (int b = 0; b < B; ++b) {
            const auto& s = batch[static_cast<size_t>(b)];
            double nll = 0.0;
            for (int i = 0; i < s.length; ++i) {
                if (s.seq_in[static_cast<size_t>(i)] != V) continue;
                double z = 0.0;
                for (int v = 0; v < V; ++v)
                    z += std::exp(logits[static_cast<size_t>(b)][static_cast<size_t>(i * V + v)]);
                const double p =
                    std::exp(logits[static_cast<size_t>(b)]
                                   [static_cast<size_t>(i * V + s.seq_target[static_cast<size_t>(i)])]) /
                    z;
                nll += -std::log(p);
            }
            expect += (1.0 - (s.t_s - 1) / static_cast<double>(T)) * nll;
        }
        expect /= B;
        CHECK(loss_seq<double>(logits, batch, V, V, T) == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("lambda weighting: t_s = T scales the loss by exactly 1/T vs t_s = 1") {
    const int V = 8, T = 50, L = 9;
    auto s1 = masked_sample(L, V, V, 1, 77);
    auto sT = s1;
    sT.t_s = T;
    std::vector<double> lg(static_cast<size_t>(L) * V);
    Rng rng(3);
    for (double& v : lg) v = rng.gaussian();
    const std::vector<std::vector<double>> logits{lg};
    const double a = loss_seq<double>(logits, std::vector<BatchSampleT<double>>{s1}, V, V, T);
    const double b = loss_seq<double>(logits, std::vector<BatchSampleT<double>>{sT}, V, V, T);
    CHECK(b == doctest::Approx(a / T).epsilon(1e-12));
}

TEST_CASE("loss_struct: zero draws with a zeroed denoiser give zero loss") {
    ModelConfig cfg = tiny_config();
    auto p = init_params<double>(cfg, 3);
    // zero the whole denoiser: eps_hat is identically zero
    for (const TensorInfo& t : p.layout.tensors)
        if (t.name.rfind("denoiser.", 0) == 0)
            for (auto& v : p.tensor(t)) v = 0.0;

    const DdpmSchedule sched = make_ddpm_schedule(10, 1e-4, 0.02);
    BatchSampleT<double> s;
    s.length = 4;
    s.t_s = 1;
    s.t_z = 5;
    s.seq_loss = false;
    for (int i = 0; i < 4; ++i) {
        s.seq_in.push_back(0);
        s.seq_target.push_back(0);
        s.struct_mask.push_back(1);
        for (int j = 0; j < 3; ++j) s.struct_target.push_back(0.5);
    }
    s.struct_in = s.struct_target;
    s.t_prime.assign(4, 3);
    s.eps.assign(12, 0.0);  // eps = 0 and eps_hat = 0: exact prediction
    CHECK(loss_struct<double>(p, std::vector<BatchSampleT<double>>{s}, sched) == 0.0);
}

TEST_CASE("loss_struct: zero denoiser on gaussian draws averages d_struct per position") {
    ModelConfig cfg = tiny_config();
    auto p = init_params<double>(cfg, 3);
    for (const TensorInfo& t : p.layout.tensors)
        if (t.name.rfind("denoiser.", 0) == 0)
            for (auto& v : p.tensor(t)) v = 0.0;

    const DdpmSchedule sched = make_ddpm_schedule(10, 1e-4, 0.02);
    Rng rng(8);
    double total = 0.0;
    int positions = 0;
    for (int trial = 0; trial < 300; ++trial) {
        BatchSampleT<double> s;
        s.length = 8;
        s.t_s = 1;
        s.t_z = 5;
        s.seq_loss = false;
        for (int i = 0; i < 8; ++i) {
            s.seq_in.push_back(static_cast<int>(rng.uniform_int(8)));
            s.seq_target.push_back(s.seq_in.back());
            s.struct_mask.push_back(1);
            for (int j = 0; j < 3; ++j) s.struct_target.push_back(rng.gaussian());
        }
        s.struct_in = s.struct_target;
        s.t_prime.assign(8, 0);
        for (auto& t : s.t_prime) t = 1 + static_cast<int>(rng.uniform_int(10));
        for (int k = 0; k < 24; ++k) s.eps.push_back(rng.gaussian());
        total += loss_struct<double>(p, std::vector<BatchSampleT<double>>{s}, sched);
        positions += 8;
    }
    // E||eps||^2 = d_struct per masked position
    CHECK(total / positions == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("loss_struct matches an independent scalar loop using the public head") {
    ModelConfig cfg = tiny_config();
    const auto p = init_params<double>(cfg, 31);
    const DdpmSchedule sched = make_ddpm_schedule(12, 1e-4, 0.02);
    Rng rng(5);

    std::vector<BatchSampleT<double>> batch;
    for (int b = 0; b < 3; ++b) {
        BatchSampleT<double> s;
        s.length = 6;
        s.t_s = 1;
        s.t_z = 4;
        for (int i = 0; i < 6; ++i) {
            s.seq_target.push_back(static_cast<int>(rng.uniform_int(8)));
            s.seq_in.push_back(i % 2 ? 8 : s.seq_target.back());
            s.struct_mask.push_back(i % 3 == 0 ? 1 : 0);
            for (int j = 0; j < 3; ++j) s.struct_target.push_back(rng.gaussian());
        }
        s.struct_in = s.struct_target;
        for (int i = 0; i < 6; ++i) {
            if (!s.struct_mask[static_cast<size_t>(i)]) continue;
            s.t_prime.push_back(1 + static_cast<int>(rng.uniform_int(12)));
            for (int j = 0; j < 3; ++j) s.eps.push_back(rng.gaussian());
        }
        batch.push_back(std::move(s));
    }

    double expect = 0.0;
    for (const auto& s : batch) {
        const auto ctx = fuse_and_encode<double>(p, s.seq_in, s.struct_in, s.struct_mask);
        int k = 0;
        double sq = 0.0;
        for (int i = 0; i < s.length; ++i) {
            if (!s.struct_mask[static_cast<size_t>(i)]) continue;
            const int tp = s.t_prime[static_cast<size_t>(k)];
            const double ab = sched.alpha_bar_at(tp);
            std::vector<double> zn(3);
            for (int j = 0; j < 3; ++j)
                zn[static_cast<size_t>(j)] =
                    std::sqrt(ab) * s.struct_target[static_cast<size_t>(i * 3 + j)] +
                    std::sqrt(1.0 - ab) * s.eps[static_cast<size_t>(k * 3 + j)];
            const auto eh = denoise_head<double>(p, zn, tp, ctx.row(i, 16));
            for (int j = 0; j < 3; ++j) {
                const double d = s.eps[static_cast<size_t>(k * 3 + j)] - eh[static_cast<size_t>(j)];
                sq += d * d;
            }
            ++k;
        }
        expect += sq;  // lambda(t_z) = 1
    }
    expect /= static_cast<double>(batch.size());
    CHECK(loss_struct<double>(p, batch, sched) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("total_loss composition and linearity") {
    CHECK(total_loss(1.0, 2.0, 0.2) == doctest::Approx(1.4).epsilon(1e-15));
    CHECK(total_loss(0.7, 0.0, 0.2) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(total_loss(2.0, 3.0, 0.5) + total_loss(1.0, 1.0, 0.5) ==
          doctest::Approx(total_loss(3.0, 4.0, 0.5)).epsilon(1e-15));
    TrainConfig bad;
    bad.gamma = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("adamw single-parameter step matches the hand computation") {
    ModelConfig cfg = tiny_config();
    auto p = init_params<double>(cfg, 1);
    OptimizerStateT<double> st;
    st.m.assign(p.flat.size(), 0.0);
    st.v.assign(p.flat.size(), 0.0);
    st.step = 0;

    // probe one decayed weight
    const TensorInfo& t = p.layout.by_name("projector.w");
    const size_t idx = t.offset + 5;
    st.m[idx] = 0.03;
    st.v[idx] = 0.002;
    st.step = 7;
    const double p0 = p.flat[idx];
    const double g = 0.125;

    std::vector<double> grads(p.flat.size(), 0.0);
    grads[idx] = g;
    AdamHyper hy{0.9, 0.95, 1e-8, 0.01};
    adamw_step<double>(p, grads, st, 1e-3, hy);

    const double m = 0.9 * 0.03 + 0.1 * g;
    const double v = 0.95 * 0.002 + 0.05 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, 8));
    const double vh = v / (1.0 - std::pow(0.95, 8));
    const double expect = p0 - 1e-3 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * p0);
    CHECK(p.flat[idx] == doctest::Approx(expect).epsilon(1e-10));
    CHECK(st.m[idx] == doctest::Approx(m).epsilon(1e-12));
    CHECK(st.v[idx] == doctest::Approx(v).epsilon(1e-12));
    CHECK(st.step == 8);
}

TEST_CASE("adamw fixed points and weight decay") {
    ModelConfig cfg = tiny_config();
    auto p = init_params<double>(cfg, 2);
    const auto before = p.flat;
    OptimizerStateT<double> st;
    std::vector<double> zeros(p.flat.size(), 0.0);

    AdamHyper no_decay{0.9, 0.95, 1e-8, 0.0};
    adamw_step<double>(p, zeros, st, 1e-3, no_decay);
    CHECK(p.flat == before);

    // with decay, decayed tensors shrink by (1 - lr wd); norm params do not
    AdamHyper decay{0.9, 0.95, 1e-8, 0.01};
    adamw_step<double>(p, zeros, st, 1e-3, decay);
    const TensorInfo& w = p.layout.by_name("projector.w");
    for (size_t i = 0; i < w.size(); ++i)
        CHECK(p.flat[w.offset + i] ==
              doctest::Approx(before[w.offset + i] * (1.0 - 1e-3 * 0.01)).epsilon(1e-12));
    const TensorInfo& g = p.layout.by_name("layers.0.ln1.gain");
    for (size_t i = 0; i < g.size(); ++i) CHECK(p.flat[g.offset + i] == 1.0);

    std::vector<double> bad(p.flat.size(), 0.0);
    bad[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(adamw_step<double>(p, bad, st, 1e-3, decay), TrainingError);
}

TEST_CASE("lr program endpoints") {
    TrainConfig cfg;
    cfg.lr_floor = 1e-4;
    cfg.lr_peak = 1e-3;
    cfg.warmup_frac = 0.05;
    const int64_t total = 1000;
    CHECK(lr_at(0, total, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(50, total, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(1000, total, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(25, total, cfg) > 1e-4);
    CHECK(lr_at(25, total, cfg) < 1e-3);
    CHECK_THROWS_AS(lr_at(-1, total, cfg), std::invalid_argument);
}

TEST_CASE("assemble_sample respects mode semantics and draw shapes") {
    TrackPair tp(12, 3);
    Rng gen(4);
    for (int i = 0; i < 12; ++i) {
        tp.seq[static_cast<size_t>(i)] = static_cast<int>(gen.uniform_int(8));
        for (int j = 0; j < 3; ++j)
            tp.struct_row(i)[static_cast<size_t>(j)] = static_cast<float>(gen.gaussian());
    }
    Rng r1(1), r2(2), r3(3);
    // both tracks contribute loss on every sample; the masked-position
    // indicators alone pick the support
    const TaskMode seq_mode{TaskKind::SeqGen, 6, 12};
    const BatchSample a = assemble_sample(tp, seq_mode, 12, 10, 8, r1, r2, r3);
    CHECK(a.seq_loss);
    CHECK(a.struct_loss);
    int masked = 0;
    for (int v : a.seq_in) masked += (v == 8);
    CHECK(masked == 6);  // round(6/12 * 12)
    int str_masked = 0;
    for (uint8_t f : a.struct_mask) str_masked += f;
    CHECK(str_masked == 12);  // t_z = T
    CHECK(a.t_prime.size() == 12);

    const TaskMode str_mode{TaskKind::StructGen, 12, 4};
    const BatchSample b = assemble_sample(tp, str_mode, 12, 10, 8, r1, r2, r3);
    CHECK(b.seq_loss);
    CHECK(b.struct_loss);
    int bm = 0;
    for (uint8_t f : b.struct_mask) bm += f;
    CHECK(bm == 4);
    CHECK(b.t_prime.size() == 4);
    CHECK(b.eps.size() == 12);
    for (int t : b.t_prime) {
        CHECK(t >= 1);
        CHECK(t <= 10);
    }

    // draw boosting allocates extra draws only at fully visible windows and
    // keeps one entry per draw
    Rng r4(4), r5(5), r6(6);
    const BatchSample c = assemble_sample(tp, str_mode, 12, 10, 8, r4, r5, r6, 1, 5);
    REQUIRE(c.draw_counts.size() == 4);
    size_t total_draws = 0;
    for (int cc : c.draw_counts) {
        CHECK((cc == 1 || cc == 5));
        total_draws += static_cast<size_t>(cc);
    }
    CHECK(c.t_prime.size() == total_draws);
    CHECK(c.eps.size() == total_draws * 3);
    // t_s = T: every sequence token is masked, so no window is visible
    for (int cc : c.draw_counts) CHECK(cc == 1);
}

TEST_CASE("training is deterministic and short runs reduce the loss") {
    ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.T = 12;
    tcfg.T_prime = 10;
    tcfg.batch_size = 8;
    tcfg.steps = 100;
    tcfg.seed = 5;
    tcfg.log_every = 1000;
    tcfg.checkpoint_every = 1000;

    const ToyWorld world = gen_world(3, 8, 3, 0.1);
    const ToyDataset ds = make_dataset(world, 64, 6, 12, 2);
    const TokenScaler scaler = fit_scaler(ds.samples);

    const TrainResult r1 = train(tcfg, mcfg, ds, scaler);
    const TrainResult r2 = train(tcfg, mcfg, ds, scaler);
    CHECK(r1.params.flat == r2.params.flat);
    CHECK(r1.opt.m == r2.opt.m);
    CHECK(r1.final_loss < r1.first_loss);

    // the combined objective covers both tracks in every mix
    TrainConfig seq_only = tcfg;
    seq_only.steps = 10;
    seq_only.mix = {1.0, 0.0, 0.0};
    const TrainResult r3 = train(seq_only, mcfg, ds, scaler);
    CHECK(r3.struct_loss_batches == 10);
    CHECK(r3.seq_loss_batches == 10);
}
