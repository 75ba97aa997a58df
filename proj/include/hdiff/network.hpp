#pragma once

// The trainable model: input fusion of the two tracks, a small pre-norm
// bidirectional transformer backbone, the categorical head over the discrete
// vocabulary, and the noise-prediction head for continuous tokens.
//
// Everything is templated on the scalar type: float for training and
// sampling, double for finite-difference gradient checks. Parameters live in
// one flat buffer with a canonical tensor order (the checkpoint payload order)
// and gradients are computed by reverse-mode accumulation through the fixed
// operation sequence, with every intermediate activation cached per sample.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdiff/rng.hpp"
#include "hdiff/schedules.hpp"
#include "hdiff/token_space.hpp"

namespace hdiff {

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int d_hidden = 64;
    int n_layers = 2;
    int n_heads = 4;
    int max_len = 128;
    Vocabulary vocab{};
    ContinuousTokenSpec struct_spec{};
    int denoiser_hidden = 128;
    int denoiser_layers = 3;   // affine maps; activation after all but the last
    int time_embed_dim = 32;
    int ffn_mult = 4;

    int head_dim() const { return d_hidden / n_heads; }

    void validate() const {
        vocab.validate();
        struct_spec.validate();
        if (d_hidden < 1) throw std::invalid_argument("ModelConfig: d_hidden must be >= 1");
        if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
        if (n_heads < 1) throw std::invalid_argument("ModelConfig: n_heads must be >= 1");
        if (d_hidden % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_hidden must be divisible by n_heads");
        if (max_len < 1) throw std::invalid_argument("ModelConfig: max_len must be >= 1");
        if (denoiser_hidden < 1) throw std::invalid_argument("ModelConfig: denoiser_hidden must be >= 1");
        if (denoiser_layers < 1) throw std::invalid_argument("ModelConfig: denoiser_layers must be >= 1");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
            throw std::invalid_argument("ModelConfig: time_embed_dim must be even and >= 2");
        if (ffn_mult < 1) throw std::invalid_argument("ModelConfig: ffn_mult must be >= 1");
    }

    bool operator==(const ModelConfig& o) const {
        return d_hidden == o.d_hidden && n_layers == o.n_layers && n_heads == o.n_heads &&
               max_len == o.max_len && vocab.size == o.vocab.size &&
               struct_spec.dim == o.struct_spec.dim && denoiser_hidden == o.denoiser_hidden &&
               denoiser_layers == o.denoiser_layers && time_embed_dim == o.time_embed_dim &&
               ffn_mult == o.ffn_mult;
    }
};

enum class InitKind { Uniform, Zeros, Ones };

struct TensorInfo {
    std::string name;   // unique, e.g. "layers.1.attn.wq"
    std::string cls;    // probe class with the layer index stripped, e.g. "attn.wq"
    size_t offset = 0;
    size_t rows = 0;
    size_t cols = 1;
    size_t fan_in = 0;
    InitKind init = InitKind::Uniform;
    bool weight_decay = true;

    size_t size() const { return rows * cols; }
};

struct LayerOffsets {
    size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    size_t ln2_g, ln2_b, w1, b1, w2, b2;
};

// Canonical flat parameter layout. Tensor order is the serialization order.
struct ParamLayout {
    std::vector<TensorInfo> tensors;
    size_t total = 0;

    size_t seq_embed = 0, sn_g = 0, sn_b = 0, w_in = 0, mask_embed = 0, pos_embed = 0;
    std::vector<LayerOffsets> layer;
    size_t fin_g = 0, fin_b = 0, proj_w = 0, proj_b = 0;
    std::vector<size_t> den_w, den_b;
    std::vector<int> den_dims;  // den_dims[m] -> den_dims[m+1] for affine map m

    static ParamLayout build(const ModelConfig& cfg) {
        cfg.validate();
        ParamLayout L;
        const int H = cfg.d_hidden;
        const int V = cfg.vocab.size;
        const int D = cfg.struct_spec.dim;
        const int F = cfg.ffn_mult * H;

        auto add = [&L](const std::string& name, const std::string& cls, size_t rows, size_t cols,
                        size_t fan_in, InitKind init, bool decay) {
            TensorInfo t;
            t.name = name;
            t.cls = cls;
            t.offset = L.total;
            t.rows = rows;
            t.cols = cols;
            t.fan_in = fan_in;
            t.init = init;
            t.weight_decay = decay;
            L.total += t.size();
            L.tensors.push_back(std::move(t));
            return L.tensors.back().offset;
        };

        L.seq_embed = add("seq_embed", "seq_embed", static_cast<size_t>(V) + 1,
                          static_cast<size_t>(H), static_cast<size_t>(H), InitKind::Uniform, true);
        L.sn_g = add("struct_norm.gain", "struct_norm.gain", static_cast<size_t>(D), 1, 0,
                     InitKind::Ones, false);
        L.sn_b = add("struct_norm.bias", "struct_norm.bias", static_cast<size_t>(D), 1, 0,
                     InitKind::Zeros, false);
        L.w_in = add("struct_proj", "struct_proj", static_cast<size_t>(D), static_cast<size_t>(H),
                     static_cast<size_t>(D), InitKind::Uniform, true);
        L.mask_embed = add("struct_mask_embed", "struct_mask_embed", static_cast<size_t>(H), 1,
                           static_cast<size_t>(H), InitKind::Uniform, true);
        L.pos_embed = add("pos_embed", "pos_embed", static_cast<size_t>(cfg.max_len),
                          static_cast<size_t>(H), static_cast<size_t>(H), InitKind::Uniform, true);

        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            LayerOffsets off{};
            off.ln1_g = add(p + "ln1.gain", "ln1.gain", static_cast<size_t>(H), 1, 0, InitKind::Ones, false);
            off.ln1_b = add(p + "ln1.bias", "ln1.bias", static_cast<size_t>(H), 1, 0, InitKind::Zeros, false);
            off.wq = add(p + "attn.wq", "attn.wq", static_cast<size_t>(H), static_cast<size_t>(H),
                         static_cast<size_t>(H), InitKind::Uniform, true);
            off.bq = add(p + "attn.bq", "attn.bq", static_cast<size_t>(H), 1, 0, InitKind::Zeros, true);
            off.wk = add(p + "attn.wk", "attn.wk", static_cast<size_t>(H), static_cast<size_t>(H),
                         static_cast<size_t>(H), InitKind::Uniform, true);
            off.bk = add(p + "attn.bk", "attn.bk", static_cast<size_t>(H), 1, 0, InitKind::Zeros, true);
            off.wv = add(p + "attn.wv", "attn.wv", static_cast<size_t>(H), static_cast<size_t>(H),
                         static_cast<size_t>(H), InitKind::Uniform, true);
            off.bv = add(p + "attn.bv", "attn.bv", static_cast<size_t>(H), 1, 0, InitKind::Zeros, true);
            off.wo = add(p + "attn.wo", "attn.wo", static_cast<size_t>(H), static_cast<size_t>(H),
                         static_cast<size_t>(H), InitKind::Uniform, true);
            off.bo = add(p + "attn.bo", "attn.bo", static_cast<size_t>(H), 1, 0, InitKind::Zeros, true);
            off.ln2_g = add(p + "ln2.gain", "ln2.gain", static_cast<size_t>(H), 1, 0, InitKind::Ones, false);
            off.ln2_b = add(p + "ln2.bias", "ln2.bias", static_cast<size_t>(H), 1, 0, InitKind::Zeros, false);
            off.w1 = add(p + "ffn.w1", "ffn.w1", static_cast<size_t>(H), static_cast<size_t>(F),
                         static_cast<size_t>(H), InitKind::Uniform, true);
            off.b1 = add(p + "ffn.b1", "ffn.b1", static_cast<size_t>(F), 1, 0, InitKind::Zeros, true);
            off.w2 = add(p + "ffn.w2", "ffn.w2", static_cast<size_t>(F), static_cast<size_t>(H),
                         static_cast<size_t>(F), InitKind::Uniform, true);
            off.b2 = add(p + "ffn.b2", "ffn.b2", static_cast<size_t>(H), 1, 0, InitKind::Zeros, true);
            L.layer.push_back(off);
        }

        L.fin_g = add("final_ln.gain", "final_ln.gain", static_cast<size_t>(H), 1, 0, InitKind::Ones, false);
        L.fin_b = add("final_ln.bias", "final_ln.bias", static_cast<size_t>(H), 1, 0, InitKind::Zeros, false);
        L.proj_w = add("projector.w", "projector.w", static_cast<size_t>(H), static_cast<size_t>(V),
                       static_cast<size_t>(H), InitKind::Uniform, true);
        L.proj_b = add("projector.b", "projector.b", static_cast<size_t>(V), 1, 0, InitKind::Zeros, true);

        const int M = cfg.denoiser_layers;
        L.den_dims.resize(static_cast<size_t>(M) + 1);
        L.den_dims[0] = D + cfg.time_embed_dim + H;
        for (int m = 1; m < M; ++m) L.den_dims[static_cast<size_t>(m)] = cfg.denoiser_hidden;
        L.den_dims[static_cast<size_t>(M)] = D;
        for (int m = 0; m < M; ++m) {
            const std::string p = "denoiser." + std::to_string(m) + ".";
            const size_t in = static_cast<size_t>(L.den_dims[static_cast<size_t>(m)]);
            const size_t out = static_cast<size_t>(L.den_dims[static_cast<size_t>(m) + 1]);
            L.den_w.push_back(add(p + "w", "denoiser." + std::to_string(m) + ".w", in, out, in,
                                  InitKind::Uniform, true));
            L.den_b.push_back(add(p + "b", "denoiser." + std::to_string(m) + ".b", out, 1, 0,
                                  InitKind::Zeros, true));
        }
        return L;
    }

    const TensorInfo& by_name(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::invalid_argument("ParamLayout: unknown tensor " + std::string(name));
    }
};

template <typename Real>
struct ModelParams {
    ModelConfig cfg;
    ParamLayout layout;
    std::vector<Real> flat;

    std::span<Real> tensor(const TensorInfo& t) { return {flat.data() + t.offset, t.size()}; }
    std::span<const Real> tensor(const TensorInfo& t) const {
        return {flat.data() + t.offset, t.size()};
    }
    const Real* at(size_t offset) const { return flat.data() + offset; }

    bool all_finite() const {
        for (Real v : flat)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename Other>
    ModelParams<Other> cast() const {
        ModelParams<Other> out;
        out.cfg = cfg;
        out.layout = layout;
        out.flat.resize(flat.size());
        for (size_t i = 0; i < flat.size(); ++i) out.flat[i] = static_cast<Other>(flat[i]);
        return out;
    }
};

// Uniform(-sqrt(3)/sqrt(fan_in), +sqrt(3)/sqrt(fan_in)) so the empirical std
// is 1/sqrt(fan_in); norm gains one, every bias zero. Each tensor draws from
// its own substream, so the layout order pins the exact values.
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams<Real> p;
    p.cfg = cfg;
    p.layout = ParamLayout::build(cfg);
    p.flat.assign(p.layout.total, Real(0));
    for (size_t ti = 0; ti < p.layout.tensors.size(); ++ti) {
        const TensorInfo& t = p.layout.tensors[ti];
        auto view = p.tensor(t);
        switch (t.init) {
            case InitKind::Zeros:
                break;
            case InitKind::Ones:
                for (Real& v : view) v = Real(1);
                break;
            case InitKind::Uniform: {
                Rng rng = derive_rng(seed, Stream::ParamInit, ti);
                const double bound = std::sqrt(3.0) / std::sqrt(static_cast<double>(t.fan_in));
                for (Real& v : view)
                    v = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
                break;
            }
        }
    }
    return p;
}

// ---- low-level kernels -----------------------------------------------------

namespace detail {

constexpr double kLnEps = 1e-5;

// y[M,N] = x[M,K] * w[K,N] + b[N]
template <typename Real>
void affine(const Real* x, const Real* w, const Real* b, Real* y, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        Real* yi = y + i * N;
        if (b) {
            std::memcpy(yi, b, sizeof(Real) * static_cast<size_t>(N));
        } else {
            std::memset(yi, 0, sizeof(Real) * static_cast<size_t>(N));
        }
        const Real* xi = x + i * K;
        for (int k = 0; k < K; ++k) {
            const Real xv = xi[k];
            const Real* wk = w + k * N;
            for (int n = 0; n < N; ++n) yi[n] += xv * wk[n];
        }
    }
}

// accumulates dx += dy * w^T, dw += x^T * dy, db += colsum(dy); the transposed
// weight copy turns the dx pass into stride-1 accumulation
template <typename Real>
void affine_backward(const Real* x, const Real* w, const Real* dy, Real* dx, Real* dw, Real* db,
                     int M, int K, int N) {
    if (dx && M >= 4) {
        std::vector<Real> wt(static_cast<size_t>(K) * static_cast<size_t>(N));
        for (int k = 0; k < K; ++k)
            for (int n = 0; n < N; ++n) wt[static_cast<size_t>(n) * K + k] = w[k * N + n];
        for (int i = 0; i < M; ++i) {
            const Real* dyi = dy + i * N;
            Real* dxi = dx + i * K;
            for (int n = 0; n < N; ++n) {
                const Real d = dyi[n];
                if (d == Real(0)) continue;
                const Real* wn = wt.data() + static_cast<size_t>(n) * K;
                for (int k = 0; k < K; ++k) dxi[k] += d * wn[k];
            }
        }
    } else if (dx) {
        // few rows: the transpose cannot amortize, reduce along each w row
        for (int i = 0; i < M; ++i) {
            const Real* dyi = dy + i * N;
            Real* dxi = dx + i * K;
            for (int k = 0; k < K; ++k) {
                const Real* wk = w + k * N;
                Real acc = 0;
                for (int n = 0; n < N; ++n) acc += dyi[n] * wk[n];
                dxi[k] += acc;
            }
        }
    }
    for (int i = 0; i < M; ++i) {
        const Real* xi = x + i * K;
        const Real* dyi = dy + i * N;
        for (int k = 0; k < K; ++k) {
            const Real xv = xi[k];
            if (xv == Real(0)) continue;
            Real* dwk = dw + k * N;
            for (int n = 0; n < N; ++n) dwk[n] += xv * dyi[n];
        }
    }
    if (db) {
        for (int i = 0; i < M; ++i) {
            const Real* dyi = dy + i * N;
            for (int n = 0; n < N; ++n) db[n] += dyi[n];
        }
    }
}

template <typename Real>
void layernorm(const Real* x, const Real* g, const Real* b, Real* y, Real* mean, Real* rstd,
               int M, int D) {
    for (int i = 0; i < M; ++i) {
        const Real* xi = x + i * D;
        Real* yi = y + i * D;
        Real mu = 0;
        for (int j = 0; j < D; ++j) mu += xi[j];
        mu /= static_cast<Real>(D);
        Real var = 0;
        for (int j = 0; j < D; ++j) {
            const Real d = xi[j] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(D);
        const Real rs = Real(1) / std::sqrt(var + static_cast<Real>(kLnEps));
        mean[i] = mu;
        rstd[i] = rs;
        for (int j = 0; j < D; ++j) yi[j] = g[j] * ((xi[j] - mu) * rs) + b[j];
    }
}

// accumulates dx, dg, db
template <typename Real>
void layernorm_backward(const Real* x, const Real* g, const Real* mean, const Real* rstd,
                        const Real* dy, Real* dx, Real* dg, Real* db, int M, int D) {
    for (int i = 0; i < M; ++i) {
        const Real* xi = x + i * D;
        const Real* dyi = dy + i * D;
        Real* dxi = dx + i * D;
        const Real mu = mean[i];
        const Real rs = rstd[i];
        Real sum_dxh = 0, sum_dxh_xh = 0;
        for (int j = 0; j < D; ++j) {
            const Real xh = (xi[j] - mu) * rs;
            const Real dxh = dyi[j] * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dg[j] += dyi[j] * xh;
            db[j] += dyi[j];
        }
        const Real inv_d = Real(1) / static_cast<Real>(D);
        for (int j = 0; j < D; ++j) {
            const Real xh = (xi[j] - mu) * rs;
            const Real dxh = dyi[j] * g[j];
            dxi[j] += rs * (dxh - sum_dxh * inv_d - xh * sum_dxh_xh * inv_d);
        }
    }
}

template <typename Real>
void softmax_row(Real* p, int n) {
    Real mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    Real sum = 0;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
    }
    const Real inv = Real(1) / sum;
    for (int i = 0; i < n; ++i) p[i] *= inv;
}

template <typename Real>
Real gelu(Real x) {
    return x * Real(0.5) * (Real(1) + std::erf(x * static_cast<Real>(0.70710678118654752440)));
}

template <typename Real>
Real gelu_grad(Real x) {
    const Real phi_cdf = Real(0.5) * (Real(1) + std::erf(x * static_cast<Real>(0.70710678118654752440)));
    const Real phi_pdf =
        std::exp(-x * x * Real(0.5)) * static_cast<Real>(1.0 / std::sqrt(2.0 * std::numbers::pi));
    return phi_cdf + x * phi_pdf;
}

} // namespace detail

// sinusoidal embedding of the denoising step index
template <typename Real>
void time_embedding(int t_prime, int dim, std::span<Real> out) {
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * (2.0 * k) / static_cast<double>(dim));
        out[static_cast<size_t>(2 * k)] = static_cast<Real>(std::sin(t_prime * freq));
        out[static_cast<size_t>(2 * k + 1)] = static_cast<Real>(std::cos(t_prime * freq));
    }
}

// ---- encoder ----------------------------------------------------------------

template <typename Real>
struct Context {
    int length = 0;
    std::vector<Real> h;  // [length * d_hidden]

    std::span<const Real> row(int i, int d_hidden) const {
        return {h.data() + static_cast<size_t>(i) * static_cast<size_t>(d_hidden),
                static_cast<size_t>(d_hidden)};
    }
};

template <typename Real>
using ContextBatch = std::vector<Context<Real>>;

template <typename Real>
struct LayerCache {
    std::vector<Real> ln1_out, q, k, v, att, att_concat, res1;
    std::vector<Real> ln2_out, ff_pre, ff_act, res2;
    std::vector<Real> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
};

template <typename Real>
struct EncodeCache {
    int L = 0;
    std::vector<int> seq_in;
    std::vector<uint8_t> struct_mask;
    std::vector<Real> x0;
    std::vector<Real> sn_xhat, sn_y;  // struct layernorm internals, [L * d_struct]
    std::vector<LayerCache<Real>> layers;
    std::vector<Real> f_mean, f_rstd;
    std::vector<Real> ctx;
};

template <typename Real>
void encode_cached(const ModelParams<Real>& P, std::span<const int> seq,
                   std::span<const Real> struct_in, std::span<const uint8_t> struct_mask,
                   EncodeCache<Real>& cache) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int L = static_cast<int>(seq.size());
    const int H = cfg.d_hidden;
    const int D = cfg.struct_spec.dim;
    const int nh = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int F = cfg.ffn_mult * H;

    if (L < 1) throw std::invalid_argument("encode: empty input");
    if (L > cfg.max_len) throw std::invalid_argument("encode: length exceeds max_len");
    if (struct_mask.size() != static_cast<size_t>(L) ||
        struct_in.size() != static_cast<size_t>(L) * static_cast<size_t>(D))
        throw std::invalid_argument("encode: tracks are not aligned");
    for (int s : seq)
        if (s < 0 || s > cfg.vocab.size)
            throw std::invalid_argument("encode: token id out of range");

    cache.L = L;
    cache.seq_in.assign(seq.begin(), seq.end());
    cache.struct_mask.assign(struct_mask.begin(), struct_mask.end());
    cache.x0.assign(static_cast<size_t>(L) * static_cast<size_t>(H), Real(0));
    cache.sn_xhat.assign(static_cast<size_t>(L) * static_cast<size_t>(D), Real(0));
    cache.sn_y.assign(static_cast<size_t>(L) * static_cast<size_t>(D), Real(0));

    const Real* seq_embed = P.at(O.seq_embed);
    const Real* sn_g = P.at(O.sn_g);
    const Real* sn_b = P.at(O.sn_b);
    const Real* w_in = P.at(O.w_in);
    const Real* mask_embed = P.at(O.mask_embed);
    const Real* pos_embed = P.at(O.pos_embed);

    for (int i = 0; i < L; ++i) {
        Real* xi = cache.x0.data() + i * H;
        const Real* emb = seq_embed + seq[static_cast<size_t>(i)] * H;
        const Real* pos = pos_embed + i * H;
        for (int h = 0; h < H; ++h) xi[h] = emb[h] + pos[h];
        if (struct_mask[static_cast<size_t>(i)]) {
            for (int h = 0; h < H; ++h) xi[h] += mask_embed[h];
        } else {
            const Real* zi = struct_in.data() + i * D;
            Real mu = 0;
            for (int j = 0; j < D; ++j) mu += zi[j];
            mu /= static_cast<Real>(D);
            Real var = 0;
            for (int j = 0; j < D; ++j) {
                const Real d = zi[j] - mu;
                var += d * d;
            }
            var /= static_cast<Real>(D);
            const Real rs = Real(1) / std::sqrt(var + static_cast<Real>(detail::kLnEps));
            Real* xh = cache.sn_xhat.data() + i * D;
            Real* y = cache.sn_y.data() + i * D;
            for (int j = 0; j < D; ++j) {
                xh[j] = (zi[j] - mu) * rs;
                y[j] = sn_g[j] * xh[j] + sn_b[j];
            }
            for (int j = 0; j < D; ++j) {
                const Real yj = y[j];
                const Real* wj = w_in + j * H;
                for (int h = 0; h < H; ++h) xi[h] += yj * wj[h];
            }
        }
    }

    cache.layers.assign(static_cast<size_t>(cfg.n_layers), LayerCache<Real>{});
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(Dh));

    const Real* stream = cache.x0.data();
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerOffsets& lo = O.layer[static_cast<size_t>(l)];
        LayerCache<Real>& lc = cache.layers[static_cast<size_t>(l)];
        const size_t LH = static_cast<size_t>(L) * static_cast<size_t>(H);
        lc.ln1_out.assign(LH, Real(0));
        lc.q.assign(LH, Real(0));
        lc.k.assign(LH, Real(0));
        lc.v.assign(LH, Real(0));
        lc.att.assign(static_cast<size_t>(nh) * static_cast<size_t>(L) * static_cast<size_t>(L), Real(0));
        lc.att_concat.assign(LH, Real(0));
        lc.res1.assign(LH, Real(0));
        lc.ln2_out.assign(LH, Real(0));
        lc.ff_pre.assign(static_cast<size_t>(L) * static_cast<size_t>(F), Real(0));
        lc.ff_act.assign(static_cast<size_t>(L) * static_cast<size_t>(F), Real(0));
        lc.res2.assign(LH, Real(0));
        lc.ln1_mean.assign(static_cast<size_t>(L), Real(0));
        lc.ln1_rstd.assign(static_cast<size_t>(L), Real(0));
        lc.ln2_mean.assign(static_cast<size_t>(L), Real(0));
        lc.ln2_rstd.assign(static_cast<size_t>(L), Real(0));

        detail::layernorm(stream, P.at(lo.ln1_g), P.at(lo.ln1_b), lc.ln1_out.data(),
                          lc.ln1_mean.data(), lc.ln1_rstd.data(), L, H);
        detail::affine(lc.ln1_out.data(), P.at(lo.wq), P.at(lo.bq), lc.q.data(), L, H, H);
        detail::affine(lc.ln1_out.data(), P.at(lo.wk), P.at(lo.bk), lc.k.data(), L, H, H);
        detail::affine(lc.ln1_out.data(), P.at(lo.wv), P.at(lo.bv), lc.v.data(), L, H, H);

        std::vector<Real> kt(static_cast<size_t>(Dh) * static_cast<size_t>(L));
        for (int h = 0; h < nh; ++h) {
            Real* att_h = lc.att.data() + static_cast<size_t>(h) * static_cast<size_t>(L) * static_cast<size_t>(L);
            const int base = h * Dh;
            for (int j = 0; j < L; ++j)
                for (int d = 0; d < Dh; ++d)
                    kt[static_cast<size_t>(d) * L + j] = lc.k[static_cast<size_t>(j * H + base + d)];
            for (int i = 0; i < L; ++i) {
                Real* row = att_h + i * L;
                const Real* qi = lc.q.data() + i * H + base;
                std::fill(row, row + L, Real(0));
                for (int d = 0; d < Dh; ++d) {
                    const Real qd = qi[d];
                    const Real* ktd = kt.data() + static_cast<size_t>(d) * L;
                    for (int j = 0; j < L; ++j) row[j] += qd * ktd[j];
                }
                for (int j = 0; j < L; ++j) row[j] *= inv_sqrt_dh;
                detail::softmax_row(row, L);
                Real* out = lc.att_concat.data() + i * H + base;
                for (int j = 0; j < L; ++j) {
                    const Real p = row[j];
                    if (p == Real(0)) continue;
                    const Real* vj = lc.v.data() + j * H + base;
                    for (int d = 0; d < Dh; ++d) out[d] += p * vj[d];
                }
            }
        }

        detail::affine(lc.att_concat.data(), P.at(lo.wo), P.at(lo.bo), lc.res1.data(), L, H, H);
        for (size_t idx = 0; idx < LH; ++idx) lc.res1[idx] += stream[idx];

        detail::layernorm(lc.res1.data(), P.at(lo.ln2_g), P.at(lo.ln2_b), lc.ln2_out.data(),
                          lc.ln2_mean.data(), lc.ln2_rstd.data(), L, H);
        detail::affine(lc.ln2_out.data(), P.at(lo.w1), P.at(lo.b1), lc.ff_pre.data(), L, H, F);
        for (size_t idx = 0; idx < lc.ff_pre.size(); ++idx)
            lc.ff_act[idx] = detail::gelu(lc.ff_pre[idx]);
        detail::affine(lc.ff_act.data(), P.at(lo.w2), P.at(lo.b2), lc.res2.data(), L, F, H);
        for (size_t idx = 0; idx < LH; ++idx) lc.res2[idx] += lc.res1[idx];

        stream = lc.res2.data();
    }

    cache.f_mean.assign(static_cast<size_t>(L), Real(0));
    cache.f_rstd.assign(static_cast<size_t>(L), Real(0));
    cache.ctx.assign(static_cast<size_t>(L) * static_cast<size_t>(H), Real(0));
    detail::layernorm(stream, P.at(O.fin_g), P.at(O.fin_b), cache.ctx.data(), cache.f_mean.data(),
                      cache.f_rstd.data(), L, H);
}

// Accumulates parameter gradients for d(loss)/d(context) into `grads`
// (flat, layout order). The cache must come from encode_cached on the same
// params and inputs.
template <typename Real>
void encode_backward(const ModelParams<Real>& P, const EncodeCache<Real>& cache,
                     std::span<const Real> dctx, std::span<Real> grads) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int L = cache.L;
    const int H = cfg.d_hidden;
    const int D = cfg.struct_spec.dim;
    const int nh = cfg.n_heads;
    const int Dh = cfg.head_dim();
    const int F = cfg.ffn_mult * H;
    const size_t LH = static_cast<size_t>(L) * static_cast<size_t>(H);
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(Dh));

    const Real* last_stream =
        cfg.n_layers > 0 ? cache.layers.back().res2.data() : cache.x0.data();

    std::vector<Real> d_stream(LH, Real(0));
    detail::layernorm_backward(last_stream, P.at(O.fin_g), cache.f_mean.data(),
                               cache.f_rstd.data(), dctx.data(), d_stream.data(),
                               grads.data() + O.fin_g, grads.data() + O.fin_b, L, H);

    std::vector<Real> d_res1(LH), d_ln2(LH), d_ff(static_cast<size_t>(L) * static_cast<size_t>(F));
    std::vector<Real> d_concat(LH), dq(LH), dk(LH), dv(LH), d_ln1(LH);
    std::vector<Real> d_probs(static_cast<size_t>(L) * static_cast<size_t>(L));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerOffsets& lo = O.layer[static_cast<size_t>(l)];
        const LayerCache<Real>& lc = cache.layers[static_cast<size_t>(l)];
        const Real* input =
            (l == 0) ? cache.x0.data() : cache.layers[static_cast<size_t>(l - 1)].res2.data();

        // res2 = res1 + W2 gelu(W1 ln2(res1) + b1) + b2
        std::fill(d_ff.begin(), d_ff.end(), Real(0));
        detail::affine_backward(lc.ff_act.data(), P.at(lo.w2), d_stream.data(), d_ff.data(),
                                grads.data() + lo.w2, grads.data() + lo.b2, L, F, H);
        for (size_t idx = 0; idx < d_ff.size(); ++idx)
            d_ff[idx] *= detail::gelu_grad(lc.ff_pre[idx]);
        std::fill(d_ln2.begin(), d_ln2.end(), Real(0));
        detail::affine_backward(lc.ln2_out.data(), P.at(lo.w1), d_ff.data(), d_ln2.data(),
                                grads.data() + lo.w1, grads.data() + lo.b1, L, H, F);
        d_res1 = d_stream;  // identity branch of the residual
        detail::layernorm_backward(lc.res1.data(), P.at(lo.ln2_g), lc.ln2_mean.data(),
                                   lc.ln2_rstd.data(), d_ln2.data(), d_res1.data(),
                                   grads.data() + lo.ln2_g, grads.data() + lo.ln2_b, L, H);

        // res1 = input + Wo att_concat + bo
        std::fill(d_concat.begin(), d_concat.end(), Real(0));
        detail::affine_backward(lc.att_concat.data(), P.at(lo.wo), d_res1.data(), d_concat.data(),
                                grads.data() + lo.wo, grads.data() + lo.bo, L, H, H);

        std::fill(dq.begin(), dq.end(), Real(0));
        std::fill(dk.begin(), dk.end(), Real(0));
        std::fill(dv.begin(), dv.end(), Real(0));
        std::vector<Real> vt(static_cast<size_t>(Dh) * static_cast<size_t>(L));
        for (int h = 0; h < nh; ++h) {
            const Real* att_h =
                lc.att.data() + static_cast<size_t>(h) * static_cast<size_t>(L) * static_cast<size_t>(L);
            const int base = h * Dh;
            for (int j = 0; j < L; ++j)
                for (int d = 0; d < Dh; ++d)
                    vt[static_cast<size_t>(d) * L + j] = lc.v[static_cast<size_t>(j * H + base + d)];
            for (int i = 0; i < L; ++i) {
                const Real* dout = d_concat.data() + i * H + base;
                const Real* probs = att_h + i * L;
                Real* dp = d_probs.data() + i * L;
                std::fill(dp, dp + L, Real(0));
                for (int d = 0; d < Dh; ++d) {
                    const Real dd = dout[d];
                    const Real* vtd = vt.data() + static_cast<size_t>(d) * L;
                    for (int j = 0; j < L; ++j) dp[j] += dd * vtd[j];
                }
                for (int j = 0; j < L; ++j) {
                    Real* dvj = dv.data() + j * H + base;
                    const Real p = probs[j];
                    if (p == Real(0)) continue;
                    for (int d = 0; d < Dh; ++d) dvj[d] += p * dout[d];
                }
                // softmax backward then score backward for row i
                Real dot = 0;
                for (int j = 0; j < L; ++j) dot += dp[j] * probs[j];
                Real* dqi = dq.data() + i * H + base;
                const Real* qi = lc.q.data() + i * H + base;
                for (int j = 0; j < L; ++j) {
                    const Real ds = probs[j] * (dp[j] - dot) * inv_sqrt_dh;
                    if (ds == Real(0)) continue;
                    const Real* kj = lc.k.data() + j * H + base;
                    Real* dkj = dk.data() + j * H + base;
                    for (int d = 0; d < Dh; ++d) {
                        dqi[d] += ds * kj[d];
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }

        std::fill(d_ln1.begin(), d_ln1.end(), Real(0));
        detail::affine_backward(lc.ln1_out.data(), P.at(lo.wq), dq.data(), d_ln1.data(),
                                grads.data() + lo.wq, grads.data() + lo.bq, L, H, H);
        detail::affine_backward(lc.ln1_out.data(), P.at(lo.wk), dk.data(), d_ln1.data(),
                                grads.data() + lo.wk, grads.data() + lo.bk, L, H, H);
        detail::affine_backward(lc.ln1_out.data(), P.at(lo.wv), dv.data(), d_ln1.data(),
                                grads.data() + lo.wv, grads.data() + lo.bv, L, H, H);

        // d_input = d_res1 (identity branch) + layernorm backward of d_ln1
        detail::layernorm_backward(input, P.at(lo.ln1_g), lc.ln1_mean.data(), lc.ln1_rstd.data(),
                                   d_ln1.data(), d_res1.data(), grads.data() + lo.ln1_g,
                                   grads.data() + lo.ln1_b, L, H);
        d_stream.swap(d_res1);
    }

    // fused-input backward
    const Real* w_in = P.at(O.w_in);
    for (int i = 0; i < L; ++i) {
        const Real* d = d_stream.data() + i * H;
        Real* g_pos = grads.data() + O.pos_embed + static_cast<size_t>(i) * static_cast<size_t>(H);
        Real* g_emb = grads.data() + O.seq_embed +
                      static_cast<size_t>(cache.seq_in[static_cast<size_t>(i)]) * static_cast<size_t>(H);
        for (int h = 0; h < H; ++h) {
            g_pos[h] += d[h];
            g_emb[h] += d[h];
        }
        if (cache.struct_mask[static_cast<size_t>(i)]) {
            Real* g_mask = grads.data() + O.mask_embed;
            for (int h = 0; h < H; ++h) g_mask[h] += d[h];
        } else {
            const Real* y = cache.sn_y.data() + i * D;
            const Real* xh = cache.sn_xhat.data() + i * D;
            Real* g_win = grads.data() + O.w_in;
            Real* g_sng = grads.data() + O.sn_g;
            Real* g_snb = grads.data() + O.sn_b;
            for (int j = 0; j < D; ++j) {
                const Real* wj = w_in + j * H;
                Real dy = 0;
                for (int h = 0; h < H; ++h) {
                    g_win[static_cast<size_t>(j) * static_cast<size_t>(H) + static_cast<size_t>(h)] +=
                        y[j] * d[h];
                    dy += wj[h] * d[h];
                }
                g_sng[j] += dy * xh[j];
                g_snb[j] += dy;
            }
        }
    }
}

// Single-sample convenience wrapper: fused input + backbone, full
// bidirectional attention, returns the per-position context.
template <typename Real>
Context<Real> fuse_and_encode(const ModelParams<Real>& P, std::span<const int> seq,
                              std::span<const Real> struct_in,
                              std::span<const uint8_t> struct_mask) {
    EncodeCache<Real> cache;
    encode_cached(P, seq, struct_in, struct_mask, cache);
    Context<Real> out;
    out.length = cache.L;
    out.h = std::move(cache.ctx);
    return out;
}

// affine map to V logits; the mask token is not part of the output alphabet
template <typename Real>
std::vector<Real> categorical_head(const ModelParams<Real>& P, std::span<const Real> c_i) {
    const int H = P.cfg.d_hidden;
    const int V = P.cfg.vocab.size;
    if (c_i.size() != static_cast<size_t>(H))
        throw std::invalid_argument("categorical_head: context has wrong size");
    std::vector<Real> logits(static_cast<size_t>(V));
    detail::affine(c_i.data(), P.at(P.layout.proj_w), P.at(P.layout.proj_b), logits.data(), 1, H, V);
    return logits;
}

template <typename Real>
struct DenoiserCache {
    std::vector<Real> input;                 // concat(z_noisy, time_embed, c_i)
    std::vector<std::vector<Real>> pre;      // pre-activations per affine map
    std::vector<std::vector<Real>> act;      // activations fed to each map (act[0] = input)
};

template <typename Real>
void denoise_forward(const ModelParams<Real>& P, std::span<const Real> z_noisy, int t_prime,
                     std::span<const Real> c_i, DenoiserCache<Real>& cache,
                     std::span<Real> eps_hat) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int D = cfg.struct_spec.dim;
    const int TE = cfg.time_embed_dim;
    const int H = cfg.d_hidden;
    const int M = cfg.denoiser_layers;
    if (t_prime < 1) throw std::invalid_argument("denoise_head: t' must be >= 1");
    if (z_noisy.size() != static_cast<size_t>(D) || c_i.size() != static_cast<size_t>(H) ||
        eps_hat.size() != static_cast<size_t>(D))
        throw std::invalid_argument("denoise_head: bad input sizes");

    cache.input.assign(static_cast<size_t>(D + TE + H), Real(0));
    std::copy(z_noisy.begin(), z_noisy.end(), cache.input.begin());
    time_embedding<Real>(t_prime, TE, {cache.input.data() + D, static_cast<size_t>(TE)});
    std::copy(c_i.begin(), c_i.end(), cache.input.begin() + D + TE);

    cache.pre.assign(static_cast<size_t>(M), {});
    cache.act.assign(static_cast<size_t>(M) + 1, {});
    cache.act[0] = cache.input;
    for (int m = 0; m < M; ++m) {
        const int in = O.den_dims[static_cast<size_t>(m)];
        const int out = O.den_dims[static_cast<size_t>(m) + 1];
        cache.pre[static_cast<size_t>(m)].assign(static_cast<size_t>(out), Real(0));
        detail::affine(cache.act[static_cast<size_t>(m)].data(), P.at(O.den_w[static_cast<size_t>(m)]),
                       P.at(O.den_b[static_cast<size_t>(m)]),
                       cache.pre[static_cast<size_t>(m)].data(), 1, in, out);
        if (m < M - 1) {
            auto& a = cache.act[static_cast<size_t>(m) + 1];
            a.resize(static_cast<size_t>(out));
            for (int j = 0; j < out; ++j)
                a[static_cast<size_t>(j)] = detail::gelu(cache.pre[static_cast<size_t>(m)][static_cast<size_t>(j)]);
        } else {
            cache.act[static_cast<size_t>(M)] = cache.pre[static_cast<size_t>(m)];
        }
    }
    std::copy(cache.act[static_cast<size_t>(M)].begin(), cache.act[static_cast<size_t>(M)].end(),
              eps_hat.begin());
}

// accumulates denoiser parameter grads and the context gradient dc_i
template <typename Real>
void denoise_backward(const ModelParams<Real>& P, const DenoiserCache<Real>& cache,
                      std::span<const Real> d_eps_hat, std::span<Real> grads,
                      std::span<Real> dc_i) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int D = cfg.struct_spec.dim;
    const int TE = cfg.time_embed_dim;
    const int M = cfg.denoiser_layers;

    std::vector<Real> d_out(d_eps_hat.begin(), d_eps_hat.end());
    std::vector<Real> d_in;
    for (int m = M - 1; m >= 0; --m) {
        const int in = O.den_dims[static_cast<size_t>(m)];
        const int out = O.den_dims[static_cast<size_t>(m) + 1];
        if (m < M - 1) {
            for (int j = 0; j < out; ++j)
                d_out[static_cast<size_t>(j)] *=
                    detail::gelu_grad(cache.pre[static_cast<size_t>(m)][static_cast<size_t>(j)]);
        }
        d_in.assign(static_cast<size_t>(in), Real(0));
        detail::affine_backward(cache.act[static_cast<size_t>(m)].data(),
                                P.at(O.den_w[static_cast<size_t>(m)]), d_out.data(), d_in.data(),
                                grads.data() + O.den_w[static_cast<size_t>(m)],
                                grads.data() + O.den_b[static_cast<size_t>(m)], 1, in, out);
        d_out.swap(d_in);
    }
    // slices for z_noisy and the fixed time embedding carry no trainable input
    for (size_t h = 0; h < dc_i.size(); ++h)
        dc_i[h] += d_out[static_cast<size_t>(D + TE) + h];
}

template <typename Real>
struct DenoiserBatchCache {
    int n = 0;
    std::vector<Real> input;               // [n, D + TE + H]
    std::vector<std::vector<Real>> pre;    // per affine map, [n, out_dim]
    std::vector<std::vector<Real>> act;    // act[0] = input; act[m] = activations
};

// same network as denoise_forward, evaluated for n (z_noisy, t', c_i) rows at
// once; rows are independent, so per-row results match the single-row path
template <typename Real>
void denoise_forward_batch(const ModelParams<Real>& P, std::span<const Real> z_noisy,
                           std::span<const int> t_primes,
                           std::span<const Real* const> ctx_rows,
                           DenoiserBatchCache<Real>& cache, std::span<Real> eps_hat) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int D = cfg.struct_spec.dim;
    const int TE = cfg.time_embed_dim;
    const int H = cfg.d_hidden;
    const int M = cfg.denoiser_layers;
    const int n = static_cast<int>(t_primes.size());
    const int in0 = D + TE + H;
    cache.n = n;
    cache.input.assign(static_cast<size_t>(n) * static_cast<size_t>(in0), Real(0));
    for (int r = 0; r < n; ++r) {
        if (t_primes[static_cast<size_t>(r)] < 1)
            throw std::invalid_argument("denoise_head: t' must be >= 1");
        Real* row = cache.input.data() + static_cast<size_t>(r) * static_cast<size_t>(in0);
        std::copy(z_noisy.data() + static_cast<size_t>(r) * static_cast<size_t>(D),
                  z_noisy.data() + static_cast<size_t>(r + 1) * static_cast<size_t>(D), row);
        time_embedding<Real>(t_primes[static_cast<size_t>(r)], TE,
                             {row + D, static_cast<size_t>(TE)});
        std::copy(ctx_rows[static_cast<size_t>(r)], ctx_rows[static_cast<size_t>(r)] + H,
                  row + D + TE);
    }
    cache.pre.assign(static_cast<size_t>(M), {});
    cache.act.assign(static_cast<size_t>(M) + 1, {});
    cache.act[0] = cache.input;
    for (int m = 0; m < M; ++m) {
        const int in = O.den_dims[static_cast<size_t>(m)];
        const int out = O.den_dims[static_cast<size_t>(m) + 1];
        auto& pre = cache.pre[static_cast<size_t>(m)];
        pre.assign(static_cast<size_t>(n) * static_cast<size_t>(out), Real(0));
        detail::affine(cache.act[static_cast<size_t>(m)].data(), P.at(O.den_w[static_cast<size_t>(m)]),
                       P.at(O.den_b[static_cast<size_t>(m)]), pre.data(), n, in, out);
        if (m < M - 1) {
            auto& a = cache.act[static_cast<size_t>(m) + 1];
            a.resize(pre.size());
            for (size_t idx = 0; idx < pre.size(); ++idx) a[idx] = detail::gelu(pre[idx]);
        } else {
            cache.act[static_cast<size_t>(M)] = pre;
        }
    }
    std::copy(cache.act[static_cast<size_t>(M)].begin(), cache.act[static_cast<size_t>(M)].end(),
              eps_hat.begin());
}

template <typename Real>
void denoise_backward_batch(const ModelParams<Real>& P, const DenoiserBatchCache<Real>& cache,
                            std::span<const Real> d_eps_hat, std::span<Real> grads,
                            std::span<Real* const> dctx_rows) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int D = cfg.struct_spec.dim;
    const int TE = cfg.time_embed_dim;
    const int H = cfg.d_hidden;
    const int M = cfg.denoiser_layers;
    const int n = cache.n;

    std::vector<Real> d_out(d_eps_hat.begin(), d_eps_hat.end());
    std::vector<Real> d_in;
    for (int m = M - 1; m >= 0; --m) {
        const int in = O.den_dims[static_cast<size_t>(m)];
        const int out = O.den_dims[static_cast<size_t>(m) + 1];
        if (m < M - 1) {
            const auto& pre = cache.pre[static_cast<size_t>(m)];
            for (size_t idx = 0; idx < d_out.size(); ++idx)
                d_out[idx] *= detail::gelu_grad(pre[idx]);
        }
        d_in.assign(static_cast<size_t>(n) * static_cast<size_t>(in), Real(0));
        detail::affine_backward(cache.act[static_cast<size_t>(m)].data(),
                                P.at(O.den_w[static_cast<size_t>(m)]), d_out.data(), d_in.data(),
                                grads.data() + O.den_w[static_cast<size_t>(m)],
                                grads.data() + O.den_b[static_cast<size_t>(m)], n, in, out);
        d_out.swap(d_in);
    }
    const int in0 = D + TE + H;
    for (int r = 0; r < n; ++r) {
        const Real* src = d_out.data() + static_cast<size_t>(r) * static_cast<size_t>(in0) + D + TE;
        Real* dst = dctx_rows[static_cast<size_t>(r)];
        for (int h = 0; h < H; ++h) dst[h] += src[h];
    }
}

template <typename Real>
std::vector<Real> denoise_head(const ModelParams<Real>& P, std::span<const Real> z_noisy,
                               int t_prime, std::span<const Real> c_i) {
    DenoiserCache<Real> cache;
    std::vector<Real> out(static_cast<size_t>(P.cfg.struct_spec.dim));
    denoise_forward<Real>(P, z_noisy, t_prime, c_i, cache, out);
    return out;
}

// ---- training batch and combined objective ----------------------------------

template <typename Real>
struct BatchSampleT {
    int length = 0;
    std::vector<int> seq_in;           // corrupted ids (mask id allowed)
    std::vector<int> seq_target;       // clean ids
    std::vector<uint8_t> struct_mask;  // corrupted absorbing flags
    std::vector<Real> struct_in;       // scaled tokens; masked entries unused
    std::vector<Real> struct_target;   // scaled clean tokens
    int t_s = 0;
    int t_z = 0;
    bool seq_loss = true;
    bool struct_loss = true;
    // (t', eps) draws per struct-masked position, in position order. Each
    // position contributes the mean over its own draws, so any per-position
    // draw count gives an unbiased estimate of the per-position expectation.
    // draw_counts empty means draws_per_position draws everywhere.
    int draws_per_position = 1;
    std::vector<int> draw_counts;      // [n_struct_masked] or empty
    std::vector<int> t_prime;          // [sum of draw counts]
    std::vector<Real> eps;             // [sum of draw counts * dim]

    template <typename Other>
    BatchSampleT<Other> cast() const {
        BatchSampleT<Other> o;
        o.length = length;
        o.seq_in = seq_in;
        o.seq_target = seq_target;
        o.struct_mask = struct_mask;
        o.struct_in.assign(struct_in.begin(), struct_in.end());
        o.struct_target.assign(struct_target.begin(), struct_target.end());
        o.t_s = t_s;
        o.t_z = t_z;
        o.seq_loss = seq_loss;
        o.struct_loss = struct_loss;
        o.draws_per_position = draws_per_position;
        o.draw_counts = draw_counts;
        o.t_prime = t_prime;
        o.eps.assign(eps.begin(), eps.end());
        return o;
    }
};

using BatchSample = BatchSampleT<float>;

struct LossSpec {
    double gamma = 0.2;
    int T = 100;
    const DdpmSchedule* ddpm = nullptr;
};

template <typename Real>
struct ForwardBackwardResult {
    double loss = 0.0;
    double loss_seq = 0.0;
    double loss_struct = 0.0;
    std::vector<Real> grads;
};

struct LossBreakdown {
    double loss = 0.0;
    double loss_seq = 0.0;
    double loss_struct = 0.0;
};

namespace detail {

// Shared forward over one sample; when `grads`/`dctx` are given the head-level
// gradients are accumulated and dctx is filled for the backbone backward.
template <typename Real>
void heads_forward_backward(const ModelParams<Real>& P, const BatchSampleT<Real>& s,
                            const LossSpec& spec, const EncodeCache<Real>& cache,
                            double& sum_seq, double& sum_struct, double inv_b,
                            std::span<Real> grads, std::span<Real> dctx) {
    const ModelConfig& cfg = P.cfg;
    const ParamLayout& O = P.layout;
    const int L = s.length;
    const int H = cfg.d_hidden;
    const int V = cfg.vocab.size;
    const int D = cfg.struct_spec.dim;
    const bool with_grad = !grads.empty();

    if (s.seq_loss) {
        double nll_sum = 0.0;
        bool any = false;
        double lam = 0.0;
        std::vector<Real> logits(static_cast<size_t>(V));
        for (int i = 0; i < L; ++i) {
            if (s.seq_in[static_cast<size_t>(i)] != cfg.vocab.mask_id()) continue;
            if (!any) {
                lam = seq_reweight(std::max(1, s.t_s), spec.T);
                any = true;
            }
            const Real* c_i = cache.ctx.data() + i * H;
            detail::affine(c_i, P.at(O.proj_w), P.at(O.proj_b), logits.data(), 1, H, V);
            detail::softmax_row(logits.data(), V);
            const int target = s.seq_target[static_cast<size_t>(i)];
            if (target < 0 || target >= V)
                throw std::invalid_argument("loss: sequence target out of alphabet");
            const double p = std::max(static_cast<double>(logits[static_cast<size_t>(target)]),
                                      1e-300);
            nll_sum += -std::log(p);
            if (with_grad) {
                const Real scale = static_cast<Real>(spec.gamma * lam * inv_b);
                // dlogits = (softmax - onehot) * scale; reuse the prob buffer
                logits[static_cast<size_t>(target)] -= Real(1);
                for (int v = 0; v < V; ++v) logits[static_cast<size_t>(v)] *= scale;
                Real* g_pb = grads.data() + O.proj_b;
                Real* g_pw = grads.data() + O.proj_w;
                const Real* pw = P.at(O.proj_w);
                Real* dc = dctx.data() + i * H;
                for (int v = 0; v < V; ++v) g_pb[v] += logits[static_cast<size_t>(v)];
                for (int h = 0; h < H; ++h) {
                    const Real ch = c_i[h];
                    const Real* pwh = pw + h * V;
                    Real* gwh = g_pw + static_cast<size_t>(h) * static_cast<size_t>(V);
                    Real acc = 0;
                    for (int v = 0; v < V; ++v) {
                        gwh[v] += ch * logits[static_cast<size_t>(v)];
                        acc += pwh[v] * logits[static_cast<size_t>(v)];
                    }
                    dc[h] += acc;
                }
            }
        }
        if (any) sum_seq += lam * nll_sum;
    }

    if (s.struct_loss) {
        if (!spec.ddpm) throw std::invalid_argument("loss: DDPM schedule required for struct loss");
        int masked = 0;
        for (int i = 0; i < L; ++i) masked += (s.struct_mask[static_cast<size_t>(i)] != 0);
        std::vector<int> counts;
        if (s.draw_counts.empty()) {
            counts.assign(static_cast<size_t>(masked), std::max(1, s.draws_per_position));
        } else {
            counts = s.draw_counts;
        }
        if (counts.size() != static_cast<size_t>(masked))
            throw std::invalid_argument("loss: draw counts do not match masked positions");
        size_t n = 0;
        for (int c : counts) {
            if (c < 1) throw std::invalid_argument("loss: draw count must be >= 1");
            n += static_cast<size_t>(c);
        }
        if (s.t_prime.size() != n || s.eps.size() != n * static_cast<size_t>(D))
            throw std::invalid_argument("loss: (t', eps) draws do not match masked positions");
        if (masked > 0) {
            // one batched denoiser pass over every (position, draw) row; each
            // position's loss is the mean over its own draws
            std::vector<Real> z_noisy(n * static_cast<size_t>(D));
            std::vector<const Real*> ctx_rows(n);
            std::vector<Real*> dctx_rows(n);
            std::vector<Real> row_weight(n);   // 1 / draws at the row's position
            int k = 0;
            size_t draw = 0;
            for (int i = 0; i < L; ++i) {
                if (!s.struct_mask[static_cast<size_t>(i)]) continue;
                std::span<const Real> z0{
                    s.struct_target.data() + static_cast<size_t>(i) * static_cast<size_t>(D),
                    static_cast<size_t>(D)};
                const int R = counts[static_cast<size_t>(k)];
                for (int r = 0; r < R; ++r, ++draw) {
                    ddpm_forward_into<Real>(
                        z0, s.t_prime[draw],
                        {s.eps.data() + draw * static_cast<size_t>(D), static_cast<size_t>(D)},
                        *spec.ddpm,
                        {z_noisy.data() + draw * static_cast<size_t>(D), static_cast<size_t>(D)});
                    ctx_rows[draw] = cache.ctx.data() + i * H;
                    dctx_rows[draw] = dctx.empty() ? nullptr : dctx.data() + i * H;
                    row_weight[draw] = Real(1) / static_cast<Real>(R);
                }
                ++k;
            }
            DenoiserBatchCache<Real> dcache;
            std::vector<Real> eps_hat(n * static_cast<size_t>(D));
            denoise_forward_batch<Real>(P, z_noisy, s.t_prime, ctx_rows, dcache, eps_hat);

            double sq_sum = 0.0;
            for (size_t row = 0; row < n; ++row) {
                for (int j = 0; j < D; ++j) {
                    const size_t idx = row * static_cast<size_t>(D) + static_cast<size_t>(j);
                    const double diff =
                        static_cast<double>(s.eps[idx]) - static_cast<double>(eps_hat[idx]);
                    sq_sum += diff * diff * static_cast<double>(row_weight[row]);
                }
            }
            sum_struct += struct_reweight(s.t_z) * sq_sum;
            if (with_grad) {
                const Real base = static_cast<Real>(2.0 * struct_reweight(s.t_z) * inv_b);
                std::vector<Real> d_eps(eps_hat.size());
                for (size_t row = 0; row < n; ++row) {
                    const Real scale = base * row_weight[row];
                    for (int j = 0; j < D; ++j) {
                        const size_t idx = row * static_cast<size_t>(D) + static_cast<size_t>(j);
                        d_eps[idx] = scale * (eps_hat[idx] - s.eps[idx]);
                    }
                }
                denoise_backward_batch<Real>(P, dcache, d_eps, grads, dctx_rows);
            }
        }
    }
}

} // namespace detail

// Scalar loss and exact parameter gradients for the combined objective
// loss = mean_b [ struct term ] + gamma * mean_b [ seq term ].
template <typename Real>
ForwardBackwardResult<Real> forward_backward(const ModelParams<Real>& P,
                                             std::span<const BatchSampleT<Real>> batch,
                                             const LossSpec& spec) {
    ForwardBackwardResult<Real> out;
    out.grads.assign(P.layout.total, Real(0));
    if (batch.empty()) return out;

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double sum_seq = 0.0, sum_struct = 0.0;
    EncodeCache<Real> cache;
    for (const BatchSampleT<Real>& s : batch) {
        encode_cached<Real>(P, s.seq_in, s.struct_in, s.struct_mask, cache);
        std::vector<Real> dctx(static_cast<size_t>(s.length) * static_cast<size_t>(P.cfg.d_hidden),
                               Real(0));
        detail::heads_forward_backward<Real>(P, s, spec, cache, sum_seq, sum_struct, inv_b,
                                             out.grads, dctx);
        bool any = false;
        for (Real v : dctx)
            if (v != Real(0)) {
                any = true;
                break;
            }
        if (any) encode_backward<Real>(P, cache, dctx, out.grads);
    }
    out.loss_seq = sum_seq * inv_b;
    out.loss_struct = sum_struct * inv_b;
    out.loss = out.loss_struct + spec.gamma * out.loss_seq;
    if (!std::isfinite(out.loss))
        throw TrainingError("forward_backward: non-finite loss (seq=" + std::to_string(out.loss_seq) +
                            ", struct=" + std::to_string(out.loss_struct) + ")");
    return out;
}

// forward-only path used for finite differencing and evaluation
template <typename Real>
LossBreakdown compute_loss(const ModelParams<Real>& P, std::span<const BatchSampleT<Real>> batch,
                           const LossSpec& spec) {
    LossBreakdown out;
    if (batch.empty()) return out;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double sum_seq = 0.0, sum_struct = 0.0;
    EncodeCache<Real> cache;
    for (const BatchSampleT<Real>& s : batch) {
        encode_cached<Real>(P, s.seq_in, s.struct_in, s.struct_mask, cache);
        detail::heads_forward_backward<Real>(P, s, spec, cache, sum_seq, sum_struct, inv_b, {}, {});
    }
    out.loss_seq = sum_seq * inv_b;
    out.loss_struct = sum_struct * inv_b;
    out.loss = out.loss_struct + spec.gamma * out.loss_seq;
    return out;
}

} // namespace hdiff
