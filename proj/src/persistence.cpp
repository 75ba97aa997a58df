#include "hdiff/persistence.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace hdiff {

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

class Writer {
public:
    void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void magic(const char m[4]) { buf_.append(m, 4); }

    size_t size() const { return buf_.size(); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(std::string bytes, std::string path) : buf_(std::move(bytes)), path_(std::move(path)) {}

    uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
    uint16_t u16() {
        const char* p = take(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    uint32_t u32() {
        const char* p = take(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        const char* p = take(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    void expect_magic(const char m[4], const char* what) {
        const char* p = take(4);
        if (std::memcmp(p, m, 4) != 0)
            throw FormatError(path_ + ": bad magic, not a " + what + " file");
    }

    size_t pos() const { return pos_; }
    const std::string& bytes() const { return buf_; }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(path_ + ": " + what);
    }

private:
    const char* take(size_t n) {
        if (pos_ + n > buf_.size()) fail("truncated file");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::string buf_;
    std::string path_;
    size_t pos_ = 0;
};

void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError(path + ": cannot open for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw FormatError(path + ": write failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw FormatError(path + ": rename failed: " + ec.message());
}

std::string read_all(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw FormatError(path + ": cannot open");
    const std::streamsize n = is.tellg();
    is.seekg(0);
    std::string bytes(static_cast<size_t>(n), '\0');
    is.read(bytes.data(), n);
    if (!is) throw FormatError(path + ": read failed");
    return bytes;
}

} // namespace

void save_token_cache(const std::string& path, const ToyDataset& dataset) {
    Writer payload;
    for (const TrackPair& tp : dataset.samples) {
        payload.u32(static_cast<uint32_t>(tp.length));
        for (int s : tp.seq) payload.u16(static_cast<uint16_t>(s));
        for (float v : tp.struct_tokens) payload.f32(v);
        uint8_t bits = 0;
        for (int i = 0; i < tp.length; ++i) {
            if (tp.struct_mask[static_cast<size_t>(i)]) bits |= static_cast<uint8_t>(1u << (i % 8));
            if (i % 8 == 7) {
                payload.u8(bits);
                bits = 0;
            }
        }
        if (tp.length % 8 != 0) payload.u8(bits);
    }
    Writer header;
    header.magic("HDTK");
    header.u32(kTokenCacheVersion);
    header.u32(static_cast<uint32_t>(dataset.V));
    header.u32(static_cast<uint32_t>(dataset.dim));
    header.u64(dataset.samples.size());
    std::string bytes = header.bytes() + payload.bytes();
    Writer check;
    check.u64(fnv1a64(payload.bytes().data(), payload.bytes().size()));
    bytes += check.bytes();
    atomic_write(path, bytes);
}

ToyDataset load_token_cache(const std::string& path) {
    Reader r(read_all(path), path);
    r.expect_magic("HDTK", "token cache");
    const uint32_t version = r.u32();
    if (version != kTokenCacheVersion)
        r.fail("unsupported token cache version " + std::to_string(version));

    ToyDataset ds;
    ds.V = static_cast<int>(r.u32());
    ds.dim = static_cast<int>(r.u32());
    if (ds.V < 2) r.fail("invalid vocabulary size field");
    if (ds.dim < 1) r.fail("invalid struct dimension field");
    const uint64_t count = r.u64();

    const size_t payload_begin = r.pos();
    ds.samples.reserve(count);
    for (uint64_t s = 0; s < count; ++s) {
        const uint32_t L = r.u32();
        if (L < 1) r.fail("invalid sample length field");
        TrackPair tp(static_cast<int>(L), ds.dim);
        for (uint32_t i = 0; i < L; ++i) {
            const uint16_t tok = r.u16();
            if (tok > static_cast<uint16_t>(ds.V)) r.fail("sequence token id out of range");
            tp.seq[i] = tok;
        }
        for (size_t i = 0; i < tp.struct_tokens.size(); ++i) tp.struct_tokens[i] = r.f32();
        uint8_t bits = 0;
        for (uint32_t i = 0; i < L; ++i) {
            if (i % 8 == 0) bits = r.u8();
            tp.struct_mask[i] = (bits >> (i % 8)) & 1u;
        }
        ds.samples.push_back(std::move(tp));
    }
    const size_t payload_end = r.pos();
    const uint64_t expect = r.u64();
    const uint64_t got = fnv1a64(r.bytes().data() + payload_begin, payload_end - payload_begin);
    if (expect != got) r.fail("checksum mismatch");
    return ds;
}

void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const OptimizerState* opt, const CheckpointMeta& meta) {
    const ModelConfig& cfg = params.cfg;
    Writer header;
    header.magic("HDCK");
    header.u32(kCheckpointVersion);
    header.u32(static_cast<uint32_t>(cfg.d_hidden));
    header.u32(static_cast<uint32_t>(cfg.n_layers));
    header.u32(static_cast<uint32_t>(cfg.n_heads));
    header.u32(static_cast<uint32_t>(cfg.max_len));
    header.u32(static_cast<uint32_t>(cfg.vocab.size));
    header.u32(static_cast<uint32_t>(cfg.struct_spec.dim));
    header.u32(static_cast<uint32_t>(cfg.denoiser_hidden));
    header.u32(static_cast<uint32_t>(cfg.denoiser_layers));
    header.u32(static_cast<uint32_t>(cfg.time_embed_dim));
    header.u32(static_cast<uint32_t>(cfg.ffn_mult));
    header.f64(meta.scaler.scale);
    header.f64(meta.scaler.fitted_mean);
    header.f64(meta.scaler.fitted_var);
    header.u64(meta.train_digest);
    header.u8(opt ? 1 : 0);
    header.u64(meta.step);
    header.u64(params.flat.size());

    Writer payload;
    for (float v : params.flat) payload.f32(v);
    if (opt) {
        if (opt->m.size() != params.flat.size() || opt->v.size() != params.flat.size())
            throw FormatError(path + ": optimizer state does not match parameter count");
        payload.u64(static_cast<uint64_t>(opt->step));
        for (float v : opt->m) payload.f32(v);
        for (float v : opt->v) payload.f32(v);
    }

    std::string bytes = header.bytes() + payload.bytes();
    Writer check;
    check.u64(fnv1a64(payload.bytes().data(), payload.bytes().size()));
    bytes += check.bytes();
    atomic_write(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(read_all(path), path);
    r.expect_magic("HDCK", "checkpoint");
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        r.fail("unsupported checkpoint version " + std::to_string(version));

    ModelConfig cfg;
    cfg.d_hidden = static_cast<int>(r.u32());
    cfg.n_layers = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.max_len = static_cast<int>(r.u32());
    cfg.vocab.size = static_cast<int>(r.u32());
    cfg.struct_spec.dim = static_cast<int>(r.u32());
    cfg.denoiser_hidden = static_cast<int>(r.u32());
    cfg.denoiser_layers = static_cast<int>(r.u32());
    cfg.time_embed_dim = static_cast<int>(r.u32());
    cfg.ffn_mult = static_cast<int>(r.u32());
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        r.fail(std::string("invalid model config: ") + e.what());
    }

    Checkpoint ck;
    ck.meta.scaler.scale = r.f64();
    ck.meta.scaler.fitted_mean = r.f64();
    ck.meta.scaler.fitted_var = r.f64();
    ck.meta.train_digest = r.u64();
    const bool has_opt = r.u8() != 0;
    ck.meta.step = r.u64();
    const uint64_t n_params = r.u64();

    ck.params.cfg = cfg;
    ck.params.layout = ParamLayout::build(cfg);
    if (n_params != ck.params.layout.total) r.fail("parameter count does not match model config");

    const size_t payload_begin = r.pos();
    ck.params.flat.resize(n_params);
    for (uint64_t i = 0; i < n_params; ++i) ck.params.flat[i] = r.f32();
    if (has_opt) {
        OptimizerState opt;
        opt.step = static_cast<int64_t>(r.u64());
        opt.m.resize(n_params);
        opt.v.resize(n_params);
        for (uint64_t i = 0; i < n_params; ++i) opt.m[i] = r.f32();
        for (uint64_t i = 0; i < n_params; ++i) opt.v[i] = r.f32();
        ck.opt = std::move(opt);
    }
    const size_t payload_end = r.pos();
    const uint64_t expect = r.u64();
    const uint64_t got = fnv1a64(r.bytes().data() + payload_begin, payload_end - payload_begin);
    if (expect != got) r.fail("checksum mismatch");
    return ck;
}

void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::string text;
    for (const auto& [k, v] : entries) text += k + " = " + v + "\n";
    atomic_write(path, text);
}

} // namespace hdiff
