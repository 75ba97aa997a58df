#pragma once

// Token alphabets, aligned track containers, and the scalar numerical scaler
// for continuous tokens.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace hdiff {

// Discrete alphabet of `size` real symbols 0..size-1 plus a reserved absorbing
// mask id at index `size`. The mask id never appears in a completed sample.
struct Vocabulary {
    int size = 8;

    int mask_id() const { return size; }

    void validate() const {
        if (size < 2) throw std::invalid_argument("Vocabulary: size must be >= 2");
    }
};

struct ContinuousTokenSpec {
    int dim = 4;

    void validate() const {
        if (dim < 1) throw std::invalid_argument("ContinuousTokenSpec: dim must be >= 1");
    }
};

// One sample: a discrete track and a continuous track, position-aligned.
// A discrete position is masked by storing the vocabulary's mask id in `seq`;
// a continuous position is masked via the out-of-band `struct_mask` flag
// (any real vector is a legal token, so there is no in-band sentinel).
// When struct_mask[i] is set, the contents of struct_tokens at i are ignored
// by every consumer.
struct TrackPair {
    int length = 0;
    int dim = 0;
    std::vector<int> seq;               // [length], ids in [0, V] (V = mask id)
    std::vector<float> struct_tokens;   // [length * dim], row-major
    std::vector<uint8_t> struct_mask;   // [length], 1 = absorbing state

    TrackPair() = default;
    TrackPair(int length_, int dim_)
        : length(length_),
          dim(dim_),
          seq(static_cast<size_t>(length_), 0),
          struct_tokens(static_cast<size_t>(length_) * static_cast<size_t>(dim_), 0.0f),
          struct_mask(static_cast<size_t>(length_), 0) {
        if (length_ < 1) throw std::invalid_argument("TrackPair: length must be >= 1");
        if (dim_ < 1) throw std::invalid_argument("TrackPair: dim must be >= 1");
    }

    std::span<float> struct_row(int i) {
        return {struct_tokens.data() + static_cast<size_t>(i) * static_cast<size_t>(dim),
                static_cast<size_t>(dim)};
    }
    std::span<const float> struct_row(int i) const {
        return {struct_tokens.data() + static_cast<size_t>(i) * static_cast<size_t>(dim),
                static_cast<size_t>(dim)};
    }

    bool has_any_mask(int vocab_mask_id) const {
        for (int s : seq)
            if (s == vocab_mask_id) return true;
        for (uint8_t m : struct_mask)
            if (m) return true;
        return false;
    }
};

// Single global scalar divisor for continuous tokens. The fitted mean and
// variance are recorded for reporting only; the mean is deliberately not
// subtracted.
struct TokenScaler {
    double scale = 0.0;
    double fitted_mean = 0.0;
    double fitted_var = 0.0;

    bool fitted() const { return scale > 0.0; }

    static TokenScaler identity() { return TokenScaler{1.0, 0.0, 1.0}; }
};

// scale = mean over tokens of the per-token standard deviation of the token's
// entries. Throws on an empty dataset, on masked positions, and on degenerate
// (near-zero spread) data where downstream division would be unsafe.
TokenScaler fit_scaler(std::span<const TrackPair> dataset);

std::vector<float> apply_scale(const TokenScaler& scaler, std::span<const float> z);
std::vector<float> invert_scale(const TokenScaler& scaler, std::span<const float> z);

void apply_scale_inplace(const TokenScaler& scaler, std::span<float> z);
void invert_scale_inplace(const TokenScaler& scaler, std::span<float> z);

} // namespace hdiff
