#include "hdiff/token_space.hpp"

#include <cmath>

namespace hdiff {

TokenScaler fit_scaler(std::span<const TrackPair> dataset) {
    if (dataset.empty()) throw std::invalid_argument("fit_scaler: empty dataset");

    double std_sum = 0.0;
    size_t n_tokens = 0;
    double elem_sum = 0.0;
    size_t n_elems = 0;

    for (const TrackPair& tp : dataset) {
        for (int i = 0; i < tp.length; ++i) {
            if (tp.struct_mask[static_cast<size_t>(i)])
                throw std::invalid_argument("fit_scaler: dataset contains masked positions");
            auto row = tp.struct_row(i);
            double mean = 0.0;
            for (float v : row) mean += v;
            mean /= static_cast<double>(row.size());
            double var = 0.0;
            for (float v : row) {
                const double d = static_cast<double>(v) - mean;
                var += d * d;
            }
            var /= static_cast<double>(row.size());
            std_sum += std::sqrt(var);
            ++n_tokens;
            for (float v : row) elem_sum += v;
            n_elems += row.size();
        }
    }

    TokenScaler s;
    s.scale = std_sum / static_cast<double>(n_tokens);
    s.fitted_mean = elem_sum / static_cast<double>(n_elems);

    double var_sum = 0.0;
    for (const TrackPair& tp : dataset)
        for (float v : tp.struct_tokens) {
            const double d = static_cast<double>(v) - s.fitted_mean;
            var_sum += d * d;
        }
    s.fitted_var = var_sum / static_cast<double>(n_elems);

    if (!(s.scale > 1e-12))
        throw std::invalid_argument("fit_scaler: degenerate dataset, per-token spread is ~0");
    return s;
}

std::vector<float> apply_scale(const TokenScaler& scaler, std::span<const float> z) {
    std::vector<float> out(z.begin(), z.end());
    apply_scale_inplace(scaler, out);
    return out;
}

std::vector<float> invert_scale(const TokenScaler& scaler, std::span<const float> z) {
    std::vector<float> out(z.begin(), z.end());
    invert_scale_inplace(scaler, out);
    return out;
}

void apply_scale_inplace(const TokenScaler& scaler, std::span<float> z) {
    if (!scaler.fitted()) throw std::invalid_argument("apply_scale: scaler not fitted");
    const float s = static_cast<float>(scaler.scale);
    for (float& v : z) v /= s;
}

void invert_scale_inplace(const TokenScaler& scaler, std::span<float> z) {
    if (!scaler.fitted()) throw std::invalid_argument("invert_scale: scaler not fitted");
    const float s = static_cast<float>(scaler.scale);
    for (float& v : z) v *= s;
}

} // namespace hdiff
