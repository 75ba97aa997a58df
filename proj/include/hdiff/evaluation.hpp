#pragma once

// Distribution statistics, greedy leader clustering, and oracle-based
// self-consistency reports over generated samples.

#include <span>
#include <string>
#include <vector>

#include "hdiff/sampling.hpp"
#include "hdiff/toyworld.hpp"

namespace hdiff {

struct EvalReport {
    int n_samples = 0;
    std::vector<double> token_frequencies;           // [V], sums to 1
    double mean_self_consistency = 0.0;
    double median_self_consistency = 0.0;
    std::vector<std::pair<double, int>> cluster_counts;  // (threshold, count)
    double fold_rms = 0.0;          // pooled RMS of struct vs oracle fold
    double invfold_accuracy = 0.0;  // token agreement with the MAP oracle

    // lossless key-value text round trip
    std::string to_text() const;
    static EvalReport from_text(const std::string& text);
};

// normalized token counts pooled over all positions of all sequences
std::vector<double> residue_frequencies(std::span<const std::vector<int>> seqs, int V);

// Greedy leader clustering over mean per-position Euclidean distance: scan in
// input order, join the first leader within `threshold`, else found a new
// cluster. All tracks must share one length.
int cluster_count(std::span<const std::vector<float>> structs, int length, int dim,
                  double threshold);

EvalReport eval_suite(const ToyWorld& world, std::span<const GenerationResult> samples,
                      std::span<const double> thresholds);

} // namespace hdiff
