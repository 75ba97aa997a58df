#include "hdiff/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace hdiff {

std::vector<double> residue_frequencies(std::span<const std::vector<int>> seqs, int V) {
    if (seqs.empty()) throw std::invalid_argument("residue_frequencies: no sequences");
    std::vector<double> freq(static_cast<size_t>(V), 0.0);
    size_t total = 0;
    for (const auto& s : seqs) {
        for (int tok : s) {
            if (tok < 0 || tok >= V)
                throw std::invalid_argument("residue_frequencies: incomplete sequence");
            freq[static_cast<size_t>(tok)] += 1.0;
            ++total;
        }
    }
    for (double& f : freq) f /= static_cast<double>(total);
    return freq;
}

int cluster_count(std::span<const std::vector<float>> structs, int length, int dim,
                  double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("cluster_count: threshold must be > 0");
    const size_t expect = static_cast<size_t>(length) * static_cast<size_t>(dim);
    for (const auto& s : structs)
        if (s.size() != expect)
            throw std::invalid_argument("cluster_count: tracks have mixed lengths");

    auto distance = [&](const std::vector<float>& a, const std::vector<float>& b) {
        double sum = 0.0;
        for (int i = 0; i < length; ++i) {
            double ss = 0.0;
            for (int j = 0; j < dim; ++j) {
                const size_t idx = static_cast<size_t>(i) * static_cast<size_t>(dim) +
                                   static_cast<size_t>(j);
                const double d = static_cast<double>(a[idx]) - static_cast<double>(b[idx]);
                ss += d * d;
            }
            sum += std::sqrt(ss);
        }
        return sum / static_cast<double>(length);
    };

    std::vector<size_t> leaders;
    for (size_t i = 0; i < structs.size(); ++i) {
        bool joined = false;
        for (size_t lead : leaders) {
            if (distance(structs[i], structs[lead]) <= threshold) {
                joined = true;
                break;
            }
        }
        if (!joined) leaders.push_back(i);
    }
    return static_cast<int>(leaders.size());
}

EvalReport eval_suite(const ToyWorld& world, std::span<const GenerationResult> samples,
                      std::span<const double> thresholds) {
    if (samples.empty()) throw std::invalid_argument("eval_suite: no samples");

    EvalReport r;
    r.n_samples = static_cast<int>(samples.size());

    std::vector<std::vector<int>> seqs;
    std::vector<std::vector<float>> structs;
    seqs.reserve(samples.size());
    structs.reserve(samples.size());
    for (const auto& g : samples) {
        seqs.push_back(g.seq);
        structs.push_back(g.struct_tokens);
    }
    r.token_frequencies = residue_frequencies(seqs, world.V);

    std::vector<double> sc;
    sc.reserve(samples.size());
    double pooled_ss = 0.0;
    size_t pooled_positions = 0;
    size_t invfold_hits = 0, invfold_total = 0;
    for (const auto& g : samples) {
        sc.push_back(self_consistency(world, g.seq, g.struct_tokens));
        const std::vector<float> expect = oracle_fold(world, g.seq);
        for (size_t i = 0; i < expect.size(); ++i) {
            const double d = static_cast<double>(g.struct_tokens[i]) - static_cast<double>(expect[i]);
            pooled_ss += d * d;
        }
        pooled_positions += static_cast<size_t>(g.length);

        const std::vector<int> map_seq = oracle_inverse_fold(world, g.struct_tokens, g.length);
        for (int i = 0; i < g.length; ++i) {
            invfold_hits += (map_seq[static_cast<size_t>(i)] == g.seq[static_cast<size_t>(i)]);
            ++invfold_total;
        }
    }
    double mean = 0.0;
    for (double v : sc) mean += v;
    r.mean_self_consistency = mean / static_cast<double>(sc.size());
    std::vector<double> sorted = sc;
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    r.median_self_consistency = (n % 2 == 1) ? sorted[n / 2]
                                             : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    r.fold_rms = std::sqrt(pooled_ss / static_cast<double>(pooled_positions));
    r.invfold_accuracy = static_cast<double>(invfold_hits) / static_cast<double>(invfold_total);

    // clustering pools samples of one length; mixed-length sets are grouped
    // by length and the per-group counts summed
    std::map<int, std::vector<std::vector<float>>> by_length;
    for (const auto& g : samples) by_length[g.length].push_back(g.struct_tokens);
    for (double th : thresholds) {
        int total = 0;
        for (const auto& [L, group] : by_length)
            total += cluster_count(group, L, world.dim, th);
        r.cluster_counts.emplace_back(th, total);
    }
    return r;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os << "n_samples = " << n_samples << "\n";
    os << "mean_self_consistency = " << fmt_double(mean_self_consistency) << "\n";
    os << "median_self_consistency = " << fmt_double(median_self_consistency) << "\n";
    os << "fold_rms = " << fmt_double(fold_rms) << "\n";
    os << "invfold_accuracy = " << fmt_double(invfold_accuracy) << "\n";
    for (size_t v = 0; v < token_frequencies.size(); ++v)
        os << "token_frequency." << v << " = " << fmt_double(token_frequencies[v]) << "\n";
    for (const auto& [th, count] : cluster_counts)
        os << "clusters@" << fmt_double(th) << " = " << count << "\n";
    return os.str();
}

EvalReport EvalReport::from_text(const std::string& text) {
    EvalReport r;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find(" = ");
        if (eq == std::string::npos)
            throw std::invalid_argument("EvalReport: malformed line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 3);
        if (key == "n_samples") {
            r.n_samples = std::stoi(val);
        } else if (key == "mean_self_consistency") {
            r.mean_self_consistency = std::stod(val);
        } else if (key == "median_self_consistency") {
            r.median_self_consistency = std::stod(val);
        } else if (key == "fold_rms") {
            r.fold_rms = std::stod(val);
        } else if (key == "invfold_accuracy") {
            r.invfold_accuracy = std::stod(val);
        } else if (key.rfind("token_frequency.", 0) == 0) {
            const size_t idx = std::stoul(key.substr(16));
            if (r.token_frequencies.size() <= idx) r.token_frequencies.resize(idx + 1, 0.0);
            r.token_frequencies[idx] = std::stod(val);
        } else if (key.rfind("clusters@", 0) == 0) {
            r.cluster_counts.emplace_back(std::stod(key.substr(9)), std::stoi(val));
        } else {
            throw std::invalid_argument("EvalReport: unknown key: " + key);
        }
    }
    return r;
}

} // namespace hdiff
