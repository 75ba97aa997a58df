#include "hdiff/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "hdiff/persistence.hpp"

namespace hdiff {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad unsigned integer for " + key + ": '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad real for " + key + ": '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty() || out.empty()) out.push_back(trim(cur));
    return out;
}

std::vector<double> to_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const std::string& item : split_list(v)) out.push_back(to_double(key, item));
    return out;
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (const std::string& item : split_list(v)) out.push_back(to_int(key, item));
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_list(const std::vector<double>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    return out;
}

std::string fmt_list(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

} // namespace

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig rc;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (rc.explicit_keys.count(key))
            throw std::invalid_argument("config: duplicate key " + key);
        rc.explicit_keys.insert(key);

        if (key == "world.seed") rc.world_seed = to_u64(key, val);
        else if (key == "world.vocab") rc.vocab = to_int(key, val);
        else if (key == "world.d_struct") rc.d_struct = to_int(key, val);
        else if (key == "world.noise_sigma") rc.noise_sigma = to_double(key, val);
        else if (key == "data.n_samples") rc.n_samples = to_int(key, val);
        else if (key == "data.len_min") rc.len_min = to_int(key, val);
        else if (key == "data.len_max") rc.len_max = to_int(key, val);
        else if (key == "data.seed") rc.data_seed = to_u64(key, val);
        else if (key == "model.d_hidden") rc.model.d_hidden = to_int(key, val);
        else if (key == "model.n_layers") rc.model.n_layers = to_int(key, val);
        else if (key == "model.n_heads") rc.model.n_heads = to_int(key, val);
        else if (key == "model.max_len") rc.model.max_len = to_int(key, val);
        else if (key == "model.denoiser_hidden") rc.model.denoiser_hidden = to_int(key, val);
        else if (key == "model.denoiser_layers") rc.model.denoiser_layers = to_int(key, val);
        else if (key == "model.time_embed_dim") rc.model.time_embed_dim = to_int(key, val);
        else if (key == "model.ffn_mult") rc.model.ffn_mult = to_int(key, val);
        else if (key == "train.gamma") rc.train.gamma = to_double(key, val);
        else if (key == "train.T") rc.train.T = to_int(key, val);
        else if (key == "train.T_prime") rc.train.T_prime = to_int(key, val);
        else if (key == "train.beta_start") rc.train.beta_start = to_double(key, val);
        else if (key == "train.beta_end") rc.train.beta_end = to_double(key, val);
        else if (key == "train.mix_seq") rc.train.mix.p_seq = to_double(key, val);
        else if (key == "train.mix_struct") rc.train.mix.p_struct = to_double(key, val);
        else if (key == "train.mix_cogen") rc.train.mix.p_cogen = to_double(key, val);
        else if (key == "train.batch_size") rc.train.batch_size = to_int(key, val);
        else if (key == "train.steps") rc.train.steps = to_int(key, val);
        else if (key == "train.lr_peak") rc.train.lr_peak = to_double(key, val);
        else if (key == "train.lr_floor") rc.train.lr_floor = to_double(key, val);
        else if (key == "train.warmup_frac") rc.train.warmup_frac = to_double(key, val);
        else if (key == "train.adam_beta1") rc.train.adam_beta1 = to_double(key, val);
        else if (key == "train.adam_beta2") rc.train.adam_beta2 = to_double(key, val);
        else if (key == "train.adam_eps") rc.train.adam_eps = to_double(key, val);
        else if (key == "train.weight_decay") rc.train.weight_decay = to_double(key, val);
        else if (key == "train.max_grad_norm") rc.train.max_grad_norm = to_double(key, val);
        else if (key == "train.draws_per_position") rc.train.draws_per_position = to_int(key, val);
        else if (key == "train.draws_boost") rc.train.draws_boost = to_int(key, val);
        else if (key == "train.seed") rc.train.seed = to_u64(key, val);
        else if (key == "train.checkpoint_every") rc.train.checkpoint_every = to_int(key, val);
        else if (key == "train.log_every") rc.train.log_every = to_int(key, val);
        else if (key == "sample.length") rc.sample_length = to_int(key, val);
        else if (key == "sample.count") rc.sample_count = to_int(key, val);
        else if (key == "sample.T_lm") rc.sample_T_lm = to_int(key, val);
        else if (key == "sample.T_prime") rc.sample_T_prime = to_int(key, val);
        else if (key == "sample.tau_s") rc.sample_tau_s = to_double(key, val);
        else if (key == "sample.tau_z") rc.sample_tau_z = to_double(key, val);
        else if (key == "sample.cfg_scale") rc.sample_cfg_scale = to_double(key, val);
        else if (key == "sample.anti_repeat") rc.sample_anti_repeat = to_int(key, val);
        else if (key == "sample.maintain_motif") rc.sample_maintain_motif = to_bool(key, val);
        else if (key == "sample.unmask") {
            if (val == "topk") rc.sample_unmask = UnmaskStrategy::TopK;
            else if (val == "random") rc.sample_unmask = UnmaskStrategy::Random;
            else throw std::invalid_argument("config: sample.unmask must be topk or random");
        }
        else if (key == "eval.thresholds") rc.eval_thresholds = to_double_list(key, val);
        else if (key == "sweep.tau_z") rc.sweep_tau_z = to_double_list(key, val);
        else if (key == "sweep.cfg_scale") rc.sweep_cfg_scale = to_double_list(key, val);
        else if (key == "sweep.T_lm") rc.sweep_T_lm = to_int_list(key, val);
        else if (key == "sweep.n_samples") rc.sweep_n_samples = to_int(key, val);
        else throw std::invalid_argument("config: unknown key " + key);
    }
    return rc;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return from_text(os.str());
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    os << "world.seed = " << world_seed << "\n";
    os << "world.vocab = " << vocab << "\n";
    os << "world.d_struct = " << d_struct << "\n";
    os << "world.noise_sigma = " << fmt(noise_sigma) << "\n";
    os << "data.n_samples = " << n_samples << "\n";
    os << "data.len_min = " << len_min << "\n";
    os << "data.len_max = " << len_max << "\n";
    os << "data.seed = " << data_seed << "\n";
    os << "model.d_hidden = " << model.d_hidden << "\n";
    os << "model.n_layers = " << model.n_layers << "\n";
    os << "model.n_heads = " << model.n_heads << "\n";
    os << "model.max_len = " << model.max_len << "\n";
    os << "model.denoiser_hidden = " << model.denoiser_hidden << "\n";
    os << "model.denoiser_layers = " << model.denoiser_layers << "\n";
    os << "model.time_embed_dim = " << model.time_embed_dim << "\n";
    os << "model.ffn_mult = " << model.ffn_mult << "\n";
    os << "train.gamma = " << fmt(train.gamma) << "\n";
    os << "train.T = " << train.T << "\n";
    os << "train.T_prime = " << train.T_prime << "\n";
    os << "train.beta_start = " << fmt(train.beta_start) << "\n";
    os << "train.beta_end = " << fmt(train.beta_end) << "\n";
    os << "train.mix_seq = " << fmt(train.mix.p_seq) << "\n";
    os << "train.mix_struct = " << fmt(train.mix.p_struct) << "\n";
    os << "train.mix_cogen = " << fmt(train.mix.p_cogen) << "\n";
    os << "train.batch_size = " << train.batch_size << "\n";
    os << "train.steps = " << train.steps << "\n";
    os << "train.lr_peak = " << fmt(train.lr_peak) << "\n";
    os << "train.lr_floor = " << fmt(train.lr_floor) << "\n";
    os << "train.warmup_frac = " << fmt(train.warmup_frac) << "\n";
    os << "train.adam_beta1 = " << fmt(train.adam_beta1) << "\n";
    os << "train.adam_beta2 = " << fmt(train.adam_beta2) << "\n";
    os << "train.adam_eps = " << fmt(train.adam_eps) << "\n";
    os << "train.weight_decay = " << fmt(train.weight_decay) << "\n";
    os << "train.max_grad_norm = " << fmt(train.max_grad_norm) << "\n";
    os << "train.draws_per_position = " << train.draws_per_position << "\n";
    os << "train.draws_boost = " << train.draws_boost << "\n";
    os << "train.seed = " << train.seed << "\n";
    os << "train.checkpoint_every = " << train.checkpoint_every << "\n";
    os << "train.log_every = " << train.log_every << "\n";
    os << "sample.length = " << sample_length << "\n";
    os << "sample.count = " << sample_count << "\n";
    os << "sample.T_lm = " << sample_T_lm << "\n";
    os << "sample.T_prime = " << sample_T_prime << "\n";
    os << "sample.tau_s = " << fmt(sample_tau_s) << "\n";
    os << "sample.tau_z = " << fmt(sample_tau_z) << "\n";
    os << "sample.cfg_scale = " << fmt(sample_cfg_scale) << "\n";
    os << "sample.unmask = " << (sample_unmask == UnmaskStrategy::TopK ? "topk" : "random") << "\n";
    os << "sample.anti_repeat = " << sample_anti_repeat << "\n";
    os << "sample.maintain_motif = " << (sample_maintain_motif ? "true" : "false") << "\n";
    os << "eval.thresholds = " << fmt_list(eval_thresholds) << "\n";
    os << "sweep.tau_z = " << fmt_list(sweep_tau_z) << "\n";
    os << "sweep.cfg_scale = " << fmt_list(sweep_cfg_scale) << "\n";
    os << "sweep.T_lm = " << fmt_list(sweep_T_lm) << "\n";
    os << "sweep.n_samples = " << sweep_n_samples << "\n";
    return os.str();
}

uint64_t RunConfig::digest() const {
    const std::string text = to_text();
    return fnv1a64(text.data(), text.size());
}

ModelConfig RunConfig::model_config() const {
    ModelConfig cfg = model;
    cfg.vocab.size = vocab;
    cfg.struct_spec.dim = d_struct;
    cfg.validate();
    return cfg;
}

SampleOptions RunConfig::sample_options(SampleMode mode, int length, uint64_t seed) const {
    SampleOptions o = SampleOptions::defaults_for(mode, length);
    o.T_prime = train.T_prime;
    o.beta_start = train.beta_start;
    o.beta_end = train.beta_end;
    o.seed = seed;
    if (is_set("sample.T_lm")) o.T_lm = sample_T_lm;
    if (is_set("sample.T_prime")) o.T_prime = sample_T_prime;
    if (is_set("sample.tau_s")) o.tau_s = sample_tau_s;
    if (is_set("sample.tau_z")) o.tau_z = sample_tau_z;
    if (is_set("sample.cfg_scale")) o.cfg_scale = sample_cfg_scale;
    if (is_set("sample.unmask")) o.unmask = sample_unmask;
    if (is_set("sample.anti_repeat")) o.anti_repeat = sample_anti_repeat;
    if (is_set("sample.maintain_motif")) o.maintain_motif = sample_maintain_motif;
    return o;
}

} // namespace hdiff
