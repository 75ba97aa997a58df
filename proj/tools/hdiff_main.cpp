// Command-line entry points: dataset generation, training, the four sampling
// modes, evaluation, and hyperparameter sweeps. Every run writes a manifest
// sufficient to reproduce it (config snapshot + seed + format versions).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "hdiff/evaluation.hpp"
#include "hdiff/persistence.hpp"
#include "hdiff/run_config.hpp"
#include "hdiff/sampling.hpp"
#include "hdiff/toyworld.hpp"
#include "hdiff/training.hpp"

namespace {

using namespace hdiff;

struct CommonArgs {
    std::string config_path;
    std::string out;
    uint64_t seed = 0;
    bool seed_set = false;
    bool quiet = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "run configuration file");
    sub->add_option("--out", args.out, "output path")->required();
    sub->add_option("--seed", args.seed, "seed override")
        ->each([&args](const std::string&) { args.seed_set = true; });
    sub->add_flag("--quiet", args.quiet, "suppress progress output");
}

RunConfig load_config(const CommonArgs& args) {
    if (args.config_path.empty()) return RunConfig{};
    return RunConfig::load(args.config_path);
}

void say(const CommonArgs& args, const std::string& msg) {
    if (!args.quiet) std::cout << msg << "\n";
}

std::vector<std::pair<std::string, std::string>> manifest_base(const std::string& command,
                                                               const RunConfig& rc,
                                                               uint64_t seed) {
    std::vector<std::pair<std::string, std::string>> m;
    m.emplace_back("command", command);
    m.emplace_back("seed", std::to_string(seed));
    m.emplace_back("format.token_cache_version", std::to_string(kTokenCacheVersion));
    m.emplace_back("format.checkpoint_version", std::to_string(kCheckpointVersion));
    std::istringstream cfg(rc.to_text());
    std::string line;
    while (std::getline(cfg, line)) {
        const size_t eq = line.find(" = ");
        m.emplace_back(line.substr(0, eq), line.substr(eq + 3));
    }
    return m;
}

void append_resolved(std::vector<std::pair<std::string, std::string>>& m,
                     const SampleOptions& o) {
    char buf[64];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    m.emplace_back("resolved.T_lm", std::to_string(o.T_lm));
    m.emplace_back("resolved.T_prime", std::to_string(o.T_prime));
    m.emplace_back("resolved.tau_s", num(o.tau_s));
    m.emplace_back("resolved.tau_z", num(o.tau_z));
    m.emplace_back("resolved.cfg_scale", num(o.cfg_scale));
    m.emplace_back("resolved.unmask", o.unmask == UnmaskStrategy::TopK ? "topk" : "random");
    m.emplace_back("resolved.anti_repeat", std::to_string(o.anti_repeat));
    m.emplace_back("resolved.maintain_motif", o.maintain_motif ? "true" : "false");
}

GenerationResult to_generation(const TrackPair& tp, int vocab) {
    GenerationResult g;
    g.length = tp.length;
    g.dim = tp.dim;
    g.seq = tp.seq;
    g.struct_tokens = tp.struct_tokens;
    for (int s : g.seq)
        if (s < 0 || s >= vocab)
            throw std::invalid_argument("sample is incomplete: sequence contains mask tokens");
    for (uint8_t f : tp.struct_mask)
        if (f) throw std::invalid_argument("sample is incomplete: structure track has masks");
    return g;
}

TrackPair to_track(const GenerationResult& g) {
    TrackPair tp(g.length, g.dim);
    tp.seq = g.seq;
    tp.struct_tokens = g.struct_tokens;
    return tp;
}

int cmd_gen_data(const CommonArgs& args) {
    const RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : rc.world_seed;
    const ToyWorld world = gen_world(seed, rc.vocab, rc.d_struct, rc.noise_sigma);
    const ToyDataset ds = make_dataset(world, rc.n_samples, rc.len_min, rc.len_max, rc.data_seed);
    save_token_cache(args.out, ds);
    auto m = manifest_base("gen-data", rc, seed);
    m.emplace_back("world.actual_seed", std::to_string(seed));
    m.emplace_back("output", args.out);
    write_manifest(args.out + ".manifest", m);
    say(args, "wrote " + std::to_string(ds.samples.size()) + " samples to " + args.out);
    return 0;
}

int cmd_train(const CommonArgs& args, const std::string& data_path) {
    RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : rc.train.seed;
    rc.train.seed = seed;

    ToyDataset ds = load_token_cache(data_path);
    ds.world_seed = rc.world_seed;
    const ModelConfig mcfg = rc.model_config();
    if (ds.V != mcfg.vocab.size || ds.dim != mcfg.struct_spec.dim)
        throw std::invalid_argument("train: dataset alphabet/dimension do not match the config");
    const TokenScaler scaler = fit_scaler(ds.samples);

    const std::string metrics_path = args.out + ".metrics.tsv";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("train: cannot open " + metrics_path);
    metrics << "step\tlr\tloss_total\tloss_seq\tloss_struct\tgrad_norm\twall_ms\n";

    TrainHooks hooks;
    hooks.on_metrics = [&](const TrainMetricsRow& row) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%lld\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.1f",
                      static_cast<long long>(row.step), row.lr, row.loss_total, row.loss_seq,
                      row.loss_struct, row.grad_norm, row.wall_ms);
        metrics << buf << "\n";
        metrics.flush();
        if (!args.quiet) std::cout << "step " << row.step << " loss " << row.loss_total << "\n";
    };
    CheckpointMeta meta;
    meta.train_digest = rc.digest();
    meta.scaler = scaler;
    hooks.on_checkpoint = [&](const ModelParams<float>& p, const OptimizerState& opt,
                              int64_t step) {
        meta.step = static_cast<uint64_t>(step);
        save_checkpoint(args.out, p, &opt, meta);
    };

    const TrainResult res = train(rc.train, mcfg, ds, scaler, hooks);
    say(args, "trained " + std::to_string(res.steps_done) + " steps, loss " +
                  std::to_string(res.first_loss) + " -> " + std::to_string(res.final_loss));

    auto m = manifest_base("train", rc, seed);
    m.emplace_back("input.data", data_path);
    m.emplace_back("output", args.out);
    m.emplace_back("output.metrics", metrics_path);
    m.emplace_back("scaler.scale", std::to_string(scaler.scale));
    write_manifest(args.out + ".manifest", m);
    return 0;
}

int cmd_sample(const CommonArgs& args, const std::string& ckpt_path, int n_override,
               int len_override) {
    const RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : 0;
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const int n = n_override > 0 ? n_override : rc.sample_count;
    const int L = len_override > 0 ? len_override : rc.sample_length;

    ToyDataset out;
    out.V = ck.params.cfg.vocab.size;
    out.dim = ck.params.cfg.struct_spec.dim;
    out.world_seed = rc.world_seed;
    for (int i = 0; i < n; ++i) {
        SampleOptions opts =
            rc.sample_options(SampleMode::CoGen, L, derive_seed(seed, Stream::RunSeed,
                                                                static_cast<uint64_t>(i)));
        out.samples.push_back(to_track(cogenerate(ck.params, ck.meta.scaler, opts)));
        say(args, "co-generated sample " + std::to_string(i + 1) + "/" + std::to_string(n));
    }
    save_token_cache(args.out, out);
    auto m = manifest_base("sample", rc, seed);
    append_resolved(m, rc.sample_options(SampleMode::CoGen, L, seed));
    m.emplace_back("input.checkpoint", ckpt_path);
    m.emplace_back("sample.actual_count", std::to_string(n));
    m.emplace_back("sample.actual_length", std::to_string(L));
    m.emplace_back("output", args.out);
    write_manifest(args.out + ".manifest", m);
    return 0;
}

int cmd_fold(const CommonArgs& args, const std::string& ckpt_path, const std::string& in_path,
             int count) {
    const RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : 0;
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const ToyDataset in = load_token_cache(in_path);
    const int n = count > 0 ? std::min<int>(count, static_cast<int>(in.samples.size()))
                            : static_cast<int>(in.samples.size());

    ToyDataset out;
    out.V = in.V;
    out.dim = in.dim;
    out.world_seed = rc.world_seed;
    for (int i = 0; i < n; ++i) {
        const TrackPair& tp = in.samples[static_cast<size_t>(i)];
        SampleOptions opts = rc.sample_options(
            SampleMode::Fold, tp.length, derive_seed(seed, Stream::RunSeed, static_cast<uint64_t>(i)));
        TrackPair pred(tp.length, tp.dim);
        pred.seq = tp.seq;
        pred.struct_tokens = fold(ck.params, ck.meta.scaler, tp.seq, opts);
        out.samples.push_back(std::move(pred));
    }
    save_token_cache(args.out, out);
    auto m = manifest_base("fold", rc, seed);
    append_resolved(m, rc.sample_options(SampleMode::Fold, 1, seed));
    m.emplace_back("input.checkpoint", ckpt_path);
    m.emplace_back("input.data", in_path);
    m.emplace_back("fold.count", std::to_string(n));
    m.emplace_back("output", args.out);
    write_manifest(args.out + ".manifest", m);
    say(args, "folded " + std::to_string(n) + " sequences");
    return 0;
}

int cmd_invfold(const CommonArgs& args, const std::string& ckpt_path, const std::string& in_path,
                int count) {
    const RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : 0;
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const ToyDataset in = load_token_cache(in_path);
    const int n = count > 0 ? std::min<int>(count, static_cast<int>(in.samples.size()))
                            : static_cast<int>(in.samples.size());

    ToyDataset out;
    out.V = in.V;
    out.dim = in.dim;
    out.world_seed = rc.world_seed;
    for (int i = 0; i < n; ++i) {
        const TrackPair& tp = in.samples[static_cast<size_t>(i)];
        SampleOptions opts = rc.sample_options(
            SampleMode::InverseFold, tp.length,
            derive_seed(seed, Stream::RunSeed, static_cast<uint64_t>(i)));
        TrackPair pred(tp.length, tp.dim);
        pred.seq = inverse_fold(ck.params, ck.meta.scaler, tp.struct_tokens, tp.length, opts);
        pred.struct_tokens = tp.struct_tokens;
        out.samples.push_back(std::move(pred));
    }
    save_token_cache(args.out, out);
    auto m = manifest_base("invfold", rc, seed);
    append_resolved(m, rc.sample_options(SampleMode::InverseFold, 1, seed));
    m.emplace_back("input.checkpoint", ckpt_path);
    m.emplace_back("input.data", in_path);
    m.emplace_back("invfold.count", std::to_string(n));
    m.emplace_back("output", args.out);
    write_manifest(args.out + ".manifest", m);
    say(args, "inverse-folded " + std::to_string(n) + " structures");
    return 0;
}

int cmd_scaffold(const CommonArgs& args, const std::string& ckpt_path,
                 const std::string& motif_path, size_t motif_index,
                 const std::string& motif_pos_csv, int n_override, int len_override) {
    const RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : 0;
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const ToyDataset motif_ds = load_token_cache(motif_path);
    if (motif_index >= motif_ds.samples.size())
        throw std::invalid_argument("scaffold: motif sample index out of range");
    const TrackPair& src = motif_ds.samples[motif_index];

    MotifSpec motif;
    for (const auto& item : [&] {
             std::vector<std::string> parts;
             std::string cur;
             for (char c : motif_pos_csv) {
                 if (c == ',') {
                     parts.push_back(cur);
                     cur.clear();
                 } else {
                     cur += c;
                 }
             }
             parts.push_back(cur);
             return parts;
         }()) {
        motif.positions.push_back(std::stoi(item));
    }
    const int l = static_cast<int>(motif.positions.size());
    if (l > src.length)
        throw std::invalid_argument("scaffold: motif longer than the source sample");
    motif.seq.assign(src.seq.begin(), src.seq.begin() + l);
    motif.struct_tokens.assign(src.struct_tokens.begin(),
                               src.struct_tokens.begin() +
                                   static_cast<size_t>(l) * static_cast<size_t>(src.dim));

    const int n = n_override > 0 ? n_override : rc.sample_count;
    const int L = len_override > 0 ? len_override : rc.sample_length;

    ToyDataset out;
    out.V = ck.params.cfg.vocab.size;
    out.dim = ck.params.cfg.struct_spec.dim;
    out.world_seed = rc.world_seed;
    for (int i = 0; i < n; ++i) {
        SampleOptions opts = rc.sample_options(
            SampleMode::Scaffold, L, derive_seed(seed, Stream::RunSeed, static_cast<uint64_t>(i)));
        opts.motif = motif;
        out.samples.push_back(to_track(scaffold(ck.params, ck.meta.scaler, opts)));
    }
    save_token_cache(args.out, out);
    auto m = manifest_base("scaffold", rc, seed);
    append_resolved(m, rc.sample_options(SampleMode::Scaffold, L, seed));
    m.emplace_back("input.checkpoint", ckpt_path);
    m.emplace_back("input.motif", motif_path);
    m.emplace_back("motif.positions", motif_pos_csv);
    m.emplace_back("output", args.out);
    write_manifest(args.out + ".manifest", m);
    say(args, "scaffolded " + std::to_string(n) + " samples around a motif of length " +
                  std::to_string(l));
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& in_path) {
    const RunConfig rc = load_config(args);
    const ToyDataset in = load_token_cache(in_path);
    if (in.samples.empty()) throw std::invalid_argument("eval: no samples in " + in_path);
    const ToyWorld world = gen_world(rc.world_seed, rc.vocab, rc.d_struct, rc.noise_sigma);
    if (in.V != world.V || in.dim != world.dim)
        throw std::invalid_argument("eval: cache alphabet/dimension do not match the config");

    std::vector<GenerationResult> gens;
    gens.reserve(in.samples.size());
    for (const TrackPair& tp : in.samples) gens.push_back(to_generation(tp, world.V));

    const EvalReport report = eval_suite(world, gens, rc.eval_thresholds);
    {
        std::ofstream os(args.out, std::ios::trunc);
        if (!os) throw std::runtime_error("eval: cannot open " + args.out);
        os << report.to_text();
    }
    {
        std::ofstream os(args.out + ".samples.tsv", std::ios::trunc);
        os << "index\tlength\tself_consistency\n";
        for (size_t i = 0; i < gens.size(); ++i) {
            os << i << "\t" << gens[i].length << "\t"
               << self_consistency(world, gens[i].seq, gens[i].struct_tokens) << "\n";
        }
    }
    auto m = manifest_base("eval", rc, 0);
    m.emplace_back("input.data", in_path);
    m.emplace_back("output", args.out);
    write_manifest(args.out + ".manifest", m);
    if (!args.quiet) std::cout << report.to_text();
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& ckpt_path, int len_override) {
    const RunConfig rc = load_config(args);
    const uint64_t seed = args.seed_set ? args.seed : 0;
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const ToyWorld world = gen_world(rc.world_seed, rc.vocab, rc.d_struct, rc.noise_sigma);
    const int L = len_override > 0 ? len_override : rc.sample_length;

    std::filesystem::create_directories(args.out);
    uint64_t cell_idx = 0;
    for (double tz : rc.sweep_tau_z) {
        for (double omega : rc.sweep_cfg_scale) {
            for (int T : rc.sweep_T_lm) {
                std::vector<GenerationResult> gens;
                ToyDataset cell_ds;
                cell_ds.V = world.V;
                cell_ds.dim = world.dim;
                cell_ds.world_seed = rc.world_seed;
                for (int i = 0; i < rc.sweep_n_samples; ++i) {
                    SampleOptions opts = rc.sample_options(
                        SampleMode::CoGen, L,
                        derive_seed(seed, Stream::SweepCell, cell_idx, static_cast<uint64_t>(i)));
                    opts.tau_z = tz;
                    opts.cfg_scale = omega;
                    opts.T_lm = T;
                    gens.push_back(cogenerate(ck.params, ck.meta.scaler, opts));
                    cell_ds.samples.push_back(to_track(gens.back()));
                }
                char cell_name[128];
                std::snprintf(cell_name, sizeof(cell_name), "tz%.3g_cfg%.3g_T%d", tz, omega,
                              T > 0 ? T : L);
                const std::string base = args.out + "/" + cell_name;
                save_token_cache(base + ".hdtk", cell_ds);
                const EvalReport report = eval_suite(world, gens, rc.eval_thresholds);
                std::ofstream os(base + ".report.txt", std::ios::trunc);
                os << "tau_z = " << tz << "\ncfg_scale = " << omega << "\nT_lm = "
                   << (T > 0 ? T : L) << "\n" << report.to_text();
                say(args, std::string("sweep cell ") + cell_name + ": mean self-consistency " +
                              std::to_string(report.mean_self_consistency));
                ++cell_idx;
            }
        }
    }
    auto m = manifest_base("sweep", rc, seed);
    m.emplace_back("input.checkpoint", ckpt_path);
    m.emplace_back("output", args.out);
    write_manifest(args.out + "/sweep.manifest", m);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid two-track diffusion toy: data generation, training, sampling, evaluation"};
    app.require_subcommand(1);

    CommonArgs gen_args;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset cache");
    add_common(gen, gen_args);

    CommonArgs train_args;
    std::string train_data;
    auto* tr = app.add_subcommand("train", "train a model on a dataset cache");
    add_common(tr, train_args);
    tr->add_option("--data", train_data, "input token cache")->required();

    CommonArgs sample_args;
    std::string sample_ckpt;
    int sample_n = 0, sample_len = 0;
    auto* sa = app.add_subcommand("sample", "unconditional co-generation");
    add_common(sa, sample_args);
    sa->add_option("--ckpt", sample_ckpt, "checkpoint")->required();
    sa->add_option("--n", sample_n, "number of samples");
    sa->add_option("--length", sample_len, "sample length");

    CommonArgs fold_args;
    std::string fold_ckpt, fold_in;
    int fold_count = 0;
    auto* fo = app.add_subcommand("fold", "predict structure tracks for complete sequences");
    add_common(fo, fold_args);
    fo->add_option("--ckpt", fold_ckpt, "checkpoint")->required();
    fo->add_option("--in", fold_in, "input token cache with complete samples")->required();
    fo->add_option("--count", fold_count, "number of samples to process");

    CommonArgs inv_args;
    std::string inv_ckpt, inv_in;
    int inv_count = 0;
    auto* iv = app.add_subcommand("invfold", "predict sequences for complete structure tracks");
    add_common(iv, inv_args);
    iv->add_option("--ckpt", inv_ckpt, "checkpoint")->required();
    iv->add_option("--in", inv_in, "input token cache with complete samples")->required();
    iv->add_option("--count", inv_count, "number of samples to process");

    CommonArgs sc_args;
    std::string sc_ckpt, sc_motif, sc_pos;
    size_t sc_index = 0;
    int sc_n = 0, sc_len = 0;
    auto* sc = app.add_subcommand("scaffold", "conditional co-generation around a motif");
    add_common(sc, sc_args);
    sc->add_option("--ckpt", sc_ckpt, "checkpoint")->required();
    sc->add_option("--motif-file", sc_motif, "token cache holding the motif source sample")->required();
    sc->add_option("--motif-index", sc_index, "sample index inside the motif file");
    sc->add_option("--motif-pos", sc_pos, "comma-separated scaffold positions for the motif")->required();
    sc->add_option("--n", sc_n, "number of samples");
    sc->add_option("--length", sc_len, "scaffold length");

    CommonArgs eval_args;
    std::string eval_in;
    auto* ev = app.add_subcommand("eval", "evaluate generated samples against the world oracles");
    add_common(ev, eval_args);
    ev->add_option("--in", eval_in, "token cache of generated samples")->required();

    CommonArgs sweep_args;
    std::string sweep_ckpt;
    int sweep_len = 0;
    auto* sw = app.add_subcommand("sweep", "grid over sampling hyperparameters");
    add_common(sw, sweep_args);
    sw->add_option("--ckpt", sweep_ckpt, "checkpoint")->required();
    sw->add_option("--length", sweep_len, "sample length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args);
        if (tr->parsed()) return cmd_train(train_args, train_data);
        if (sa->parsed()) return cmd_sample(sample_args, sample_ckpt, sample_n, sample_len);
        if (fo->parsed()) return cmd_fold(fold_args, fold_ckpt, fold_in, fold_count);
        if (iv->parsed()) return cmd_invfold(inv_args, inv_ckpt, inv_in, inv_count);
        if (sc->parsed())
            return cmd_scaffold(sc_args, sc_ckpt, sc_motif, sc_index, sc_pos, sc_n, sc_len);
        if (ev->parsed()) return cmd_eval(eval_args, eval_in);
        if (sw->parsed()) return cmd_sweep(sweep_args, sweep_ckpt, sweep_len);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
