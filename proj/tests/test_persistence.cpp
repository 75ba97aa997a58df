#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hdiff/persistence.hpp"
#include "hdiff/rng.hpp"
#include "hdiff/run_config.hpp"

using namespace hdiff;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

ToyDataset random_dataset(uint64_t seed, int n) {
    Rng rng(seed);
    ToyDataset ds;
    ds.V = 8;
    ds.dim = 4;
    ds.world_seed = seed;
    for (int s = 0; s < n; ++s) {
        TrackPair tp(3 + static_cast<int>(rng.uniform_int(20)), 4);
        for (int i = 0; i < tp.length; ++i) {
            // include mask ids and mask flags so the packing paths are hit
            tp.seq[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(9));
            tp.struct_mask[static_cast<size_t>(i)] = rng.uniform() < 0.3 ? 1 : 0;
            for (int j = 0; j < 4; ++j)
                tp.struct_row(i)[static_cast<size_t>(j)] = static_cast<float>(rng.gaussian());
        }
        ds.samples.push_back(std::move(tp));
    }
    return ds;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_hidden = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_len = 16;
    cfg.vocab.size = 6;
    cfg.struct_spec.dim = 3;
    cfg.denoiser_hidden = 8;
    cfg.denoiser_layers = 2;
    cfg.time_embed_dim = 4;
    cfg.ffn_mult = 2;
    return cfg;
}

} // namespace

TEST_CASE("token cache round-trips bit-exactly, including masks") {
    const ToyDataset ds = random_dataset(3, 50);
    const std::string path = temp_path("hdiff_cache_test.hdtk");
    save_token_cache(path, ds);
    const ToyDataset back = load_token_cache(path);

    REQUIRE(back.samples.size() == ds.samples.size());
    CHECK(back.V == ds.V);
    CHECK(back.dim == ds.dim);
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].seq == ds.samples[i].seq);
        CHECK(back.samples[i].struct_tokens == ds.samples[i].struct_tokens);
        CHECK(back.samples[i].struct_mask == ds.samples[i].struct_mask);
    }
    // a second write of the same dataset is byte-identical
    const std::string path2 = temp_path("hdiff_cache_test2.hdtk");
    save_token_cache(path2, ds);
    CHECK(slurp(path) == slurp(path2));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("token cache rejects empty, truncated, corrupted, and wrong-version files") {
    ToyDataset empty;
    empty.V = 8;
    empty.dim = 4;
    const std::string path = temp_path("hdiff_cache_edge.hdtk");
    save_token_cache(path, empty);
    CHECK(load_token_cache(path).samples.empty());

    const ToyDataset ds = random_dataset(5, 10);
    save_token_cache(path, ds);
    const std::string good = slurp(path);

    spit(path, good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(load_token_cache(path), FormatError);

    std::string corrupted = good;
    corrupted[good.size() / 2] = static_cast<char>(corrupted[good.size() / 2] ^ 0x40);
    spit(path, corrupted);
    CHECK_THROWS_AS(load_token_cache(path), FormatError);

    std::string wrong_magic = good;
    wrong_magic[0] = 'X';
    spit(path, wrong_magic);
    CHECK_THROWS_AS(load_token_cache(path), FormatError);

    std::string wrong_version = good;
    wrong_version[4] = 9;
    spit(path, wrong_version);
    CHECK_THROWS_AS(load_token_cache(path), FormatError);

    CHECK_THROWS_AS(load_token_cache(temp_path("does_not_exist.hdtk")), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint save/load reproduces forward outputs bit-identically") {
    const ModelConfig cfg = small_config();
    const auto params = init_params<float>(cfg, 77);
    OptimizerState opt;
    opt.m.assign(params.flat.size(), 0.25f);
    opt.v.assign(params.flat.size(), 0.125f);
    opt.step = 42;
    CheckpointMeta meta;
    meta.train_digest = 0xdeadbeef12345678ull;
    meta.step = 1000;
    meta.scaler = TokenScaler{2.5, -0.4, 6.25};

    const std::string path = temp_path("hdiff_ckpt_test.hdck");
    save_checkpoint(path, params, &opt, meta);
    const Checkpoint back = load_checkpoint(path);

    CHECK(back.params.flat == params.flat);  // flatten -> unflatten is bit-exact
    CHECK(back.params.cfg == cfg);
    REQUIRE(back.opt.has_value());
    CHECK(back.opt->m == opt.m);
    CHECK(back.opt->v == opt.v);
    CHECK(back.opt->step == opt.step);
    CHECK(back.meta.train_digest == meta.train_digest);
    CHECK(back.meta.step == 1000);
    CHECK(back.meta.scaler.scale == 2.5);

    const std::vector<int> seq{0, 5, 2, 1};
    const std::vector<float> z{0.1f, -0.2f, 0.3f, 1.0f, 0.0f, -1.0f, 0.5f, 0.5f, 0.5f, 2.f, 2.f, 2.f};
    const std::vector<uint8_t> mask{0, 1, 0, 0};
    const auto before = fuse_and_encode<float>(params, seq, z, mask);
    const auto after = fuse_and_encode<float>(back.params, seq, z, mask);
    CHECK(before.h == after.h);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint integrity: corruption, version, and config mismatches") {
    const ModelConfig cfg = small_config();
    const auto params = init_params<float>(cfg, 3);
    CheckpointMeta meta;
    const std::string path = temp_path("hdiff_ckpt_edge.hdck");
    save_checkpoint(path, params, nullptr, meta);
    const std::string good = slurp(path);

    CHECK(!load_checkpoint(path).opt.has_value());

    // flip one byte in the parameter payload: checksum must catch it
    std::string corrupted = good;
    corrupted[good.size() - 20] = static_cast<char>(corrupted[good.size() - 20] ^ 1);
    spit(path, corrupted);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), FormatError);

    std::string wrong_version = good;
    wrong_version[4] = 7;
    spit(path, wrong_version);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), FormatError);

    spit(path, good.substr(0, 40));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("manifest writing and config digest stability") {
    const std::string path = temp_path("hdiff_manifest_test.txt");
    write_manifest(path, {{"command", "train"}, {"seed", "7"}});
    const std::string text = slurp(path);
    CHECK(text == "command = train\nseed = 7\n");
    std::filesystem::remove(path);

    RunConfig rc;
    const uint64_t d1 = rc.digest();
    CHECK(d1 == RunConfig{}.digest());
    rc.train.gamma = 0.25;
    CHECK(rc.digest() != d1);
}

TEST_CASE("run config parses, rejects unknown keys, and round-trips") {
    const std::string text =
        "# comment line\n"
        "world.vocab = 20\n"
        "world.d_struct = 20\n"
        "train.gamma = 0.3\n"
        "sample.tau_z = 0.55\n"
        "eval.thresholds = 0.1, 0.7\n";
    const RunConfig rc = RunConfig::from_text(text);
    CHECK(rc.vocab == 20);
    CHECK(rc.d_struct == 20);
    CHECK(rc.train.gamma == 0.3);
    CHECK(rc.eval_thresholds == std::vector<double>{0.1, 0.7});
    CHECK(rc.is_set("sample.tau_z"));
    CHECK(!rc.is_set("sample.tau_s"));

    // explicit keys override mode defaults; unset keys keep them
    const SampleOptions o = rc.sample_options(SampleMode::Scaffold, 24, 5);
    CHECK(o.tau_z == 0.55);
    CHECK(o.tau_s == 1.0);
    CHECK(o.cfg_scale == 1.0);

    const RunConfig back = RunConfig::from_text(rc.to_text());
    CHECK(back.to_text() == rc.to_text());

    CHECK_THROWS_WITH_AS(RunConfig::from_text("nope.nope = 1\n"),
                         doctest::Contains("unknown key"), std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_text("train.gamma = abc\n"), std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_text("train.gamma = 0.1\ntrain.gamma = 0.2\n"),
                    std::invalid_argument);
}
