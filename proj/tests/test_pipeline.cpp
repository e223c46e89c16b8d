#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <map>

#include "xmodal/pipeline.hpp"

using namespace xmodal;
namespace pl = xmodal::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Small enough that a whole run-all takes a few seconds.
json tiny_json() {
  return json::parse(R"({
    "seed": 7,
    "synth": {"story_s": 100, "train_stories": 8, "val_stories": 2, "test_stories": 1, "test_repeats": 10,
              "slow_channels": 6, "fast_channels": 4, "fast_duration_s": 120},
    "net": {"d_model": 8, "n_heads": 2, "mlp_width": 16, "n_layers": 2, "tap_layer": 2, "window_s": 1.0, "lora_rank": 2},
    "finetune": {"epochs": 2, "lr": 0.003, "delays": [1, 2], "projection_rank": 4},
    "downsample": {"factor": 2, "delays": [1]},
    "slow": {"delays": [1, 2]},
    "fast": {"lag_min_s": -0.5, "lag_max_s": 0.5, "lag_count": 21},
    "ridge": {"alphas": [0.1, 10, 1000]},
    "analysis": {"psd_segment": 64, "snr_segment": 16, "n_bootstrap": 50},
    "scaling": {"story_counts": [1, 2, 4, 8]}
  })");
}

pl::ExperimentConfig tiny() { return pl::finalize(pl::config_from_json(tiny_json())); }

fs::path scratch(const std::string &name) {
  const fs::path p = fs::temp_directory_path() / ("xmodal_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

pl::RunOptions quiet(const fs::path &ws, bool force = false) { return {ws, force, false}; }

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path &root) {
  std::map<std::string, std::string> out;
  for (const auto &e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

// Relative paths whose contents differ or exist on one side only.
std::vector<std::string> tree_diff(const fs::path &a, const fs::path &b) {
  const auto ta = tree(a), tb = tree(b);
  std::vector<std::string> out;
  for (const auto &[k, v] : ta)
    if (!tb.count(k) || tb.at(k) != v) out.push_back(k);
  for (const auto &[k, v] : tb)
    if (!ta.count(k)) out.push_back(k);
  return out;
}

int run_cli(const std::string &args) {
  const std::string cmd = std::string(XMODAL_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultFileLoadsAndValidates) {
  const auto cfg = pl::finalize(pl::load_config(fs::path(XMODAL_CONFIG_DIR) / "default.json"));
  EXPECT_EQ(cfg.synth.val_stories, 2);
  EXPECT_EQ(cfg.synth.test_stories, 1);
  EXPECT_EQ(cfg.synth.test_repeats, 10);
  EXPECT_EQ(cfg.lags().size(), 81u);
  EXPECT_EQ(cfg.scaling.story_counts, (std::vector<int>{1, 2, 4, 8, 16}));
  EXPECT_EQ(cfg.slow.delays, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(cfg.ridge.n_folds, 4);
}

TEST(Config, PartialSectionsKeepDefaults) {
  const auto cfg = pl::config_from_json(json::parse(R"({"synth": {"story_s": 50}})"));
  EXPECT_EQ(cfg.synth.story_s, 50.0);
  EXPECT_EQ(cfg.synth.train_stories, pl::SynthConfig{}.train_stories);
  EXPECT_EQ(cfg.net.d_model, netft::FeatureNetConfig{}.d_model);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(pl::config_from_json(json::parse(R"({"sed": 1})")), ConfigError);
  EXPECT_THROW(pl::config_from_json(json::parse(R"({"synth": {"story_len": 1}})")), ConfigError);
  EXPECT_THROW(pl::config_from_json(json::parse(R"({"synth": {"story_s": "long"}})")), ConfigError);
  EXPECT_THROW(pl::config_from_json(json::parse("[1, 2]")), ConfigError);
}

TEST(Config, InvalidValuesRejected) {
  const auto bad = [](const char *patch) {
    json j = tiny_json();
    j.merge_patch(json::parse(patch));
    return pl::config_from_json(j);
  };
  EXPECT_THROW(pl::finalize(bad(R"({"synth": {"test_repeats": 1}})")), ConfigError);
  EXPECT_THROW(pl::finalize(bad(R"({"synth": {"input_rate_hz": 50}})")), ConfigError);
  EXPECT_THROW(pl::finalize(bad(R"({"finetune": {"epochs": 0}})")), ConfigError);
  EXPECT_THROW(pl::finalize(bad(R"({"scaling": {"story_counts": [1, 32]}})")), ConfigError);
  EXPECT_THROW(pl::finalize(bad(R"({"fast": {"lag_count": 1}})")), ConfigError);
  EXPECT_THROW(pl::finalize(bad(R"({"ridge": {"alphas": [0]}})")), ConfigError);
  EXPECT_THROW(pl::finalize(bad(R"({"synth": {"slow_noise": {"edges_hz": [0, 0.1], "snr": [1]}}})")), ConfigError);
}

TEST(Config, SeedsDeriveFromTopLevel) {
  auto a = tiny(), b = tiny();
  EXPECT_EQ(a.net.seed, b.net.seed);
  json j = tiny_json();
  j["seed"] = 8;
  const auto c = pl::finalize(pl::config_from_json(j));
  EXPECT_NE(a.net.seed, c.net.seed);
  EXPECT_NE(a.finetune.seed, c.finetune.seed);
}

TEST(Config, RelativeDatasetResolvesAgainstConfigDir) {
  const auto cfg = pl::config_from_json(json::parse(R"({"dataset": "data/x"})"), "/etc/exp");
  EXPECT_EQ(cfg.dataset, "/etc/exp/data/x");
}

// ---------------------------------------------------------------------------
// Synth and dataset layout

TEST(Synth, SplitsAndRepeats) {
  const auto ws = scratch("splits");
  const auto cfg = tiny();
  pl::cmd_synth(cfg, quiet(ws));
  const auto d = pl::load_dataset(ws / "dataset");
  EXPECT_EQ(d.train.size(), 8u);
  EXPECT_EQ(d.val.size(), 2u);
  EXPECT_EQ(d.test.size(), 1u);
  ASSERT_EQ(d.test_repeats.size(), 1u);
  EXPECT_EQ(d.test_repeats[0].size(), 10u);
  EXPECT_EQ(d.train[0].stimulus.samples(), 10000);
  EXPECT_EQ(d.train[0].responses.samples(), 50);
  EXPECT_EQ(d.train[0].responses.channels(), 6);
  EXPECT_EQ(d.fast_responses.channels(), 4);
  EXPECT_EQ(d.fast_responses.rate_hz, 20.0);
  // Test responses are the repeat average.
  EXPECT_LT((d.test[0].responses.values - average_repeats(d.test_repeats[0]).values).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_GT(pl::validate_tree(ws / "dataset"), 0u);
}

TEST(Synth, SameSeedByteIdentical) {
  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  pl::cmd_synth(tiny(), quiet(a));
  pl::cmd_synth(tiny(), quiet(b));
  EXPECT_EQ(tree_diff(a, b), std::vector<std::string>{});
  json j = tiny_json();
  j["seed"] = 8;
  pl::cmd_synth(pl::finalize(pl::config_from_json(j)), quiet(c));
  EXPECT_NE(slurp(a / "dataset/fast/responses.nst"), slurp(c / "dataset/fast/responses.nst"));
}

TEST(Synth, CollisionNeedsForce) {
  const auto ws = scratch("collide");
  pl::cmd_synth(tiny(), quiet(ws));
  EXPECT_THROW(pl::cmd_synth(tiny(), quiet(ws)), ConfigError);
  std::ofstream(ws / "dataset" / "stray.txt") << "x";
  EXPECT_NO_THROW(pl::cmd_synth(tiny(), quiet(ws, true)));
  EXPECT_FALSE(fs::exists(ws / "dataset" / "stray.txt"));
}

TEST(Synth, LogHasNoTimestampsAndSnapshotMatchesConfig) {
  const auto ws = scratch("snapshot");
  const auto cfg = tiny();
  pl::cmd_synth(cfg, quiet(ws));
  const json snap = load_json(ws / "dataset/config.json");
  EXPECT_EQ(snap.at("seed"), cfg.seed);
  EXPECT_EQ(snap.at("command"), "synth");
  EXPECT_EQ(snap.at("net").at("seed"), cfg.net.seed);
  const std::string log = slurp(ws / "dataset/log.txt");
  EXPECT_FALSE(log.empty());
  for (const char *clockish : {"UTC", "AM ", "PM ", "T0", ":00:"}) EXPECT_EQ(log.find(clockish), std::string::npos);
}

TEST(Dataset, CorruptTensorReportsFileAndOffset) {
  const auto ws = scratch("corrupt");
  pl::cmd_synth(tiny(), quiet(ws));
  const fs::path victim = ws / "dataset/slow/story_03.nst";
  fs::resize_file(victim, fs::file_size(victim) - 5);
  try {
    pl::load_dataset(ws / "dataset");
    FAIL() << "expected a data error";
  } catch (const TensorFormatError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("story_03.nst"), std::string::npos) << msg;
    EXPECT_NE(msg.find("@ byte"), std::string::npos) << msg;
  }
  EXPECT_THROW(pl::validate_tree(ws / "dataset"), DataError);
}

TEST(Dataset, MissingOrMalformed) {
  const auto ws = scratch("malformed");
  EXPECT_THROW(pl::load_dataset(ws), DataError);
  pl::cmd_synth(tiny(), quiet(ws));
  std::ofstream(ws / "dataset/dataset.json") << "{\"format\": \"xmodal-dataset-1\"}";
  EXPECT_THROW(pl::load_dataset(ws / "dataset"), DataError);
}

TEST(Validate, RaggedCsvRejected) {
  const auto ws = scratch("ragged");
  fs::create_directories(ws);
  std::ofstream(ws / "t.csv") << "a,b\n1,2\n3\n";
  EXPECT_THROW(pl::validate_tree(ws), DataError);
}

// ---------------------------------------------------------------------------
// Commands

class Workspace : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    ws_ = scratch("shared");
    pl::cmd_synth(tiny(), quiet(ws_));
  }
  static fs::path ws_;
};
fs::path Workspace::ws_;

TEST_F(Workspace, FinetuneOneEpochSelectsItTrivially) {
  json j = tiny_json();
  j["finetune"]["epochs"] = 1;
  const auto cfg = pl::finalize(pl::config_from_json(j));
  const auto dir = pl::cmd_finetune(cfg, quiet(ws_, true));
  const json sel = load_json(dir / "selection.json");
  EXPECT_EQ(sel.at("epochs").size(), 1u);
  EXPECT_EQ(sel.at("chosen_epoch"), 1);
  EXPECT_EQ(sel.at("chosen_checkpoint"), "checkpoints/epoch_01");
  EXPECT_TRUE(fs::exists(dir / "checkpoints/epoch_01/meta.json"));
  EXPECT_FALSE(fs::exists(dir / "checkpoints/epoch_02"));
}

TEST_F(Workspace, FinetuneDownsampledVariant) {
  const auto cfg = tiny();
  const auto dir = pl::cmd_finetune(cfg, quiet(ws_, true), 2);
  EXPECT_EQ(dir.filename(), "finetune_ds2");
  const json sel = load_json(dir / "selection.json");
  EXPECT_EQ(sel.at("downsample_factor"), 2);
  EXPECT_EQ(sel.at("epochs").size(), 2u);
  EXPECT_THROW(pl::cmd_finetune(cfg, quiet(ws_, true), 0), ConfigError);
}

TEST_F(Workspace, CheckpointReloadReproducesSelectedNet) {
  const auto cfg = tiny();
  const auto dir = pl::cmd_finetune(cfg, quiet(ws_, true));
  const auto net = pl::load_tuned_net(cfg, dir);
  EXPECT_EQ(net.base_weight_hash(), pl::make_net(cfg).base_weight_hash());
  const auto data = pl::load_dataset(ws_ / "dataset");
  const auto tuned = pl::tune(cfg, data.train, data.val, 1, {});
  netft::FeatureNet ref = pl::make_net(cfg);
  netft::apply_checkpoint(ref, tuned.result.checkpoints[tuned.selection.chosen_index]);
  const auto fa = netft::extract_features(net, data.fast_stimulus, 0.05);
  const auto fb = netft::extract_features(ref, data.fast_stimulus, 0.05);
  EXPECT_EQ(fa.values, fb.values);
  EXPECT_THROW(pl::load_tuned_net(cfg, ws_ / "dataset"), DataError);
}

TEST_F(Workspace, EncodeFastPairedComparisonFeedsSpectrum) {
  const auto cfg = tiny();
  const auto ft = pl::cmd_finetune(cfg, quiet(ws_, true));
  const auto pre = pl::cmd_encode_fast(cfg, quiet(ws_, true));
  EXPECT_FALSE(fs::exists(pre / "comparison.csv"));
  const auto post = pl::cmd_encode_fast(cfg, quiet(ws_, true), ft);
  EXPECT_EQ(post.filename(), "encode_fast_finetune");
  ASSERT_TRUE(fs::exists(post / "comparison.csv"));
  const RowVector base = pl::read_score_column(post / "comparison.csv", "baseline");
  const RowVector tuned = pl::read_score_column(post / "comparison.csv", "finetuned");
  EXPECT_EQ(base.size(), 4);
  EXPECT_LT((base - pl::read_score_column(pre / "scores.csv", "score")).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((tuned - pl::read_score_column(post / "scores.csv", "score")).cwiseAbs().maxCoeff(), 1e-9);
  const json tt = load_json(post / "ttest.json");
  EXPECT_EQ(tt.at("dof"), 3);
  EXPECT_NEAR(tt.at("t").get<double>(), paired_ttest(tuned, base).t, 1e-6);

  const auto spec = pl::cmd_spectrum(cfg, quiet(ws_, true), pre, post);
  EXPECT_EQ(spec.filename(), "spectrum_finetune");
  const json s = load_json(spec / "summary.json");
  EXPECT_EQ(s.at("threshold_hz"), 0.25);
  EXPECT_TRUE(std::isfinite(s.at("mean_pct_below").get<double>()));
  EXPECT_EQ(pl::read_score_column(spec / "bands.csv", "pct_change").size(), 4);
}

TEST_F(Workspace, EncodeFastLagsAndResiduals) {
  const auto cfg = tiny();
  const auto pre = pl::cmd_encode_fast(cfg, quiet(ws_, true));
  const RowVector lag_s = pl::read_score_column(pre / "scores.csv", "best_lag_s");
  for (Index c = 0; c < lag_s.size(); ++c) {
    EXPECT_GE(lag_s(c), -0.5 - 1e-12);
    EXPECT_LE(lag_s(c), 0.5 + 1e-12);
  }
  const auto res = load_manifest(pre / "residuals.manifest.json");
  EXPECT_EQ(res.manifest.rate_hz, 20.0);
  EXPECT_EQ(read_tensor(pre / "score_per_lag.nst").dims, (std::vector<std::uint64_t>{21, 4}));
}

TEST_F(Workspace, EncodeSlowWritesScores) {
  const auto cfg = tiny();
  const auto dir = pl::cmd_encode_slow(cfg, quiet(ws_, true));
  EXPECT_EQ(dir.filename(), "encode_slow_pretrained");
  const RowVector test = pl::read_score_column(dir / "scores.csv", "test_score");
  EXPECT_EQ(test.size(), 6);
  EXPECT_TRUE(test.allFinite());
}

TEST_F(Workspace, SnrTableFromRepeats) {
  const auto cfg = tiny();
  const auto dir = pl::cmd_snr(cfg, quiet(ws_, true));
  const json s = load_json(dir / "summary.json");
  EXPECT_EQ(s.at("repeats"), 10);
  ASSERT_EQ(s.at("bands").size(), 2u);
  for (const auto &b : s.at("bands")) EXPECT_GT(b.at("mean_snr").get<double>(), 0.0);
}

TEST_F(Workspace, ScalingHasOneSupportPointPerCount) {
  const auto cfg = tiny();
  const auto dir = pl::cmd_scaling(cfg, quiet(ws_, true));
  EXPECT_EQ(pl::read_score_column(dir / "scores.csv", "stories").size(), 4);
  EXPECT_EQ(pl::read_score_column(dir / "slopes.csv", "slope").size(), 4);
  EXPECT_EQ(load_json(dir / "summary.json").at("story_counts"), (std::vector<int>{1, 2, 4, 8}));
}

// ---------------------------------------------------------------------------
// End to end

TEST(RunAll, CompletesValidatesAndIsDeterministic) {
  const auto a = scratch("all_a"), b = scratch("all_b");
  pl::run_all(tiny(), quiet(a));
  pl::run_all(tiny(), quiet(b));
  EXPECT_GT(pl::validate_tree(a), 50u);
  const json rep = load_json(a / "report/summary.json");
  EXPECT_TRUE(rep.at("missing").empty()) << rep.at("missing");
  for (const char *k : {"transfer", "slow", "spectrum", "snr", "downsample", "scaling"}) EXPECT_TRUE(rep.contains(k)) << k;
  EXPECT_EQ(tree_diff(a, b), std::vector<std::string>{});
}

TEST(RunAll, ThreadCountDoesNotChangeOutputs) {
  const auto a = scratch("thr_a"), b = scratch("thr_b");
  auto one = tiny(), four = tiny();
  four.threads = 4;
  four = pl::finalize(four);
  pl::cmd_synth(one, quiet(a));
  pl::cmd_synth(four, quiet(b));
  const auto pa = pl::cmd_encode_fast(one, quiet(a));
  const auto pb = pl::cmd_encode_fast(four, quiet(b));
  EXPECT_EQ(slurp(pa / "scores.csv"), slurp(pb / "scores.csv"));
  EXPECT_EQ(slurp(pa / "residuals.nst"), slurp(pb / "residuals.nst"));
}

TEST(RunAll, ReportListsMissingSections) {
  const auto ws = scratch("report_only");
  fs::create_directories(ws);
  const auto dir = pl::cmd_report(tiny(), quiet(ws));
  EXPECT_EQ(load_json(dir / "summary.json").at("missing").size(), 6u);
}

// Improvement-or-equal sanity bound on the default configuration.
TEST(DefaultConfig, SelectedEpochNotWorseThanPretrained) {
  const auto cfg = pl::finalize(pl::load_config(fs::path(XMODAL_CONFIG_DIR) / "default.json"));
  const auto ws = scratch("default_ft");
  pl::cmd_synth(cfg, quiet(ws));
  const json sel = load_json(pl::cmd_finetune(cfg, quiet(ws)) / "selection.json");
  EXPECT_GE(sel.at("chosen_val_score").get<double>(), sel.at("pretrained_val_score").get<double>());
}

// ---------------------------------------------------------------------------
// CLI exit codes

class Cli : public ::testing::Test {
protected:
  void SetUp() override {
    ws_ = scratch("cli");
    fs::create_directories(ws_);
    cfg_ = ws_ / "tiny.json";
    std::ofstream(cfg_) << tiny_json().dump();
  }
  std::string common() const { return "--config " + cfg_.string() + " --out " + (ws_ / "w").string() + " --quiet"; }
  fs::path ws_, cfg_;
};

TEST_F(Cli, SuccessAndCollision) {
  EXPECT_EQ(run_cli("synth " + common()), 0);
  EXPECT_EQ(run_cli("validate " + (ws_ / "w/dataset").string()), 0);
  EXPECT_EQ(run_cli("synth " + common()), 2);
  EXPECT_EQ(run_cli("synth --force " + common()), 0);
  EXPECT_EQ(run_cli("encode-fast --threads 2 " + common()), 0);
  EXPECT_EQ(run_cli("finetune --downsample-factor 2 " + common()), 0);
  EXPECT_TRUE(fs::exists(ws_ / "w/finetune_ds2/selection.json"));
  EXPECT_EQ(run_cli("encode-fast --checkpoint " + (ws_ / "w/finetune_ds2").string() + " " + common()), 0);
  EXPECT_TRUE(fs::exists(ws_ / "w/encode_fast_finetune_ds2/comparison.csv"));
}

TEST_F(Cli, SeedFlagOverridesConfig) {
  EXPECT_EQ(run_cli("synth --seed 99 " + common()), 0);
  EXPECT_EQ(load_json(ws_ / "w/dataset/dataset.json").at("seed"), 99);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run_cli("synth --out " + ws_.string()), 2);                    // missing --config
  EXPECT_EQ(run_cli("synth --config /nonexistent.json --out " + ws_.string()), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  std::ofstream(ws_ / "bad.json") << "{\"synth\": {\"story_s\": -1}}";
  EXPECT_EQ(run_cli("synth --config " + (ws_ / "bad.json").string() + " --out " + ws_.string()), 2);
  std::ofstream(ws_ / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("synth --config " + (ws_ / "broken.json").string() + " --out " + ws_.string()), 2);
  EXPECT_EQ(run_cli("finetune --downsample-factor 0 " + common()), 2);
}

TEST_F(Cli, DataErrorsExitThree) {
  EXPECT_EQ(run_cli("encode-fast " + common()), 3); // no dataset yet
  ASSERT_EQ(run_cli("synth " + common()), 0);
  const fs::path victim = ws_ / "w/dataset/fast/responses.nst";
  std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
  f.write("XXXX", 4);
  f.close();
  EXPECT_EQ(run_cli("encode-fast " + common()), 3);
  EXPECT_EQ(run_cli("validate " + (ws_ / "w/dataset").string()), 3);
}

TEST_F(Cli, NumericalFailureExitsFour) {
  // A latent band narrower than the frequency resolution contains no FFT bin.
  json j = tiny_json();
  j["synth"]["latent_lo_hz"] = 4.9999;
  j["synth"]["latent_hi_hz"] = 4.99995;
  std::ofstream(ws_ / "narrow.json") << j.dump();
  EXPECT_EQ(run_cli("synth --config " + (ws_ / "narrow.json").string() + " --out " + (ws_ / "n").string()), 4);
}
