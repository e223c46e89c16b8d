#pragma once

// End-to-end experiment driver behind the xmodal CLI.
//
// A workspace directory holds one subdirectory per run (dataset, finetune,
// encode_fast_pretrained, ...). Every run directory carries the effective
// config snapshot (config.json), a timestamp-free log (log.txt) and its
// outputs, so two runs with the same config and seed are byte-identical.

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "embed.hpp"
#include "error.hpp"
#include "netft/training.hpp"
#include "ridge.hpp"
#include "rng.hpp"
#include "synthgen.hpp"
#include "tensor_io.hpp"
#include "types.hpp"

namespace xmodal {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WaveformOptions, carriers_hz, depth, distractor_hz, distractor_level,
                                                noise_level)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HRFParams, peak_s, undershoot_s, peak_shape, undershoot_shape,
                                                undershoot_ratio, length_s)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FastOptions, smoothing_sd_s, gain)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseSpec, edges_hz, snr)

namespace pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct SynthConfig {
  double story_s{320.0};
  int train_stories{16};
  int val_stories{2};
  int test_stories{1};
  int test_repeats{10};
  int latents{4};
  int nuisance_latents{2};
  Index slow_channels{32};
  Index fast_channels{16};
  double input_rate_hz{100.0};
  double slow_rate_hz{0.5};
  double fast_rate_hz{20.0};
  double latent_lo_hz{0.01};
  double latent_hi_hz{5.0};
  double spectral_exponent{1.0};
  double fast_duration_s{600.0};
  double fast_delay_s{0.3};
  NoiseSpec slow_noise{{0.0, 0.125, 0.25}, {1.0, 0.114}};
  double fast_snr{1.0};
  WaveformOptions waveform;
  HRFParams hrf;
  FastOptions fast_render;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, story_s, train_stories, val_stories, test_stories,
                                                test_repeats, latents, nuisance_latents, slow_channels, fast_channels,
                                                input_rate_hz, slow_rate_hz, fast_rate_hz, latent_lo_hz, latent_hi_hz,
                                                spectral_exponent, fast_duration_s, fast_delay_s, slow_noise, fast_snr,
                                                waveform, hrf, fast_render)

struct DownsampleConfig {
  int factor{1};                  // 1: no downsampled variant
  std::vector<int> delays{1, 2, 3}; // FIR delays (in downsampled samples) for tuning and epoch selection
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DownsampleConfig, factor, delays)

struct SlowEncodingConfig {
  double feature_stride_s{0.25};
  std::vector<int> delays{1, 2, 3, 4};
  int lanczos_a{3};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SlowEncodingConfig, feature_stride_s, delays, lanczos_a)

struct FastEncodingConfig {
  double feature_stride_s{0.05};
  double lag_min_s{-2.0};
  double lag_max_s{2.0};
  int lag_count{81};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FastEncodingConfig, feature_stride_s, lag_min_s, lag_max_s, lag_count)

struct RidgeSettings {
  std::vector<double> alphas = logspace(-2.0, 6.0, 9);
  int n_folds{4};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RidgeSettings, alphas, n_folds)

struct AnalysisConfig {
  Index psd_segment{256};
  double psd_overlap{0.5};
  Index snr_segment{64};
  std::vector<double> snr_band_edges_hz{0.0, 0.125, 0.25};
  std::vector<double> spectrum_band_edges_hz{0.0, 0.25, 1.0, 3.0, 10.0};
  double rho_min{0.1};
  int n_bootstrap{1000};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AnalysisConfig, psd_segment, psd_overlap, snr_segment,
                                                snr_band_edges_hz, spectrum_band_edges_hz, rho_min, n_bootstrap)

struct ScalingConfig {
  std::vector<int> story_counts{1, 2, 4, 8, 16};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScalingConfig, story_counts)

struct ExperimentConfig {
  std::uint64_t seed{1};
  unsigned threads{1};
  std::string dataset; // existing dataset directory; empty: <workspace>/dataset
  SynthConfig synth;
  netft::FeatureNetConfig net;
  netft::FinetuneConfig finetune;
  DownsampleConfig downsample;
  SlowEncodingConfig slow;
  FastEncodingConfig fast;
  RidgeSettings ridge;
  AnalysisConfig analysis;
  ScalingConfig scaling;

  RidgeConfig ridge_config() const {
    RidgeConfig rc;
    rc.alphas = ridge.alphas;
    rc.n_folds = ridge.n_folds;
    rc.threads = threads;
    return rc;
  }
  netft::EncodingSetup slow_setup() const { return {slow.feature_stride_s, slow.delays, slow.lanczos_a, threads}; }
  std::vector<int> lags() const {
    return lag_grid(fast.lag_min_s, fast.lag_max_s, fast.lag_count, 1.0 / fast.feature_stride_s);
  }
};

inline void to_json(json &j, const ExperimentConfig &c) {
  j = json{{"seed", c.seed},         {"threads", c.threads},   {"dataset", c.dataset},
           {"synth", c.synth},       {"net", c.net},           {"finetune", c.finetune},
           {"downsample", c.downsample}, {"slow", c.slow},     {"fast", c.fast},
           {"ridge", c.ridge},       {"analysis", c.analysis}, {"scaling", c.scaling}};
}

namespace detail {

template <class T> void read_section(const json &j, const char *key, T &out) {
  if (!j.contains(key)) return;
  T def = out;
  json merged = json(def);
  for (auto it = j.at(key).begin(); it != j.at(key).end(); ++it) {
    if (!merged.contains(it.key())) throw ConfigError(std::string("config: unknown key ") + key + "." + it.key());
    merged[it.key()] = it.value();
  }
  out = merged.get<T>();
}

} // namespace detail

inline void validate_config(const ExperimentConfig &c) {
  const auto &s = c.synth;
  if (!(s.story_s > 0.0) || s.train_stories < 1 || s.val_stories < 1 || s.test_stories < 1)
    throw ConfigError("config: synth needs positive story length and at least one train, val and test story");
  if (s.test_repeats < 2) throw ConfigError("config: synth.test_repeats must be >= 2");
  if (s.latents < 1 || s.slow_channels < 1 || s.fast_channels < 1) throw ConfigError("config: synth sizes must be positive");
  if (std::abs(s.input_rate_hz - c.net.input_rate_hz) > 1e-9)
    throw ConfigError("config: synth.input_rate_hz must equal net.input_rate_hz");
  if (std::abs(1.0 / c.fast.feature_stride_s - s.fast_rate_hz) > 1e-9)
    throw ConfigError("config: fast.feature_stride_s must match synth.fast_rate_hz");
  s.slow_noise.validate(s.slow_rate_hz);
  if (!(s.fast_snr > 0.0)) throw ConfigError("config: synth.fast_snr must be positive");
  c.net.validate();
  if (c.finetune.epochs < 1) throw ConfigError("config: finetune.epochs must be >= 1");
  if (c.downsample.factor < 1) throw ConfigError("config: downsample.factor must be >= 1");
  if (c.ridge.alphas.empty() || c.ridge.n_folds < 2) throw ConfigError("config: ridge needs alphas and >= 2 folds");
  for (double a : c.ridge.alphas)
    if (!(a > 0.0)) throw ConfigError("config: ridge alphas must be positive");
  (void)c.lags(); // throws on a bad grid
  for (int n : c.scaling.story_counts)
    if (n < 1 || n > s.train_stories) throw ConfigError("config: scaling story counts must lie in [1, train_stories]");
  if (c.analysis.n_bootstrap < 2) throw ConfigError("config: analysis.n_bootstrap must be >= 2");
}

// Missing keys keep their defaults; unknown keys are rejected so typos fail loudly.
inline ExperimentConfig config_from_json(const json &j, const fs::path &base_dir = {}) {
  static const std::set<std::string> known{"seed",  "threads", "dataset", "synth",    "net",     "finetune",
                                           "downsample", "slow", "fast",  "ridge", "analysis", "scaling"};
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("config: unknown key " + it.key());
  ExperimentConfig c;
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("threads")) c.threads = j.at("threads").get<unsigned>();
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
    detail::read_section(j, "synth", c.synth);
    detail::read_section(j, "net", c.net);
    detail::read_section(j, "finetune", c.finetune);
    detail::read_section(j, "downsample", c.downsample);
    detail::read_section(j, "slow", c.slow);
    detail::read_section(j, "fast", c.fast);
    detail::read_section(j, "ridge", c.ridge);
    detail::read_section(j, "analysis", c.analysis);
    detail::read_section(j, "scaling", c.scaling);
  } catch (const json::exception &e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!c.dataset.empty() && fs::path(c.dataset).is_relative() && !base_dir.empty())
    c.dataset = (base_dir / c.dataset).lexically_normal().string();
  return c;
}

inline ExperimentConfig load_config(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// Seeds of every random stream derive from the single top-level seed.
enum SeedTag : std::uint64_t {
  seed_latent = 1,
  seed_nuisance,
  seed_waveform,
  seed_slow_noise,
  seed_fast_latent,
  seed_fast_nuisance,
  seed_fast_waveform,
  seed_fast_noise,
  seed_net,
  seed_finetune,
  seed_repeats,
  seed_bootstrap,
};

// Applies derived seeds and the thread count; call once after overrides.
inline ExperimentConfig finalize(ExperimentConfig c) {
  c.net.seed = split_seed(c.seed, seed_net);
  c.finetune.seed = split_seed(c.seed, seed_finetune);
  c.finetune.threads = c.threads;
  validate_config(c);
  return c;
}

// ---------------------------------------------------------------------------
// Run directories and logging

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

class RunLog {
public:
  RunLog() = default;
  explicit RunLog(const fs::path &path, bool echo = true) : out_(std::make_shared<std::ofstream>(path)), echo_(echo) {
    if (!*out_) throw DataError("cannot write " + path.string());
  }
  void operator()(const std::string &line) const {
    if (out_) *out_ << line << '\n' << std::flush;
    if (echo_) std::cerr << line << '\n';
  }

private:
  std::shared_ptr<std::ofstream> out_;
  bool echo_{false};
};

struct RunOptions {
  fs::path workspace{"runs/default"};
  bool force{false};
  bool echo{true};
};

inline bool dir_nonempty(const fs::path &p) { return fs::exists(p) && !fs::is_empty(p); }

inline fs::path prepare_run_dir(const fs::path &dir, bool force) {
  if (dir_nonempty(dir)) {
    if (!force) throw ConfigError(dir.string() + " already exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

struct Run {
  fs::path dir;
  RunLog log;
};

inline Run open_run(const fs::path &dir, const ExperimentConfig &cfg, const RunOptions &opt, const std::string &command) {
  prepare_run_dir(dir, opt.force);
  json snap = cfg;
  snap["command"] = command;
  save_json(dir / "config.json", snap);
  Run r{dir, RunLog(dir / "log.txt", opt.echo)};
  r.log(command + ": " + dir.filename().string());
  return r;
}

class CsvWriter {
public:
  CsvWriter(const fs::path &path, const std::vector<std::string> &header) : out_(path), width_(header.size()) {
    if (!out_) throw DataError("cannot write " + path.string());
    row(header);
  }
  void row(const std::vector<std::string> &cells) {
    if (cells.size() != width_) throw DataError("csv: row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

private:
  std::ofstream out_;
  std::size_t width_;
};

// ---------------------------------------------------------------------------
// Dataset layout

struct Dataset {
  fs::path dir;
  json meta;
  std::vector<netft::SlowStory> train, val, test;
  std::vector<std::vector<TimeSeries>> test_repeats; // per test story
  TimeSeries fast_stimulus;
  TimeSeries fast_responses;
};

inline fs::path dataset_dir(const ExperimentConfig &cfg, const RunOptions &opt) {
  return cfg.dataset.empty() ? opt.workspace / "dataset" : fs::path(cfg.dataset);
}

namespace detail {

inline void write_series(const fs::path &root, const std::string &stem, const TimeSeries &ts, DataRole role,
                         const std::string &name, const std::optional<std::vector<std::string>> &repeats = {}) {
  write_timeseries(root / (stem + ".nst"), ts);
  DatasetManifest m;
  m.name = name;
  m.rate_hz = ts.rate_hz;
  m.role = role;
  m.channel_names = ts.channel_names;
  m.tensor_path = fs::path(stem).filename().string() + ".nst";
  m.repeats = repeats;
  save_manifest(root / (stem + ".manifest.json"), m);
}

inline TimeSeries slice(const TimeSeries &ts, Index start, Index len) {
  TimeSeries out(Matrix(ts.values.middleRows(start, len)), ts.rate_hz);
  out.channel_names = ts.channel_names;
  return out;
}

} // namespace detail

// Writes the synthetic dataset: one continuous slow session cut into
// train/val/test stories (test responses as repeats), plus a separate fast
// session that shares the latent-to-channel mixing.
inline void cmd_synth(const ExperimentConfig &cfg, const RunOptions &opt) {
  const auto &s = cfg.synth;
  const fs::path dir = dataset_dir(cfg, opt);
  Run run = open_run(dir, cfg, opt, "synth");
  fs::create_directories(dir / "stimulus");
  fs::create_directories(dir / "slow");
  fs::create_directories(dir / "fast");

  const int n_stories = s.train_stories + s.val_stories + s.test_stories;
  const double total_s = s.story_s * n_stories;
  const LatentOptions lo{s.input_rate_hz, s.latent_lo_hz, s.latent_hi_hz, s.slow_channels, s.fast_channels,
                         s.spectral_exponent};
  const LatentOptions nuis_lo{s.input_rate_hz, s.latent_lo_hz, s.latent_hi_hz, 0, 0, s.spectral_exponent};
  const LatentDrive latent = make_latent(total_s, s.latents, split_seed(cfg.seed, seed_latent), lo);
  const LatentDrive nuisance = make_latent(total_s, s.nuisance_latents, split_seed(cfg.seed, seed_nuisance), nuis_lo);
  TimeSeries wave = synthesize_waveform(latent, nuisance.values, s.waveform, split_seed(cfg.seed, seed_waveform));
  wave.channel_names = {"waveform"};
  TimeSeries slow = render_slow(latent, s.hrf, s.slow_rate_hz);
  slow.channel_names = default_channel_names(slow.channels(), "voxel");
  run.log("slow session: " + std::to_string(n_stories) + " stories x " + num(s.story_s) + " s");

  const auto n_in = static_cast<Index>(std::llround(s.story_s * s.input_rate_hz));
  const auto n_out = static_cast<Index>(std::llround(s.story_s * s.slow_rate_hz));
  json splits = {{"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
  const std::uint64_t noise_root = split_seed(cfg.seed, seed_slow_noise);
  const std::uint64_t rep_root = split_seed(cfg.seed, seed_repeats);
  for (int i = 0; i < n_stories; ++i) {
    const std::string split = i < s.train_stories ? "train" : i < s.train_stories + s.val_stories ? "val" : "test";
    char name[32];
    std::snprintf(name, sizeof name, "story_%02d", i);
    const TimeSeries stim = detail::slice(wave, i * n_in, n_in);
    const TimeSeries clean = detail::slice(slow, i * n_out, n_out);
    detail::write_series(dir, std::string("stimulus/") + name, stim, DataRole::stimulus_waveform, name);
    if (split != "test") {
      TimeSeries noisy = add_noise(clean, s.slow_noise, split_seed(noise_root, static_cast<std::uint64_t>(i)));
      noisy.channel_names = clean.channel_names;
      detail::write_series(dir, std::string("slow/") + name, noisy, DataRole::responses, name);
    } else {
      std::vector<std::uint64_t> seeds;
      for (int r = 0; r < s.test_repeats; ++r)
        seeds.push_back(split_seed(split_seed(rep_root, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(r)));
      auto reps = make_repeats(clean, s.test_repeats, s.slow_noise, seeds);
      std::vector<std::string> rep_paths;
      for (int r = 0; r < s.test_repeats; ++r) {
        char rn[48];
        std::snprintf(rn, sizeof rn, "%s_rep%02d.nst", name, r);
        write_timeseries(dir / "slow" / rn, reps[static_cast<std::size_t>(r)]);
        rep_paths.push_back(rn);
      }
      TimeSeries mean = average_repeats(reps);
      mean.channel_names = clean.channel_names;
      detail::write_series(dir, std::string("slow/") + name, mean, DataRole::responses, name, rep_paths);
    }
    splits[split].push_back({{"name", name},
                             {"stimulus", std::string("stimulus/") + name + ".manifest.json"},
                             {"responses", std::string("slow/") + name + ".manifest.json"}});
  }

  LatentDrive fast_latent = make_latent(s.fast_duration_s, s.latents, split_seed(cfg.seed, seed_fast_latent), lo);
  fast_latent.mixing_slow = latent.mixing_slow;
  fast_latent.mixing_fast = latent.mixing_fast;
  const LatentDrive fast_nuis =
      make_latent(s.fast_duration_s, s.nuisance_latents, split_seed(cfg.seed, seed_fast_nuisance), nuis_lo);
  TimeSeries fwave = synthesize_waveform(fast_latent, fast_nuis.values, s.waveform, split_seed(cfg.seed, seed_fast_waveform));
  fwave.channel_names = {"waveform"};
  TimeSeries fast = render_fast(fast_latent, s.fast_delay_s, s.fast_rate_hz, s.fast_render);
  fast = add_noise(fast, NoiseSpec::flat(s.fast_snr, s.fast_rate_hz), split_seed(cfg.seed, seed_fast_noise));
  fast.channel_names = default_channel_names(fast.channels(), "electrode");
  detail::write_series(dir, "fast/stimulus", fwave, DataRole::stimulus_waveform, "fast_stimulus");
  detail::write_series(dir, "fast/responses", fast, DataRole::responses, "fast_responses");
  run.log("fast session: " + num(s.fast_duration_s) + " s, " + std::to_string(fast.channels()) + " channels");

  json meta = {{"format", "xmodal-dataset-1"},
               {"seed", cfg.seed},
               {"input_rate_hz", s.input_rate_hz},
               {"slow_rate_hz", s.slow_rate_hz},
               {"fast_rate_hz", s.fast_rate_hz},
               {"splits", splits},
               {"fast", {{"stimulus", "fast/stimulus.manifest.json"}, {"responses", "fast/responses.manifest.json"}}}};
  save_json(dir / "dataset.json", meta);
  run.log("wrote dataset.json");
}

namespace detail {

inline TimeSeries load_series(const fs::path &root, const std::string &rel, DataRole want, bool average = false) {
  const ManifestRef ref = load_manifest(root / rel);
  if (ref.manifest.role != want) throw DataError((root / rel).string() + ": unexpected role");
  return average && ref.manifest.repeats ? average_repeats(ref) : load_timeseries(ref);
}

inline std::vector<TimeSeries> load_repeats(const fs::path &root, const std::string &rel) {
  const ManifestRef ref = load_manifest(root / rel);
  std::vector<TimeSeries> out;
  if (!ref.manifest.repeats) return out;
  for (const auto &p : *ref.manifest.repeats) {
    TimeSeries ts = read_timeseries(ref.resolve(p), ref.manifest.rate_hz);
    ts.channel_names = ref.manifest.channel_names;
    out.push_back(std::move(ts));
  }
  return out;
}

} // namespace detail

// Loads and validates a dataset directory; every problem is a DataError.
inline Dataset load_dataset(const fs::path &dir) {
  if (!fs::exists(dir / "dataset.json")) throw DataError(dir.string() + ": no dataset.json");
  Dataset d;
  d.dir = dir;
  d.meta = load_json(dir / "dataset.json");
  try {
    if (d.meta.at("format") != "xmodal-dataset-1") throw DataError(dir.string() + ": unknown dataset format");
    const double in_rate = d.meta.at("input_rate_hz").get<double>();
    for (const char *split : {"train", "val", "test"}) {
      auto &target = std::string(split) == "train" ? d.train : std::string(split) == "val" ? d.val : d.test;
      for (const auto &st : d.meta.at("splits").at(split)) {
        netft::SlowStory story;
        story.stimulus = detail::load_series(dir, st.at("stimulus").get<std::string>(), DataRole::stimulus_waveform);
        story.responses = detail::load_series(dir, st.at("responses").get<std::string>(), DataRole::responses, true);
        if (story.stimulus.channels() != 1) throw DataError(dir.string() + ": stimulus must have one channel");
        if (std::abs(story.stimulus.rate_hz - in_rate) > 1e-9) throw DataError(dir.string() + ": stimulus rate mismatch");
        if (std::string(split) == "test") d.test_repeats.push_back(detail::load_repeats(dir, st.at("responses").get<std::string>()));
        target.push_back(std::move(story));
      }
    }
    d.fast_stimulus = detail::load_series(dir, d.meta.at("fast").at("stimulus").get<std::string>(), DataRole::stimulus_waveform);
    d.fast_responses = detail::load_series(dir, d.meta.at("fast").at("responses").get<std::string>(), DataRole::responses);
  } catch (const json::exception &e) {
    throw DataError(dir.string() + "/dataset.json: " + e.what());
  }
  if (d.train.empty() || d.val.empty() || d.test.empty()) throw DataError(dir.string() + ": every split needs a story");
  const Index ch = d.train.front().responses.channels();
  for (const auto *split : {&d.train, &d.val, &d.test})
    for (const auto &s : *split)
      if (s.responses.channels() != ch) throw DataError(dir.string() + ": stories differ in channel count");
  return d;
}

// Checks every emitted file under a directory: JSON parses, manifests resolve
// to well-formed tensors, tensors decode, CSV files are rectangular. Returns
// the number of files checked.
inline std::size_t validate_tree(const fs::path &dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto &e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto &f : files) {
    const std::string name = f.filename().string();
    const auto ends = [&](const std::string &suf) {
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends(".manifest.json")) {
      (void)load_manifest(f);
    } else if (ends(".json")) {
      (void)load_json(f);
    } else if (ends(".nst")) {
      (void)read_tensor(f);
    } else if (ends(".csv")) {
      std::ifstream in(f);
      std::string line;
      std::size_t width = 0, n = 0;
      while (std::getline(in, line)) {
        const std::size_t w = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
        if (n++ == 0) width = w;
        else if (w != width) throw DataError(f.string() + ": ragged CSV at line " + std::to_string(n));
      }
      if (n == 0) throw DataError(f.string() + ": empty CSV");
    }
  }
  if (fs::exists(dir / "dataset.json")) (void)load_dataset(dir);
  return files.size();
}

// ---------------------------------------------------------------------------
// Networks and checkpoints

inline netft::FeatureNet make_net(const ExperimentConfig &cfg) { return netft::FeatureNet(cfg.net); }

// Accepts a finetune run directory (uses its selected epoch) or a checkpoint directory.
inline netft::FeatureNet load_tuned_net(const ExperimentConfig &cfg, const fs::path &ckpt) {
  netft::FeatureNet net = make_net(cfg);
  fs::path dir = ckpt;
  if (fs::exists(ckpt / "selection.json")) dir = ckpt / load_json(ckpt / "selection.json").at("chosen_checkpoint").get<std::string>();
  if (!fs::exists(dir / "meta.json")) throw DataError(ckpt.string() + ": not a checkpoint or finetune run");
  netft::apply_checkpoint(net, netft::load_checkpoint(dir, net));
  return net;
}

struct TuneOutcome {
  netft::FinetuneResult result;
  netft::EpochSelection selection;
};

// Fine-tunes a fresh net on `train`, selecting the epoch on `val`. With a
// downsampling factor > 1 both splits are downsampled, spans keep their
// duration and the configured downsampled delays replace the original ones.
inline TuneOutcome tune(const ExperimentConfig &cfg, std::vector<netft::SlowStory> train,
                        std::vector<netft::SlowStory> val, int factor, const RunLog &log) {
  netft::FinetuneConfig fc = cfg.finetune;
  netft::EncodingSetup es = cfg.slow_setup();
  if (factor > 1) {
    for (auto *split : {&train, &val})
      for (auto &s : *split) s.responses = downsample_responses(s.responses, factor);
    fc.batch_trs = std::max(1, static_cast<int>(std::lround(static_cast<double>(fc.batch_trs) / factor)));
    if (!fc.delays.empty()) fc.delays = cfg.downsample.delays;
    es.delays = cfg.downsample.delays;
  }
  netft::FeatureNet net = make_net(cfg);
  TuneOutcome out;
  out.result = netft::finetune(net, train, fc, [&](const netft::Checkpoint &c) {
    log("epoch " + std::to_string(c.epoch) + " train_loss " + num(c.train_loss));
  });
  out.selection = netft::select_epoch(net, out.result.checkpoints, val, cfg.ridge_config(), es);
  log("selected epoch " + std::to_string(out.selection.chosen_epoch) + " (val " +
      num(out.selection.scores[out.selection.chosen_index]) + ", pretrained " + num(out.selection.pretrained_score) + ")");
  return out;
}

inline std::string finetune_run_name(int factor) {
  return factor > 1 ? "finetune_ds" + std::to_string(factor) : "finetune";
}

inline fs::path cmd_finetune(const ExperimentConfig &cfg, const RunOptions &opt, int factor = 1) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  const Dataset data = load_dataset(dataset_dir(cfg, opt));
  Run run = open_run(opt.workspace / finetune_run_name(factor), cfg, opt, "finetune");
  run.log("downsample factor " + std::to_string(factor) + ", " + std::to_string(data.train.size()) + " training stories");
  const TuneOutcome t = tune(cfg, data.train, data.val, factor, run.log);
  const netft::FeatureNet base = make_net(cfg);
  for (const auto &ck : t.result.checkpoints) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%02d", ck.epoch);
    netft::save_checkpoint(run.dir / "checkpoints" / name, base, ck);
  }
  char chosen[48];
  std::snprintf(chosen, sizeof chosen, "checkpoints/epoch_%02d", t.selection.chosen_epoch);
  const auto &sel = t.selection;
  save_json(run.dir / "selection.json", {{"downsample_factor", factor},
                                         {"epochs", sel.epochs},
                                         {"val_scores", sel.scores},
                                         {"train_loss", t.result.loss_curve},
                                         {"pretrained_val_score", sel.pretrained_score},
                                         {"chosen_epoch", sel.chosen_epoch},
                                         {"chosen_val_score", sel.scores[sel.chosen_index]},
                                         {"chosen_refit_score", sel.refit.cv_score_per_channel.mean()},
                                         {"chosen_checkpoint", chosen}});
  return run.dir;
}

// ---------------------------------------------------------------------------
// Encoding

inline std::string run_label(const std::optional<fs::path> &ckpt) {
  if (!ckpt) return "pretrained";
  const fs::path p = ckpt->lexically_normal();
  return (p.has_filename() ? p : p.parent_path()).filename().string();
}

struct SlowScores {
  RowVector cv;   // cross-validated on the training stories
  RowVector test; // held-out test story (repeat average)
  std::vector<double> alpha;
};

inline SlowScores encode_slow(const ExperimentConfig &cfg, const netft::FeatureNet &net, const Dataset &data) {
  const auto setup = cfg.slow_setup();
  const netft::SlowDesign tr = netft::slow_design(net, data.train, setup);
  const RidgeSolution sol = fit_ridge_cv(tr.x, tr.y, cfg.ridge_config());
  const netft::SlowDesign te = netft::slow_design(net, data.test, setup);
  SlowScores s;
  s.cv = sol.cv_score_per_channel;
  s.test = pearson_scores(predict_response(sol, te.x), te.y).r;
  s.alpha = sol.alpha_per_channel;
  return s;
}

inline fs::path cmd_encode_slow(const ExperimentConfig &cfg, const RunOptions &opt,
                                const std::optional<fs::path> &ckpt = {}) {
  const Dataset data = load_dataset(dataset_dir(cfg, opt));
  const netft::FeatureNet net = ckpt ? load_tuned_net(cfg, *ckpt) : make_net(cfg);
  Run run = open_run(opt.workspace / ("encode_slow_" + run_label(ckpt)), cfg, opt, "encode-slow");
  const SlowScores s = encode_slow(cfg, net, data);
  const auto &names = data.train.front().responses.channel_names;
  CsvWriter csv(run.dir / "scores.csv", {"channel", "alpha", "cv_score", "test_score"});
  for (Index c = 0; c < s.cv.size(); ++c)
    csv.row({names[static_cast<std::size_t>(c)], num(s.alpha[static_cast<std::size_t>(c)]), num(s.cv(c)), num(s.test(c))});
  save_json(run.dir / "summary.json", {{"checkpoint", run_label(ckpt)},
                                       {"mean_cv_score", s.cv.mean()},
                                       {"mean_test_score", s.test.mean()}});
  run.log("mean test score " + num(s.test.mean()));
  return run.dir;
}

inline LagSweepResult encode_fast(const ExperimentConfig &cfg, const netft::FeatureNet &net, const Dataset &data) {
  const FeatureMatrix f = netft::extract_features(net, data.fast_stimulus, cfg.fast.feature_stride_s, cfg.threads);
  const Index m = std::min(f.samples(), data.fast_responses.samples());
  return lag_sweep(FeatureMatrix(Matrix(f.values.topRows(m)), f.rate_hz),
                   TimeSeries(Matrix(data.fast_responses.values.topRows(m)), data.fast_responses.rate_hz), cfg.lags(),
                   cfg.ridge_config());
}

inline RowVector read_score_column(const fs::path &csv, const std::string &column) {
  std::ifstream in(csv);
  if (!in) throw DataError("cannot read " + csv.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::string> head;
  {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) head.push_back(cell);
  }
  const auto it = std::find(head.begin(), head.end(), column);
  if (it == head.end()) throw DataError(csv.string() + ": no column " + column);
  const auto col = static_cast<std::size_t>(it - head.begin());
  std::vector<double> v;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t i = 0; i <= col; ++i) std::getline(ss, cell, ',');
    try {
      v.push_back(std::stod(cell));
    } catch (const std::exception &) {
      throw DataError(csv.string() + ": bad number '" + cell + "'");
    }
  }
  return Eigen::Map<const RowVector>(v.data(), static_cast<Index>(v.size()));
}

inline TTestResult write_comparison(const fs::path &dir, const std::vector<std::string> &names, const RowVector &base,
                                    const RowVector &tuned, const std::string &baseline_label) {
  if (base.size() != tuned.size()) throw DataError("comparison: channel count mismatch with baseline");
  CsvWriter csv(dir / "comparison.csv", {"channel", "baseline", "finetuned", "difference"});
  for (Index c = 0; c < base.size(); ++c)
    csv.row({names[static_cast<std::size_t>(c)], num(base(c)), num(tuned(c)), num(tuned(c) - base(c))});
  const TTestResult t = paired_ttest(tuned, base);
  save_json(dir / "ttest.json", {{"baseline", baseline_label},
                                 {"mean_baseline", base.mean()},
                                 {"mean_finetuned", tuned.mean()},
                                 {"mean_difference", t.mean_difference},
                                 {"t", t.t},
                                 {"p", t.p},
                                 {"dof", t.dof},
                                 {"channels_improved", (tuned.array() > base.array()).count()},
                                 {"channels", base.size()}});
  return t;
}

inline fs::path cmd_encode_fast(const ExperimentConfig &cfg, const RunOptions &opt,
                                const std::optional<fs::path> &ckpt = {}) {
  const Dataset data = load_dataset(dataset_dir(cfg, opt));
  const netft::FeatureNet net = ckpt ? load_tuned_net(cfg, *ckpt) : make_net(cfg);
  Run run = open_run(opt.workspace / ("encode_fast_" + run_label(ckpt)), cfg, opt, "encode-fast");
  const LagSweepResult r = encode_fast(cfg, net, data);
  const auto &names = data.fast_responses.channel_names;
  const double rate = 1.0 / cfg.fast.feature_stride_s;
  CsvWriter csv(run.dir / "scores.csv", {"channel", "best_lag", "best_lag_s", "alpha", "score"});
  for (Index c = 0; c < r.best_score_per_channel.size(); ++c) {
    const auto i = static_cast<std::size_t>(c);
    csv.row({names[i], std::to_string(r.best_lag_per_channel[i]), num(r.best_lag_per_channel[i] / rate),
             num(r.best_alpha_per_channel[i]), num(r.best_score_per_channel(c))});
  }
  write_tensor(run.dir / "score_per_lag.nst", r.score_per_lag_per_channel);
  TimeSeries resid(r.residuals, rate);
  resid.channel_names = names;
  detail::write_series(run.dir, "residuals", resid, DataRole::responses, "residuals");
  save_json(run.dir / "summary.json", {{"checkpoint", run_label(ckpt)},
                                       {"lags", r.lags},
                                       {"edge", r.edge},
                                       {"mean_score", r.best_score_per_channel.mean()}});
  run.log("mean fast score " + num(r.best_score_per_channel.mean()));
  const fs::path base = opt.workspace / "encode_fast_pretrained";
  if (ckpt && fs::exists(base / "scores.csv")) {
    const TTestResult t = write_comparison(run.dir, names, read_score_column(base / "scores.csv", "score"),
                                           r.best_score_per_channel, "encode_fast_pretrained");
    run.log("vs pretrained: mean difference " + num(t.mean_difference) + ", t " + num(t.t) + ", p " + num(t.p));
  }
  return run.dir;
}

// ---------------------------------------------------------------------------
// Analyses

inline fs::path cmd_spectrum(const ExperimentConfig &cfg, const RunOptions &opt, const fs::path &run_a,
                             const fs::path &run_b) {
  const auto load = [](const fs::path &d) { return load_timeseries(load_manifest(d / "residuals.manifest.json")); };
  const TimeSeries a = load(run_a), b = load(run_b);
  std::string label = run_b.lexically_normal().filename().string();
  if (label.empty()) label = run_b.lexically_normal().parent_path().filename().string();
  if (label.rfind("encode_fast_", 0) == 0) label = label.substr(12);
  Run run = open_run(opt.workspace / ("spectrum_" + label), cfg, opt, "spectrum");
  const PsdConfig pc{cfg.analysis.psd_segment, cfg.analysis.psd_overlap};
  const double threshold = cfg.synth.slow_rate_hz / 2.0;
  const ResidualDelta d = residual_psd_delta(a, b, pc, threshold);

  CsvWriter bands(run.dir / "bands.csv", {"lo_hz", "hi_hz", "power_a", "power_b", "pct_change"});
  const auto &e = cfg.analysis.spectrum_band_edges_hz;
  for (std::size_t i = 0; i + 1 < e.size(); ++i) {
    double pa = 0.0, pb = 0.0;
    for (std::size_t k = 0; k < d.freqs_hz.size(); ++k) {
      const double f = d.freqs_hz[k];
      if (f > e[i] && f <= e[i + 1]) {
        pa += d.psd_a.row(static_cast<Index>(k)).sum();
        pb += d.psd_b.row(static_cast<Index>(k)).sum();
      }
    }
    bands.row({num(e[i]), num(e[i + 1]), num(pa), num(pb), num(pa > 0.0 ? 100.0 * (pb - pa) / pa : 0.0)});
  }
  CsvWriter per(run.dir / "channels.csv", {"channel", "pct_below", "pct_above"});
  for (Index c = 0; c < d.pct_below.size(); ++c)
    per.row({b.channel_names[static_cast<std::size_t>(c)], num(d.pct_below(c)), num(d.pct_above(c))});
  save_json(run.dir / "summary.json", {{"run_a", run_a.lexically_normal().filename().string()},
                                       {"run_b", run_b.lexically_normal().filename().string()},
                                       {"threshold_hz", threshold},
                                       {"mean_pct_below", d.pct_below.mean()},
                                       {"mean_pct_above", d.pct_above.mean()}});
  run.log("residual power change: below " + num(d.pct_below.mean()) + "%, above " + num(d.pct_above.mean()) + "%");
  return run.dir;
}

inline fs::path cmd_snr(const ExperimentConfig &cfg, const RunOptions &opt) {
  const Dataset data = load_dataset(dataset_dir(cfg, opt));
  Run run = open_run(opt.workspace / "snr", cfg, opt, "snr");
  const auto &reps = data.test_repeats.front();
  if (reps.size() < 2) throw DataError("snr: test story has fewer than two repeats");
  const SNRSpectrum s = snr_spectrum(reps, {cfg.analysis.snr_segment, 0.5});
  CsvWriter spec(run.dir / "spectrum.csv", {"freq_hz", "mean_snr"});
  for (std::size_t k = 0; k < s.freqs_hz.size(); ++k)
    spec.row({num(s.freqs_hz[k]), num(s.snr.row(static_cast<Index>(k)).mean())});
  CsvWriter bands(run.dir / "bands.csv", {"lo_hz", "hi_hz", "mean_snr", "bootstrap_se"});
  json jb = json::array();
  const auto &e = cfg.analysis.snr_band_edges_hz;
  for (std::size_t i = 0; i + 1 < e.size(); ++i) {
    const RowVector v = band_snr(s, e[i], e[i + 1]);
    const double se = bootstrap_se_of_mean(v, cfg.analysis.n_bootstrap, split_seed(cfg.seed, seed_bootstrap));
    bands.row({num(e[i]), num(e[i + 1]), num(v.mean()), num(se)});
    jb.push_back({{"lo_hz", e[i]}, {"hi_hz", e[i + 1]}, {"mean_snr", v.mean()}, {"bootstrap_se", se}});
    run.log("band " + num(e[i]) + "-" + num(e[i + 1]) + " Hz: SNR " + num(v.mean()) + " +/- " + num(se));
  }
  save_json(run.dir / "summary.json", {{"repeats", s.n_repeats}, {"capped", s.capped}, {"bands", jb}});
  return run.dir;
}

inline fs::path cmd_scaling(const ExperimentConfig &cfg, const RunOptions &opt) {
  const Dataset data = load_dataset(dataset_dir(cfg, opt));
  Run run = open_run(opt.workspace / "scaling", cfg, opt, "scaling");
  const auto &counts = cfg.scaling.story_counts;
  for (int n : counts)
    if (n > static_cast<int>(data.train.size())) throw ConfigError("scaling: story count exceeds training stories");
  const RowVector baseline = encode_fast(cfg, make_net(cfg), data).best_score_per_channel;
  Matrix scores(static_cast<Index>(counts.size()), baseline.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    run.log("fine-tuning on " + std::to_string(counts[i]) + " stories");
    const std::vector<netft::SlowStory> sub(data.train.begin(), data.train.begin() + counts[i]);
    const TuneOutcome t = tune(cfg, sub, data.val, 1, run.log);
    netft::FeatureNet net = make_net(cfg);
    netft::apply_checkpoint(net, t.result.checkpoints[t.selection.chosen_index]);
    scores.row(static_cast<Index>(i)) = encode_fast(cfg, net, data).best_score_per_channel;
  }
  const std::vector<double> xs(counts.begin(), counts.end());
  ScalingFit fit = fit_scaling(xs, scores, baseline);
  const ChannelSubset keep = threshold_channels(baseline, cfg.analysis.rho_min);
  if (!keep.warning.empty()) run.log("warning: " + keep.warning);
  const std::uint64_t bseed = split_seed(cfg.seed, seed_bootstrap);
  CsvWriter per_count(run.dir / "scores.csv", {"stories", "mean_score", "mean_improvement", "bootstrap_se"});
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const RowVector imp = scores.row(static_cast<Index>(i)) - baseline;
    fit.bootstrap_se.push_back(bootstrap_se_of_mean(imp, cfg.analysis.n_bootstrap, bseed));
    per_count.row({std::to_string(counts[i]), num(scores.row(static_cast<Index>(i)).mean()), num(imp.mean()),
                   num(fit.bootstrap_se.back())});
  }
  std::vector<bool> included(static_cast<std::size_t>(baseline.size()), false);
  for (Index c : keep.indices) included[static_cast<std::size_t>(c)] = true;
  CsvWriter per_ch(run.dir / "slopes.csv", {"channel", "baseline", "slope", "intercept", "r2", "slope_se", "included"});
  for (Index c = 0; c < baseline.size(); ++c)
    per_ch.row({data.fast_responses.channel_names[static_cast<std::size_t>(c)], num(baseline(c)), num(fit.slope(c)),
                num(fit.intercept(c)), num(fit.r2(c)), num(fit.slope_se(c)),
                included[static_cast<std::size_t>(c)] ? "1" : "0"});
  RowVector kept_slopes(static_cast<Index>(keep.indices.size()));
  for (std::size_t i = 0; i < keep.indices.size(); ++i) kept_slopes(static_cast<Index>(i)) = fit.slope(keep.indices[i]);
  json summary = {{"story_counts", counts}, {"channels_included", keep.indices.size()}};
  if (kept_slopes.size() >= 2) {
    summary["mean_slope"] = kept_slopes.mean();
    summary["mean_slope_bootstrap_se"] = bootstrap_se_of_mean(kept_slopes, cfg.analysis.n_bootstrap, bseed);
    run.log("mean slope per doubling " + num(kept_slopes.mean()));
  }
  save_json(run.dir / "summary.json", summary);
  return run.dir;
}

// Collects whatever runs exist in the workspace into figure-style tables.
inline fs::path cmd_report(const ExperimentConfig &cfg, const RunOptions &opt) {
  const fs::path ws = opt.workspace;
  Run run = open_run(ws / "report", cfg, opt, "report");
  json summary = json::object();
  std::vector<std::string> missing;
  const auto copy_csv = [&](const fs::path &src, const std::string &dst) {
    fs::copy_file(src, run.dir / dst, fs::copy_options::overwrite_existing);
  };

  const fs::path ft = ws / "encode_fast_finetune";
  if (fs::exists(ft / "ttest.json")) {
    copy_csv(ft / "comparison.csv", "transfer.csv");
    summary["transfer"] = load_json(ft / "ttest.json");
  } else {
    missing.push_back("transfer");
  }
  if (fs::exists(ws / "encode_slow_pretrained/summary.json") && fs::exists(ws / "encode_slow_finetune/summary.json")) {
    summary["slow"] = {{"pretrained", load_json(ws / "encode_slow_pretrained/summary.json")},
                       {"finetune", load_json(ws / "encode_slow_finetune/summary.json")}};
  } else {
    missing.push_back("slow");
  }
  if (fs::exists(ws / "spectrum_finetune/summary.json")) {
    copy_csv(ws / "spectrum_finetune/bands.csv", "spectrum.csv");
    summary["spectrum"] = load_json(ws / "spectrum_finetune/summary.json");
  } else {
    missing.push_back("spectrum");
  }
  if (fs::exists(ws / "snr/summary.json")) {
    copy_csv(ws / "snr/bands.csv", "snr.csv");
    summary["snr"] = load_json(ws / "snr/summary.json");
  } else {
    missing.push_back("snr");
  }
  // Downsampled variant vs original-rate fine-tune.
  const int f = cfg.downsample.factor;
  const fs::path ds = ws / ("encode_fast_" + finetune_run_name(f));
  if (f > 1 && fs::exists(ds / "scores.csv") && fs::exists(ft / "scores.csv")) {
    const RowVector orig = read_score_column(ft / "scores.csv", "score");
    const RowVector down = read_score_column(ds / "scores.csv", "score");
    if (orig.size() != down.size()) throw DataError("report: downsampled run has a different channel count");
    const double se = bootstrap_se_of_mean(orig, cfg.analysis.n_bootstrap, split_seed(cfg.seed, seed_bootstrap));
    const double diff = down.mean() - orig.mean();
    const TTestResult t = paired_ttest(down, orig);
    CsvWriter csv(run.dir / "downsample.csv", {"channel", "original_rate", "downsampled", "difference"});
    for (Index c = 0; c < orig.size(); ++c)
      csv.row({"ch" + std::to_string(c), num(orig(c)), num(down(c)), num(down(c) - orig(c))});
    summary["downsample"] = {{"factor", f},
                             {"mean_original_rate", orig.mean()},
                             {"mean_downsampled", down.mean()},
                             {"difference", diff},
                             {"bootstrap_se_original", se},
                             {"within_one_se", std::abs(diff) <= se},
                             {"t", t.t},
                             {"p", t.p}};
  } else {
    missing.push_back("downsample");
  }
  if (fs::exists(ws / "scaling/summary.json")) {
    copy_csv(ws / "scaling/scores.csv", "scaling.csv");
    summary["scaling"] = load_json(ws / "scaling/summary.json");
  } else {
    missing.push_back("scaling");
  }
  summary["missing"] = missing;
  save_json(run.dir / "summary.json", summary);
  run.log("report: " + std::to_string(summary.size() - 1) + " sections" +
          (missing.empty() ? "" : ", missing " + std::to_string(missing.size())));
  return run.dir;
}

// The whole experiment in dependency order.
inline void run_all(const ExperimentConfig &cfg, const RunOptions &opt) {
  if (cfg.dataset.empty()) cmd_synth(cfg, opt);
  const fs::path ft = cmd_finetune(cfg, opt, 1);
  cmd_encode_slow(cfg, opt);
  cmd_encode_slow(cfg, opt, ft);
  const fs::path pre = cmd_encode_fast(cfg, opt);
  const fs::path post = cmd_encode_fast(cfg, opt, ft);
  cmd_spectrum(cfg, opt, pre, post);
  if (cfg.downsample.factor > 1) {
    const fs::path ftd = cmd_finetune(cfg, opt, cfg.downsample.factor);
    const fs::path postd = cmd_encode_fast(cfg, opt, ftd);
    cmd_spectrum(cfg, opt, pre, postd);
  }
  cmd_snr(cfg, opt);
  cmd_scaling(cfg, opt);
  cmd_report(cfg, opt);
}

} // namespace pipeline
} // namespace xmodal
