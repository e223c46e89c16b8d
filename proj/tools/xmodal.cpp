// xmodal: command-line front end for the cross-rate encoding pipeline.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "xmodal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace xmodal;
namespace pl = xmodal::pipeline;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out{"runs/default"};
  bool force{false};
  std::optional<int> downsample_factor;
  std::optional<unsigned> threads;
  std::string data;
  bool quiet{false};
};

void add_common(CLI::App *cmd, Common &c, bool need_config = true) {
  auto *opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
  if (need_config) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--out", c.out, "workspace directory holding one subdirectory per run")->capture_default_str();
  cmd->add_flag("--force", c.force, "overwrite an existing run directory");
  cmd->add_option("--downsample-factor", c.downsample_factor, "integer response downsampling factor")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--data", c.data, "dataset directory (default: <out>/dataset)");
  cmd->add_flag("--quiet", c.quiet, "do not echo the run log to stderr");
}

pl::ExperimentConfig resolve(const Common &c) {
  pl::ExperimentConfig cfg = c.config.empty() ? pl::ExperimentConfig{} : pl::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  if (c.downsample_factor) cfg.downsample.factor = *c.downsample_factor;
  if (!c.data.empty()) cfg.dataset = c.data;
  return pl::finalize(cfg);
}

pl::RunOptions run_options(const Common &c) { return {fs::path(c.out), c.force, !c.quiet}; }

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Fine-tune a feature network on slow responses and evaluate transfer to fast responses"};
  app.require_subcommand(1);
  Common c;
  std::string checkpoint;
  std::vector<std::string> run_dirs;
  std::string validate_dir;

  auto *synth = app.add_subcommand("synth", "generate a synthetic dataset");
  auto *finetune = app.add_subcommand("finetune", "fine-tune on slow responses and select an epoch");
  auto *enc_slow = app.add_subcommand("encode-slow", "slow-rate encoding model (FIR delays)");
  auto *enc_fast = app.add_subcommand("encode-fast", "fast-rate encoding model (lag sweep)");
  auto *spectrum = app.add_subcommand("spectrum", "residual PSD change between two encode-fast runs");
  auto *snr = app.add_subcommand("snr", "band-wise SNR from test-story repeats");
  auto *scaling = app.add_subcommand("scaling", "fast-score scaling with the number of tuning stories");
  auto *report = app.add_subcommand("report", "collect figure tables from a workspace");
  auto *run_all = app.add_subcommand("run-all", "every stage in order");
  auto *validate = app.add_subcommand("validate", "check a dataset or run directory");

  for (auto *cmd : {synth, finetune, enc_slow, enc_fast, spectrum, snr, scaling, run_all}) add_common(cmd, c);
  add_common(report, c, false);
  for (auto *cmd : {enc_slow, enc_fast})
    cmd->add_option("--checkpoint", checkpoint, "finetune run or checkpoint directory")->check(CLI::ExistingDirectory);
  spectrum->add_option("runs", run_dirs, "baseline and comparison encode-fast runs")
      ->expected(2)
      ->check(CLI::ExistingDirectory);
  validate->add_option("dir", validate_dir, "directory to check")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return static_cast<int>(ExitCode::config);
  }

  try {
    if (*validate) {
      const auto n = pl::validate_tree(validate_dir);
      std::cout << validate_dir << ": ok (" << n << " files)\n";
      return 0;
    }
    const pl::ExperimentConfig cfg = resolve(c);
    const pl::RunOptions opt = run_options(c);
    const auto ckpt = checkpoint.empty() ? std::optional<fs::path>{} : std::optional<fs::path>{checkpoint};
    fs::path out;
    if (*synth) {
      pl::cmd_synth(cfg, opt);
      out = pl::dataset_dir(cfg, opt);
    } else if (*finetune) {
      out = pl::cmd_finetune(cfg, opt, c.downsample_factor.value_or(1));
    } else if (*enc_slow) {
      out = pl::cmd_encode_slow(cfg, opt, ckpt);
    } else if (*enc_fast) {
      out = pl::cmd_encode_fast(cfg, opt, ckpt);
    } else if (*spectrum) {
      const fs::path a = run_dirs.empty() ? opt.workspace / "encode_fast_pretrained" : fs::path(run_dirs[0]);
      const fs::path b = run_dirs.empty() ? opt.workspace / "encode_fast_finetune" : fs::path(run_dirs[1]);
      out = pl::cmd_spectrum(cfg, opt, a, b);
    } else if (*snr) {
      out = pl::cmd_snr(cfg, opt);
    } else if (*scaling) {
      out = pl::cmd_scaling(cfg, opt);
    } else if (*report) {
      out = pl::cmd_report(cfg, opt);
    } else if (*run_all) {
      pl::run_all(cfg, opt);
      out = opt.workspace;
    }
    std::cout << out.string() << '\n';
    return 0;
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(exit_code_for(e));
  } catch (const fs::filesystem_error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::data);
  }
}
