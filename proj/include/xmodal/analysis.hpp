#pragma once

// Evaluation statistics: repeat-based SNR spectra, residual PSD comparisons,
// response downsampling, log-scaling fits, paired t-tests and bootstrap
// standard errors.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "signal.hpp"
#include "types.hpp"

namespace xmodal {

struct PsdConfig {
  Index segment_length{64};
  double overlap_fraction{0.5};
};

// ---------------------------------------------------------------------------
// SNR spectrum

struct SNRSpectrum {
  std::vector<double> freqs_hz;
  Matrix snr;        // frequency x channel, >= 0, capped at snr_cap
  Matrix signal_psd; // debiased when bias_corrected
  Matrix noise_psd;
  int n_repeats{0};
  bool bias_corrected{true};
  bool capped{false}; // some bins had no measurable noise
};

inline constexpr double snr_cap = 1e12;

// Signal is the mean over repeats and noise the deviation of each repeat from
// it. With bias correction the noise PSD is rescaled by n/(n-1) (deviations
// from the sample mean lose one degree of freedom) and the noise share left
// in the mean, noise/n, is subtracted from the signal PSD.
inline SNRSpectrum snr_spectrum(const std::vector<TimeSeries> &repeats, const PsdConfig &cfg = {},
                                bool bias_correction = true) {
  if (repeats.size() < 2) throw DataError("snr_spectrum: need at least 2 repeats");
  for (const auto &r : repeats)
    if (r.values.rows() != repeats[0].values.rows() || r.values.cols() != repeats[0].values.cols())
      throw DataError("snr_spectrum: repeats differ in shape");
  const auto n = static_cast<double>(repeats.size());

  TimeSeries mean = repeats[0];
  for (std::size_t i = 1; i < repeats.size(); ++i) mean.values += repeats[i].values;
  mean.values /= n;

  const PSDEstimate sig = welch_psd(mean, cfg.segment_length, cfg.overlap_fraction);
  Matrix noise = Matrix::Zero(sig.power.rows(), sig.power.cols());
  for (const auto &r : repeats) {
    TimeSeries dev(r.values - mean.values, r.rate_hz);
    noise += welch_psd(dev, cfg.segment_length, cfg.overlap_fraction).power;
  }
  noise /= n;

  SNRSpectrum out;
  out.freqs_hz = sig.freqs_hz;
  out.n_repeats = static_cast<int>(repeats.size());
  out.bias_corrected = bias_correction;
  if (bias_correction) {
    out.noise_psd = noise * (n / (n - 1.0));
    out.signal_psd = sig.power - out.noise_psd / n;
  } else {
    out.noise_psd = noise;
    out.signal_psd = sig.power;
  }
  out.snr.resize(sig.power.rows(), sig.power.cols());
  const double tiny = 1e-300;
  for (Index c = 0; c < out.snr.cols(); ++c) {
    const double floor = 1e-20 * std::max(tiny, sig.power.col(c).maxCoeff());
    for (Index k = 0; k < out.snr.rows(); ++k) {
      const double s = std::max(0.0, out.signal_psd(k, c));
      if (out.noise_psd(k, c) <= floor) {
        out.snr(k, c) = s > floor ? snr_cap : 0.0;
        out.capped = out.capped || s > floor;
      } else {
        out.snr(k, c) = std::min(snr_cap, s / out.noise_psd(k, c));
      }
    }
  }
  return out;
}

// Band SNR as the ratio of band-integrated signal and noise power, per channel.
inline RowVector band_snr(const SNRSpectrum &spec, double lo_hz, double hi_hz) {
  PSDEstimate s{spec.freqs_hz, spec.signal_psd, 0, 0.0};
  PSDEstimate n{spec.freqs_hz, spec.noise_psd, 0, 0.0};
  const RowVector sp = integrate_psd(s, lo_hz, hi_hz);
  const RowVector np = integrate_psd(n, lo_hz, hi_hz);
  RowVector out(sp.size());
  for (Index c = 0; c < sp.size(); ++c)
    out(c) = np(c) > 0.0 ? std::max(0.0, sp(c)) / np(c) : (sp(c) > 0.0 ? snr_cap : 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Residual PSD comparison

struct ResidualDelta {
  std::vector<double> freqs_hz;
  Matrix psd_a, psd_b;
  Matrix delta;            // psd_b - psd_a, frequency x channel
  double threshold_hz{0.25};
  RowVector pct_below;     // 100 * (P_b - P_a) / P_a integrated over [0, threshold]
  RowVector pct_above;     // same over [threshold, Nyquist]
  RowVector power_a_below, power_a_above, power_b_below, power_b_above;
};

inline ResidualDelta residual_psd_delta(const TimeSeries &resid_a, const TimeSeries &resid_b, const PsdConfig &cfg = {},
                                        double threshold_hz = 0.25) {
  if (resid_a.values.rows() != resid_b.values.rows() || resid_a.values.cols() != resid_b.values.cols())
    throw DataError("residual_psd_delta: residual shapes differ");
  if (std::abs(resid_a.rate_hz - resid_b.rate_hz) > 1e-12 * resid_a.rate_hz)
    throw DataError("residual_psd_delta: residual rates differ");
  const PSDEstimate a = welch_psd(resid_a, cfg.segment_length, cfg.overlap_fraction);
  const PSDEstimate b = welch_psd(resid_b, cfg.segment_length, cfg.overlap_fraction);
  ResidualDelta out;
  out.freqs_hz = a.freqs_hz;
  out.psd_a = a.power;
  out.psd_b = b.power;
  out.delta = b.power - a.power;
  out.threshold_hz = threshold_hz;
  const double nyq = a.freqs_hz.back();
  out.power_a_below = integrate_psd(a, 0.0, threshold_hz);
  out.power_a_above = integrate_psd(a, threshold_hz, nyq);
  out.power_b_below = integrate_psd(b, 0.0, threshold_hz);
  out.power_b_above = integrate_psd(b, threshold_hz, nyq);
  auto pct = [](const RowVector &pa, const RowVector &pb) {
    RowVector r(pa.size());
    for (Index c = 0; c < pa.size(); ++c) r(c) = pa(c) > 0.0 ? 100.0 * (pb(c) - pa(c)) / pa(c) : 0.0;
    return r;
  };
  out.pct_below = pct(out.power_a_below, out.power_b_below);
  out.pct_above = pct(out.power_a_above, out.power_b_above);
  return out;
}

// ---------------------------------------------------------------------------
// Response downsampling

// Anti-alias low-pass at 0.8x the new Nyquist (windowed sinc, unit DC gain,
// edge-renormalised), then keep every factor-th sample.
inline TimeSeries downsample_responses(const TimeSeries &resp, int factor = 2, int taps = 0) {
  if (factor < 2) throw ConfigError("downsample_responses: factor must be an integer >= 2");
  if (taps == 0) taps = 16 * factor + 1;
  if (resp.samples() < taps) throw DataError("downsample_responses: series shorter than the anti-alias filter");
  const double new_rate = resp.rate_hz / factor;
  const auto h = design_lowpass(0.8 * new_rate / 2.0, resp.rate_hz, taps);
  const Matrix smooth = fir_filter_centered(resp.values, h, EdgeMode::renormalize);
  const Index n_out = resp.samples() / factor;
  TimeSeries out(Matrix(n_out, resp.channels()), new_rate);
  for (Index j = 0; j < n_out; ++j) out.values.row(j) = smooth.row(j * factor);
  out.channel_names = resp.channel_names;
  return out;
}

// ---------------------------------------------------------------------------
// Scaling fits

struct ScalingFit {
  std::vector<double> story_counts;
  RowVector slope;     // change in score per doubling of N
  RowVector intercept;
  RowVector r2;
  RowVector slope_se;  // ordinary least-squares standard error (0 with two points)
  std::vector<double> bootstrap_se; // per story count, filled by the caller
};

// Per channel OLS of (score(N) - baseline) on log2(N). scores is counts x C.
inline ScalingFit fit_scaling(const std::vector<double> &story_counts, const Matrix &scores, const RowVector &baseline) {
  const auto m = static_cast<Index>(story_counts.size());
  if (m < 2) throw ConfigError("fit_scaling: need at least two story counts");
  if (scores.rows() != m || scores.cols() != baseline.size()) throw DataError("fit_scaling: shape mismatch");
  for (Index i = 0; i < m; ++i) {
    if (!(story_counts[static_cast<std::size_t>(i)] > 0.0)) throw ConfigError("fit_scaling: story counts must be positive");
    if (i > 0 && !(story_counts[static_cast<std::size_t>(i)] > story_counts[static_cast<std::size_t>(i - 1)]))
      throw ConfigError("fit_scaling: story counts must be strictly increasing");
  }
  Vector x(m);
  for (Index i = 0; i < m; ++i) x(i) = std::log2(story_counts[static_cast<std::size_t>(i)]);
  const double xm = x.mean();
  const Vector xc = x.array() - xm;
  const double sxx = xc.squaredNorm();
  if (!(sxx > 0.0)) throw NumericalError("fit_scaling: singular design");

  ScalingFit fit;
  fit.story_counts = story_counts;
  const Index n_ch = scores.cols();
  fit.slope.resize(n_ch);
  fit.intercept.resize(n_ch);
  fit.r2.resize(n_ch);
  fit.slope_se.resize(n_ch);
  for (Index c = 0; c < n_ch; ++c) {
    const Vector d = scores.col(c).array() - baseline(c);
    const double dm = d.mean();
    const double slope = xc.dot(d.array().matrix() - Vector::Constant(m, dm)) / sxx;
    const double icpt = dm - slope * xm;
    const Vector resid = d - (Vector::Constant(m, icpt) + slope * x);
    const double sst = (d.array() - dm).square().sum();
    const double sse = resid.squaredNorm();
    fit.slope(c) = slope;
    fit.intercept(c) = icpt;
    fit.r2(c) = sst > 0.0 ? 1.0 - sse / sst : 1.0;
    fit.slope_se(c) = m > 2 ? std::sqrt(sse / static_cast<double>(m - 2) / sxx) : 0.0;
  }
  return fit;
}

struct ChannelSubset {
  std::vector<Index> indices;
  std::string warning;
};

inline ChannelSubset threshold_channels(const RowVector &scores, double rho_min = 0.1) {
  ChannelSubset out;
  for (Index c = 0; c < scores.size(); ++c) {
    if (!std::isfinite(scores(c))) throw DataError("threshold_channels: non-finite score");
    if (scores(c) > rho_min) out.indices.push_back(c);
  }
  if (out.indices.empty()) out.warning = "no channel exceeds the threshold " + std::to_string(rho_min);
  return out;
}

// ---------------------------------------------------------------------------
// Tests and resampling

struct TTestResult {
  double t{0.0};
  double p{1.0};
  int dof{0};
  double mean_difference{0.0};
  bool degenerate{false}; // all differences identical
};

// Two-sided paired t-test on a - b.
inline TTestResult paired_ttest(const RowVector &a, const RowVector &b) {
  if (a.size() != b.size()) throw DataError("paired_ttest: length mismatch");
  if (a.size() < 3) throw DataError("paired_ttest: need at least 3 pairs");
  const RowVector d = a - b;
  const auto n = static_cast<double>(d.size());
  TTestResult out;
  out.dof = static_cast<int>(d.size()) - 1;
  out.mean_difference = d.mean();
  const double var = (d.array() - out.mean_difference).square().sum() / (n - 1.0);
  if (!(var > 0.0)) {
    out.degenerate = true;
    if (out.mean_difference == 0.0) {
      out.t = 0.0;
      out.p = 1.0;
    } else {
      out.t = std::copysign(std::numeric_limits<double>::infinity(), out.mean_difference);
      out.p = 0.0;
    }
    return out;
  }
  out.t = out.mean_difference / std::sqrt(var / n);
  boost::math::students_t dist(static_cast<double>(out.dof));
  out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
  return out;
}

// Standard deviation of a statistic over bootstrap resamples (with
// replacement) of n_items. Replicate b draws from its own stream derived from
// (seed, b).
inline double bootstrap_se(std::size_t n_items, const std::function<double(const std::vector<std::size_t> &)> &statistic,
                           int n_boot = 1000, std::uint64_t seed = 0) {
  if (n_items < 2) throw ConfigError("bootstrap_se: need at least 2 items");
  if (n_boot < 2) throw ConfigError("bootstrap_se: need at least 2 bootstrap replicates");
  std::vector<double> stats(static_cast<std::size_t>(n_boot));
  std::vector<std::size_t> idx(n_items);
  for (int b = 0; b < n_boot; ++b) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(b)));
    for (auto &i : idx) i = rng.index(n_items);
    stats[static_cast<std::size_t>(b)] = statistic(idx);
  }
  const double mean = std::accumulate(stats.begin(), stats.end(), 0.0) / n_boot;
  double ss = 0.0;
  for (double s : stats) ss += (s - mean) * (s - mean);
  return std::sqrt(ss / (n_boot - 1));
}

// Bootstrap SE of the mean of a vector.
inline double bootstrap_se_of_mean(const RowVector &values, int n_boot = 1000, std::uint64_t seed = 0) {
  return bootstrap_se(
      static_cast<std::size_t>(values.size()),
      [&](const std::vector<std::size_t> &idx) {
        double s = 0.0;
        for (auto i : idx) s += values(static_cast<Index>(i));
        return s / static_cast<double>(idx.size());
      },
      n_boot, seed);
}

} // namespace xmodal
