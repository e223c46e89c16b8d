#pragma once

// Synthetic cross-modality data. A set of band-limited latent drives is
// observed three ways: as the amplitude envelopes of a carrier waveform (the
// stimulus), as slow HRF-filtered responses and as fast, delayed,
// soft-rectified responses.

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <set>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "signal.hpp"
#include "types.hpp"

namespace xmodal {

namespace detail {

inline std::vector<std::complex<double>> rfft(const Vector &x) {
  Eigen::FFT<double> fft;
  std::vector<double> in(x.data(), x.data() + x.size());
  std::vector<std::complex<double>> out;
  fft.fwd(out, in);
  return out; // full spectrum (kissfft fills both halves)
}

inline Vector irfft(const std::vector<std::complex<double>> &spec, Index n) {
  Eigen::FFT<double> fft;
  std::vector<double> out;
  fft.inv(out, spec);
  return Eigen::Map<const Vector>(out.data(), n);
}

inline double bin_freq(std::size_t k, Index n, double rate) {
  return static_cast<double>(k) * rate / static_cast<double>(n);
}

// Causal linear convolution y[t] = sum_k h[k] x[t-k] of every column, via FFT.
inline Matrix convolve_causal(const Matrix &x, const std::vector<double> &h) {
  const Index n = x.rows();
  const auto m = static_cast<Index>(h.size());
  const auto len = static_cast<Index>(next_pow2(static_cast<std::size_t>(n + m - 1)));
  Eigen::FFT<double> fft;
  std::vector<double> hp(static_cast<std::size_t>(len), 0.0);
  std::copy(h.begin(), h.end(), hp.begin());
  std::vector<std::complex<double>> hf;
  fft.fwd(hf, hp);
  Matrix y(n, x.cols());
  for (Index c = 0; c < x.cols(); ++c) {
    std::vector<double> xp(static_cast<std::size_t>(len), 0.0);
    for (Index i = 0; i < n; ++i) xp[static_cast<std::size_t>(i)] = x(i, c);
    std::vector<std::complex<double>> xf;
    fft.fwd(xf, xp);
    for (std::size_t k = 0; k < xf.size(); ++k) xf[k] *= hf[k];
    std::vector<double> yp;
    fft.inv(yp, xf);
    for (Index i = 0; i < n; ++i) y(i, c) = yp[static_cast<std::size_t>(i)];
  }
  return y;
}

// Gaussian noise restricted to (lo, hi] by zeroing FFT bins; in-band power
// falls as f^-exponent (0 gives white noise).
inline Vector band_noise(Index n, double rate, double lo_hz, double hi_hz, Rng &rng, double exponent = 0.0) {
  Vector w(n);
  for (Index i = 0; i < n; ++i) w(i) = rng.normal();
  auto spec = rfft(w);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const std::size_t kk = std::min<std::size_t>(k, static_cast<std::size_t>(n) - k); // mirror bin
    const double f = bin_freq(kk, n, rate);
    if (!(f > lo_hz && f <= hi_hz)) spec[k] = 0.0;
    else if (exponent != 0.0) spec[k] *= std::pow(f, -0.5 * exponent);
  }
  return irfft(spec, n);
}

inline double band_energy(const std::vector<std::complex<double>> &spec, Index n, double rate, double lo, double hi) {
  double e = 0.0;
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const std::size_t kk = std::min<std::size_t>(k, static_cast<std::size_t>(n) - k);
    const double f = bin_freq(kk, n, rate);
    if (f > lo && f <= hi) e += std::norm(spec[k]);
  }
  return e;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Latent drive

struct LatentDrive {
  Matrix values;      // samples x K
  double rate_hz{100.0};
  Matrix mixing_slow; // K x C_slow
  Matrix mixing_fast; // K x C_fast
  std::uint64_t seed{0};

  Index latents() const { return values.cols(); }
  double duration_s() const { return static_cast<double>(values.rows()) / rate_hz; }
};

struct LatentOptions {
  double rate_hz{100.0};
  double lo_hz{0.01};
  double hi_hz{5.0};
  Index slow_channels{0}; // 0: one per latent
  Index fast_channels{0};
  double spectral_exponent{0.0}; // power ~ f^-exponent inside the band; 0 is flat
};

// Gaussian K x C map scaled so each output has unit variance for unit-variance
// independent latents. Requires full row rank.
inline Matrix make_mixing(Index k, Index c, std::uint64_t seed) {
  if (k < 1 || c < 1) throw ConfigError("make_mixing: dimensions must be positive");
  if (c < k) throw ConfigError("make_mixing: need at least as many channels as latents for full row rank");
  Rng rng(seed);
  const Matrix m = rng.normal_matrix(k, c, 1.0 / std::sqrt(static_cast<double>(k)));
  Eigen::FullPivLU<Matrix> lu(m);
  if (lu.rank() < k) throw NumericalError("make_mixing: drawn map is rank deficient");
  return m;
}

inline LatentDrive make_latent(double duration_s, Index k, std::uint64_t seed, const LatentOptions &opt = {}) {
  if (!(duration_s > 0.0)) throw ConfigError("make_latent: duration must be positive");
  if (k < 1) throw ConfigError("make_latent: need at least one latent channel");
  if (!(opt.rate_hz > 0.0) || !(opt.lo_hz >= 0.0) || !(opt.hi_hz > opt.lo_hz) || opt.hi_hz > opt.rate_hz / 2.0)
    throw ConfigError("make_latent: invalid band or rate");
  const auto n = static_cast<Index>(std::lround(duration_s * opt.rate_hz));
  LatentDrive out;
  out.rate_hz = opt.rate_hz;
  out.seed = seed;
  out.values.resize(n, k);
  for (Index c = 0; c < k; ++c) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(c)));
    Vector z = detail::band_noise(n, opt.rate_hz, opt.lo_hz, opt.hi_hz, rng, opt.spectral_exponent);
    z.array() -= z.mean();
    const double sd = std::sqrt(z.squaredNorm() / static_cast<double>(n));
    if (!(sd > 0.0)) throw NumericalError("make_latent: band too narrow for the duration");
    out.values.col(c) = z / sd;
  }
  out.mixing_slow = make_mixing(k, opt.slow_channels > 0 ? opt.slow_channels : k, split_seed(seed, 0x736c6f77));
  out.mixing_fast = make_mixing(k, opt.fast_channels > 0 ? opt.fast_channels : k, split_seed(seed, 0x66617374));
  return out;
}

// ---------------------------------------------------------------------------
// Stimulus waveform

struct WaveformOptions {
  std::vector<double> carriers_hz{11.0, 17.0, 23.0, 31.0}; // one per latent, cycled if fewer
  double depth{0.6};                                       // envelope = exp(depth * latent)
  std::vector<double> distractor_hz{14.0, 27.0};           // carriers driven by unrelated drives
  double distractor_level{1.0};
  double noise_level{0.05};
};

// Sum of amplitude-modulated carriers; `nuisance` (same length, any width)
// drives the distractor carriers.
inline TimeSeries synthesize_waveform(const LatentDrive &latent, const Matrix &nuisance, const WaveformOptions &opt,
                                      std::uint64_t seed) {
  if (opt.carriers_hz.empty()) throw ConfigError("waveform: at least one carrier required");
  const double nyq = latent.rate_hz / 2.0;
  for (double f : opt.carriers_hz)
    if (!(f > 0.0 && f < nyq)) throw ConfigError("waveform: carrier outside (0, Nyquist)");
  for (double f : opt.distractor_hz)
    if (!(f > 0.0 && f < nyq)) throw ConfigError("waveform: distractor outside (0, Nyquist)");
  const Index n = latent.values.rows();
  if (!opt.distractor_hz.empty() && (nuisance.rows() != n || nuisance.cols() < 1))
    throw DataError("waveform: nuisance drive must match the latent length");

  Rng rng(split_seed(seed, 0x77617665));
  const double two_pi = 2.0 * std::numbers::pi;
  Vector wave = Vector::Zero(n);
  auto add_carrier = [&](const Vector &drive, double f, double level) {
    const double phase = rng.uniform(0.0, two_pi);
    for (Index i = 0; i < n; ++i)
      wave(i) += level * std::exp(opt.depth * drive(i)) * std::sin(two_pi * f * static_cast<double>(i) / latent.rate_hz + phase);
  };
  for (Index k = 0; k < latent.latents(); ++k)
    add_carrier(latent.values.col(k), opt.carriers_hz[static_cast<std::size_t>(k) % opt.carriers_hz.size()], 1.0);
  for (std::size_t j = 0; j < opt.distractor_hz.size(); ++j)
    add_carrier(nuisance.col(static_cast<Index>(j % static_cast<std::size_t>(nuisance.cols()))), opt.distractor_hz[j],
                opt.distractor_level);
  for (Index i = 0; i < n; ++i) wave(i) += opt.noise_level * rng.normal();
  TimeSeries ts(wave, latent.rate_hz);
  ts.channel_names = {"waveform"};
  return ts;
}

// ---------------------------------------------------------------------------
// Slow (hemodynamic) render

// Double-gamma kernel: a positive lobe peaking near peak_s minus a scaled
// undershoot lobe peaking near undershoot_s, each lobe normalised to unit peak.
struct HRFParams {
  double peak_s{4.0};
  double undershoot_s{10.0};
  double peak_shape{6.0};
  double undershoot_shape{12.0};
  double undershoot_ratio{0.15};
  double length_s{32.0};

  double value(double t) const {
    if (t <= 0.0) return 0.0;
    const double b1 = peak_s / peak_shape, b2 = undershoot_s / undershoot_shape;
    return std::pow(t / peak_s, peak_shape) * std::exp(-(t - peak_s) / b1) -
           undershoot_ratio * std::pow(t / undershoot_s, undershoot_shape) * std::exp(-(t - undershoot_s) / b2);
  }

  // Continuous-time transfer function from the closed-form gamma transform.
  std::complex<double> transfer(double f_hz) const {
    auto lobe = [f_hz](double a, double d) {
      const double b = d / a;
      // integral of (t/d)^a exp(-(t-d)/b) exp(-i 2 pi f t) dt
      const double log_k = std::lgamma(a + 1.0) + (a + 1.0) * std::log(b) - a * std::log(d) + d / b;
      return std::exp(log_k) * std::pow(std::complex<double>(1.0, 2.0 * std::numbers::pi * f_hz * b), -(a + 1.0));
    };
    return lobe(peak_shape, peak_s) - undershoot_ratio * lobe(undershoot_shape, undershoot_s);
  }

  std::vector<double> kernel(double rate_hz) const {
    const auto m = static_cast<std::size_t>(std::lround(length_s * rate_hz)) + 1;
    std::vector<double> h(m);
    for (std::size_t i = 0; i < m; ++i) h[i] = value(static_cast<double>(i) / rate_hz);
    return h;
  }

  double peak_time(double rate_hz = 1000.0) const {
    const auto h = kernel(rate_hz);
    return static_cast<double>(std::max_element(h.begin(), h.end()) - h.begin()) / rate_hz;
  }

  // Time from the peak to the first return below zero.
  double return_time(double rate_hz = 1000.0) const {
    const auto h = kernel(rate_hz);
    const auto ip = static_cast<std::size_t>(std::max_element(h.begin(), h.end()) - h.begin());
    for (std::size_t i = ip; i < h.size(); ++i)
      if (h[i] < 0.0) return static_cast<double>(i - ip) / rate_hz;
    return std::numeric_limits<double>::infinity();
  }

  void validate() const {
    detail::require(peak_s > 0.0 && undershoot_s > peak_s, "hrf: need 0 < peak_s < undershoot_s");
    detail::require(peak_shape > 1.0 && undershoot_shape > 1.0, "hrf: gamma shapes must exceed 1");
    detail::require(undershoot_ratio >= 0.0, "hrf: undershoot ratio must be non-negative");
    detail::require(length_s > undershoot_s, "hrf: kernel must extend past the undershoot");
    const double pk = peak_time();
    detail::require(pk >= 3.0 && pk <= 4.0, "hrf: kernel peak must fall between 3 and 4 s");
    const double ret = return_time();
    detail::require(ret >= 4.0 && ret <= 6.0, "hrf: return to baseline must take 4 to 6 s after the peak");
    detail::require(transfer(0.0).real() > 0.0, "hrf: kernel must integrate to a positive value");
  }
};

// Mixed latent filtered by the HRF (Riemann sum, so the gain at frequency f is
// |H(f)| of the sampled kernel) and resampled to out_rate.
inline TimeSeries render_slow(const LatentDrive &latent, const HRFParams &hrf = {}, double out_rate_hz = 0.5) {
  hrf.validate();
  if (latent.duration_s() < 10.0 * hrf.length_s)
    throw DataError("render_slow: latent must be at least 10 kernel lengths long");
  if (latent.mixing_slow.rows() != latent.latents()) throw DataError("render_slow: mixing does not match latents");
  const Matrix mixed = latent.values * latent.mixing_slow;
  std::vector<double> h = hrf.kernel(latent.rate_hz);
  for (auto &v : h) v /= latent.rate_hz;
  const TimeSeries filtered(detail::convolve_causal(mixed, h), latent.rate_hz);
  TimeSeries out = resample_lanczos(filtered, out_rate_hz);
  out.channel_names = default_channel_names(out.channels(), "slow");
  return out;
}

// ---------------------------------------------------------------------------
// Fast (envelope-like) render

struct FastOptions {
  double smoothing_sd_s{0.05};
  double gain{0.5}; // curvature of the rectifier; at unit-variance drive the map stays ~97% linear
};

// Zero-anchored soft rectifier: softplus(g x) - log 2, so zero input maps to
// zero while large positive drive passes almost linearly.
inline double soft_rectify(double x, double gain) {
  const double u = gain * x;
  const double sp = u > 30.0 ? u : std::log1p(std::exp(u));
  return sp - std::numbers::ln2;
}

inline TimeSeries render_fast(const LatentDrive &latent, double delay_s, double out_rate_hz = 20.0,
                              const FastOptions &opt = {}) {
  if (!(delay_s >= 0.2 && delay_s <= 0.8)) throw ConfigError("render_fast: delay must be within [0.2, 0.8] s");
  if (delay_s >= latent.duration_s()) throw DataError("render_fast: delay exceeds the latent duration");
  if (latent.mixing_fast.rows() != latent.latents()) throw DataError("render_fast: mixing does not match latents");
  if (!(opt.smoothing_sd_s >= 0.0)) throw ConfigError("render_fast: smoothing width must be non-negative");
  const Matrix mixed = latent.values * latent.mixing_fast;
  const auto shift = static_cast<long>(std::lround(delay_s * latent.rate_hz));
  const Index n = mixed.rows();
  Matrix delayed = Matrix::Zero(n, mixed.cols());
  delayed.bottomRows(n - shift) = mixed.topRows(n - shift);

  Matrix smooth = delayed;
  const double sd = opt.smoothing_sd_s * latent.rate_hz;
  if (sd > 0.0) {
    const auto half = static_cast<int>(std::ceil(4.0 * sd));
    std::vector<double> g(static_cast<std::size_t>(2 * half + 1));
    double total = 0.0;
    for (int i = -half; i <= half; ++i) total += g[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * i * i / (sd * sd));
    for (auto &v : g) v /= total;
    smooth = fir_filter_centered(delayed, g, EdgeMode::zero_pad);
  }
  const Matrix rect = smooth.unaryExpr([&](double x) { return soft_rectify(x, opt.gain); });
  TimeSeries out = resample_lanczos(TimeSeries(rect, latent.rate_hz), out_rate_hz);
  out.channel_names = default_channel_names(out.channels(), "fast");
  return out;
}

// ---------------------------------------------------------------------------
// Noise

// Bands are (edges[b], edges[b+1]]; edges start at 0 and reach Nyquist.
// snr[b] is band signal power over band noise power; +inf means no noise.
struct NoiseSpec {
  std::vector<double> edges_hz;
  std::vector<double> snr;

  static NoiseSpec flat(double snr, double rate_hz) { return {{0.0, rate_hz / 2.0}, {snr}}; }

  void validate(double rate_hz) const {
    if (snr.empty()) throw ConfigError("noise spec: no bands");
    if (edges_hz.size() != snr.size() + 1) throw ConfigError("noise spec: need one more edge than bands");
    if (edges_hz.front() != 0.0) throw ConfigError("noise spec: bands must start at 0 Hz");
    for (std::size_t i = 1; i < edges_hz.size(); ++i)
      if (!(edges_hz[i] > edges_hz[i - 1])) throw ConfigError("noise spec: band edges must increase");
    if (edges_hz.back() < rate_hz / 2.0 * (1.0 - 1e-12)) throw ConfigError("noise spec: bands must reach Nyquist");
    for (double s : snr)
      if (!(s > 0.0)) throw ConfigError("noise spec: SNR targets must be positive");
  }
};

// Per channel and band, Gaussian noise confined to the band and scaled so the
// band's signal-to-noise power ratio equals the target exactly on the
// periodogram of this realisation.
inline TimeSeries add_noise(const TimeSeries &ts, const NoiseSpec &spec, std::uint64_t seed) {
  spec.validate(ts.rate_hz);
  const Index n = ts.samples();
  TimeSeries out = ts;
  for (Index c = 0; c < ts.channels(); ++c) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(c)));
    const auto sig_spec = detail::rfft(ts.values.col(c));
    for (std::size_t b = 0; b < spec.snr.size(); ++b) {
      const double lo = spec.edges_hz[b], hi = spec.edges_hz[b + 1];
      const Vector nz = detail::band_noise(n, ts.rate_hz, lo, hi, rng); // drawn even when unused: keeps streams aligned
      if (std::isinf(spec.snr[b])) continue;
      const double ps = detail::band_energy(sig_spec, n, ts.rate_hz, lo, hi);
      const double pn = detail::band_energy(detail::rfft(nz), n, ts.rate_hz, lo, hi);
      if (ps <= 0.0 || pn <= 0.0) continue;
      out.values.col(c) += nz * std::sqrt(ps / (spec.snr[b] * pn));
    }
  }
  return out;
}

inline std::vector<TimeSeries> make_repeats(const TimeSeries &clean, int n, const NoiseSpec &spec,
                                            const std::vector<std::uint64_t> &seeds) {
  if (n < 2) throw ConfigError("make_repeats: need at least two repeats");
  if (seeds.size() != static_cast<std::size_t>(n)) throw ConfigError("make_repeats: one seed per repeat required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("make_repeats: duplicate seeds");
  std::vector<TimeSeries> out;
  out.reserve(seeds.size());
  for (auto s : seeds) out.push_back(add_noise(clean, spec, s));
  return out;
}

} // namespace xmodal
