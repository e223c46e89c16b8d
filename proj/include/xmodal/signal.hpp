#pragma once

// Signal-processing kernels: Lanczos resampling, windowed-sinc FIR filtering,
// analytic-signal envelopes, high-gamma extraction and Welch PSD estimation.
//
// Edge convention: resampling and filtering treat samples outside the series
// as zero. The first/last `a` output samples of a Lanczos resample and the
// first/last taps/2 samples of a filter are edge-affected; analyses trim them.

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "error.hpp"
#include "types.hpp"

namespace xmodal {

using Complex = std::complex<double>;

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

inline double lanczos_kernel(double x, int a) {
  if (std::abs(x) >= a) return 0.0;
  return sinc(x) * sinc(x / a);
}

// ---------------------------------------------------------------------------
// Lanczos resampling

// Sparse linear map from an input grid to an output grid. Row j holds the
// weights applied to input samples first[j], first[j]+1, ...
struct ResampleMap {
  Index n_in{0};
  Index n_out{0};
  std::vector<Index> first;
  std::vector<std::vector<double>> weights;

  Matrix apply(const Matrix &x) const {
    if (x.rows() != n_in) throw DataError("resample map expects " + std::to_string(n_in) + " rows");
    Matrix y = Matrix::Zero(n_out, x.cols());
    for (Index j = 0; j < n_out; ++j) {
      const auto &w = weights[static_cast<std::size_t>(j)];
      const Index f = first[static_cast<std::size_t>(j)];
      for (std::size_t k = 0; k < w.size(); ++k) y.row(j) += w[k] * x.row(f + static_cast<Index>(k));
    }
    return y;
  }

  // Adjoint map, used to back-propagate through resampling.
  Matrix apply_transpose(const Matrix &y) const {
    Matrix x = Matrix::Zero(n_in, y.cols());
    for (Index j = 0; j < n_out; ++j) {
      const auto &w = weights[static_cast<std::size_t>(j)];
      const Index f = first[static_cast<std::size_t>(j)];
      for (std::size_t k = 0; k < w.size(); ++k) x.row(f + static_cast<Index>(k)) += w[k] * y.row(j);
    }
    return x;
  }

  Matrix dense() const {
    Matrix m = Matrix::Zero(n_out, n_in);
    for (Index j = 0; j < n_out; ++j) {
      const auto &w = weights[static_cast<std::size_t>(j)];
      for (std::size_t k = 0; k < w.size(); ++k) m(j, first[static_cast<std::size_t>(j)] + static_cast<Index>(k)) = w[k];
    }
    return m;
  }
};

// Output sample j sits at time j/rate_out. When downsampling with antialias
// set, the kernel is stretched to the output grid so it also acts as the
// anti-alias low-pass; otherwise it interpolates on the input grid.
// Weights are normalised by the kernel sum over the unbounded input grid; a
// constant input is reproduced exactly wherever the support is in range.
inline ResampleMap lanczos_map(Index n_in, double rate_in, double rate_out, int a = 3, bool antialias = true) {
  if (!(rate_in > 0.0) || !(rate_out > 0.0)) throw ConfigError("resample: rates must be positive");
  if (a < 1) throw ConfigError("resample: window parameter must be >= 1");
  if (n_in < 2 * a) throw DataError("resample: input shorter than 2*a samples");
  ResampleMap map;
  map.n_in = n_in;
  // Duration-preserving length; the small epsilon absorbs rounding of n*ratio.
  map.n_out = static_cast<Index>(std::floor(static_cast<double>(n_in) * rate_out / rate_in + 1e-9));
  map.first.resize(static_cast<std::size_t>(map.n_out));
  map.weights.resize(static_cast<std::size_t>(map.n_out));

  const double scale = antialias ? std::min(1.0, rate_out / rate_in) : 1.0; // kernel units per input sample
  const double half_width = a / scale;                     // in input samples
  for (Index j = 0; j < map.n_out; ++j) {
    const double center = static_cast<double>(j) * rate_in / rate_out; // in input samples
    const auto lo = static_cast<Index>(std::floor(center - half_width));
    const auto hi = static_cast<Index>(std::ceil(center + half_width));
    double total = 0.0;
    for (Index i = lo; i <= hi; ++i) total += lanczos_kernel((center - static_cast<double>(i)) * scale, a);
    const Index first = std::max<Index>(lo, 0);
    const Index last = std::min<Index>(hi, n_in - 1);
    std::vector<double> w;
    for (Index i = first; i <= last; ++i) w.push_back(lanczos_kernel((center - static_cast<double>(i)) * scale, a) / total);
    map.first[static_cast<std::size_t>(j)] = first;
    map.weights[static_cast<std::size_t>(j)] = std::move(w);
  }
  return map;
}

inline TimeSeries resample_lanczos(const TimeSeries &ts, double target_rate_hz, int a = 3, bool antialias = true) {
  if (!(target_rate_hz > 0.0)) throw ConfigError("resample_lanczos: target rate must be positive");
  const ResampleMap map = lanczos_map(ts.samples(), ts.rate_hz, target_rate_hz, a, antialias);
  TimeSeries out(map.apply(ts.values), target_rate_hz);
  out.channel_names = ts.channel_names;
  return out;
}

// ---------------------------------------------------------------------------
// FIR filtering

inline double hamming(std::size_t n, std::size_t taps) {
  if (taps == 1) return 1.0;
  return 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(taps - 1));
}

inline double fir_gain(const std::vector<double> &h, double freq_norm) {
  // |H(f)| for f in cycles/sample, linear phase removed.
  Complex acc{0.0, 0.0};
  for (std::size_t n = 0; n < h.size(); ++n)
    acc += h[n] * std::polar(1.0, -2.0 * std::numbers::pi * freq_norm * static_cast<double>(n));
  return std::abs(acc);
}

// Hamming-windowed sinc band-pass, normalised to unit gain at the band centre.
inline std::vector<double> design_bandpass(double lo_hz, double hi_hz, double rate_hz, int taps) {
  if (taps < 3 || taps % 2 == 0) throw ConfigError("bandpass: tap count must be odd and >= 3");
  if (!(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < rate_hz / 2.0))
    throw ConfigError("bandpass: need 0 < lo < hi < Nyquist");
  const double f1 = lo_hz / rate_hz, f2 = hi_hz / rate_hz;
  const int m = taps / 2;
  std::vector<double> h(static_cast<std::size_t>(taps));
  for (int n = 0; n < taps; ++n) {
    const double k = n - m;
    h[static_cast<std::size_t>(n)] =
        (2.0 * f2 * sinc(2.0 * f2 * k) - 2.0 * f1 * sinc(2.0 * f1 * k)) * hamming(static_cast<std::size_t>(n), static_cast<std::size_t>(taps));
  }
  const double g = fir_gain(h, 0.5 * (f1 + f2));
  for (double &v : h) v /= g;
  return h;
}

// Hamming-windowed sinc low-pass with unit DC gain.
inline std::vector<double> design_lowpass(double cutoff_hz, double rate_hz, int taps) {
  if (taps < 3 || taps % 2 == 0) throw ConfigError("lowpass: tap count must be odd and >= 3");
  if (!(cutoff_hz > 0.0 && cutoff_hz < rate_hz / 2.0)) throw ConfigError("lowpass: cutoff must be in (0, Nyquist)");
  const double fc = cutoff_hz / rate_hz;
  const int m = taps / 2;
  std::vector<double> h(static_cast<std::size_t>(taps));
  double sum = 0.0;
  for (int n = 0; n < taps; ++n) {
    h[static_cast<std::size_t>(n)] = 2.0 * fc * sinc(2.0 * fc * (n - m)) * hamming(static_cast<std::size_t>(n), static_cast<std::size_t>(taps));
    sum += h[static_cast<std::size_t>(n)];
  }
  for (double &v : h) v /= sum;
  return h;
}

enum class EdgeMode {
  zero_pad,    // out-of-range samples are zero
  renormalize, // divide by the in-range tap sum (unit-DC filters only)
};

// Zero-phase application of an odd-length linear-phase FIR: the (taps-1)/2
// group delay is compensated by centring the kernel on each output sample.
inline Matrix fir_filter_centered(const Matrix &x, const std::vector<double> &h, EdgeMode edges = EdgeMode::zero_pad) {
  const Index n = x.rows();
  const auto taps = static_cast<Index>(h.size());
  const Index m = taps / 2;
  Matrix y = Matrix::Zero(n, x.cols());
  for (Index t = 0; t < n; ++t) {
    const Index k0 = std::max<Index>(0, t + m - (n - 1)); // first tap with in-range input
    const Index k1 = std::min<Index>(taps - 1, t + m);    // last tap with in-range input
    double wsum = 0.0;
    for (Index k = k0; k <= k1; ++k) {
      const double w = h[static_cast<std::size_t>(k)];
      y.row(t) += w * x.row(t + m - k);
      wsum += w;
    }
    if (edges == EdgeMode::renormalize && (k0 > 0 || k1 < taps - 1) && wsum != 0.0) y.row(t) /= wsum;
  }
  return y;
}

inline TimeSeries bandpass_fir(const TimeSeries &ts, double lo_hz, double hi_hz, int taps) {
  const auto h = design_bandpass(lo_hz, hi_hz, ts.rate_hz, taps);
  TimeSeries out(fir_filter_centered(ts.values, h), ts.rate_hz);
  out.channel_names = ts.channel_names;
  return out;
}

// ---------------------------------------------------------------------------
// Analytic-signal envelope

// Magnitude of the analytic signal, built in the frequency domain by zeroing
// negative frequencies and doubling positive ones. The series is zero-padded
// to a power of two; padding only affects the edges.
inline TimeSeries hilbert_envelope(const TimeSeries &ts) {
  const Index n = ts.samples();
  if (n == 0) throw DataError("hilbert_envelope: empty input");
  if (!ts.values.allFinite()) throw DataError("hilbert_envelope: non-finite input");
  const std::size_t len = next_pow2(static_cast<std::size_t>(n));
  Eigen::FFT<double> fft;
  TimeSeries out(Matrix(n, ts.channels()), ts.rate_hz);
  out.channel_names = ts.channel_names;
  std::vector<Complex> buf(len), spec, analytic;
  for (Index c = 0; c < ts.channels(); ++c) {
    std::fill(buf.begin(), buf.end(), Complex{});
    for (Index t = 0; t < n; ++t) buf[static_cast<std::size_t>(t)] = ts.values(t, c);
    fft.fwd(spec, buf);
    for (std::size_t k = 1; k < len / 2; ++k) spec[k] *= 2.0;
    for (std::size_t k = len / 2 + 1; k < len; ++k) spec[k] = 0.0;
    if (len == 1) spec[0] = buf[0];
    fft.inv(analytic, spec);
    for (Index t = 0; t < n; ++t) out.values(t, c) = std::abs(analytic[static_cast<std::size_t>(t)]);
  }
  return out;
}

struct HighGammaOptions {
  double lo_hz{70.0};
  double hi_hz{200.0};
  double out_rate_hz{20.0};
  int taps{0}; // 0 selects ~0.2 s of taps at the input rate
  int lanczos_a{3};
};

inline int default_taps(double rate_hz, double seconds = 0.2) {
  int taps = static_cast<int>(std::lround(rate_hz * seconds));
  if (taps % 2 == 0) ++taps;
  return std::max(taps, 3);
}

// Band-pass, envelope, then downsample.
inline TimeSeries high_gamma(const TimeSeries &raw, const HighGammaOptions &opt = {}) {
  if (raw.rate_hz < 2.0 * opt.hi_hz)
    throw ConfigError("high_gamma: input rate must be at least twice the upper band edge");
  const int taps = opt.taps > 0 ? opt.taps : default_taps(raw.rate_hz);
  const TimeSeries band = bandpass_fir(raw, opt.lo_hz, std::min(opt.hi_hz, 0.499 * raw.rate_hz), taps);
  return resample_lanczos(hilbert_envelope(band), opt.out_rate_hz, opt.lanczos_a);
}

// ---------------------------------------------------------------------------
// Welch PSD

struct PSDEstimate {
  std::vector<double> freqs_hz;
  Matrix power; // frequency x channel, one-sided density (units^2 / Hz)
  Index segment_length{0};
  double overlap_fraction{0.5};

  double df() const { return freqs_hz.size() > 1 ? freqs_hz[1] - freqs_hz[0] : 0.0; }
};

// One-sided Welch estimate with a periodic Hann window and per-segment mean
// removal, scaled so that sum(power) * df equals the signal variance.
inline PSDEstimate welch_psd(const TimeSeries &ts, Index segment_length, double overlap_fraction = 0.5) {
  const Index n = ts.samples();
  if (segment_length < 2 || !is_pow2(static_cast<std::size_t>(segment_length)))
    throw ConfigError("welch_psd: segment length must be a power of two >= 2");
  if (segment_length > n) throw DataError("welch_psd: segment longer than series");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) throw ConfigError("welch_psd: overlap must be in [0,1)");

  const Index hop = std::max<Index>(1, static_cast<Index>(std::lround(segment_length * (1.0 - overlap_fraction))));
  const Index n_seg = (n - segment_length) / hop + 1;
  const Index n_freq = segment_length / 2 + 1;

  std::vector<double> window(static_cast<std::size_t>(segment_length));
  double wss = 0.0;
  for (Index i = 0; i < segment_length; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(segment_length));
    window[static_cast<std::size_t>(i)] = w;
    wss += w * w;
  }

  PSDEstimate est;
  est.segment_length = segment_length;
  est.overlap_fraction = overlap_fraction;
  est.freqs_hz.resize(static_cast<std::size_t>(n_freq));
  for (Index k = 0; k < n_freq; ++k) est.freqs_hz[static_cast<std::size_t>(k)] = static_cast<double>(k) * ts.rate_hz / static_cast<double>(segment_length);
  est.power = Matrix::Zero(n_freq, ts.channels());

  Eigen::FFT<double> fft;
  std::vector<Complex> buf(static_cast<std::size_t>(segment_length)), spec;
  const double scale = 1.0 / (ts.rate_hz * wss * static_cast<double>(n_seg));
  for (Index c = 0; c < ts.channels(); ++c) {
    // Whole-series mean, not per segment: per-segment detrending drops the
    // low-frequency share of the variance.
    const double mean = ts.values.col(c).mean();
    for (Index s = 0; s < n_seg; ++s) {
      const Index start = s * hop;
      for (Index i = 0; i < segment_length; ++i)
        buf[static_cast<std::size_t>(i)] = (ts.values(start + i, c) - mean) * window[static_cast<std::size_t>(i)];
      fft.fwd(spec, buf);
      for (Index k = 0; k < n_freq; ++k) {
        const bool edge = k == 0 || k == segment_length / 2;
        est.power(k, c) += (edge ? 1.0 : 2.0) * std::norm(spec[static_cast<std::size_t>(k)]) * scale;
      }
    }
  }
  return est;
}

// Trapezoidal integral of the piecewise-linear PSD over [lo_hz, hi_hz], per
// channel. Adjacent bands sum to the integral over their union.
inline RowVector integrate_psd(const PSDEstimate &psd, double lo_hz, double hi_hz) {
  const auto &f = psd.freqs_hz;
  RowVector total = RowVector::Zero(psd.power.cols());
  if (f.size() < 2 || hi_hz <= lo_hz) return total;
  lo_hz = std::max(lo_hz, f.front());
  hi_hz = std::min(hi_hz, f.back());
  for (std::size_t k = 0; k + 1 < f.size(); ++k) {
    const double a = std::max(lo_hz, f[k]);
    const double b = std::min(hi_hz, f[k + 1]);
    if (b <= a) continue;
    const double span = f[k + 1] - f[k];
    const auto pa = psd.power.row(static_cast<Index>(k));
    const auto pb = psd.power.row(static_cast<Index>(k + 1));
    const RowVector va = pa + (pb - pa) * ((a - f[k]) / span);
    const RowVector vb = pa + (pb - pa) * ((b - f[k]) / span);
    total += 0.5 * (va + vb) * (b - a);
  }
  return total;
}

} // namespace xmodal
