#include <gtest/gtest.h>

#include <unsupported/Eigen/FFT>

#include <numbers>

#include "test_util.hpp"
#include "xmodal/analysis.hpp"
#include "xmodal/embed.hpp"
#include "xmodal/ridge.hpp"
#include "xmodal/synthgen.hpp"
#include "xmodal/tensor_io.hpp"

using namespace xmodal;
using xmodal::testing::corr;

namespace {

constexpr double kPi = std::numbers::pi;

LatentDrive single(const Vector &v, double rate) {
  LatentDrive l;
  l.values = v;
  l.rate_hz = rate;
  l.mixing_slow = Matrix::Ones(1, 1);
  l.mixing_fast = Matrix::Ones(1, 1);
  return l;
}

// Realised band SNR on the periodogram of the whole series (DC excluded).
double band_power_ratio(const TimeSeries &noisy, const TimeSeries &clean, double lo, double hi) {
  const Index n = clean.samples();
  auto energy = [&](const Vector &x) {
    Eigen::FFT<double> fft;
    std::vector<double> buf(x.data(), x.data() + n);
    std::vector<std::complex<double>> spec;
    fft.fwd(spec, buf);
    double e = 0.0;
    for (Index k = 1; k <= n / 2; ++k) {
      const double f = static_cast<double>(k) * clean.rate_hz / static_cast<double>(n);
      if (f > lo && f <= hi) e += std::norm(spec[static_cast<std::size_t>(k)]);
    }
    return e;
  };
  return energy(clean.values.col(0)) / energy(noisy.values.col(0) - clean.values.col(0));
}

} // namespace

// ---------------------------------------------------------------------------
// Latent

TEST(Latent, Deterministic) {
  const LatentDrive a = make_latent(60.0, 3, 9), b = make_latent(60.0, 3, 9);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.mixing_slow, b.mixing_slow);
}

TEST(Latent, UnitVariance) {
  const LatentDrive l = make_latent(600.0, 1, 1);
  const double var = (l.values.array() - l.values.mean()).square().mean();
  EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(Latent, IndependentSeeds) {
  const LatentDrive a = make_latent(600.0, 1, 1), b = make_latent(600.0, 1, 2);
  EXPECT_LT(std::abs(corr(a.values.col(0), b.values.col(0))), 0.1);
}

TEST(Latent, BandLimited) {
  const LatentDrive l = make_latent(400.0, 1, 3);
  const PSDEstimate psd = welch_psd(TimeSeries(l.values, l.rate_hz), 4096);
  const double total = integrate_psd(psd, 0.0, 50.0)(0);
  EXPECT_LT(integrate_psd(psd, 6.0, 50.0)(0) / total, 0.01);
  EXPECT_GT(integrate_psd(psd, 0.3, 5.0)(0) / total, 0.9);
}

TEST(Latent, MixingFullRowRank) {
  const LatentDrive l = make_latent(10.0, 4, 3, {100.0, 0.01, 5.0, 12, 9});
  EXPECT_EQ(l.mixing_slow.rows(), 4);
  EXPECT_EQ(l.mixing_slow.cols(), 12);
  EXPECT_EQ(Eigen::FullPivLU<Matrix>(l.mixing_fast).rank(), 4);
  EXPECT_THROW(make_mixing(4, 3, 1), ConfigError);
  EXPECT_THROW(make_latent(0.0, 1, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// HRF and slow render

TEST(Hrf, DefaultsWithinBounds) {
  const HRFParams h;
  EXPECT_NO_THROW(h.validate());
  EXPECT_GE(h.peak_time(), 3.0);
  EXPECT_LE(h.peak_time(), 4.0);
  EXPECT_GE(h.return_time(), 4.0);
  EXPECT_LE(h.return_time(), 6.0);
  HRFParams bad;
  bad.peak_s = 6.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Hrf, TransferMatchesSampledKernel) {
  const HRFParams h;
  const double rate = 100.0;
  const auto k = h.kernel(rate);
  for (double f : {0.0, 0.05, 0.2}) {
    std::complex<double> acc{};
    for (std::size_t i = 0; i < k.size(); ++i) acc += k[i] / rate * std::polar(1.0, -2 * kPi * f * static_cast<double>(i) / rate);
    EXPECT_NEAR(std::abs(acc), std::abs(h.transfer(f)), 1e-3 * std::abs(h.transfer(0.0)));
  }
}

TEST(Hrf, LowPassAbove0p1Hz) {
  const HRFParams h;
  double prev = std::abs(h.transfer(0.1));
  for (double f = 0.1 + 0.001; f <= 10.0; f += 0.001) {
    const double g = std::abs(h.transfer(f));
    EXPECT_LE(g, prev * (1.0 + 1e-12)) << f;
    prev = g;
  }
}

TEST(RenderSlow, ImpulsePeaksThreeToFourSeconds) {
  const double rate = 100.0;
  Vector v = Vector::Zero(static_cast<Index>(400 * rate));
  const Index onset = static_cast<Index>(100 * rate);
  v(onset) = rate; // unit area
  const TimeSeries out = render_slow(single(v, rate));
  Index peak;
  out.values.col(0).maxCoeff(&peak);
  const double lag = static_cast<double>(peak) / out.rate_hz - 100.0;
  EXPECT_GE(lag, 3.0);
  EXPECT_LE(lag, 4.0);
}

TEST(RenderSlow, ZeroLatent) {
  const TimeSeries out = render_slow(single(Vector::Zero(40000), 100.0));
  EXPECT_EQ(out.values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(out.rate_hz, 0.5);
}

TEST(RenderSlow, SinusoidGainMatchesKernelFft) {
  const double rate = 100.0, f = 0.05;
  const Index n = static_cast<Index>(800 * rate);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = std::sin(2 * kPi * f * static_cast<double>(i) / rate);
  const TimeSeries out = render_slow(single(v, rate));

  // Oracle: FFT of the sampled kernel (Riemann-scaled) at the tone.
  const HRFParams h;
  auto k = h.kernel(rate);
  const std::size_t len = 128000; // whole number of periods: the tone falls on a bin
  std::vector<double> kp(len, 0.0);
  for (std::size_t i = 0; i < k.size(); ++i) kp[i] = k[i] / rate;
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, kp);
  const double bin = f * static_cast<double>(len) / rate;
  const double gain = std::abs(spec[static_cast<std::size_t>(std::lround(bin))]);
  ASSERT_LT(std::abs(bin - std::round(bin)), 0.3);

  const Index trim = 40; // skip the start-up transient
  const double amp = out.values.col(0).segment(trim, out.samples() - 2 * trim).cwiseAbs().maxCoeff();
  EXPECT_NEAR(amp / gain, 1.0, 0.05);
}

TEST(RenderSlow, RequiresLongLatent) {
  EXPECT_THROW(render_slow(single(Vector::Zero(100 * 300), 100.0)), DataError);
}

// ---------------------------------------------------------------------------
// Fast render

TEST(RenderFast, ImpulseDelay) {
  const double rate = 100.0;
  Vector v = Vector::Zero(static_cast<Index>(30 * rate));
  v(static_cast<Index>(10 * rate)) = 5.0;
  const TimeSeries out = render_fast(single(v, rate), 0.3);
  Index peak;
  out.values.col(0).maxCoeff(&peak);
  const double t = static_cast<double>(peak) / out.rate_hz - 10.0;
  EXPECT_NEAR(t, 0.3, 1.0 / out.rate_hz + 1e-9);
}

TEST(RenderFast, ZeroLatent) {
  const TimeSeries out = render_fast(single(Vector::Zero(3000), 100.0), 0.5);
  EXPECT_LT(out.values.cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_DOUBLE_EQ(out.rate_hz, 20.0);
}

TEST(RenderFast, DelayRange) {
  EXPECT_THROW(render_fast(single(Vector::Zero(3000), 100.0), 0.1), ConfigError);
  EXPECT_THROW(render_fast(single(Vector::Zero(3000), 100.0), 0.9), ConfigError);
}

TEST(RenderFast, SlowLagsFast) {
  const LatentDrive l = make_latent(800.0, 1, 4);
  const TimeSeries slow = render_slow(l);
  const TimeSeries fast = resample_lanczos(render_fast(l, 0.3), 0.5);
  const Index n = std::min(slow.samples(), fast.samples());
  int best = 0;
  double best_r = -2.0;
  for (int lag = -10; lag <= 10; ++lag) {
    const Index lo = std::max(0, lag) + 20, hi = n - 20 + std::min(0, lag);
    const double r = corr(slow.values.col(0).segment(lo, hi - lo), fast.values.col(0).segment(lo - lag, hi - lo));
    if (r > best_r) {
      best_r = r;
      best = lag;
    }
  }
  EXPECT_GT(best, 0);
}

TEST(Renders, LinearlyPredictableFromLaggedLatent) {
  const LatentDrive l = make_latent(1200.0, 3, 5, {100.0, 0.01, 5.0, 6, 6});
  // Slow: latent at the slow rate with FIR delays spanning the kernel.
  {
    const TimeSeries slow = render_slow(l);
    const TimeSeries lat = resample_lanczos(TimeSeries(l.values, l.rate_hz), 0.5);
    std::vector<int> delays;
    for (int d = 1; d <= 16; ++d) delays.push_back(d);
    Matrix x(lat.samples(), 3 * 17);
    x << lat.values, delay_embed(lat.values, delays).values;
    const Index n = std::min(x.rows(), slow.samples()), edge = 20;
    RidgeConfig cfg;
    cfg.alphas = logspace(-4, 4, 9);
    const RidgeSolution sol = fit_ridge_cv(x.middleRows(edge, n - 2 * edge), slow.values.middleRows(edge, n - 2 * edge), cfg);
    EXPECT_GT(sol.cv_score_per_channel.minCoeff(), 0.95);
  }
  // Fast: latent at 20 Hz, lags around the planted 8-sample delay covering
  // the smoothing kernel.
  {
    const TimeSeries fast = render_fast(l, 0.4);
    const TimeSeries lat = resample_lanczos(TimeSeries(l.values, l.rate_hz), 20.0);
    std::vector<int> delays;
    for (int d = 4; d <= 12; ++d) delays.push_back(d);
    const Matrix x = delay_embed(lat.values, delays).values;
    const Index n = std::min(x.rows(), fast.samples()), edge = 40;
    RidgeConfig cfg;
    cfg.alphas = logspace(-4, 4, 9);
    const RidgeSolution sol = fit_ridge_cv(x.middleRows(edge, n - 2 * edge), fast.values.middleRows(edge, n - 2 * edge), cfg);
    EXPECT_GT(sol.cv_score_per_channel.minCoeff(), 0.95);
  }
}

// ---------------------------------------------------------------------------
// Noise

TEST(Noise, InfiniteSnrLeavesBandUntouched) {
  const LatentDrive l = make_latent(1200.0, 1, 6, {0.5, 0.0, 0.25});
  const TimeSeries clean(l.values, 0.5);
  const NoiseSpec spec{{0.0, 0.125, 0.25}, {std::numeric_limits<double>::infinity(), 0.5}};
  const TimeSeries noisy = add_noise(clean, spec, 3);
  const TimeSeries noise(noisy.values - clean.values, 0.5);
  const PSDEstimate pn = welch_psd(noise, 256);
  EXPECT_LT(integrate_psd(pn, 0.0, 0.11)(0), 1e-3 * integrate_psd(pn, 0.14, 0.25)(0));
  const TimeSeries same = add_noise(clean, NoiseSpec::flat(std::numeric_limits<double>::infinity(), 0.5), 3);
  EXPECT_EQ(same.values, clean.values);
}

TEST(Noise, FlatSnrBroadband) {
  const LatentDrive l = make_latent(1200.0, 2, 7, {0.5, 0.0, 0.25});
  const TimeSeries clean(l.values, 0.5);
  const TimeSeries noisy = add_noise(clean, NoiseSpec::flat(0.139, 0.5), 8);
  for (Index c = 0; c < 2; ++c) {
    const double sp = clean.values.col(c).squaredNorm(), np = (noisy.values - clean.values).col(c).squaredNorm();
    EXPECT_NEAR(sp / np, 0.139, 0.1 * 0.139);
  }
  EXPECT_NEAR(band_power_ratio(noisy, clean, 0.0, 0.25), 0.139, 0.1 * 0.139);
}

TEST(Noise, TwoBandSnr) {
  const LatentDrive l = make_latent(1200.0, 1, 9, {0.5, 0.0, 0.25});
  const TimeSeries clean(l.values, 0.5);
  const TimeSeries noisy = add_noise(clean, {{0.0, 0.125, 0.25}, {0.155, 0.114}}, 10);
  EXPECT_NEAR(band_power_ratio(noisy, clean, 0.0, 0.125), 0.155, 0.1 * 0.155);
  EXPECT_NEAR(band_power_ratio(noisy, clean, 0.125, 0.25), 0.114, 0.1 * 0.114);
}

TEST(Noise, SpecValidation) {
  const TimeSeries ts(Matrix::Ones(100, 1), 0.5);
  EXPECT_THROW(add_noise(ts, {{}, {}}, 1), ConfigError);
  EXPECT_THROW(add_noise(ts, {{0.0, 0.2}, {1.0}}, 1), ConfigError);        // misses Nyquist
  EXPECT_THROW(add_noise(ts, {{0.05, 0.25}, {1.0}}, 1), ConfigError);      // does not start at 0
  EXPECT_THROW(add_noise(ts, {{0.0, 0.25}, {0.0}}, 1), ConfigError);       // non-positive SNR
}

TEST(Repeats, ZeroNoiseEqualsClean) {
  const TimeSeries clean(Matrix::Random(64, 2), 0.5);
  const auto reps = make_repeats(clean, 2, NoiseSpec::flat(std::numeric_limits<double>::infinity(), 0.5), {1, 2});
  ASSERT_EQ(reps.size(), 2u);
  EXPECT_EQ(reps[0].values, clean.values);
  EXPECT_EQ(reps[1].values, clean.values);
}

TEST(Repeats, MeanConvergesToClean) {
  const LatentDrive l = make_latent(1200.0, 1, 11, {0.5, 0.0, 0.25});
  const TimeSeries clean(l.values, 0.5);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(1000 + s);
  const auto reps = make_repeats(clean, 10, NoiseSpec::flat(0.5, 0.5), seeds);
  double noise_power = 0.0;
  for (const auto &r : reps) noise_power += (r.values - clean.values).squaredNorm() / 10.0;
  const double resid = (average_repeats(reps).values - clean.values).squaredNorm();
  EXPECT_NEAR(resid / (noise_power / 10.0), 1.0, 0.2);
}

TEST(Repeats, IndependentNoise) {
  const LatentDrive l = make_latent(1200.0, 1, 12, {0.5, 0.0, 0.25});
  const TimeSeries clean(l.values, 0.5);
  const auto reps = make_repeats(clean, 4, NoiseSpec::flat(1.0, 0.5), {5, 6, 7, 8});
  for (std::size_t i = 0; i < reps.size(); ++i)
    for (std::size_t j = i + 1; j < reps.size(); ++j)
      EXPECT_LT(std::abs(corr(reps[i].values.col(0) - clean.values.col(0), reps[j].values.col(0) - clean.values.col(0))), 0.1);
}

TEST(Repeats, Errors) {
  const TimeSeries clean(Matrix::Ones(64, 1), 0.5);
  const auto spec = NoiseSpec::flat(1.0, 0.5);
  EXPECT_THROW(make_repeats(clean, 3, spec, {1, 2, 2}), ConfigError);
  EXPECT_THROW(make_repeats(clean, 1, spec, {1}), ConfigError);
  EXPECT_THROW(make_repeats(clean, 3, spec, {1, 2}), ConfigError);
}

// ---------------------------------------------------------------------------
// Waveform

TEST(Waveform, CarrierEnvelopesFollowLatents) {
  const LatentDrive l = make_latent(120.0, 2, 13);
  WaveformOptions opt;
  opt.distractor_hz.clear();
  opt.noise_level = 0.0;
  opt.carriers_hz = {11.0, 31.0};
  const TimeSeries w = synthesize_waveform(l, Matrix(), opt, 1);
  ASSERT_EQ(w.channels(), 1);
  // Envelope of the 11 Hz band tracks exp(depth * latent 0).
  const TimeSeries band = bandpass_fir(w, 7.0, 15.0, 101);
  const TimeSeries env = hilbert_envelope(band);
  const Vector truth = (opt.depth * l.values.col(0).array()).exp();
  const Index trim = 300;
  EXPECT_GT(corr(env.values.col(0).segment(trim, w.samples() - 2 * trim), truth.segment(trim, w.samples() - 2 * trim)), 0.9);
  EXPECT_EQ(synthesize_waveform(l, Matrix(), opt, 1).values, w.values);
}
