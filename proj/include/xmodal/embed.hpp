#pragma once

// Design-matrix construction: FIR delay embedding and single-lag shifts.
// Delays and lags are in samples; rows shifted in from outside the series are
// zero, so design and response stay on one clock.

#include <cmath>
#include <set>
#include <vector>

#include "error.hpp"
#include "types.hpp"

namespace xmodal {

struct DelayedDesign {
  Matrix values; // samples x (delays * F), block k = features shifted by delays[k]
  std::vector<int> delays;
  Index feature_dim{0};

  auto block(std::size_t k) const { return values.middleCols(static_cast<Index>(k) * feature_dim, feature_dim); }
};

// Row t of the result is row (t - tau) of the input; negative tau moves
// features forward in time.
inline Matrix shift_rows(const Matrix &x, long tau) {
  const Index n = x.rows();
  Matrix out = Matrix::Zero(n, x.cols());
  if (std::abs(tau) >= n) return out;
  if (tau >= 0)
    out.bottomRows(n - tau) = x.topRows(n - tau);
  else
    out.topRows(n + tau) = x.bottomRows(n + tau);
  return out;
}

inline FeatureMatrix lag_shift(const FeatureMatrix &feats, long tau_samples) {
  if (std::abs(tau_samples) >= feats.samples())
    throw ConfigError("lag_shift: |tau| must be smaller than the number of samples");
  return FeatureMatrix(shift_rows(feats.values, tau_samples), feats.rate_hz);
}

inline DelayedDesign delay_embed(const Matrix &feats, const std::vector<int> &delays = {1, 2, 3, 4}) {
  if (delays.empty()) throw ConfigError("delay_embed: empty delay list");
  if (std::set<int>(delays.begin(), delays.end()).size() != delays.size())
    throw ConfigError("delay_embed: delays must be distinct");
  for (int d : delays)
    if (d <= 0) throw ConfigError("delay_embed: delays must be strictly positive");

  DelayedDesign out;
  out.delays = delays;
  out.feature_dim = feats.cols();
  out.values.resize(feats.rows(), feats.cols() * static_cast<Index>(delays.size()));
  for (std::size_t k = 0; k < delays.size(); ++k)
    out.values.middleCols(static_cast<Index>(k) * feats.cols(), feats.cols()) = shift_rows(feats, delays[k]);
  return out;
}

inline DelayedDesign delay_embed(const FeatureMatrix &feats, const std::vector<int> &delays = {1, 2, 3, 4}) {
  return delay_embed(feats.values, delays);
}

// Evenly spaced lags from lo_s to hi_s, converted to whole samples. Each step
// must land on an integer number of samples.
inline std::vector<int> lag_grid(double lo_s = -2.0, double hi_s = 2.0, int count = 81, double rate_hz = 20.0) {
  if (count < 1) throw ConfigError("lag_grid: count must be positive");
  if (count == 1) {
    if (lo_s != hi_s) throw ConfigError("lag_grid: a single lag requires lo == hi");
    const double s = lo_s * rate_hz;
    if (std::abs(s - std::round(s)) > 1e-9) throw ConfigError("lag_grid: lag is not a whole number of samples");
    return {static_cast<int>(std::lround(s))};
  }
  if (!(hi_s > lo_s)) throw ConfigError("lag_grid: need hi > lo");
  const double step = (hi_s - lo_s) * rate_hz / (count - 1);
  const double lo = lo_s * rate_hz;
  if (std::abs(step - std::round(step)) > 1e-9 || std::abs(lo - std::round(lo)) > 1e-9 || std::round(step) < 1)
    throw ConfigError("lag_grid: lag step is not a whole number of samples");
  std::vector<int> lags;
  lags.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) lags.push_back(static_cast<int>(std::lround(lo + i * step)));
  return lags;
}

} // namespace xmodal
