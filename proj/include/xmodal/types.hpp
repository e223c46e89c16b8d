#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "error.hpp"

namespace xmodal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

// Multichannel signal on a uniform clock.
//
// values(sample, channel); Eigen's column-major storage keeps each channel
// contiguous, which is also exactly the row-major [channels, samples] layout
// used on disk.
struct TimeSeries {
  Matrix values;
  double rate_hz{1.0};
  std::vector<std::string> channel_names;

  TimeSeries() = default;
  TimeSeries(Matrix v, double rate) : values(std::move(v)), rate_hz(rate) {}

  Index samples() const { return values.rows(); }
  Index channels() const { return values.cols(); }
  double duration_s() const { return static_cast<double>(samples()) / rate_hz; }
};

// Stimulus features, one row per time step.
struct FeatureMatrix {
  Matrix values;
  double rate_hz{1.0};

  FeatureMatrix() = default;
  FeatureMatrix(Matrix v, double rate) : values(std::move(v)), rate_hz(rate) {}

  Index samples() const { return values.rows(); }
  Index feature_dim() const { return values.cols(); }
};

inline bool all_finite(const Matrix &m) { return m.allFinite(); }

inline std::vector<std::string> default_channel_names(Index n, const std::string &prefix = "ch") {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
  return names;
}

} // namespace xmodal
