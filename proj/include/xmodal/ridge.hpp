#pragma once

// Multi-target cross-validated ridge regression, Pearson scoring and the
// single-lag sweep used for fast responses.
//
// Columns of the design and channels of the response are z-scored with
// statistics of the training rows only. Regularisation strength is chosen per
// channel by mean held-out Pearson r over contiguous folds; the final weights
// are refit on all rows with the chosen strength.

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <utility>
#include <vector>

#include "embed.hpp"
#include "error.hpp"
#include "parallel.hpp"
#include "types.hpp"

namespace xmodal {

inline std::vector<double> logspace(double lo_exp, double hi_exp, int count) {
  std::vector<double> v;
  for (int i = 0; i < count; ++i)
    v.push_back(std::pow(10.0, count == 1 ? lo_exp : lo_exp + (hi_exp - lo_exp) * i / (count - 1)));
  return v;
}

enum class RidgeSolver {
  eigen,    // one eigendecomposition of X'X shared by every alpha
  cholesky, // one factorisation of X'X + alpha*I per alpha
};

struct RidgeConfig {
  std::vector<double> alphas = logspace(0.0, 8.0, 10);
  int n_folds{4};
  bool standardize{true};
  RidgeSolver solver{RidgeSolver::eigen};
  unsigned threads{1};
};

struct Standardization {
  RowVector mean;
  RowVector scale; // never zero: constant columns get scale 1

  static Standardization fit(const Matrix &x, bool enabled = true) {
    Standardization s;
    if (!enabled) {
      s.mean = RowVector::Zero(x.cols());
      s.scale = RowVector::Ones(x.cols());
      return s;
    }
    s.mean = x.colwise().mean();
    s.scale.resize(x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
      const double sd = std::sqrt((x.col(j).array() - s.mean(j)).square().mean());
      s.scale(j) = sd > 1e-12 * std::max(1.0, std::abs(s.mean(j))) ? sd : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix &x) const { return (x.rowwise() - mean).array().rowwise() / scale.array(); }
  Matrix invert(const Matrix &z) const { return (z.array().rowwise() * scale.array()).matrix().rowwise() + mean; }
};

struct PearsonResult {
  RowVector r;
  std::vector<bool> degenerate; // zero variance in either input; r reported as 0
};

inline PearsonResult pearson_scores(const Matrix &pred, const Matrix &actual) {
  if (pred.rows() != actual.rows() || pred.cols() != actual.cols())
    throw DataError("pearson_scores: shape mismatch");
  if (pred.rows() < 3) throw DataError("pearson_scores: need at least 3 samples");
  PearsonResult out;
  out.r = RowVector::Zero(pred.cols());
  out.degenerate.assign(static_cast<std::size_t>(pred.cols()), false);
  for (Index c = 0; c < pred.cols(); ++c) {
    const Vector p = pred.col(c).array() - pred.col(c).mean();
    const Vector a = actual.col(c).array() - actual.col(c).mean();
    const double pp = p.squaredNorm(), aa = a.squaredNorm();
    if (!(pp > 0.0) || !(aa > 0.0) || pp < 1e-24 * pred.rows() || aa < 1e-24 * pred.rows()) {
      out.degenerate[static_cast<std::size_t>(c)] = true;
      continue;
    }
    out.r(c) = std::clamp(p.dot(a) / std::sqrt(pp * aa), -1.0, 1.0);
  }
  return out;
}

// Closed-form ridge weights for every alpha: (X'X + alpha I)^-1 X'Y.
inline std::vector<Matrix> ridge_path(const Matrix &x, const Matrix &y, const std::vector<double> &alphas,
                                      RidgeSolver solver = RidgeSolver::eigen) {
  const Matrix xtx = x.transpose() * x;
  const Matrix xty = x.transpose() * y;
  std::vector<Matrix> betas;
  betas.reserve(alphas.size());
  if (solver == RidgeSolver::eigen) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(xtx);
    if (eig.info() != Eigen::Success) throw NumericalError("ridge: eigendecomposition failed");
    const Matrix& q = eig.eigenvectors();
    const Vector lambda = eig.eigenvalues().cwiseMax(0.0);
    const Matrix qt_xty = q.transpose() * xty;
    for (double alpha : alphas) {
      const Vector shrink = (lambda.array() + alpha).inverse();
      betas.push_back(q * (shrink.asDiagonal() * qt_xty));
    }
  } else {
    for (double alpha : alphas) {
      Matrix a = xtx;
      a.diagonal().array() += alpha;
      Eigen::LLT<Matrix> llt(a);
      if (llt.info() != Eigen::Success) throw NumericalError("ridge: Cholesky factorisation failed");
      betas.push_back(llt.solve(xty));
    }
  }
  return betas;
}

using FoldRange = std::pair<Index, Index>; // [begin, end)

inline std::vector<FoldRange> contiguous_folds(Index n, int k) {
  if (k < 2) throw ConfigError("ridge: need at least 2 folds");
  if (n < 2 * k) throw DataError("ridge: too few samples for the requested folds");
  std::vector<FoldRange> folds;
  for (int i = 0; i < k; ++i) folds.emplace_back(n * i / k, n * (i + 1) / k);
  return folds;
}

struct RidgeSolution {
  Matrix beta;                       // design width x C, standardised units
  std::vector<double> alpha_per_channel;
  RowVector cv_score_per_channel;    // mean held-out r over folds
  std::vector<bool> degenerate_channel;
  Standardization x_std;
  Standardization y_std;
  std::vector<double> alphas;
  Matrix cv_score_per_alpha;         // alphas x C
  std::vector<FoldRange> folds;
  std::vector<Matrix> beta_path;     // full-data weights for every alpha
  Matrix cv_predictions;             // out-of-fold predictions, response units

  // Weights on the raw design, mapping to raw response units (excluding the
  // intercept carried by the standardisation means).
  Matrix raw_coefficients() const {
    Matrix w = beta;
    for (Index i = 0; i < w.rows(); ++i) w.row(i) /= x_std.scale(i);
    for (Index c = 0; c < w.cols(); ++c) w.col(c) *= y_std.scale(c);
    return w;
  }
};

// Standardised-unit prediction: standardize(X) * beta.
inline Matrix predict(const RidgeSolution &sol, const Matrix &x) {
  if (x.cols() != sol.beta.rows())
    throw DataError("predict: design width " + std::to_string(x.cols()) + " does not match " +
                    std::to_string(sol.beta.rows()));
  return sol.x_std.apply(x) * sol.beta;
}

// Prediction mapped back to response units with the training statistics.
inline Matrix predict_response(const RidgeSolution &sol, const Matrix &x) {
  return sol.y_std.invert(predict(sol, x));
}

namespace detail {

struct FoldFit {
  Standardization xs, ys;
  std::vector<Matrix> betas;
  Matrix scores; // alphas x C
};

inline Matrix rows_except(const Matrix &m, FoldRange f) {
  Matrix out(m.rows() - (f.second - f.first), m.cols());
  out.topRows(f.first) = m.topRows(f.first);
  out.bottomRows(m.rows() - f.second) = m.bottomRows(m.rows() - f.second);
  return out;
}

inline FoldFit fit_fold(const Matrix &x, const Matrix &y, FoldRange fold, const RidgeConfig &cfg) {
  FoldFit ff;
  const Matrix xtr = rows_except(x, fold), ytr = rows_except(y, fold);
  ff.xs = Standardization::fit(xtr, cfg.standardize);
  ff.ys = Standardization::fit(ytr, cfg.standardize);
  ff.betas = ridge_path(ff.xs.apply(xtr), ff.ys.apply(ytr), cfg.alphas, cfg.solver);
  const Index len = fold.second - fold.first;
  const Matrix xte = ff.xs.apply(x.middleRows(fold.first, len));
  const Matrix yte = y.middleRows(fold.first, len);
  ff.scores.resize(static_cast<Index>(cfg.alphas.size()), y.cols());
  for (std::size_t a = 0; a < cfg.alphas.size(); ++a)
    ff.scores.row(static_cast<Index>(a)) = pearson_scores(xte * ff.betas[a], yte).r;
  return ff;
}

// Shared CV core. When fixed_alpha is non-empty each channel is scored only at
// its given alpha index instead of selecting over the grid.
inline RidgeSolution fit_ridge_cv_impl(const Matrix &x, const Matrix &y, const RidgeConfig &cfg,
                                       const std::vector<std::size_t> &fixed_alpha) {
  if (x.rows() != y.rows()) throw DataError("ridge: design and response row counts differ");
  if (cfg.alphas.empty()) throw ConfigError("ridge: empty alpha grid");
  for (double a : cfg.alphas)
    if (!(a > 0.0)) throw ConfigError("ridge: alphas must be positive");
  if (!x.allFinite() || !y.allFinite()) throw NumericalError("ridge: non-finite input");

  RidgeSolution sol;
  sol.alphas = cfg.alphas;
  sol.folds = contiguous_folds(x.rows(), cfg.n_folds);
  const auto n_alpha = static_cast<Index>(cfg.alphas.size());
  const Index n_ch = y.cols();

  std::vector<FoldFit> fits(sol.folds.size());
  for (std::size_t f = 0; f < sol.folds.size(); ++f) fits[f] = fit_fold(x, y, sol.folds[f], cfg);

  sol.cv_score_per_alpha = Matrix::Zero(n_alpha, n_ch);
  for (const auto &ff : fits) sol.cv_score_per_alpha += ff.scores;
  sol.cv_score_per_alpha /= static_cast<double>(fits.size());

  std::vector<std::size_t> chosen(static_cast<std::size_t>(n_ch), 0);
  sol.alpha_per_channel.resize(static_cast<std::size_t>(n_ch));
  sol.cv_score_per_channel.resize(n_ch);
  for (Index c = 0; c < n_ch; ++c) {
    std::size_t best = 0;
    if (!fixed_alpha.empty()) {
      best = fixed_alpha[static_cast<std::size_t>(c)];
    } else {
      for (Index a = 1; a < n_alpha; ++a)
        if (sol.cv_score_per_alpha(a, c) > sol.cv_score_per_alpha(static_cast<Index>(best), c)) best = static_cast<std::size_t>(a);
    }
    chosen[static_cast<std::size_t>(c)] = best;
    sol.alpha_per_channel[static_cast<std::size_t>(c)] = cfg.alphas[best];
    sol.cv_score_per_channel(c) = sol.cv_score_per_alpha(static_cast<Index>(best), c);
  }

  // Out-of-fold predictions at each channel's alpha, in response units.
  sol.cv_predictions = Matrix::Zero(x.rows(), n_ch);
  for (std::size_t f = 0; f < sol.folds.size(); ++f) {
    const auto [b, e] = sol.folds[f];
    const Matrix xte = fits[f].xs.apply(x.middleRows(b, e - b));
    for (Index c = 0; c < n_ch; ++c) {
      const Vector z = xte * fits[f].betas[chosen[static_cast<std::size_t>(c)]].col(c);
      sol.cv_predictions.block(b, c, e - b, 1) = z.array() * fits[f].ys.scale(c) + fits[f].ys.mean(c);
    }
  }

  sol.x_std = Standardization::fit(x, cfg.standardize);
  sol.y_std = Standardization::fit(y, cfg.standardize);
  sol.beta_path = ridge_path(sol.x_std.apply(x), sol.y_std.apply(y), cfg.alphas, cfg.solver);
  sol.beta.resize(x.cols(), n_ch);
  sol.degenerate_channel.assign(static_cast<std::size_t>(n_ch), false);
  for (Index c = 0; c < n_ch; ++c) {
    sol.beta.col(c) = sol.beta_path[chosen[static_cast<std::size_t>(c)]].col(c);
    const double m = y.col(c).mean();
    if ((y.col(c).array() - m).abs().maxCoeff() <= 1e-12 * std::max(1.0, std::abs(m))) {
      sol.degenerate_channel[static_cast<std::size_t>(c)] = true;
      sol.cv_score_per_channel(c) = 0.0;
    }
  }
  return sol;
}

} // namespace detail

inline RidgeSolution fit_ridge_cv(const Matrix &x, const Matrix &y, const RidgeConfig &cfg = {}) {
  return detail::fit_ridge_cv_impl(x, y, cfg, {});
}

// Cross-validated scores with a fixed alpha per channel (used to compare
// feature sets under one set of ridge hyperparameters).
inline RidgeSolution fit_ridge_fixed(const Matrix &x, const Matrix &y, const std::vector<double> &alpha_per_channel,
                                     RidgeConfig cfg = {}) {
  if (static_cast<Index>(alpha_per_channel.size()) != y.cols())
    throw ConfigError("fit_ridge_fixed: one alpha per channel required");
  std::vector<double> grid = alpha_per_channel;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::vector<std::size_t> idx;
  for (double a : alpha_per_channel)
    idx.push_back(static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), a) - grid.begin()));
  cfg.alphas = grid;
  return detail::fit_ridge_cv_impl(x, y, cfg, idx);
}

// ---------------------------------------------------------------------------
// Lag sweep

struct LagSweepResult {
  std::vector<int> lags;
  Matrix score_per_lag_per_channel; // lags x C
  std::vector<int> best_lag_per_channel;
  RowVector best_score_per_channel;
  std::vector<double> best_alpha_per_channel;
  Index edge{0};       // rows trimmed at both ends before fitting
  Matrix residuals;    // (samples - 2*edge) x C, out-of-fold residual at each channel's best lag
};

// True when lag a should win a tie against lag b: nearer zero, then positive.
inline bool lag_preferred(int a, int b) {
  if (std::abs(a) != std::abs(b)) return std::abs(a) < std::abs(b);
  return a > b;
}

inline LagSweepResult lag_sweep(const FeatureMatrix &feats, const TimeSeries &resp, const std::vector<int> &lags,
                                RidgeConfig cfg = {}) {
  if (feats.samples() != resp.samples()) throw DataError("lag_sweep: features and responses differ in length");
  if (std::abs(feats.rate_hz - resp.rate_hz) > 1e-9 * resp.rate_hz)
    throw DataError("lag_sweep: features and responses differ in rate");
  if (lags.empty()) throw ConfigError("lag_sweep: empty lag grid");
  if (cfg.n_folds < 2) cfg.n_folds = 4;
  // The design changes with every lag, so nothing is shared across alphas
  // beyond X'X; factor directly.
  cfg.solver = RidgeSolver::cholesky;

  LagSweepResult out;
  out.lags = lags;
  for (int l : lags) out.edge = std::max<Index>(out.edge, std::abs(l));
  const Index n = resp.samples();
  const Index kept = n - 2 * out.edge;
  if (kept < 2 * cfg.n_folds) throw DataError("lag_sweep: series too short for the lag range");
  const Matrix y = resp.values.middleRows(out.edge, kept);
  const unsigned threads = cfg.threads;
  cfg.threads = 1;

  auto fit_lag = [&](std::size_t i) {
    const Matrix x = shift_rows(feats.values, lags[i]).middleRows(out.edge, kept);
    return fit_ridge_cv(x, y, cfg);
  };

  const auto n_ch = resp.channels();
  out.score_per_lag_per_channel.resize(static_cast<Index>(lags.size()), n_ch);
  std::vector<std::vector<double>> alphas(lags.size());
  parallel_for(lags.size(), threads, [&](std::size_t i) {
    const RidgeSolution sol = fit_lag(i);
    out.score_per_lag_per_channel.row(static_cast<Index>(i)) = sol.cv_score_per_channel;
    alphas[i] = sol.alpha_per_channel;
  });

  out.best_lag_per_channel.resize(static_cast<std::size_t>(n_ch));
  out.best_alpha_per_channel.resize(static_cast<std::size_t>(n_ch));
  out.best_score_per_channel.resize(n_ch);
  std::vector<std::size_t> best_idx(static_cast<std::size_t>(n_ch));
  for (Index c = 0; c < n_ch; ++c) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < lags.size(); ++i) {
      const double s = out.score_per_lag_per_channel(static_cast<Index>(i), c);
      const double sb = out.score_per_lag_per_channel(static_cast<Index>(best), c);
      if (s > sb || (s == sb && lag_preferred(lags[i], lags[best]))) best = i;
    }
    best_idx[static_cast<std::size_t>(c)] = best;
    out.best_lag_per_channel[static_cast<std::size_t>(c)] = lags[best];
    out.best_alpha_per_channel[static_cast<std::size_t>(c)] = alphas[best][static_cast<std::size_t>(c)];
    out.best_score_per_channel(c) = out.score_per_lag_per_channel(static_cast<Index>(best), c);
  }

  // Residuals are recomputed only for the lags that won some channel.
  out.residuals.resize(kept, n_ch);
  std::vector<std::size_t> winners(best_idx.begin(), best_idx.end());
  std::sort(winners.begin(), winners.end());
  winners.erase(std::unique(winners.begin(), winners.end()), winners.end());
  for (std::size_t i : winners) {
    const RidgeSolution sol = fit_lag(i);
    for (Index c = 0; c < n_ch; ++c)
      if (best_idx[static_cast<std::size_t>(c)] == i) out.residuals.col(c) = y.col(c) - sol.cv_predictions.col(c);
  }
  return out;
}

} // namespace xmodal
