#pragma once

// Small windowed attention network used as the stimulus feature extractor.
//
// A window of waveform samples is cut into frames of `frontend_stride`
// samples; each frame is linearly projected to d_model and a fixed sinusoidal
// position code is added. Pre-norm transformer blocks follow (full attention,
// GELU MLP, no affine in the layer norms). The feature is the hidden state of
// the final frame after block `tap_layer`; later blocks are never evaluated.
//
// Base weights are frozen. The query, key and value projections of every block
// carry a low-rank adapter, W_eff = W + scaling * A * B, with A zero at
// initialisation so a fresh adapter reproduces the base network exactly.

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "../error.hpp"
#include "../parallel.hpp"
#include "../rng.hpp"
#include "../types.hpp"

namespace xmodal::netft {

struct FeatureNetConfig {
  double input_rate_hz{100.0};
  int frontend_stride{10}; // samples per frame
  int n_layers{4};
  int d_model{64};
  int n_heads{4};
  int mlp_width{128};
  int tap_layer{3}; // 1-based
  double window_s{4.0};
  int lora_rank{4};
  std::uint64_t seed{0};

  Index window_samples() const { return static_cast<Index>(std::lround(window_s * input_rate_hz)); }
  Index frames() const { return window_samples() / frontend_stride; }

  void validate() const {
    detail::require(input_rate_hz > 0.0, "net: input rate must be positive");
    detail::require(window_s > 0.0, "net: window_s must be positive");
    detail::require(frontend_stride >= 1, "net: frontend stride must be >= 1");
    detail::require(n_layers >= 1, "net: need at least one layer");
    detail::require(tap_layer >= 1 && tap_layer <= n_layers, "net: tap_layer must be in [1, n_layers]");
    detail::require(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0, "net: d_model must be divisible by n_heads");
    detail::require(mlp_width >= 1, "net: mlp_width must be positive");
    detail::require(lora_rank >= 1, "net: LoRA rank must be positive");
    detail::require(window_samples() % frontend_stride == 0 && frames() >= 1,
                    "net: window length must be a whole number of frames");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FeatureNetConfig, input_rate_hz, frontend_stride, n_layers, d_model,
                                                n_heads, mlp_width, tap_layer, window_s, lora_rank, seed)

enum Target : int { q = 0, k = 1, v = 2 };
inline constexpr std::array<const char *, 3> target_names{"q", "k", "v"};

struct BlockWeights {
  Matrix wq, wk, wv, wo; // d x d
  Matrix w1;             // d x mlp
  RowVector b1;
  Matrix w2;             // mlp x d
  RowVector b2;
};

struct LoraPair {
  Matrix a; // d x r
  Matrix b; // r x d
};

struct LoraAdapter {
  int rank{4};
  double scaling{0.25};
  std::vector<std::array<LoraPair, 3>> blocks;
};

// Adapted q/k/v matrices, materialised once per parameter update.
struct EffectiveWeights {
  std::vector<std::array<Matrix, 3>> w;
};

struct BlockCache {
  Index q0{0};   // first query row; the tap block only queries the final frame
  Matrix x_in;   // T x d
  Matrix a;      // LN(x_in)
  Vector inv_a;  // 1/sigma per row of a
  Matrix q, k, v;
  std::vector<Matrix> probs; // per head, Tq x T
  Matrix o;      // concatenated head outputs, Tq x d
  Matrix x_mid;  // Tq x d
  Matrix m;      // LN(x_mid)
  Vector inv_m;
  Matrix u;      // pre-activation, Tq x mlp
};

struct WindowCache {
  std::vector<BlockCache> blocks;
  bool empty() const { return blocks.empty(); }
};

namespace detail {

inline constexpr double ln_eps = 1e-5;

inline Matrix layer_norm(const Matrix &x, Vector &inv_sigma) {
  const Index d = x.cols();
  Matrix y(x.rows(), d);
  inv_sigma.resize(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + ln_eps);
    inv_sigma(i) = inv;
    y.row(i) = (x.row(i).array() - mu) * inv;
  }
  return y;
}

// dx = inv * (dy - mean(dy) - y * mean(dy . y)), row-wise.
inline Matrix layer_norm_backward(const Matrix &y, const Vector &inv_sigma, const Matrix &dy) {
  const auto d = static_cast<double>(y.cols());
  Matrix dx(y.rows(), y.cols());
  for (Index i = 0; i < y.rows(); ++i) {
    const double mean_dy = dy.row(i).sum() / d;
    const double mean_dyy = dy.row(i).dot(y.row(i)) / d;
    dx.row(i) = inv_sigma(i) * (dy.row(i).array() - mean_dy - y.row(i).array() * mean_dyy);
  }
  return dx;
}

inline constexpr double gelu_c = 0.7978845608028654; // sqrt(2/pi)

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(gelu_c * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double t = std::tanh(gelu_c * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * gelu_c * (1.0 + 3.0 * 0.044715 * u * u);
}

inline void softmax_rows(Matrix &s) {
  for (Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

} // namespace detail

class FeatureNet {
public:
  FeatureNet() = default;

  explicit FeatureNet(const FeatureNetConfig &cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(split_seed(cfg_.seed, 0x6e6574));
    const Index d = cfg_.d_model, p = cfg_.frontend_stride, t = cfg_.frames(), m = cfg_.mlp_width;
    w_in_ = rng.normal_matrix(p, d, 1.0 / std::sqrt(static_cast<double>(p)));
    b_in_ = rng.normal_matrix(1, d, 0.1);
    pos_.resize(t, d);
    for (Index i = 0; i < t; ++i)
      for (Index j = 0; j < d; ++j) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(d));
        pos_(i, j) = j % 2 == 0 ? std::sin(static_cast<double>(i) * freq) : std::cos(static_cast<double>(i) * freq);
      }
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
    blocks_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (auto &blk : blocks_) {
      blk.wq = rng.normal_matrix(d, d, sd_d);
      blk.wk = rng.normal_matrix(d, d, sd_d);
      blk.wv = rng.normal_matrix(d, d, sd_d);
      blk.wo = rng.normal_matrix(d, d, sd_d);
      blk.w1 = rng.normal_matrix(d, m, sd_d);
      blk.b1 = rng.normal_matrix(1, m, 0.1);
      blk.w2 = rng.normal_matrix(m, d, 1.0 / std::sqrt(static_cast<double>(m)));
      blk.b2 = RowVector::Zero(d);
    }
    reset_lora();
  }

  const FeatureNetConfig &config() const { return cfg_; }
  const Matrix &input_weight() const { return w_in_; }
  const RowVector &input_bias() const { return b_in_; }
  const Matrix &positions() const { return pos_; }
  const std::vector<BlockWeights> &blocks() const { return blocks_; }
  LoraAdapter &lora() { return lora_; }
  const LoraAdapter &lora() const { return lora_; }

  // A = 0, B ~ N(0, 0.02): the adapter starts with an exactly zero delta.
  void reset_lora() {
    Rng rng(split_seed(cfg_.seed, 0x6c6f7261));
    const Index d = cfg_.d_model, r = cfg_.lora_rank;
    lora_.rank = cfg_.lora_rank;
    lora_.scaling = 1.0 / cfg_.lora_rank;
    lora_.blocks.assign(blocks_.size(), {});
    for (auto &trip : lora_.blocks)
      for (auto &pair : trip) {
        pair.a = Matrix::Zero(d, r);
        pair.b = rng.normal_matrix(r, d, 0.02);
      }
  }

  const Matrix &base_weight(std::size_t layer, Target t) const {
    const auto &b = blocks_[layer];
    return t == Target::q ? b.wq : (t == Target::k ? b.wk : b.wv);
  }

  EffectiveWeights effective() const {
    EffectiveWeights eff;
    eff.w.resize(static_cast<std::size_t>(cfg_.tap_layer));
    for (std::size_t l = 0; l < eff.w.size(); ++l)
      for (int t = 0; t < 3; ++t) {
        const auto &pair = lora_.blocks[l][static_cast<std::size_t>(t)];
        eff.w[l][static_cast<std::size_t>(t)] = base_weight(l, static_cast<Target>(t)) + lora_.scaling * (pair.a * pair.b);
      }
    return eff;
  }

  // FNV-1a over every frozen parameter.
  std::uint64_t base_weight_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const Matrix &m) {
      const auto *bytes = reinterpret_cast<const unsigned char *>(m.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    };
    mix(w_in_);
    mix(b_in_);
    mix(pos_);
    for (const auto &b : blocks_) {
      mix(b.wq); mix(b.wk); mix(b.wv); mix(b.wo);
      mix(b.w1); mix(b.b1); mix(b.w2); mix(b.b2);
    }
    return h;
  }

  RowVector forward_window(std::span<const double> window) const {
    WindowCache cache;
    return forward_window(window, effective(), cache, false);
  }

  RowVector forward_window(std::span<const double> window, const EffectiveWeights &eff, WindowCache &cache,
                           bool keep_cache = true) const {
    const Index t = cfg_.frames(), p = cfg_.frontend_stride;
    if (static_cast<Index>(window.size()) != cfg_.window_samples())
      throw DataError("forward_window: expected " + std::to_string(cfg_.window_samples()) + " samples, got " +
                      std::to_string(window.size()));
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> frames(window.data(), t, p);
    Matrix x = frames * w_in_ + pos_;
    x.rowwise() += b_in_;

    cache.blocks.assign(static_cast<std::size_t>(cfg_.tap_layer), {});
    for (int l = 0; l < cfg_.tap_layer; ++l) {
      const Index q0 = (l == cfg_.tap_layer - 1) ? t - 1 : 0;
      BlockCache local;
      BlockCache &bc = keep_cache ? cache.blocks[static_cast<std::size_t>(l)] : local;
      x = block_forward(static_cast<std::size_t>(l), eff, std::move(x), q0, bc);
    }
    if (!keep_cache) cache.blocks.clear();
    return x.row(x.rows() - 1);
  }

  // Back-propagates d(loss)/d(feature) through one cached window, adding the
  // gradient with respect to each adapted q/k/v matrix into grad_eff.
  void backward_window(const WindowCache &cache, const RowVector &d_feature, const EffectiveWeights &eff,
                       std::vector<std::array<Matrix, 3>> &grad_eff) const {
    if (cache.empty()) throw Error("backward called before forward");
    Matrix dx = d_feature;
    for (int l = cfg_.tap_layer - 1; l >= 0; --l)
      dx = block_backward(static_cast<std::size_t>(l), eff, cache.blocks[static_cast<std::size_t>(l)], dx,
                          grad_eff[static_cast<std::size_t>(l)]);
  }

  std::vector<std::array<Matrix, 3>> zero_effective_grads() const {
    std::vector<std::array<Matrix, 3>> g(static_cast<std::size_t>(cfg_.tap_layer));
    for (auto &trip : g)
      for (auto &m : trip) m = Matrix::Zero(cfg_.d_model, cfg_.d_model);
    return g;
  }

private:
  Matrix block_forward(std::size_t l, const EffectiveWeights &eff, Matrix x, Index q0, BlockCache &bc) const {
    const auto &blk = blocks_[l];
    const Index t = x.rows(), tq = t - q0, d = cfg_.d_model, nh = cfg_.n_heads, dh = d / nh;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    bc.q0 = q0;
    bc.a = detail::layer_norm(x, bc.inv_a);
    bc.q = bc.a.bottomRows(tq) * eff.w[l][Target::q];
    bc.k = bc.a * eff.w[l][Target::k];
    bc.v = bc.a * eff.w[l][Target::v];
    bc.o.resize(tq, d);
    bc.probs.resize(static_cast<std::size_t>(nh));
    for (Index h = 0; h < nh; ++h) {
      Matrix s = (bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose()) * inv_sqrt_dh;
      detail::softmax_rows(s);
      bc.o.middleCols(h * dh, dh) = s * bc.v.middleCols(h * dh, dh);
      bc.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    bc.x_mid = x.bottomRows(tq) + bc.o * blk.wo;
    bc.m = detail::layer_norm(bc.x_mid, bc.inv_m);
    bc.u = bc.m * blk.w1;
    bc.u.rowwise() += blk.b1;
    const Matrix hid = bc.u.unaryExpr([](double u) { return detail::gelu(u); });
    Matrix y = bc.x_mid + hid * blk.w2;
    y.rowwise() += blk.b2;
    bc.x_in = std::move(x);
    return y;
  }

  Matrix block_backward(std::size_t l, const EffectiveWeights &eff, const BlockCache &bc, const Matrix &dy,
                        std::array<Matrix, 3> &grad) const {
    const auto &blk = blocks_[l];
    const Index t = bc.x_in.rows(), tq = t - bc.q0, d = cfg_.d_model, nh = cfg_.n_heads, dh = d / nh;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch.
    const Matrix dhid = dy * blk.w2.transpose();
    const Matrix du = dhid.cwiseProduct(bc.u.unaryExpr([](double u) { return detail::gelu_grad(u); }));
    const Matrix dm = du * blk.w1.transpose();
    const Matrix dx_mid = dy + detail::layer_norm_backward(bc.m, bc.inv_m, dm);

    // Attention branch.
    const Matrix d_o = dx_mid * blk.wo.transpose();
    Matrix dq(tq, d), dk(t, d), dv(t, d);
    for (Index h = 0; h < nh; ++h) {
      const Matrix &p = bc.probs[static_cast<std::size_t>(h)];
      const auto doh = d_o.middleCols(h * dh, dh);
      const Matrix dp = doh * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * doh;
      Matrix ds = p.cwiseProduct(dp);
      const Vector row_dot = ds.rowwise().sum();
      ds -= (p.array().colwise() * row_dot.array()).matrix();
      ds *= inv_sqrt_dh;
      dq.middleCols(h * dh, dh) = ds * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * bc.q.middleCols(h * dh, dh);
    }
    grad[Target::q].noalias() += bc.a.bottomRows(tq).transpose() * dq;
    grad[Target::k].noalias() += bc.a.transpose() * dk;
    grad[Target::v].noalias() += bc.a.transpose() * dv;

    Matrix da = dk * eff.w[l][Target::k].transpose() + dv * eff.w[l][Target::v].transpose();
    da.bottomRows(tq) += dq * eff.w[l][Target::q].transpose();
    Matrix dx = detail::layer_norm_backward(bc.a, bc.inv_a, da);
    dx.bottomRows(tq) += dx_mid;
    return dx;
  }

  FeatureNetConfig cfg_;
  Matrix w_in_;
  RowVector b_in_;
  Matrix pos_;
  std::vector<BlockWeights> blocks_;
  LoraAdapter lora_;
};

// Gradient of the loss with respect to A and B given the gradient with
// respect to W_eff = W + s*A*B.
inline void lora_grads_from_effective(const LoraPair &pair, double scaling, const Matrix &grad_eff, Matrix &grad_a,
                                      Matrix &grad_b) {
  grad_a = scaling * grad_eff * pair.b.transpose();
  grad_b = scaling * pair.a.transpose() * grad_eff;
}

// ---------------------------------------------------------------------------
// Feature extraction

// Window of `window_samples` ending (inclusive) at sample `end`, zero-padded.
inline std::vector<double> window_ending_at(const Vector &wave, Index end, Index window_samples) {
  std::vector<double> buf(static_cast<std::size_t>(window_samples), 0.0);
  for (Index j = 0; j < window_samples; ++j) {
    const Index src = end - (window_samples - 1) + j;
    if (src >= 0 && src < wave.size()) buf[static_cast<std::size_t>(j)] = wave(src);
  }
  return buf;
}

inline Index feature_row_count(double duration_s, double stride_s) {
  return static_cast<Index>(std::floor(duration_s / stride_s + 1e-9));
}

inline Index window_end_sample(std::size_t row, double stride_s, double rate_hz) {
  return std::lround(static_cast<double>(row) * stride_s * rate_hz);
}

// Row i is the feature of the window ending at sample round(i * stride * rate)
// (inclusive); context before the start of the stimulus is zero.
inline FeatureMatrix extract_features(const FeatureNet &net, const TimeSeries &stimulus, double stride_s,
                                      unsigned threads = 1) {
  const auto &cfg = net.config();
  if (stimulus.channels() != 1) throw DataError("extract_features: stimulus must be a single-channel waveform");
  if (std::abs(stimulus.rate_hz - cfg.input_rate_hz) > 1e-9 * cfg.input_rate_hz)
    throw DataError("extract_features: stimulus rate does not match the network input rate");
  if (!(stride_s > 0.0) || stride_s * stimulus.rate_hz < 1.0 - 1e-9)
    throw ConfigError("extract_features: stride shorter than one sample");
  if (stimulus.duration_s() <= cfg.window_s) throw DataError("extract_features: stimulus shorter than the window");

  const Index w = cfg.window_samples();
  const Index rows = feature_row_count(stimulus.duration_s(), stride_s);
  const Vector wave = stimulus.values.col(0);
  const EffectiveWeights eff = net.effective();
  FeatureMatrix out(Matrix(rows, cfg.d_model), 1.0 / stride_s);
  parallel_for(static_cast<std::size_t>(rows), threads, [&](std::size_t i) {
    const auto buf = window_ending_at(wave, window_end_sample(i, stride_s, stimulus.rate_hz), w);
    WindowCache cache;
    out.values.row(static_cast<Index>(i)) = net.forward_window(buf, eff, cache, false);
  });
  return out;
}

} // namespace xmodal::netft
