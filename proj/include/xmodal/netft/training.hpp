#pragma once

// Fine-tuning of the feature net against slow responses: rank-limited
// response projection, correlation loss, Adam, per-epoch checkpoints and
// validation-based epoch selection.

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "../embed.hpp"
#include "../error.hpp"
#include "../parallel.hpp"
#include "../ridge.hpp"
#include "../rng.hpp"
#include "../signal.hpp"
#include "../tensor_io.hpp"
#include "feature_net.hpp"

namespace xmodal::netft {

// spatial: Pearson across channels at each timepoint, averaged over time.
// temporal: Pearson across the batch's timepoints per channel, averaged over channels.
enum class LossMode { spatial, temporal };
NLOHMANN_JSON_SERIALIZE_ENUM(LossMode, {{LossMode::spatial, "spatial"}, {LossMode::temporal, "temporal"}})

struct LossResult {
  double value{0.0};
  Matrix grad;               // d loss / d pred
  std::vector<Index> flagged; // rows (spatial) or channels (temporal) with zero variance
};

namespace detail {

// Negative mean correlation between matching vectors (columns of p and a),
// with the gradient. Zero-variance vectors contribute 0 and are flagged.
inline LossResult neg_mean_corr_columns(const Matrix &p, const Matrix &a) {
  LossResult out;
  out.grad = Matrix::Zero(p.rows(), p.cols());
  const auto n = static_cast<double>(p.cols());
  for (Index j = 0; j < p.cols(); ++j) {
    const Vector pc = p.col(j).array() - p.col(j).mean();
    const Vector ac = a.col(j).array() - a.col(j).mean();
    const double np = pc.norm(), na = ac.norm();
    const double tol_p = 1e-12 * (1.0 + p.col(j).norm()), tol_a = 1e-12 * (1.0 + a.col(j).norm());
    if (np <= tol_p || na <= tol_a) {
      out.flagged.push_back(j);
      continue;
    }
    const Vector ph = pc / np, ah = ac / na;
    const double r = ph.dot(ah);
    out.value -= r / n;
    out.grad.col(j) = -(ah - r * ph) / (np * n);
  }
  return out;
}

} // namespace detail

// `channel_mask`, when non-empty, selects the channels that take part; the
// others receive zero gradient.
inline LossResult correlation_loss(const Matrix &pred, const Matrix &actual, LossMode mode,
                                   const std::vector<bool> &channel_mask = {}) {
  if (pred.rows() != actual.rows() || pred.cols() != actual.cols())
    throw DataError("correlation loss: pred and actual differ in shape");
  std::vector<Index> keep;
  for (Index c = 0; c < pred.cols(); ++c)
    if (channel_mask.empty() || channel_mask[static_cast<std::size_t>(c)]) keep.push_back(c);
  if (!channel_mask.empty() && static_cast<Index>(channel_mask.size()) != pred.cols())
    throw ConfigError("correlation loss: mask length differs from channel count");
  Matrix p(pred.rows(), static_cast<Index>(keep.size())), a(pred.rows(), static_cast<Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    p.col(static_cast<Index>(i)) = pred.col(keep[i]);
    a.col(static_cast<Index>(i)) = actual.col(keep[i]);
  }

  LossResult sub;
  if (mode == LossMode::spatial) {
    if (keep.size() < 2) throw ConfigError("spatial correlation loss needs at least two channels");
    sub = detail::neg_mean_corr_columns(p.transpose(), a.transpose());
    sub.grad.transposeInPlace();
  } else {
    if (pred.rows() < 2) throw ConfigError("temporal correlation loss needs at least two timepoints");
    sub = detail::neg_mean_corr_columns(p, a);
    for (auto &f : sub.flagged) f = keep[static_cast<std::size_t>(f)];
  }
  LossResult out;
  out.value = sub.value;
  out.flagged = std::move(sub.flagged);
  out.grad = Matrix::Zero(pred.rows(), pred.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) out.grad.col(keep[i]) = sub.grad.col(static_cast<Index>(i));
  return out;
}

inline LossResult spatial_corr_loss(const Matrix &pred, const Matrix &actual, const std::vector<bool> &channel_mask = {}) {
  return correlation_loss(pred, actual, LossMode::spatial, channel_mask);
}

// ---------------------------------------------------------------------------

struct ResponseProjection {
  Matrix u; // F x rank
  Matrix v; // rank x C

  static ResponseProjection init(Index features, Index channels, Index rank, std::uint64_t seed) {
    Rng rng(split_seed(seed, 0x70726f6a));
    ResponseProjection p;
    p.u = rng.normal_matrix(features, rank, 1.0 / std::sqrt(static_cast<double>(features)));
    p.v = rng.normal_matrix(rank, channels, 1.0 / std::sqrt(static_cast<double>(rank)));
    return p;
  }
  Matrix apply(const Matrix &design) const { return (design * u) * v; }
};

// Trainable parameters in a fixed order: A, B for q/k/v of every block, then U, V.
inline std::vector<Matrix *> trainable_params(FeatureNet &net, ResponseProjection &proj) {
  std::vector<Matrix *> ps;
  for (auto &trip : net.lora().blocks)
    for (auto &pair : trip) {
      ps.push_back(&pair.a);
      ps.push_back(&pair.b);
    }
  ps.push_back(&proj.u);
  ps.push_back(&proj.v);
  return ps;
}

inline std::vector<std::string> trainable_names(const FeatureNet &net) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < net.lora().blocks.size(); ++l)
    for (const char *t : target_names) {
      names.push_back("lora_l" + std::to_string(l) + "_" + t + "_A");
      names.push_back("lora_l" + std::to_string(l) + "_" + t + "_B");
    }
  names.emplace_back("proj_U");
  names.emplace_back("proj_V");
  return names;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr{5e-4};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
  long step{0};
  std::vector<Matrix> m, v;
};

inline void adam_step(AdamState &st, const std::vector<Matrix *> &params, const std::vector<Matrix> &grads) {
  if (params.size() != grads.size()) throw ConfigError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols())
      throw ConfigError("adam_step: gradient " + std::to_string(i) + " shape mismatch");
    if (!grads[i].allFinite()) throw NumericalError("adam_step: non-finite gradient for parameter " + std::to_string(i));
  }
  if (st.m.empty()) {
    for (const auto *p : params) {
      st.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      st.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (st.m.size() != params.size()) throw ConfigError("adam_step: state does not match parameters");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i].cwiseProduct(grads[i]);
    params[i]->array() -= st.lr * (st.m[i].array() / c1) / ((st.v[i].array() / c2).sqrt() + st.eps);
  }
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
  int epochs{30};
  int batch_trs{10};
  double lr{5e-4};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
  double feature_stride_s{0.25};
  std::vector<int> delays; // in response samples; empty = no delays inside fine-tuning
  int projection_rank{100};
  LossMode loss{LossMode::spatial};
  int lanczos_a{3};
  std::uint64_t seed{0};
  unsigned threads{1};
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FinetuneConfig, epochs, batch_trs, lr, beta1, beta2, eps,
                                                feature_stride_s, delays, projection_rank, loss, lanczos_a, seed,
                                                threads)

struct SlowStory {
  TimeSeries stimulus;  // single-channel waveform at the net's input rate
  TimeSeries responses; // slow responses
};

// Everything needed to map feature rows of one story onto its response grid.
struct StoryPlan {
  Vector wave;
  ResampleMap map; // feature rows -> response samples
  Index n_tr{0};
};

inline StoryPlan plan_story(const FeatureNet &net, const SlowStory &story, double stride_s, int lanczos_a) {
  if (story.stimulus.channels() != 1) throw DataError("story stimulus must be a single-channel waveform");
  if (std::abs(story.stimulus.rate_hz - net.config().input_rate_hz) > 1e-9 * net.config().input_rate_hz)
    throw DataError("story stimulus rate does not match the network input rate");
  StoryPlan plan;
  plan.wave = story.stimulus.values.col(0);
  const Index rows = feature_row_count(story.stimulus.duration_s(), stride_s);
  plan.map = lanczos_map(rows, 1.0 / stride_s, story.responses.rate_hz, lanczos_a);
  plan.n_tr = std::min(plan.map.n_out, story.responses.samples());
  if (plan.n_tr < 1) throw DataError("story has no response samples aligned with its stimulus");
  return plan;
}

inline Index design_width(const FeatureNet &net, const FinetuneConfig &cfg) {
  return net.config().d_model * static_cast<Index>(std::max<std::size_t>(1, cfg.delays.size()));
}

struct BatchResult {
  double loss{0.0};
  std::vector<Index> flagged;
  std::vector<Matrix> grads; // trainable_params order; empty when not requested
};

// Loss (and optionally gradients) of the response rows [t0, t0 + len) of one story.
inline BatchResult evaluate_batch(const FeatureNet &net, const ResponseProjection &proj, const SlowStory &story,
                                  const StoryPlan &plan, Index t0, Index len, const FinetuneConfig &cfg,
                                  bool with_grad, const std::vector<bool> &channel_mask = {}) {
  if (t0 < 0 || len < 1 || t0 + len > plan.n_tr) throw ConfigError("evaluate_batch: span out of range");
  const Index d = net.config().d_model;
  const Index w = net.config().window_samples();
  const bool delayed = !cfg.delays.empty();
  const std::vector<int> shifts = delayed ? cfg.delays : std::vector<int>{0};

  // Response-grid rows needed, then feature rows feeding them.
  std::map<Index, Index> slow_pos, feat_pos;
  for (Index t = t0; t < t0 + len; ++t)
    for (int s : shifts)
      if (t - s >= 0) slow_pos.emplace(t - s, 0);
  Index k = 0;
  for (auto &[row, pos] : slow_pos) {
    pos = k++;
    const Index f = plan.map.first[static_cast<std::size_t>(row)];
    for (std::size_t j = 0; j < plan.map.weights[static_cast<std::size_t>(row)].size(); ++j)
      feat_pos.emplace(f + static_cast<Index>(j), 0);
  }
  std::vector<Index> feat_rows;
  k = 0;
  for (auto &[row, pos] : feat_pos) {
    pos = k++;
    feat_rows.push_back(row);
  }

  const EffectiveWeights eff = net.effective();
  const auto nf = static_cast<Index>(feat_rows.size());
  Matrix feats(nf, d);
  std::vector<WindowCache> caches(static_cast<std::size_t>(nf));
  parallel_for(static_cast<std::size_t>(nf), cfg.threads, [&](std::size_t i) {
    const auto buf = window_ending_at(plan.wave, window_end_sample(static_cast<std::size_t>(feat_rows[i]),
                                                                   cfg.feature_stride_s, net.config().input_rate_hz),
                                      w);
    feats.row(static_cast<Index>(i)) = net.forward_window(buf, eff, caches[i], with_grad);
  });

  Matrix slow = Matrix::Zero(static_cast<Index>(slow_pos.size()), d);
  for (const auto &[row, pos] : slow_pos) {
    const auto &wt = plan.map.weights[static_cast<std::size_t>(row)];
    const Index f = plan.map.first[static_cast<std::size_t>(row)];
    for (std::size_t j = 0; j < wt.size(); ++j) slow.row(pos) += wt[j] * feats.row(feat_pos.at(f + static_cast<Index>(j)));
  }
  Matrix design = Matrix::Zero(len, design_width(net, cfg));
  for (Index t = 0; t < len; ++t)
    for (std::size_t b = 0; b < shifts.size(); ++b) {
      const Index src = t0 + t - shifts[b];
      if (src >= 0) design.block(t, static_cast<Index>(b) * d, 1, d) = slow.row(slow_pos.at(src));
    }

  const Matrix hidden = design * proj.u;
  const Matrix pred = hidden * proj.v;
  const Matrix actual = story.responses.values.middleRows(t0, len);
  LossResult lr = correlation_loss(pred, actual, cfg.loss, channel_mask);

  BatchResult out;
  out.loss = lr.value;
  out.flagged = std::move(lr.flagged);
  if (!with_grad) return out;

  const Matrix dhidden = lr.grad * proj.v.transpose();
  const Matrix du = design.transpose() * dhidden;
  const Matrix dv = hidden.transpose() * lr.grad;
  const Matrix ddesign = dhidden * proj.u.transpose();

  Matrix dslow = Matrix::Zero(slow.rows(), d);
  for (Index t = 0; t < len; ++t)
    for (std::size_t b = 0; b < shifts.size(); ++b) {
      const Index src = t0 + t - shifts[b];
      if (src >= 0) dslow.row(slow_pos.at(src)) += ddesign.block(t, static_cast<Index>(b) * d, 1, d);
    }
  Matrix dfeats = Matrix::Zero(nf, d);
  for (const auto &[row, pos] : slow_pos) {
    const auto &wt = plan.map.weights[static_cast<std::size_t>(row)];
    const Index f = plan.map.first[static_cast<std::size_t>(row)];
    for (std::size_t j = 0; j < wt.size(); ++j) dfeats.row(feat_pos.at(f + static_cast<Index>(j))) += wt[j] * dslow.row(pos);
  }

  // Per-window gradients are reduced in window order, so the result does not
  // depend on the thread count.
  std::vector<std::vector<std::array<Matrix, 3>>> per_window(static_cast<std::size_t>(nf));
  parallel_for(static_cast<std::size_t>(nf), cfg.threads, [&](std::size_t i) {
    per_window[i] = net.zero_effective_grads();
    net.backward_window(caches[i], dfeats.row(static_cast<Index>(i)), eff, per_window[i]);
  });
  auto grad_eff = net.zero_effective_grads();
  for (const auto &g : per_window)
    for (std::size_t l = 0; l < g.size(); ++l)
      for (std::size_t t = 0; t < 3; ++t) grad_eff[l][t] += g[l][t];

  const auto &lora = net.lora();
  for (std::size_t l = 0; l < lora.blocks.size(); ++l)
    for (std::size_t t = 0; t < 3; ++t) {
      const auto &pair = lora.blocks[l][t];
      if (l < grad_eff.size()) {
        Matrix ga, gb;
        lora_grads_from_effective(pair, lora.scaling, grad_eff[l][t], ga, gb);
        out.grads.push_back(std::move(ga));
        out.grads.push_back(std::move(gb));
      } else { // blocks above the tap never influence the feature
        out.grads.push_back(Matrix::Zero(pair.a.rows(), pair.a.cols()));
        out.grads.push_back(Matrix::Zero(pair.b.rows(), pair.b.cols()));
      }
    }
  out.grads.push_back(du);
  out.grads.push_back(dv);
  return out;
}

struct Checkpoint {
  int epoch{0};
  double train_loss{0.0};
  std::vector<std::array<LoraPair, 3>> lora;
  ResponseProjection projection;
};

inline void apply_checkpoint(FeatureNet &net, const Checkpoint &ckpt) {
  if (ckpt.lora.size() != net.lora().blocks.size()) throw DataError("checkpoint does not match the network depth");
  for (std::size_t l = 0; l < ckpt.lora.size(); ++l)
    for (std::size_t t = 0; t < 3; ++t) {
      const auto &src = ckpt.lora[l][t];
      const auto &dst = net.lora().blocks[l][t];
      if (src.a.rows() != dst.a.rows() || src.a.cols() != dst.a.cols() || src.b.rows() != dst.b.rows() ||
          src.b.cols() != dst.b.cols())
        throw DataError("checkpoint adapter shapes do not match the network");
    }
  net.lora().blocks = ckpt.lora;
}

struct FinetuneResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<double> loss_curve; // mean batch loss per epoch
};

using EpochCallback = std::function<void(const Checkpoint &)>;

// Trains LoRA adapters and the response projection in place. Every epoch
// visits contiguous spans of `batch_trs` response samples in a seeded random
// order and records a checkpoint.
inline FinetuneResult finetune(FeatureNet &net, const std::vector<SlowStory> &train, const FinetuneConfig &cfg,
                               const EpochCallback &on_epoch = {}) {
  if (cfg.epochs < 0) throw ConfigError("finetune: epochs must be >= 0");
  if (cfg.batch_trs < 1) throw ConfigError("finetune: batch_trs must be >= 1");
  if (cfg.projection_rank < 1) throw ConfigError("finetune: projection rank must be >= 1");
  if (train.empty()) throw DataError("finetune: no training stories");
  FinetuneResult result;
  if (cfg.epochs == 0) return result;

  const Index channels = train.front().responses.channels();
  std::vector<StoryPlan> plans;
  for (const auto &s : train) {
    if (s.responses.channels() != channels) throw DataError("finetune: stories differ in channel count");
    plans.push_back(plan_story(net, s, cfg.feature_stride_s, cfg.lanczos_a));
  }
  ResponseProjection proj = ResponseProjection::init(design_width(net, cfg), channels, cfg.projection_rank, cfg.seed);
  AdamState adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0, {}, {}};

  struct Span { std::size_t story; Index t0, len; };
  std::vector<Span> spans;
  for (std::size_t s = 0; s < train.size(); ++s)
    for (Index t0 = 0; t0 < plans[s].n_tr; t0 += cfg.batch_trs)
      spans.push_back({s, t0, std::min<Index>(cfg.batch_trs, plans[s].n_tr - t0)});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(split_seed(cfg.seed, 0x65706f6368ULL + static_cast<std::uint64_t>(epoch)));
    std::vector<Span> order = spans;
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const auto &sp = order[b];
      BatchResult br = evaluate_batch(net, proj, train[sp.story], plans[sp.story], sp.t0, sp.len, cfg, true);
      if (!std::isfinite(br.loss))
        throw NumericalError("finetune: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      total += br.loss;
      adam_step(adam, trainable_params(net, proj), br.grads);
    }
    Checkpoint ck{epoch, total / static_cast<double>(order.size()), net.lora().blocks, proj};
    result.loss_curve.push_back(ck.train_loss);
    if (on_epoch) on_epoch(ck);
    result.checkpoints.push_back(std::move(ck));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Encoding-based evaluation

struct EncodingSetup {
  double feature_stride_s{0.25};
  std::vector<int> delays{1, 2, 3, 4};
  int lanczos_a{3};
  unsigned threads{1};
};

struct SlowDesign {
  Matrix x; // stacked delayed designs of all stories
  Matrix y; // stacked responses
};

// Features on each story's response grid, delay-embedded per story (so no
// delay crosses a story boundary) and stacked.
inline SlowDesign slow_design(const FeatureNet &net, const std::vector<SlowStory> &stories, const EncodingSetup &setup) {
  if (stories.empty()) throw DataError("slow_design: no stories");
  std::vector<Matrix> xs, ys;
  Index rows = 0;
  for (const auto &s : stories) {
    const StoryPlan plan = plan_story(net, s, setup.feature_stride_s, setup.lanczos_a);
    const FeatureMatrix f = extract_features(net, s.stimulus, setup.feature_stride_s, setup.threads);
    const Matrix slow = plan.map.apply(f.values).topRows(plan.n_tr);
    xs.push_back(setup.delays.empty() ? slow : delay_embed(slow, setup.delays).values);
    ys.push_back(s.responses.values.topRows(plan.n_tr));
    rows += plan.n_tr;
  }
  SlowDesign out{Matrix(rows, xs.front().cols()), Matrix(rows, ys.front().cols())};
  Index r = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (ys[i].cols() != out.y.cols()) throw DataError("slow_design: stories differ in channel count");
    out.x.middleRows(r, xs[i].rows()) = xs[i];
    out.y.middleRows(r, ys[i].rows()) = ys[i];
    r += xs[i].rows();
  }
  return out;
}

struct EpochSelection {
  std::vector<int> epochs;
  std::vector<double> scores;      // mean validation score per checkpoint, under the pretrained alphas
  double pretrained_score{0.0};
  std::vector<double> pretrained_alphas;
  std::size_t chosen_index{0};
  int chosen_epoch{0};
  RidgeSolution refit;             // ridge refit (alpha search) for the chosen epoch
};

inline EpochSelection select_epoch(const FeatureNet &base, const std::vector<Checkpoint> &checkpoints,
                                   const std::vector<SlowStory> &val, const RidgeConfig &ridge_cfg,
                                   const EncodingSetup &setup) {
  if (checkpoints.empty()) throw ConfigError("select_epoch: no checkpoints");
  FeatureNet net = base;
  net.reset_lora();
  EpochSelection sel;
  {
    const SlowDesign sd = slow_design(net, val, setup);
    const RidgeSolution pre = fit_ridge_cv(sd.x, sd.y, ridge_cfg);
    sel.pretrained_alphas = pre.alpha_per_channel;
    sel.pretrained_score = pre.cv_score_per_channel.mean();
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    apply_checkpoint(net, checkpoints[i]);
    const SlowDesign sd = slow_design(net, val, setup);
    const double score = fit_ridge_fixed(sd.x, sd.y, sel.pretrained_alphas, ridge_cfg).cv_score_per_channel.mean();
    sel.epochs.push_back(checkpoints[i].epoch);
    sel.scores.push_back(score);
    if (score > best) { // strict: ties keep the earliest epoch
      best = score;
      sel.chosen_index = i;
    }
  }
  sel.chosen_epoch = checkpoints[sel.chosen_index].epoch;
  apply_checkpoint(net, checkpoints[sel.chosen_index]);
  const SlowDesign sd = slow_design(net, val, setup);
  sel.refit = fit_ridge_cv(sd.x, sd.y, ridge_cfg);
  return sel;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence: one tensor file per parameter plus meta.json.

inline void save_checkpoint(const std::filesystem::path &dir, const FeatureNet &net, const Checkpoint &ckpt,
                            const nlohmann::json &extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  FeatureNet tmp = net;
  ResponseProjection proj = ckpt.projection;
  apply_checkpoint(tmp, ckpt);
  const auto params = trainable_params(tmp, proj);
  const auto names = trainable_names(tmp);
  for (std::size_t i = 0; i < params.size(); ++i) write_tensor(dir / (names[i] + ".nst"), *params[i]);
  nlohmann::json meta = extra;
  meta["epoch"] = ckpt.epoch;
  meta["train_loss"] = ckpt.train_loss;
  meta["net"] = net.config();
  meta["base_weight_hash"] = net.base_weight_hash();
  save_json(dir / "meta.json", meta);
}

inline Checkpoint load_checkpoint(const std::filesystem::path &dir, const FeatureNet &net) {
  const nlohmann::json meta = load_json(dir / "meta.json");
  if (meta.value("base_weight_hash", std::uint64_t{0}) != net.base_weight_hash())
    throw DataError(dir.string() + ": checkpoint was trained on different base weights");
  FeatureNet tmp = net;
  ResponseProjection proj;
  auto params = trainable_params(tmp, proj);
  const auto names = trainable_names(tmp);
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = read_tensor(dir / (names[i] + ".nst")).to_matrix();
  Checkpoint ck;
  ck.epoch = meta.at("epoch").get<int>();
  ck.train_loss = meta.at("train_loss").get<double>();
  ck.lora = tmp.lora().blocks;
  ck.projection = proj;
  apply_checkpoint(tmp, ck); // shape validation
  return ck;
}

} // namespace xmodal::netft
