#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sth/data_synth.hpp"
#include "sth/network.hpp"

namespace sth {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::vector<std::size_t> lr_steps;  // epochs (1-based) at whose start lr is multiplied by 0.1
  std::uint64_t seed = 1;
  double target_top1 = 0.0;  // stop once validation top-1 reaches this (0 disables)
};

/// Configs need lr > 0; `allow_zero_lr` admits lr = 0 for frozen-parameter probes.
inline void validate_train(const TrainConfig& c, bool allow_zero_lr = false) {
  require(c.lr > 0 || (allow_zero_lr && c.lr == 0), ErrorKind::Config, "lr must be > 0");
  require(c.momentum >= 0 && c.momentum < 1, ErrorKind::Config, "momentum must be in [0,1)");
  require(c.weight_decay >= 0, ErrorKind::Config, "weight_decay must be >= 0");
  require(c.batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
}

inline double lr_at_epoch(const TrainConfig& c, std::size_t epoch) {
  double lr = c.lr;
  for (auto s : c.lr_steps)
    if (epoch >= s) lr *= 0.1;
  return lr;
}

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d(mean loss)/d logits
};

/// Mean softmax cross-entropy over the batch, max-subtracted.
inline LossResult cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), ErrorKind::ShapeMismatch,
          "cross_entropy expects (N,K) logits and N labels");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] < k, ErrorKind::Argument, [&] { return std::string("label " + std::to_string(labels[i]) + " out of range [0," +
                                                    std::to_string(k) + ")"); });
    const double* row = logits.ptr() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    r.loss += log_z - row[labels[i]];
    for (std::size_t j = 0; j < k; ++j) r.grad[i * k + j] = std::exp(row[j] - log_z) / static_cast<double>(n);
    r.grad[i * k + labels[i]] -= 1.0 / static_cast<double>(n);
  }
  r.loss /= static_cast<double>(n);
  return r;
}

/// Velocity buffers keyed by position in the parameter list.
struct OptimizerState {
  std::vector<Tensor> velocity;
};

/// v <- mu v + g + wd theta (decay params only); theta <- theta - lr v; masks re-applied.
inline void sgd_step(ParamList& params, OptimizerState& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.empty())
    for (const auto& p : params) state.velocity.emplace_back(p.trainable() ? Tensor(p.value->shape()) : Tensor());
  require(state.velocity.size() == params.size(), ErrorKind::ShapeMismatch, "optimizer state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.trainable()) continue;
    auto& v = state.velocity[k];
    require(v.shape() == p.value->shape() && p.grad->shape() == p.value->shape(), ErrorKind::ShapeMismatch, [&] { return std::string("shape mismatch in sgd_step for " + p.name); });
    const double wd = p.decay ? weight_decay : 0.0;
    double* th = p.value->ptr();
    const double* g = p.grad->ptr();
    double* vel = v.ptr();
    for (std::size_t i = 0; i < v.numel(); ++i) {
      vel[i] = momentum * vel[i] + g[i] + wd * th[i];
      th[i] -= lr * vel[i];
    }
    if (p.mask) {
      const double* m = p.mask->ptr();
      for (std::size_t i = 0; i < v.numel(); ++i) {
        th[i] *= m[i];
        vel[i] *= m[i];
      }
    }
  }
}

/// Stacks TSN clips of the given videos into (N, C, T, H, W), mean-subtracted.
inline Tensor make_batch(const VideoDataset& ds, const std::vector<std::size_t>& idx, std::size_t segments, bool train,
                         std::uint64_t seed, std::size_t clip = 0, std::size_t clips = 1) {
  require(!idx.empty(), ErrorKind::Argument, "empty batch");
  const Video& v0 = ds.videos[idx.front()];
  const std::size_t c = v0.c, h = v0.h, w = v0.w, plane = h * w;
  Tensor batch(make_shape({idx.size(), c, segments, h, w}));
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Video& v = ds.videos[idx[b]];
    require(v.c == c && v.h == h && v.w == w, ErrorKind::ShapeMismatch, "videos in a batch must share (C,H,W)");
    std::vector<std::size_t> frames;
    if (train || clips == 1) {
      Rng rng(derive_seed(seed, idx[b]));
      frames = tsn_indices(v.f, segments, train, &rng);
    } else {
      for (std::size_t s = 0; s < segments; ++s) {
        const std::size_t lo = s * v.f / segments, hi = (s + 1) * v.f / segments;
        frames.push_back(lo + clip * (hi - lo) / clips);
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mean = ch < ds.channel_mean.size() ? ds.channel_mean[ch] : 0.0;
      for (std::size_t s = 0; s < segments; ++s) {
        const float* src = v.data.data() + (ch * v.f + frames[s]) * plane;
        double* dst = batch.ptr() + ((b * c + ch) * segments + s) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<double>(src[i]) - mean;
      }
    }
  }
  return batch;
}

struct EpochMetrics {
  double loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
};

/// Rank of the true label's logit (0 = best); ties count against the label.
inline std::size_t label_rank(const double* row, std::size_t k, std::size_t label) {
  std::size_t r = 0;
  for (std::size_t j = 0; j < k; ++j)
    if (j != label && row[j] >= row[label]) ++r;
  return r;
}

/// Backprop of consensus: each frame receives grad / T.
inline Tensor consensus_backward(const Tensor& grad_video, std::size_t frames) {
  const std::size_t n = grad_video.dim(0), k = grad_video.dim(1);
  Tensor g(make_shape({n, frames, k}));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t j = 0; j < k; ++j) g[(b * frames + t) * k + j] = grad_video[b * k + j] / static_cast<double>(frames);
  return g;
}

/// One pass over a fixed per-epoch shuffle; returns training metrics.
inline EpochMetrics train_epoch(Network& net, const VideoDataset& ds, const TrainConfig& cfg, OptimizerState& state,
                                std::size_t epoch) {
  require(ds.size() > 0, ErrorKind::Argument, "train_epoch on an empty dataset");
  validate_train(cfg, true);
  const std::uint64_t epoch_seed = derive_seed(cfg.seed, 1000 + epoch);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(epoch_seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

  const double lr = lr_at_epoch(cfg, epoch);
  const std::size_t T = net.config().frames, K = net.config().num_class;
  auto params = net.params();
  EpochMetrics m;
  std::size_t correct = 0, correct5 = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                       order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
    const Tensor clip = make_batch(ds, idx, T, true, derive_seed(epoch_seed, start));
    const Tensor video_logits = consensus(net.forward(clip, true));
    std::vector<std::size_t> labels;
    for (auto i : idx) labels.push_back(ds.labels[i]);
    const auto ce = cross_entropy(video_logits, labels);
    m.loss += ce.loss * static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto r = label_rank(video_logits.ptr() + b * K, K, labels[b]);
      correct += r == 0;
      correct5 += r < 5;
    }
    net.backward(consensus_backward(ce.grad, T));
    sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay);
  }
  const auto n = static_cast<double>(ds.size());
  m.loss /= n;
  m.top1 = static_cast<double>(correct) / n;
  m.top5 = static_cast<double>(correct5) / n;
  return m;
}

/// Video-level logits under test-mode sampling, averaged over `clips`.
inline Tensor predict(Network& net, const VideoDataset& ds, std::size_t clips = 1, std::size_t batch = 16) {
  require(ds.size() > 0, ErrorKind::Argument, "evaluation on an empty dataset");
  require(clips >= 1, ErrorKind::Argument, "clips_per_video must be >= 1");
  const std::size_t T = net.config().frames, K = net.config().num_class;
  Tensor out(make_shape({ds.size(), K}));
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch); ++i) idx.push_back(i);
    for (std::size_t c = 0; c < clips; ++c) {
      const Tensor logits = consensus(net.forward(make_batch(ds, idx, T, false, 0, c, clips), false));
      for (std::size_t b = 0; b < idx.size(); ++b)
        for (std::size_t j = 0; j < K; ++j) out[(start + b) * K + j] += logits[b * K + j] / static_cast<double>(clips);
    }
  }
  return out;
}

inline EpochMetrics evaluate(Network& net, const VideoDataset& ds, std::size_t clips = 1) {
  const Tensor logits = predict(net, ds, clips);
  const std::size_t K = net.config().num_class;
  EpochMetrics m;
  m.loss = cross_entropy(logits, ds.labels).loss;
  std::size_t c1 = 0, c5 = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto r = label_rank(logits.ptr() + i * K, K, ds.labels[i]);
    c1 += r == 0;
    c5 += r < 5;
  }
  m.top1 = static_cast<double>(c1) / static_cast<double>(ds.size());
  m.top5 = static_cast<double>(c5) / static_cast<double>(ds.size());
  return m;
}

struct MetricsRow {
  std::size_t epoch;
  std::string split;
  EpochMetrics m;
  double lr;
};

inline std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "epoch,split,loss,top1,top5,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.split.c_str(), r.m.loss, r.m.top1,
                  r.m.top5, r.lr);
    out += buf;
  }
  return out;
}

struct TrainResult {
  std::vector<MetricsRow> rows;
  EpochMetrics final_val;
  double best_val_top1 = 0.0;
  std::size_t epochs_run = 0;
};

/// Epoch loop with per-epoch validation; stops early at cfg.target_top1.
inline TrainResult fit(Network& net, const VideoDataset& train, const VideoDataset& val, const TrainConfig& cfg,
                       const std::function<void(const MetricsRow&)>& on_row = {}) {
  validate_train(cfg);
  OptimizerState state;
  TrainResult res;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const double lr = lr_at_epoch(cfg, e);
    const auto tm = train_epoch(net, train, cfg, state, e);
    res.rows.push_back({e, "train", tm, lr});
    if (on_row) on_row(res.rows.back());
    res.final_val = evaluate(net, val);
    res.rows.push_back({e, "val", res.final_val, lr});
    if (on_row) on_row(res.rows.back());
    res.best_val_top1 = std::max(res.best_val_top1, res.final_val.top1);
    res.epochs_run = e;
    if (cfg.target_top1 > 0 && res.final_val.top1 >= cfg.target_top1) break;
  }
  return res;
}

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // redrawn probes
  std::string worst;
};

/// Central differences on `samples` randomly chosen live trainable scalars. The
/// analytic gradients must already sit in each ParamRef's grad tensor.
/// With `pattern`, a probe whose +eps and -eps evaluations take different
/// piecewise-linear branches straddles a kink; it is not a derivative estimate,
/// so it is counted in `kinks` and redrawn (at most 10 * samples times).
inline FdReport finite_difference_check(const std::function<double()>& loss, const ParamList& params,
                                        std::size_t samples, double eps, std::uint64_t seed,
                                        const std::function<std::uint64_t()>& pattern = {}) {
  require(eps >= 1e-7 && eps <= 1e-3, ErrorKind::Argument, "eps must lie in [1e-7, 1e-3]");
  std::vector<const ParamRef*> pool;
  for (const auto& p : params)
    if (p.trainable()) pool.push_back(&p);
  require(!pool.empty(), ErrorKind::Argument, "no trainable parameters to check");
  Rng rng(seed);
  FdReport rep;
  while (rep.checked < samples) {
    const ParamRef* pick = nullptr;
    std::size_t i = 0;
    do {  // live entries only
      pick = pool[rng.below(pool.size())];
      i = rng.below(pick->value->numel());
    } while (pick->mask && (*pick->mask)[i] == 0.0);
    const ParamRef& p = *pick;
    double& theta = (*p.value)[i];
    const double saved = theta;
    theta = saved + eps;
    const double up = loss();
    const std::uint64_t pat_up = pattern ? pattern() : 0;
    theta = saved - eps;
    const double down = loss();
    const std::uint64_t pat_down = pattern ? pattern() : 0;
    theta = saved;
    if (pat_up != pat_down) {
      ++rep.kinks;
      require(rep.kinks <= 10 * samples, ErrorKind::Argument, "finite differences keep straddling kinks");
      continue;
    }
    const double numeric = (up - down) / (2 * eps);
    const double analytic = (*p.grad)[i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    const double rel = std::abs(analytic - numeric) / denom;
    ++rep.checked;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst = p.name + "[" + std::to_string(i) + "]";
    }
  }
  return rep;
}

}  // namespace sth
