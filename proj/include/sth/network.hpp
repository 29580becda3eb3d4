#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sth/layers.hpp"
#include "sth/layout.hpp"
#include "sth/rng.hpp"

namespace sth {

enum class KernelType { Fixed, Dilated };
inline const char* to_string(KernelType k) { return k == KernelType::Fixed ? "fixed" : "dilated"; }

/// Backbone description. Channel widths are given at full size and divided by
/// `scale_factor`.
struct NetworkConfig {
  std::size_t frames = 8;
  std::size_t input_hw = 224;
  std::size_t in_channels = 3;
  std::size_t num_class = 174;
  std::size_t scale_factor = 1;
  std::size_t stem_width = 64;
  std::vector<std::size_t> widths = {64, 128, 256, 512};
  std::vector<std::size_t> blocks = {3, 4, 6, 3};
  Ratio p{1, 4};
  KernelType kernel_type = KernelType::Dilated;
  bool attention = false;
  std::size_t attention_ratio = 4;
  bool symmetric_attention = false;
  Variant variant = Variant::Hybrid;

  std::size_t scaled(std::size_t w) const { return w / scale_factor; }
};

/// Geometry of one bottleneck, derived from the config alone.
struct BlockPlan {
  std::string name;  // e.g. "conv3_2"
  std::size_t stage = 0;
  std::size_t c_in = 0, width = 0, c_out = 0;
  int stride = 1;
  int dilation = 1;
  bool projection = false;
  std::size_t h_in = 0, w_in = 0, h_out = 0, w_out = 0;
};

struct NetworkPlan {
  std::size_t stem_out = 0;
  std::size_t h_stem = 0, w_stem = 0, h_pool = 0, w_pool = 0;
  std::vector<BlockPlan> blocks;
  std::size_t feature_channels = 0;
};

inline std::size_t strided_extent(std::size_t in, int k, int stride, int pad) {
  return (in + 2 * static_cast<std::size_t>(pad) - static_cast<std::size_t>(k)) / static_cast<std::size_t>(stride) + 1;
}

inline void validate_config(const NetworkConfig& cfg) {
  auto cfg_fail = [](const std::string& m) { fail(ErrorKind::Config, m); };
  if (cfg.scale_factor == 0) cfg_fail("scale_factor must be >= 1");
  if (cfg.frames == 0 || cfg.input_hw == 0 || cfg.num_class == 0 || cfg.in_channels == 0)
    cfg_fail("frames, input_hw, in_channels and num_class must be >= 1");
  if (cfg.widths.size() != 4 || cfg.blocks.size() != 4) cfg_fail("widths and blocks need exactly 4 stages");
  for (auto b : cfg.blocks)
    if (b == 0) cfg_fail("block counts must be >= 1");
  auto check_width = [&](std::size_t w, const std::string& what) {
    if (w % cfg.scale_factor != 0 || w / cfg.scale_factor == 0)
      cfg_fail(what + " " + std::to_string(w) + " not divisible by scale_factor " + std::to_string(cfg.scale_factor));
  };
  check_width(cfg.stem_width, "stem width");
  for (auto w : cfg.widths) {
    check_width(w, "width");
    check_width(4 * w, "output width");
    if (!cfg.p.is_zero() && (w / cfg.scale_factor) % static_cast<std::size_t>(cfg.p.den) != 0)
      cfg_fail("STH width " + std::to_string(w / cfg.scale_factor) + " not divisible by G=" + std::to_string(cfg.p.den));
    if (cfg.attention && (cfg.attention_ratio == 0 || (w / cfg.scale_factor) % cfg.attention_ratio != 0))
      cfg_fail("attention ratio " + std::to_string(cfg.attention_ratio) + " must divide STH width " +
               std::to_string(w / cfg.scale_factor));
  }
  if (!cfg.p.is_zero() && (cfg.p.num != 1 || cfg.p.den < 2)) cfg_fail("p must be 0 or 1/G with G >= 2, got " + cfg.p.str());
}

inline NetworkPlan plan_network(const NetworkConfig& cfg) {
  validate_config(cfg);
  NetworkPlan plan;
  plan.stem_out = cfg.scaled(cfg.stem_width);
  plan.h_stem = plan.w_stem = strided_extent(cfg.input_hw, 7, 2, 3);
  plan.h_pool = plan.w_pool = strided_extent(plan.h_stem, 3, 2, 1);
  std::size_t c = plan.stem_out, h = plan.h_pool, w = plan.w_pool, sth_index = 0;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      BlockPlan bp;
      bp.name = "conv" + std::to_string(s + 2) + "_" + std::to_string(b + 1);
      bp.stage = s;
      bp.c_in = c;
      bp.width = cfg.scaled(cfg.widths[s]);
      bp.c_out = 4 * bp.width;
      bp.stride = (b == 0 && s > 0) ? 2 : 1;
      bp.dilation = dilation_schedule(sth_index++, cfg.kernel_type == KernelType::Dilated);
      bp.projection = b == 0;
      bp.h_in = h;
      bp.w_in = w;
      bp.h_out = strided_extent(h, 3, bp.stride, 1);
      bp.w_out = strided_extent(w, 3, bp.stride, 1);
      plan.blocks.push_back(bp);
      c = bp.c_out;
      h = bp.h_out;
      w = bp.w_out;
    }
  plan.feature_channels = c;
  return plan;
}

/// One named entry of a forward shape trace (per-sample shape, batch dim dropped).
struct TraceEntry {
  std::string layer;
  std::vector<std::size_t> shape;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

/// The shape chain implied by the config, one entry per named layer.
inline std::vector<TraceEntry> expected_trace(const NetworkConfig& cfg) {
  const auto plan = plan_network(cfg);
  const std::size_t T = cfg.frames;
  std::vector<TraceEntry> t;
  t.push_back({"Conv1", {plan.stem_out, T, plan.h_stem, plan.w_stem}});
  t.push_back({"Pool1", {plan.stem_out, T, plan.h_pool, plan.w_pool}});
  for (std::size_t s = 0; s < 4; ++s) {
    const BlockPlan* last = nullptr;
    for (const auto& b : plan.blocks)
      if (b.stage == s) last = &b;
    t.push_back({"Conv" + std::to_string(s + 2) + "_x", {last->c_out, T, last->h_out, last->w_out}});
  }
  t.push_back({"Pool5", {plan.feature_channels, T, 1, 1}});
  t.push_back({"FC", {T, cfg.num_class}});
  t.push_back({"Consensus", {1, cfg.num_class}});
  return t;
}

class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(const NetworkConfig& cfg, const BlockPlan& bp, std::uint64_t seed) : plan_(bp) {
    conv1 = ConvLayer(bp.c_in, bp.width, ConvSpec{}, derive_seed(seed, 1));
    bn1 = BatchNorm(bp.width);
    const auto layout = build_layout(bp.width, bp.width, cfg.p, cfg.variant);
    const SthConvSpec spec{3, 3, 3, bp.stride, bp.dilation};
    sth = SthConvLayer(layout, spec, derive_seed(seed, 2), cfg.attention, cfg.attention_ratio, cfg.symmetric_attention);
    bn2 = BatchNorm(bp.width);
    conv3 = ConvLayer(bp.width, bp.c_out, ConvSpec{}, derive_seed(seed, 3));
    bn3 = BatchNorm(bp.c_out);
    if (bp.projection) {
      proj = ConvLayer(bp.c_in, bp.c_out, ConvSpec::same(1, 1, 1, bp.stride), derive_seed(seed, 4));
      bn_proj = BatchNorm(bp.c_out);
    }
  }

  Tensor forward(const Tensor& x, bool train, std::uint64_t* macs) {
    Tensor h = r1.forward(bn1.forward(conv1.forward(x, macs), train));
    h = r2.forward(bn2.forward(sth.forward(h, macs), train));
    h = bn3.forward(conv3.forward(h, macs), train);
    if (proj)
      add_inplace(h, bn_proj->forward(proj->forward(x, macs), train));
    else
      add_inplace(h, x);
    return out.forward(std::move(h));
  }

  Tensor backward(const Tensor& gy) {
    const Tensor g = out.backward(gy);
    Tensor gx = conv1.backward(bn1.backward(r1.backward(sth.backward(bn2.backward(r2.backward(conv3.backward(bn3.backward(g))))))));
    if (proj)
      add_inplace(gx, proj->backward(bn_proj->backward(g)));
    else
      add_inplace(gx, g);
    return gx;
  }

  void collect(ParamList& list) {
    const auto& n = plan_.name;
    conv1.collect(list, n + ".conv1");
    bn1.collect(list, n + ".bn1");
    sth.collect(list, n + ".sth");
    bn2.collect(list, n + ".bn2");
    conv3.collect(list, n + ".conv3");
    bn3.collect(list, n + ".bn3");
    if (proj) {
      proj->collect(list, n + ".proj");
      bn_proj->collect(list, n + ".bn_proj");
    }
  }

  const BlockPlan& plan() const { return plan_; }

  std::uint64_t fingerprint(std::uint64_t h) const {
    return out.fingerprint(r2.fingerprint(sth.fingerprint(r1.fingerprint(h))));
  }

  ConvLayer conv1;
  BatchNorm bn1;
  Relu r1;
  SthConvLayer sth;
  BatchNorm bn2;
  Relu r2;
  ConvLayer conv3;
  BatchNorm bn3;
  std::optional<ConvLayer> proj;
  std::optional<BatchNorm> bn_proj;
  Relu out;

 private:
  BlockPlan plan_;
};

/// Full backbone: stem, pool, bottleneck stages, per-frame classifier.
class Network {
 public:
  Network() = default;
  Network(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), plan_(plan_network(cfg_)) {
    stem = ConvLayer(cfg_.in_channels, plan_.stem_out, ConvSpec::same(1, 7, 7, 2), derive_seed(seed, 100));
    stem_bn = BatchNorm(plan_.stem_out);
    for (std::size_t i = 0; i < plan_.blocks.size(); ++i)
      blocks.emplace_back(cfg_, plan_.blocks[i], derive_seed(seed, 200 + i));
    const auto c = static_cast<std::int64_t>(plan_.feature_channels), k = static_cast<std::int64_t>(cfg_.num_class);
    const double b = 1.0 / std::sqrt(static_cast<double>(c));
    fc_weight = random_uniform(Shape{c, k}, derive_seed(seed, 300), -b, b);
    fc_bias = Tensor(Shape{k});
    fc_weight_grad = Tensor(fc_weight.shape());
    fc_bias_grad = Tensor(fc_bias.shape());
  }

  const NetworkConfig& config() const { return cfg_; }
  const NetworkPlan& plan() const { return plan_; }

  /// clip (N, C, T, H, W) -> per-frame logits (N, T, K). `trace` receives the
  /// per-sample shape at each named layer.
  Tensor forward(const Tensor& clip, bool train, std::uint64_t* macs = nullptr, std::vector<TraceEntry>* trace = nullptr) {
    require(clip.rank() == 5 && clip.dim(1) == cfg_.in_channels, ErrorKind::ShapeMismatch, [&] { return std::string("clip must be (N," + std::to_string(cfg_.in_channels) + ",T,H,W), got " + clip.shape().str()); });
    auto record = [&](const std::string& name, const Shape& s) {
      if (!trace) return;
      std::vector<std::size_t> d(s.dims().begin() + 1, s.dims().end());
      trace->push_back({name, d});
    };
    Tensor h = stem_relu.forward(stem_bn.forward(stem.forward(clip, macs), train));
    record("Conv1", h.shape());
    h = pool.forward(h);
    record("Pool1", h.shape());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i].forward(h, train, macs);
      const bool stage_end = i + 1 == blocks.size() || blocks[i + 1].plan().stage != blocks[i].plan().stage;
      if (stage_end) record("Conv" + std::to_string(blocks[i].plan().stage + 2) + "_x", h.shape());
    }

    // Pool5: average over (H, W) -> (N, C, T)
    const std::size_t n = h.dim(0), c = h.dim(1), t = h.dim(2), hw = h.dim(3) * h.dim(4);
    feature_shape_ = h.shape();
    pooled_ = Tensor(make_shape({n, t, c}));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t f = 0; f < t; ++f) {
          const double* p = h.ptr() + ((b * c + ch) * t + f) * hw;
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += p[i];
          pooled_[(b * t + f) * c + ch] = s / static_cast<double>(hw);
        }
    if (trace) trace->push_back({"Pool5", {c, t, 1, 1}});

    const std::size_t k = cfg_.num_class;
    Tensor flat = pooled_.reshaped(make_shape({n * t, c}));
    Tensor logits = detail::add_row_bias(matmul(flat, fc_weight), fc_bias);
    if (macs) *macs += static_cast<std::uint64_t>(n * t * c * k);
    if (trace) trace->push_back({"FC", {t, k}});
    return logits.reshaped(make_shape({n, t, k}));
  }

  /// grad of per-frame logits (N, T, K) -> grad of the clip.
  Tensor backward(const Tensor& grad_logits) {
    const std::size_t n = grad_logits.dim(0), t = grad_logits.dim(1), k = grad_logits.dim(2);
    const std::size_t c = plan_.feature_channels;
    const Tensor g2 = grad_logits.reshaped(make_shape({n * t, k}));
    const Tensor flat = pooled_.reshaped(make_shape({n * t, c}));
    fc_weight_grad = matmul(transpose2d(flat), g2);
    fc_bias_grad = detail::column_sum(g2);
    const Tensor g_pooled = matmul(g2, transpose2d(fc_weight));

    Tensor g(feature_shape_);
    const std::size_t hw = feature_shape_[3] * feature_shape_[4];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t f = 0; f < t; ++f) {
          const double v = g_pooled[(b * t + f) * c + ch] / static_cast<double>(hw);
          double* p = g.ptr() + ((b * c + ch) * t + f) * hw;
          for (std::size_t i = 0; i < hw; ++i) p[i] = v;
        }
    for (std::size_t i = blocks.size(); i-- > 0;) g = blocks[i].backward(g);
    g = pool.backward(g);
    return stem.backward(stem_bn.backward(stem_relu.backward(g)), false);
  }

  ParamList params() {
    ParamList list;
    stem.collect(list, "conv1");
    stem_bn.collect(list, "conv1.bn");
    for (auto& b : blocks) b.collect(list);
    list.push_back({"fc.weight", &fc_weight, &fc_weight_grad, nullptr, true});
    list.push_back({"fc.bias", &fc_bias, &fc_bias_grad, nullptr, false});
    return list;
  }

  /// Hash of every ReLU and max-pool decision taken by the last forward.
  std::uint64_t activation_pattern() const {
    std::uint64_t h = pool.fingerprint(stem_relu.fingerprint(kFnvBasis));
    for (const auto& b : blocks) h = b.fingerprint(h);
    return h;
  }

  /// STH layers in network order (for attention export and probes).
  std::vector<SthConvLayer*> sth_layers() {
    std::vector<SthConvLayer*> out;
    for (auto& b : blocks) out.push_back(&b.sth);
    return out;
  }

  ConvLayer stem;
  BatchNorm stem_bn;
  Relu stem_relu;
  MaxPool2d pool{3, 2, 1};
  std::vector<Bottleneck> blocks;
  Tensor fc_weight, fc_bias, fc_weight_grad, fc_bias_grad;

 private:
  NetworkConfig cfg_;
  NetworkPlan plan_;
  Tensor pooled_;
  Shape feature_shape_{1};
};

inline Network build_sth_network(const NetworkConfig& cfg, std::uint64_t seed) { return Network(cfg, seed); }

/// Mean of per-frame logits over the frame axis: (N, T, K) -> (N, K).
inline Tensor consensus(const Tensor& frame_logits) {
  require(frame_logits.rank() == 3, ErrorKind::ShapeMismatch, [&] { return std::string("consensus expects (N,T,K), got " + frame_logits.shape().str()); });
  return reduce_mean(frame_logits, {1});
}

}  // namespace sth
