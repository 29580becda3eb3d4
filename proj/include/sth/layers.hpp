#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sth/conv.hpp"
#include "sth/sth_conv.hpp"
#include "sth/tensor.hpp"

namespace sth {

/// Named view of one stored tensor. `grad` is null for non-trainable state
/// (running statistics); `mask` is set for weights with structural zeros.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  const Tensor* mask = nullptr;
  bool decay = false;

  bool trainable() const { return grad != nullptr; }
  std::size_t live_count() const {
    if (!mask) return value->numel();
    std::size_t n = 0;
    for (double m : mask->data()) n += m != 0.0;
    return n;
  }
};

using ParamList = std::vector<ParamRef>;

/// FNV-1a over raw bytes; fingerprints piecewise-linear decisions (ReLU and
/// max-pool selections) so probes can tell when a kink was crossed.
inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
  return h;
}
inline constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

/// Plain convolution without bias; GEMM path.
class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(std::size_t c_in, std::size_t c_out, ConvSpec spec, std::uint64_t seed) : spec_(spec) {
    const auto fan_in = static_cast<double>(c_in) * spec.taps();
    const double b = std::sqrt(6.0 / fan_in);
    weight = random_uniform(make_shape({c_out, c_in, static_cast<std::size_t>(spec.kernel_t),
                                        static_cast<std::size_t>(spec.kernel_h), static_cast<std::size_t>(spec.kernel_w)}),
                            seed, -b, b);
    grad = Tensor(weight.shape());
  }

  Tensor forward(const Tensor& x, std::uint64_t* macs = nullptr) {
    input_ = x;
    const Tensor y = conv3d(x, weight, spec_);
    if (macs) *macs += conv_macs(conv_geometry(x.shape(), weight.shape(), spec_), spec_);
    return y;
  }

  Tensor backward(const Tensor& gy, bool need_input = true) {
    auto g = conv3d_backward_fast(input_, weight, spec_, gy, need_input);
    grad = std::move(g.weight);
    return std::move(g.input);
  }

  void collect(ParamList& out, const std::string& name) { out.push_back({name + ".weight", &weight, &grad, nullptr, true}); }
  const ConvSpec& spec() const { return spec_; }

  Tensor weight, grad;

 private:
  ConvSpec spec_;
  Tensor input_;
};

/// Per-channel normalization over (N,T,H,W). Batch statistics while training,
/// running statistics otherwise.
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(make_shape({channels}), std::vector<double>(channels, 1.0)),
        beta(make_shape({channels})),
        running_mean(make_shape({channels})),
        running_var(make_shape({channels}), std::vector<double>(channels, 1.0)),
        grad_gamma(make_shape({channels})),
        grad_beta(make_shape({channels})) {}

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  Tensor forward(const Tensor& x, bool train) {
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.numel() / (n * c);
    require(c == gamma.numel(), ErrorKind::ShapeMismatch, [&] { return std::string("norm channels " + std::to_string(gamma.numel()) +
                                                              " != input channels " + std::to_string(c)); });
    const double count = static_cast<double>(n * plane);
    mean_ = Tensor(make_shape({c}));
    inv_std_ = Tensor(make_shape({c}));
    if (train) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const double* p = x.ptr() + (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        const double mu = s / count;
        double v = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const double* p = x.ptr() + (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
        }
        const double var = v / count;
        mean_[ch] = mu;
        inv_std_[ch] = 1.0 / std::sqrt(var + kEps);
        const double unbiased = count > 1 ? v / (count - 1) : var;
        running_mean[ch] = (1 - kMomentum) * running_mean[ch] + kMomentum * mu;
        running_var[ch] = (1 - kMomentum) * running_var[ch] + kMomentum * unbiased;
      }
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        mean_[ch] = running_mean[ch];
        inv_std_[ch] = 1.0 / std::sqrt(running_var[ch] + kEps);
      }
    }
    train_ = train;
    xhat_ = Tensor(x.shape());
    Tensor y(x.shape());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (b * c + ch) * plane;
        const double mu = mean_[ch], is = inv_std_[ch], g = gamma[ch], bt = beta[ch];
        for (std::size_t i = 0; i < plane; ++i) {
          const double h = (x[off + i] - mu) * is;
          xhat_[off + i] = h;
          y[off + i] = g * h + bt;
        }
      }
    return y;
  }

  Tensor backward(const Tensor& gy) {
    const std::size_t n = gy.dim(0), c = gy.dim(1), plane = gy.numel() / (n * c);
    const double count = static_cast<double>(n * plane);
    Tensor gx(gy.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += gy[off + i];
          sgx += gy[off + i] * xhat_[off + i];
        }
      }
      grad_beta[ch] = sg;
      grad_gamma[ch] = sgx;
      const double k = gamma[ch] * inv_std_[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          gx[off + i] = train_ ? k * (gy[off + i] - sg / count - xhat_[off + i] * sgx / count) : k * gy[off + i];
        }
      }
    }
    return gx;
  }

  void collect(ParamList& out, const std::string& name) {
    out.push_back({name + ".gamma", &gamma, &grad_gamma, nullptr, false});
    out.push_back({name + ".beta", &beta, &grad_beta, nullptr, false});
    out.push_back({name + ".running_mean", &running_mean, nullptr, nullptr, false});
    out.push_back({name + ".running_var", &running_var, nullptr, nullptr, false});
  }

  Tensor gamma, beta, running_mean, running_var, grad_gamma, grad_beta;

 private:
  bool train_ = true;
  Tensor mean_, inv_std_, xhat_;
};

class Relu {
 public:
  Tensor forward(Tensor x) {
    mask_.assign(x.numel(), 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      if (x[i] > 0.0)
        mask_[i] = 1;
      else
        x[i] = 0.0;
    }
    return x;
  }
  Tensor backward(Tensor g) const {
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (!mask_[i]) g[i] = 0.0;
    return g;
  }
  std::uint64_t fingerprint(std::uint64_t h) const { return fnv1a(h, mask_.data(), mask_.size()); }

 private:
  std::vector<unsigned char> mask_;
};

/// 1 x K x K max pooling per frame, stride s, padding p (padding never wins).
class MaxPool2d {
 public:
  MaxPool2d(int kernel = 3, int stride = 2, int pad = 1) : k_(kernel), s_(stride), p_(pad) {}

  Shape output_shape(const Shape& in) const {
    const auto ho = (in[3] + 2 * p_ - k_) / s_ + 1, wo = (in[4] + 2 * p_ - k_) / s_ + 1;
    return make_shape({in[0], in[1], in[2], ho, wo});
  }

  Tensor forward(const Tensor& x) {
    in_shape_ = x.shape();
    const Shape os = output_shape(x.shape());
    Tensor y(os);
    argmax_.assign(y.numel(), 0);
    const std::size_t frames = x.dim(0) * x.dim(1) * x.dim(2), H = x.dim(3), W = x.dim(4);
    const std::size_t Ho = os[3], Wo = os[4];
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t w = 0; w < Wo; ++w) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t arg = 0;
          for (int i = 0; i < k_; ++i) {
            const long hi = static_cast<long>(h) * s_ + i - p_;
            if (hi < 0 || hi >= static_cast<long>(H)) continue;
            for (int j = 0; j < k_; ++j) {
              const long wi = static_cast<long>(w) * s_ + j - p_;
              if (wi < 0 || wi >= static_cast<long>(W)) continue;
              const std::size_t idx = (f * H + hi) * W + wi;
              if (x[idx] > best) {
                best = x[idx];
                arg = idx;
              }
            }
          }
          const std::size_t o = (f * Ho + h) * Wo + w;
          y[o] = best;
          argmax_[o] = arg;
        }
    return y;
  }

  Tensor backward(const Tensor& gy) const {
    Tensor gx(in_shape_);
    for (std::size_t o = 0; o < gy.numel(); ++o) gx[argmax_[o]] += gy[o];
    return gx;
  }
  std::uint64_t fingerprint(std::uint64_t h) const {
    return fnv1a(h, argmax_.data(), argmax_.size() * sizeof(std::size_t));
  }

 private:
  int k_, s_, p_;
  Shape in_shape_{1};
  std::vector<std::size_t> argmax_;
};

/// STH-Conv core of a bottleneck: masked weights, optional attentive integration.
class SthConvLayer {
 public:
  SthConvLayer() = default;
  SthConvLayer(HybridLayout layout, SthConvSpec spec, std::uint64_t seed, bool attention, std::size_t ratio,
               bool symmetric_attention = false)
      : layout(std::move(layout)), spec(spec) {
    params = make_sth_params(this->layout, spec, seed, attention, ratio, symmetric_attention);
    zero_grads();
  }

  Tensor forward(const Tensor& x, std::uint64_t* macs = nullptr) {
    input_ = x;
    return sth_layer_forward(x, params, layout, spec, cache, macs);
  }

  Tensor backward(const Tensor& gy) {
    auto g = sth_backward(input_, params, layout, spec, cache, gy);
    grads.w_spatial = std::move(g.w_spatial);
    grads.w_temporal = std::move(g.w_temporal);
    if (g.attn) grads.attn = std::move(g.attn);
    return std::move(g.input);
  }

  /// Signs of the attention hidden layer from the last forward.
  std::uint64_t fingerprint(std::uint64_t h) const {
    if (!cache.attn_state) return h;
    for (double v : cache.attn_state->hidden_pre.data()) {
      const unsigned char on = v > 0.0;
      h = fnv1a(h, &on, 1);
    }
    return h;
  }

  void collect(ParamList& out, const std::string& name) {
    out.push_back({name + ".w_spatial", &params.w_spatial, &grads.w_spatial, &params.mask_spatial, true});
    out.push_back({name + ".w_temporal", &params.w_temporal, &grads.w_temporal, &params.mask_temporal, true});
    if (params.attn) {
      auto& a = *params.attn;
      auto& g = *grads.attn;
      out.push_back({name + ".attn.reduce", &a.reduce, &g.reduce, nullptr, true});
      out.push_back({name + ".attn.reduce_bias", &a.reduce_bias, &g.reduce_bias, nullptr, false});
      out.push_back({name + ".attn.head_t", &a.head_t, &g.head_t, nullptr, true});
      out.push_back({name + ".attn.head_t_bias", &a.head_t_bias, &g.head_t_bias, nullptr, false});
      out.push_back({name + ".attn.head_s", &a.head_s, &g.head_s, nullptr, true});
      out.push_back({name + ".attn.head_s_bias", &a.head_s_bias, &g.head_s_bias, nullptr, false});
    }
  }

  HybridLayout layout;
  SthConvSpec spec;
  SthLayerParams params;
  SthGrads grads;
  SthForwardCache cache;

 private:
  void zero_grads() {
    grads.w_spatial = Tensor(params.w_spatial.shape());
    grads.w_temporal = Tensor(params.w_temporal.shape());
    if (params.attn) {
      const auto& a = *params.attn;
      grads.attn = AttentionGrads{Tensor(a.reduce.shape()), Tensor(a.reduce_bias.shape()), Tensor(a.head_t.shape()),
                                  Tensor(a.head_t_bias.shape()), Tensor(a.head_s.shape()), Tensor(a.head_s_bias.shape())};
    }
  }

  Tensor input_;
};

}  // namespace sth
