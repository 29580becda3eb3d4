#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "sth/error.hpp"
#include "sth/tensor.hpp"

namespace sth {

/// Squeeze -> shared reduction (C_o -> C_o/r, ReLU) -> two expansion heads ->
/// per-channel 2-way softmax, yielding alpha_T + alpha_S = 1.
struct AttentionParams {
  std::size_t channels = 0;
  std::size_t ratio = 4;
  Tensor reduce;       // (C_o, C_o/r)
  Tensor reduce_bias;  // (C_o/r)
  Tensor head_t;       // (C_o/r, C_o)
  Tensor head_t_bias;  // (C_o)
  Tensor head_s;       // (C_o/r, C_o)
  Tensor head_s_bias;  // (C_o)

  std::size_t hidden() const { return channels / ratio; }

  std::size_t param_count() const {
    return reduce.numel() + reduce_bias.numel() + head_t.numel() + head_t_bias.numel() + head_s.numel() +
           head_s_bias.numel();
  }
};

inline std::size_t attention_param_count(std::size_t channels, std::size_t ratio) {
  const std::size_t h = channels / ratio;
  return channels * h + h + 2 * (h * channels + channels);
}

/// Fan-in uniform init. With `symmetric` the spatial head copies the temporal
/// one, so every alpha starts at exactly 0.5.
inline AttentionParams make_attention(std::size_t channels, std::size_t ratio, std::uint64_t seed,
                                      bool symmetric = false) {
  require(ratio >= 1 && channels % ratio == 0, ErrorKind::Argument, [&] { return std::string("attention ratio " + std::to_string(ratio) + " must divide C_o=" + std::to_string(channels)); });
  AttentionParams a;
  a.channels = channels;
  a.ratio = ratio;
  const auto c = static_cast<std::int64_t>(channels);
  const auto h = static_cast<std::int64_t>(channels / ratio);
  const double b_red = 1.0 / std::sqrt(static_cast<double>(c));
  const double b_head = 1.0 / std::sqrt(static_cast<double>(h));
  a.reduce = random_uniform(Shape{c, h}, derive_seed(seed, 1), -b_red, b_red);
  a.reduce_bias = random_uniform(Shape{h}, derive_seed(seed, 2), -b_red, b_red);
  a.head_t = random_uniform(Shape{h, c}, derive_seed(seed, 3), -b_head, b_head);
  a.head_t_bias = random_uniform(Shape{c}, derive_seed(seed, 4), -b_head, b_head);
  if (symmetric) {
    a.head_s = a.head_t;
    a.head_s_bias = a.head_t_bias;
  } else {
    a.head_s = random_uniform(Shape{h, c}, derive_seed(seed, 5), -b_head, b_head);
    a.head_s_bias = random_uniform(Shape{c}, derive_seed(seed, 6), -b_head, b_head);
  }
  return a;
}

/// Intermediates kept for the backward pass; alphas are per sample, (N, C_o).
struct AttentionState {
  Tensor descriptor;  // z, (N, C_o)
  Tensor hidden_pre;  // (N, C_o/r)
  Tensor hidden;      // relu(hidden_pre)
  Tensor alpha_t;     // (N, C_o)
  Tensor alpha_s;     // (N, C_o)
};

struct IntegrateResult {
  Tensor out;
  AttentionState state;
};

namespace detail {

inline void check_branch_pair(const Tensor& o_s, const Tensor& o_t) {
  check_same_shape(o_s, o_t, "attentive_integrate");
  require(o_s.rank() == 5, ErrorKind::ShapeMismatch, "branch outputs must be (N,C,T,H,W)");
}

inline Tensor add_row_bias(Tensor m, const Tensor& bias) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] += bias[c];
  return m;
}

inline Tensor column_sum(const Tensor& m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor out(make_shape({cols}));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += m[r * cols + c];
  return out;
}

}  // namespace detail

/// out[n,m] = alpha_T[n,m] * O_T[n,m] + alpha_S[n,m] * O_S[n,m], broadcast over (T,H,W).
inline IntegrateResult attentive_integrate(const Tensor& o_s, const Tensor& o_t, const AttentionParams& attn) {
  detail::check_branch_pair(o_s, o_t);
  const std::size_t n = o_s.dim(0), c = o_s.dim(1), plane = o_s.numel() / (n * c);
  require(attn.channels == c, ErrorKind::ShapeMismatch, [&] { return std::string("attention built for " + std::to_string(attn.channels) + " channels, got " + std::to_string(c)); });
  require(attn.ratio >= 1 && c % attn.ratio == 0, ErrorKind::Argument, "attention ratio must divide C_o");

  IntegrateResult res;
  auto& st = res.state;
  st.descriptor = Tensor(make_shape({n, c}));
  const double inv_plane = 1.0 / static_cast<double>(plane);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t m = 0; m < c; ++m) {
      const double* ps = o_s.ptr() + (b * c + m) * plane;
      const double* pt = o_t.ptr() + (b * c + m) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += ps[i] + pt[i];
      st.descriptor[b * c + m] = acc * inv_plane;
    }

  st.hidden_pre = detail::add_row_bias(matmul(st.descriptor, attn.reduce), attn.reduce_bias);
  st.hidden = st.hidden_pre;
  for (auto& v : st.hidden.data()) v = std::max(v, 0.0);
  const Tensor logit_t = detail::add_row_bias(matmul(st.hidden, attn.head_t), attn.head_t_bias);
  const Tensor logit_s = detail::add_row_bias(matmul(st.hidden, attn.head_s), attn.head_s_bias);

  st.alpha_t = Tensor(make_shape({n, c}));
  st.alpha_s = Tensor(make_shape({n, c}));
  for (std::size_t i = 0; i < n * c; ++i) {
    const double mx = std::max(logit_t[i], logit_s[i]);
    const double et = std::exp(logit_t[i] - mx), es = std::exp(logit_s[i] - mx);
    st.alpha_t[i] = et / (et + es);
    st.alpha_s[i] = es / (et + es);
  }

  res.out = Tensor(o_s.shape());
  for (std::size_t bm = 0; bm < n * c; ++bm) {
    const double at = st.alpha_t[bm], as = st.alpha_s[bm];
    const double* ps = o_s.ptr() + bm * plane;
    const double* pt = o_t.ptr() + bm * plane;
    double* po = res.out.ptr() + bm * plane;
    for (std::size_t i = 0; i < plane; ++i) po[i] = at * pt[i] + as * ps[i];
  }
  return res;
}

struct AttentionGrads {
  Tensor reduce, reduce_bias, head_t, head_t_bias, head_s, head_s_bias;
};

struct IntegrateGrads {
  Tensor o_s;
  Tensor o_t;
  AttentionGrads attn;
};

inline IntegrateGrads attentive_integrate_backward(const Tensor& o_s, const Tensor& o_t, const AttentionParams& attn,
                                                   const AttentionState& st, const Tensor& grad_out) {
  detail::check_branch_pair(o_s, o_t);
  check_same_shape(o_s, grad_out, "attentive_integrate_backward");
  const std::size_t n = o_s.dim(0), c = o_s.dim(1), plane = o_s.numel() / (n * c);

  IntegrateGrads g{Tensor(o_s.shape()), Tensor(o_t.shape()), {}};
  Tensor d_alpha_t(make_shape({n, c})), d_alpha_s(make_shape({n, c}));
  for (std::size_t bm = 0; bm < n * c; ++bm) {
    const double at = st.alpha_t[bm], as = st.alpha_s[bm];
    const double* ps = o_s.ptr() + bm * plane;
    const double* pt = o_t.ptr() + bm * plane;
    const double* go = grad_out.ptr() + bm * plane;
    double* gs = g.o_s.ptr() + bm * plane;
    double* gt = g.o_t.ptr() + bm * plane;
    double dat = 0.0, das = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      gt[i] = at * go[i];
      gs[i] = as * go[i];
      dat += go[i] * pt[i];
      das += go[i] * ps[i];
    }
    d_alpha_t[bm] = dat;
    d_alpha_s[bm] = das;
  }

  // 2-way softmax: d logit_t = a_t a_s (d a_t - d a_s), d logit_s = -d logit_t
  Tensor d_logit_t(make_shape({n, c})), d_logit_s(make_shape({n, c}));
  for (std::size_t i = 0; i < n * c; ++i) {
    const double v = st.alpha_t[i] * st.alpha_s[i] * (d_alpha_t[i] - d_alpha_s[i]);
    d_logit_t[i] = v;
    d_logit_s[i] = -v;
  }

  const Tensor hidden_t = transpose2d(st.hidden);
  g.attn.head_t = matmul(hidden_t, d_logit_t);
  g.attn.head_s = matmul(hidden_t, d_logit_s);
  g.attn.head_t_bias = detail::column_sum(d_logit_t);
  g.attn.head_s_bias = detail::column_sum(d_logit_s);

  Tensor d_hidden = add(matmul(d_logit_t, transpose2d(attn.head_t)), matmul(d_logit_s, transpose2d(attn.head_s)));
  for (std::size_t i = 0; i < d_hidden.numel(); ++i)
    if (st.hidden_pre[i] <= 0.0) d_hidden[i] = 0.0;

  g.attn.reduce = matmul(transpose2d(st.descriptor), d_hidden);
  g.attn.reduce_bias = detail::column_sum(d_hidden);

  const Tensor d_desc = matmul(d_hidden, transpose2d(attn.reduce));
  const double inv_plane = 1.0 / static_cast<double>(plane);
  for (std::size_t bm = 0; bm < n * c; ++bm) {
    const double v = d_desc[bm] * inv_plane;
    double* gs = g.o_s.ptr() + bm * plane;
    double* gt = g.o_t.ptr() + bm * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      gs[i] += v;
      gt[i] += v;
    }
  }
  return g;
}

}  // namespace sth
