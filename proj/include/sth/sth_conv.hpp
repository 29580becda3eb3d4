#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "sth/attention.hpp"
#include "sth/conv.hpp"
#include "sth/layout.hpp"
#include "sth/tensor.hpp"

namespace sth {

/// Kernel geometry of an STH-Conv: spatial kernels are 1 x K_H x K_W, temporal
/// kernels K_T x 1 x 1 with temporal dilation. Both parts share the spatial
/// stride (temporal kernels sample the strided grid).
struct SthConvSpec {
  int kernel_t = 3;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int dilation_t = 1;

  ConvSpec spatial() const {
    ConvSpec s = ConvSpec::same(1, kernel_h, kernel_w, stride);
    return s;
  }
  ConvSpec temporal() const { return ConvSpec::same(kernel_t, 1, 1, stride, dilation_t); }
  /// Spec under which the masked 3D expansion reproduces the layer.
  ConvSpec full3d() const { return ConvSpec::same(kernel_t, kernel_h, kernel_w, stride, dilation_t); }

  std::size_t spatial_taps() const { return static_cast<std::size_t>(kernel_h) * kernel_w; }
};

/// Dense weights plus 0/1 masks; entries where the mask is 0 are structural zeros.
struct SthLayerParams {
  Tensor w_spatial;      // (C_o, C_i, 1, K_H, K_W)
  Tensor w_temporal;     // (C_o, C_i, K_T, 1, 1)
  Tensor mask_spatial;   // same shape as w_spatial
  Tensor mask_temporal;  // same shape as w_temporal
  std::optional<AttentionParams> attn;
};

/// Live (non-structural) conv weights: C_o * [pC_i * K_T + (1-p)C_i * K_H * K_W].
inline std::size_t sth_live_params(const HybridLayout& l, const SthConvSpec& spec) {
  return l.c_out * (l.span_width * static_cast<std::size_t>(spec.kernel_t) + (l.c_in - l.span_width) * spec.spatial_taps());
}

inline std::pair<Tensor, Tensor> build_masks(const HybridLayout& l, const SthConvSpec& spec) {
  const auto co = static_cast<std::int64_t>(l.c_out), ci = static_cast<std::int64_t>(l.c_in);
  Tensor ms(Shape{co, ci, 1, spec.kernel_h, spec.kernel_w});
  Tensor mt(Shape{co, ci, spec.kernel_t, 1, 1});
  const std::size_t kk = spec.spatial_taps(), kt = static_cast<std::size_t>(spec.kernel_t);
  for (std::size_t m = 0; m < l.c_out; ++m)
    for (std::size_t c = 0; c < l.c_in; ++c) {
      const bool temporal = l.is_temporal(m, c);
      for (std::size_t i = 0; i < kk; ++i) ms[(m * l.c_in + c) * kk + i] = temporal ? 0.0 : 1.0;
      for (std::size_t k = 0; k < kt; ++k) mt[(m * l.c_in + c) * kt + k] = temporal ? 1.0 : 0.0;
    }
  return {ms, mt};
}

inline void apply_masks(SthLayerParams& p) {
  for (std::size_t i = 0; i < p.w_spatial.numel(); ++i) p.w_spatial[i] *= p.mask_spatial[i];
  for (std::size_t i = 0; i < p.w_temporal.numel(); ++i) p.w_temporal[i] *= p.mask_temporal[i];
}

/// Uniform fan-in init over live entries; `bound` overrides the He-uniform default.
inline SthLayerParams make_sth_params(const HybridLayout& l, const SthConvSpec& spec, std::uint64_t seed,
                                      bool with_attention = false, std::size_t ratio = 4,
                                      bool symmetric_attention = false, std::optional<double> bound = std::nullopt) {
  SthLayerParams p;
  auto [ms, mt] = build_masks(l, spec);
  p.mask_spatial = std::move(ms);
  p.mask_temporal = std::move(mt);
  const std::size_t fan_in = sth_live_params(l, spec) / l.c_out;
  const double b = bound.value_or(std::sqrt(6.0 / static_cast<double>(fan_in)));
  p.w_spatial = random_uniform(p.mask_spatial.shape(), derive_seed(seed, 11), -b, b);
  p.w_temporal = random_uniform(p.mask_temporal.shape(), derive_seed(seed, 12), -b, b);
  apply_masks(p);
  if (with_attention) p.attn = make_attention(l.c_out, ratio, derive_seed(seed, 13), symmetric_attention);
  return p;
}

namespace detail {

inline void check_sth_params(const SthLayerParams& p, const HybridLayout& l, const SthConvSpec& spec) {
  const auto co = static_cast<std::int64_t>(l.c_out), ci = static_cast<std::int64_t>(l.c_in);
  const Shape ws{co, ci, 1, spec.kernel_h, spec.kernel_w};
  const Shape wt{co, ci, spec.kernel_t, 1, 1};
  require(p.w_spatial.shape() == ws, ErrorKind::ShapeMismatch, [&] { return std::string("w_spatial " + p.w_spatial.shape().str() + " expected " + ws.str()); });
  require(p.w_temporal.shape() == wt, ErrorKind::ShapeMismatch, [&] { return std::string("w_temporal " + p.w_temporal.shape().str() + " expected " + wt.str()); });
  require(p.mask_spatial.shape() == ws && p.mask_temporal.shape() == wt, ErrorKind::Layout,
          "mask shapes disagree with the layer");
  const std::size_t kk = spec.spatial_taps(), kt = static_cast<std::size_t>(spec.kernel_t);
  bool ok = true;
  for (std::size_t m = 0; m < l.c_out && ok; ++m)
    for (std::size_t c = 0; c < l.c_in && ok; ++c) {
      const double want_t = l.is_temporal(m, c) ? 1.0 : 0.0;
      const std::size_t mc = m * l.c_in + c;
      for (std::size_t i = 0; i < kk; ++i) ok = ok && p.mask_spatial[mc * kk + i] == 1.0 - want_t;
      for (std::size_t k = 0; k < kt; ++k) ok = ok && p.mask_temporal[mc * kt + k] == want_t;
    }
  require(ok, ErrorKind::Layout, "masks are inconsistent with the layout");
}

/// Channel interval covered by any temporal span.
inline std::pair<std::size_t, std::size_t> temporal_channel_range(const HybridLayout& l) {
  if (l.span_width == 0) return {0, 0};
  if (l.variant == Variant::Merge) return l.temporal_span(0);
  return {0, l.c_in};
}

struct SthGeometry {
  ConvGeometry s, t;
  std::pair<std::size_t, std::size_t> t_range;  // channels fed to the temporal im2col
  bool any_spatial = false;
};

inline SthGeometry sth_geometry(const Tensor& input, const HybridLayout& l, const SthConvSpec& spec) {
  SthGeometry g;
  const auto co = static_cast<std::int64_t>(l.c_out), ci = static_cast<std::int64_t>(l.c_in);
  g.s = conv_geometry(input.shape(), Shape{co, ci, 1, spec.kernel_h, spec.kernel_w}, spec.spatial());
  g.t = conv_geometry(input.shape(), Shape{co, ci, spec.kernel_t, 1, 1}, spec.temporal());
  g.t_range = temporal_channel_range(l);
  g.any_spatial = l.span_width < l.c_in;
  return g;
}

inline std::vector<FrameChunk> sth_chunks(const SthGeometry& g, const SthConvSpec& spec) {
  const std::size_t rows = std::max<std::size_t>(g.any_spatial ? g.s.c_in * spec.spatial_taps() : 0,
                                                 (g.t_range.second - g.t_range.first) * spec.kernel_t);
  return frame_chunks(g.s, std::max<std::size_t>(rows, 1));
}

}  // namespace detail

/// The two partial outputs of an STH-Conv, before integration.
struct SthBranches {
  Tensor o_s;
  Tensor o_t;
};

/// Computes O_S and O_T for every output channel: O_T from temporal kernels on
/// the channel's temporal span, O_S from spatial kernels on the remaining
/// channels. Only live weights are touched. `macs` (optional) accumulates the
/// multiply-accumulates actually executed.
inline SthBranches sth_forward(const Tensor& input, const SthLayerParams& params, const HybridLayout& layout,
                               const SthConvSpec& spec, std::uint64_t* macs = nullptr) {
  detail::check_sth_params(params, layout, spec);
  const auto g = detail::sth_geometry(input, layout, spec);
  const auto kk = static_cast<Eigen::Index>(spec.spatial_taps());
  const auto kt = static_cast<Eigen::Index>(spec.kernel_t);
  const auto ci = static_cast<Eigen::Index>(layout.c_in);
  const auto t_begin = static_cast<Eigen::Index>(g.t_range.first);
  const Shape out = output_shape(g.s);
  SthBranches br{Tensor(out), Tensor(out)};
  const auto ws = detail::weight_matrix(params.w_spatial);
  const auto wt = detail::weight_matrix(params.w_temporal);
  detail::RowMat col_s, col_t;

  for (const auto& ch : detail::sth_chunks(g, spec)) {
    if (g.any_spatial) detail::im2col(input, spec.spatial(), g.s, 0, layout.c_in, ch, col_s);
    if (g.t_range.second > g.t_range.first)
      detail::im2col(input, spec.temporal(), g.t, g.t_range.first, g.t_range.second, ch, col_t);
    for (std::size_t b = 0; b < layout.block_count(); ++b) {
      const auto [m0, m1] = layout.output_block(b);
      const auto [lo, hi] = layout.temporal_span(layout.type_of_output_channel(m0));
      const auto r0 = static_cast<Eigen::Index>(m0), mb = static_cast<Eigen::Index>(m1 - m0);
      const auto elo = static_cast<Eigen::Index>(lo), ehi = static_cast<Eigen::Index>(hi);
      auto out_s = detail::chunk_view(br.o_s, g.s, ch, m0, m1 - m0);
      if (elo > 0) out_s.noalias() += ws.block(r0, 0, mb, elo * kk) * col_s.topRows(elo * kk);
      if (ehi < ci)
        out_s.noalias() += ws.block(r0, ehi * kk, mb, (ci - ehi) * kk) * col_s.bottomRows((ci - ehi) * kk);
      if (ehi > elo)
        detail::chunk_view(br.o_t, g.s, ch, m0, m1 - m0).noalias() =
            wt.block(r0, elo * kt, mb, (ehi - elo) * kt) * col_t.middleRows((elo - t_begin) * kt, (ehi - elo) * kt);
    }
  }
  if (macs) {
    const auto P = static_cast<std::uint64_t>(g.s.n * g.s.out_plane());
    for (std::size_t b = 0; b < layout.block_count(); ++b) {
      const auto [m0, m1] = layout.output_block(b);
      const auto [lo, hi] = layout.temporal_span(layout.type_of_output_channel(m0));
      *macs += (m1 - m0) * P * static_cast<std::uint64_t>((layout.c_in - (hi - lo)) * kk + (hi - lo) * kt);
    }
  }
  return br;
}

/// STH_merge: every output channel uses the type-0 temporal span.
inline SthBranches sth_merge_forward(const Tensor& input, const SthLayerParams& params, const HybridLayout& layout,
                                     const SthConvSpec& spec, std::uint64_t* macs = nullptr) {
  require(layout.variant == Variant::Merge, ErrorKind::Layout, "sth_merge_forward needs a merge layout");
  return sth_forward(input, params, layout, spec, macs);
}

/// Embeds the layer into a dense (C_o, C_i, K_T, K_H, K_W) weight: spatial
/// kernels at the temporal centre tap, temporal kernels at the spatial centre.
inline Tensor expand_to_masked_3d(const SthLayerParams& params, const HybridLayout& layout) {
  const std::size_t kh = params.w_spatial.dim(3), kw = params.w_spatial.dim(4), kt = params.w_temporal.dim(2);
  require(params.w_spatial.dim(0) == layout.c_out && params.w_spatial.dim(1) == layout.c_in &&
              params.w_temporal.dim(0) == layout.c_out && params.w_temporal.dim(1) == layout.c_in,
          ErrorKind::ShapeMismatch, "params do not match the layout");
  Tensor w(make_shape({layout.c_out, layout.c_in, kt, kh, kw}));
  for (std::size_t m = 0; m < layout.c_out; ++m)
    for (std::size_t c = 0; c < layout.c_in; ++c) {
      if (layout.is_temporal(m, c)) {
        for (std::size_t k = 0; k < kt; ++k) w.at(m, c, k, (kh - 1) / 2, (kw - 1) / 2) = params.w_temporal.at(m, c, k, 0, 0);
      } else {
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) w.at(m, c, (kt - 1) / 2, i, j) = params.w_spatial.at(m, c, 0, i, j);
      }
    }
  return w;
}

struct SthGrads {
  Tensor input;
  Tensor w_spatial;
  Tensor w_temporal;
  std::optional<AttentionGrads> attn;
};

/// Forward intermediates needed by sth_backward.
struct SthForwardCache {
  SthBranches branches;
  std::optional<AttentionState> attn_state;
};

/// Plain (non-attentive) integration: O_S + O_T.
inline Tensor integrate_sum(const SthBranches& b) { return add(b.o_s, b.o_t); }

/// Adjoint of the two conv branches given gradients w.r.t. O_S and O_T.
/// Structural-zero weight positions are never written, so their gradient is 0.
inline SthGrads sth_branch_backward(const Tensor& input, const SthLayerParams& params, const HybridLayout& layout,
                                    const SthConvSpec& spec, const Tensor& grad_os, const Tensor& grad_ot,
                                    bool need_input = true) {
  detail::check_sth_params(params, layout, spec);
  const auto g = detail::sth_geometry(input, layout, spec);
  require(grad_os.shape() == output_shape(g.s) && grad_ot.shape() == grad_os.shape(), ErrorKind::ShapeMismatch, [&] {
    return "branch gradient shape " + grad_os.shape().str() + " != forward output " + output_shape(g.s).str();
  });
  const auto kk = static_cast<Eigen::Index>(spec.spatial_taps());
  const auto kt = static_cast<Eigen::Index>(spec.kernel_t);
  const auto ci = static_cast<Eigen::Index>(layout.c_in);
  const auto t_begin = static_cast<Eigen::Index>(g.t_range.first);
  const bool any_temporal = g.t_range.second > g.t_range.first;

  SthGrads grads{need_input ? Tensor(input.shape()) : Tensor(), Tensor(params.w_spatial.shape()),
                 Tensor(params.w_temporal.shape()), {}};
  auto dws = detail::weight_matrix(grads.w_spatial);
  auto dwt = detail::weight_matrix(grads.w_temporal);
  const auto ws = detail::weight_matrix(params.w_spatial);
  const auto wt = detail::weight_matrix(params.w_temporal);
  detail::RowMat col_s, col_t, dcol_s, dcol_t;

  for (const auto& ch : detail::sth_chunks(g, spec)) {
    if (g.any_spatial) {
      detail::im2col(input, spec.spatial(), g.s, 0, layout.c_in, ch, col_s);
      if (need_input) dcol_s.setZero(col_s.rows(), col_s.cols());
    }
    if (any_temporal) {
      detail::im2col(input, spec.temporal(), g.t, g.t_range.first, g.t_range.second, ch, col_t);
      if (need_input) dcol_t.setZero(col_t.rows(), col_t.cols());
    }
    for (std::size_t b = 0; b < layout.block_count(); ++b) {
      const auto [m0, m1] = layout.output_block(b);
      const auto [lo, hi] = layout.temporal_span(layout.type_of_output_channel(m0));
      const auto r0 = static_cast<Eigen::Index>(m0), mb = static_cast<Eigen::Index>(m1 - m0);
      const auto elo = static_cast<Eigen::Index>(lo), ehi = static_cast<Eigen::Index>(hi);
      const auto gs_blk = detail::chunk_view(grad_os, g.s, ch, m0, m1 - m0);
      if (elo > 0) {
        dws.block(r0, 0, mb, elo * kk).noalias() += gs_blk * col_s.topRows(elo * kk).transpose();
        if (need_input) dcol_s.topRows(elo * kk).noalias() += ws.block(r0, 0, mb, elo * kk).transpose() * gs_blk;
      }
      if (ehi < ci) {
        const auto n_rows = (ci - ehi) * kk;
        dws.block(r0, ehi * kk, mb, n_rows).noalias() += gs_blk * col_s.bottomRows(n_rows).transpose();
        if (need_input) dcol_s.bottomRows(n_rows).noalias() += ws.block(r0, ehi * kk, mb, n_rows).transpose() * gs_blk;
      }
      if (ehi > elo) {
        const auto gt_blk = detail::chunk_view(grad_ot, g.s, ch, m0, m1 - m0);
        const auto row0 = (elo - t_begin) * kt, n_rows = (ehi - elo) * kt;
        dwt.block(r0, elo * kt, mb, n_rows).noalias() += gt_blk * col_t.middleRows(row0, n_rows).transpose();
        if (need_input)
          dcol_t.middleRows(row0, n_rows).noalias() += wt.block(r0, elo * kt, mb, n_rows).transpose() * gt_blk;
      }
    }
    if (need_input) {
      if (g.any_spatial) detail::col2im(dcol_s, spec.spatial(), g.s, 0, layout.c_in, ch, grads.input);
      if (any_temporal) detail::col2im(dcol_t, spec.temporal(), g.t, g.t_range.first, g.t_range.second, ch, grads.input);
    }
  }
  return grads;
}

/// Full adjoint: through attentive integration (if `cache.attn_state` is set)
/// or the plain sum, then through both conv branches.
inline SthGrads sth_backward(const Tensor& input, const SthLayerParams& params, const HybridLayout& layout,
                             const SthConvSpec& spec, const SthForwardCache& cache, const Tensor& grad_out) {
  if (cache.attn_state) {
    require(params.attn.has_value(), ErrorKind::Argument, "attention state given for a layer without attention");
    auto ig = attentive_integrate_backward(cache.branches.o_s, cache.branches.o_t, *params.attn, *cache.attn_state,
                                           grad_out);
    auto grads = sth_branch_backward(input, params, layout, spec, ig.o_s, ig.o_t);
    grads.attn = std::move(ig.attn);
    return grads;
  }
  return sth_branch_backward(input, params, layout, spec, grad_out, grad_out);
}

/// Forward through conv branches and integration, filling `cache` for sth_backward.
inline Tensor sth_layer_forward(const Tensor& input, const SthLayerParams& params, const HybridLayout& layout,
                                const SthConvSpec& spec, SthForwardCache& cache, std::uint64_t* macs = nullptr) {
  cache.branches = sth_forward(input, params, layout, spec, macs);
  if (params.attn) {
    auto res = attentive_integrate(cache.branches.o_s, cache.branches.o_t, *params.attn);
    cache.attn_state = std::move(res.state);
    return std::move(res.out);
  }
  cache.attn_state.reset();
  return integrate_sum(cache.branches);
}

}  // namespace sth
