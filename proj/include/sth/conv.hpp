#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sth/error.hpp"
#include "sth/parallel.hpp"
#include "sth/tensor.hpp"

namespace sth {

/// Convolution geometry. Temporal stride is always 1 and the temporal axis
/// uses "same" padding, so T' == T.
struct ConvSpec {
  int kernel_t = 1, kernel_h = 1, kernel_w = 1;
  int stride_h = 1, stride_w = 1;
  int pad_t = 0, pad_h = 0, pad_w = 0;
  int dilation_t = 1, dilation_h = 1, dilation_w = 1;

  /// Zero "same" padding on every axis (exact for stride 1).
  static ConvSpec same(int kt, int kh, int kw, int stride = 1, int dil_t = 1, int dil_h = 1, int dil_w = 1) {
    ConvSpec s;
    s.kernel_t = kt;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.stride_h = s.stride_w = stride;
    s.dilation_t = dil_t;
    s.dilation_h = dil_h;
    s.dilation_w = dil_w;
    s.pad_t = dil_t * (kt - 1) / 2;
    s.pad_h = dil_h * (kh - 1) / 2;
    s.pad_w = dil_w * (kw - 1) / 2;
    return s;
  }

  std::size_t taps() const { return static_cast<std::size_t>(kernel_t) * kernel_h * kernel_w; }
  bool operator==(const ConvSpec&) const = default;
};

/// Resolved sizes of one convolution call.
struct ConvGeometry {
  std::size_t n = 0, c_in = 0, t = 0, h = 0, w = 0;
  std::size_t c_out = 0, t_out = 0, h_out = 0, w_out = 0;

  std::size_t in_plane() const { return t * h * w; }
  std::size_t out_plane() const { return t_out * h_out * w_out; }
};

inline void validate_spec(const ConvSpec& s) {
  auto odd_positive = [](int k, const char* axis) {
    require(k >= 1, ErrorKind::Argument, [&] { return std::string(std::string("kernel_") + axis + " must be >= 1"); });
    require(k % 2 == 1, ErrorKind::Argument, [&] { return std::string(std::string("even kernel_") + axis + " is not supported"); });
  };
  odd_positive(s.kernel_t, "t");
  odd_positive(s.kernel_h, "h");
  odd_positive(s.kernel_w, "w");
  require(s.stride_h >= 1 && s.stride_w >= 1, ErrorKind::Argument, [&] { return std::string("strides must be >= 1"); });
  require(s.pad_t >= 0 && s.pad_h >= 0 && s.pad_w >= 0, ErrorKind::Argument, "padding must be >= 0");
  require(s.dilation_t >= 1 && s.dilation_h >= 1 && s.dilation_w >= 1, ErrorKind::Argument,
          "dilation must be >= 1");
  require(s.pad_t == s.dilation_t * (s.kernel_t - 1) / 2, ErrorKind::Argument,
          "temporal padding must be dilation_t*(kernel_t-1)/2 so that T is preserved");
}

inline std::size_t conv_out_extent(std::size_t in, int k, int stride, int pad, int dil, const char* axis) {
  const long long padded = static_cast<long long>(in) + 2LL * pad;
  const long long extent = static_cast<long long>(dil) * (k - 1) + 1;
  require(extent <= padded, ErrorKind::Argument, [&] { return std::string(std::string("effective kernel extent exceeds padded input along ") + axis); });
  return static_cast<std::size_t>((padded - extent) / stride + 1);
}

/// Checks input/weight/spec consistency and returns the geometry.
inline ConvGeometry conv_geometry(const Shape& input, const Shape& weight, const ConvSpec& spec) {
  validate_spec(spec);
  require(input.rank() == 5, ErrorKind::ShapeMismatch, [&] { return std::string("conv input must be (N,C,T,H,W), got " + input.str()); });
  require(weight.rank() == 5, ErrorKind::ShapeMismatch, [&] { return std::string("conv weight must be (Co,Ci,Kt,Kh,Kw), got " + weight.str()); });
  require(weight[1] == input[1], ErrorKind::ShapeMismatch, [&] { return std::string("weight input channels " + std::to_string(weight[1]) + " != input channels " + std::to_string(input[1])); });
  require(weight[2] == static_cast<std::size_t>(spec.kernel_t) && weight[3] == static_cast<std::size_t>(spec.kernel_h) &&
              weight[4] == static_cast<std::size_t>(spec.kernel_w),
          ErrorKind::ShapeMismatch, [&] { return std::string("weight kernel dims " + weight.str() + " disagree with the spec"); });
  ConvGeometry g;
  g.n = input[0];
  g.c_in = input[1];
  g.t = input[2];
  g.h = input[3];
  g.w = input[4];
  g.c_out = weight[0];
  g.t_out = conv_out_extent(g.t, spec.kernel_t, 1, spec.pad_t, spec.dilation_t, "time");
  g.h_out = conv_out_extent(g.h, spec.kernel_h, spec.stride_h, spec.pad_h, spec.dilation_h, "height");
  g.w_out = conv_out_extent(g.w, spec.kernel_w, spec.stride_w, spec.pad_w, spec.dilation_w, "width");
  return g;
}

inline Shape output_shape(const ConvGeometry& g) { return make_shape({g.n, g.c_out, g.t_out, g.h_out, g.w_out}); }

/// Direct evaluation of O[m,t,h,w] = sum_{c,k,i,j} W[m,c,k,i,j] I[c, t+k, h+i, w+j]
/// (cross-correlation, zero padding, no bias). When `macs` is given it receives
/// one count per visited tap, padded taps included.
inline Tensor conv3d_naive(const Tensor& input, const Tensor& w, const ConvSpec& spec,
                           std::uint64_t* macs = nullptr) {
  const ConvGeometry g = conv_geometry(input.shape(), w.shape(), spec);
  Tensor out(output_shape(g));
  std::vector<std::uint64_t> counts(g.n * g.c_out, 0);
  const long long T = g.t, H = g.h, W = g.w;

  parallel_for(g.n * g.c_out, [&](std::size_t job) {
    const std::size_t n = job / g.c_out, m = job % g.c_out;
    std::uint64_t local = 0;
    for (std::size_t t = 0; t < g.t_out; ++t)
      for (std::size_t h = 0; h < g.h_out; ++h)
        for (std::size_t x = 0; x < g.w_out; ++x) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.c_in; ++c)
            for (int k = 0; k < spec.kernel_t; ++k) {
              const long long ti = static_cast<long long>(t) - spec.pad_t + k * spec.dilation_t;
              for (int i = 0; i < spec.kernel_h; ++i) {
                const long long hi = static_cast<long long>(h) * spec.stride_h - spec.pad_h + i * spec.dilation_h;
                for (int j = 0; j < spec.kernel_w; ++j) {
                  ++local;
                  const long long wi = static_cast<long long>(x) * spec.stride_w - spec.pad_w + j * spec.dilation_w;
                  if (ti < 0 || ti >= T || hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                  acc += w.at(m, c, k, i, j) * input.at(n, c, ti, hi, wi);
                }
              }
            }
          out.at(n, m, t, h, x) = acc;
        }
    counts[job] = local;
  });
  if (macs) *macs += std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  return out;
}

struct ConvGrads {
  Tensor input;
  Tensor weight;
};

/// Exact adjoint of conv3d_naive, written as direct loops.
inline ConvGrads conv3d_backward(const Tensor& input, const Tensor& w, const ConvSpec& spec, const Tensor& grad_out) {
  const ConvGeometry g = conv_geometry(input.shape(), w.shape(), spec);
  require(grad_out.shape() == output_shape(g), ErrorKind::ShapeMismatch, [&] { return std::string("grad_out shape " + grad_out.shape().str() + " != forward output " + output_shape(g).str()); });
  ConvGrads grads{Tensor(input.shape()), Tensor(w.shape())};
  const long long T = g.t, H = g.h, W = g.w;

  // visits every (output position, tap) pair that lands inside the input
  auto for_each_tap = [&](std::size_t n, std::size_t m, auto&& body) {
    for (std::size_t t = 0; t < g.t_out; ++t)
      for (std::size_t h = 0; h < g.h_out; ++h)
        for (std::size_t x = 0; x < g.w_out; ++x) {
          const double go = grad_out.at(n, m, t, h, x);
          if (go == 0.0) continue;
          for (int k = 0; k < spec.kernel_t; ++k) {
            const long long ti = static_cast<long long>(t) - spec.pad_t + k * spec.dilation_t;
            if (ti < 0 || ti >= T) continue;
            for (int i = 0; i < spec.kernel_h; ++i) {
              const long long hi = static_cast<long long>(h) * spec.stride_h - spec.pad_h + i * spec.dilation_h;
              if (hi < 0 || hi >= H) continue;
              for (int j = 0; j < spec.kernel_w; ++j) {
                const long long wi = static_cast<long long>(x) * spec.stride_w - spec.pad_w + j * spec.dilation_w;
                if (wi < 0 || wi >= W) continue;
                body(go, k, i, j, ti, hi, wi);
              }
            }
          }
        }
  };

  parallel_for(g.c_out, [&](std::size_t m) {
    for (std::size_t n = 0; n < g.n; ++n)
      for_each_tap(n, m, [&](double go, int k, int i, int j, long long ti, long long hi, long long wi) {
        for (std::size_t c = 0; c < g.c_in; ++c) grads.weight.at(m, c, k, i, j) += go * input.at(n, c, ti, hi, wi);
      });
  });
  parallel_for(g.n, [&](std::size_t n) {
    for (std::size_t m = 0; m < g.c_out; ++m)
      for_each_tap(n, m, [&](double go, int k, int i, int j, long long ti, long long hi, long long wi) {
        for (std::size_t c = 0; c < g.c_in; ++c) grads.input.at(n, c, ti, hi, wi) += go * w.at(m, c, k, i, j);
      });
  });
  return grads;
}

// ---------------------------------------------------------------------------
// im2col + GEMM fast path. Checked against conv3d_naive in the test suite.
// ---------------------------------------------------------------------------

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

/// Output positions [lo, hi) along one axis whose tap lands inside the input.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, int stride, int pad, int offset) {
  const long long shift = static_cast<long long>(offset) - pad;  // input index = x*stride + shift
  long long lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  long long hi = static_cast<long long>(in) - shift <= 0 ? 0 : (static_cast<long long>(in) - shift - 1) / stride + 1;
  lo = std::min<long long>(lo, static_cast<long long>(out));
  hi = std::clamp<long long>(hi, lo, static_cast<long long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// A run of output frames [t0, t1) of sample n; the unit of work of the GEMM path.
struct FrameChunk {
  std::size_t n = 0, t0 = 0, t1 = 0;
  std::size_t frames() const { return t1 - t0; }
};

/// Splits the output into chunks whose column matrix (rows x cols) stays near
/// `budget` doubles, so im2col buffers remain cache resident.
inline std::vector<FrameChunk> frame_chunks(const ConvGeometry& g, std::size_t rows, std::size_t budget = 1 << 16) {
  const std::size_t frame = g.h_out * g.w_out;
  const std::size_t per = std::clamp<std::size_t>(budget / std::max<std::size_t>(1, rows * frame), 1, g.t_out);
  std::vector<FrameChunk> out;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t t = 0; t < g.t_out; t += per) out.push_back({n, t, std::min(g.t_out, t + per)});
  return out;
}

/// Column matrix of one chunk: row r = (c - c_begin)*taps + tap, column
/// (t - t0)*H'*W' + h*W' + w. Every entry is written.
inline void im2col(const Tensor& input, const ConvSpec& spec, const ConvGeometry& g, std::size_t c_begin,
                   std::size_t c_end, const FrameChunk& ch, RowMat& col) {
  const std::size_t taps = spec.taps(), frame = g.h_out * g.w_out, cols = ch.frames() * frame;
  col.resize(static_cast<Eigen::Index>((c_end - c_begin) * taps), static_cast<Eigen::Index>(cols));
  const long long T = g.t, H = g.h, W = g.w;
  const std::size_t sw = static_cast<std::size_t>(spec.stride_w);
  for (std::size_t c = c_begin; c < c_end; ++c) {
    const double* src = input.ptr() + (ch.n * g.c_in + c) * g.in_plane();
    for (int k = 0; k < spec.kernel_t; ++k)
      for (int i = 0; i < spec.kernel_h; ++i) {
        const auto hr = valid_range(g.h_out, g.h, spec.stride_h, spec.pad_h, i * spec.dilation_h);
        for (int j = 0; j < spec.kernel_w; ++j) {
          const auto xr = valid_range(g.w_out, g.w, spec.stride_w, spec.pad_w, j * spec.dilation_w);
          const std::size_t r =
              (c - c_begin) * taps + (static_cast<std::size_t>(k) * spec.kernel_h + i) * spec.kernel_w + j;
          double* dst = col.data() + r * cols;
          for (std::size_t t = ch.t0; t < ch.t1; ++t) {
            double* out = dst + (t - ch.t0) * frame;
            const long long ti = static_cast<long long>(t) - spec.pad_t + static_cast<long long>(k) * spec.dilation_t;
            if (ti < 0 || ti >= T || xr.first >= xr.second || hr.first >= hr.second) {
              std::fill_n(out, frame, 0.0);
              continue;
            }
            std::fill_n(out, hr.first * g.w_out, 0.0);
            const long long wi0 = static_cast<long long>(xr.first) * spec.stride_w - spec.pad_w + j * spec.dilation_w;
            const std::size_t count = xr.second - xr.first;
            for (std::size_t h = hr.first; h < hr.second; ++h) {
              const long long hi = static_cast<long long>(h) * spec.stride_h - spec.pad_h + i * spec.dilation_h;
              const double* s_row = src + (ti * H + hi) * W + wi0;
              double* d_row = out + h * g.w_out;
              for (std::size_t x = 0; x < xr.first; ++x) d_row[x] = 0.0;
              if (sw == 1) {
                for (std::size_t x = 0; x < count; ++x) d_row[xr.first + x] = s_row[x];
              } else {
                for (std::size_t x = 0; x < count; ++x) d_row[xr.first + x] = s_row[x * sw];
              }
              for (std::size_t x = xr.second; x < g.w_out; ++x) d_row[x] = 0.0;
            }
            std::fill_n(out + hr.second * g.w_out, (g.h_out - hr.second) * g.w_out, 0.0);
          }
        }
      }
  }
}

/// Scatter-adds a chunk's column gradient back into `grad_input`.
inline void col2im(const RowMat& col, const ConvSpec& spec, const ConvGeometry& g, std::size_t c_begin,
                   std::size_t c_end, const FrameChunk& ch, Tensor& grad_input) {
  const std::size_t taps = spec.taps(), frame = g.h_out * g.w_out, cols = ch.frames() * frame;
  const long long T = g.t, H = g.h, W = g.w;
  const std::size_t sw = static_cast<std::size_t>(spec.stride_w);
  for (std::size_t c = c_begin; c < c_end; ++c) {
    double* dst = grad_input.ptr() + (ch.n * g.c_in + c) * g.in_plane();
    for (int k = 0; k < spec.kernel_t; ++k)
      for (int i = 0; i < spec.kernel_h; ++i) {
        const auto hr = valid_range(g.h_out, g.h, spec.stride_h, spec.pad_h, i * spec.dilation_h);
        for (int j = 0; j < spec.kernel_w; ++j) {
          const auto xr = valid_range(g.w_out, g.w, spec.stride_w, spec.pad_w, j * spec.dilation_w);
          if (xr.first >= xr.second) continue;
          const std::size_t r =
              (c - c_begin) * taps + (static_cast<std::size_t>(k) * spec.kernel_h + i) * spec.kernel_w + j;
          const double* src = col.data() + r * cols;
          const long long wi0 = static_cast<long long>(xr.first) * spec.stride_w - spec.pad_w + j * spec.dilation_w;
          const std::size_t count = xr.second - xr.first;
          for (std::size_t t = ch.t0; t < ch.t1; ++t) {
            const long long ti = static_cast<long long>(t) - spec.pad_t + static_cast<long long>(k) * spec.dilation_t;
            if (ti < 0 || ti >= T) continue;
            const double* in = src + (t - ch.t0) * frame;
            for (std::size_t h = hr.first; h < hr.second; ++h) {
              const long long hi = static_cast<long long>(h) * spec.stride_h - spec.pad_h + i * spec.dilation_h;
              double* d_row = dst + (ti * H + hi) * W + wi0;
              const double* s_row = in + h * g.w_out + xr.first;
              for (std::size_t x = 0; x < count; ++x) d_row[x * sw] += s_row[x];
            }
          }
        }
      }
  }
}

/// (rows x cols) view of the output/gradient tensor for one chunk: channel m
/// maps to row m, with rows `plane` apart.
inline StridedMap chunk_view(Tensor& t, const ConvGeometry& g, const FrameChunk& ch, std::size_t c_begin = 0,
                             std::size_t c_count = 0) {
  const std::size_t frame = g.h_out * g.w_out, plane = g.out_plane(), c = c_count ? c_count : g.c_out;
  return StridedMap(t.ptr() + ((ch.n * g.c_out + c_begin) * plane + ch.t0 * frame), static_cast<Eigen::Index>(c),
                    static_cast<Eigen::Index>(ch.frames() * frame), Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
}

inline ConstStridedMap chunk_view(const Tensor& t, const ConvGeometry& g, const FrameChunk& ch, std::size_t c_begin = 0,
                                  std::size_t c_count = 0) {
  const std::size_t frame = g.h_out * g.w_out, plane = g.out_plane(), c = c_count ? c_count : g.c_out;
  return ConstStridedMap(t.ptr() + ((ch.n * g.c_out + c_begin) * plane + ch.t0 * frame), static_cast<Eigen::Index>(c),
                         static_cast<Eigen::Index>(ch.frames() * frame),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
}

inline ConstMatMap weight_matrix(const Tensor& w) {
  const auto rows = static_cast<Eigen::Index>(w.dim(0));
  return ConstMatMap(w.ptr(), rows, static_cast<Eigen::Index>(w.numel() / w.dim(0)));
}

inline MatMap weight_matrix(Tensor& w) {
  const auto rows = static_cast<Eigen::Index>(w.dim(0));
  return MatMap(w.ptr(), rows, static_cast<Eigen::Index>(w.numel() / w.dim(0)));
}

}  // namespace detail

/// GEMM-backed dense convolution with the same semantics as conv3d_naive.
inline Tensor conv3d(const Tensor& input, const Tensor& w, const ConvSpec& spec) {
  const ConvGeometry g = conv_geometry(input.shape(), w.shape(), spec);
  Tensor y(output_shape(g));
  const auto wm = detail::weight_matrix(w);
  detail::RowMat col;
  for (const auto& ch : detail::frame_chunks(g, g.c_in * spec.taps())) {
    detail::im2col(input, spec, g, 0, g.c_in, ch, col);
    detail::chunk_view(y, g, ch).noalias() = wm * col;
  }
  return y;
}

/// GEMM-backed adjoint of conv3d. `need_input=false` skips the input gradient.
inline ConvGrads conv3d_backward_fast(const Tensor& input, const Tensor& w, const ConvSpec& spec,
                                      const Tensor& grad_out, bool need_input = true) {
  const ConvGeometry g = conv_geometry(input.shape(), w.shape(), spec);
  require(grad_out.shape() == output_shape(g), ErrorKind::ShapeMismatch, [&] {
    return "grad_out shape " + grad_out.shape().str() + " != forward output " + output_shape(g).str();
  });
  ConvGrads grads{need_input ? Tensor(input.shape()) : Tensor(), Tensor(w.shape())};
  auto dw = detail::weight_matrix(grads.weight);
  const auto wm = detail::weight_matrix(w);
  detail::RowMat col, dcol;
  for (const auto& ch : detail::frame_chunks(g, g.c_in * spec.taps())) {
    detail::im2col(input, spec, g, 0, g.c_in, ch, col);
    const auto go = detail::chunk_view(grad_out, g, ch);
    dw.noalias() += go * col.transpose();
    if (need_input) {
      dcol.noalias() = wm.transpose() * go;
      detail::col2im(dcol, spec, g, 0, g.c_in, ch, grads.input);
    }
  }
  return grads;
}

/// Per-frame spatial convolution (K_T = 1).
inline Tensor conv2d_spatial(const Tensor& input, const Tensor& w, const ConvSpec& spec) {
  require(spec.kernel_t == 1 && spec.pad_t == 0, ErrorKind::Argument, "conv2d_spatial requires kernel_t=1, pad_t=0");
  return conv3d(input, w, spec);
}

/// Per-pixel temporal convolution (K_H = K_W = 1).
inline Tensor conv1d_temporal(const Tensor& input, const Tensor& w, const ConvSpec& spec) {
  require(spec.kernel_h == 1 && spec.kernel_w == 1 && spec.pad_h == 0 && spec.pad_w == 0, ErrorKind::Argument,
          "conv1d_temporal requires kernel_h=kernel_w=1 and no spatial padding");
  return conv3d(input, w, spec);
}

enum class TwoPlusOneMode { Sequential, Parallel };

inline ConvSpec spatial_part(const ConvSpec& s) {
  ConvSpec out = s;
  out.kernel_t = 1;
  out.pad_t = 0;
  out.dilation_t = 1;
  return out;
}

inline ConvSpec temporal_part(const ConvSpec& s, bool strided) {
  ConvSpec out = s;
  out.kernel_h = out.kernel_w = 1;
  out.pad_h = out.pad_w = 0;
  out.dilation_h = out.dilation_w = 1;
  if (!strided) out.stride_h = out.stride_w = 1;
  return out;
}

/// (2+1)D baseline. `spec` carries both kernel extents: the spatial part uses
/// (1,K_H,K_W), the temporal part (K_T,1,1).
inline Tensor conv2plus1d(const Tensor& input, const Tensor& w_s, const Tensor& w_t, TwoPlusOneMode mode,
                          const ConvSpec& spec) {
  require(w_s.rank() == 5 && w_t.rank() == 5, ErrorKind::ShapeMismatch, "weights must be rank 5");
  if (mode == TwoPlusOneMode::Sequential) {
    require(w_t.dim(0) == w_s.dim(0) && w_t.dim(1) == w_s.dim(0), ErrorKind::ShapeMismatch, [&] { return std::string("sequential (2+1)D needs a C_o -> C_o temporal weight"); });
    return conv1d_temporal(conv2d_spatial(input, w_s, spatial_part(spec)), w_t, temporal_part(spec, false));
  }
  require(w_t.dim(0) == w_s.dim(0) && w_t.dim(1) == w_s.dim(1), ErrorKind::ShapeMismatch, [&] { return std::string("parallel (2+1)D needs a C_i -> C_o temporal weight"); });
  return add(conv2d_spatial(input, w_s, spatial_part(spec)), conv1d_temporal(input, w_t, temporal_part(spec, true)));
}

/// MAC count of a dense conv per the standard formula C_o*C_i*T'*H'*W'*K_T*K_H*K_W (times N).
inline std::uint64_t conv_macs(const ConvGeometry& g, const ConvSpec& spec) {
  return static_cast<std::uint64_t>(g.n) * g.c_out * g.c_in * g.out_plane() * spec.taps();
}

}  // namespace sth
