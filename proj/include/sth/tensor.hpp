#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sth/error.hpp"
#include "sth/rng.hpp"

namespace sth {

/// Ordered list of positive extents. Video tensors use (N, C, T, H, W).
class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<std::int64_t> dims) : Shape(std::vector<std::int64_t>(dims)) {}

  explicit Shape(const std::vector<std::int64_t>& dims) {
    dims_.reserve(dims.size());
    std::size_t count = 1;
    for (auto d : dims) {
      require(d >= 1, ErrorKind::InvalidShape, [&] { return std::string("dimension must be >= 1, got " + std::to_string(d)); });
      const auto ud = static_cast<std::size_t>(d);
      require(count <= std::numeric_limits<std::size_t>::max() / ud, ErrorKind::InvalidShape,
              "element count overflows the index range");
      count *= ud;
      dims_.push_back(ud);
    }
    require(!dims_.empty(), ErrorKind::InvalidShape, "rank must be >= 1");
  }

  explicit Shape(const std::vector<std::size_t>& dims) {
    std::vector<std::int64_t> s(dims.begin(), dims.end());
    *this = Shape(s);
  }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  bool operator==(const Shape& o) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

 private:
  std::vector<std::size_t> dims_;
};

/// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_.numel(), 0.0) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_.numel(), ErrorKind::ShapeMismatch, [&] { return std::string("data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str()); });
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + ids[i];
    return off;
  }

  template <typename... Idx>
  double& at(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  double at(Idx... idx) const {
    return data_[offset(idx...)];
  }

  /// Same data, new shape with equal element count.
  Tensor reshaped(const Shape& s) const {
    require(s.numel() == numel(), ErrorKind::ShapeMismatch, [&] { return std::string("cannot reshape " + shape_.str() + " to " + s.str()); });
    return Tensor(s, data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline Tensor zeros(const Shape& shape) { return Tensor(shape); }

inline Tensor full(const Shape& shape, double v) {
  Tensor t(shape);
  t.fill(v);
  return t;
}

inline Tensor ones(const Shape& shape) { return full(shape, 1.0); }

/// Deterministic U[lo, hi) entries; the same (shape, seed, lo, hi) gives bit-identical output.
inline Tensor random_uniform(const Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  require(lo < hi, ErrorKind::Argument, "random_uniform requires lo < hi");
  Tensor t(shape);
  Rng rng(seed);
  for (auto& v : t.data()) {
    v = rng.uniform(lo, hi);
    // lo + (hi-lo)*u can round up to hi when hi-lo is tiny
    if (v >= hi) v = std::nextafter(hi, lo);
  }
  return t;
}

inline Tensor random_normal(const Shape& shape, std::uint64_t seed, double mean = 0.0, double stddev = 1.0) {
  Tensor t(shape);
  Rng rng(seed);
  for (auto& v : t.data()) v = mean + stddev * rng.normal();
  return t;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch, [&] { return std::string(std::string(op) + ": shapes " + a.shape().str() + " and " + b.shape().str() + " differ"); });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

/// In-place a += b.
inline void add_inplace(Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

inline double dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(const Tensor& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

/// Arithmetic mean over `axes`; the result drops those axes (rank-1 [1] when all are reduced).
inline Tensor reduce_mean(const Tensor& a, const std::set<std::size_t>& axes) {
  const auto& dims = a.shape().dims();
  for (auto ax : axes)
    require(ax < dims.size(), ErrorKind::Argument, [&] { return std::string("axis " + std::to_string(ax) + " out of range for rank " + std::to_string(dims.size())); });

  std::vector<std::size_t> kept;
  std::size_t reduced = 1;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (axes.count(i)) reduced *= dims[i];
    else kept.push_back(dims[i]);
  }
  if (kept.empty()) kept.push_back(1);
  Tensor out{Shape(kept)};

  // walk the input once, mapping each flat index to its output slot
  std::vector<std::size_t> idx(dims.size(), 0);
  for (std::size_t flat = 0; flat < a.numel(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < dims.size(); ++i)
      if (!axes.count(i)) o = o * dims[i] + idx[i];
    out[o] += a[flat];
    for (std::size_t i = dims.size(); i-- > 0;) {
      if (++idx[i] < dims[i]) break;
      idx[i] = 0;
    }
  }
  const double inv = 1.0 / static_cast<double>(reduced);
  for (auto& v : out.data()) v *= inv;
  return out;
}

/// (M x K) . (K x N) with 64-bit accumulation in k order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::ShapeMismatch, "matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::ShapeMismatch, [&] { return std::string("matmul inner dims differ: " + a.shape().str() + " x " + b.shape().str()); });
  Tensor out(Shape{static_cast<std::int64_t>(m), static_cast<std::int64_t>(n)});
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      for (std::size_t j = 0; j < n; ++j) po[i * n + j] += av * pb[kk * n + j];
    }
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  require(a.rank() == 2, ErrorKind::ShapeMismatch, "transpose2d expects rank 2");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{static_cast<std::int64_t>(n), static_cast<std::int64_t>(m)});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

inline Shape make_shape(std::initializer_list<std::size_t> dims) {
  return Shape(std::vector<std::size_t>(dims));
}

}  // namespace sth
