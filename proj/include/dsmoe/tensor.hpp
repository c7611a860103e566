#pragma once

// Dense row-major float64 tensor plus the forward/backward kernels every
// layer builds on. There is no autograd tape: each composite layer pairs the
// forward ops below with their explicit *_backward counterparts, which keeps
// the difference between masked and full gradient flow a first-class,
// testable thing.
//
// Training and gradient checking run in float64; float32 exists only as the
// checkpoint storage format (see checkpoint.hpp).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsmoe/common.hpp"

namespace dsmoe {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<double> vals) {
    return Tensor(std::move(shape), std::vector<double>(vals));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D accessor; rows are contiguous.
  double& at(int64_t i, int64_t j) {
    return data_[static_cast<size_t>(i * shape_.back() + j)];
  }
  double at(int64_t i, int64_t j) const {
    return data_[static_cast<size_t>(i * shape_.back() + j)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: rank-0 shape not supported");
    for (int64_t d : shape_)
      if (d <= 0)
        throw ShapeError("tensor: non-positive dimension in " +
                         shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

// NaN/Inf detection is an explicit check, never silent propagation.
inline void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite())
    throw NumericError(std::string("non-finite value in ") + what);
}

// ---- raw GEMM kernels -------------------------------------------------------
// Plain loops over contiguous rows; `acc` selects accumulate-vs-overwrite.

// c[m,n] = a[m,k] * b[k,n]
inline void gemm(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n, bool acc = false) {
  if (!acc) std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,n] = a[m,k] * b[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, int64_t m,
                    int64_t k, int64_t n, bool acc = false) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

// c[k,n] = a[m,k]^T * b[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, int64_t m,
                    int64_t k, int64_t n, bool acc = false) {
  if (!acc) std::fill(c, c + k * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c + p * n;
      for (int64_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

// ---- matmul -----------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  Tensor c({a.dim(0), b.dim(1)});
  gemm(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

// Given out = a*b and d(out), returns (da = g*b^T, db = a^T*g).
inline std::pair<Tensor, Tensor> matmul_backward(const Tensor& a,
                                                 const Tensor& b,
                                                 const Tensor& grad_out) {
  if (grad_out.dim(0) != a.dim(0) || grad_out.dim(1) != b.dim(1))
    throw ShapeError("matmul_backward: gradient shape " +
                     shape_str(grad_out.shape()) + " does not match product " +
                     shape_str({a.dim(0), b.dim(1)}));
  Tensor da(a.shape());
  Tensor db(b.shape());
  gemm_nt(grad_out.data(), b.data(), da.data(), a.dim(0), b.dim(1), a.dim(1));
  gemm_tn(a.data(), grad_out.data(), db.data(), a.dim(0), a.dim(1), b.dim(1));
  return {std::move(da), std::move(db)};
}

// ---- softmax ----------------------------------------------------------------

// One stable softmax row; dst may alias src.
inline void softmax_row(double* dst, const double* src, int64_t n,
                        int64_t stride = 1) {
  double mx = src[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i * stride]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double e = std::exp(src[i * stride] - mx);
    dst[i * stride] = e;
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (int64_t i = 0; i < n; ++i) dst[i * stride] *= inv;
}

// dx = s .* (ds - <ds, s>) for one row.
inline void softmax_row_backward(double* dx, const double* s, const double* ds,
                                 int64_t n, int64_t stride = 1) {
  double dot = 0.0;
  for (int64_t i = 0; i < n; ++i) dot += ds[i * stride] * s[i * stride];
  for (int64_t i = 0; i < n; ++i)
    dx[i * stride] = s[i * stride] * (ds[i * stride] - dot);
}

namespace detail {
inline int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range");
  return axis;
}

template <typename F>
void for_each_lane(const Shape& shape, int axis, F&& fn) {
  const int64_t n = shape[static_cast<size_t>(axis)];
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    inner *= shape[i];
  const int64_t outer = shape_numel(shape) / (n * inner);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) fn(o * n * inner + in, inner, n);
}
}  // namespace detail

inline Tensor softmax(const Tensor& x, int axis = -1) {
  check_finite(x, "softmax input");
  const int ax = detail::normalize_axis(axis, x.rank());
  Tensor out(x.shape());
  detail::for_each_lane(x.shape(), ax,
                        [&](int64_t base, int64_t stride, int64_t n) {
                          softmax_row(out.data() + base, x.data() + base, n,
                                      stride);
                        });
  return out;
}

inline Tensor softmax_backward(const Tensor& s, const Tensor& grad_s,
                               int axis = -1) {
  if (s.shape() != grad_s.shape())
    throw ShapeError("softmax_backward: shapes disagree " +
                     shape_str(s.shape()) + " vs " +
                     shape_str(grad_s.shape()));
  const int ax = detail::normalize_axis(axis, s.rank());
  Tensor dx(s.shape());
  detail::for_each_lane(s.shape(), ax,
                        [&](int64_t base, int64_t stride, int64_t n) {
                          softmax_row_backward(dx.data() + base,
                                               s.data() + base,
                                               grad_s.data() + base, n,
                                               stride);
                        });
  return dx;
}

// ---- GeLU (tanh approximation) ----------------------------------------------

inline double gelu_scalar(double x) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  const double du = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * du;
}

inline Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& grad_y) {
  if (x.shape() != grad_y.shape())
    throw ShapeError("gelu_backward: shapes disagree");
  Tensor dx(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    dx[i] = grad_y[i] * gelu_grad_scalar(x[i]);
  return dx;
}

// ---- layer norm ---------------------------------------------------------------
// Per-vector zero mean / unit variance over the last axis, then affine.

constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias) {
  const int64_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias length must equal last dim " +
                     std::to_string(d));
  Tensor out(x.shape());
  const int64_t rows = x.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = out.data() + r * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_sigma = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int64_t i = 0; i < d; ++i)
      yr[i] = gain[i] * ((xr[i] - mean) * inv_sigma) + bias[i];
  }
  return out;
}

struct LayerNormGrads {
  Tensor x;
  Tensor gain;
  Tensor bias;
};

inline LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gain,
                                          const Tensor& grad_out) {
  const int64_t d = x.shape().back();
  if (grad_out.shape() != x.shape())
    throw ShapeError("layer_norm_backward: gradient shape mismatch");
  LayerNormGrads g{Tensor(x.shape()), Tensor({d}), Tensor({d})};
  const int64_t rows = x.numel() / d;
  std::vector<double> yhat(static_cast<size_t>(d));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    const double* go = grad_out.data() + r * d;
    double* gx = g.x.data() + r * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_sigma = 1.0 / std::sqrt(var + kLayerNormEps);

    double mean_dy = 0.0, mean_dyy = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      yhat[static_cast<size_t>(i)] = (xr[i] - mean) * inv_sigma;
      const double dy = go[i] * gain[i];
      mean_dy += dy;
      mean_dyy += dy * yhat[static_cast<size_t>(i)];
    }
    mean_dy /= static_cast<double>(d);
    mean_dyy /= static_cast<double>(d);
    for (int64_t i = 0; i < d; ++i) {
      const double y = yhat[static_cast<size_t>(i)];
      const double dy = go[i] * gain[i];
      gx[i] = (dy - mean_dy - y * mean_dyy) * inv_sigma;
      g.gain[i] += go[i] * y;
      g.bias[i] += go[i];
    }
  }
  return g;
}

// ---- cross entropy ------------------------------------------------------------
// Mean token negative log likelihood over [t, V] logits.

inline double cross_entropy(const Tensor& logits,
                            const std::vector<int32_t>& targets) {
  const int64_t t = logits.dim(0);
  const int64_t v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(t) + " rows");
  double total = 0.0;
  for (int64_t r = 0; r < t; ++r) {
    const int32_t y = targets[static_cast<size_t>(r)];
    if (y < 0 || y >= v)
      throw IndexError("cross_entropy: target " + std::to_string(y) +
                       " outside [0," + std::to_string(v) + ")");
    const double* zr = logits.data() + r * v;
    double mx = zr[0];
    for (int64_t i = 1; i < v; ++i) mx = std::max(mx, zr[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < v; ++i) sum += std::exp(zr[i] - mx);
    total += -(zr[y] - mx - std::log(sum));
  }
  return total / static_cast<double>(t);
}

// d(loss)/d(logits) = (softmax - onehot) / t
inline Tensor cross_entropy_backward(const Tensor& logits,
                                     const std::vector<int32_t>& targets) {
  const int64_t t = logits.dim(0);
  const int64_t v = logits.dim(1);
  Tensor dz(logits.shape());
  const double inv_t = 1.0 / static_cast<double>(t);
  for (int64_t r = 0; r < t; ++r) {
    softmax_row(dz.data() + r * v, logits.data() + r * v, v);
    for (int64_t i = 0; i < v; ++i) dz.at(r, i) *= inv_t;
    dz.at(r, targets[static_cast<size_t>(r)]) -= inv_t;
  }
  return dz;
}

// ---- finite differences ---------------------------------------------------------
// Central-difference gradient oracle used by the verification suites.

inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
  if (h <= 0.0) throw RangeError("finite_diff_grad: step must be positive");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Relative disagreement between an analytic and a finite-difference value.
// Pairs below `floor` in magnitude are treated as matching: a central
// difference of a ~O(1) loss carries ~1e-11 absolute noise, so nothing
// smaller is certifiable.
inline double grad_rel_err(double analytic, double numeric,
                           double floor = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale <= floor) return 0.0;
  if (std::abs(analytic - numeric) < 1e-10) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

inline double max_grad_rel_err(const Tensor& analytic, const Tensor& numeric,
                               double floor = 1e-8) {
  double worst = 0.0;
  for (int64_t i = 0; i < analytic.numel(); ++i)
    worst = std::max(worst, grad_rel_err(analytic[i], numeric[i], floor));
  return worst;
}

}  // namespace dsmoe
