#pragma once

// Differentiable operations. Every op takes the Tape it records on; when no
// input requires a gradient (or the tape is not recording) nothing is
// recorded and the output is a plain value.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "nlxct/tensor.hpp"

namespace nlxct {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// C = A·B for A[m×k], B[k×n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const bool tracked = detail::tracks(tape, {&a, &b});
  Tensor out = detail::make_output(tape, {m, n}, tracked);
  detail::MatMap(out.data().data(), m, n).noalias() =
      detail::ConstMatMap(a.data().data(), m, k) * detail::ConstMatMap(b.data().data(), k, n);
  if (tracked) {
    tape.record([sa = a.handle(), sb = b.handle(), so = out.handle(), m, k, n] {
      if (so->grad.empty()) return;
      detail::ConstMatMap dc(so->grad.data(), m, n);
      if (double* ga = detail::grad_target(sa))
        detail::MatMap(ga, m, k).noalias() += dc * detail::ConstMatMap(sb->value.data(), k, n).transpose();
      if (double* gb = detail::grad_target(sb))
        detail::MatMap(gb, k, n).noalias() += detail::ConstMatMap(sa->value.data(), m, k).transpose() * dc;
    });
  }
  return out;
}

/// y = x·Wᵀ + b over the trailing dimension of x; W is [out×in], b is [out] or undefined.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  detail::require_rank(weight, 2, "linear");
  if (x.rank() < 1) throw DimensionError("linear: input must have rank >= 1");
  const std::size_t out_dim = weight.dim(0), in_dim = weight.dim(1);
  if (x.shape().back() != in_dim) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.numel() != out_dim || bias.rank() != 1)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for output width " + std::to_string(out_dim));
  }
  const std::size_t rows = x.numel() / in_dim;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  const bool tracked = detail::tracks(tape, {&x, &weight, &bias});
  Tensor out = detail::make_output(tape, std::move(out_shape), tracked);
  detail::MatMap y(out.data().data(), rows, out_dim);
  y.noalias() = detail::ConstMatMap(x.data().data(), rows, in_dim) *
                detail::ConstMatMap(weight.data().data(), out_dim, in_dim).transpose();
  if (bias.defined()) y.rowwise() += detail::ConstVecMap(bias.data().data(), out_dim).transpose();
  if (tracked) {
    tape.record([sx = x.handle(), sw = weight.handle(), sb = bias.handle(), so = out.handle(), rows, in_dim, out_dim] {
      if (so->grad.empty()) return;
      detail::ConstMatMap dy(so->grad.data(), rows, out_dim);
      if (double* gx = detail::grad_target(sx))
        detail::MatMap(gx, rows, in_dim).noalias() += dy * detail::ConstMatMap(sw->value.data(), out_dim, in_dim);
      if (double* gw = detail::grad_target(sw))
        detail::MatMap(gw, out_dim, in_dim).noalias() += dy.transpose() * detail::ConstMatMap(sx->value.data(), rows, in_dim);
      if (double* gb = detail::grad_target(sb)) detail::VecMap(gb, out_dim) += dy.colwise().sum().transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Broadcasting is limited to equal shapes or a one-element operand.
template <class Fwd, class DA, class DB>
Tensor binary(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const bool tracked = tracks(tape, {&a, &b});
  Tensor out = make_output(tape, shape, tracked);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  const std::size_t sa = a_scalar ? 0 : 1, sb = b_scalar ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i * sa], pb[i * sb]);
  if (tracked) {
    tape.record([sta = a.handle(), stb = b.handle(), so = out.handle(), n, sa, sb, da, db] {
      if (so->grad.empty()) return;
      const double* g = so->grad.data();
      const double* va = sta->value.data();
      const double* vb = stb->value.data();
      if (double* ga = grad_target(sta))
        for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] * da(va[i * sa], vb[i * sb]);
      if (double* gb = grad_target(stb))
        for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i] * db(va[i * sa], vb[i * sb]);
    });
  }
  return out;
}

template <class Fwd, class Deriv>
Tensor unary(Tape& tape, const Tensor& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  const bool tracked = tracks(tape, {&x});
  Tensor out = make_output(tape, x.shape(), tracked);
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (tracked) {
    tape.record([sx = x.handle(), so = out.handle(), n, deriv] {
      if (so->grad.empty()) return;
      double* gx = grad_target(sx);
      if (!gx) return;
      const double* g = so->grad.data();
      const double* vx = sx->value.data();
      const double* vy = so->value.data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * deriv(vx[i], vy[i]);
    });
  }
  return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  return detail::unary(
      tape, x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Tanh approximation of GELU.
inline double gelu_value(double v) {
  return 0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluK * v * v * v)));
}

inline double gelu_derivative(double v) {
  const double t = std::tanh(detail::kGeluC * (v + detail::kGeluK * v * v * v));
  return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluK * v * v);
}

inline Tensor gelu(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, x, [](double v) { return gelu_value(v); }, [](double v, double) { return gelu_derivative(v); });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, x, [](double v) { return sigmoid_value(v); }, [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const bool tracked = detail::tracks(tape, {&x});
  Tensor out = detail::make_output(tape, std::move(shape), tracked);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (tracked) {
    tape.record([sx = x.handle(), so = out.handle()] {
      if (so->grad.empty()) return;
      if (double* gx = detail::grad_target(sx))
        for (std::size_t i = 0; i < so->grad.size(); ++i) gx[i] += so->grad[i];
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  const bool tracked = detail::tracks(tape, {&x});
  Tensor out = detail::make_output(tape, {}, tracked);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out[0] = acc;
  if (tracked) {
    tape.record([sx = x.handle(), so = out.handle()] {
      if (so->grad.empty()) return;
      const double g = so->grad[0];
      if (double* gx = detail::grad_target(sx))
        for (std::size_t i = 0; i < sx->value.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) { return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel())); }

/// Feature map [B×D×H×W] to token sequence [B×(H·W)×D], row-major over the grid.
inline Tensor patchify(Tape& tape, const Tensor& z) {
  detail::require_rank(z, 4, "patchify");
  const std::size_t B = z.dim(0), D = z.dim(1), N = z.dim(2) * z.dim(3);
  const bool tracked = detail::tracks(tape, {&z});
  Tensor out = detail::make_output(tape, {B, N, D}, tracked);
  const double* src = z.data().data();
  double* dst = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t n = 0; n < N; ++n) dst[(b * N + n) * D + d] = src[(b * D + d) * N + n];
  if (tracked) {
    tape.record([sz = z.handle(), so = out.handle(), B, D, N] {
      if (so->grad.empty()) return;
      double* gz = detail::grad_target(sz);
      if (!gz) return;
      const double* g = so->grad.data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t n = 0; n < N; ++n) gz[(b * D + d) * N + n] += g[(b * N + n) * D + d];
    });
  }
  return out;
}

/// Inverse of patchify: tokens [B×N×D] back to [B×D×H×W]; requires N == H·W.
inline Tensor unpatchify(Tape& tape, const Tensor& tokens, std::size_t h, std::size_t w) {
  detail::require_rank(tokens, 3, "unpatchify");
  const std::size_t B = tokens.dim(0), N = tokens.dim(1), D = tokens.dim(2);
  if (N != h * w) {
    throw DimensionError("unpatchify: " + std::to_string(N) + " tokens cannot form a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  const bool tracked = detail::tracks(tape, {&tokens});
  Tensor out = detail::make_output(tape, {B, D, h, w}, tracked);
  const double* src = tokens.data().data();
  double* dst = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) dst[(b * D + d) * N + n] = src[(b * N + n) * D + d];
  if (tracked) {
    tape.record([st = tokens.handle(), so = out.handle(), B, D, N] {
      if (so->grad.empty()) return;
      double* gt = detail::grad_target(st);
      if (!gt) return;
      const double* g = so->grad.data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t d = 0; d < D; ++d) gt[(b * N + n) * D + d] += g[(b * D + d) * N + n];
    });
  }
  return out;
}

/// Mean over the token axis: [B×N×D] -> [B×D].
inline Tensor mean_tokens(Tape& tape, const Tensor& tokens) {
  detail::require_rank(tokens, 3, "mean_tokens");
  const std::size_t B = tokens.dim(0), N = tokens.dim(1), D = tokens.dim(2);
  const bool tracked = detail::tracks(tape, {&tokens});
  Tensor out = detail::make_output(tape, {B, D}, tracked);
  const double inv = 1.0 / static_cast<double>(N);
  const double* src = tokens.data().data();
  double* dst = out.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) dst[b * D + d] += src[(b * N + n) * D + d];
    for (std::size_t d = 0; d < D; ++d) dst[b * D + d] *= inv;
  }
  if (tracked) {
    tape.record([st = tokens.handle(), so = out.handle(), B, N, D, inv] {
      if (so->grad.empty()) return;
      double* gt = detail::grad_target(st);
      if (!gt) return;
      const double* g = so->grad.data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t d = 0; d < D; ++d) gt[(b * N + n) * D + d] += g[b * D + d] * inv;
    });
  }
  return out;
}

/// tokens[b,n,d] * gate[b,d], the gate shared across the token axis.
inline Tensor scale_tokens(Tape& tape, const Tensor& tokens, const Tensor& gate) {
  detail::require_rank(tokens, 3, "scale_tokens");
  detail::require_rank(gate, 2, "scale_tokens");
  const std::size_t B = tokens.dim(0), N = tokens.dim(1), D = tokens.dim(2);
  if (gate.dim(0) != B || gate.dim(1) != D) {
    throw DimensionError("scale_tokens: gate " + shape_str(gate.shape()) + " for tokens " + shape_str(tokens.shape()));
  }
  const bool tracked = detail::tracks(tape, {&tokens, &gate});
  Tensor out = detail::make_output(tape, tokens.shape(), tracked);
  const double* t = tokens.data().data();
  const double* g = gate.data().data();
  double* o = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) o[(b * N + n) * D + d] = t[(b * N + n) * D + d] * g[b * D + d];
  if (tracked) {
    tape.record([st = tokens.handle(), sg = gate.handle(), so = out.handle(), B, N, D] {
      if (so->grad.empty()) return;
      const double* go = so->grad.data();
      double* gt = detail::grad_target(st);
      double* gg = detail::grad_target(sg);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t d = 0; d < D; ++d) {
            const std::size_t i = (b * N + n) * D + d;
            if (gt) gt[i] += go[i] * sg->value[b * D + d];
            if (gg) gg[b * D + d] += go[i] * st->value[i];
          }
    });
  }
  return out;
}

/// Tokens carrying p×p pixel patches [B×N×p²] arranged into an image [B×1×(gh·p)×(gw·p)].
inline Tensor tokens_to_image(Tape& tape, const Tensor& tokens, std::size_t grid_h, std::size_t grid_w, std::size_t patch) {
  detail::require_rank(tokens, 3, "tokens_to_image");
  const std::size_t B = tokens.dim(0), N = tokens.dim(1), P = tokens.dim(2);
  if (N != grid_h * grid_w || P != patch * patch) {
    throw DimensionError("tokens_to_image: tokens " + shape_str(tokens.shape()) + " do not tile a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid of " + std::to_string(patch) +
                         "px patches");
  }
  const std::size_t H = grid_h * patch, W = grid_w * patch;
  const bool tracked = detail::tracks(tape, {&tokens});
  Tensor out = detail::make_output(tape, {B, 1, H, W}, tracked);
  auto index = [=](std::size_t b, std::size_t n, std::size_t k) {
    const std::size_t gy = n / grid_w, gx = n % grid_w, py = k / patch, px = k % patch;
    return (b * H + gy * patch + py) * W + gx * patch + px;
  };
  const double* src = tokens.data().data();
  double* dst = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < P; ++k) dst[index(b, n, k)] = src[(b * N + n) * P + k];
  if (tracked) {
    tape.record([st = tokens.handle(), so = out.handle(), B, N, P, index] {
      if (so->grad.empty()) return;
      double* gt = detail::grad_target(st);
      if (!gt) return;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < P; ++k) gt[(b * N + n) * P + k] += so->grad[index(b, n, k)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t C, H, W, O, kh, kw, Ho, Wo, stride, pad, groups, cg, og;
  std::size_t col_rows() const { return cg * kh * kw; }
  std::size_t col_cols() const { return Ho * Wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Unrolls channels [c0, c0+cg) of one image into cols[(c·kh·kw) × (Ho·Wo)].
inline void im2col(const double* img, const ConvGeometry& g, std::size_t c0, double* cols) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.cg; ++c) {
    const double* plane = img + (c0 + c) * g.H * g.W;
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * hw;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* r = row + oy * g.Wo;
          if (iy < 0 || iy >= static_cast<long>(g.H)) {
            std::fill(r, r + g.Wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            r[ox] = (ix < 0 || ix >= static_cast<long>(g.W)) ? 0.0 : src[ix];
          }
        }
      }
  }
}

// Scatter-add of cols back into image channels [c0, c0+cg).
inline void col2im(const double* cols, const ConvGeometry& g, std::size_t c0, double* img) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.cg; ++c) {
    double* plane = img + (c0 + c) * g.H * g.W;
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * hw;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.W;
          const double* r = row + oy * g.Wo;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.W)) dst[ix] += r[ox];
          }
        }
      }
  }
}

}  // namespace detail

/// Cross-correlation of x[B×C×H×W] with w[O×(C/groups)×kh×kw]; no kernel flip.
///
/// Each image/group is unrolled into a patch matrix so both passes are matrix
/// products: out = W·cols, dW += dout·colsᵀ, dcols = Wᵀ·dout.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, Conv2dOptions opt = {}) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  if (opt.stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (opt.groups == 0) throw DimensionError("conv2d: groups must be >= 1");
  detail::ConvGeometry g{};
  const std::size_t B = x.dim(0);
  g.C = x.dim(1), g.H = x.dim(2), g.W = x.dim(3);
  g.O = w.dim(0), g.kh = w.dim(2), g.kw = w.dim(3);
  g.stride = opt.stride, g.pad = opt.padding, g.groups = opt.groups;
  if (g.C % g.groups || g.O % g.groups) throw DimensionError("conv2d: channels not divisible by groups");
  g.cg = g.C / g.groups, g.og = g.O / g.groups;
  if (w.dim(1) != g.cg) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1) * g.groups) +
                         " input channels, got " + std::to_string(g.C));
  }
  if (g.kh > g.H + 2 * g.pad || g.kw > g.W + 2 * g.pad) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  }
  g.Ho = conv_output_size(g.H, g.kh, g.stride, g.pad);
  g.Wo = conv_output_size(g.W, g.kw, g.stride, g.pad);

  const bool tracked = detail::tracks(tape, {&x, &w});
  Tensor out = detail::make_output(tape, {B, g.O, g.Ho, g.Wo}, tracked);
  const std::size_t rows = g.col_rows(), cols_n = g.col_cols();
  Buffer cols(g.pointwise() ? 0 : rows * cols_n);
  for (std::size_t b = 0; b < B; ++b) {
    const double* img = x.data().data() + b * g.C * g.H * g.W;
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      const double* col_ptr = img + gi * g.cg * g.H * g.W;
      if (!g.pointwise()) {
        detail::im2col(img, g, gi * g.cg, cols.data());
        col_ptr = cols.data();
      }
      detail::MatMap(out.data().data() + (b * g.O + gi * g.og) * cols_n, g.og, cols_n).noalias() =
          detail::ConstMatMap(w.data().data() + gi * g.og * rows, g.og, rows) * detail::ConstMatMap(col_ptr, rows, cols_n);
    }
  }
  if (tracked) {
    tape.record([sx = x.handle(), sw = w.handle(), so = out.handle(), g, B] {
      if (so->grad.empty()) return;
      double* gx = detail::grad_target(sx);
      double* gw = detail::grad_target(sw);
      const std::size_t rows = g.col_rows(), cols_n = g.col_cols();
      Buffer cols(g.pointwise() ? 0 : rows * cols_n);
      Buffer dcols(g.pointwise() ? 0 : rows * cols_n);
      for (std::size_t b = 0; b < B; ++b) {
        const double* img = sx->value.data() + b * g.C * g.H * g.W;
        for (std::size_t gi = 0; gi < g.groups; ++gi) {
          detail::ConstMatMap dout(so->grad.data() + (b * g.O + gi * g.og) * cols_n, g.og, cols_n);
          detail::ConstMatMap wg(sw->value.data() + gi * g.og * rows, g.og, rows);
          if (gw) {
            const double* col_ptr = img + gi * g.cg * g.H * g.W;
            if (!g.pointwise()) {
              detail::im2col(img, g, gi * g.cg, cols.data());
              col_ptr = cols.data();
            }
            detail::MatMap(gw + gi * g.og * rows, g.og, rows).noalias() +=
                dout * detail::ConstMatMap(col_ptr, rows, cols_n).transpose();
          }
          if (gx) {
            double* gimg = gx + b * g.C * g.H * g.W;
            if (g.pointwise()) {
              detail::MatMap(gimg + gi * g.cg * g.H * g.W, rows, cols_n).noalias() += wg.transpose() * dout;
            } else {
              detail::MatMap(dcols.data(), rows, cols_n).noalias() = wg.transpose() * dout;
              detail::col2im(dcols.data(), g, gi * g.cg, gimg);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Layer normalization across one axis with learnable per-feature scale/shift.
///
/// The input is read as [outer × C × inner]: for NCHW feature maps the
/// normalized axis is channels (axis 1), for [B×N×D] tokens it is the last
/// axis. A constant input maps to the shift vector, so zeros map to zeros at
/// the default shift of 0.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& scale_w, const Tensor& shift_w, std::size_t axis,
                         double eps = 1e-5) {
  if (axis >= x.rank()) throw DimensionError("layer_norm: axis out of range for " + shape_str(x.shape()));
  const std::size_t C = x.dim(axis);
  if (scale_w.numel() != C || shift_w.numel() != C) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(C));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const bool tracked = detail::tracks(tape, {&x, &scale_w, &shift_w});
  Tensor out = detail::make_output(tape, x.shape(), tracked);
  const std::size_t groups = outer * inner;
  std::vector<double> xhat(tracked ? x.numel() : 0), inv_std(tracked ? groups : 0);
  const double* px = x.data().data();
  const double* ga = scale_w.data().data();
  const double* be = shift_w.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * C * inner + i;
      double mu = 0.0;
      for (std::size_t c = 0; c < C; ++c) mu += px[base + c * inner];
      mu /= static_cast<double>(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double d = px[base + c * inner] - mu;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const double is = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < C; ++c) {
        const double xh = (px[base + c * inner] - mu) * is;
        po[base + c * inner] = xh * ga[c] + be[c];
        if (tracked) xhat[base + c * inner] = xh;
      }
      if (tracked) inv_std[o * inner + i] = is;
    }
  if (tracked) {
    tape.record([sx = x.handle(), sg = scale_w.handle(), sb = shift_w.handle(), so = out.handle(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std), outer, inner, C] {
      if (so->grad.empty()) return;
      const double* dy = so->grad.data();
      double* gx = detail::grad_target(sx);
      double* gg = detail::grad_target(sg);
      double* gb = detail::grad_target(sb);
      const double* gam = sg->value.data();
      const double invC = 1.0 / static_cast<double>(C);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * C * inner + i;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = base + c * inner;
            const double dxh = dy[k] * gam[c];
            m1 += dxh;
            m2 += dxh * xhat[k];
            if (gg) gg[c] += dy[k] * xhat[k];
            if (gb) gb[c] += dy[k];
          }
          if (!gx) continue;
          m1 *= invC;
          m2 *= invC;
          const double is = inv_std[o * inner + i];
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = base + c * inner;
            gx[k] += is * (dy[k] * gam[c] - m1 - xhat[k] * m2);
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean softmax cross-entropy; with class weights the per-sample terms are
/// weighted by w[y_i] and normalized by the batch's summed weight.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels,
                                    std::optional<std::span<const double>> class_weights = std::nullopt) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) throw DimensionError("softmax_cross_entropy: label count does not match batch");
  if (class_weights) {
    if (class_weights->size() != C) throw DimensionError("softmax_cross_entropy: class weight count != classes");
    for (double wv : *class_weights)
      if (!(wv > 0.0)) throw ContractError("softmax_cross_entropy: class weights must be strictly positive");
  }
  std::vector<double> prob(B * C), sample_w(B, 1.0);
  double total_w = 0.0, loss = 0.0;
  const double* z = logits.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    }
    const double* row = z + b * C;
    const double mx = *std::max_element(row, row + C);
    double se = 0.0;
    for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = std::exp(row[c] - lse);
    if (class_weights) sample_w[b] = (*class_weights)[static_cast<std::size_t>(y)];
    total_w += sample_w[b];
    loss += sample_w[b] * (lse - row[y]);
  }
  loss /= total_w;
  const bool tracked = detail::tracks(tape, {&logits});
  Tensor out = detail::make_output(tape, {}, tracked);
  out[0] = loss;
  if (tracked) {
    std::vector<int> ys(labels.begin(), labels.end());
    tape.record([sl = logits.handle(), so = out.handle(), prob = std::move(prob), sample_w = std::move(sample_w),
                 ys = std::move(ys), total_w, B, C] {
      if (so->grad.empty()) return;
      double* gl = detail::grad_target(sl);
      if (!gl) return;
      const double g = so->grad[0];
      for (std::size_t b = 0; b < B; ++b) {
        const double f = g * sample_w[b] / total_w;
        for (std::size_t c = 0; c < C; ++c)
          gl[b * C + c] += f * (prob[b * C + c] - (static_cast<int>(c) == ys[b] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

}  // namespace nlxct
