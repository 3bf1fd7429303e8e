#include "fusenet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace fusenet {

using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Gradient buffer of the i-th input, or nullptr if it does not need one.
double* input_grad(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

const std::vector<double>& input_data(const Node& self, std::size_t i) { return self.inputs[i]->data; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Returns numel(b) after checking b's shape is a suffix of a's.
std::size_t require_suffix(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  if (!ok) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(sb) + " does not broadcast against " +
                         shape_string(sa));
  }
  return b.numel();
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return detail::make_result(x.shape(), std::move(out), op, {x}, [deriv](Node& self) {
    double* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& xd = input_data(self, 0);
    for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += self.grad[i] * deriv(xd[i], self.data[i]);
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t nb = require_suffix(a, b, "add");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i % nb];
  return detail::make_result(a.shape(), std::move(out), "add", {a, b}, [nb](Node& self) {
    const auto& g = self.grad;
    if (double* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t nb = require_suffix(a, b, "sub");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i % nb];
  return detail::make_result(a.shape(), std::move(out), "sub", {a, b}, [nb](Node& self) {
    const auto& g = self.grad;
    if (double* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t nb = require_suffix(a, b, "mul");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i % nb];
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b}, [nb](Node& self) {
    const auto& g = self.grad;
    const auto& av = input_data(self, 0);
    const auto& bv = input_data(self, 1);
    if (double* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % nb];
    }
    if (double* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * av[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] / bd[i];
  return detail::make_result(a.shape(), std::move(out), "div", {a, b}, [](Node& self) {
    const auto& g = self.grad;
    const auto& av = input_data(self, 0);
    const auto& bv = input_data(self, 1);
    if (double* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (double* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

namespace {

// Ties route the gradient to the first operand.
template <class Pick>
Tensor select_binary(const Tensor& a, const Tensor& b, const char* op, Pick first_wins) {
  require_same_shape(a, b, op);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = first_wins(ad[i], bd[i]) ? ad[i] : bd[i];
  return detail::make_result(a.shape(), std::move(out), op, {a, b}, [first_wins](Node& self) {
    const auto& g = self.grad;
    const auto& av = input_data(self, 0);
    const auto& bv = input_data(self, 1);
    double* ga = input_grad(self, 0);
    double* gb = input_grad(self, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (first_wins(av[i], bv[i])) {
        if (ga) ga[i] += g[i];
      } else if (gb) {
        gb[i] += g[i];
      }
    }
  });
}

}  // namespace

Tensor minimum(const Tensor& a, const Tensor& b) {
  return select_binary(a, b, "minimum", [](double x, double y) { return x <= y; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return select_binary(a, b, "maximum", [](double x, double y) { return x >= y; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor atan(const Tensor& x) {
  return unary(
      x, "atan", [](double v) { return std::atan(v); }, [](double v, double) { return 1.0 / (1.0 + v * v); });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  const auto x = logits.data();
  const auto t = targets.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::max(x[i], 0.0) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  return detail::make_result(logits.shape(), std::move(out), "bce_with_logits", {logits, targets}, [](Node& self) {
    double* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& xv = input_data(self, 0);
    const auto& tv = input_data(self, 1);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * (sigmoid_scalar(xv[i]) - tv[i]);
  });
}

Tensor sum(const Tensor& x) {
  const auto xs = x.data();
  double total = 0.0;
  for (double v : xs) total += v;
  return detail::make_result(Shape{}, {total}, "sum", {x}, [](Node& self) {
    double* gx = input_grad(self, 0);
    if (!gx) return;
    const double g = self.grad[0];
    const auto n = self.inputs[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_axis(const Tensor& x, std::ptrdiff_t axis) {
  const auto ax = normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != ax) out_shape.push_back(s[i]);
  }
  const auto xs = x.data();
  std::vector<double> out(outer * inner, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double* row = xs.data() + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += row[j];
    }
  }
  for (auto& v : out) v *= inv;
  return detail::make_result(std::move(out_shape), std::move(out), "mean_axis", {x},
                             [outer, inner, n, inv](Node& self) {
                               double* gx = input_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t k = 0; k < n; ++k) {
                                   double* dst = gx + (o * n + k) * inner;
                                   const double* g = self.grad.data() + o * inner;
                                   for (std::size_t j = 0; j < inner; ++j) dst[j] += g[j] * inv;
                                 }
                               }
                             });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.size() - 2] != k) fail();
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b) fail();
  const Shape& batch = batch_a.empty() ? batch_b : batch_a;
  const std::size_t nbatch = shape_numel(batch);
  const bool shared_b = batch_b.empty();
  const bool shared_a = batch_a.empty() && !batch_b.empty();

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(nbatch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  detail::add_flops(2ULL * nbatch * m * k * n);

  if (shared_b) {
    // Fold the batch into rows: one GEMM.
    MutMap(out.data(), static_cast<Eigen::Index>(nbatch * m), n).noalias() =
        ConstMap(ad, static_cast<Eigen::Index>(nbatch * m), k) * ConstMap(bd, k, n);
  } else {
    for (std::size_t i = 0; i < nbatch; ++i) {
      const double* ai = shared_a ? ad : ad + i * m * k;
      MutMap(out.data() + i * m * n, m, n).noalias() = ConstMap(ai, m, k) * ConstMap(bd + i * k * n, k, n);
    }
  }

  return detail::make_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                             [m, k, n, nbatch, shared_a, shared_b](Node& self) {
                               const double* g = self.grad.data();
                               const double* av = input_data(self, 0).data();
                               const double* bv = input_data(self, 1).data();
                               double* ga = input_grad(self, 0);
                               double* gb = input_grad(self, 1);
                               if (shared_b) {
                                 const auto rows = static_cast<Eigen::Index>(nbatch * m);
                                 ConstMap gm(g, rows, n);
                                 if (ga) MutMap(ga, rows, k).noalias() += gm * ConstMap(bv, k, n).transpose();
                                 if (gb) MutMap(gb, k, n).noalias() += ConstMap(av, rows, k).transpose() * gm;
                                 return;
                               }
                               for (std::size_t i = 0; i < nbatch; ++i) {
                                 ConstMap gm(g + i * m * n, m, n);
                                 const std::size_t a_off = shared_a ? 0 : i * m * k;
                                 if (ga) {
                                   MutMap(ga + a_off, m, k).noalias() +=
                                       gm * ConstMap(bv + i * k * n, k, n).transpose();
                                 }
                                 if (gb) {
                                   MutMap(gb + i * k * n, k, n).noalias() +=
                                       ConstMap(av + a_off, m, k).transpose() * gm;
                                 }
                               }
                             });
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis) {
  const auto ax = normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, xs[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(xs[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  return detail::make_result(s, std::move(out), "softmax", {x}, [outer, inner, n](Node& self) {
    double* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * n * inner + j;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive, got " + std::to_string(eps));
  const std::size_t c = x.dim(-1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: gamma/beta must have shape [" + std::to_string(c) + "], got " +
                         shape_string(gamma.shape()) + " and " + shape_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto xs = x.data();
  const auto gs = gamma.data();
  const auto bs = beta.data();
  std::vector<double> xhat(xs.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * inv;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gs[j] + bs[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        const auto& g = self.grad;
        const auto& gam = input_data(self, 1);
        double* gx = input_grad(self, 0);
        double* ggamma = input_grad(self, 1);
        double* gbeta = input_grad(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = xhat.data() + r * c;
          if (ggamma || gbeta) {
            for (std::size_t j = 0; j < c; ++j) {
              if (ggamma) ggamma[j] += gr[j] * hr[j];
              if (gbeta) gbeta[j] += gr[j];
            }
          }
          if (!gx) continue;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = gr[j] * gam[j];
            mean_d += d;
            mean_dh += d * hr[j];
          }
          mean_d /= static_cast<double>(c);
          mean_dh /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            const double d = gr[j] * gam[j];
            gx[r * c + j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
          }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding, out_h, out_w;

  std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        double* dst = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            dst[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const double* src = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) {
    throw DimensionError("conv2d: input " + shape_string(sx) + " incompatible with weight " + shape_string(sw));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (bias.defined() && bias.shape() != Shape{sw[0]}) {
    throw DimensionError("conv2d: bias shape " + shape_string(bias.shape()) + " does not match " +
                         std::to_string(sw[0]) + " output channels");
  }
  ConvGeometry g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, padding, 0, 0};
  if (sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3]) {
    throw DimensionError("conv2d: kernel " + shape_string(sw) + " larger than padded input " + shape_string(sx) +
                         " (padding " + std::to_string(padding) + ")");
  }
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;

  const std::size_t kdim = g.col_rows();
  const std::size_t cols = g.col_cols();
  const std::size_t in_size = g.channels * g.height * g.width;
  const std::size_t out_size = g.out_channels * cols;
  std::vector<double> out(g.batch * out_size);
  std::vector<double> col_store;
  if (!g.pointwise()) col_store.resize(g.batch * kdim * cols);

  const double* xd = x.data().data();
  ConstMap wmat(weight.data().data(), g.out_channels, kdim);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* col = xd + b * in_size;
    if (!g.pointwise()) {
      double* dst = col_store.data() + b * kdim * cols;
      im2col(xd + b * in_size, g, dst);
      col = dst;
    }
    MutMap omat(out.data() + b * out_size, g.out_channels, cols);
    omat.noalias() = wmat * ConstMap(col, kdim, cols);
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t o = 0; o < g.out_channels; ++o) omat.row(o).array() += bd[o];
    }
  }
  detail::add_flops(2ULL * g.batch * kdim * g.out_channels * cols);

  Shape out_shape{g.batch, g.out_channels, g.out_h, g.out_w};
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return detail::make_result(
      std::move(out_shape), std::move(out), "conv2d", std::move(inputs),
      [g, has_bias, col_store = std::move(col_store)](Node& self) {
        const std::size_t kdim = g.col_rows();
        const std::size_t cols = g.col_cols();
        const std::size_t in_size = g.channels * g.height * g.width;
        const std::size_t out_size = g.out_channels * cols;
        const double* xd = input_data(self, 0).data();
        const double* wd = input_data(self, 1).data();
        double* gx = input_grad(self, 0);
        double* gw = input_grad(self, 1);
        double* gb = has_bias ? input_grad(self, 2) : nullptr;
        std::vector<double> gcol(gx && !g.pointwise() ? kdim * cols : 0);
        for (std::size_t b = 0; b < g.batch; ++b) {
          ConstMap gm(self.grad.data() + b * out_size, g.out_channels, cols);
          const double* col = g.pointwise() ? xd + b * in_size : col_store.data() + b * kdim * cols;
          if (gw) MutMap(gw, g.out_channels, kdim).noalias() += gm * ConstMap(col, kdim, cols).transpose();
          if (gb) {
            for (std::size_t o = 0; o < g.out_channels; ++o) gb[o] += gm.row(o).sum();
          }
          if (gx) {
            if (g.pointwise()) {
              MutMap(gx + b * in_size, kdim, cols).noalias() += ConstMap(wd, g.out_channels, kdim).transpose() * gm;
            } else {
              MutMap(gcol.data(), kdim, cols).noalias() = ConstMap(wd, g.out_channels, kdim).transpose() * gm;
              col2im(gcol.data(), g, gx + b * in_size);
            }
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  for (auto d : shape) {
    if (d == 0) throw DimensionError("reshape: zero dimension in " + shape_string(shape));
  }
  const auto xs = x.data();
  return detail::make_result(std::move(shape), std::vector<double>(xs.begin(), xs.end()), "reshape", {x},
                             [](Node& self) {
                               double* gx = input_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                             });
}

namespace {

// For each output flat index, the corresponding input flat index.
std::vector<std::size_t> permutation_map(const Shape& in_shape, const std::vector<std::size_t>& order) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    strides[i] = in_strides[order[i]];
  }
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const auto& s = x.shape();
  if (order.size() != s.size()) {
    throw DimensionError("permute: order of length " + std::to_string(order.size()) + " for shape " +
                         shape_string(s));
  }
  std::vector<bool> used(s.size(), false);
  for (auto o : order) {
    if (o >= s.size() || used[o]) throw DimensionError("permute: invalid axis order");
    used[o] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[order[i]];
  auto map = permutation_map(s, order);
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[map[i]];
  return detail::make_result(std::move(out_shape), std::move(out), "permute", {x},
                             [map = std::move(map)](Node& self) {
                               double* gx = input_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += self.grad[i];
                             });
}

Tensor transpose(const Tensor& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[normalize_axis(axis0, x.rank())], order[normalize_axis(axis1, x.rank())]);
  return permute(x, order);
}

Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& s0 = parts[0].shape();
  const auto ax = normalize_axis(axis, s0.size());
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_string(s) + " incompatible with " + shape_string(s0) +
                           " on axis " + std::to_string(ax));
    }
    total_axis += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[ax] = total_axis;
  std::vector<double> out(outer * total_axis * inner);
  std::vector<std::size_t> chunk;
  for (const auto& p : parts) chunk.push_back(p.shape()[ax] * inner);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pd = parts[pi].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.data() + o * chunk[pi], chunk[pi], out.data() + o * total_axis * inner + offset);
    }
    offset += chunk[pi];
  }
  const std::size_t row = total_axis * inner;
  return detail::make_result(std::move(out_shape), std::move(out), "concat",
                             std::vector<Tensor>(parts.begin(), parts.end()),
                             [outer, row, chunk = std::move(chunk)](Node& self) {
                               std::size_t off = 0;
                               for (std::size_t pi = 0; pi < chunk.size(); ++pi) {
                                 if (double* gp = input_grad(self, pi)) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     const double* src = self.grad.data() + o * row + off;
                                     double* dst = gp + o * chunk[pi];
                                     for (std::size_t j = 0; j < chunk[pi]; ++j) dst[j] += src[j];
                                   }
                                 }
                                 off += chunk[pi];
                               }
                             });
}

Tensor concat(std::initializer_list<Tensor> parts, std::ptrdiff_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

std::vector<Tensor> split(const Tensor& x, std::ptrdiff_t axis, const std::vector<std::size_t>& sizes) {
  const auto& s = x.shape();
  const auto ax = normalize_axis(axis, s.size());
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != s[ax] || std::find(sizes.begin(), sizes.end(), std::size_t{0}) != sizes.end()) {
    throw DimensionError("split: sizes do not partition axis " + std::to_string(ax) + " of " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t row = s[ax] * inner;
  const auto xs = x.data();
  std::vector<Tensor> result;
  std::size_t off = 0;
  for (auto sz : sizes) {
    Shape part_shape = s;
    part_shape[ax] = sz;
    const std::size_t chunk = sz * inner;
    std::vector<double> out(outer * chunk);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(xs.data() + o * row + off, chunk, out.data() + o * chunk);
    result.push_back(detail::make_result(std::move(part_shape), std::move(out), "split", {x},
                                         [outer, row, off, chunk](Node& self) {
                                           double* gx = input_grad(self, 0);
                                           if (!gx) return;
                                           for (std::size_t o = 0; o < outer; ++o) {
                                             const double* src = self.grad.data() + o * chunk;
                                             double* dst = gx + o * row + off;
                                             for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                           }
                                         }));
    off += chunk;
  }
  return result;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("upsample_nearest: expected [B,C,H,W], got " + shape_string(s));
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be positive");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = h * factor, ow = w * factor;
  const auto xs = x.data();
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        out[(p * oh + y) * ow + xo] = xs[(p * h + y / factor) * w + xo / factor];
      }
    }
  }
  return detail::make_result(Shape{s[0], s[1], oh, ow}, std::move(out), "upsample_nearest", {x},
                             [planes, h, w, factor](Node& self) {
                               double* gx = input_grad(self, 0);
                               if (!gx) return;
                               const std::size_t oh = h * factor, ow = w * factor;
                               for (std::size_t p = 0; p < planes; ++p) {
                                 for (std::size_t y = 0; y < oh; ++y) {
                                   for (std::size_t xo = 0; xo < ow; ++xo) {
                                     gx[(p * h + y / factor) * w + xo / factor] += self.grad[(p * oh + y) * ow + xo];
                                   }
                                 }
                               }
                             });
}

Tensor index_select(const Tensor& x, std::span<const std::size_t> rows) {
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("index_select: scalar input");
  if (rows.empty()) throw DimensionError("index_select: empty index list");
  const std::size_t row = x.numel() / s[0];
  for (auto r : rows) {
    if (r >= s[0]) throw DimensionError("index_select: row " + std::to_string(r) + " out of range for " + shape_string(s));
  }
  Shape out_shape = s;
  out_shape[0] = rows.size();
  const auto xs = x.data();
  std::vector<double> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xs.data() + rows[i] * row, row, out.data() + i * row);
  return detail::make_result(std::move(out_shape), std::move(out), "index_select", {x},
                             [row, idx = std::vector<std::size_t>(rows.begin(), rows.end())](Node& self) {
                               double* gx = input_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 for (std::size_t j = 0; j < row; ++j) gx[idx[i] * row + j] += self.grad[i * row + j];
                               }
                             });
}

}  // namespace fusenet
