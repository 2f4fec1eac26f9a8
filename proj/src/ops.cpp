#include "evonas/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace evonas {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Fixed summation order: Eigen's vectorised reductions split differently
// depending on buffer alignment, which breaks bitwise reproducibility.
void add_row_sums(double* dst, const ConstMatMap& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) acc += m(r, c);
    dst[r] += acc;
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::size_t window_count(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t padding,
                         const char* op, const char* dim) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (extent + 2 * padding < kernel)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kernel) + " does not fit " + dim + "=" +
                     std::to_string(extent) + " with padding " + std::to_string(padding));
  return (extent + 2 * padding - kernel) / stride + 1;
}

struct ConvGeometry {
  std::size_t c_in, h, w, k, stride, pad, h_out, w_out;
  std::size_t rows() const { return c_in * k * k; }
  std::size_t cols() const { return h_out * w_out; }
};

void im2col(const ConvGeometry& g, const double* x, double* col) {
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.w_out, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* col, double* x) {
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

bool is_pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <typename UnaryValue, typename UnaryDerivFromOut>
Tensor elementwise(const Tensor& x, const char* kind, UnaryValue value, UnaryDerivFromOut deriv) {
  std::vector<double> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(xs[i]);
  auto xi = x.impl();
  return Tensor::from_op(x.shape(), std::move(out), kind, {&x}, [xi, deriv](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(xi->data[i], o.data[i]);
  });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 3, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require_rank(bias, 1, "conv2d", "bias");
  const std::size_t c_out = weight.dim(0);
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != input.dim(0))
    throw ShapeError("conv2d: weight C_in=" + std::to_string(weight.dim(1)) + " but input C_in=" +
                     std::to_string(input.dim(0)));
  if (weight.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size k=" + std::to_string(k) + " must be odd");
  if (bias.dim(0) != c_out)
    throw ShapeError("conv2d: bias C_out=" + std::to_string(bias.dim(0)) + " but weight C_out=" +
                     std::to_string(c_out));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), k, stride, padding, 0, 0};
  g.h_out = window_count(g.h, k, stride, padding, "conv2d", "H");
  g.w_out = window_count(g.w, k, stride, padding, "conv2d", "W");

  std::vector<double> col;
  const double* col_ptr = input.data().data();
  if (!is_pointwise(g)) {
    col.resize(g.rows() * g.cols());
    im2col(g, input.data().data(), col.data());
    col_ptr = col.data();
  }
  std::vector<double> out(c_out * g.cols());
  {
    ConstMatMap wm(weight.data().data(), c_out, g.rows());
    ConstMatMap cm(col_ptr, g.rows(), g.cols());
    MatMap ym(out.data(), c_out, g.cols());
    ym.noalias() = wm * cm;
    ym.colwise() += ConstVecMap(bias.data().data(), c_out);
  }

  auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
  return Tensor::from_op(
      {c_out, g.h_out, g.w_out}, std::move(out), "conv2d", {&input, &weight, &bias},
      [xi, wi, bi, g, c_out](const TensorImpl& o) {
        ConstMatMap gy(o.grad.data(), c_out, g.cols());
        std::vector<double> col;
        const double* col_ptr = xi->data.data();
        if (wi->requires_grad && !is_pointwise(g)) {
          col.resize(g.rows() * g.cols());
          im2col(g, xi->data.data(), col.data());
          col_ptr = col.data();
        }
        if (wi->requires_grad) {
          MatMap gw(wi->grad_buffer().data(), c_out, g.rows());
          gw.noalias() += gy * ConstMatMap(col_ptr, g.rows(), g.cols()).transpose();
        }
        if (bi->requires_grad) add_row_sums(bi->grad_buffer().data(), gy);
        if (xi->requires_grad) {
          ConstMatMap wm(wi->data.data(), c_out, g.rows());
          if (is_pointwise(g)) {
            MatMap gx(xi->grad_buffer().data(), g.rows(), g.cols());
            gx.noalias() += wm.transpose() * gy;
          } else {
            RowMat gcol = wm.transpose() * gy;
            col2im_add(g, gcol.data(), xi->grad_buffer().data());
          }
        }
      });
}

Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 3, "max_pool2d", "input");
  if (kernel == 0) throw ShapeError("max_pool2d: kernel must be positive");
  if (2 * padding > kernel)
    throw ShapeError("max_pool2d: padding " + std::to_string(padding) + " exceeds half of kernel " +
                     std::to_string(kernel));
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t ho = window_count(h, kernel, stride, padding, "max_pool2d", "H");
  const std::size_t wo = window_count(w, kernel, stride, padding, "max_pool2d", "W");
  std::vector<double> out(c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  auto x = input.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_at = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t at = (ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
            if (x[at] > best) {
              best = x[at];
              best_at = at;
            }
          }
        }
        const std::size_t o = (ch * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = best_at;
      }
  auto xi = input.impl();
  return Tensor::from_op({c, ho, wo}, std::move(out), "max_pool2d", {&input},
                         [xi, argmax = std::move(argmax)](const TensorImpl& o) {
                           auto& g = xi->grad_buffer();
                           for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                         });
}

Tensor adaptive_avg_pool2d(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 3, "adaptive_avg_pool2d", "input");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (out_h == 0 || out_h > h)
    throw ShapeError("adaptive_avg_pool2d: out_h=" + std::to_string(out_h) + " invalid for H=" + std::to_string(h));
  if (out_w == 0 || out_w > w)
    throw ShapeError("adaptive_avg_pool2d: out_w=" + std::to_string(out_w) + " invalid for W=" + std::to_string(w));
  auto begin = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto end = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  std::vector<double> result(c * out_h * out_w);
  auto x = input.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t y0 = begin(i, h, out_h), y1 = end(i, h, out_h);
        const std::size_t x0 = begin(j, w, out_w), x1 = end(j, w, out_w);
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(ch * h + y) * w + xx];
        result[(ch * out_h + i) * out_w + j] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  auto xi = input.impl();
  return Tensor::from_op({c, out_h, out_w}, std::move(result), "adaptive_avg_pool2d", {&input},
                         [xi, c, h, w, out_h, out_w, begin, end](const TensorImpl& o) {
                           auto& g = xi->grad_buffer();
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t i = 0; i < out_h; ++i)
                               for (std::size_t j = 0; j < out_w; ++j) {
                                 const std::size_t y0 = begin(i, h, out_h), y1 = end(i, h, out_h);
                                 const std::size_t x0 = begin(j, w, out_w), x1 = end(j, w, out_w);
                                 const double share = o.grad[(ch * out_h + i) * out_w + j] /
                                                      static_cast<double>((y1 - y0) * (x1 - x0));
                                 for (std::size_t y = y0; y < y1; ++y)
                                   for (std::size_t xx = x0; xx < x1; ++xx) g[(ch * h + y) * w + xx] += share;
                               }
                         });
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 1, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  const std::size_t d_out = weight.dim(0), d_in = weight.dim(1);
  if (input.dim(0) != d_in)
    throw ShapeError("dense: weight D_in=" + std::to_string(d_in) + " but input D_in=" + std::to_string(input.dim(0)));
  if (bias.dim(0) != d_out)
    throw ShapeError("dense: bias D_out=" + std::to_string(bias.dim(0)) + " but weight D_out=" + std::to_string(d_out));
  std::vector<double> out(d_out);
  {
    const double* w = weight.data().data();
    const double* x = input.data().data();
    const double* b = bias.data().data();
    for (std::size_t i = 0; i < d_out; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d_in; ++j) acc += w[i * d_in + j] * x[j];
      out[i] = acc + b[i];
    }
  }
  auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
  return Tensor::from_op({d_out}, std::move(out), "dense", {&input, &weight, &bias},
                         [xi, wi, bi, d_in, d_out](const TensorImpl& o) {
                           const double* gy = o.grad.data();
                           if (wi->requires_grad) {
                             double* gw = wi->grad_buffer().data();
                             const double* x = xi->data.data();
                             for (std::size_t i = 0; i < d_out; ++i)
                               for (std::size_t j = 0; j < d_in; ++j) gw[i * d_in + j] += gy[i] * x[j];
                           }
                           if (bi->requires_grad) {
                             double* gb = bi->grad_buffer().data();
                             for (std::size_t i = 0; i < d_out; ++i) gb[i] += gy[i];
                           }
                           if (xi->requires_grad) {
                             double* gx = xi->grad_buffer().data();
                             const double* w = wi->data.data();
                             for (std::size_t i = 0; i < d_out; ++i)
                               for (std::size_t j = 0; j < d_in; ++j) gx[j] += w[i * d_in + j] * gy[i];
                           }
                         });
}

Tensor frame_affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "frame_affine", "input");
  require_rank(weight, 2, "frame_affine", "weight");
  require_rank(bias, 1, "frame_affine", "bias");
  const std::size_t d_out = weight.dim(0), d_in = weight.dim(1), t = input.dim(1);
  if (input.dim(0) != d_in)
    throw ShapeError("frame_affine: weight D_in=" + std::to_string(d_in) + " but input D_in=" +
                     std::to_string(input.dim(0)));
  if (bias.dim(0) != d_out) throw ShapeError("frame_affine: bias D_out=" + std::to_string(bias.dim(0)));
  std::vector<double> out(d_out * t);
  {
    MatMap ym(out.data(), d_out, t);
    ym.noalias() = ConstMatMap(weight.data().data(), d_out, d_in) * ConstMatMap(input.data().data(), d_in, t);
    ym.colwise() += ConstVecMap(bias.data().data(), d_out);
  }
  auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
  return Tensor::from_op({d_out, t}, std::move(out), "frame_affine", {&input, &weight, &bias},
                         [xi, wi, bi, d_in, d_out, t](const TensorImpl& o) {
                           ConstMatMap gy(o.grad.data(), d_out, t);
                           if (wi->requires_grad)
                             MatMap(wi->grad_buffer().data(), d_out, d_in).noalias() +=
                                 gy * ConstMatMap(xi->data.data(), d_in, t).transpose();
                           if (bi->requires_grad) add_row_sums(bi->grad_buffer().data(), gy);
                           if (xi->requires_grad)
                             MatMap(xi->grad_buffer().data(), d_in, t).noalias() +=
                                 ConstMatMap(wi->data.data(), d_out, d_in).transpose() * gy;
                         });
}

Tensor splice(const Tensor& input, const std::vector<int>& offsets) {
  require_rank(input, 2, "splice", "input");
  if (offsets.empty()) throw ShapeError("splice: offsets must not be empty");
  const auto [lo_it, hi_it] = std::minmax_element(offsets.begin(), offsets.end());
  const int lo = *lo_it, hi = *hi_it;
  const std::size_t d = input.dim(0), t = input.dim(1);
  const std::size_t span = static_cast<std::size_t>(hi - lo);
  if (span >= t)
    throw ShapeError("splice: context span " + std::to_string(span) + " leaves no frames of T=" + std::to_string(t));
  const std::size_t t_out = t - span;
  const std::size_t n = offsets.size();
  // Output frame j is centred on input frame j - lo.
  std::vector<std::size_t> source(d * n * t_out);
  for (std::size_t o = 0; o < n; ++o)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t j = 0; j < t_out; ++j)
        source[(o * d + r) * t_out + j] = r * t + static_cast<std::size_t>(static_cast<int>(j) - lo + offsets[o]);
  std::vector<double> out(source.size());
  auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[source[i]];
  auto xi = input.impl();
  return Tensor::from_op({d * n, t_out}, std::move(out), "splice", {&input},
                         [xi, source = std::move(source)](const TensorImpl& o) {
                           auto& g = xi->grad_buffer();
                           for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += o.grad[i];
                         });
}

Tensor relu(const Tensor& input) {
  return elementwise(
      input, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& input) {
  return elementwise(
      input, "sigmoid", [](double v) { return sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor stats_pool(const Tensor& input) {
  require_rank(input, 2, "stats_pool", "input");
  const std::size_t d = input.dim(0), t = input.dim(1);
  if (t == 0) throw EmptyInputError("stats_pool: no frames");
  std::vector<double> out(2 * d);
  auto x = input.data();
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = x.data() + r * t;
    double mu = 0.0;
    for (std::size_t j = 0; j < t; ++j) mu += row[j];
    mu /= static_cast<double>(t);
    double var = 0.0;
    for (std::size_t j = 0; j < t; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(t);
    out[r] = mu;
    out[d + r] = std::sqrt(var + kStatsPoolEpsilon);
  }
  auto xi = input.impl();
  return Tensor::from_op({2 * d}, std::move(out), "stats_pool", {&input}, [xi, d, t](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    const double inv_t = 1.0 / static_cast<double>(t);
    for (std::size_t r = 0; r < d; ++r) {
      const double mu = o.data[r], sd = o.data[d + r];
      const double g_mu = o.grad[r] * inv_t, g_sd = o.grad[d + r] * inv_t / sd;
      for (std::size_t j = 0; j < t; ++j) g[r * t + j] += g_mu + g_sd * (xi->data[r * t + j] - mu);
    }
  });
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("cosine: lengths differ " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("cosine: zero-norm input");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "cosine", "a");
  require_same_shape(a, b, "cosine");
  auto as = a.data(), bs = b.data();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i) {
    dot += as[i] * bs[i];
    na += as[i] * as[i];
    nb += bs[i] * bs[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("cosine: zero-norm input");
  const double raw = dot / std::sqrt(na * nb);
  auto ai = a.impl(), bi = b.impl();
  return Tensor::from_op({1}, {std::clamp(raw, -1.0, 1.0)}, "cosine", {&a, &b},
                         [ai, bi, raw, na, nb](const TensorImpl& o) {
                           const double inv = 1.0 / std::sqrt(na * nb), go = o.grad[0];
                           const auto& av = ai->data;
                           const auto& bv = bi->data;
                           if (ai->requires_grad) {
                             auto& g = ai->grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (bv[i] * inv - raw * av[i] / na);
                           }
                           if (bi->requires_grad) {
                             auto& g = bi->grad_buffer();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (av[i] * inv - raw * bv[i] / nb);
                           }
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor::from_op(a.shape(), std::move(out), "add", {&a, &b}, [ai, bi](const TensorImpl& o) {
    for (auto* in : {ai.get(), bi.get()}) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor::from_op(a.shape(), std::move(out), "sub", {&a, &b}, [ai, bi](const TensorImpl& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor::from_op(a.shape(), std::move(out), "mul", {&a, &b}, [ai, bi](const TensorImpl& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor affine(const Tensor& x, double alpha, double beta) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * x[i] + beta;
  auto xi = x.impl();
  return Tensor::from_op(x.shape(), std::move(out), "affine", {&x}, [xi, alpha](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * o.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xi = x.impl();
  return Tensor::from_op({1}, {acc}, "sum", {&x}, [xi](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) { return affine(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto xi = x.impl();
  return Tensor::from_op(std::move(shape), std::move(out), "reshape", {&x}, [xi](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor sum_of(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw EmptyInputError("sum_of: no tensors");
  std::vector<double> out(xs[0].numel(), 0.0);
  for (const Tensor& t : xs) {
    require_same_shape(xs[0], t, "sum_of");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& t : xs) impls.push_back(t.impl());
  return Tensor::from_op(xs[0].shape(), std::move(out), "sum_of", xs, [impls](const TensorImpl& o) {
    for (const auto& in : impls) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor mean_of(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw EmptyInputError("mean_of: no tensors");
  return affine(sum_of(xs), 1.0 / static_cast<double>(xs.size()));
}

Tensor max_of(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw EmptyInputError("max_of: no tensors");
  std::size_t best = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].numel() != 1) throw ShapeError("max_of: expects single-element tensors");
    if (scalars[i].item() > scalars[best].item()) best = i;
  }
  auto winner = scalars[best].impl();
  return Tensor::from_op({1}, {scalars[best].item()}, "max_of", scalars, [winner](const TensorImpl& o) {
    if (winner->requires_grad) winner->grad_buffer()[0] += o.grad[0];
  });
}

}  // namespace evonas
