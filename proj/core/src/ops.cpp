#include "pcrobust/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>

namespace pcrobust {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

bool tracked(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

std::vector<double>& grad_buffer(const Tensor& t) {
  auto* impl = t.impl();
  if (!impl->grad) impl->grad = std::make_unique<std::vector<double>>(impl->data.size(), 0.0);
  return *impl->grad;
}

using BackwardFn = std::function<void(const detail::TensorImpl&, const std::vector<double>&)>;

void attach(Tensor& out, const char* op, std::vector<Tensor> parents, BackwardFn fn) {
  auto node = std::make_shared<detail::Node>();
  node->op = op;
  node->parents = std::move(parents);
  node->backward = std::move(fn);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
}

struct ConvDims {
  std::size_t n, c, h, w, f, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& weight, std::size_t stride, const char* op) {
  if (x.shape().size() != 4) {
    throw std::invalid_argument(std::string(op) + ": input must be (N,C,H,W), got " +
                                shape_str(x.shape()));
  }
  if (weight.shape().size() != 4) {
    throw std::invalid_argument(std::string(op) + ": weight must be (F,C,KH,KW), got " +
                                shape_str(weight.shape()));
  }
  ConvDims d;
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.f = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  if (weight.dim(1) != d.c) {
    throw std::invalid_argument(std::string(op) + ": weight channels " +
                                std::to_string(weight.dim(1)) + " != input channels " +
                                std::to_string(d.c));
  }
  if (stride == 0) throw std::invalid_argument(std::string(op) + ": stride must be positive");
  if (d.kh > d.h || d.kw > d.w) {
    throw std::invalid_argument(std::string(op) + ": kernel larger than input");
  }
  d.oh = (d.h - d.kh) / stride + 1;
  d.ow = (d.w - d.kw) / stride + 1;
  return d;
}

/// Gathers convolution windows into a (C*KH*KW) x (N*OH*OW) matrix, columns
/// grouped sample-major so one GEMM covers the whole batch.
std::vector<double> im2col(const std::vector<double>& x, const ConvDims& d, std::size_t stride) {
  const std::size_t ckk = d.c * d.kh * d.kw;
  const std::size_t opix = d.oh * d.ow;
  const std::size_t cols = d.n * opix;
  std::vector<double> col(ckk * cols);
  for (std::size_t n = 0; n < d.n; ++n) {
    const double* xn = x.data() + n * d.c * d.h * d.w;
    for (std::size_t c = 0; c < d.c; ++c) {
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          const std::size_t r = (c * d.kh + kh) * d.kw + kw;
          double* dst = col.data() + r * cols + n * opix;
          const double* src = xn + c * d.h * d.w + kh * d.w + kw;
          for (std::size_t oh = 0; oh < d.oh; ++oh) {
            const double* s = src + oh * stride * d.w;
            for (std::size_t ow = 0; ow < d.ow; ++ow) {
              dst[oh * d.ow + ow] = s[ow * stride];
            }
          }
        }
      }
    }
  }
  return col;
}

/// Scatter-adds a (C*KH*KW) x (N*OH*OW) gradient matrix back onto the input.
void col2im_add(const std::vector<double>& col, const ConvDims& d, std::size_t stride,
                std::vector<double>& gx) {
  const std::size_t opix = d.oh * d.ow;
  const std::size_t cols = d.n * opix;
  for (std::size_t n = 0; n < d.n; ++n) {
    double* gn = gx.data() + n * d.c * d.h * d.w;
    for (std::size_t c = 0; c < d.c; ++c) {
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          const std::size_t r = (c * d.kh + kh) * d.kw + kw;
          const double* src = col.data() + r * cols + n * opix;
          double* dst = gn + c * d.h * d.w + kh * d.w + kw;
          for (std::size_t oh = 0; oh < d.oh; ++oh) {
            double* t = dst + oh * stride * d.w;
            for (std::size_t ow = 0; ow < d.ow; ++ow) {
              t[ow * stride] += src[oh * d.ow + ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

bool grad_enabled() { return g_grad_enabled; }

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(what) + ": non-finite value encountered");
    }
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  Tensor result(a.shape(), std::move(out));
  if (tracked(a) || tracked(b)) {
    attach(result, "add", {a, b},
           [a, b](const detail::TensorImpl&, const std::vector<double>& g) {
             if (a.requires_grad()) {
               auto& ga = grad_buffer(a);
               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
             }
             if (b.requires_grad()) {
               auto& gb = grad_buffer(b);
               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
             }
           });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
  Tensor result(a.shape(), std::move(out));
  if (tracked(a) || tracked(b)) {
    attach(result, "sub", {a, b},
           [a, b](const detail::TensorImpl&, const std::vector<double>& g) {
             if (a.requires_grad()) {
               auto& ga = grad_buffer(a);
               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
             }
             if (b.requires_grad()) {
               auto& gb = grad_buffer(b);
               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
             }
           });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  Tensor result(a.shape(), std::move(out));
  if (tracked(a) || tracked(b)) {
    attach(result, "mul", {a, b},
           [a, b](const detail::TensorImpl&, const std::vector<double>& g) {
             if (a.requires_grad()) {
               auto& ga = grad_buffer(a);
               const auto& bv2 = b.data();
               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
             }
             if (b.requires_grad()) {
               auto& gb = grad_buffer(b);
               const auto& av2 = a.data();
               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
             }
           });
  }
  return result;
}

Tensor add_scalar(const Tensor& a, double s) {
  require_defined(a, "add_scalar");
  std::vector<double> out(a.data());
  for (double& v : out) v += s;
  Tensor result(a.shape(), std::move(out));
  if (tracked(a)) {
    attach(result, "add_scalar", {a},
           [a](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& ga = grad_buffer(a);
             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
           });
  }
  return result;
}

Tensor mul_scalar(const Tensor& a, double s) {
  require_defined(a, "mul_scalar");
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  Tensor result(a.shape(), std::move(out));
  if (tracked(a)) {
    attach(result, "mul_scalar", {a},
           [a, s](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& ga = grad_buffer(a);
             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
           });
  }
  return result;
}

Tensor relu(const Tensor& a) {
  require_defined(a, "relu");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor result(a.shape(), std::move(out));
  if (tracked(a)) {
    attach(result, "relu", {a},
           [a](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& ga = grad_buffer(a);
             const auto& av2 = a.data();
             for (std::size_t i = 0; i < g.size(); ++i) {
               if (av2[i] > 0.0) ga[i] += g[i];
             }
           });
  }
  return result;
}

Tensor tanh_act(const Tensor& a) {
  require_defined(a, "tanh");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(av[i]);
  Tensor result(a.shape(), std::move(out));
  if (tracked(a)) {
    attach(result, "tanh", {a},
           [a](const detail::TensorImpl& o, const std::vector<double>& g) {
             auto& ga = grad_buffer(a);
             for (std::size_t i = 0; i < g.size(); ++i) {
               ga[i] += g[i] * (1.0 - o.data[i] * o.data[i]);
             }
           });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor result(Shape{m, n});
  MutMap(result.data().data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  if (tracked(a) || tracked(b)) {
    attach(result, "matmul", {a, b},
           [a, b, m, k, n](const detail::TensorImpl&, const std::vector<double>& g) {
             ConstMap gm(g.data(), m, n);
             if (a.requires_grad()) {
               MutMap(grad_buffer(a).data(), m, k).noalias() +=
                   gm * ConstMap(b.data().data(), k, n).transpose();
             }
             if (b.requires_grad()) {
               MutMap(grad_buffer(b).data(), k, n).noalias() +=
                   ConstMap(a.data().data(), m, k).transpose() * gm;
             }
           });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  if (bias.shape().size() != 1) {
    throw std::invalid_argument("add_bias: bias must be rank 1, got " + shape_str(bias.shape()));
  }
  const std::size_t rank = x.shape().size();
  std::size_t channels, inner;
  if (rank == 2) {
    channels = x.dim(1);
    inner = 1;
  } else if (rank == 4) {
    channels = x.dim(1);
    inner = x.dim(2) * x.dim(3);
  } else {
    throw std::invalid_argument("add_bias: input must be (N,F) or (N,C,H,W), got " +
                                shape_str(x.shape()));
  }
  if (bias.dim(0) != channels) {
    throw std::invalid_argument("add_bias: bias size " + std::to_string(bias.dim(0)) +
                                " != channel count " + std::to_string(channels));
  }
  const std::size_t batch = x.dim(0);
  std::vector<double> out(x.data());
  const auto& bv = bias.data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = out.data() + (n * channels + c) * inner;
      const double b = bv[c];
      for (std::size_t i = 0; i < inner; ++i) p[i] += b;
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (tracked(x) || tracked(bias)) {
    attach(result, "add_bias", {x, bias},
           [x, bias, batch, channels, inner](const detail::TensorImpl&,
                                             const std::vector<double>& g) {
             if (x.requires_grad()) {
               auto& gx = grad_buffer(x);
               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
             }
             if (bias.requires_grad()) {
               auto& gb = grad_buffer(bias);
               for (std::size_t n = 0; n < batch; ++n) {
                 for (std::size_t c = 0; c < channels; ++c) {
                   const double* p = g.data() + (n * channels + c) * inner;
                   double acc = 0.0;
                   for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                   gb[c] += acc;
                 }
               }
             }
           });
  }
  return result;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  const ConvDims d = conv_dims(x, weight, stride, "conv2d");
  if (bias.defined() && (bias.shape().size() != 1 || bias.dim(0) != d.f)) {
    throw std::invalid_argument("conv2d: bias must be rank-1 of size " + std::to_string(d.f));
  }
  const std::size_t ckk = d.c * d.kh * d.kw;
  const std::size_t opix = d.oh * d.ow;
  const std::size_t cols = d.n * opix;

  std::vector<double> col = im2col(x.data(), d, stride);
  // (F, CKK) x (CKK, N*OH*OW)
  std::vector<double> prod(d.f * cols);
  MutMap(prod.data(), d.f, cols).noalias() =
      ConstMap(weight.data().data(), d.f, ckk) * ConstMap(col.data(), ckk, cols);

  std::vector<double> out(d.n * d.f * opix);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t f = 0; f < d.f; ++f) {
      const double* src = prod.data() + f * cols + n * opix;
      double* dst = out.data() + (n * d.f + f) * opix;
      if (bias.defined()) {
        const double b = bias.data()[f];
        for (std::size_t i = 0; i < opix; ++i) dst[i] = src[i] + b;
      } else {
        std::copy(src, src + opix, dst);
      }
    }
  }

  Tensor result(Shape{d.n, d.f, d.oh, d.ow}, std::move(out));
  const bool track = tracked(x) || tracked(weight) || (bias.defined() && tracked(bias));
  if (track) {
    auto saved_col = std::make_shared<std::vector<double>>(std::move(col));
    attach(result, "conv2d", {x, weight},
           [x, weight, bias, d, stride, ckk, opix, cols, saved_col](
               const detail::TensorImpl&, const std::vector<double>& g) {
             // Regroup gradient as (F, N*OH*OW) to mirror the forward GEMM.
             std::vector<double> gprod(d.f * cols);
             for (std::size_t n = 0; n < d.n; ++n) {
               for (std::size_t f = 0; f < d.f; ++f) {
                 const double* src = g.data() + (n * d.f + f) * opix;
                 std::copy(src, src + opix, gprod.data() + f * cols + n * opix);
               }
             }
             if (weight.requires_grad()) {
               MutMap(grad_buffer(weight).data(), d.f, ckk).noalias() +=
                   ConstMap(gprod.data(), d.f, cols) * ConstMap(saved_col->data(), ckk, cols).transpose();
             }
             if (bias.defined() && bias.requires_grad()) {
               auto& gb = grad_buffer(bias);
               for (std::size_t f = 0; f < d.f; ++f) {
                 const double* row = gprod.data() + f * cols;
                 double acc = 0.0;
                 for (std::size_t i = 0; i < cols; ++i) acc += row[i];
                 gb[f] += acc;
               }
             }
             if (x.requires_grad()) {
               std::vector<double> gcol(ckk * cols);
               MutMap(gcol.data(), ckk, cols).noalias() =
                   ConstMap(weight.data().data(), d.f, ckk).transpose() *
                   ConstMap(gprod.data(), d.f, cols);
               col2im_add(gcol, d, stride, grad_buffer(x));
             }
           });
  }
  return result;
}

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_defined(x, "maxpool2d");
  if (x.shape().size() != 4) {
    throw std::invalid_argument("maxpool2d: input must be (N,C,H,W), got " + shape_str(x.shape()));
  }
  if (kernel == 0 || stride == 0) {
    throw std::invalid_argument("maxpool2d: kernel and stride must be positive");
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel > h || kernel > w) throw std::invalid_argument("maxpool2d: kernel larger than input");
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;

  std::vector<double> out(n * c * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());
  const auto& xv = x.data();
  std::size_t oidx = 0;
  for (std::size_t nn = 0; nn < n; ++nn) {
    for (std::size_t cc = 0; cc < c; ++cc) {
      const double* plane = xv.data() + (nn * c + cc) * h * w;
      const std::size_t plane_off = (nn * c + cc) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j, ++oidx) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          for (std::size_t ki = 0; ki < kernel; ++ki) {
            const std::size_t row = i * stride + ki;
            for (std::size_t kj = 0; kj < kernel; ++kj) {
              const std::size_t col = j * stride + kj;
              const double v = plane[row * w + col];
              if (v > best) {  // strict: first maximum wins ties
                best = v;
                best_at = plane_off + row * w + col;
              }
            }
          }
          out[oidx] = best;
          argmax[oidx] = static_cast<std::uint32_t>(best_at);
        }
      }
    }
  }
  Tensor result(Shape{n, c, oh, ow}, std::move(out));
  if (tracked(x)) {
    auto saved = std::make_shared<std::vector<std::uint32_t>>(std::move(argmax));
    attach(result, "maxpool2d", {x},
           [x, saved](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& gx = grad_buffer(x);
             for (std::size_t i = 0; i < g.size(); ++i) gx[(*saved)[i]] += g[i];
           });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor result(std::move(shape), x.data());
  if (tracked(x)) {
    attach(result, "reshape", {x},
           [x](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& gx = grad_buffer(x);
             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
           });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor result = Tensor::scalar(acc);
  if (tracked(x)) {
    attach(result, "sum", {x},
           [x](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& gx = grad_buffer(x);
             const double go = g[0];
             for (double& v : gx) v += go;
           });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  const double inv = 1.0 / static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor result = Tensor::scalar(acc * inv);
  if (tracked(x)) {
    attach(result, "mean", {x},
           [x, inv](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& gx = grad_buffer(x);
             const double go = g[0] * inv;
             for (double& v : gx) v += go;
           });
  }
  return result;
}

Tensor row_gather(const Tensor& x, const std::vector<int>& index_per_row) {
  require_defined(x, "row_gather");
  if (x.shape().size() != 2) {
    throw std::invalid_argument("row_gather: input must be (N,K), got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (index_per_row.size() != n) {
    throw std::invalid_argument("row_gather: " + std::to_string(index_per_row.size()) +
                                " indices for " + std::to_string(n) + " rows");
  }
  std::vector<double> out(n);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const int idx = index_per_row[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= k) {
      throw std::out_of_range("row_gather: index " + std::to_string(idx) + " outside [0," +
                              std::to_string(k) + ") at row " + std::to_string(i));
    }
    out[i] = xv[i * k + static_cast<std::size_t>(idx)];
  }
  Tensor result(Shape{n}, std::move(out));
  if (tracked(x)) {
    auto idx = std::make_shared<std::vector<int>>(index_per_row);
    attach(result, "row_gather", {x},
           [x, idx, k](const detail::TensorImpl&, const std::vector<double>& g) {
             auto& gx = grad_buffer(x);
             for (std::size_t i = 0; i < g.size(); ++i) {
               gx[i * k + static_cast<std::size_t>((*idx)[i])] += g[i];
             }
           });
  }
  return result;
}

Tensor sub_row_scalar(const Tensor& x, const Tensor& per_row) {
  require_defined(x, "sub_row_scalar");
  require_defined(per_row, "sub_row_scalar");
  if (x.shape().size() != 2 || per_row.shape().size() != 1 || per_row.dim(0) != x.dim(0)) {
    throw std::invalid_argument("sub_row_scalar: need (N,K) and (N), got " +
                                shape_str(x.shape()) + " and " + shape_str(per_row.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<double> out(x.data());
  const auto& rv = per_row.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) row[j] -= rv[i];
  }
  Tensor result(x.shape(), std::move(out));
  if (tracked(x) || tracked(per_row)) {
    attach(result, "sub_row_scalar", {x, per_row},
           [x, per_row, n, k](const detail::TensorImpl&, const std::vector<double>& g) {
             if (x.requires_grad()) {
               auto& gx = grad_buffer(x);
               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
             }
             if (per_row.requires_grad()) {
               auto& gr = grad_buffer(per_row);
               for (std::size_t i = 0; i < n; ++i) {
                 const double* row = g.data() + i * k;
                 double acc = 0.0;
                 for (std::size_t j = 0; j < k; ++j) acc += row[j];
                 gr[i] -= acc;
               }
             }
           });
  }
  return result;
}

namespace {

void require_rows(const Tensor& logits, const char* op) {
  require_defined(logits, op);
  if (logits.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": input must be (N,K), got " +
                                shape_str(logits.shape()));
  }
  for (double v : logits.data()) {
    if (std::isnan(v)) throw std::invalid_argument(std::string(op) + ": NaN input rejected");
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  require_rows(logits, "softmax");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n * k);
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    double* orow = out.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < k; ++j) orow[j] *= inv;
  }
  Tensor result(logits.shape(), std::move(out));
  if (tracked(logits)) {
    attach(result, "softmax", {logits},
           [logits, n, k](const detail::TensorImpl& o, const std::vector<double>& g) {
             auto& gl = grad_buffer(logits);
             for (std::size_t i = 0; i < n; ++i) {
               const double* p = o.data.data() + i * k;
               const double* gr = g.data() + i * k;
               double dot = 0.0;
               for (std::size_t j = 0; j < k; ++j) dot += gr[j] * p[j];
               double* dst = gl.data() + i * k;
               for (std::size_t j = 0; j < k; ++j) dst[j] += p[j] * (gr[j] - dot);
             }
           });
  }
  return result;
}

Tensor log_softmax_rows(const Tensor& logits) {
  require_rows(logits, "log_softmax");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n * k);
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    double* orow = out.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) orow[j] = row[j] - lse;
  }
  Tensor result(logits.shape(), std::move(out));
  if (tracked(logits)) {
    attach(result, "log_softmax", {logits},
           [logits, n, k](const detail::TensorImpl& o, const std::vector<double>& g) {
             auto& gl = grad_buffer(logits);
             for (std::size_t i = 0; i < n; ++i) {
               const double* lsm = o.data.data() + i * k;
               const double* gr = g.data() + i * k;
               double gsum = 0.0;
               for (std::size_t j = 0; j < k; ++j) gsum += gr[j];
               double* dst = gl.data() + i * k;
               for (std::size_t j = 0; j < k; ++j) dst[j] += gr[j] - std::exp(lsm[j]) * gsum;
             }
           });
  }
  return result;
}

namespace {

/// Post-order over the recorded graph; parents precede children in `order`.
void topo_collect(const Tensor& root, std::vector<Tensor>& order) {
  std::unordered_set<const detail::TensorImpl*> seen;
  struct Frame {
    Tensor t;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root.impl());
  while (!stack.empty()) {
    Frame& frame = stack.back();
    const auto& node = frame.t.impl()->node;
    if (!node || frame.next_parent >= node->parents.size()) {
      order.push_back(frame.t);
      stack.pop_back();
      continue;
    }
    Tensor parent = node->parents[frame.next_parent++];
    if (parent.requires_grad() && !seen.count(parent.impl())) {
      seen.insert(parent.impl());
      stack.push_back({std::move(parent), 0});
    }
  }
}

}  // namespace

void backward(const Tensor& output, const Tensor& output_grad) {
  require_defined(output, "backward");
  if (!output.requires_grad()) {
    throw std::logic_error("backward: output has no recorded computation (run forward first)");
  }
  require_defined(output_grad, "backward");
  if (output_grad.shape() != output.shape()) {
    throw std::invalid_argument("backward: output gradient shape " +
                                shape_str(output_grad.shape()) + " != output shape " +
                                shape_str(output.shape()));
  }
  std::vector<Tensor> order;
  topo_collect(output, order);
  {
    auto& g = grad_buffer(output);
    const auto& seed = output_grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  // Parents come first in post-order, so walk backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = it->impl()->node;
    if (node && it->impl()->grad) {
      node->backward(*it->impl(), *it->impl()->grad);
    }
  }
}

void backward(const Tensor& output) {
  require_defined(output, "backward");
  if (output.numel() != 1) {
    throw std::invalid_argument(
        "backward: implicit seed gradient requires a scalar output, got " +
        shape_str(output.shape()));
  }
  backward(output, Tensor::scalar(1.0));
}

Tensor input_gradient(const std::function<Tensor(const Tensor&)>& scalar_fn, const Tensor& x) {
  require_defined(x, "input_gradient");
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  Tensor out;
  {
    // Recording must be on regardless of the caller's context.
    const bool saved = g_grad_enabled;
    g_grad_enabled = true;
    try {
      out = scalar_fn(leaf);
    } catch (...) {
      g_grad_enabled = saved;
      throw;
    }
    g_grad_enabled = saved;
  }
  if (!out.defined() || out.numel() != 1) {
    throw std::invalid_argument("input_gradient: loss must be scalar, got " +
                                (out.defined() ? shape_str(out.shape()) : std::string("nothing")));
  }
  // A loss that never touched x has nothing to differentiate.
  if (!out.requires_grad()) return Tensor::zeros(x.shape());
  backward(out);
  if (!leaf.has_grad()) return Tensor::zeros(x.shape());
  return leaf.grad_tensor();
}

}  // namespace pcrobust
