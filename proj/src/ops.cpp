#include "bbg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "bbg/error.hpp"

namespace bbg {
namespace {

void expect_rank(const Var& v, std::size_t rank, const char* op) {
  require(v.shape().size() == rank, ErrorCode::kShapeMismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) +
              ", got " + shape_string(v.shape()));
}

// Geometry shared by the three convolution kernels. X is the correlation
// input [B x C x H x W], Y the correlation output [B x O x OH x OW].
struct ConvGeom {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, out_h, out_w;
  std::size_t kh, kw, stride, pad;

  // Valid output-index range [lo, hi) for kernel offset k along one axis.
  void range(std::size_t k, std::size_t out_n, std::size_t in_n,
             std::size_t& lo, std::size_t& hi) const {
    // in = o * stride + k - pad must lie in [0, in_n).
    long long first = static_cast<long long>(pad) - static_cast<long long>(k);
    lo = first <= 0 ? 0 : static_cast<std::size_t>((first + stride - 1) / stride);
    long long last = static_cast<long long>(in_n) - 1 + pad - k;
    if (last < 0) {
      hi = 0;
    } else {
      hi = std::min(out_n, static_cast<std::size_t>(last) / stride + 1);
    }
    if (hi < lo) hi = lo;
  }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

// Patch matrix [C*kh*kw x B*out_plane]; column b*P + oy*out_w + ox holds the
// receptive field of output pixel (oy, ox) of image b.
Eigen::MatrixXd im2col(const ConvGeom& g, const double* x) {
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w;
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(g.in_ch * g.kh * g.kw, g.batch * out_plane);
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      std::size_t oy_lo, oy_hi;
      g.range(ky, g.out_h, g.in_h, oy_lo, oy_hi);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        std::size_t ox_lo, ox_hi;
        g.range(kx, g.out_w, g.in_w, ox_lo, ox_hi);
        const auto row = static_cast<Eigen::Index>((c * g.kh + ky) * g.kw + kx);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* xp = x + (b * g.in_ch + c) * in_plane;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const double* xrow = xp + (oy * g.stride + ky - g.pad) * g.in_w;
            const std::size_t base = b * out_plane + oy * g.out_w;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
              cols(row, static_cast<Eigen::Index>(base + ox)) = xrow[ox * g.stride + kx - g.pad];
          }
        }
      }
    }
  return cols;
}

// Adjoint of im2col: accumulates patch columns back into X.
void col2im(const ConvGeom& g, const Eigen::MatrixXd& cols, double* x) {
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      std::size_t oy_lo, oy_hi;
      g.range(ky, g.out_h, g.in_h, oy_lo, oy_hi);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        std::size_t ox_lo, ox_hi;
        g.range(kx, g.out_w, g.in_w, ox_lo, ox_hi);
        const auto row = static_cast<Eigen::Index>((c * g.kh + ky) * g.kw + kx);
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* xp = x + (b * g.in_ch + c) * in_plane;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            double* xrow = xp + (oy * g.stride + ky - g.pad) * g.in_w;
            const std::size_t base = b * out_plane + oy * g.out_w;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
              xrow[ox * g.stride + kx - g.pad] += cols(row, static_cast<Eigen::Index>(base + ox));
          }
        }
      }
    }
}

// [B x O x P] <-> [O x B*P]
Eigen::MatrixXd gather_outputs(const ConvGeom& g, const double* y) {
  const std::size_t out_plane = g.out_h * g.out_w;
  Eigen::MatrixXd m(g.out_ch, g.batch * out_plane);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const double* yp = y + (b * g.out_ch + o) * out_plane;
      for (std::size_t p = 0; p < out_plane; ++p)
        m(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(b * out_plane + p)) = yp[p];
    }
  return m;
}

ConstRowMap weight_matrix(const ConvGeom& g, const double* w) {
  return ConstRowMap(w, static_cast<Eigen::Index>(g.out_ch),
                     static_cast<Eigen::Index>(g.in_ch * g.kh * g.kw));
}

// Y[b,o,oy,ox] += sum X[b,c,oy*s+ky-p,ox*s+kx-p] * W[o,c,ky,kx]
void correlate(const ConvGeom& g, const double* x, const double* w, double* y) {
  const std::size_t out_plane = g.out_h * g.out_w;
  const Eigen::MatrixXd out = weight_matrix(g, w) * im2col(g, x);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      double* yp = y + (b * g.out_ch + o) * out_plane;
      for (std::size_t p = 0; p < out_plane; ++p)
        yp[p] += out(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(b * out_plane + p));
    }
}

// X[b,c,oy*s+ky-p,ox*s+kx-p] += Y[b,o,oy,ox] * W[o,c,ky,kx]
void scatter(const ConvGeom& g, const double* y, const double* w, double* x) {
  const Eigen::MatrixXd cols = weight_matrix(g, w).transpose() * gather_outputs(g, y);
  col2im(g, cols, x);
}

// W[o,c,ky,kx] += sum X[b,c,oy*s+ky-p,ox*s+kx-p] * Y[b,o,oy,ox]
void weight_grad(const ConvGeom& g, const double* x, const double* y,
                 double* w) {
  RowMap dw(w, static_cast<Eigen::Index>(g.out_ch),
            static_cast<Eigen::Index>(g.in_ch * g.kh * g.kw));
  dw.noalias() += gather_outputs(g, y) * im2col(g, x).transpose();
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double softplus(double t) {
  if (t > 0) return t + std::log1p(std::exp(-t));
  return std::log1p(std::exp(t));
}

Var elementwise(UnaryOp op, Var a) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (op) {
      case UnaryOp::kNeg: y[i] = -v; break;
      case UnaryOp::kRelu: y[i] = v > 0 ? v : 0.0; break;
      case UnaryOp::kTanh: y[i] = std::tanh(v); break;
      case UnaryOp::kSoftplus: y[i] = softplus(v); break;
      case UnaryOp::kExp: y[i] = std::exp(v); break;
      case UnaryOp::kLog:
        require(v > 0, ErrorCode::kNonFinite, "log of non-positive value");
        y[i] = std::log(v);
        break;
    }
  }
  return a.tape().record(
      std::move(y), {a}, [a, op](const Tensor& g, std::span<Tensor* const> in) {
        const Tensor& x = a.value();
        Tensor& dx = *in[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double v = x[i];
          double d = 0.0;
          switch (op) {
            case UnaryOp::kNeg: d = -1.0; break;
            case UnaryOp::kRelu: d = v > 0 ? 1.0 : 0.0; break;
            case UnaryOp::kTanh: {
              const double t = std::tanh(v);
              d = 1.0 - t * t;
              break;
            }
            case UnaryOp::kSoftplus:
              d = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                         : std::exp(v) / (1.0 + std::exp(v));
              break;
            case UnaryOp::kExp: d = std::exp(v); break;
            case UnaryOp::kLog: d = 1.0 / v; break;
          }
          dx[i] += g[i] * d;
        }
      });
}

Var elementwise(BinaryOp op, Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool a_scalar = x.size() == 1 && y.size() != 1;
  const bool b_scalar = y.size() == 1 && x.size() != 1;
  require(a_scalar || b_scalar || x.shape() == y.shape(),
          ErrorCode::kShapeMismatch,
          "elementwise shape mismatch " + shape_string(x.shape()) + " vs " +
              shape_string(y.shape()));
  const Shape& out_shape = a_scalar ? y.shape() : x.shape();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = x[a_scalar ? 0 : i];
    const double w = y[b_scalar ? 0 : i];
    switch (op) {
      case BinaryOp::kAdd: out[i] = u + w; break;
      case BinaryOp::kSub: out[i] = u - w; break;
      case BinaryOp::kMul: out[i] = u * w; break;
    }
  }
  return a.tape().record(
      std::move(out), {a, b},
      [a, b, op, a_scalar, b_scalar](const Tensor& g,
                                     std::span<Tensor* const> in) {
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ia = a_scalar ? 0 : i;
          const std::size_t ib = b_scalar ? 0 : i;
          double da = 0.0, db = 0.0;
          switch (op) {
            case BinaryOp::kAdd: da = 1.0; db = 1.0; break;
            case BinaryOp::kSub: da = 1.0; db = -1.0; break;
            case BinaryOp::kMul: da = y[ib]; db = x[ia]; break;
          }
          if (in[0]) (*in[0])[ia] += g[i] * da;
          if (in[1]) (*in[1])[ib] += g[i] * db;
        }
      });
}

Var scale(Var a, double factor) {
  Tensor y = a.value();
  for (auto& v : y.data()) v *= factor;
  return a.tape().record(std::move(y), {a},
                         [factor](const Tensor& g, std::span<Tensor* const> in) {
                           Tensor& dx = *in[0];
                           for (std::size_t i = 0; i < g.size(); ++i)
                             dx[i] += g[i] * factor;
                         });
}

Var add_scalar(Var a, double offset) {
  Tensor y = a.value();
  for (auto& v : y.data()) v += offset;
  return a.tape().record(std::move(y), {a},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           *in[0] += g;
                         });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           const double gv = g[0];
                           for (auto& v : in[0]->data()) v += gv;
                         });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  require(n > 0, ErrorCode::kShapeMismatch, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var matmul(Var a, Var b) {
  expect_rank(a, 2, "matmul");
  expect_rank(b, 2, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  require(y.dim(0) == k, ErrorCode::kShapeMismatch,
          "matmul inner dims " + shape_string(x.shape()) + " . " +
              shape_string(y.shape()));
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  Tensor out({m, n});
  RowMap(out.data().data(), M, N).noalias() =
      ConstRowMap(x.data().data(), M, K) * ConstRowMap(y.data().data(), K, N);
  return a.tape().record(
      std::move(out), {a, b},
      [a, b, M, K, N](const Tensor& g, std::span<Tensor* const> in) {
        const ConstRowMap gm(g.data().data(), M, N);
        if (in[0])  // dA = dC . B^T
          RowMap(in[0]->data().data(), M, K).noalias() +=
              gm * ConstRowMap(b.value().data().data(), K, N).transpose();
        if (in[1])  // dB = A^T . dC
          RowMap(in[1]->data().data(), K, N).noalias() +=
              ConstRowMap(a.value().data().data(), M, K).transpose() * gm;
      });
}

Var add_bias(Var x, Var bias) {
  expect_rank(x, 2, "add_bias");
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  require(bias.value().size() == cols, ErrorCode::kShapeMismatch,
          "add_bias: bias " + shape_string(bias.shape()) + " for " +
              shape_string(x.shape()));
  Tensor out = x.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return x.tape().record(
      std::move(out), {x, bias},
      [rows, cols](const Tensor& g, std::span<Tensor* const> in) {
        if (in[0]) *in[0] += g;
        if (in[1])
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              (*in[1])[c] += g[r * cols + c];
      });
}

Var add_channel_bias(Var x, Var bias) {
  expect_rank(x, 4, "add_channel_bias");
  const Shape& s = x.shape();
  const std::size_t batch = s[0], ch = s[1], plane = s[2] * s[3];
  require(bias.value().size() == ch, ErrorCode::kShapeMismatch,
          "add_channel_bias: bias " + shape_string(bias.shape()) + " for " +
              shape_string(s));
  Tensor out = x.value();
  const Tensor& bv = bias.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = &out[(b * ch + c) * plane];
      for (std::size_t i = 0; i < plane; ++i) p[i] += bv[c];
    }
  return x.tape().record(
      std::move(out), {x, bias},
      [batch, ch, plane](const Tensor& g, std::span<Tensor* const> in) {
        if (in[0]) *in[0] += g;
        if (in[1])
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c) {
              const double* p = &g[(b * ch + c) * plane];
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += p[i];
              (*in[1])[c] += acc;
            }
      });
}

Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad) {
  expect_rank(x, 4, "conv2d");
  expect_rank(w, 4, "conv2d");
  require(stride >= 1, ErrorCode::kInvalidArgument, "conv2d: stride must be >= 1");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(ws[1] == xs[1], ErrorCode::kShapeMismatch,
          "conv2d: kernel " + shape_string(ws) + " vs input " + shape_string(xs));
  require(ws[2] <= xs[2] + 2 * pad && ws[3] <= xs[3] + 2 * pad,
          ErrorCode::kShapeMismatch,
          "conv2d: kernel larger than padded input");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0],
             (xs[2] + 2 * pad - ws[2]) / stride + 1,
             (xs[3] + 2 * pad - ws[3]) / stride + 1,
             ws[2], ws[3], stride, pad};
  Tensor out({g.batch, g.out_ch, g.out_h, g.out_w});
  correlate(g, x.value().data().data(), w.value().data().data(),
            out.data().data());
  return x.tape().record(
      std::move(out), {x, w},
      [x, w, g](const Tensor& grad, std::span<Tensor* const> in) {
        if (in[0])
          scatter(g, grad.data().data(), w.value().data().data(),
                  in[0]->data().data());
        if (in[1])
          weight_grad(g, x.value().data().data(), grad.data().data(),
                      in[1]->data().data());
      });
}

Var conv_transpose2d(Var x, Var w, std::size_t stride, std::size_t pad) {
  expect_rank(x, 4, "conv_transpose2d");
  expect_rank(w, 4, "conv_transpose2d");
  require(stride >= 1, ErrorCode::kInvalidArgument,
          "conv_transpose2d: stride must be >= 1");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(ws[0] == xs[1], ErrorCode::kShapeMismatch,
          "conv_transpose2d: kernel " + shape_string(ws) + " vs input " +
              shape_string(xs));
  const long long oh = static_cast<long long>((xs[2] - 1) * stride + ws[2]) -
                       2 * static_cast<long long>(pad);
  const long long ow = static_cast<long long>((xs[3] - 1) * stride + ws[3]) -
                       2 * static_cast<long long>(pad);
  require(oh > 0 && ow > 0, ErrorCode::kShapeMismatch,
          "conv_transpose2d: empty output");
  // Correlation view: input = this op's output, output = this op's input.
  ConvGeom g{xs[0], ws[1], static_cast<std::size_t>(oh),
             static_cast<std::size_t>(ow), ws[0], xs[2], xs[3],
             ws[2], ws[3], stride, pad};
  Tensor out({g.batch, g.in_ch, g.in_h, g.in_w});
  scatter(g, x.value().data().data(), w.value().data().data(),
          out.data().data());
  return x.tape().record(
      std::move(out), {x, w},
      [x, w, g](const Tensor& grad, std::span<Tensor* const> in) {
        if (in[0])
          correlate(g, grad.data().data(), w.value().data().data(),
                    in[0]->data().data());
        if (in[1])
          weight_grad(g, grad.data().data(), x.value().data().data(),
                      in[1]->data().data());
      });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           Tensor& dx = *in[0];
                           for (std::size_t i = 0; i < g.size(); ++i)
                             dx[i] += g[i];
                         });
}

Var concat_cols(Var a, Var b) {
  expect_rank(a, 2, "concat_cols");
  expect_rank(b, 2, "concat_cols");
  const std::size_t rows = a.value().dim(0);
  require(b.value().dim(0) == rows, ErrorCode::kShapeMismatch,
          "concat_cols row mismatch");
  const std::size_t ca = a.value().dim(1), cb = b.value().dim(1);
  Tensor out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&a.value()[r * ca], ca, &out[r * (ca + cb)]);
    std::copy_n(&b.value()[r * cb], cb, &out[r * (ca + cb) + ca]);
  }
  return a.tape().record(
      std::move(out), {a, b},
      [rows, ca, cb](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < rows; ++r) {
          if (in[0])
            for (std::size_t c = 0; c < ca; ++c)
              (*in[0])[r * ca + c] += g[r * (ca + cb) + c];
          if (in[1])
            for (std::size_t c = 0; c < cb; ++c)
              (*in[1])[r * cb + c] += g[r * (ca + cb) + ca + c];
        }
      });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  expect_rank(a, 2, "slice_cols");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  require(start + count <= cols, ErrorCode::kShapeMismatch,
          "slice_cols out of range");
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(&a.value()[r * cols + start], count, &out[r * count]);
  return a.tape().record(
      std::move(out), {a},
      [rows, cols, start, count](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < count; ++c)
            (*in[0])[r * cols + start + c] += g[r * count + c];
      });
}

Var concat_channels(Var a, Var b) {
  expect_rank(a, 4, "concat_channels");
  expect_rank(b, 4, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
          ErrorCode::kShapeMismatch,
          "concat_channels " + shape_string(sa) + " vs " + shape_string(sb));
  const std::size_t batch = sa[0], plane = sa[2] * sa[3];
  const std::size_t na = sa[1] * plane, nb = sb[1] * plane;
  Tensor out({batch, sa[1] + sb[1], sa[2], sa[3]});
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(&a.value()[i * na], na, &out[i * (na + nb)]);
    std::copy_n(&b.value()[i * nb], nb, &out[i * (na + nb) + na]);
  }
  return a.tape().record(
      std::move(out), {a, b},
      [batch, na, nb](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t i = 0; i < batch; ++i) {
          if (in[0])
            for (std::size_t k = 0; k < na; ++k)
              (*in[0])[i * na + k] += g[i * (na + nb) + k];
          if (in[1])
            for (std::size_t k = 0; k < nb; ++k)
              (*in[1])[i * nb + k] += g[i * (na + nb) + na + k];
        }
      });
}

Var tile_spatial(Var z, std::size_t height, std::size_t width) {
  expect_rank(z, 2, "tile_spatial");
  const std::size_t batch = z.value().dim(0), k = z.value().dim(1);
  const std::size_t plane = height * width;
  Tensor out({batch, k, height, width});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < k; ++c)
      std::fill_n(&out[(b * k + c) * plane], plane, z.value()[b * k + c]);
  return z.tape().record(
      std::move(out), {z},
      [batch, k, plane](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t i = 0; i < batch * k; ++i) {
          double acc = 0.0;
          for (std::size_t p = 0; p < plane; ++p) acc += g[i * plane + p];
          (*in[0])[i] += acc;
        }
      });
}

Var global_avg_pool(Var x) {
  expect_rank(x, 4, "global_avg_pool");
  const Shape& s = x.shape();
  const std::size_t rows = s[0] * s[1], plane = s[2] * s[3];
  Tensor out({s[0], s[1]});
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += x.value()[i * plane + p];
    out[i] = acc / static_cast<double>(plane);
  }
  return x.tape().record(
      std::move(out), {x},
      [rows, plane](const Tensor& g, std::span<Tensor* const> in) {
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t p = 0; p < plane; ++p)
            (*in[0])[i * plane + p] += g[i] * inv;
      });
}

Var avg_pool(Var x, std::size_t factor) {
  expect_rank(x, 4, "avg_pool");
  const Shape& s = x.shape();
  require(factor >= 1 && s[2] % factor == 0 && s[3] % factor == 0,
          ErrorCode::kShapeMismatch,
          "avg_pool: factor " + std::to_string(factor) + " does not divide " +
              shape_string(s));
  if (factor == 1) return x;
  const std::size_t rows = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out({s[0], s[1], oh, ow});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(r * oh + y / factor) * ow + xx / factor] +=
            x.value()[(r * h + y) * w + xx] * inv;
  return x.tape().record(
      std::move(out), {x},
      [rows, h, w, oh, ow, factor, inv](const Tensor& g,
                                        std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
              (*in[0])[(r * h + y) * w + xx] +=
                  g[(r * oh + y / factor) * ow + xx / factor] * inv;
      });
}

Var stop_gradient(Var a) { return a.tape().constant(a.value()); }

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  expect_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t rows = logits.value().dim(0), k = logits.value().dim(1);
  require(labels.size() == rows, ErrorCode::kShapeMismatch,
          "softmax_cross_entropy: label count mismatch");
  Tensor probs({rows, k});
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < k,
            ErrorCode::kInvalidArgument, "label out of range");
    const double* row = &logits.value()[r * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] = std::exp(row[c] - mx) / z;
    loss -= row[labels[r]] - mx - std::log(z);
  }
  loss /= static_cast<double>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor::scalar(loss), {logits},
      [probs = std::move(probs), lab = std::move(lab), rows, k](
          const Tensor& g, std::span<Tensor* const> in) {
        const double scale_ = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < k; ++c) {
            double d = probs[r * k + c] - (static_cast<int>(c) == lab[r] ? 1.0 : 0.0);
            (*in[0])[r * k + c] += scale_ * d;
          }
      });
}

Var batch_stats_normalize(Var x, NormMode mode, BatchNormState& state,
                          bool update_running, Var gamma, Var beta) {
  const Shape& s = x.shape();
  require(s.size() == 2 || s.size() == 4, ErrorCode::kShapeMismatch,
          "batch_stats_normalize expects 2-D or 4-D input, got " +
              shape_string(s));
  const std::size_t batch = s[0], feat = s[1];
  const std::size_t spatial = s.size() == 4 ? s[2] * s[3] : 1;
  const double count = static_cast<double>(batch * spatial);
  if (gamma.valid())
    require(gamma.value().size() == feat, ErrorCode::kShapeMismatch,
            "batch norm scale size");
  if (beta.valid())
    require(beta.value().size() == feat, ErrorCode::kShapeMismatch,
            "batch norm offset size");

  const Tensor& xv = x.value();
  auto idx = [&](std::size_t b, std::size_t f, std::size_t p) {
    return (b * feat + f) * spatial + p;
  };

  Tensor mu({feat}), inv_std({feat});
  if (mode == NormMode::kTrain) {
    require(batch >= 2, ErrorCode::kInvalidArgument,
            "batch_stats_normalize: train mode needs batch >= 2");
    Tensor var({feat});
    for (std::size_t f = 0; f < feat; ++f) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) acc += xv[idx(b, f, p)];
      mu[f] = acc / count;
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) {
          const double d = xv[idx(b, f, p)] - mu[f];
          sq += d * d;
        }
      var[f] = sq / count;
      inv_std[f] = 1.0 / std::sqrt(var[f] + BatchNormState::kEpsilon);
    }
    if (update_running) {
      if (state.mean.size() != feat) {
        state.mean = Tensor({feat}, 0.0);
        state.var = Tensor({feat}, 1.0);
      }
      const double m = BatchNormState::kMomentum;
      for (std::size_t f = 0; f < feat; ++f) {
        state.mean[f] = m * state.mean[f] + (1.0 - m) * mu[f];
        state.var[f] = m * state.var[f] + (1.0 - m) * var[f];
      }
      ++state.updates;
    }
  } else {
    require(state.updates > 0 && state.mean.size() == feat, ErrorCode::kState,
            "batch_stats_normalize: eval mode before any running-moment update");
    for (std::size_t f = 0; f < feat; ++f) {
      mu[f] = state.mean[f];
      inv_std[f] = 1.0 / std::sqrt(state.var[f] + BatchNormState::kEpsilon);
    }
  }

  Tensor xhat(s), out(s);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < feat; ++f) {
      const double gm = gamma.valid() ? gamma.value()[f] : 1.0;
      const double bt = beta.valid() ? beta.value()[f] : 0.0;
      for (std::size_t p = 0; p < spatial; ++p) {
        const std::size_t i = idx(b, f, p);
        xhat[i] = (xv[i] - mu[f]) * inv_std[f];
        out[i] = gm * xhat[i] + bt;
      }
    }

  const bool train = mode == NormMode::kTrain;
  Tape& tape = x.tape();
  BackwardFn fn = [xhat = std::move(xhat), inv_std, gamma, batch, feat,
                   spatial, count, train](const Tensor& g,
                                          std::span<Tensor* const> in) {
    auto idx = [&](std::size_t b, std::size_t f, std::size_t p) {
      return (b * feat + f) * spatial + p;
    };
    for (std::size_t f = 0; f < feat; ++f) {
      const double gm = gamma.valid() ? gamma.value()[f] : 1.0;
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) {
          const std::size_t i = idx(b, f, p);
          sum_g += g[i];
          sum_gx += g[i] * xhat[i];
        }
      if (in[1]) (*in[1])[f] += sum_gx;
      if (in[2]) (*in[2])[f] += sum_g;
      if (!in[0]) continue;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) {
          const std::size_t i = idx(b, f, p);
          double d = g[i];
          if (train) d = d - sum_g / count - xhat[i] * sum_gx / count;
          (*in[0])[i] += gm * inv_std[f] * d;
        }
    }
  };
  // Missing gamma/beta are recorded as constants so the input slots line up.
  Var g_in = gamma.valid() ? gamma : tape.constant(Tensor({feat}, 1.0));
  Var b_in = beta.valid() ? beta : tape.constant(Tensor({feat}, 0.0));
  return tape.record(std::move(out), {x, g_in, b_in}, std::move(fn));
}

SpectralNormResult spectral_normalize(Var w, Tensor& u, Tensor& v, int iters,
                                      bool update) {
  const Tensor& wv = w.value();
  require(wv.rank() >= 2, ErrorCode::kShapeMismatch,
          "spectral_normalize needs a matrix or conv kernel");
  const std::size_t rows = wv.dim(0), cols = wv.size() / rows;
  require(u.size() == rows && v.size() == cols, ErrorCode::kShapeMismatch,
          "spectral_normalize: singular vector sizes do not match " +
              shape_string(wv.shape()));
  Tensor uu = u, vv = v;
  auto mat_t_vec = [&](const Tensor& a, Tensor& out) {  // W^T a
    out.fill(0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[c] += wv[r * cols + c] * a[r];
  };
  auto mat_vec = [&](const Tensor& a, Tensor& out) {  // W a
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += wv[r * cols + c] * a[c];
      out[r] = acc;
    }
  };
  SpectralNormResult result;
  if (update) {
    for (int it = 0; it < iters; ++it) {
      mat_t_vec(uu, vv);
      const double nv = norm2(vv.data());
      if (nv == 0.0) break;
      for (auto& e : vv.data()) e /= nv;
      mat_vec(vv, uu);
      const double nu = norm2(uu.data());
      if (nu == 0.0) break;
      for (auto& e : uu.data()) e /= nu;
    }
  }
  Tensor wv_vec({rows});
  mat_vec(vv, wv_vec);
  double sigma = 0.0;
  for (std::size_t r = 0; r < rows; ++r) sigma += uu[r] * wv_vec[r];
  if (update && uu.all_finite() && vv.all_finite()) {
    u = uu;
    v = vv;
  }
  result.sigma = sigma;
  if (!(std::abs(sigma) > 0.0)) {
    result.degenerate = true;
    result.normalized = w;
    return result;
  }
  result.normalized = scale(w, 1.0 / sigma);
  return result;
}

}  // namespace bbg
