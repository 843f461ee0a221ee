#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bbg/autodiff.hpp"

namespace bbg {

enum class UnaryOp { kNeg, kRelu, kTanh, kSoftplus, kExp, kLog };
enum class BinaryOp { kAdd, kSub, kMul };

// Stable softplus: t + log1p(exp(-t)) for t > 0.
double softplus(double t);

Var elementwise(UnaryOp op, Var a);
// Shapes must match, except that either side may be a one-element tensor.
Var elementwise(BinaryOp op, Var a, Var b);

inline Var add(Var a, Var b) { return elementwise(BinaryOp::kAdd, a, b); }
inline Var sub(Var a, Var b) { return elementwise(BinaryOp::kSub, a, b); }
inline Var mul(Var a, Var b) { return elementwise(BinaryOp::kMul, a, b); }
inline Var neg(Var a) { return elementwise(UnaryOp::kNeg, a); }
inline Var relu(Var a) { return elementwise(UnaryOp::kRelu, a); }
inline Var tanh(Var a) { return elementwise(UnaryOp::kTanh, a); }
inline Var softplus(Var a) { return elementwise(UnaryOp::kSoftplus, a); }
inline Var exp(Var a) { return elementwise(UnaryOp::kExp, a); }
inline Var log(Var a) { return elementwise(UnaryOp::kLog, a); }

Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

Var sum(Var a);
Var mean(Var a);

// [m x k] . [k x n]
Var matmul(Var a, Var b);
// x[B x F] + b[F] per row.
Var add_bias(Var x, Var bias);
// x[B x C x H x W] + b[C] per channel.
Var add_channel_bias(Var x, Var bias);

// Cross-correlation. x[B x C x H x W], w[O x C x kh x kw].
Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad);
// Adjoint of conv2d. x[B x Cin x H x W], w[Cin x Cout x k x k];
// output extent (H - 1) * stride - 2 * pad + k.
Var conv_transpose2d(Var x, Var w, std::size_t stride, std::size_t pad);

Var reshape(Var a, Shape shape);
// [B x F1], [B x F2] -> [B x (F1 + F2)]
Var concat_cols(Var a, Var b);
// Columns [start, start + count) of a 2-D tensor.
Var slice_cols(Var a, std::size_t start, std::size_t count);
// Channel concatenation of two 4-D tensors with equal B, H, W.
Var concat_channels(Var a, Var b);
// z[B x k] -> [B x k x H x W], constant over space.
Var tile_spatial(Var z, std::size_t height, std::size_t width);
// [B x C x H x W] -> [B x C]
Var global_avg_pool(Var x);
// Area downsampling by an integer factor.
Var avg_pool(Var x, std::size_t factor);

Var stop_gradient(Var a);

// Mean softmax cross-entropy of logits[B x K] against integer labels.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

// Running moments for batch normalization over 2-D [B x F] or 4-D
// [B x C x H x W] inputs (per feature / per channel).
struct BatchNormState {
  Tensor mean;
  Tensor var;
  long updates = 0;

  static constexpr double kMomentum = 0.9;
  static constexpr double kEpsilon = 1e-5;
};

enum class NormMode { kTrain, kEval };

// Train mode normalizes by batch moments and, when update_running is set,
// folds them into state (running = 0.9 * running + 0.1 * batch). Eval mode
// uses the running moments. gamma/beta are optional (pass invalid Vars for
// the parameter-free form).
Var batch_stats_normalize(Var x, NormMode mode, BatchNormState& state,
                          bool update_running, Var gamma = Var(),
                          Var beta = Var());

struct SpectralNormResult {
  Var normalized;
  double sigma = 0.0;
  bool degenerate = false;  // sigma == 0; weight returned unchanged
};

// Divides w (viewed as dim(0) x rest) by the power-iteration estimate of its
// top singular value. u has dim(0) entries, v has the remaining product. When
// update is set, runs `iters` power iterations and writes the vectors back.
// sigma is a constant for differentiation.
SpectralNormResult spectral_normalize(Var w, Tensor& u, Tensor& v, int iters,
                                      bool update);

}  // namespace bbg
