#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "dynasty/random.hpp"
#include "dynasty/tensor.hpp"

namespace dynasty {

// Differentiable operations. Every op checks operand shapes, computes its
// output eagerly and, when a tape is active and an operand requires a
// gradient, records its backward rule. Outputs are checked for NaN/Inf.
//
// Broadcasting is limited to leading batch axes: for binary elementwise ops
// one operand's shape must equal the other's or be a suffix of it.
namespace ops {

// a: [..., m, k], b: [..., k, n] (or [..., n, k] with transpose_b). Leading
// batch axes must match, or one operand has none and is broadcast.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor permute(const Tensor& a, std::span<const std::size_t> order);

Tensor softmax(const Tensor& a, int axis);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor maximum(const Tensor& a, double floor);

// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
// train is false or rate is 0.
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool train);

Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Normalizes over the last axis, then applies gain and offset of shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps = 1e-5);

}  // namespace ops

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  concat,
  slice,
  reshape,
  transpose,
  permute,
  softmax,
  sigmoid,
  tanh,
  relu,
  dropout,
  sum,
  mean,
  sum_all,
  mean_all,
  abs,
  square,
  sqrt,
  maximum,
  layer_norm,
};

// Throws ConfigError for names that are not op kinds.
OpKind parse_op_kind(std::string_view name);
std::string_view op_kind_name(OpKind kind);

struct OpAttrs {
  int axis = -1;
  int axis1 = -2;
  double scalar = 0.0;
  std::size_t start = 0;
  std::size_t length = 0;
  Shape shape;
  std::vector<std::size_t> order;
  bool transpose_b = false;
  double rate = 0.0;
  bool train = false;
  Rng* rng = nullptr;
  double eps = 1e-5;
};

// Generic dispatcher over OpKind.
Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

}  // namespace dynasty
