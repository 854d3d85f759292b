#include "dynasty/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>

#include "dynasty/error.hpp"
#include "dynasty/random.hpp"

namespace dynasty {
namespace ops {
namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool recording(std::span<const Tensor> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor finish(const char* kind, Shape shape, std::vector<double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(kind) + " produced a non-finite value");
  }
  return Tensor::from(std::move(shape), std::move(values));
}

void record(const char* kind, std::vector<Tensor> inputs, Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  active_tape()->record(kind, std::move(inputs), out, std::move(fn));
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* kind) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(kind) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

[[noreturn]] void shape_mismatch(const char* kind, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(kind) + ": incompatible shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()));
}

// Visits (output, a, b) flat indices; the smaller operand repeats over the
// leading axes of the larger one.
template <class Fn>
void for_each_pair(std::size_t n, std::size_t na, std::size_t nb, Fn fn) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
  } else if (na == n) {
    for (std::size_t i = 0; i < n; i += nb)
      for (std::size_t j = 0; j < nb; ++j) fn(i + j, i + j, j);
  } else {
    for (std::size_t i = 0; i < n; i += na)
      for (std::size_t j = 0; j < na; ++j) fn(i + j, j, i + j);
  }
}

// Elementwise binary op with leading-axis broadcasting. DA/DB map
// (upstream grad, a value, b value) to the partial contribution.
template <class F, class DA, class DB>
Tensor binary(const char* kind, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  bool a_big;
  if (a.shape() == b.shape() || is_suffix(b.shape(), a.shape())) {
    a_big = true;
  } else if (is_suffix(a.shape(), b.shape())) {
    a_big = false;
  } else {
    shape_mismatch(kind, a, b);
  }
  const Shape& out_shape = a_big ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  Tensor result = finish(kind, out_shape, std::move(out));
  if (recording({&a, &b})) {
    record(kind, {a, b}, result, [a, b, result, n, na, nb, da, db]() mutable {
      const auto g = result.grad();
      const auto av = a.values();
      const auto bv = b.values();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for_each_pair(n, na, nb,
                      [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += da(g[i], av[ia], bv[ib]); });
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for_each_pair(n, na, nb,
                      [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += db(g[i], av[ia], bv[ib]); });
      }
    });
  }
  return result;
}

// DF maps (upstream grad, input value, output value) to the input gradient.
template <class F, class DF>
Tensor unary(const char* kind, const Tensor& a, F f, DF df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tensor result = finish(kind, a.shape(), std::move(out));
  if (recording({&a})) {
    record(kind, {a}, result, [a, result, df]() mutable {
      const auto g = result.grad();
      const auto x = a.values();
      const auto y = result.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += df(g[i], x[i], y[i]);
    });
  }
  return result;
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += s * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[p];
      double* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += s * b[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a, b);
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) shape_mismatch("matmul", a, b);
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  if (lead_a == lead_b || lead_b.empty()) {
    lead = lead_a;
  } else if (lead_a.empty()) {
    lead = lead_b;
  } else {
    shape_mismatch("matmul", a, b);
  }
  const std::size_t batch = shape_numel(lead);
  const std::size_t step_a = lead_a.empty() ? 0 : m * k;
  const std::size_t step_b = lead_b.empty() ? 0 : k * n;
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  if (!transpose_b && step_a != 0 && step_b == 0) {
    // Weight broadcast over the batch: one tall product.
    gemm_nn(A, B, out.data(), batch * m, k, n);
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      if (transpose_b)
        gemm_nt(A + s * step_a, B + s * step_b, out.data() + s * m * n, m, k, n);
      else
        gemm_nn(A + s * step_a, B + s * step_b, out.data() + s * m * n, m, k, n);
    }
  }
  Tensor result = finish("matmul", std::move(out_shape), std::move(out));
  if (recording({&a, &b})) {
    record("matmul", {a, b}, result, [a, b, result, batch, m, k, n, step_a, step_b, transpose_b]() mutable {
      const double* G = result.grad().data();
      const double* A = a.values().data();
      const double* B = b.values().data();
      if (a.requires_grad()) {
        double* GA = a.mutable_grad().data();
        if (!transpose_b && step_a != 0 && step_b == 0) {
          gemm_nt(G, B, GA, batch * m, n, k);
        } else {
          for (std::size_t s = 0; s < batch; ++s) {
            if (transpose_b)
              gemm_nn(G + s * m * n, B + s * step_b, GA + s * step_a, m, n, k);
            else
              gemm_nt(G + s * m * n, B + s * step_b, GA + s * step_a, m, n, k);
          }
        }
      }
      if (b.requires_grad()) {
        double* GB = b.mutable_grad().data();
        if (!transpose_b && step_a != 0 && step_b == 0) {
          gemm_tn(A, G, GB, batch * m, k, n);
        } else {
          for (std::size_t s = 0; s < batch; ++s) {
            if (transpose_b)
              gemm_tn(G + s * m * n, A + s * step_a, GB + s * step_b, m, n, k);
            else
              gemm_tn(A + s * step_a, G + s * m * n, GB + s * step_b, m, k, n);
          }
        }
      }
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double g, double, double) { return g * factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      "add_scalar", a, [value](double x) { return x + value; }, [](double g, double, double) { return g; });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    Shape expect = parts[0].shape();
    Shape got = p.shape();
    if (got.size() != expect.size()) shape_mismatch("concat", parts[0], p);
    expect[ax] = got[ax] = 0;
    if (got != expect) shape_mismatch("concat", parts[0], p);
    out_shape[ax] += p.shape()[ax];
  }
  const AxisSplit os = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[ax] * os.inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * os.extent * os.inner + offset * os.inner));
    }
    offset += p.shape()[ax];
  }
  Tensor result = finish("concat", out_shape, std::move(out));
  if (recording(parts)) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat", inputs, result, [inputs, result, offsets, os, ax]() mutable {
      const auto g = result.grad();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor& p = inputs[i];
        if (!p.requires_grad()) continue;
        auto gp = p.mutable_grad();
        const std::size_t chunk = p.shape()[ax] * os.inner;
        for (std::size_t o = 0; o < os.outer; ++o) {
          const double* src = g.data() + o * os.extent * os.inner + offsets[i] * os.inner;
          double* dst = gp.data() + o * chunk;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
  if (length == 0 || start + length > a.shape()[ax]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for shape " + shape_to_string(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto av = a.values();
  const std::size_t chunk = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner + start * s.inner), chunk,
                out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  Tensor result = finish("slice", std::move(out_shape), std::move(out));
  if (recording({&a})) {
    record("slice", {a}, result, [a, result, s, start, chunk]() mutable {
      const auto g = result.grad();
      auto ga = a.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = ga.data() + o * s.extent * s.inner + start * s.inner;
        const double* src = g.data() + o * chunk;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  Tensor result = finish("reshape", std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  if (recording({&a})) {
    record("reshape", {a}, result, [a, result]() mutable {
      const auto g = result.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& a, std::span<const std::size_t> order) {
  const std::size_t r = a.rank();
  std::vector<bool> seen(r, false);
  if (order.size() != r) throw DimensionError("permute: order length does not match rank of " + shape_to_string(a.shape()));
  for (std::size_t o : order) {
    if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order for " + shape_to_string(a.shape()));
    seen[o] = true;
  }
  const Shape& in_shape = a.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t n = a.numel();
  auto source = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    (*source)[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  const auto av = a.values();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = av[(*source)[o]];
  Tensor result = finish("permute", std::move(out_shape), std::move(out));
  if (recording({&a})) {
    record("permute", {a}, result, [a, result, source]() mutable {
      const auto g = result.grad();
      auto ga = a.mutable_grad();
      for (std::size_t o = 0; o < g.size(); ++o) ga[(*source)[o]] += g[o];
    });
  }
  return result;
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  const std::size_t i = normalize_axis(axis0, a.rank(), "transpose");
  const std::size_t j = normalize_axis(axis1, a.rank(), "transpose");
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[i], order[j]);
  return permute(a, order);
}

Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = av[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, av[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(av[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  Tensor result = finish("softmax", a.shape(), std::move(out));
  if (recording({&a})) {
    record("softmax", {a}, result, [a, result, s]() mutable {
      const auto g = result.grad();
      const auto y = result.values();
      auto ga = a.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double dot = 0.0;
          for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * y[base + e * s.inner];
          for (std::size_t e = 0; e < s.extent; ++e) {
            const std::size_t i = base + e * s.inner;
            ga[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double g, double x, double) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double g, double x, double) { return 2.0 * x * g; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a,
      [](double x) {
        if (x < 0.0) throw NumericError("sqrt of a negative value");
        return std::sqrt(x);
      },
      [](double g, double, double y) {
        if (y == 0.0) {
          if (g == 0.0) return 0.0;
          throw NumericError("sqrt gradient at zero is unbounded");
        }
        return 0.5 * g / y;
      });
}

Tensor maximum(const Tensor& a, double floor) {
  return unary(
      "maximum", a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double g, double x, double) { return x > floor ? g : 0.0; });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool train) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  for (double& m : *mask) m = bernoulli(rng, rate) ? 0.0 : keep_scale;
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * (*mask)[i];
  Tensor result = finish("dropout", a.shape(), std::move(out));
  if (recording({&a})) {
    record("dropout", {a}, result, [a, result, mask]() mutable {
      const auto g = result.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
    });
  }
  return result;
}

Tensor sum(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "sum");
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape.push_back(1);
  const auto av = a.values();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += av[(o * s.extent + e) * s.inner + in];
  Tensor result = finish("sum", std::move(out_shape), std::move(out));
  if (recording({&a})) {
    record("sum", {a}, result, [a, result, s]() mutable {
      const auto g = result.grad();
      auto ga = a.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
          for (std::size_t in = 0; in < s.inner; ++in) ga[(o * s.extent + e) * s.inner + in] += g[o * s.inner + in];
    });
  }
  return result;
}

Tensor mean(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "mean");
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor result = finish("sum_all", {1}, {total});
  if (recording({&a})) {
    record("sum_all", {a}, result, [a, result]() mutable {
      const double g = result.grad()[0];
      for (double& x : a.mutable_grad()) x += g;
    });
  }
  return result;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || offset.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain " + shape_to_string(gain.shape()) + " / offset " +
                         shape_to_string(offset.shape()) + " do not match input " + shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto ov = offset.values();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + ov[j];
    }
  }
  Tensor result = finish("layer_norm", x.shape(), std::move(out));
  if (recording({&x, &gain, &offset})) {
    record("layer_norm", {x, gain, offset}, result, [x, gain, offset, result, xhat, inv, rows, d]() mutable {
      const auto g = result.grad();
      const auto gv = gain.values();
      if (gain.requires_grad()) {
        auto gg = gain.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
      }
      if (offset.requires_grad()) {
        auto go = offset.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) go[j] += g[r * d + j];
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        const double invd = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0;
          double m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gv[j];
            m1 += dh;
            m2 += dh * (*xhat)[r * d + j];
          }
          m1 *= invd;
          m2 *= invd;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gv[j];
            gx[r * d + j] += (*inv)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
          }
        }
      }
    });
  }
  return result;
}

}  // namespace ops

namespace {
constexpr std::array<std::pair<OpKind, std::string_view>, 26> kOpNames{{
    {OpKind::matmul, "matmul"},       {OpKind::add, "add"},
    {OpKind::sub, "sub"},             {OpKind::mul, "mul"},
    {OpKind::div, "div"},             {OpKind::scale, "scale"},
    {OpKind::add_scalar, "add_scalar"}, {OpKind::concat, "concat"},
    {OpKind::slice, "slice"},         {OpKind::reshape, "reshape"},
    {OpKind::transpose, "transpose"}, {OpKind::permute, "permute"},
    {OpKind::softmax, "softmax"},     {OpKind::sigmoid, "sigmoid"},
    {OpKind::tanh, "tanh"},           {OpKind::relu, "relu"},
    {OpKind::dropout, "dropout"},     {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},           {OpKind::sum_all, "sum_all"},
    {OpKind::mean_all, "mean_all"},   {OpKind::abs, "abs"},
    {OpKind::square, "square"},       {OpKind::sqrt, "sqrt"},
    {OpKind::maximum, "maximum"},     {OpKind::layer_norm, "layer_norm"},
}};
}  // namespace

OpKind parse_op_kind(std::string_view name) {
  for (const auto& [kind, n] : kOpNames) {
    if (n == name) return kind;
  }
  throw ConfigError("unknown op kind '" + std::string(name) + "'");
}

std::string_view op_kind_name(OpKind kind) {
  for (const auto& [k, n] : kOpNames) {
    if (k == kind) return n;
  }
  throw ConfigError("unknown op kind " + std::to_string(static_cast<int>(kind)));
}

Tensor apply(OpKind kind, std::span<const Tensor> in, const OpAttrs& at) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ContractError(std::string(op_kind_name(kind)) + " expects " + std::to_string(n) + " operand(s), got " +
                          std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return ops::matmul(in[0], in[1], at.transpose_b);
    case OpKind::add: need(2); return ops::add(in[0], in[1]);
    case OpKind::sub: need(2); return ops::sub(in[0], in[1]);
    case OpKind::mul: need(2); return ops::mul(in[0], in[1]);
    case OpKind::div: need(2); return ops::div(in[0], in[1]);
    case OpKind::scale: need(1); return ops::scale(in[0], at.scalar);
    case OpKind::add_scalar: need(1); return ops::add_scalar(in[0], at.scalar);
    case OpKind::concat: return ops::concat(in, at.axis);
    case OpKind::slice: need(1); return ops::slice(in[0], at.axis, at.start, at.length);
    case OpKind::reshape: need(1); return ops::reshape(in[0], at.shape);
    case OpKind::transpose: need(1); return ops::transpose(in[0], at.axis, at.axis1);
    case OpKind::permute: need(1); return ops::permute(in[0], at.order);
    case OpKind::softmax: need(1); return ops::softmax(in[0], at.axis);
    case OpKind::sigmoid: need(1); return ops::sigmoid(in[0]);
    case OpKind::tanh: need(1); return ops::tanh(in[0]);
    case OpKind::relu: need(1); return ops::relu(in[0]);
    case OpKind::dropout: {
      need(1);
      if (at.train && at.rng == nullptr) throw ContractError("dropout in train mode needs an rng");
      Rng unused;
      return ops::dropout(in[0], at.rate, at.rng ? *at.rng : unused, at.train);
    }
    case OpKind::sum: need(1); return ops::sum(in[0], at.axis);
    case OpKind::mean: need(1); return ops::mean(in[0], at.axis);
    case OpKind::sum_all: need(1); return ops::sum_all(in[0]);
    case OpKind::mean_all: need(1); return ops::mean_all(in[0]);
    case OpKind::abs: need(1); return ops::abs(in[0]);
    case OpKind::square: need(1); return ops::square(in[0]);
    case OpKind::sqrt: need(1); return ops::sqrt(in[0]);
    case OpKind::maximum: need(1); return ops::maximum(in[0], at.scalar);
    case OpKind::layer_norm: need(3); return ops::layer_norm(in[0], in[1], in[2], at.eps);
  }
  throw ConfigError("unknown op kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace dynasty
