#include "dynasty/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "dynasty/error.hpp"

namespace dynasty {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void check_shape(const Shape& shape, std::size_t numel) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor shape " + shape_to_string(shape) + " has a zero extent");
  }
  if (shape_numel(shape) != numel) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(numel) + " values");
  }
}

}  // namespace

NdArray::NdArray(Shape s, double fill) : shape(std::move(s)), values(shape_numel(shape), fill) {}

NdArray::NdArray(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  check_shape(shape, values.size());
}

std::size_t NdArray::flat_index(std::span<const std::size_t> index) const {
  if (index.size() != shape.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " does not match shape " +
                         shape_to_string(shape));
  }
  std::size_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape[i]) throw DimensionError("index out of range for shape " + shape_to_string(shape));
    flat = flat * shape[i] + index[i];
  }
  return flat;
}

double& NdArray::at(std::initializer_list<std::size_t> index) {
  return values[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}

double NdArray::at(std::initializer_list<std::size_t> index) const {
  return values[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
};
}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape, values.size());
  auto data = std::make_shared<detail::TensorData>();
  data->shape = std::move(shape);
  data->values = std::move(values);
  data->requires_grad = requires_grad;
  return Tensor(std::move(data));
}

Tensor Tensor::from(const NdArray& array, bool requires_grad) {
  return from(array.shape, array.values, requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return data_->shape; }

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape()));
  }
  return data_->shape[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return data_->values.size(); }

std::span<const double> Tensor::values() const { return data_->values; }
std::span<double> Tensor::mutable_values() { return data_->values; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return data_->values[0];
}

bool Tensor::requires_grad() const { return data_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { data_->requires_grad = flag; }

bool Tensor::has_grad() const { return !data_->grad.empty(); }
std::span<const double> Tensor::grad() const { return data_->grad; }

std::span<double> Tensor::mutable_grad() const {
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() { data_->grad.assign(data_->values.size(), 0.0); }
void Tensor::clear_grad() {
  data_->grad.clear();
  data_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  auto data = std::make_shared<detail::TensorData>(*data_);
  return Tensor(std::move(data));
}

NdArray Tensor::to_array() const { return NdArray(data_->shape, data_->values); }

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::record(std::string kind, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
  records_.push_back(TapeRecord{std::move(kind), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (records_.empty()) throw ContractError("backward called on an empty tape");
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
  // Intermediate gradient buffers are released with the records; only leaves
  // (tensors never produced by a recorded op) keep theirs.
  for (auto& rec : records_) rec.output.clear_grad();
  records_.clear();
}

}  // namespace dynasty
