#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dynasty {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Plain value-semantics n-d array. Used for data that never takes part in
// differentiation (datasets, masks, oracles).
struct NdArray {
  Shape shape;
  std::vector<double> values;

  NdArray() = default;
  explicit NdArray(Shape s, double fill = 0.0);
  NdArray(Shape s, std::vector<double> v);

  std::size_t numel() const { return values.size(); }
  std::size_t flat_index(std::span<const std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  bool operator==(const NdArray&) const = default;
};

namespace detail {
struct TensorData;
}

// Shared handle onto a dense row-major array of doubles with an optional
// gradient buffer. Copying a Tensor aliases the same storage; use clone() for
// a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor from(const NdArray& array, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use. Const because a Tensor is
  // a handle: backward rules accumulate through captured copies.
  std::span<double> mutable_grad() const;
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  NdArray to_array() const;
  bool same_storage(const Tensor& other) const { return data_ == other.data_; }
  const void* id() const { return data_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> data) : data_(std::move(data)) {}
  std::shared_ptr<detail::TensorData> data_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// A recorded operation: operands, result and the rule that pushes the
// result's gradient back into the operands.
struct TapeRecord {
  std::string kind;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
};

// Records operations for one forward pass. Ops record onto the tape that is
// active on the calling thread (see TapeScope) whenever an operand requires
// a gradient.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string kind, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1, replays the tape in reverse and clears it.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<TapeRecord>& records() const { return records_; }
  void clear() { records_.clear(); }

 private:
  std::vector<TapeRecord> records_;
};

// Makes a tape the active recording target of the current thread for the
// lifetime of the scope. Scopes nest; the previous tape is restored on exit.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

}  // namespace dynasty
