#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kws::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

// Dense row-major tensor handle. Copies share storage; use clone() for a
// deep copy and detach() to cut the gradient path.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return values().size(); }
  // Extent along `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;

  std::span<T> values();
  std::span<const T> values() const;
  std::span<T> grad();
  std::span<const T> grad() const;
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of executed primitives. Each entry owns a closure that
// propagates the output gradient into its inputs; entries are appended in
// execution order, so replaying them in reverse is a valid topological walk.
template <typename T>
class Tape {
 public:
  enum class Mode { Record, Inference };

  explicit Tape(Mode mode = Mode::Record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::Record; }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from the recorded entries. Leaf
  // gradients accumulate; call zero_grad() on parameters between steps.
  void backward(const Tensor<T>& loss);

 private:
  Mode mode_;
  std::vector<std::function<void()>> entries_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace kws::nn
