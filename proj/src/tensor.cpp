#include "kws/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "kws/error.hpp"

namespace kws::nn {

namespace {
const char* kModule = "numeric-core";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl<T>>()) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError(kModule, "tensor: " + std::to_string(values.size()) +
                                      " values do not fill shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw ContractError(kModule, "tensor: use of undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(kModule, "tensor: axis " + std::to_string(axis) + " out of range for " +
                                      shape_str(s));
  }
  return s[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<T> Tensor<T>::values() {
  shape();
  return impl_->values;
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  shape();
  return impl_->values;
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  shape();
  return impl_->grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  shape();
  return impl_->grad;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ContractError(kModule, "tensor: item() on non-scalar " + shape_str(shape()));
  }
  return impl_->values[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  shape();
  impl_->requires_grad = on;
  if (on) {
    impl_->grad.assign(impl_->values.size(), T(0));
  } else {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

template <typename T>
void Tensor<T>::zero_grad() {
  shape();
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->values, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), impl_->values, impl_->requires_grad);
  if (impl_->requires_grad) out.impl_->grad = impl_->grad;
  return out;
}

template <typename T>
void Tape<T>::record(std::function<void()> backward_fn) {
  if (recording()) entries_.push_back(std::move(backward_fn));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError(kModule, "backward: loss must be a scalar, got " +
                                     (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) return;
  loss.impl()->grad[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace kws::nn
