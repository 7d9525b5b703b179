#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kws/tensor.hpp"

// Differentiable primitives. Every op takes the tape it records on; an
// output requires grad iff the tape is recording and some input does.
// Axis arguments accept negative values counted from the back.
namespace kws::nn {

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr double kBceEpsilon = 1e-7;

// y = x W + b applied along `axis` of x: W is [n, m] where n = x.dim(axis),
// b is [m] or undefined. The output replaces extent n with m.
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int axis = -1);

// Normalizes every 1-D slice along `axis` to zero mean and unit population
// variance, then applies gamma/beta (both of extent x.dim(axis)).
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int axis = -1);

// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& order);

template <typename T>
Tensor<T> concat(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, int axis = -1);

// Picks index `index` along `axis`, dropping that axis.
template <typename T>
Tensor<T> select(Tape<T>& tape, const Tensor<T>& x, int axis, std::size_t index);

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x);

// Row-wise Euclidean distance between x [N, D] and a single vector v [D].
template <typename T>
Tensor<T> l2_distance(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v);

// Row-wise squared distance sum: sum_i ||x_i - v||^2 over rows with mask 1.
template <typename T>
Tensor<T> masked_squared_distance(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v,
                                  std::span<const int> mask);

// Batch-averaged binary cross-entropy on positive-class probabilities, with
// p clamped to [eps, 1 - eps]. Clamped entries pass no gradient.
template <typename T>
Tensor<T> binary_cross_entropy(Tape<T>& tape, const Tensor<T>& prob, std::span<const int> labels);

struct Conv1dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_length(std::size_t length, std::size_t kernel, Conv1dGeometry geom);

// Dense 1-D convolution. x [N, Cin, L], weight [Cout, Cin, K], bias [Cout]
// or undefined.
template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv1dGeometry geom);

// Per-channel 1-D convolution. x [N, C, L], weight [C, K], bias [C] or undefined.
template <typename T>
Tensor<T> depthwise_conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, Conv1dGeometry geom);

// Depthwise convolution followed by a 1x1 channel mix. depth_kernels [C, K],
// point_kernel [C, Cout], point_bias [Cout] or undefined.
template <typename T>
Tensor<T> depthwise_separable_conv(Tape<T>& tape, const Tensor<T>& x,
                                   const Tensor<T>& depth_kernels, const Tensor<T>& point_kernel,
                                   const Tensor<T>& point_bias, Conv1dGeometry geom);

}  // namespace kws::nn
