#include "kws/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "kws/error.hpp"

namespace kws::nn {

namespace {

const char* kModule = "numeric-core";

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMat = Eigen::Map<RowMat<T>>;

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(kModule, std::string(op) + ": axis " + std::to_string(axis) +
                                      " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, n, inner).
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(const Tape<T>& tape, Shape shape, std::vector<T> values, bool input_grad) {
  return Tensor<T>(std::move(shape), std::move(values), tape.recording() && input_grad);
}

template <typename T>
bool wants_grad(const ImplPtr<T>& p) {
  return p && p->requires_grad;
}

void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw DimensionError(kModule, std::string(op) + ": " + msg);
}

}  // namespace

template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int axis) {
  const std::size_t a = normalize_axis(axis, x.rank(), "affine");
  const auto sp = split_at(x.shape(), a);
  require(weight.rank() == 2 && weight.shape()[0] == sp.n, "affine",
          "input " + shape_str(x.shape()) + " does not conform to weight " +
              shape_str(weight.shape()));
  const std::size_t m = weight.shape()[1];
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.shape()[0] == m, "affine",
            "bias " + shape_str(bias.shape()) + " does not match weight " +
                shape_str(weight.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[a] = m;
  std::vector<T> y(sp.outer * m * sp.inner, T(0));
  const auto n = static_cast<Eigen::Index>(sp.n), mi = static_cast<Eigen::Index>(m),
             inner = static_cast<Eigen::Index>(sp.inner),
             outer = static_cast<Eigen::Index>(sp.outer);
  ConstMat<T> w(weight.values().data(), n, mi);
  if (sp.inner == 1) {
    MutMat<T> ym(y.data(), outer, mi);
    ym.noalias() = ConstMat<T>(x.values().data(), outer, n) * w;
    if (bias.defined()) ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), mi);
  } else {
    for (Eigen::Index o = 0; o < outer; ++o) {
      MutMat<T> yo(y.data() + o * mi * inner, mi, inner);
      yo.noalias() = w.transpose() * ConstMat<T>(x.values().data() + o * n * inner, n, inner);
      if (bias.defined()) yo.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.values().data(), mi);
    }
  }
  auto out = make_output(tape, std::move(out_shape), std::move(y),
                         any_requires_grad<T>({&x, &weight, &bias}));
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = out.impl(), n, mi,
                 inner, outer] {
      ConstMat<T> w(wi->values.data(), n, mi);
      if (inner == 1) {
        ConstMat<T> gy(yi->grad.data(), outer, mi);
        ConstMat<T> xm(xi->values.data(), outer, n);
        if (wants_grad(xi)) MutMat<T>(xi->grad.data(), outer, n).noalias() += gy * w.transpose();
        if (wants_grad(wi)) MutMat<T>(wi->grad.data(), n, mi).noalias() += xm.transpose() * gy;
        if (wants_grad(bi)) MutMat<T>(bi->grad.data(), 1, mi) += gy.colwise().sum();
        return;
      }
      for (Eigen::Index o = 0; o < outer; ++o) {
        ConstMat<T> gy(yi->grad.data() + o * mi * inner, mi, inner);
        ConstMat<T> xo(xi->values.data() + o * n * inner, n, inner);
        if (wants_grad(xi)) MutMat<T>(xi->grad.data() + o * n * inner, n, inner).noalias() += w * gy;
        if (wants_grad(wi)) MutMat<T>(wi->grad.data(), n, mi).noalias() += xo * gy.transpose();
        if (wants_grad(bi)) MutMat<T>(bi->grad.data(), mi, 1) += gy.rowwise().sum();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int axis) {
  const std::size_t a = normalize_axis(axis, x.rank(), "layer_norm");
  const auto sp = split_at(x.shape(), a);
  require(sp.n >= 1, "layer_norm", "normalized extent must be >= 1");
  require(gamma.size() == sp.n && beta.size() == sp.n, "layer_norm",
          "gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
              " do not match axis extent " + std::to_string(sp.n));
  std::vector<T> y(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(sp.outer * sp.inner);
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  const T inv_n = T(1) / static_cast<T>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mu = 0;
      for (std::size_t k = 0; k < sp.n; ++k) mu += xv[base + k * sp.inner];
      mu *= inv_n;
      T var = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T d = xv[base + k * sp.inner] - mu;
        var += d * d;
      }
      var *= inv_n;
      const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
      rstd[o * sp.inner + i] = r;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = base + k * sp.inner;
        const T h = (xv[idx] - mu) * r;
        xhat[idx] = h;
        y[idx] = gv[k] * h + bv[k];
      }
    }
  }
  auto out = make_output(tape, x.shape(), std::move(y), any_requires_grad<T>({&x, &gamma, &beta}));
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = out.impl(),
                 xhat = std::move(xhat), rstd = std::move(rstd), sp] {
      const auto& gy = yi->grad;
      const T inv_n = T(1) / static_cast<T>(sp.n);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.n * sp.inner + i;
          T sum_g = 0, sum_gh = 0;
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t idx = base + k * sp.inner;
            const T g = gy[idx] * gi->values[k];
            sum_g += g;
            sum_gh += g * xhat[idx];
            if (wants_grad(gi)) gi->grad[k] += gy[idx] * xhat[idx];
            if (wants_grad(bi)) bi->grad[k] += gy[idx];
          }
          if (wants_grad(xi)) {
            const T r = rstd[o * sp.inner + i];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t idx = base + k * sp.inner;
              const T g = gy[idx] * gi->values[k];
              xi->grad[idx] += r * (g - inv_n * sum_g - xhat[idx] * inv_n * sum_gh);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  std::vector<T> cdf(xv.size());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    cdf[i] = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
    y[i] = xv[i] * cdf[i];
  }
  auto out = make_output(tape, x.shape(), std::move(y), x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl(), cdf = std::move(cdf)] {
      const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
      for (std::size_t i = 0; i < xi->values.size(); ++i) {
        const T v = xi->values[i];
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        xi->grad[i] += yi->grad[i] * (cdf[i] + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  auto out = make_output(tape, a.shape(), std::move(y), any_requires_grad<T>({&a, &b}));
  if (out.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = out.impl()] {
      for (const auto& p : {ai, bi}) {
        if (!wants_grad(p)) continue;
        for (std::size_t i = 0; i < yi->grad.size(); ++i) p->grad[i] += yi->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factor;
  auto out = make_output(tape, x.shape(), std::move(y), x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl(), factor] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  auto out = make_output(tape, Shape{1}, std::vector<T>{acc}, x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl()] {
      const T g = yi->grad[0];
      for (auto& gx : xi->grad) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x, int axis) {
  const std::size_t a = normalize_axis(axis, x.rank(), "mean");
  const auto sp = split_at(x.shape(), a);
  require(sp.n > 0, "mean", "empty axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(a));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> y(sp.outer * sp.inner, T(0));
  const auto xv = x.values();
  const T inv_n = T(1) / static_cast<T>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const T* xk = xv.data() + (o * sp.n + k) * sp.inner;
      T* yo = y.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) yo[i] += xk[i];
    }
  }
  for (auto& v : y) v *= inv_n;
  auto out = make_output(tape, std::move(out_shape), std::move(y), x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl(), sp] {
      const T inv_n = T(1) / static_cast<T>(sp.n);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t k = 0; k < sp.n; ++k) {
          T* gx = xi->grad.data() + (o * sp.n + k) * sp.inner;
          const T* gy = yi->grad.data() + o * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) gx[i] += gy[i] * inv_n;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  require(shape_size(shape) == x.size(), "reshape",
          "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = make_output(tape, std::move(shape), std::vector<T>(x.values().begin(), x.values().end()),
                         x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl()] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i];
    });
  }
  return out;
}

namespace {

// Maps every output flat index of a permutation to its input flat index.
std::vector<std::size_t> permutation_index(const Shape& in, const std::vector<std::size_t>& order) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t n = shape_size(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      src += stride[d];
      if (counter[d] < out[d]) break;
      src -= stride[d] * out[d];
      counter[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  require(order.size() == r, "permute", "order has wrong length for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    require(o < r && !seen[o], "permute", "order is not a permutation");
    seen[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[order[i]];
  auto map = permutation_index(x.shape(), order);
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[map[i]];
  auto out = make_output(tape, std::move(out_shape), std::move(y), x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl(), map = std::move(map)] {
      for (std::size_t i = 0; i < map.size(); ++i) xi->grad[map[i]] += yi->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "concat");
  require(a.rank() == b.rank(), "concat",
          "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.rank(); ++i) {
    require(i == ax || a.shape()[i] == b.shape()[i], "concat",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto sa = split_at(a.shape(), ax);
  const auto sb = split_at(b.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = sa.n + sb.n;
  const std::size_t na = sa.n * sa.inner, nb = sb.n * sb.inner;
  std::vector<T> y(sa.outer * (na + nb));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(av.data() + o * na, na, y.data() + o * (na + nb));
    std::copy_n(bv.data() + o * nb, nb, y.data() + o * (na + nb) + na);
  }
  auto out = make_output(tape, std::move(out_shape), std::move(y), any_requires_grad<T>({&a, &b}));
  if (out.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = out.impl(), outer = sa.outer, na, nb] {
      for (std::size_t o = 0; o < outer; ++o) {
        const T* g = yi->grad.data() + o * (na + nb);
        if (wants_grad(ai)) {
          for (std::size_t i = 0; i < na; ++i) ai->grad[o * na + i] += g[i];
        }
        if (wants_grad(bi)) {
          for (std::size_t i = 0; i < nb; ++i) bi->grad[o * nb + i] += g[na + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select(Tape<T>& tape, const Tensor<T>& x, int axis, std::size_t index) {
  const std::size_t a = normalize_axis(axis, x.rank(), "select");
  const auto sp = split_at(x.shape(), a);
  require(index < sp.n, "select", "index " + std::to_string(index) + " out of range");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(a));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> y(sp.outer * sp.inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      y[o * sp.inner + i] = xv[(o * sp.n + index) * sp.inner + i];
    }
  }
  auto out = make_output(tape, std::move(out_shape), std::move(y), x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl(), sp, index] {
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          xi->grad[(o * sp.n + index) * sp.inner + i] += yi->grad[o * sp.inner + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * n;
    T* yr = y.data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  auto out = make_output(tape, x.shape(), std::move(y), x.requires_grad());
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), yi = out.impl(), n, rows] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = yi->values.data() + r * n;
        const T* gy = yi->grad.data() + r * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[j] * yr[j];
        for (std::size_t j = 0; j < n; ++j) xi->grad[r * n + j] += yr[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> l2_distance(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v) {
  require(x.rank() == 2 && v.size() == x.shape()[1], "l2_distance",
          "rows " + shape_str(x.shape()) + " do not match vector " + shape_str(v.shape()));
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  const auto xv = x.values();
  const auto vv = v.values();
  std::vector<T> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T diff = xv[r * d + j] - vv[j];
      acc += diff * diff;
    }
    y[r] = std::sqrt(acc);
  }
  auto out = make_output(tape, Shape{rows}, std::move(y), any_requires_grad<T>({&x, &v}));
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), vi = v.impl(), yi = out.impl(), rows, d] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T dist = yi->values[r];
        if (dist <= T(0)) continue;  // subgradient 0 at coincidence
        const T g = yi->grad[r] / dist;
        for (std::size_t j = 0; j < d; ++j) {
          const T diff = xi->values[r * d + j] - vi->values[j];
          if (wants_grad(xi)) xi->grad[r * d + j] += g * diff;
          if (wants_grad(vi)) vi->grad[j] -= g * diff;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_squared_distance(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v,
                                  std::span<const int> mask) {
  require(x.rank() == 2 && v.size() == x.shape()[1] && mask.size() == x.shape()[0],
          "masked_squared_distance",
          "rows " + shape_str(x.shape()) + " do not match vector " + shape_str(v.shape()));
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  const auto xv = x.values();
  const auto vv = v.values();
  T acc = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < d; ++j) {
      const T diff = xv[r * d + j] - vv[j];
      acc += diff * diff;
    }
  }
  auto out = make_output(tape, Shape{1}, std::vector<T>{acc}, any_requires_grad<T>({&x, &v}));
  if (out.requires_grad()) {
    std::vector<int> m(mask.begin(), mask.end());
    tape.record([xi = x.impl(), vi = v.impl(), yi = out.impl(), m = std::move(m), rows, d] {
      const T g = yi->grad[0];
      for (std::size_t r = 0; r < rows; ++r) {
        if (!m[r]) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const T diff = T(2) * (xi->values[r * d + j] - vi->values[j]);
          if (wants_grad(xi)) xi->grad[r * d + j] += g * diff;
          if (wants_grad(vi)) vi->grad[j] -= g * diff;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> binary_cross_entropy(Tape<T>& tape, const Tensor<T>& prob, std::span<const int> labels) {
  require(prob.size() == labels.size() && !labels.empty(), "binary_cross_entropy",
          std::to_string(prob.size()) + " probabilities vs " + std::to_string(labels.size()) +
              " labels");
  const T eps = static_cast<T>(kBceEpsilon);
  const auto pv = prob.values();
  const T inv_n = T(1) / static_cast<T>(pv.size());
  T loss = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T p = std::clamp(pv[i], eps, T(1) - eps);
    loss -= labels[i] ? std::log(p) : std::log(T(1) - p);
  }
  loss *= inv_n;
  auto out = make_output(tape, Shape{1}, std::vector<T>{loss}, prob.requires_grad());
  if (out.requires_grad()) {
    std::vector<int> y(labels.begin(), labels.end());
    tape.record([pi = prob.impl(), yi = out.impl(), y = std::move(y), inv_n, eps] {
      const T g = yi->grad[0] * inv_n;
      for (std::size_t i = 0; i < y.size(); ++i) {
        const T p = pi->values[i];
        if (p <= eps || p >= T(1) - eps) continue;
        pi->grad[i] += g * (y[i] ? -T(1) / p : T(1) / (T(1) - p));
      }
    });
  }
  return out;
}

std::size_t conv_output_length(std::size_t length, std::size_t kernel, Conv1dGeometry geom) {
  if (geom.stride == 0) throw DimensionError(kModule, "conv: stride must be >= 1");
  if (kernel == 0 || kernel > length + 2 * geom.padding) {
    throw DimensionError(kModule, "conv: kernel " + std::to_string(kernel) +
                                      " larger than padded input " +
                                      std::to_string(length + 2 * geom.padding));
  }
  return (length + 2 * geom.padding - kernel) / geom.stride + 1;
}

namespace {

// Output positions t for which input index t*stride + k - pad lies in [0, len).
struct TapRange {
  std::size_t begin, end;
};

TapRange valid_range(std::size_t k, std::size_t len, std::size_t out_len, Conv1dGeometry g) {
  // t*s + k >= pad  and  t*s + k - pad < len
  const long s = static_cast<long>(g.stride);
  const long off = static_cast<long>(k) - static_cast<long>(g.padding);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(len) - 1 - off);
  hi = hi < 0 ? -1 : hi / s;
  hi = std::min(hi, static_cast<long>(out_len) - 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

// im2col for conv1d: column (b, t) of row (ci, k) holds x[b, ci, t*s + k - pad].
struct Unfold {
  std::size_t n, cin, len, ksz, out_len;
  Conv1dGeometry geom;
  std::vector<TapRange> ranges;

  template <typename T>
  std::vector<T> columns(const T* x) const {
    const std::size_t span = n * out_len;
    std::vector<T> cols(cin * ksz * span, T(0));
    const long pad = static_cast<long>(geom.padding);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t k = 0; k < ksz; ++k) {
        T* row = cols.data() + (ci * ksz + k) * span;
        const long off = static_cast<long>(k) - pad;
        for (std::size_t b = 0; b < n; ++b) {
          const T* xr = x + (b * cin + ci) * len;
          T* dst = row + b * out_len;
          for (std::size_t t = ranges[k].begin; t < ranges[k].end; ++t)
            dst[t] = xr[static_cast<long>(t * geom.stride) + off];
        }
      }
    }
    return cols;
  }

  template <typename T>
  void fold(const T* cols, T* gx) const {
    const std::size_t span = n * out_len;
    const long pad = static_cast<long>(geom.padding);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t k = 0; k < ksz; ++k) {
        const T* row = cols + (ci * ksz + k) * span;
        const long off = static_cast<long>(k) - pad;
        for (std::size_t b = 0; b < n; ++b) {
          T* gr = gx + (b * cin + ci) * len;
          const T* src = row + b * out_len;
          for (std::size_t t = ranges[k].begin; t < ranges[k].end; ++t)
            gr[static_cast<long>(t * geom.stride) + off] += src[t];
        }
      }
    }
  }
};

}  // namespace

template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv1dGeometry geom) {
  require(x.rank() == 3 && weight.rank() == 3 && weight.shape()[1] == x.shape()[1], "conv1d",
          "input " + shape_str(x.shape()) + " does not conform to weight " +
              shape_str(weight.shape()));
  const std::size_t n = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
  const std::size_t cout = weight.shape()[0], ksz = weight.shape()[2];
  if (bias.defined()) {
    require(bias.size() == cout, "conv1d", "bias " + shape_str(bias.shape()) + " mismatch");
  }
  const std::size_t out_len = conv_output_length(len, ksz, geom);
  std::vector<TapRange> ranges(ksz);
  for (std::size_t k = 0; k < ksz; ++k) ranges[k] = valid_range(k, len, out_len, geom);
  const Unfold unfold{n, cin, len, ksz, out_len, geom, ranges};
  // Columns [cin * ksz, n * out_len]; one GEMM for the whole batch.
  std::vector<T> cols = unfold.columns(x.values().data());
  const auto rows = static_cast<Eigen::Index>(cin * ksz), span = static_cast<Eigen::Index>(n * out_len);
  const auto co = static_cast<Eigen::Index>(cout);
  std::vector<T> prod(cout * n * out_len);
  MutMat<T>(prod.data(), co, span).noalias() =
      ConstMat<T>(weight.values().data(), co, rows) * ConstMat<T>(cols.data(), rows, span);
  std::vector<T> y(n * cout * out_len);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < cout; ++c) {
      const T* src = prod.data() + c * n * out_len + b * out_len;
      T* dst = y.data() + (b * cout + c) * out_len;
      const T b0 = bias.defined() ? bias.values()[c] : T(0);
      for (std::size_t t = 0; t < out_len; ++t) dst[t] = src[t] + b0;
    }
  }
  auto out = make_output(tape, Shape{n, cout, out_len}, std::move(y),
                         any_requires_grad<T>({&x, &weight, &bias}));
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = out.impl(), unfold,
                 cols = std::move(cols), rows, span, co] {
      const std::size_t n = unfold.n, cout = static_cast<std::size_t>(co), out_len = unfold.out_len;
      std::vector<T> gy(cout * n * out_len);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < cout; ++c) {
          const T* src = yi->grad.data() + (b * cout + c) * out_len;
          std::copy(src, src + out_len, gy.data() + c * n * out_len + b * out_len);
        }
      }
      ConstMat<T> gym(gy.data(), co, span);
      if (wants_grad(bi)) MutMat<T>(bi->grad.data(), co, 1) += gym.rowwise().sum();
      if (wants_grad(wi)) {
        MutMat<T>(wi->grad.data(), co, rows).noalias() +=
            gym * ConstMat<T>(cols.data(), rows, span).transpose();
      }
      if (wants_grad(xi)) {
        std::vector<T> gcols(cols.size());
        MutMat<T>(gcols.data(), rows, span).noalias() =
            ConstMat<T>(wi->values.data(), co, rows).transpose() * gym;
        unfold.fold(gcols.data(), xi->grad.data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, Conv1dGeometry geom) {
  require(x.rank() == 3 && weight.rank() == 2 && weight.shape()[0] == x.shape()[1],
          "depthwise_conv1d",
          "input " + shape_str(x.shape()) + " does not conform to depth kernels " +
              shape_str(weight.shape()));
  const std::size_t n = x.shape()[0], ch = x.shape()[1], len = x.shape()[2];
  const std::size_t ksz = weight.shape()[1];
  if (bias.defined()) {
    require(bias.size() == ch, "depthwise_conv1d", "bias " + shape_str(bias.shape()) + " mismatch");
  }
  const std::size_t out_len = conv_output_length(len, ksz, geom);
  std::vector<TapRange> ranges(ksz);
  for (std::size_t k = 0; k < ksz; ++k) ranges[k] = valid_range(k, len, out_len, geom);
  std::vector<T> y(n * ch * out_len, T(0));
  const auto xv = x.values();
  const auto wv = weight.values();
  const long pad = static_cast<long>(geom.padding);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      T* yr = y.data() + (b * ch + c) * out_len;
      if (bias.defined()) std::fill(yr, yr + out_len, bias.values()[c]);
      const T* xr = xv.data() + (b * ch + c) * len;
      for (std::size_t k = 0; k < ksz; ++k) {
        const T w = wv[c * ksz + k];
        const long off = static_cast<long>(k) - pad;
        for (std::size_t t = ranges[k].begin; t < ranges[k].end; ++t) {
          yr[t] += w * xr[static_cast<long>(t * geom.stride) + off];
        }
      }
    }
  }
  auto out = make_output(tape, Shape{n, ch, out_len}, std::move(y),
                         any_requires_grad<T>({&x, &weight, &bias}));
  if (out.requires_grad()) {
    tape.record([xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = out.impl(),
                 ranges = std::move(ranges), n, ch, len, ksz, out_len, geom] {
      const long pad = static_cast<long>(geom.padding);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
          const T* gy = yi->grad.data() + (b * ch + c) * out_len;
          const T* xr = xi->values.data() + (b * ch + c) * len;
          if (wants_grad(bi)) {
            T acc = 0;
            for (std::size_t t = 0; t < out_len; ++t) acc += gy[t];
            bi->grad[c] += acc;
          }
          for (std::size_t k = 0; k < ksz; ++k) {
            const long off = static_cast<long>(k) - pad;
            if (wants_grad(wi)) {
              T acc = 0;
              for (std::size_t t = ranges[k].begin; t < ranges[k].end; ++t) {
                acc += gy[t] * xr[static_cast<long>(t * geom.stride) + off];
              }
              wi->grad[c * ksz + k] += acc;
            }
            if (wants_grad(xi)) {
              const T w = wi->values[c * ksz + k];
              T* gx = xi->grad.data() + (b * ch + c) * len;
              for (std::size_t t = ranges[k].begin; t < ranges[k].end; ++t) {
                gx[static_cast<long>(t * geom.stride) + off] += gy[t] * w;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_separable_conv(Tape<T>& tape, const Tensor<T>& x,
                                   const Tensor<T>& depth_kernels, const Tensor<T>& point_kernel,
                                   const Tensor<T>& point_bias, Conv1dGeometry geom) {
  auto depth = depthwise_conv1d(tape, x, depth_kernels, Tensor<T>{}, geom);
  return affine(tape, depth, point_kernel, point_bias, 1);
}

#define KWS_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> affine(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int); \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                int);                                                             \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                        \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&, int);                                       \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                  \
  template Tensor<T> permute(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&);        \
  template Tensor<T> concat(Tape<T>&, const Tensor<T>&, const Tensor<T>&, int);                   \
  template Tensor<T> select(Tape<T>&, const Tensor<T>&, int, std::size_t);                        \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> l2_distance(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> masked_squared_distance(Tape<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                             std::span<const int>);                               \
  template Tensor<T> binary_cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>);      \
  template Tensor<T> conv1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                            Conv1dGeometry);                                                      \
  template Tensor<T> depthwise_conv1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                      const Tensor<T>&, Conv1dGeometry);                          \
  template Tensor<T> depthwise_separable_conv(Tape<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                              const Tensor<T>&, const Tensor<T>&, Conv1dGeometry);

KWS_INSTANTIATE_OPS(float)
KWS_INSTANTIATE_OPS(double)

#undef KWS_INSTANTIATE_OPS

}  // namespace kws::nn
