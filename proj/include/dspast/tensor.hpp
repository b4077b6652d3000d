#pragma once

// Dense row-major tensor. Deliberately small: shape bookkeeping plus the
// handful of BLAS-style kernels the autograd ops are built from. Dense
// matrix products are delegated to Eigen.

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dspast/common.hpp"

namespace dspast {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(v.size()))
      throw ShapeError("tensor: data size does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool empty() const { return v.empty(); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  void fill(T value) { std::fill(v.begin(), v.end(), value); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenRowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenRowMat<T>>;

// C = A(m,k) * B(k,n), optionally transposing either input (dimensions are
// those *after* transposition). If accumulate, adds into C.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool trans_a = false, bool trans_b = false, bool accumulate = false) {
  ConstMatMap<T> ma(a, trans_a ? k : m, trans_a ? m : k);
  ConstMatMap<T> mb(b, trans_b ? n : k, trans_b ? k : n);
  MatMap<T> mc(c, m, n);
  if (!trans_a && !trans_b) {
    if (accumulate) mc.noalias() += ma * mb; else mc.noalias() = ma * mb;
  } else if (trans_a && !trans_b) {
    if (accumulate) mc.noalias() += ma.transpose() * mb; else mc.noalias() = ma.transpose() * mb;
  } else if (!trans_a && trans_b) {
    if (accumulate) mc.noalias() += ma * mb.transpose(); else mc.noalias() = ma * mb.transpose();
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose(); else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

}  // namespace dspast
