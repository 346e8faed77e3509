#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "lumexp/errors.hpp"

namespace lumexp {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major double tensor. The single numeric container of the project;
// all math runs in double so finite-difference checks and metric oracles are
// not fighting float rounding.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw DimensionError("tensor data size does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor ones(Shape s) { return full(std::move(s), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor with " + std::to_string(numel()) + " elements");
    return data[0];
  }

  // 4-D accessor (N,C,H,W); used by kernels and tests.
  double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  double& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

// C = alpha * op(A) * op(B) + beta * C, row-major. Backed by BLAS.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
          const double* a, int64_t lda, const double* b, int64_t ldb, double beta, double* c,
          int64_t ldc);

// Global BLAS thread-count control; deterministic mode forces 1.
void set_math_threads(int n);
int math_threads();

uint64_t fnv1a_hash(const void* data, size_t len, uint64_t seed = 1469598103934665603ULL);

}  // namespace lumexp
