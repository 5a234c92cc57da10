#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nlmkit/errors.hpp"

namespace nlmkit {

// Worker threads used by the kernels. Defaults to the THREADS environment
// variable, else hardware concurrency. Results are bitwise identical for any
// thread count: every output element is accumulated by exactly one thread in
// a fixed order.
void set_num_threads(int n);
int num_threads();

// Runs fn(begin, end) over a partition of [0, n) on the worker pool.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

// Dense row-major matrix. Element type is float for training throughput or
// double for gradient checks; both paths share the same code.
template <typename T>
struct Mat {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c)) {}

  T* row(int64_t i) { return data.data() + i * cols; }
  const T* row(int64_t i) const { return data.data() + i * cols; }
  T& at(int64_t i, int64_t j) { return data[i * cols + j]; }
  T at(int64_t i, int64_t j) const { return data[i * cols + j]; }
  int64_t size() const { return rows * cols; }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T{0}); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const;
};

enum class Trans { No, Yes };

// C = alpha * op(A) * op(B) + beta * C. Blocked and threaded; accumulation
// order per output element is fixed regardless of thread count.
template <typename T>
void gemm(const Mat<T>& A, Trans ta, const Mat<T>& B, Trans tb, Mat<T>& C, T alpha = T{1},
          T beta = T{0});

// out[i][:] += v for every row
template <typename T>
void add_row_vector(Mat<T>& m, std::span<const T> v);

// h = tanh(x * W^T + b); x is l x d_in, W is d_out x d_in, b is d_out.
template <typename T>
void affine_tanh_forward(const Mat<T>& x, const Mat<T>& W, std::span<const T> b, Mat<T>& h);

// Given dL/dh and the cached activations, produces dL/dx, dL/dW (accumulated
// into dW/db which the caller zeroes) and db.
template <typename T>
void affine_tanh_backward(const Mat<T>& dh, const Mat<T>& h, const Mat<T>& x, const Mat<T>& W,
                          Mat<T>& dx, Mat<T>& dW, std::span<T> db);

// Row-wise log softmax with max subtraction.
template <typename T>
void log_softmax_rows(const Mat<T>& logits, Mat<T>& out);

// log(sum(exp(row))) per row, max-subtracted.
template <typename T>
void logsumexp_rows(const Mat<T>& logits, std::span<double> out);

template <typename T>
T logsumexp(std::span<const T> v);

// param -= lr * clip(grad); clip <= 0 disables element-wise clipping.
template <typename T>
void sgd_update(Mat<T>& param, const Mat<T>& grad, T lr, T clip = T{0});

template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, T lr, T clip = T{0});

// Throws NumericError naming `what` if any element is non-finite. Compiled
// out of hot paths in release builds via debug_check_finite.
template <typename T>
void check_finite(const Mat<T>& m, const char* what);

template <typename T>
inline void debug_check_finite([[maybe_unused]] const Mat<T>& m, [[maybe_unused]] const char* what) {
#ifndef NDEBUG
  check_finite(m, what);
#endif
}

}  // namespace nlmkit
