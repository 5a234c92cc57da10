#include "nlmkit/matrix.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace nlmkit {

namespace {

class WorkerPool {
 public:
  static WorkerPool& instance() {
    static WorkerPool pool;
    return pool;
  }

  void resize(int n) {
    n = std::max(1, n);
    if (n == size_) return;
    stop_workers();
    size_ = n;
    start_workers();
  }

  int size() const { return size_; }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    // Nested calls (a kernel invoked from inside a parallel region) run
    // inline; the pool is not re-entrant.
    if (in_worker_) {
      fn(0, n);
      return;
    }
    int chunks = static_cast<int>(std::min<int64_t>(size_, n));
    if (chunks <= 1) {
      fn(0, n);
      return;
    }
    {
      std::unique_lock lock(mu_);
      job_ = &fn;
      job_n_ = n;
      job_chunks_ = chunks;
      pending_ = chunks;
      ++epoch_;
    }
    cv_work_.notify_all();
    // chunk 0 runs on the calling thread
    run_chunk(0);
    std::unique_lock lock(mu_);
    cv_done_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  WorkerPool() {
    size_ = default_threads();
    start_workers();
  }

  ~WorkerPool() { stop_workers(); }

  static int default_threads() {
    if (const char* env = std::getenv("THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }

  void start_workers() {
    stopping_ = false;
    for (int i = 1; i < size_; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  void stop_workers() {
    {
      std::unique_lock lock(mu_);
      stopping_ = true;
      ++epoch_;
    }
    cv_work_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* job = nullptr;
      {
        std::unique_lock lock(mu_);
        cv_work_.wait(lock, [&] { return stopping_ || epoch_ != seen; });
        seen = epoch_;
        if (stopping_) return;
        job = job_;
      }
      if (job != nullptr && index < job_chunks_) {
        run_chunk(index);
      }
    }
  }

  void run_chunk(int index) {
    const auto* job = job_;
    int64_t n = job_n_;
    int chunks = job_chunks_;
    int64_t per = (n + chunks - 1) / chunks;
    int64_t b = index * per;
    int64_t e = std::min<int64_t>(n, b + per);
    if (b < e) {
      in_worker_ = true;
      (*job)(b, e);
      in_worker_ = false;
    }
    {
      std::unique_lock lock(mu_);
      if (--pending_ == 0) cv_done_.notify_one();
    }
  }

  static thread_local bool in_worker_;

  std::mutex mu_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  std::vector<std::thread> workers_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0;
  int job_chunks_ = 0;
  int pending_ = 0;
  uint64_t epoch_ = 0;
  bool stopping_ = false;
  int size_ = 1;
};

thread_local bool WorkerPool::in_worker_ = false;

}  // namespace

void set_num_threads(int n) { WorkerPool::instance().resize(n); }

int num_threads() { return WorkerPool::instance().size(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  WorkerPool::instance().run(n, fn);
}

template <typename T>
std::string Mat<T>::shape_str() const {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

// Dot product with eight independent accumulators combined in a fixed order;
// vectorizes on contiguous inputs and stays deterministic.
template <typename T>
static T dot_ilp(const T* a, const T* b, int64_t n) {
  T acc[8] = {T{0}, T{0}, T{0}, T{0}, T{0}, T{0}, T{0}, T{0}};
  int64_t k = 0;
  for (; k + 8 <= n; k += 8) {
    for (int u = 0; u < 8; ++u) acc[u] += a[k + u] * b[k + u];
  }
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; k < n; ++k) s += a[k] * b[k];
  return s;
}

template <typename T>
static void axpy(T* y, T a, const T* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C (m x n) = A (m x k) * B^T (n x k rows); parallel over C columns so each
// B row is loaded once per block of A rows.
template <typename T>
static void gemm_nt(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, T alpha, T beta) {
  int64_t m = A.rows, n = B.rows, k = A.cols;
  parallel_for(n, [&](int64_t j0, int64_t j1) {
    constexpr int64_t kRowBlock = 64;
    for (int64_t i0 = 0; i0 < m; i0 += kRowBlock) {
      int64_t i1 = std::min(m, i0 + kRowBlock);
      for (int64_t j = j0; j < j1; ++j) {
        const T* brow = B.row(j);
        for (int64_t i = i0; i < i1; ++i) {
          T v = alpha * dot_ilp(A.row(i), brow, k);
          T* c = C.row(i) + j;
          *c = beta == T{0} ? v : beta * *c + v;
        }
      }
    }
  });
}

// C (m x n) = A (m x k) * B (k x n); threads own disjoint row ranges of C and
// stream B once per range.
template <typename T>
static void gemm_nn(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, T alpha, T beta) {
  int64_t m = A.rows, n = B.cols, k = A.cols;
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* crow = C.row(i);
      if (beta == T{0}) {
        std::fill(crow, crow + n, T{0});
      } else if (beta != T{1}) {
        for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
      }
    }
    constexpr int64_t kRowBlock = 16;
    for (int64_t i0b = i0; i0b < i1; i0b += kRowBlock) {
      int64_t i1b = std::min(i1, i0b + kRowBlock);
      for (int64_t t = 0; t < k; ++t) {
        const T* brow = B.row(t);
        for (int64_t i = i0b; i < i1b; ++i) {
          T a = alpha * A.at(i, t);
          if (a != T{0}) axpy(C.row(i), a, brow, n);
        }
      }
    }
  });
}

// C (k x n) = A^T (A is m x k) * B (m x n); threads own row blocks of C,
// t runs innermost over the shared m dimension.
template <typename T>
static void gemm_tn(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, T alpha, T beta) {
  int64_t m = A.rows, k = A.cols, n = B.cols;
  parallel_for(k, [&](int64_t j0, int64_t j1) {
    constexpr int64_t kColBlock = 16;
    for (int64_t jb = j0; jb < j1; jb += kColBlock) {
      int64_t je = std::min(j1, jb + kColBlock);
      for (int64_t j = jb; j < je; ++j) {
        T* crow = C.row(j);
        if (beta == T{0}) {
          std::fill(crow, crow + n, T{0});
        } else if (beta != T{1}) {
          for (int64_t q = 0; q < n; ++q) crow[q] *= beta;
        }
      }
      for (int64_t t = 0; t < m; ++t) {
        const T* brow = B.row(t);
        const T* arow = A.row(t);
        for (int64_t j = jb; j < je; ++j) {
          T a = alpha * arow[j];
          if (a != T{0}) axpy(C.row(j), a, brow, n);
        }
      }
    }
  });
}

template <typename T>
static void gemm_tt(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, T alpha, T beta) {
  // cold path, only reachable through the generic interface
  int64_t m = A.cols, n = B.rows, k = A.rows;
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        T s{0};
        for (int64_t t = 0; t < k; ++t) s += A.at(t, i) * B.at(j, t);
        T* c = C.row(i) + j;
        *c = beta == T{0} ? alpha * s : beta * *c + alpha * s;
      }
    }
  });
}

template <typename T>
void gemm(const Mat<T>& A, Trans ta, const Mat<T>& B, Trans tb, Mat<T>& C, T alpha, T beta) {
  int64_t am = ta == Trans::No ? A.rows : A.cols;
  int64_t ak = ta == Trans::No ? A.cols : A.rows;
  int64_t bk = tb == Trans::No ? B.rows : B.cols;
  int64_t bn = tb == Trans::No ? B.cols : B.rows;
  if (ak != bk || C.rows != am || C.cols != bn) {
    throw ShapeError("gemm: incompatible shapes A" + std::string(ta == Trans::Yes ? "^T" : "") +
                     "=" + A.shape_str() + " B" + std::string(tb == Trans::Yes ? "^T" : "") + "=" +
                     B.shape_str() + " C=" + C.shape_str());
  }
  if (ta == Trans::No && tb == Trans::No) {
    gemm_nn(A, B, C, alpha, beta);
  } else if (ta == Trans::No && tb == Trans::Yes) {
    gemm_nt(A, B, C, alpha, beta);
  } else if (ta == Trans::Yes && tb == Trans::No) {
    gemm_tn(A, B, C, alpha, beta);
  } else {
    gemm_tt(A, B, C, alpha, beta);
  }
}

template <typename T>
void add_row_vector(Mat<T>& m, std::span<const T> v) {
  if (static_cast<int64_t>(v.size()) != m.cols) {
    throw ShapeError("add_row_vector: vector size " + std::to_string(v.size()) +
                     " != cols of " + m.shape_str());
  }
  parallel_for(m.rows, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) axpy(m.row(i), T{1}, v.data(), m.cols);
  });
}

template <typename T>
void affine_tanh_forward(const Mat<T>& x, const Mat<T>& W, std::span<const T> b, Mat<T>& h) {
  if (x.cols != W.cols || static_cast<int64_t>(b.size()) != W.rows) {
    throw ShapeError("affine_tanh_forward: x=" + x.shape_str() + " W=" + W.shape_str() +
                     " b=" + std::to_string(b.size()));
  }
  h = Mat<T>(x.rows, W.rows);
  gemm(x, Trans::No, W, Trans::Yes, h);
  add_row_vector(h, b);
  parallel_for(h.rows, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* r = h.row(i);
      for (int64_t j = 0; j < h.cols; ++j) r[j] = std::tanh(r[j]);
    }
  });
  debug_check_finite(h, "affine_tanh_forward");
}

template <typename T>
void affine_tanh_backward(const Mat<T>& dh, const Mat<T>& h, const Mat<T>& x, const Mat<T>& W,
                          Mat<T>& dx, Mat<T>& dW, std::span<T> db) {
  if (!dh.same_shape(h) || x.rows != h.rows || x.cols != W.cols || h.cols != W.rows) {
    throw ShapeError("affine_tanh_backward: dh=" + dh.shape_str() + " h=" + h.shape_str() +
                     " x=" + x.shape_str() + " W=" + W.shape_str());
  }
  Mat<T> dpre(h.rows, h.cols);
  parallel_for(h.rows, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* hr = h.row(i);
      const T* dr = dh.row(i);
      T* o = dpre.row(i);
      for (int64_t j = 0; j < h.cols; ++j) o[j] = dr[j] * (T{1} - hr[j] * hr[j]);
    }
  });
  dx = Mat<T>(x.rows, x.cols);
  gemm(dpre, Trans::No, W, Trans::No, dx);
  gemm(dpre, Trans::Yes, x, Trans::No, dW, T{1}, T{1});
  for (int64_t i = 0; i < dpre.rows; ++i) {
    const T* r = dpre.row(i);
    for (int64_t j = 0; j < dpre.cols; ++j) db[j] += r[j];
  }
}

template <typename T>
void log_softmax_rows(const Mat<T>& logits, Mat<T>& out) {
  out = Mat<T>(logits.rows, logits.cols);
  parallel_for(logits.rows, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* r = logits.row(i);
      T* o = out.row(i);
      int64_t n = logits.cols;
      T mx = r[0];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
      double z = 0.0;
      for (int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(r[j] - mx));
      T lz = static_cast<T>(std::log(z));
      for (int64_t j = 0; j < n; ++j) o[j] = r[j] - mx - lz;
    }
  });
}

template <typename T>
T logsumexp(std::span<const T> v) {
  T mx = v[0];
  for (T x : v) mx = std::max(mx, x);
  double z = 0.0;
  for (T x : v) z += std::exp(static_cast<double>(x - mx));
  return static_cast<T>(static_cast<double>(mx) + std::log(z));
}

template <typename T>
void logsumexp_rows(const Mat<T>& logits, std::span<double> out) {
  parallel_for(logits.rows, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* r = logits.row(i);
      T mx = r[0];
      for (int64_t j = 1; j < logits.cols; ++j) mx = std::max(mx, r[j]);
      double z = 0.0;
      for (int64_t j = 0; j < logits.cols; ++j) z += std::exp(static_cast<double>(r[j] - mx));
      out[i] = static_cast<double>(mx) + std::log(z);
    }
  });
}

template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, T lr, T clip) {
  if (param.size() != grad.size()) {
    throw ShapeError("sgd_update: param size " + std::to_string(param.size()) +
                     " != grad size " + std::to_string(grad.size()));
  }
  if (clip > T{0}) {
    for (size_t i = 0; i < param.size(); ++i) {
      param[i] -= lr * std::clamp(grad[i], -clip, clip);
    }
  } else {
    for (size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
  }
}

template <typename T>
void sgd_update(Mat<T>& param, const Mat<T>& grad, T lr, T clip) {
  if (!param.same_shape(grad)) {
    throw ShapeError("sgd_update: param " + param.shape_str() + " != grad " + grad.shape_str());
  }
  sgd_update(std::span<T>(param.data), std::span<const T>(grad.data), lr, clip);
}

template <typename T>
void check_finite(const Mat<T>& m, const char* what) {
  for (const T& v : m.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string("non-finite value in ") + what);
    }
  }
}

#define NLMKIT_INSTANTIATE(T)                                                                  \
  template struct Mat<T>;                                                                      \
  template void gemm<T>(const Mat<T>&, Trans, const Mat<T>&, Trans, Mat<T>&, T, T);            \
  template void add_row_vector<T>(Mat<T>&, std::span<const T>);                                \
  template void affine_tanh_forward<T>(const Mat<T>&, const Mat<T>&, std::span<const T>,       \
                                       Mat<T>&);                                              \
  template void affine_tanh_backward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&,           \
                                        const Mat<T>&, Mat<T>&, Mat<T>&, std::span<T>);        \
  template void log_softmax_rows<T>(const Mat<T>&, Mat<T>&);                                   \
  template void logsumexp_rows<T>(const Mat<T>&, std::span<double>);                           \
  template T logsumexp<T>(std::span<const T>);                                                 \
  template void sgd_update<T>(Mat<T>&, const Mat<T>&, T, T);                                   \
  template void sgd_update<T>(std::span<T>, std::span<const T>, T, T);                         \
  template void check_finite<T>(const Mat<T>&, const char*);

NLMKIT_INSTANTIATE(float)
NLMKIT_INSTANTIATE(double)

#undef NLMKIT_INSTANTIATE

}  // namespace nlmkit
