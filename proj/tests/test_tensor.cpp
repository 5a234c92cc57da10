#include <doctest.h>

#include <cmath>
#include <vector>

#include "nlmkit/matrix.hpp"
#include "nlmkit/rng.hpp"

using namespace nlmkit;

namespace {

// independent oracle: naive triple loop
template <typename T>
Mat<T> naive_gemm(const Mat<T>& A, Trans ta, const Mat<T>& B, Trans tb) {
  int64_t m = ta == Trans::No ? A.rows : A.cols;
  int64_t k = ta == Trans::No ? A.cols : A.rows;
  int64_t n = tb == Trans::No ? B.cols : B.rows;
  Mat<T> C(m, n);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t t = 0; t < k; ++t) {
        T a = ta == Trans::No ? A.at(i, t) : A.at(t, i);
        T b = tb == Trans::No ? B.at(t, j) : B.at(j, t);
        s += static_cast<double>(a) * static_cast<double>(b);
      }
      C.at(i, j) = static_cast<T>(s);
    }
  }
  return C;
}

template <typename T>
Mat<T> random_mat(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
  Mat<T> m(r, c);
  for (auto& v : m.data) v = static_cast<T>(rng.uniform(-scale, scale));
  return m;
}

template <typename T>
double max_rel_err(const Mat<T>& a, const Mat<T>& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double x = a.data[static_cast<size_t>(i)];
    double y = b.data[static_cast<size_t>(i)];
    double denom = std::max({std::abs(x), std::abs(y), 1.0});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("gemm identity and scalar cases") {
  Rng rng(7);
  Mat<float> I(3, 3);
  for (int i = 0; i < 3; ++i) I.at(i, i) = 1.0f;
  Mat<float> M = random_mat<float>(3, 3, rng);
  Mat<float> C(3, 3);
  gemm(I, Trans::No, M, Trans::No, C);
  for (int64_t i = 0; i < M.size(); ++i) CHECK(C.data[size_t(i)] == M.data[size_t(i)]);

  Mat<float> a(1, 1), b(1, 1), c(1, 1);
  a.at(0, 0) = 2.0f;
  b.at(0, 0) = 3.0f;
  gemm(a, Trans::No, b, Trans::No, c);
  CHECK(c.at(0, 0) == doctest::Approx(6.0f));
}

TEST_CASE("gemm matches naive oracle on 7x5 by 5x4") {
  Rng rng(11);
  Mat<float> A = random_mat<float>(7, 5, rng);
  Mat<float> B = random_mat<float>(5, 4, rng);
  Mat<float> C(7, 4);
  gemm(A, Trans::No, B, Trans::No, C);
  CHECK(max_rel_err(C, naive_gemm(A, Trans::No, B, Trans::No)) < 1e-5);
}

TEST_CASE("gemm matches naive oracle on 100 random shapes, all transposes") {
  Rng rng(42);
  for (int iter = 0; iter < 100; ++iter) {
    int64_t m = 1 + rng.next_below(32);
    int64_t k = 1 + rng.next_below(32);
    int64_t n = 1 + rng.next_below(32);
    Trans ta = rng.next_below(2) ? Trans::Yes : Trans::No;
    Trans tb = rng.next_below(2) ? Trans::Yes : Trans::No;
    Mat<double> A = ta == Trans::No ? random_mat<double>(m, k, rng) : random_mat<double>(k, m, rng);
    Mat<double> B = tb == Trans::No ? random_mat<double>(k, n, rng) : random_mat<double>(n, k, rng);
    Mat<double> C(m, n);
    gemm(A, ta, B, tb, C);
    CHECK(max_rel_err(C, naive_gemm(A, ta, B, tb)) < 1e-12);
  }
}

TEST_CASE("gemm beta accumulates and shape mismatch names both shapes") {
  Rng rng(3);
  Mat<double> A = random_mat<double>(4, 6, rng);
  Mat<double> B = random_mat<double>(6, 5, rng);
  Mat<double> C(4, 5);
  gemm(A, Trans::No, B, Trans::No, C);
  Mat<double> C2 = C;
  gemm(A, Trans::No, B, Trans::No, C2, 1.0, 1.0);
  for (int64_t i = 0; i < C.size(); ++i) {
    CHECK(C2.data[size_t(i)] == doctest::Approx(2.0 * C.data[size_t(i)]));
  }

  Mat<double> bad(5, 5);
  CHECK_THROWS_WITH_AS(gemm(A, Trans::No, bad, Trans::No, C),
                       doctest::Contains("4x6"), ShapeError);
}

TEST_CASE("gemm deterministic across thread counts") {
  Rng rng(5);
  Mat<float> A = random_mat<float>(33, 47, rng);
  Mat<float> B = random_mat<float>(29, 47, rng);
  Mat<float> C1(33, 29), C2(33, 29);
  set_num_threads(1);
  gemm(A, Trans::No, B, Trans::Yes, C1);
  set_num_threads(4);
  gemm(A, Trans::No, B, Trans::Yes, C2);
  for (int64_t i = 0; i < C1.size(); ++i) CHECK(C1.data[size_t(i)] == C2.data[size_t(i)]);
  set_num_threads(2);
}

TEST_CASE("affine_tanh_forward closed-form values") {
  Mat<double> x(1, 2);
  x.at(0, 0) = 0.5;
  x.at(0, 1) = 0.5;
  Mat<double> W(2, 2);
  std::vector<double> b{0.0, 0.0};
  Mat<double> h;
  affine_tanh_forward(x, W, std::span<const double>(b), h);
  CHECK(h.at(0, 0) == 0.0);
  CHECK(h.at(0, 1) == 0.0);

  W.at(0, 0) = 1.0;
  W.at(1, 1) = 1.0;
  affine_tanh_forward(x, W, std::span<const double>(b), h);
  CHECK(h.at(0, 0) == doctest::Approx(0.462117).epsilon(1e-5));
  for (auto v : h.data) CHECK(std::abs(v) < 1.0);
}

TEST_CASE("affine_tanh_backward matches central finite differences") {
  Rng rng(17);
  for (int iter = 0; iter < 50; ++iter) {
    int64_t l = 1 + rng.next_below(4);
    int64_t din = 1 + rng.next_below(6);
    int64_t dout = 1 + rng.next_below(6);
    Mat<double> x = random_mat<double>(l, din, rng);
    Mat<double> W = random_mat<double>(dout, din, rng);
    std::vector<double> b(static_cast<size_t>(dout));
    for (auto& v : b) v = rng.uniform(-1, 1);
    Mat<double> weights = random_mat<double>(l, dout, rng);  // random linear functional

    auto loss_of = [&](const Mat<double>& xv, const Mat<double>& Wv,
                       const std::vector<double>& bv) {
      Mat<double> h;
      affine_tanh_forward(xv, Wv, std::span<const double>(bv), h);
      double s = 0.0;
      for (int64_t i = 0; i < h.size(); ++i) s += weights.data[size_t(i)] * h.data[size_t(i)];
      return s;
    };

    Mat<double> h;
    affine_tanh_forward(x, W, std::span<const double>(b), h);
    Mat<double> dx, dW(dout, din);
    std::vector<double> db(static_cast<size_t>(dout), 0.0);
    affine_tanh_backward(weights, h, x, W, dx, dW, std::span<double>(db));

    const double step = 1e-5;
    auto check_grad = [&](double analytic, double fplus, double fminus) {
      double fd = (fplus - fminus) / (2 * step);
      CHECK(std::abs(fd - analytic) <= 1e-4 * std::max({std::abs(fd), std::abs(analytic), 1e-6}) + 1e-9);
    };
    for (int64_t i = 0; i < x.size(); ++i) {
      Mat<double> xp = x, xm = x;
      xp.data[size_t(i)] += step;
      xm.data[size_t(i)] -= step;
      check_grad(dx.data[size_t(i)], loss_of(xp, W, b), loss_of(xm, W, b));
    }
    for (int64_t i = 0; i < W.size(); ++i) {
      Mat<double> Wp = W, Wm = W;
      Wp.data[size_t(i)] += step;
      Wm.data[size_t(i)] -= step;
      check_grad(dW.data[size_t(i)], loss_of(x, Wp, b), loss_of(x, Wm, b));
    }
    for (size_t i = 0; i < b.size(); ++i) {
      auto bp = b, bm = b;
      bp[i] += step;
      bm[i] -= step;
      check_grad(db[i], loss_of(x, W, bp), loss_of(x, W, bm));
    }
  }
}

TEST_CASE("log_softmax_rows values, stability, shift invariance") {
  Mat<double> L(2, 2);
  L.at(1, 0) = 1000.0;
  L.at(1, 1) = 1000.0;
  Mat<double> out;
  log_softmax_rows(L, out);
  const double ln2 = std::log(2.0);
  CHECK(out.at(0, 0) == doctest::Approx(-ln2).epsilon(1e-12));
  CHECK(out.at(0, 1) == doctest::Approx(-ln2).epsilon(1e-12));
  CHECK(out.at(1, 0) == doctest::Approx(-ln2).epsilon(1e-12));
  CHECK(out.at(1, 1) == doctest::Approx(-ln2).epsilon(1e-12));

  Mat<double> L3(1, 3);
  L3.at(0, 0) = 1;
  L3.at(0, 1) = 2;
  L3.at(0, 2) = 3;
  log_softmax_rows(L3, out);
  // frozen from direct high-precision evaluation of exp(i)/sum(exp(1..3))
  CHECK(std::exp(out.at(0, 0)) == doctest::Approx(0.09003057).epsilon(1e-5));
  CHECK(std::exp(out.at(0, 1)) == doctest::Approx(0.24472847).epsilon(1e-5));
  CHECK(std::exp(out.at(0, 2)) == doctest::Approx(0.66524096).epsilon(1e-5));

  Rng rng(23);
  for (int iter = 0; iter < 20; ++iter) {
    Mat<double> base = random_mat<double>(3, 8, rng, 4.0);
    Mat<double> shifted = base;
    for (int64_t i = 0; i < shifted.rows; ++i) {
      for (int64_t j = 0; j < shifted.cols; ++j) shifted.at(i, j) += 17.5;
    }
    Mat<double> a, bm;
    log_softmax_rows(base, a);
    log_softmax_rows(shifted, bm);
    for (int64_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(a.data[size_t(i)] - bm.data[size_t(i)]) < 1e-6);
    }
    // exp of each row sums to 1
    for (int64_t i = 0; i < a.rows; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < a.cols; ++j) s += std::exp(a.at(i, j));
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("log-softmax gradient (y - onehot) matches finite differences") {
  Rng rng(29);
  for (int iter = 0; iter < 50; ++iter) {
    int64_t n = 2 + rng.next_below(8);
    Mat<double> logits = random_mat<double>(1, n, rng, 2.0);
    int64_t t = rng.next_below(n);
    auto nll = [&](const Mat<double>& lg) {
      Mat<double> ls;
      log_softmax_rows(lg, ls);
      return -ls.at(0, t);
    };
    Mat<double> ls;
    log_softmax_rows(logits, ls);
    const double step = 1e-6;
    for (int64_t j = 0; j < n; ++j) {
      double analytic = std::exp(ls.at(0, j)) - (j == t ? 1.0 : 0.0);
      Mat<double> lp = logits, lm = logits;
      lp.at(0, j) += step;
      lm.at(0, j) -= step;
      double fd = (nll(lp) - nll(lm)) / (2 * step);
      CHECK(std::abs(fd - analytic) <= 1e-4 * std::max({std::abs(fd), std::abs(analytic), 1e-6}));
    }
  }
}

TEST_CASE("sgd_update basics and linearity") {
  Mat<double> p(1, 1), g(1, 1);
  p.at(0, 0) = 1.0;
  g.at(0, 0) = 1.0;
  sgd_update(p, g, 0.5);
  CHECK(p.at(0, 0) == doctest::Approx(0.5));

  sgd_update(p, g, 0.0);
  CHECK(p.at(0, 0) == doctest::Approx(0.5));

  // two sequential updates equal one update with summed scaled gradients
  Rng rng(31);
  Mat<double> a = random_mat<double>(3, 3, rng);
  Mat<double> b = a;
  Mat<double> g1 = random_mat<double>(3, 3, rng);
  Mat<double> g2 = random_mat<double>(3, 3, rng);
  sgd_update(a, g1, 0.1);
  sgd_update(a, g2, 0.2);
  Mat<double> combined(3, 3);
  for (int64_t i = 0; i < combined.size(); ++i) {
    combined.data[size_t(i)] = 0.1 * g1.data[size_t(i)] + 0.2 * g2.data[size_t(i)];
  }
  sgd_update(b, combined, 1.0);
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(a.data[size_t(i)] == doctest::Approx(b.data[size_t(i)]).epsilon(1e-12));
  }

  // clipping
  Mat<double> p2(1, 2), g3(1, 2);
  g3.at(0, 0) = 100.0;
  g3.at(0, 1) = -100.0;
  sgd_update(p2, g3, 1.0, 5.0);
  CHECK(p2.at(0, 0) == doctest::Approx(-5.0));
  CHECK(p2.at(0, 1) == doctest::Approx(5.0));
}

TEST_CASE("check_finite flags NaN") {
  Mat<double> m(2, 2);
  check_finite(m, "m");
  m.at(1, 1) = std::nan("");
  CHECK_THROWS_AS(check_finite(m, "m"), NumericError);
}
