#include <cmath>
#include <limits>

#include "doctest.h"
#include "promptroute/autodiff.hpp"
#include "promptroute/error.hpp"
#include "promptroute/rng.hpp"

using namespace promptroute;
using namespace promptroute::ad;

namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng = Rng::stream(seed, {"ad-test"});
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("square gradient") {
  Tensor x("x", Matrix::Constant(1, 1, 3.0));
  Graph g;
  Var v = g.leaf(x);
  Var y = g.mul(v, v);
  auto grads = g.backward(y);
  CHECK(grads.at(&x)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("mean gradient is uniform") {
  Tensor x("x", random_matrix(3, 4, 1));
  Graph g;
  auto grads = g.backward(g.mean(g.leaf(x)));
  for (Index i = 0; i < 12; ++i) CHECK(grads.at(&x).data()[i] == doctest::Approx(1.0 / 12));
}

TEST_CASE("softmax basics") {
  Graph g(false);
  Var a = g.constant(Matrix::Constant(1, 5, 0.7));
  const Matrix& s = g.value(g.softmax_rows(a));
  for (Index j = 0; j < 5; ++j) CHECK(s(0, j) == doctest::Approx(0.2).epsilon(1e-15));

  Mask m = Mask::Constant(1, 5, true);
  m(0, 3) = false;
  Var b = g.constant(random_matrix(1, 5, 2));
  const Matrix& one = g.value(g.softmax_rows(b, &m));
  for (Index j = 0; j < 5; ++j) CHECK(one(0, j) == (j == 3 ? 1.0 : 0.0));

  const Matrix& lp = g.value(g.log_softmax_rows(b, &m));
  CHECK(lp(0, 3) == 0.0);
  CHECK(std::isinf(lp(0, 0)));

  Mask all = Mask::Constant(1, 5, true);
  try {
    g.softmax_rows(b, &all);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDecodeDeadlock);
  }
}

TEST_CASE("shape errors and misuse") {
  Graph g;
  Var a = g.constant(Matrix::Zero(2, 3));
  Var b = g.constant(Matrix::Zero(2, 3));
  CHECK_THROWS_AS(g.matmul(a, b), Error);
  CHECK_THROWS_AS(g.backward(a), Error);
  CHECK_THROWS_AS(g.backward(Var{}), Error);
  CHECK_THROWS_AS(g.backward(Var{1000}), Error);
  Graph off(false);
  Var c = off.constant(Matrix::Zero(1, 1));
  try {
    off.backward(c);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kBackwardBeforeForward);
  }
}

TEST_CASE("non-trainable tensors get no gradient") {
  Tensor w("w", random_matrix(3, 3, 3));
  Tensor frozen("f", random_matrix(3, 3, 4), false);
  Graph g;
  auto grads = g.backward(g.sum(g.matmul(g.leaf(w), g.leaf(frozen))));
  CHECK(grads.count(&w) == 1);
  CHECK(grads.count(&frozen) == 0);
}

TEST_CASE("three-layer graph matches scalar loops") {
  const Matrix x = random_matrix(4, 5, 10);
  const Matrix w1 = random_matrix(5, 6, 11);
  const Matrix b1 = random_matrix(1, 6, 12);
  const Matrix w2 = random_matrix(6, 3, 13);
  Graph g(false);
  Var h = g.tanh(g.add_row(g.matmul(g.constant(x), g.constant(w1)), g.constant(b1)));
  Var o = g.softmax_rows(g.relu(g.matmul(h, g.constant(w2))));
  const Matrix& got = g.value(o);

  for (Index i = 0; i < 4; ++i) {
    double hid[6];
    for (Index j = 0; j < 6; ++j) {
      double s = b1(0, j);
      for (Index k = 0; k < 5; ++k) s += x(i, k) * w1(k, j);
      hid[j] = std::tanh(s);
    }
    double z[3], mx = -1e300, tot = 0;
    for (Index j = 0; j < 3; ++j) {
      double s = 0;
      for (Index k = 0; k < 6; ++k) s += hid[k] * w2(k, j);
      z[j] = s > 0 ? s : 0;
      mx = std::max(mx, z[j]);
    }
    for (Index j = 0; j < 3; ++j) tot += std::exp(z[j] - mx);
    for (Index j = 0; j < 3; ++j) CHECK(std::abs(got(i, j) - std::exp(z[j] - mx) / tot) < 1e-12);
  }
}

TEST_CASE("instance norm statistics") {
  Tensor gamma("g", Matrix::Ones(1, 4));
  Tensor beta("b", Matrix::Zero(1, 4));
  Graph g(false);
  Var y = g.instance_norm(g.constant(random_matrix(7, 4, 20, -3, 5)), g.leaf(gamma),
                          g.leaf(beta), 1e-5);
  const Matrix& v = g.value(y);
  for (Index c = 0; c < 4; ++c) {
    const double mean = v.col(c).mean();
    const double var = (v.col(c).array() - mean).square().mean();
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("finite differences: linear map") {
  Tensor w("w", random_matrix(4, 3, 30));
  const Matrix x = random_matrix(5, 4, 31);
  const Matrix c = random_matrix(5, 3, 32);
  auto fd = finite_difference_check(
      [&](Graph& g) { return g.dot(g.matmul(g.constant(x), g.leaf(w)), g.constant(c)); }, w);
  CHECK(fd.compared == 12);
  CHECK(fd.max_rel_error < 1e-9);
}

TEST_CASE("finite differences: tanh chain") {
  Tensor w("w", random_matrix(4, 4, 40));
  const Matrix x = random_matrix(3, 4, 41);
  auto fd = finite_difference_check(
      [&](Graph& g) {
        Var h = g.constant(x);
        Var wv = g.leaf(w);
        for (int i = 0; i < 3; ++i) h = g.tanh(g.matmul(h, wv));
        return g.sum(h);
      },
      w);
  CHECK(fd.max_rel_error < 1e-6);
}

TEST_CASE("finite differences: masked softmax and log-softmax") {
  Tensor a("a", random_matrix(3, 6, 50, -2, 2));
  Mask m = Mask::Constant(3, 6, false);
  m(0, 1) = m(1, 4) = m(2, 0) = m(2, 5) = true;
  const Matrix c = random_matrix(3, 6, 51);
  auto fd = finite_difference_check(
      [&](Graph& g) { return g.dot(g.softmax_rows(g.leaf(a), &m), g.constant(c)); }, a);
  CHECK(fd.max_rel_error < 1e-5);
  std::vector<Index> pick{0, 2, 3};
  auto fd2 = finite_difference_check(
      [&](Graph& g) { return g.sum(g.pick(g.log_softmax_rows(g.leaf(a), &m), pick)); }, a);
  CHECK(fd2.max_rel_error < 1e-5);

  Graph g;
  auto grads = g.backward(g.dot(g.softmax_rows(g.leaf(a), &m), g.constant(c)));
  CHECK(grads.at(&a)(0, 1) == 0.0);
  CHECK(grads.at(&a)(2, 5) == 0.0);
}

TEST_CASE("finite differences: every op") {
  Tensor a("a", random_matrix(4, 3, 60, 0.5, 1.5));
  Tensor b("b", random_matrix(4, 3, 61));
  Tensor gamma("gamma", random_matrix(1, 3, 62, 0.5, 1.5));
  Tensor beta("beta", random_matrix(1, 3, 63));
  auto build = [&](Graph& g) {
    Var va = g.leaf(a), vb = g.leaf(b);
    Var p = g.add(g.mul(va, vb), g.sub(g.exp(g.scale(vb, 0.3)), g.log(va)));
    Var n = g.instance_norm(p, g.leaf(gamma), g.leaf(beta), 1e-5);
    Var m = g.matmul_nt(n, va);  // 4 x 4
    Var rows[] = {g.slice_rows(m, 1, 2), g.gather_rows(m, std::vector<Index>{3, 0})};
    Var cat = g.concat_rows(rows);
    Var cols[] = {g.slice_cols(cat, 0, 2), g.reshape(g.slice_cols(cat, 2, 2), 4, 2)};
    Var wide = g.concat_cols(cols);
    Var v = g.add_row(g.variance_rows(wide), g.mean_rows(wide));
    Var parts[] = {g.sum(g.relu(v)), g.mean(g.tanh(wide)), g.sum(n)};
    return g.add_n(parts);
  };
  for (Tensor* t : {&a, &b, &gamma, &beta}) {
    auto fd = finite_difference_check(build, *t);
    INFO(t->name);
    CHECK(fd.max_rel_error < 1e-5);
  }
}

TEST_CASE("forward is deterministic") {
  const Matrix x = random_matrix(20, 30, 70);
  const Matrix w = random_matrix(30, 10, 71);
  Graph g1(false), g2(false);
  const Matrix& a = g1.value(g1.softmax_rows(g1.matmul(g1.constant(x), g1.constant(w))));
  const Matrix& b = g2.value(g2.softmax_rows(g2.matmul(g2.constant(x), g2.constant(w))));
  CHECK(a == b);
}

TEST_CASE("truncate drops later nodes") {
  Graph g(false);
  Var a = g.constant(Matrix::Ones(2, 2));
  const auto mark = g.size();
  g.scale(a, 2.0);
  g.truncate(mark);
  CHECK(g.size() == mark);
  CHECK(g.value(a)(0, 0) == 1.0);
}
