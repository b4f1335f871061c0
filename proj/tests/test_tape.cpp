#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "afvla/tape.hpp"
#include "fd_check.hpp"

#include <cmath>

using namespace afvla;
using namespace afvla::testing;
using Id = Tape<double>::Id;

namespace {

// Every op test reduces to a scalar through mse against a fixed target so
// the op's backward sees a generic incoming gradient.
void expect_grads_match(std::vector<Matd> leaves, const BuildFn& build, double tol = 1e-4) {
  auto rep = check_gradients(std::move(leaves), build);
  INFO("worst entry: " << rep.worst);
  CHECK(rep.max_rel_err < tol);
  CHECK(rep.checked > 0);
}

}  // namespace

TEST_CASE("add and scale") {
  Rng rng(1);
  Matd target = random_mat(rng, 3, 4);
  expect_grads_match({random_mat(rng, 3, 4), random_mat(rng, 3, 4)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.add(t.scale(in[0], 1.7), in[1]), target);
                     });
}

TEST_CASE("linear with and without bias") {
  Rng rng(2);
  Matd target = random_mat(rng, 5, 3);
  expect_grads_match({random_mat(rng, 5, 4), random_mat(rng, 3, 4), random_mat(rng, 1, 3)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.linear(in[0], in[1], in[2]), target);
                     });
  expect_grads_match({random_mat(rng, 5, 4), random_mat(rng, 3, 4)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.linear(in[0], in[1]), target);
                     });
}

TEST_CASE("linear forward puts the bias on every row") {
  Tape<double> t;
  Matd x(2, 2);
  x << 1, 2, 3, 4;
  Matd w(1, 2);
  w << 10, 100;
  Matd b(1, 1);
  b << 0.5;
  auto y = t.linear(t.constant(x), t.constant(w), t.constant(b));
  CHECK(t.val(y)(0, 0) == doctest::Approx(210.5));
  CHECK(t.val(y)(1, 0) == doctest::Approx(430.5));
}

TEST_CASE("layer_norm gradient and forward") {
  Rng rng(3);
  Matd target = random_mat(rng, 4, 6);
  Matd gamma = random_mat(rng, 1, 6, 0.5);
  gamma.array() += 1.5;  // keep it away from zero
  expect_grads_match({random_mat(rng, 4, 6), gamma, random_mat(rng, 1, 6)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.layer_norm(in[0], in[1], in[2]), target);
                     });

  Tape<double> t;
  Matd x(1, 2);
  x << 1, 3;
  Matd g = Matd::Ones(1, 2), b = Matd::Zero(1, 2);
  auto y = t.layer_norm(t.constant(x), t.constant(g), t.constant(b), 1e-12);
  CHECK(t.val(y)(0, 0) == doctest::Approx(-1.0));
  CHECK(t.val(y)(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("gelu and silu") {
  Rng rng(4);
  Matd target = random_mat(rng, 3, 5);
  expect_grads_match({random_mat(rng, 3, 5)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.gelu(in[0]), target);
                     });
  expect_grads_match({random_mat(rng, 3, 5)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.silu(in[0]), target);
                     });
  Tape<double> t;
  Matd z = Matd::Zero(1, 1);
  CHECK(t.val(t.gelu(t.constant(z)))(0, 0) == 0.0);
  CHECK(t.val(t.silu(t.constant(z)))(0, 0) == 0.0);
  Matd big = Matd::Constant(1, 1, 10.0);
  CHECK(t.val(t.gelu(t.constant(big)))(0, 0) == doctest::Approx(10.0));
}

TEST_CASE("attention gradient, blocked and multi-headed") {
  Rng rng(5);
  const int blocks = 2, heads = 2, Lq = 3, Lkv = 4, C = 6;
  Matd target = random_mat(rng, blocks * Lq, C);
  expect_grads_match(
      {random_mat(rng, blocks * Lq, C), random_mat(rng, blocks * Lkv, C),
       random_mat(rng, blocks * Lkv, C)},
      [=](Tape<double>& t, const std::vector<Id>& in) {
        return t.mse_mean(t.attention(in[0], in[1], in[2], blocks, heads), target);
      });
}

TEST_CASE("attention forward equals the hand-rolled single case") {
  // 1 block, 1 head, Lq=1, Lkv=2, C=2
  Tape<double> t;
  Matd q(1, 2), k(2, 2), v(2, 2);
  q << 1, 0;
  k << 2, 0, 0, 2;
  v << 10, 20, 30, 40;
  auto out = t.attention(t.constant(q), t.constant(k), t.constant(v), 1, 1);
  double s0 = 2.0 / std::sqrt(2.0), s1 = 0.0;
  double w0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
  double w1 = 1.0 - w0;
  CHECK(t.val(out)(0, 0) == doctest::Approx(w0 * 10 + w1 * 30));
  CHECK(t.val(out)(0, 1) == doctest::Approx(w0 * 20 + w1 * 40));
}

TEST_CASE("attention blocks are independent") {
  Rng rng(6);
  Matd q = random_mat(rng, 4, 4), k = random_mat(rng, 6, 4), v = random_mat(rng, 6, 4);
  Tape<double> t1;
  auto o1 = t1.attention(t1.constant(q), t1.constant(k), t1.constant(v), 2, 2);
  Matd k2 = k;
  k2.bottomRows(3) = random_mat(rng, 3, 4);  // perturb only block 1
  Tape<double> t2;
  auto o2 = t2.attention(t2.constant(q), t2.constant(k2), t2.constant(v), 2, 2);
  CHECK(t1.val(o1).topRows(2) == t2.val(o2).topRows(2));
  CHECK((t1.val(o1).bottomRows(2) - t2.val(o2).bottomRows(2)).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("gather_rows scatter-adds through repeats") {
  Rng rng(7);
  Matd target = random_mat(rng, 4, 3);
  expect_grads_match({random_mat(rng, 3, 3)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.gather_rows(in[0], {0, 2, 2, 1}), target);
                     });
}

TEST_CASE("concat_rows and slice_cols") {
  Rng rng(8);
  Matd target = random_mat(rng, 5, 4);
  expect_grads_match({random_mat(rng, 2, 4), random_mat(rng, 3, 4)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.concat_rows({in[0], in[1]}), target);
                     });
  Matd target2 = random_mat(rng, 3, 2);
  expect_grads_match({random_mat(rng, 3, 6)},
                     [target2](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.slice_cols(in[0], 2, 2), target2);
                     });
}

TEST_CASE("tile_add and add_row_broadcast") {
  Rng rng(9);
  Matd target = random_mat(rng, 6, 3);
  expect_grads_match({random_mat(rng, 6, 3), random_mat(rng, 2, 3)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.tile_add(in[0], in[1], 3), target);
                     });
  expect_grads_match({random_mat(rng, 6, 3), random_mat(rng, 1, 3)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.add_row_broadcast(in[0], in[1]), target);
                     });
}

TEST_CASE("block reductions") {
  Rng rng(10);
  Matd target = random_mat(rng, 2, 5);
  expect_grads_match({random_mat(rng, 6, 5)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.block_rowmean(in[0], 2), target);
                     });
  Matd target2 = random_mat(rng, 2, 4);
  expect_grads_match({random_mat(rng, 8, 5), random_mat(rng, 2, 5)},
                     [target2](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.block_rowdot(in[0], in[1], 2, 0.37), target2);
                     });
}

TEST_CASE("ada modulation ops") {
  Rng rng(11);
  Matd target = random_mat(rng, 6, 4);
  expect_grads_match(
      {random_mat(rng, 6, 4), random_mat(rng, 2, 4), random_mat(rng, 2, 4)},
      [target](Tape<double>& t, const std::vector<Id>& in) {
        return t.mse_mean(t.ada_modulate(in[0], in[1], in[2], 2), target);
      });
  expect_grads_match({random_mat(rng, 6, 4), random_mat(rng, 2, 4)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(t.ada_gate(in[0], in[1], 2), target);
                     });
}

TEST_CASE("bce_with_logits_mean value and gradient") {
  Rng rng(12);
  Matd y(3, 4);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = rng.uniform() < 0.5 ? 0.0 : 1.0;
  expect_grads_match({random_mat(rng, 3, 4, 2.0)},
                     [y](Tape<double>& t, const std::vector<Id>& in) {
                       return t.bce_with_logits_mean(in[0], y);
                     });

  Tape<double> t;
  Matd zeros = Matd::Zero(2, 2);
  Matd tgt(2, 2);
  tgt << 0, 1, 1, 0;
  CHECK(t.val(t.bce_with_logits_mean(t.constant(zeros), tgt))(0, 0) ==
        doctest::Approx(std::log(2.0)));

  // saturation: +-20 logits aligned with the target
  Matd strong(2, 2);
  strong << -20, 20, 20, -20;
  CHECK(t.val(t.bce_with_logits_mean(t.constant(strong), tgt))(0, 0) < 1e-8);

  // brute-force oracle on a random 4x4 instance
  Matd gor4 = random_mat(rng, 4, 4, 1.5);
  Matd y4(4, 4);
  for (Eigen::Index i = 0; i < 16; ++i) y4(i) = rng.uniform() < 0.5 ? 0.0 : 1.0;
  double ref = 0;
  for (Eigen::Index i = 0; i < 16; ++i) {
    double s = 1.0 / (1.0 + std::exp(-gor4(i)));
    ref += -(y4(i) * std::log(s) + (1 - y4(i)) * std::log(1 - s));
  }
  ref /= 16;
  CHECK(t.val(t.bce_with_logits_mean(t.constant(gor4), y4))(0, 0) == doctest::Approx(ref));
}

TEST_CASE("diamond-shaped reuse accumulates") {
  Rng rng(13);
  Matd target = random_mat(rng, 3, 3);
  expect_grads_match({random_mat(rng, 3, 3), random_mat(rng, 3, 3)},
                     [target](Tape<double>& t, const std::vector<Id>& in) {
                       auto left = t.linear(in[0], in[1]);
                       auto right = t.gelu(in[0]);
                       return t.mse_mean(t.add(left, right), target);
                     });

  Tape<double> t;
  Matd x = Matd::Constant(1, 1, 3.0);
  auto xi = t.leaf(x, true);
  auto loss = t.mse_mean(t.add(xi, xi), Matd::Zero(1, 1));  // (2x)^2 -> d/dx = 8x
  t.backward(loss);
  CHECK(t.grad(xi)(0, 0) == doctest::Approx(24.0));
}

TEST_CASE("needs_grad gates propagation") {
  Tape<double> t;
  Matd x = Matd::Constant(2, 2, 1.0);
  auto frozen = t.leaf(x, false);
  auto live = t.leaf(x, true);
  auto loss = t.mse_mean(t.add(frozen, live), Matd::Zero(2, 2));
  t.backward(loss);
  CHECK(t.grad(frozen).size() == 0);
  CHECK(t.grad(live).size() == 4);
}

TEST_CASE("zero_grads allows a second backward") {
  Tape<double> t;
  auto x = t.leaf(Matd::Constant(1, 1, 2.0), true);
  auto loss = t.mse_mean(x, Matd::Zero(1, 1));
  t.backward(loss);
  Matd g1 = t.grad(x);
  t.zero_grads();
  t.backward(loss);
  CHECK(t.grad(x) == g1);
}
