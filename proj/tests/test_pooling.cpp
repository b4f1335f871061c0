#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "afvla/pooling.hpp"
#include "fd_check.hpp"

#include <algorithm>
#include <cstring>

using namespace afvla;
using namespace afvla::testing;
using Id = Tape<double>::Id;

namespace {

// Brute-force selection: stable sort by (value desc, index asc), take k.
std::vector<int> sort_oracle(const Matd& g, Eigen::Index row, int k) {
  std::vector<int> idx(size_t(g.cols()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return g(row, a) > g(row, b); });
  idx.resize(size_t(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Linear scalar functional of the pooled output: mean over all rows of
// (pooled * w^T). Its gradient w.r.t. pooled is constant, which lets the
// st and soft graphs be compared under an identical incoming gradient.
Id linear_readout(Tape<double>& t, Id pooled, const Matd& w) {
  return t.block_rowmean(t.linear(pooled, t.constant(w)), 1);
}

void expect_grads_match(std::vector<Matd> leaves, const BuildFn& build, double tol = 1e-4) {
  auto rep = check_gradients(std::move(leaves), build);
  INFO("worst entry: " << rep.worst);
  CHECK(rep.max_rel_err < tol);
  CHECK(rep.checked > 0);
}

}  // namespace

TEST_CASE("topk_select stated examples") {
  Matd g(2, 4);
  g << 0.1, 0.9, 0.5, 0.9,   // two strict maxima
      0.5, 0.9, 0.5, 0.2;    // tie 0 vs 2 -> index 0
  auto sel = topk_select(g, 2);
  CHECK(sel[0] == std::vector<int>{1, 3});
  CHECK(sel[1] == std::vector<int>{0, 1});
  CHECK_THROWS_AS(topk_select(g, 0), Error);
  CHECK_THROWS_AS(topk_select(g, 5), Error);
}

TEST_CASE("topk_select equals the sorting oracle with duplicates") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 2 + int(rng.uniform_index(14));
    int k = 1 + int(rng.uniform_index(std::uint64_t(n)));
    Matd g(1, n);
    for (int i = 0; i < n; ++i)
      g(0, i) = double(rng.uniform_index(5)) / 2.0;  // heavy ties
    auto sel = topk_select(g, k);
    CHECK(sel[0] == sort_oracle(g, 0, k));
  }
}

TEST_CASE("hard_pool full and single selection") {
  Rng rng(22);
  Matd g = random_mat(rng, 1, 6);
  Matd p = random_mat(rng, 6, 4);
  Matd full = hard_pool(g, p, 6);
  CHECK((full.row(0) - p.colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);

  g.setZero();
  g(0, 3) = 5.0;  // unique max at row 3
  Matd one = hard_pool(g, p, 1);
  CHECK(one.row(0) == p.row(3));
}

TEST_CASE("soft_pool limits and weight normalization") {
  Rng rng(23);
  Matd g = Matd::Constant(1, 5, 0.7);
  Matd p = random_mat(rng, 5, 3);
  Matd uniform = soft_pool(g, p, 1.0);
  CHECK((uniform.row(0) - p.colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);

  Matd g2 = random_mat(rng, 1, 5);
  g2(0, 2) = g2.maxCoeff() + 1.0;  // unique max at 2
  Matd cold = soft_pool(g2, p, 1e-3);
  CHECK((cold.row(0) - hard_pool(g2, p, 1).row(0)).cwiseAbs().maxCoeff() < 1e-4);

  Matd w = softmax_rows(random_mat(rng, 7, 9), 0.8);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    CHECK(std::abs(w.row(r).sum() - 1.0) < 1e-12);
}

TEST_CASE("soft_pool gradient vs finite differences") {
  Rng rng(24);
  const int G = 2, N = 4, C = 3;
  Matd target = random_mat(rng, G, C);
  expect_grads_match(
      {random_mat(rng, G, N), random_mat(rng, G * N, C)},
      [target](Tape<double>& t, const std::vector<Id>& in) {
        return t.mse_mean(pool_soft(t, in[0], in[1], 0.9), target);
      });
}

TEST_CASE("gt_pool examples and gradient") {
  Rng rng(25);
  Matd p = random_mat(rng, 8, 3);
  Matd mask = Matd::Zero(1, 8);
  mask(0, 2) = mask(0, 5) = 1;
  Matd two = gt_pool(mask, p);
  CHECK((two.row(0) - 0.5 * (p.row(2) + p.row(5))).cwiseAbs().maxCoeff() < 1e-12);

  Matd empty_mask = Matd::Zero(1, 8);
  CHECK(gt_pool(empty_mask, p).cwiseAbs().maxCoeff() == 0.0);
  Matd ones = Matd::Ones(1, 8);
  CHECK((gt_pool(ones, p).row(0) - p.colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);

  Matd target = random_mat(rng, 2, 3);
  Matd m2 = Matd::Zero(2, 4);
  m2(0, 0) = m2(0, 3) = 1;  // group 1 mask left empty on purpose
  expect_grads_match({random_mat(rng, 8, 3)},
                     [target, m2](Tape<double>& t, const std::vector<Id>& in) {
                       return t.mse_mean(pool_gt(t, m2, in[0]), target);
                     });
}

TEST_CASE("hard_pool gradient flows to patches only") {
  Rng rng(26);
  const int G = 2, N = 6, C = 3, k = 2;
  Matd target = random_mat(rng, G, C);
  // patches-only finite differences (selection is independent of patches)
  Matd logits = random_mat(rng, G, N);
  expect_grads_match({random_mat(rng, G * N, C)},
                     [target, logits, k](Tape<double>& t, const std::vector<Id>& in) {
                       auto g = t.leaf(logits, true);
                       return t.mse_mean(pool_hard(t, g, in[0], k), target);
                     });

  Tape<double> t;
  auto g = t.leaf(logits, true);
  auto p = t.leaf(random_mat(rng, G * N, C), true);
  auto loss = t.mse_mean(pool_hard(t, g, p, k), target);
  t.backward(loss);
  CHECK(t.grad(g).size() == 0);  // exactly no gradient path into logits
  CHECK(t.grad(p).cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("st forward is bit-identical to hard on 100 random instances") {
  Rng rng(27);
  for (int trial = 0; trial < 100; ++trial) {
    int G = 1 + int(rng.uniform_index(3));
    int N = 4 + int(rng.uniform_index(13));
    int C = 2 + int(rng.uniform_index(7));
    int k = 1 + int(rng.uniform_index(std::uint64_t(N)));
    Matd g = random_mat(rng, G, N);
    if (trial % 3 == 0) {  // inject ties
      for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = double(rng.uniform_index(4));
    }
    Matd p = random_mat(rng, G * N, C);
    Tape<double> t;
    auto st = pool_st(t, t.leaf(g, true), t.leaf(p, true), k, 1.0);
    Matd hard = hard_pool(g, p, k);
    REQUIRE(t.val(st).rows() == hard.rows());
    CHECK(std::memcmp(t.val(st).data(), hard.data(), sizeof(double) * size_t(hard.size())) == 0);
  }
}

TEST_CASE("st backward equals the soft surrogate's backward") {
  Rng rng(28);
  const int G = 2, N = 8, C = 4, k = 3;
  const double tau = 0.7;
  Matd g = random_mat(rng, G, N);
  Matd p = random_mat(rng, G * N, C);
  Matd w = random_mat(rng, 1, C);

  Tape<double> t_st;
  auto g1 = t_st.leaf(g, true);
  auto p1 = t_st.leaf(p, true);
  t_st.backward(linear_readout(t_st, pool_st(t_st, g1, p1, k, tau), w));

  Tape<double> t_soft;
  auto g2 = t_soft.leaf(g, true);
  auto p2 = t_soft.leaf(p, true);
  t_soft.backward(linear_readout(t_soft, pool_soft(t_soft, g2, p2, tau), w));

  CHECK((t_st.grad(g1) - t_soft.grad(g2)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t_st.grad(p1) - t_soft.grad(p2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("st backward matches finite differences of the soft surrogate") {
  Rng rng(29);
  const int G = 2, N = 6, C = 3, k = 2;
  const double tau = 1.0;
  Matd g = random_mat(rng, G, N);
  Matd p = random_mat(rng, G * N, C);
  Matd w = random_mat(rng, 1, C);

  // analytic grads from the st graph
  Tape<double> t;
  auto gi = t.leaf(g, true);
  auto pi = t.leaf(p, true);
  t.backward(linear_readout(t, pool_st(t, gi, pi, k, tau), w));
  Matd ag = t.grad(gi), ap = t.grad(pi);

  // finite differences of the *soft* forward under the same readout
  auto soft_loss = [&](const Matd& gg, const Matd& pp) {
    Tape<double> tt;
    return tt.val(linear_readout(tt, pool_soft(tt, tt.leaf(gg, true), tt.leaf(pp, true), tau), w))(0, 0);
  };
  const double eps = 1e-4;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    Matd gp = g, gm = g;
    gp(i) += eps;
    gm(i) -= eps;
    double fd = (soft_loss(gp, p) - soft_loss(gm, p)) / (2 * eps);
    CHECK(fd_rel_err(ag(i), fd) < 1e-4);
  }
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    Matd pp = p, pm = p;
    pp(i) += eps;
    pm(i) -= eps;
    double fd = (soft_loss(g, pp) - soft_loss(g, pm)) / (2 * eps);
    CHECK(fd_rel_err(ap(i), fd) < 1e-4);
  }
}

TEST_CASE("st with k=N and equal logits coincides with soft") {
  Rng rng(30);
  const int N = 5, C = 3;
  Matd g = Matd::Constant(1, N, 1.3);
  Matd p = random_mat(rng, N, C);
  Tape<double> t;
  auto st = pool_st(t, t.constant(g), t.leaf(p, true), N, 1.0);
  Matd soft = soft_pool(g, p, 1.0);
  CHECK((t.val(st) - soft).cwiseAbs().maxCoeff() < 1e-12);
}
