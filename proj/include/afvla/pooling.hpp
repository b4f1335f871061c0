#pragma once

// Mask-conditioned pooling of patch embeddings.
//
// Logits g are (G x N): one row per mask group (sample-view pair), one
// column per patch. Patch embeddings are stacked (G*N x C). Every pooling
// mode reduces each group to a single (1 x C) readout vector:
//
//   hard: mean over the top-k patches by logit
//   soft: softmax(g / tau) weighted sum over all patches
//   st:   forward bit-identical to hard; gradients of the soft surrogate
//         with respect to both logits and patches
//   gt:   mean over patches selected by a given binary mask
//
// Plain functions implement the forward semantics; Tape ops wrap them.

#include "afvla/core.hpp"
#include "afvla/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace afvla {

// Indices of the k largest entries per row, ties broken toward the lower
// index, returned in ascending index order.
template <typename T>
std::vector<std::vector<int>> topk_select(const Mat<T>& g, int k) {
  if (k < 1 || k > g.cols()) fail(ErrorKind::out_of_range, "topk_select: k out of range");
  std::vector<std::vector<int>> out(size_t(g.rows()));
  std::vector<int> order(size_t(g.cols()));
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      T va = g(r, a), vb = g(r, b);
      return va > vb || (va == vb && a < b);
    });
    out[size_t(r)].assign(order.begin(), order.begin() + k);
    std::sort(out[size_t(r)].begin(), out[size_t(r)].end());
  }
  return out;
}

template <typename T>
Mat<T> softmax_rows(const Mat<T>& g, T tau) {
  Mat<T> w(g.rows(), g.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    T mx = g.row(r).maxCoeff();
    w.row(r) = ((g.row(r).array() - mx) / tau).exp();
    w.row(r) /= w.row(r).sum();
  }
  return w;
}

template <typename T>
Mat<T> hard_pool(const Mat<T>& g, const Mat<T>& patches, int k) {
  const Eigen::Index G = g.rows(), N = g.cols();
  if (patches.rows() != G * N) fail(ErrorKind::shape_error, "hard_pool: patch rows");
  auto sel = topk_select(g, k);
  Mat<T> out = Mat<T>::Zero(G, patches.cols());
  for (Eigen::Index r = 0; r < G; ++r) {
    for (int i : sel[size_t(r)]) out.row(r) += patches.row(r * N + i);
    out.row(r) /= T(k);
  }
  return out;
}

template <typename T>
Mat<T> soft_pool(const Mat<T>& g, const Mat<T>& patches, T tau) {
  const Eigen::Index G = g.rows(), N = g.cols();
  if (patches.rows() != G * N) fail(ErrorKind::shape_error, "soft_pool: patch rows");
  Mat<T> w = softmax_rows(g, tau);
  Mat<T> out(G, patches.cols());
  for (Eigen::Index r = 0; r < G; ++r)
    out.row(r).noalias() = w.row(r) * patches.middleRows(r * N, N);
  return out;
}

// mask is (G x N) with entries in {0,1}; empty selections pool to zero.
template <typename T>
Mat<T> gt_pool(const Mat<T>& mask, const Mat<T>& patches) {
  const Eigen::Index G = mask.rows(), N = mask.cols();
  if (patches.rows() != G * N) fail(ErrorKind::shape_error, "gt_pool: patch rows");
  Mat<T> out = Mat<T>::Zero(G, patches.cols());
  for (Eigen::Index r = 0; r < G; ++r) {
    T count = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
      if (mask(r, i) > T(0.5)) {
        out.row(r) += patches.row(r * N + i);
        count += T(1);
      }
    }
    if (count > T(0)) out.row(r) /= count;
  }
  return out;
}

// ------------------------------------------------------------------ tape ops

// Backward of the soft surrogate: given weights w (G x N) and the incoming
// gradient dOut (G x C), accumulates into patches and, when wanted, logits.
//
//   dP_i   += w_i * dOut
//   dg_i    = w_i * (q_i - sum_j w_j q_j) / tau,  q_i = dot(P_i, dOut)
template <typename T>
inline void soft_pool_backward(Tape<T>& tape, typename Tape<T>::Id logits,
                               typename Tape<T>::Id patches, const Mat<T>& w, T tau,
                               const Mat<T>& dOut) {
  const Eigen::Index G = w.rows(), N = w.cols();
  for (Eigen::Index r = 0; r < G; ++r) {
    if (tape.needs_grad(patches))
      tape.acc(patches).middleRows(r * N, N).noalias() += w.row(r).transpose() * dOut.row(r);
    if (tape.needs_grad(logits)) {
      Vec<T> q = tape.val(patches).middleRows(r * N, N) * dOut.row(r).transpose();
      T mix = w.row(r).dot(q);
      tape.acc(logits).row(r) +=
          (w.row(r).array() * (q.transpose().array() - mix) / tau).matrix();
    }
  }
}

template <typename T>
typename Tape<T>::Id pool_hard(Tape<T>& tape, typename Tape<T>::Id logits,
                               typename Tape<T>::Id patches, int k) {
  using Id = typename Tape<T>::Id;
  auto sel = topk_select(tape.val(logits), k);
  const Eigen::Index N = tape.val(logits).cols();
  bool needs = tape.needs_grad(patches);
  Mat<T> value = hard_pool(tape.val(logits), tape.val(patches), k);
  return tape.custom(std::move(value), needs,
                     [&tape, patches, sel = std::move(sel), N, k](Id id) {
                       const Mat<T>& g = tape.grad(id);
                       Mat<T>& gp = tape.acc(patches);
                       for (size_t r = 0; r < sel.size(); ++r)
                         for (int i : sel[r])
                           gp.row(Eigen::Index(r) * N + i) += g.row(Eigen::Index(r)) / T(k);
                     });
}

template <typename T>
typename Tape<T>::Id pool_soft(Tape<T>& tape, typename Tape<T>::Id logits,
                               typename Tape<T>::Id patches, T tau) {
  using Id = typename Tape<T>::Id;
  Mat<T> w = softmax_rows(tape.val(logits), tau);
  bool needs = tape.needs_grad(logits) || tape.needs_grad(patches);
  Mat<T> value = soft_pool(tape.val(logits), tape.val(patches), tau);
  return tape.custom(std::move(value), needs,
                     [&tape, logits, patches, w = std::move(w), tau](Id id) {
                       soft_pool_backward(tape, logits, patches, w, tau, tape.grad(id));
                     });
}

// Straight-through: the forward value comes from the same code path as
// pool_hard; the backward pass is exactly pool_soft's.
template <typename T>
typename Tape<T>::Id pool_st(Tape<T>& tape, typename Tape<T>::Id logits,
                             typename Tape<T>::Id patches, int k, T tau) {
  using Id = typename Tape<T>::Id;
  Mat<T> w = softmax_rows(tape.val(logits), tau);
  bool needs = tape.needs_grad(logits) || tape.needs_grad(patches);
  Mat<T> value = hard_pool(tape.val(logits), tape.val(patches), k);
  return tape.custom(std::move(value), needs,
                     [&tape, logits, patches, w = std::move(w), tau](Id id) {
                       soft_pool_backward(tape, logits, patches, w, tau, tape.grad(id));
                     });
}

template <typename T>
typename Tape<T>::Id pool_gt(Tape<T>& tape, Mat<T> mask, typename Tape<T>::Id patches) {
  using Id = typename Tape<T>::Id;
  bool needs = tape.needs_grad(patches);
  Mat<T> value = gt_pool(mask, tape.val(patches));
  return tape.custom(std::move(value), needs,
                     [&tape, patches, mask = std::move(mask)](Id id) {
                       const Mat<T>& g = tape.grad(id);
                       const Eigen::Index G = mask.rows(), N = mask.cols();
                       Mat<T>& gp = tape.acc(patches);
                       for (Eigen::Index r = 0; r < G; ++r) {
                         T count = T((mask.row(r).array() > T(0.5)).count());
                         if (count == T(0)) continue;
                         for (Eigen::Index i = 0; i < N; ++i)
                           if (mask(r, i) > T(0.5)) gp.row(r * N + i) += g.row(r) / count;
                       }
                     });
}

}  // namespace afvla
