#pragma once

// Reverse-mode autodiff over dense Eigen matrices, templated on scalar.
//
// A Tape owns a flat list of nodes; each op appends one node whose backward
// closure scatters into its arguments' grad buffers. Graphs are rebuilt per
// step (dynamic), matrices are batch-stacked so the heavy work lands in
// large GEMMs. Backward runs in reverse creation order, which is a valid
// topological order by construction.
//
// Ops only compute an argument's gradient when that argument transitively
// depends on a differentiable leaf, so frozen-parameter and inference
// passes skip dead branches.

#include "afvla/core.hpp"

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

namespace afvla {

template <typename T>
class Tape {
 public:
  using M = Mat<T>;
  using Id = int;

  struct Node {
    M value;                    // owned storage (unused when external)
    const M* external = nullptr;
    M grad;                     // lazily allocated on first accumulation
    std::function<void()> backward;  // empty for leaves
    bool needs_grad = false;
  };

  void reset() { nodes_.clear(); }
  int size() const { return int(nodes_.size()); }

  const M& val(Id i) const {
    const Node& n = nodes_[size_t(i)];
    return n.external ? *n.external : n.value;
  }
  bool needs_grad(Id i) const { return nodes_[size_t(i)].needs_grad; }

  // Grad of a node; zero-sized until something accumulated into it.
  const M& grad(Id i) const {
    static const M empty;
    return nodes_[size_t(i)].grad.size() ? nodes_[size_t(i)].grad : empty;
  }
  M grad_or_zero(Id i) const {
    const Node& n = nodes_[size_t(i)];
    if (n.grad.size()) return n.grad;
    return M::Zero(val(i).rows(), val(i).cols());
  }

  void zero_grads() {
    for (Node& n : nodes_) n.grad.resize(0, 0);
  }

  // ---------------------------------------------------------- leaves

  Id external_input(const M* x, bool needs) {
    Node n;
    n.external = x;
    n.needs_grad = needs;
    return push(std::move(n));
  }
  Id constant(M x) {
    Node n;
    n.value = std::move(x);
    n.needs_grad = false;
    return push(std::move(n));
  }
  Id leaf(M x, bool needs = true) {
    Node n;
    n.value = std::move(x);
    n.needs_grad = needs;
    return push(std::move(n));
  }

  // ------------------------------------------------------- arithmetic

  Id add(Id a, Id b) {
    check_same_shape(val(a), val(b), "add");
    Node n;
    n.value = val(a) + val(b);
    n.needs_grad = needs_grad(a) || needs_grad(b);
    Id id = push(std::move(n));
    set_backward(id, [this, id, a, b] {
      const M& g = nodes_[size_t(id)].grad;
      if (needs_grad(a)) acc(a) += g;
      if (needs_grad(b)) acc(b) += g;
    });
    return id;
  }

  Id scale(Id a, T s) {
    Node n;
    n.value = val(a) * s;
    n.needs_grad = needs_grad(a);
    Id id = push(std::move(n));
    set_backward(id, [this, id, a, s] {
      if (needs_grad(a)) acc(a) += nodes_[size_t(id)].grad * s;
    });
    return id;
  }

  // y = x * W^T + 1 b   with W (out x in), b (1 x out) or -1 for none.
  Id linear(Id x, Id w, Id b = -1) {
    const M& xv = val(x);
    const M& wv = val(w);
    if (xv.cols() != wv.cols()) fail(ErrorKind::shape_error, "linear: in dims mismatch");
    Node n;
    n.value.noalias() = xv * wv.transpose();
    if (b >= 0) {
      if (val(b).rows() != 1 || val(b).cols() != wv.rows())
        fail(ErrorKind::shape_error, "linear: bias shape");
      n.value.rowwise() += val(b).row(0);
    }
    n.needs_grad = needs_grad(x) || needs_grad(w) || (b >= 0 && needs_grad(b));
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, w, b] {
      const M& g = nodes_[size_t(id)].grad;
      if (needs_grad(x)) acc(x).noalias() += g * val(w);
      if (needs_grad(w)) acc(w).noalias() += g.transpose() * val(x);
      if (b >= 0 && needs_grad(b)) acc(b).row(0) += g.colwise().sum();
    });
    return id;
  }

  // Row-wise layer norm with affine params gamma, beta of shape (1 x C).
  Id layer_norm(Id x, Id gamma, Id beta, T eps = T(1e-5)) {
    const M& xv = val(x);
    const Eigen::Index C = xv.cols();
    Node n;
    n.value.resize(xv.rows(), C);
    M xhat(xv.rows(), C);
    Vec<T> inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      T mu = xv.row(r).mean();
      T var = (xv.row(r).array() - mu).square().sum() / T(C);
      T is = T(1) / std::sqrt(var + eps);
      inv_std(r) = is;
      xhat.row(r) = (xv.row(r).array() - mu) * is;
      n.value.row(r) = xhat.row(r).cwiseProduct(val(gamma).row(0)) + val(beta).row(0);
    }
    n.needs_grad = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, gamma, beta, xhat = std::move(xhat),
                      inv_std = std::move(inv_std), C] {
      const M& g = nodes_[size_t(id)].grad;
      if (needs_grad(gamma)) acc(gamma).row(0) += (g.cwiseProduct(xhat)).colwise().sum();
      if (needs_grad(beta)) acc(beta).row(0) += g.colwise().sum();
      if (needs_grad(x)) {
        M& gx = acc(x);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          auto dxhat = g.row(r).cwiseProduct(val(gamma).row(0));
          T m1 = dxhat.mean();
          T m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
          gx.row(r) += ((dxhat.array() - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
        }
      }
    });
    return id;
  }

  Id gelu(Id x) {
    const M& xv = val(x);
    Node n;
    n.value = xv.unaryExpr([](T v) {
      return T(0.5) * v * (T(1) + std::erf(v * T(0.7071067811865475)));
    });
    n.needs_grad = needs_grad(x);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x] {
      if (!needs_grad(x)) return;
      const M& g = nodes_[size_t(id)].grad;
      acc(x) += g.cwiseProduct(val(x).unaryExpr([](T v) {
        T phi = T(0.5) * (T(1) + std::erf(v * T(0.7071067811865475)));
        T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
        return phi + v * pdf;
      }));
    });
    return id;
  }

  Id silu(Id x) {
    const M& xv = val(x);
    Node n;
    n.value = xv.unaryExpr([](T v) { return v / (T(1) + std::exp(-v)); });
    n.needs_grad = needs_grad(x);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x] {
      if (!needs_grad(x)) return;
      const M& g = nodes_[size_t(id)].grad;
      acc(x) += g.cwiseProduct(val(x).unaryExpr([](T v) {
        T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      }));
    });
    return id;
  }

  // ------------------------------------------------- shape plumbing

  Id gather_rows(Id x, std::vector<int> idx) {
    const M& xv = val(x);
    Node n;
    n.value.resize(Eigen::Index(idx.size()), xv.cols());
    for (size_t r = 0; r < idx.size(); ++r) n.value.row(Eigen::Index(r)) = xv.row(idx[r]);
    n.needs_grad = needs_grad(x);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, idx = std::move(idx)] {
      if (!needs_grad(x)) return;
      const M& g = nodes_[size_t(id)].grad;
      M& gx = acc(x);
      for (size_t r = 0; r < idx.size(); ++r) gx.row(idx[r]) += g.row(Eigen::Index(r));
    });
    return id;
  }

  Id concat_rows(std::vector<Id> parts) {
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(parts.at(0)).cols();
    for (Id p : parts) {
      if (val(p).cols() != cols) fail(ErrorKind::shape_error, "concat_rows: col mismatch");
      rows += val(p).rows();
    }
    Node n;
    n.value.resize(rows, cols);
    Eigen::Index at = 0;
    for (Id p : parts) {
      n.value.middleRows(at, val(p).rows()) = val(p);
      at += val(p).rows();
      n.needs_grad = n.needs_grad || needs_grad(p);
    }
    Id id = push(std::move(n));
    set_backward(id, [this, id, parts = std::move(parts)] {
      const M& g = nodes_[size_t(id)].grad;
      Eigen::Index at = 0;
      for (Id p : parts) {
        Eigen::Index r = val(p).rows();
        if (needs_grad(p)) acc(p) += g.middleRows(at, r);
        at += r;
      }
    });
    return id;
  }

  Id slice_cols(Id x, Eigen::Index start, Eigen::Index count) {
    Node n;
    n.value = val(x).middleCols(start, count);
    n.needs_grad = needs_grad(x);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, start, count] {
      if (needs_grad(x)) acc(x).middleCols(start, count) += nodes_[size_t(id)].grad;
    });
    return id;
  }

  // x (B*L x C) plus a tiled (L x C) table, added per block.
  Id tile_add(Id x, Id table, int blocks) {
    const M& xv = val(x);
    const M& tv = val(table);
    if (xv.rows() != tv.rows() * blocks) fail(ErrorKind::shape_error, "tile_add: rows");
    Node n;
    n.value = xv;
    for (int b = 0; b < blocks; ++b) n.value.middleRows(b * tv.rows(), tv.rows()) += tv;
    n.needs_grad = needs_grad(x) || needs_grad(table);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, table, blocks] {
      const M& g = nodes_[size_t(id)].grad;
      if (needs_grad(x)) acc(x) += g;
      if (needs_grad(table)) {
        M& gt = acc(table);
        Eigen::Index L = val(table).rows();
        for (int b = 0; b < blocks; ++b) gt += g.middleRows(b * L, L);
      }
    });
    return id;
  }

  // Adds a single (1 x C) row to every row of x.
  Id add_row_broadcast(Id x, Id row) {
    Node n;
    n.value = val(x).rowwise() + val(row).row(0);
    n.needs_grad = needs_grad(x) || needs_grad(row);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, row] {
      const M& g = nodes_[size_t(id)].grad;
      if (needs_grad(x)) acc(x) += g;
      if (needs_grad(row)) acc(row).row(0) += g.colwise().sum();
    });
    return id;
  }

  // ------------------------------------------------- attention

  // Multi-head scaled dot-product attention over `blocks` independent
  // groups. q is (blocks*Lq x C); k and v are (blocks*Lkv x C); heads
  // split C. Softmax probabilities are kept for the backward pass.
  Id attention(Id q, Id k, Id v, int blocks, int heads) {
    const M& qv = val(q);
    const M& kv = val(k);
    const M& vv = val(v);
    const Eigen::Index C = qv.cols();
    if (kv.cols() != C || vv.cols() != C) fail(ErrorKind::shape_error, "attention: dims");
    if (C % heads != 0) fail(ErrorKind::shape_error, "attention: heads");
    const Eigen::Index Lq = qv.rows() / blocks;
    const Eigen::Index Lk = kv.rows() / blocks;
    if (qv.rows() != Lq * blocks || kv.rows() != Lk * blocks || vv.rows() != Lk * blocks)
      fail(ErrorKind::shape_error, "attention: block rows");
    const Eigen::Index dh = C / heads;
    const T sc = T(1) / std::sqrt(T(dh));

    Node n;
    n.value.resize(qv.rows(), C);
    // probs stacked as (blocks*heads*Lq x Lk)
    M probs(Eigen::Index(blocks) * heads * Lq, Lk);
    for (int b = 0; b < blocks; ++b) {
      for (int h = 0; h < heads; ++h) {
        auto Qh = qv.block(b * Lq, h * dh, Lq, dh);
        auto Kh = kv.block(b * Lk, h * dh, Lk, dh);
        auto Vh = vv.block(b * Lk, h * dh, Lk, dh);
        M s = (Qh * Kh.transpose()) * sc;
        for (Eigen::Index r = 0; r < Lq; ++r) {
          T mx = s.row(r).maxCoeff();
          s.row(r) = (s.row(r).array() - mx).exp();
          s.row(r) /= s.row(r).sum();
        }
        probs.middleRows((Eigen::Index(b) * heads + h) * Lq, Lq) = s;
        n.value.block(b * Lq, h * dh, Lq, dh).noalias() = s * Vh;
      }
    }
    n.needs_grad = needs_grad(q) || needs_grad(k) || needs_grad(v);
    Id id = push(std::move(n));
    set_backward(id, [this, id, q, k, v, blocks, heads, Lq, Lk, dh, sc,
                      probs = std::move(probs)] {
      const M& g = nodes_[size_t(id)].grad;
      const bool nq = needs_grad(q), nk = needs_grad(k), nv = needs_grad(v);
      for (int b = 0; b < blocks; ++b) {
        for (int h = 0; h < heads; ++h) {
          auto P = probs.middleRows((Eigen::Index(b) * heads + h) * Lq, Lq);
          auto dOh = g.block(b * Lq, h * dh, Lq, dh);
          auto Vh = val(v).block(b * Lk, h * dh, Lk, dh);
          if (nv) acc(v).block(b * Lk, h * dh, Lk, dh).noalias() += P.transpose() * dOh;
          if (nq || nk) {
            M dP = dOh * Vh.transpose();
            M dS(Lq, Lk);
            for (Eigen::Index r = 0; r < Lq; ++r) {
              T dot = dP.row(r).cwiseProduct(P.row(r)).sum();
              dS.row(r) = (P.row(r).array() * (dP.row(r).array() - dot)).matrix();
            }
            if (nq)
              acc(q).block(b * Lq, h * dh, Lq, dh).noalias() +=
                  dS * val(k).block(b * Lk, h * dh, Lk, dh) * sc;
            if (nk)
              acc(k).block(b * Lk, h * dh, Lk, dh).noalias() +=
                  dS.transpose() * val(q).block(b * Lq, h * dh, Lq, dh) * sc;
          }
        }
      }
    });
    return id;
  }

  // ------------------------------------------------- block reductions

  // (B*L x C) -> (B x C) mean over each block of L rows.
  Id block_rowmean(Id x, int blocks) {
    const M& xv = val(x);
    const Eigen::Index L = xv.rows() / blocks;
    if (xv.rows() != L * blocks) fail(ErrorKind::shape_error, "block_rowmean: rows");
    Node n;
    n.value.resize(blocks, xv.cols());
    for (int b = 0; b < blocks; ++b)
      n.value.row(b) = xv.middleRows(b * L, L).colwise().mean();
    n.needs_grad = needs_grad(x);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, blocks, L] {
      if (!needs_grad(x)) return;
      const M& g = nodes_[size_t(id)].grad;
      M& gx = acc(x);
      for (int b = 0; b < blocks; ++b)
        gx.middleRows(b * L, L).rowwise() += g.row(b) / T(L);
    });
    return id;
  }

  // out[b, i] = scale * dot(x row b*N+i, q row b); x (B*N x C), q (B x C).
  Id block_rowdot(Id x, Id q, int blocks, T sc) {
    const M& xv = val(x);
    const M& qv = val(q);
    const Eigen::Index N = xv.rows() / blocks;
    if (xv.rows() != N * blocks || qv.rows() != blocks || qv.cols() != xv.cols())
      fail(ErrorKind::shape_error, "block_rowdot: shape");
    Node n;
    n.value.resize(blocks, N);
    for (int b = 0; b < blocks; ++b)
      n.value.row(b).noalias() = (xv.middleRows(b * N, N) * qv.row(b).transpose()).transpose() * sc;
    n.needs_grad = needs_grad(x) || needs_grad(q);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, q, blocks, N, sc] {
      const M& g = nodes_[size_t(id)].grad;
      for (int b = 0; b < blocks; ++b) {
        if (needs_grad(x))
          acc(x).middleRows(b * N, N).noalias() += g.row(b).transpose() * val(q).row(b) * sc;
        if (needs_grad(q))
          acc(q).row(b).noalias() += g.row(b) * val(x).middleRows(b * N, N) * sc;
      }
    });
    return id;
  }

  // ------------------------------------------------- modulation

  // y_r = x_r .* (1 + s_blk(r)) + t_blk(r); s, t are (B x C), x is (B*L x C).
  Id ada_modulate(Id x, Id s, Id t, int blocks) {
    const M& xv = val(x);
    const Eigen::Index L = xv.rows() / blocks;
    Node n;
    n.value.resize(xv.rows(), xv.cols());
    for (int b = 0; b < blocks; ++b)
      n.value.middleRows(b * L, L) =
          (xv.middleRows(b * L, L).array().rowwise() * (val(s).row(b).array() + T(1)))
              .rowwise() +
          val(t).row(b).array();
    n.needs_grad = needs_grad(x) || needs_grad(s) || needs_grad(t);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, s, t, blocks, L] {
      const M& g = nodes_[size_t(id)].grad;
      for (int b = 0; b < blocks; ++b) {
        auto gb = g.middleRows(b * L, L);
        if (needs_grad(x))
          acc(x).middleRows(b * L, L) +=
              (gb.array().rowwise() * (val(s).row(b).array() + T(1))).matrix();
        if (needs_grad(s))
          acc(s).row(b) += gb.cwiseProduct(val(x).middleRows(b * L, L)).colwise().sum();
        if (needs_grad(t)) acc(t).row(b) += gb.colwise().sum();
      }
    });
    return id;
  }

  // y_r = x_r .* g_blk(r)
  Id ada_gate(Id x, Id gate, int blocks) {
    const M& xv = val(x);
    const Eigen::Index L = xv.rows() / blocks;
    Node n;
    n.value.resize(xv.rows(), xv.cols());
    for (int b = 0; b < blocks; ++b)
      n.value.middleRows(b * L, L) =
          (xv.middleRows(b * L, L).array().rowwise() * val(gate).row(b).array()).matrix();
    n.needs_grad = needs_grad(x) || needs_grad(gate);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, gate, blocks, L] {
      const M& g = nodes_[size_t(id)].grad;
      for (int b = 0; b < blocks; ++b) {
        auto gb = g.middleRows(b * L, L);
        if (needs_grad(x))
          acc(x).middleRows(b * L, L) +=
              (gb.array().rowwise() * val(gate).row(b).array()).matrix();
        if (needs_grad(gate))
          acc(gate).row(b) += gb.cwiseProduct(val(x).middleRows(b * L, L)).colwise().sum();
      }
    });
    return id;
  }

  // ------------------------------------------------- losses

  // Mean binary cross-entropy with logits over all entries, in the
  // overflow-safe form max(g,0) - g*y + log(1 + exp(-|g|)).
  Id bce_with_logits_mean(Id logits, M targets) {
    const M& gv = val(logits);
    check_same_shape(gv, targets, "bce_with_logits_mean");
    T total = 0;
    for (Eigen::Index i = 0; i < gv.rows(); ++i)
      for (Eigen::Index j = 0; j < gv.cols(); ++j) {
        T g = gv(i, j), y = targets(i, j);
        total += std::max(g, T(0)) - g * y + std::log1p(std::exp(-std::abs(g)));
      }
    Node n;
    n.value = M::Constant(1, 1, total / T(gv.size()));
    n.needs_grad = needs_grad(logits);
    Id id = push(std::move(n));
    set_backward(id, [this, id, logits, targets = std::move(targets)] {
      if (!needs_grad(logits)) return;
      const T go = nodes_[size_t(id)].grad(0, 0) / T(targets.size());
      const M& gv = val(logits);
      acc(logits) += go * (gv.unaryExpr([](T g) { return T(1) / (T(1) + std::exp(-g)); }) -
                           targets);
    });
    return id;
  }

  Id mse_mean(Id x, M target) {
    const M& xv = val(x);
    check_same_shape(xv, target, "mse_mean");
    Node n;
    n.value = M::Constant(1, 1, (xv - target).squaredNorm() / T(xv.size()));
    n.needs_grad = needs_grad(x);
    Id id = push(std::move(n));
    set_backward(id, [this, id, x, target = std::move(target)] {
      if (!needs_grad(x)) return;
      const T go = nodes_[size_t(id)].grad(0, 0);
      acc(x) += (val(x) - target) * (T(2) * go / T(target.size()));
    });
    return id;
  }

  // ------------------------------------------- custom-op support

  // Creates a node from a precomputed value with an explicit backward
  // closure, which receives the node's own id. The closure runs only when
  // needs is true and a gradient reached the node.
  Id custom(M value, bool needs, std::function<void(Id)> fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    Id id = push(std::move(n));
    set_backward(id, [fn = std::move(fn), id] { fn(id); });
    return id;
  }

  // Grad accumulator for op implementations; allocates zeros on first use.
  M& acc(Id i) {
    Node& n = nodes_[size_t(i)];
    if (n.grad.size() == 0) n.grad = M::Zero(val(i).rows(), val(i).cols());
    return n.grad;
  }

  // ------------------------------------------------- backward driver

  // Seeds d(root)/d(root) = 1 and propagates to all leaves. May be called
  // once per tape; use zero_grads() before re-running with another root.
  void backward(Id root) {
    if (val(root).size() != 1) fail(ErrorKind::shape_error, "backward: root not scalar");
    acc(root)(0, 0) += T(1);
    for (Id i = root; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward();
    }
  }

 private:
  std::vector<Node> nodes_;

  Id push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
  }
  void set_backward(Id id, std::function<void()> fn) {
    if (nodes_[size_t(id)].needs_grad) nodes_[size_t(id)].backward = std::move(fn);
  }
  static void check_same_shape(const M& a, const M& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
      fail(ErrorKind::shape_error, std::string(op) + ": shape mismatch");
  }
};

}  // namespace afvla
