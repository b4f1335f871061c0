#pragma once

// Reusable graph fragments shared by the backbone, affordance decoder, and
// action head: layer norm, multi-head attention, and a GELU feed-forward,
// each reading its weights from a Graph parameter lookup by prefix.

#include "afvla/params.hpp"
#include "afvla/tape.hpp"

#include <string>
#include <vector>

namespace afvla {

inline void register_ln(ParamStore& ps, const std::string& pre, int dim) {
  ps.add(pre + ".g", 1, dim, Init::ones);
  ps.add(pre + ".b", 1, dim, Init::zeros);
}

inline void register_linear(ParamStore& ps, const std::string& pre, int out, int in,
                            Init w_init = Init::normal002) {
  ps.add(pre + ".w", out, in, w_init);
  ps.add(pre + ".b", 1, out, Init::zeros);
}

inline void register_mha(ParamStore& ps, const std::string& pre, int dim) {
  register_linear(ps, pre + ".wq", dim, dim);
  register_linear(ps, pre + ".wk", dim, dim);
  register_linear(ps, pre + ".wv", dim, dim);
  register_linear(ps, pre + ".wo", dim, dim);
}

inline void register_ffn(ParamStore& ps, const std::string& pre, int dim, int hidden) {
  register_linear(ps, pre + ".w1", hidden, dim);
  register_linear(ps, pre + ".w2", dim, hidden);
}

template <typename T>
int ln(Graph<T>& g, int x, const std::string& pre) {
  return g.tape.layer_norm(x, g.p(pre + ".g"), g.p(pre + ".b"));
}

template <typename T>
int dense(Graph<T>& g, int x, const std::string& pre) {
  return g.tape.linear(x, g.p(pre + ".w"), g.p(pre + ".b"));
}

// Projections + scaled-dot attention + output projection; pre-norm and the
// residual are the caller's business.
template <typename T>
int mha(Graph<T>& g, int q_in, int kv_in, int blocks, int heads, const std::string& pre) {
  int q = dense(g, q_in, pre + ".wq");
  int k = dense(g, kv_in, pre + ".wk");
  int v = dense(g, kv_in, pre + ".wv");
  int a = g.tape.attention(q, k, v, blocks, heads);
  return dense(g, a, pre + ".wo");
}

template <typename T>
int ffn(Graph<T>& g, int x, const std::string& pre) {
  return dense(g, g.tape.gelu(dense(g, x, pre + ".w1")), pre + ".w2");
}

// Row permutation that turns [A-blocks; B-blocks] (each stacked sample-major)
// into per-sample interleaved rows [A_0; B_0; A_1; B_1; ...].
inline std::vector<int> interleave_rows(int samples, int rows_a, int rows_b) {
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(samples) * (rows_a + rows_b));
  for (int b = 0; b < samples; ++b) {
    for (int j = 0; j < rows_a; ++j) idx.push_back(b * rows_a + j);
    for (int j = 0; j < rows_b; ++j) idx.push_back(samples * rows_a + b * rows_b + j);
  }
  return idx;
}

}  // namespace afvla
