#pragma once

// Affordance decoder: two-way transformer layers between the encoded query
// tokens and (projected) patch features, finishing with a dot-product mask
// readout per patch cell. Batched over groups, one group per (sample, view).

#include "afvla/config.hpp"
#include "afvla/nn.hpp"
#include "afvla/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace afvla {

inline void register_affhead(ParamStore& ps, const Config& cfg) {
  const int D = cfg.decoder_dim;
  register_linear(ps, "affhead.a_proj", D, cfg.c_llm);
  register_linear(ps, "affhead.p_proj", D, cfg.c_vis);
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string pre = "affhead.lyr" + std::to_string(i);
    register_ln(ps, pre + ".self_ln", D);
    register_mha(ps, pre + ".self", D);
    register_ln(ps, pre + ".qp_ln_q", D);
    register_ln(ps, pre + ".qp_ln_p", D);
    register_mha(ps, pre + ".qp", D);
    register_ln(ps, pre + ".ffn_ln", D);
    register_ffn(ps, pre + ".ffn", D, D);
    register_ln(ps, pre + ".pq_ln_p", D);
    register_ln(ps, pre + ".pq_ln_q", D);
    register_mha(ps, pre + ".pq", D);
  }
  register_ln(ps, "affhead.ln_q", D);
  register_ln(ps, "affhead.ln_p", D);
  register_linear(ps, "affhead.out", D, D, Init::zeros);
}

// Patch-center sinusoidal codes, zero-padded to the decoder width; the same
// encoding the renderer embeds in the feature channels.
template <typename T>
Mat<T> patch_code_table(const Config& cfg) {
  Mat<T> table = Mat<T>::Zero(cfg.n_patches(), cfg.decoder_dim);
  double code[8];
  for (int r = 0; r < cfg.grid_h; ++r)
    for (int c = 0; c < cfg.grid_w; ++c) {
      sinusoidal_code8((c + 0.5) / cfg.grid_w, (r + 0.5) / cfg.grid_h, code);
      for (int j = 0; j < 8; ++j) table(r * cfg.grid_w + c, j) = static_cast<T>(code[j]);
    }
  return table;
}

// One (sample, view) group: queries k_aff x c_llm, patches n_patches x c_vis
// (already gathered). code is the shared positional-table constant id.
// Returns the 1 x n_patches logit row.
template <typename T>
int decode_group(Graph<T>& g, int queries, int patches, int code) {
  const Config& cfg = g.cfg;
  int q = dense(g, queries, "affhead.a_proj");
  int p = dense(g, patches, "affhead.p_proj");
  p = g.tape.tile_add(p, code, 1);
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string pre = "affhead.lyr" + std::to_string(i);
    int qs = ln(g, q, pre + ".self_ln");
    q = g.tape.add(q, mha(g, qs, qs, 1, cfg.decoder_heads, pre + ".self"));
    q = g.tape.add(q, mha(g, ln(g, q, pre + ".qp_ln_q"), ln(g, p, pre + ".qp_ln_p"), 1,
                          cfg.decoder_heads, pre + ".qp"));
    q = g.tape.add(q, ffn(g, ln(g, q, pre + ".ffn_ln"), pre + ".ffn"));
    p = g.tape.add(p, mha(g, ln(g, p, pre + ".pq_ln_p"), ln(g, q, pre + ".pq_ln_q"), 1,
                          cfg.decoder_heads, pre + ".pq"));
  }
  q = ln(g, q, "affhead.ln_q");
  p = ln(g, p, "affhead.ln_p");
  int read = dense(g, g.tape.block_rowmean(q, 1), "affhead.out");
  return g.tape.block_rowdot(p, read, 1, T(1) / std::sqrt(T(cfg.decoder_dim)));
}

// a_t: (groups * k_aff) x c_llm; patches: (groups * n_patches) x c_vis.
// Returns per-cell logits, groups x n_patches. Each group is decoded in its
// own subgraph so a group's row is bit-identical no matter what else shares
// the batch.
template <typename T>
int decode_logits(Graph<T>& g, int a_t, int patches, int groups) {
  const Config& cfg = g.cfg;
  const int K = cfg.k_aff, N = cfg.n_patches();
  int code = g.tape.constant(patch_code_table<T>(cfg));
  std::vector<int> rows;
  rows.reserve(groups);
  for (int gi = 0; gi < groups; ++gi) {
    std::vector<int> qsel(K), psel(N);
    for (int k = 0; k < K; ++k) qsel[k] = gi * K + k;
    for (int i = 0; i < N; ++i) psel[i] = gi * N + i;
    rows.push_back(decode_group(g, g.tape.gather_rows(a_t, qsel), g.tape.gather_rows(patches, psel), code));
  }
  return groups == 1 ? rows[0] : g.tape.concat_rows(rows);
}

// Mean binary cross-entropy over every cell of every group.
template <typename T>
int aff_loss(Graph<T>& g, int logits, const Mat<T>& targets) {
  return g.tape.bce_with_logits_mean(logits, targets);
}

}  // namespace afvla
