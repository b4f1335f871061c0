#pragma once

// Token assembly and the pre-norm transformer encoder. Per sample the
// sequence is [img tokens per view | text | state | affordance queries per
// view]; encode() runs backbone_depth bidirectional blocks and splits the
// result into context rows H_t and affordance-query rows A_t.

#include "afvla/config.hpp"
#include "afvla/nn.hpp"
#include "afvla/params.hpp"
#include "afvla/types.hpp"

#include <string>
#include <vector>

namespace afvla {

inline void register_backbone(ParamStore& ps, const Config& cfg, bool with_aff) {
  register_linear(ps, "backbone.img_proj", cfg.c_llm, cfg.c_vis);
  ps.add("backbone.img_pos", cfg.n_img_tokens(), cfg.c_llm, Init::normal002);
  ps.add("backbone.text_embed", cfg.vocab_size(), cfg.c_llm, Init::normal002);
  register_linear(ps, "backbone.state_proj", cfg.c_llm, 3);
  if (with_aff) ps.add("backbone.aff_embed", cfg.k_aff, cfg.c_llm, Init::normal002);
  ps.add("backbone.view_embed", cfg.n_views, cfg.c_llm, Init::normal002);
  ps.add("backbone.segment_embed", 4, cfg.c_llm, Init::normal002);
  for (int i = 0; i < cfg.backbone_depth; ++i) {
    const std::string pre = "backbone.blk" + std::to_string(i);
    register_ln(ps, pre + ".ln1", cfg.c_llm);
    register_mha(ps, pre + ".attn", cfg.c_llm);
    register_ln(ps, pre + ".ln2", cfg.c_llm);
    register_ffn(ps, pre + ".ffn", cfg.c_llm, 4 * cfg.c_llm);
  }
}

// 2x2 mean pooling of one view's patch rows: (H*W) x C -> (H/2 * W/2) x C.
template <typename T>
Mat<T> mean_pool_2x2(const Mat<T>& patches, int grid_h, int grid_w) {
  if (patches.rows() != grid_h * grid_w)
    fail(ErrorKind::shape_error, "patch rows do not match grid");
  const int ph = grid_h / 2, pw = grid_w / 2;
  Mat<T> out(ph * pw, patches.cols());
  for (int r = 0; r < ph; ++r)
    for (int c = 0; c < pw; ++c) {
      out.row(r * pw + c) =
          T(0.25) * (patches.row((2 * r) * grid_w + 2 * c) + patches.row((2 * r) * grid_w + 2 * c + 1) +
                     patches.row((2 * r + 1) * grid_w + 2 * c) + patches.row((2 * r + 1) * grid_w + 2 * c + 1));
    }
  return out;
}

template <typename T>
int segment_row(Graph<T>& g, int index) {
  return g.tape.gather_rows(g.p("backbone.segment_embed"), std::vector<int>{index});
}

// img_pooled: (B*V*n_img) x c_vis constant id, sample-major then view.
// text_ids: B*3 vocab ids. state: B x 3 constant id.
// Returns the (B * L) x c_llm embedded sequence, L = l_seq or l_ctx.
template <typename T>
int build_sequence(Graph<T>& g, int img_pooled, const std::vector<int>& text_ids, int state,
                   int batch, bool with_aff) {
  const Config& cfg = g.cfg;
  const int V = cfg.n_views, NI = cfg.n_img_tokens(), K = cfg.k_aff;
  for (int id : text_ids)
    if (id < 0 || id >= cfg.vocab_size()) fail(ErrorKind::vocab_error, "unknown token id " + std::to_string(id));
  if (static_cast<int>(text_ids.size()) != batch * cfg.l_text())
    fail(ErrorKind::shape_error, "text id count");

  std::vector<int> img_views, aff_views, aff_slots;
  img_views.reserve(static_cast<size_t>(batch) * V * NI);
  for (int b = 0; b < batch; ++b)
    for (int v = 0; v < V; ++v) {
      for (int j = 0; j < NI; ++j) img_views.push_back(v);
      for (int k = 0; k < K; ++k) {
        aff_views.push_back(v);
        aff_slots.push_back(k);
      }
    }

  int img = g.tape.linear(img_pooled, g.p("backbone.img_proj.w"), g.p("backbone.img_proj.b"));
  img = g.tape.tile_add(img, g.p("backbone.img_pos"), batch * V);
  img = g.tape.add(img, g.tape.gather_rows(g.p("backbone.view_embed"), img_views));
  img = g.tape.add_row_broadcast(img, segment_row(g, 0));

  int text = g.tape.gather_rows(g.p("backbone.text_embed"), text_ids);
  text = g.tape.add_row_broadcast(text, segment_row(g, 1));

  int st = g.tape.linear(state, g.p("backbone.state_proj.w"), g.p("backbone.state_proj.b"));
  st = g.tape.add_row_broadcast(st, segment_row(g, 2));

  std::vector<int> parts = {img, text, st};
  if (with_aff) {
    int aff = g.tape.gather_rows(g.p("backbone.aff_embed"), aff_slots);
    aff = g.tape.add(aff, g.tape.gather_rows(g.p("backbone.view_embed"), aff_views));
    aff = g.tape.add_row_broadcast(aff, segment_row(g, 3));
    parts.push_back(aff);
  }
  int stacked = g.tape.concat_rows(parts);

  // Reorder the type-major stack into per-sample sequences.
  const int l_ctx = cfg.l_ctx();
  const int L = with_aff ? cfg.l_seq() : l_ctx;
  const int img_rows = batch * V * NI, text_rows = batch * cfg.l_text();
  std::vector<int> perm;
  perm.reserve(static_cast<size_t>(batch) * L);
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < V * NI; ++j) perm.push_back(b * V * NI + j);
    for (int j = 0; j < cfg.l_text(); ++j) perm.push_back(img_rows + b * cfg.l_text() + j);
    perm.push_back(img_rows + text_rows + b);
    if (with_aff)
      for (int j = 0; j < V * K; ++j) perm.push_back(img_rows + text_rows + batch + b * V * K + j);
  }
  return g.tape.gather_rows(stacked, perm);
}

struct EncodeOut {
  int h_t = -1;  // (B * l_ctx) x c_llm
  int a_t = -1;  // (B * V * k_aff) x c_llm, -1 when the sequence has no queries
};

template <typename T>
EncodeOut encode(Graph<T>& g, int seq, int batch, bool with_aff) {
  const Config& cfg = g.cfg;
  const int L = with_aff ? cfg.l_seq() : cfg.l_ctx();
  int x = seq;
  for (int i = 0; i < cfg.backbone_depth; ++i) {
    const std::string pre = "backbone.blk" + std::to_string(i);
    int h = ln(g, x, pre + ".ln1");
    x = g.tape.add(x, mha(g, h, h, batch, cfg.backbone_heads, pre + ".attn"));
    x = g.tape.add(x, ffn(g, ln(g, x, pre + ".ln2"), pre + ".ffn"));
  }
  EncodeOut out;
  if (!with_aff) {
    out.h_t = x;
    return out;
  }
  std::vector<int> ctx_rows, aff_rows;
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < cfg.l_ctx(); ++j) ctx_rows.push_back(b * L + j);
    for (int j = cfg.l_ctx(); j < L; ++j) aff_rows.push_back(b * L + j);
  }
  out.h_t = g.tape.gather_rows(x, ctx_rows);
  out.a_t = g.tape.gather_rows(x, aff_rows);
  return out;
}

}  // namespace afvla
