#pragma once

// Flow-matching action expert: a small DiT-style transformer over the action
// chunk tokens, cross-attending to the conditioning rows (plus a state
// token), with adaLN-Zero modulation from a sinusoidal time embedding.

#include "afvla/config.hpp"
#include "afvla/nn.hpp"
#include "afvla/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace afvla {

inline void register_actionhead(ParamStore& ps, const Config& cfg) {
  const int D = cfg.action_dmodel;
  register_linear(ps, "actionhead.tok_proj", D, cfg.d_act + 1);
  ps.add("actionhead.pos", cfg.chunk_len, D, Init::normal002);
  register_linear(ps, "actionhead.t_mlp1", D, 16);
  register_linear(ps, "actionhead.t_mlp2", D, D);
  register_linear(ps, "actionhead.state_proj", cfg.c_llm, 3);
  register_ln(ps, "actionhead.kv_ln", cfg.c_llm);
  register_linear(ps, "actionhead.kv_proj", D, cfg.c_llm);
  for (int i = 0; i < cfg.action_blocks; ++i) {
    const std::string pre = "actionhead.blk" + std::to_string(i);
    register_linear(ps, pre + ".mod", 9 * D, D, Init::zeros);
    register_mha(ps, pre + ".self", D);
    register_mha(ps, pre + ".cross", D);
    register_ffn(ps, pre + ".ffn", D, 4 * D);
  }
  register_linear(ps, "actionhead.final_mod", 2 * D, D, Init::zeros);
  register_linear(ps, "actionhead.out", cfg.d_act, D, Init::zeros);
}

// 16-dim sinusoidal embedding of a scalar time in [0, 1].
template <typename T>
void time_code16(T t, T* out) {
  for (int j = 0; j < 8; ++j) {
    const T w = T(2) * T(EIGEN_PI) * T(1 << j);
    out[2 * j] = std::sin(w * t);
    out[2 * j + 1] = std::cos(w * t);
  }
}

// x_raw: (B * chunk_len) x (d_act + 1) rows [x_t row, t].
// tcode: B x 16 time codes. cond: (B * l_z) x c_llm conditioning rows.
// state: B x 3. Returns predicted velocities, (B * chunk_len) x d_act.
template <typename T>
int velocity(Graph<T>& g, int x_raw, int tcode, int cond, int state, int batch, int l_z) {
  const Config& cfg = g.cfg;
  const int D = cfg.action_dmodel;
  int ln_g = g.tape.constant(Mat<T>::Ones(1, D));
  int ln_b = g.tape.constant(Mat<T>::Zero(1, D));
  auto plain_ln = [&](int x) { return g.tape.layer_norm(x, ln_g, ln_b); };

  int x = dense(g, x_raw, "actionhead.tok_proj");
  x = g.tape.tile_add(x, g.p("actionhead.pos"), batch);

  int temb = dense(g, g.tape.silu(dense(g, tcode, "actionhead.t_mlp1")), "actionhead.t_mlp2");
  int mod_in = g.tape.silu(temb);

  int srow = dense(g, state, "actionhead.state_proj");
  int kv_raw = g.tape.gather_rows(g.tape.concat_rows({cond, srow}), interleave_rows(batch, l_z, 1));
  int kv = dense(g, ln(g, kv_raw, "actionhead.kv_ln"), "actionhead.kv_proj");

  for (int i = 0; i < cfg.action_blocks; ++i) {
    const std::string pre = "actionhead.blk" + std::to_string(i);
    int m = dense(g, mod_in, pre + ".mod");
    auto chunk = [&](int j) { return g.tape.slice_cols(m, j * D, D); };
    int h = g.tape.ada_modulate(plain_ln(x), chunk(0), chunk(1), batch);
    x = g.tape.add(x, g.tape.ada_gate(mha(g, h, h, batch, cfg.action_heads, pre + ".self"), chunk(2), batch));
    int h2 = g.tape.ada_modulate(plain_ln(x), chunk(3), chunk(4), batch);
    x = g.tape.add(x, g.tape.ada_gate(mha(g, h2, kv, batch, cfg.action_heads, pre + ".cross"), chunk(5), batch));
    int h3 = g.tape.ada_modulate(plain_ln(x), chunk(6), chunk(7), batch);
    x = g.tape.add(x, g.tape.ada_gate(ffn(g, h3, pre + ".ffn"), chunk(8), batch));
  }
  int fm = dense(g, mod_in, "actionhead.final_mod");
  int xf = g.tape.ada_modulate(plain_ln(x), g.tape.slice_cols(fm, 0, D), g.tape.slice_cols(fm, D, D), batch);
  return dense(g, xf, "actionhead.out");
}

// Hosts the per-sample flow-matching inputs for one batch.
template <typename T>
struct FlowDraw {
  Mat<T> x_raw;    // (B * chunk_len) x (d_act + 1)
  Mat<T> tcode;    // B x 16
  Mat<T> v_star;   // (B * chunk_len) x d_act
};

// Per sample, in order: t ~ U[0,1], then eps row-major over the chunk.
// x_t = (1 - t) eps + t a, v* = a - eps.
template <typename T>
FlowDraw<T> draw_flow_batch(const Config& cfg, const std::vector<Matf>& actions, Rng& rng) {
  const int B = static_cast<int>(actions.size()), H = cfg.chunk_len, D = cfg.d_act;
  FlowDraw<T> out;
  out.x_raw.resize(B * H, D + 1);
  out.tcode.resize(B, 16);
  out.v_star.resize(B * H, D);
  for (int b = 0; b < B; ++b) {
    if (actions[b].rows() != H || actions[b].cols() != D)
      fail(ErrorKind::shape_error, "action chunk shape");
    const T t = static_cast<T>(rng.uniform());
    Mat<T> eps(H, D);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < D; ++j) eps(i, j) = static_cast<T>(rng.normal());
    const Mat<T> a = actions[b].template cast<T>();
    out.x_raw.block(b * H, 0, H, D) = (T(1) - t) * eps + t * a;
    out.x_raw.block(b * H, D, H, 1).setConstant(t);
    out.v_star.block(b * H, 0, H, D) = a - eps;
    T code[16];
    time_code16(t, code);
    for (int j = 0; j < 16; ++j) out.tcode(b, j) = code[j];
  }
  return out;
}

template <typename T>
int fm_loss(Graph<T>& g, int v_hat, const Mat<T>& v_star) {
  return g.tape.mse_mean(v_hat, v_star);
}

}  // namespace afvla
