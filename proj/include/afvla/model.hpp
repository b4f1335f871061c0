#pragma once

// Variant assembly: which parameter groups exist per integration variant,
// batch construction from episode steps, the joint training forward pass,
// and the inference-side policy (condition forward + Euler flow sampling).

#include "afvla/actionhead.hpp"
#include "afvla/affhead.hpp"
#include "afvla/backbone.hpp"
#include "afvla/config.hpp"
#include "afvla/nn.hpp"
#include "afvla/params.hpp"
#include "afvla/pooling.hpp"
#include "afvla/synthworld.hpp"
#include "afvla/types.hpp"

#include <memory>
#include <string>
#include <vector>

namespace afvla {

struct VariantShape {
  bool aff_tokens = false;   // backbone carries affordance query tokens
  bool affhead = false;      // decoder + mask loss present
  bool pooled_cond = false;  // pooled readout appended to the condition
  bool external = false;     // logits come from a frozen donor model
};

VariantShape variant_shape(Integration v);

struct Model {
  Config cfg;
  VariantShape shape;
  ParamStore params;
  // Per-dimension action normalization bounds used by flow matching.
  std::vector<double> action_min, action_max;
  bool external_loaded = false;
};

// Registers the variant's parameter set and initializes it from cfg.seed.
// Throws IncompatibleFlags on contradictory variant/pooling/schedule flags.
Model build_model(const Config& cfg);

// Fills the frozen external.* entries of a b_external model from a donor
// stage-1 checkpoint.
void load_external(Model& model, const Checkpoint& donor);

// Checkpoint carrying the model's config, parameters, and action bounds.
Checkpoint model_checkpoint(const Model& model, const std::string& stage, int step);

// Rebuilds a model from a checkpoint (config map -> validated Config).
Model model_from_checkpoint(const Checkpoint& ckpt);

bool warmup_trainable(const std::string& name);
bool joint_trainable(const std::string& name);

// ------------------------------------------------------------------ batching

template <typename T>
struct StepBatch {
  int batch = 0;
  Mat<T> patches;             // (B*V*N) x c_vis
  Mat<T> img_pooled;          // (B*V*NI) x c_vis
  std::vector<int> text_ids;  // B * 3
  Mat<T> state;               // B x 3
  Mat<T> gt_masks;            // (B*V) x N
  std::vector<Matf> gt_actions;
  Mat<T> ext_logits;          // (B*V) x N, only for b_external
};

Matf flatten_mask(const AffordanceMask& mask);  // 1 x n_patches, row-major cells

// Per-dimension affine map of action chunks into [-1, 1] and back.
Matf normalize_actions(const Matf& a, const std::vector<double>& lo, const std::vector<double>& hi);
Matf denormalize_actions(const Matf& a, const std::vector<double>& lo, const std::vector<double>& hi);

StepBatch<float> make_step_batch(const Config& cfg, const std::vector<const EpisodeStep*>& steps);

template <typename U>
StepBatch<U> cast_batch(const StepBatch<float>& sb) {
  StepBatch<U> out;
  out.batch = sb.batch;
  out.patches = sb.patches.cast<U>();
  out.img_pooled = sb.img_pooled.cast<U>();
  out.text_ids = sb.text_ids;
  out.state = sb.state.cast<U>();
  out.gt_masks = sb.gt_masks.cast<U>();
  out.gt_actions = sb.gt_actions;
  if (sb.ext_logits.size()) out.ext_logits = sb.ext_logits.cast<U>();
  return out;
}

// ------------------------------------------------------------------ forwards

template <typename T>
struct ForwardIds {
  int h_t = -1, a_t = -1, logits = -1, pooled = -1, cond = -1, v_hat = -1;
  int l_aff = -1, l_act = -1, l_joint = -1;
  int l_z = 0;
};

// The full joint-stage graph. pool_mode selects the selection path when the
// condition is pooled; use_gt selects ground-truth pooling instead.
template <typename T>
ForwardIds<T> forward_train(Graph<T>& g, const VariantShape& shape, const StepBatch<T>& sb,
                            const FlowDraw<T>& fd, PoolingMode pool_mode, bool use_gt) {
  const Config& cfg = g.cfg;
  const int B = sb.batch, G = B * cfg.n_views;
  ForwardIds<T> out;
  int patches = g.tape.constant(sb.patches);
  int state = g.tape.constant(sb.state);
  int seq = build_sequence(g, g.tape.constant(sb.img_pooled), sb.text_ids, state, B, shape.aff_tokens);
  EncodeOut enc = encode(g, seq, B, shape.aff_tokens);
  out.h_t = enc.h_t;
  out.a_t = enc.a_t;
  if (shape.affhead) {
    out.logits = decode_logits(g, enc.a_t, patches, G);
    out.l_aff = aff_loss(g, out.logits, sb.gt_masks);
  }
  int cond = enc.h_t;
  out.l_z = cfg.l_ctx();
  if (shape.pooled_cond) {
    if (use_gt) {
      out.pooled = pool_gt(g.tape, sb.gt_masks, patches);
    } else {
      int src = shape.external ? g.tape.constant(sb.ext_logits) : out.logits;
      switch (pool_mode) {
        case PoolingMode::hard:
          out.pooled = pool_hard(g.tape, src, patches, cfg.topk);
          break;
        case PoolingMode::soft:
          out.pooled = pool_soft(g.tape, src, patches, T(cfg.tau));
          break;
        case PoolingMode::st:
          out.pooled = pool_st(g.tape, src, patches, cfg.topk, T(cfg.tau));
          break;
        case PoolingMode::gt:
          out.pooled = pool_gt(g.tape, sb.gt_masks, patches);
          break;
      }
    }
    int r = g.tape.linear(out.pooled, g.p("pooling.w_aff.w"), g.p("pooling.w_aff.b"));
    cond = g.tape.gather_rows(g.tape.concat_rows({enc.h_t, r}),
                              interleave_rows(B, cfg.l_ctx(), cfg.n_views));
    out.l_z = cfg.l_ctx() + cfg.n_views;
  }
  out.cond = cond;
  out.v_hat = velocity(g, g.tape.constant(fd.x_raw), g.tape.constant(fd.tcode), cond, state, B, out.l_z);
  out.l_act = fm_loss(g, out.v_hat, fd.v_star);
  out.l_joint = shape.affhead ? g.tape.add(out.l_act, out.l_aff) : out.l_act;
  return out;
}

// Warmup graph: sequence + encoder + decoder + mask loss only.
template <typename T>
ForwardIds<T> forward_warmup(Graph<T>& g, const StepBatch<T>& sb) {
  const int B = sb.batch, G = B * g.cfg.n_views;
  ForwardIds<T> out;
  int patches = g.tape.constant(sb.patches);
  int seq = build_sequence(g, g.tape.constant(sb.img_pooled), sb.text_ids,
                           g.tape.constant(sb.state), B, true);
  EncodeOut enc = encode(g, seq, B, true);
  out.h_t = enc.h_t;
  out.a_t = enc.a_t;
  out.logits = decode_logits(g, enc.a_t, patches, G);
  out.l_aff = aff_loss(g, out.logits, sb.gt_masks);
  out.l_joint = out.l_aff;
  return out;
}

// ----------------------------------------------------------------- inference

struct CondOut {
  Matf cond;    // l_z x c_llm conditioning rows for one step
  Matf state;   // 1 x 3
  Matf logits;  // V x N predicted (or donor) logits; empty for variant a
  int l_z = 0;
};

// No-grad forward of everything except the action head for one episode step.
CondOut compute_condition(const Model& model, const EpisodeStep& step);

// Frozen-donor logits for one step (variant b), V x N.
Matf donor_logits(const Model& model, const EpisodeStep& step);

// Euler integration of the learned velocity field from x_0 = eps ~ N(0, I).
// Works in the model's normalized action space.
ActionChunk sample_actions(const Model& model, const CondOut& cond, int steps, Rng& rng);

// Closed-loop policy: one condition forward + flow sampling per replan,
// denormalized through the model's action bounds.
Policy make_policy(std::shared_ptr<const Model> model, int denoise_steps, Rng rng);

}  // namespace afvla
