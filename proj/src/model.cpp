#include "afvla/model.hpp"

namespace afvla {

VariantShape variant_shape(Integration v) {
  switch (v) {
    case Integration::a_baseline:
      return {false, false, false, false};
    case Integration::b_external:
      return {false, false, true, true};
    case Integration::c_internal_noaction:
      return {true, true, false, false};
    case Integration::d_full_hard:
    case Integration::e_full_st:
      return {true, true, true, false};
  }
  fail(ErrorKind::bad_enum, "variant");
}

Model build_model(const Config& cfg) {
  check_variant_flags(cfg);
  Model m;
  m.cfg = cfg;
  m.shape = variant_shape(cfg.variant);
  register_backbone(m.params, cfg, m.shape.aff_tokens);
  if (m.shape.affhead) register_affhead(m.params, cfg);
  if (m.shape.pooled_cond) register_linear(m.params, "pooling.w_aff", cfg.c_llm, cfg.c_vis);
  register_actionhead(m.params, cfg);
  if (m.shape.external) {
    ParamStore donor;
    register_backbone(donor, cfg, true);
    register_affhead(donor, cfg);
    for (const auto& n : donor.names())
      m.params.add("external." + n, donor.value(n).rows(), donor.value(n).cols(), Init::zeros);
  }
  m.params.init_all(cfg.seed);
  if (cfg.d_act == 3) {
    m.action_min = {-kMaxStep, -kMaxStep, 0.0};
    m.action_max = {kMaxStep, kMaxStep, 1.0};
  } else {
    m.action_min.assign(cfg.d_act, -1.0);
    m.action_max.assign(cfg.d_act, 1.0);
  }
  return m;
}

void load_external(Model& model, const Checkpoint& donor) {
  if (!model.shape.external) fail(ErrorKind::incompatible_flags, "variant takes no external head");
  model.params.load_prefixed(donor, "external.");
  model.external_loaded = true;
}

Checkpoint model_checkpoint(const Model& model, const std::string& stage, int step) {
  Checkpoint ckpt = model.params.to_checkpoint(model.cfg, stage, step);
  ckpt.meta.action_min = model.action_min;
  ckpt.meta.action_max = model.action_max;
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m = build_model(validate_config(ckpt.meta.config));
  m.params.load(ckpt);
  m.action_min = ckpt.meta.action_min;
  m.action_max = ckpt.meta.action_max;
  m.external_loaded = m.shape.external;
  return m;
}

bool warmup_trainable(const std::string& name) {
  return name.rfind("affhead.", 0) == 0 || name == "backbone.aff_embed" || name == "backbone.view_embed";
}

bool joint_trainable(const std::string& name) { return name.rfind("external.", 0) != 0; }

Matf normalize_actions(const Matf& a, const std::vector<double>& lo, const std::vector<double>& hi) {
  if (a.cols() != Eigen::Index(lo.size()) || lo.size() != hi.size())
    fail(ErrorKind::shape_error, "action bound dimensions");
  Matf out = a;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const float span = static_cast<float>(hi[j] - lo[j]);
    out.col(j) = (a.col(j).array() - static_cast<float>(lo[j])) * (2.0f / span) - 1.0f;
  }
  return out;
}

Matf denormalize_actions(const Matf& a, const std::vector<double>& lo, const std::vector<double>& hi) {
  if (a.cols() != Eigen::Index(lo.size()) || lo.size() != hi.size())
    fail(ErrorKind::shape_error, "action bound dimensions");
  Matf out = a;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const float span = static_cast<float>(hi[j] - lo[j]);
    out.col(j) = (a.col(j).array() + 1.0f) * (span * 0.5f) + static_cast<float>(lo[j]);
  }
  return out;
}

Matf flatten_mask(const AffordanceMask& mask) {
  const auto& v = mask.values;
  Matf out(1, v.size());
  for (Eigen::Index r = 0; r < v.rows(); ++r)
    for (Eigen::Index c = 0; c < v.cols(); ++c) out(0, r * v.cols() + c) = v(r, c);
  return out;
}

StepBatch<float> make_step_batch(const Config& cfg, const std::vector<const EpisodeStep*>& steps) {
  const int B = static_cast<int>(steps.size());
  const int V = cfg.n_views, N = cfg.n_patches(), NI = cfg.n_img_tokens();
  StepBatch<float> sb;
  sb.batch = B;
  sb.patches.resize(B * V * N, cfg.c_vis);
  sb.img_pooled.resize(B * V * NI, cfg.c_vis);
  sb.state.resize(B, 3);
  sb.gt_masks.resize(B * V, N);
  sb.text_ids.reserve(B * cfg.l_text());
  sb.gt_actions.reserve(B);
  for (int b = 0; b < B; ++b) {
    const EpisodeStep& s = *steps[b];
    if (static_cast<int>(s.views.size()) != V || static_cast<int>(s.gt_masks.size()) != V)
      fail(ErrorKind::view_count_mismatch, "episode step has wrong view count");
    if (static_cast<int>(s.instruction.size()) != cfg.l_text() || s.state.size() != 3)
      fail(ErrorKind::shape_error, "episode step fields");
    for (int v = 0; v < V; ++v) {
      const Matf& feats = s.views[v].data;
      if (feats.rows() != N || feats.cols() != cfg.c_vis)
        fail(ErrorKind::shape_error, "patch feature shape");
      sb.patches.middleRows((b * V + v) * N, N) = feats;
      sb.img_pooled.middleRows((b * V + v) * NI, NI) = mean_pool_2x2(feats, cfg.grid_h, cfg.grid_w);
      if (s.gt_masks[v].values.rows() != cfg.grid_h || s.gt_masks[v].values.cols() != cfg.grid_w)
        fail(ErrorKind::shape_error, "mask shape");
      sb.gt_masks.row(b * V + v) = flatten_mask(s.gt_masks[v]);
    }
    for (int id : s.instruction) sb.text_ids.push_back(id);
    sb.state.row(b) = s.state.transpose();
    sb.gt_actions.push_back(s.gt_actions.actions);
  }
  return sb;
}

namespace {

// All-frozen float binding for inference passes.
struct FrozenGraph {
  Tape<float> tape;
  BoundParams<float> bound;
};

Graph<float> frozen_graph(FrozenGraph& fg, const Model& model, const std::string& prefix) {
  fg.bound = bind_params(fg.tape, model.params, [](const std::string&) { return false; });
  return Graph<float>{fg.tape, model.cfg,
                      [&fg, prefix](const std::string& n) { return fg.bound.at(prefix + n); }};
}

}  // namespace

Matf donor_logits(const Model& model, const EpisodeStep& step) {
  StepBatch<float> sb = make_step_batch(model.cfg, {&step});
  FrozenGraph fg;
  Graph<float> g = frozen_graph(fg, model, "external.");
  int patches = fg.tape.constant(sb.patches);
  int seq = build_sequence(g, fg.tape.constant(sb.img_pooled), sb.text_ids,
                           fg.tape.constant(sb.state), 1, true);
  EncodeOut enc = encode(g, seq, 1, true);
  return fg.tape.val(decode_logits(g, enc.a_t, patches, model.cfg.n_views));
}

CondOut compute_condition(const Model& model, const EpisodeStep& step) {
  const Config& cfg = model.cfg;
  StepBatch<float> sb = make_step_batch(cfg, {&step});
  FrozenGraph fg;
  Graph<float> g = frozen_graph(fg, model, "");
  int patches = fg.tape.constant(sb.patches);
  int seq = build_sequence(g, fg.tape.constant(sb.img_pooled), sb.text_ids,
                           fg.tape.constant(sb.state), 1, model.shape.aff_tokens);
  EncodeOut enc = encode(g, seq, 1, model.shape.aff_tokens);
  CondOut out;
  out.state = sb.state;
  out.l_z = cfg.l_ctx();
  Matf cond = fg.tape.val(enc.h_t);
  if (model.shape.affhead)
    out.logits = fg.tape.val(decode_logits(g, enc.a_t, patches, cfg.n_views));
  if (model.shape.external) out.logits = donor_logits(model, step);
  if (model.shape.pooled_cond) {
    Matf pooled;
    switch (cfg.pooling) {
      case PoolingMode::soft:
        pooled = soft_pool(out.logits, sb.patches, static_cast<float>(cfg.tau));
        break;
      default:  // hard and st share the hard forward
        pooled = hard_pool(out.logits, sb.patches, cfg.topk);
        break;
    }
    const Matf& w = model.params.value("pooling.w_aff.w");
    const Matf& bias = model.params.value("pooling.w_aff.b");
    Matf r = pooled * w.transpose();
    r.rowwise() += bias.row(0);
    Matf z(cond.rows() + r.rows(), cond.cols());
    z << cond, r;
    cond = std::move(z);
    out.l_z += cfg.n_views;
  }
  out.cond = std::move(cond);
  return out;
}

ActionChunk sample_actions(const Model& model, const CondOut& cond, int steps, Rng& rng) {
  const Config& cfg = model.cfg;
  const int H = cfg.chunk_len, D = cfg.d_act;
  Matf x(H, D);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < D; ++j) x(i, j) = static_cast<float>(rng.normal());
  for (int s = 0; s < steps; ++s) {
    const float t = static_cast<float>(s) / static_cast<float>(steps);
    Matf x_raw(H, D + 1);
    x_raw.leftCols(D) = x;
    x_raw.col(D).setConstant(t);
    Matf tc(1, 16);
    time_code16(t, tc.data());
    FrozenGraph fg;
    Graph<float> g = frozen_graph(fg, model, "");
    int v = velocity(g, fg.tape.constant(x_raw), fg.tape.constant(tc),
                     fg.tape.constant(cond.cond), fg.tape.constant(cond.state), 1, cond.l_z);
    x += (1.0f / static_cast<float>(steps)) * fg.tape.val(v);
  }
  ActionChunk out;
  out.actions = std::move(x);
  return out;
}

Policy make_policy(std::shared_ptr<const Model> model, int denoise_steps, Rng rng) {
  auto sampler_rng = std::make_shared<Rng>(rng);
  return [model, denoise_steps, sampler_rng](const EpisodeStep& step) {
    CondOut cond = compute_condition(*model, step);
    ActionChunk chunk = sample_actions(*model, cond, denoise_steps, *sampler_rng);
    chunk.actions = denormalize_actions(chunk.actions, model->action_min, model->action_max);
    return chunk;
  };
}

}  // namespace afvla
