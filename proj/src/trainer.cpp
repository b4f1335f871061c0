#include "afvla/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace afvla {

void fit_action_bounds(Dataset& data) {
  if (data.steps.empty()) fail(ErrorKind::out_of_range, "empty dataset");
  const Eigen::Index d = data.steps.front().gt_actions.actions.cols();
  data.action_min.assign(d, std::numeric_limits<double>::infinity());
  data.action_max.assign(d, -std::numeric_limits<double>::infinity());
  for (const EpisodeStep& s : data.steps) {
    const Matf& a = s.gt_actions.actions;
    for (Eigen::Index j = 0; j < d; ++j) {
      data.action_min[j] = std::min(data.action_min[j], double(a.col(j).minCoeff()));
      data.action_max[j] = std::max(data.action_max[j], double(a.col(j).maxCoeff()));
    }
  }
  for (Eigen::Index j = 0; j < d; ++j) {
    if (data.action_max[j] - data.action_min[j] < 1e-6) {
      data.action_min[j] -= 0.5;
      data.action_max[j] += 0.5;
    }
  }
}

double group_lr(const Config& cfg, const std::string& name) {
  if (name.rfind("actionhead.", 0) == 0) return cfg.lr_action;
  if (name.rfind("affhead.", 0) == 0 || name.rfind("pooling.", 0) == 0 ||
      name == "backbone.aff_embed" || name == "backbone.view_embed")
    return cfg.lr_aff;
  return cfg.lr_backbone;
}

Adam::Adam(const Config& cfg, const ParamStore& ps, bool (*trainable)(const std::string&)) {
  for (const auto& name : ps.names()) {
    if (!trainable(name)) continue;
    const Matf& v = ps.value(name);
    slots_.push_back(Slot{name, group_lr(cfg, name), Matf::Zero(v.rows(), v.cols()),
                          Matf::Zero(v.rows(), v.cols())});
  }
}

void Adam::step(ParamStore& ps, Tape<float>& tape, const BoundParams<float>& bound) {
  ++t_;
  const float c1 = 1.0f - std::pow(0.9f, float(t_));
  const float c2 = 1.0f - std::pow(0.999f, float(t_));
  for (Slot& s : slots_) {
    const Matf g = tape.grad_or_zero(bound.at(s.name));
    s.m = 0.9f * s.m + 0.1f * g;
    s.v = 0.999f * s.v + 0.001f * g.cwiseProduct(g);
    ps.value(s.name).array() -=
        float(s.lr) * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + 1e-8f);
  }
}

namespace {

// Epoch-level shuffling; batches read the order sequentially and a fresh
// shuffle starts when the epoch is exhausted.
struct BatchIter {
  std::vector<int> order;
  size_t pos = 0;
  Rng rng;

  BatchIter(int n, Rng r) : rng(r) {
    order.resize(n);
    reshuffle();
  }
  void reshuffle() {
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    for (size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_index(i + 1)]);
    pos = 0;
  }
  std::vector<int> next(int batch) {
    std::vector<int> out;
    out.reserve(batch);
    while (int(out.size()) < batch) {
      if (pos == order.size()) reshuffle();
      out.push_back(order[pos++]);
    }
    return out;
  }
};

void record_loss(TrainReport& rep, int step, double loss, int log_every,
                 std::deque<double>& tail) {
  rep.final_loss = loss;
  tail.push_back(loss);
  if (tail.size() > 50) tail.pop_front();
  if (step % log_every == 0) rep.curve.emplace_back(step, loss);
}

void finish_report(TrainReport& rep, const std::deque<double>& tail) {
  if (tail.empty()) return;
  double sum = 0;
  for (double v : tail) sum += v;
  rep.mean_tail_loss = sum / double(tail.size());
}

std::vector<const EpisodeStep*> gather(const Dataset& data, const std::vector<int>& idx) {
  std::vector<const EpisodeStep*> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(&data.steps[size_t(i)]);
  return out;
}

// The exact expression the BCE op's backward uses, so subtracting it from
// the accumulated logit gradient leaves precisely the action-loss part.
Matf bce_grad_term(const Matf& logits, const Matf& targets) {
  return (1.0f / float(targets.size())) *
         (logits.unaryExpr([](float g) { return 1.0f / (1.0f + std::exp(-g)); }) - targets);
}

}  // namespace

TrainReport warmup_stage(Model& model, const Dataset& data, const StageOpts& opts) {
  if (!model.shape.affhead)
    fail(ErrorKind::incompatible_flags, "variant has no affordance head to warm up");
  TrainReport rep;
  rep.stage = "warmup";
  if (opts.steps <= 0) return rep;  // zero budget: parameters stay untouched
  if (data.steps.empty()) fail(ErrorKind::out_of_range, "empty dataset");
  Adam adam(model.cfg, model.params, warmup_trainable);
  BatchIter iter(int(data.steps.size()), Rng::stream(model.cfg.seed, "shuffle/warmup"));
  std::deque<double> tail;
  for (int step = 0; step < opts.steps; ++step) {
    StepBatch<float> sb = make_step_batch(model.cfg, gather(data, iter.next(model.cfg.batch_size)));
    Tape<float> tape;
    auto bound = bind_params(tape, model.params, warmup_trainable);
    Graph<float> g{tape, model.cfg, [&](const std::string& n) { return bound.at(n); }};
    auto out = forward_warmup(g, sb);
    const double loss = tape.val(out.l_aff)(0, 0);
    if (!std::isfinite(loss))
      fail(ErrorKind::divergence, "warmup loss not finite at step " + std::to_string(step));
    tape.backward(out.l_aff);
    adam.step(model.params, tape, bound);
    record_loss(rep, step, loss, opts.log_every, tail);
    ++rep.steps;
  }
  finish_report(rep, tail);
  return rep;
}

TrainReport joint_stage(Model& model, const Dataset& data, const StageOpts& opts, bool warmed_up) {
  const Config& cfg = model.cfg;
  if (cfg.schedule == Schedule::two_stage && !warmed_up)
    fail(ErrorKind::missing_warmup, "two_stage joint training requires a stage-1 checkpoint");
  if (model.shape.external && !model.external_loaded)
    fail(ErrorKind::missing_warmup, "external variant requires a loaded donor head");
  TrainReport rep;
  rep.stage = "joint";
  if (opts.steps <= 0) return rep;
  if (data.steps.empty()) fail(ErrorKind::out_of_range, "empty dataset");
  if (data.action_min.size() != size_t(cfg.d_act))
    fail(ErrorKind::shape_error, "dataset action bounds missing");
  model.action_min = data.action_min;
  model.action_max = data.action_max;

  Adam adam(cfg, model.params, joint_trainable);
  BatchIter iter(int(data.steps.size()), Rng::stream(cfg.seed, "shuffle/joint"));
  Rng flow_rng = Rng::stream(cfg.seed, "flow");
  std::vector<Matf> ext_cache(model.shape.external ? data.steps.size() : 0);
  std::deque<double> tail;
  const bool use_gt = cfg.schedule == Schedule::one_stage_gt;

  for (int step = 0; step < opts.steps; ++step) {
    const std::vector<int> idx = iter.next(cfg.batch_size);
    StepBatch<float> sb = make_step_batch(cfg, gather(data, idx));
    if (model.shape.external) {
      sb.ext_logits.resize(int(idx.size()) * cfg.n_views, cfg.n_patches());
      for (size_t b = 0; b < idx.size(); ++b) {
        Matf& cached = ext_cache[size_t(idx[b])];
        if (cached.size() == 0) cached = donor_logits(model, data.steps[size_t(idx[b])]);
        sb.ext_logits.middleRows(Eigen::Index(b) * cfg.n_views, cfg.n_views) = cached;
      }
    }
    std::vector<Matf> norm_actions;
    norm_actions.reserve(sb.gt_actions.size());
    for (const Matf& a : sb.gt_actions)
      norm_actions.push_back(normalize_actions(a, data.action_min, data.action_max));
    FlowDraw<float> fd = draw_flow_batch<float>(cfg, norm_actions, flow_rng);

    Tape<float> tape;
    auto bound = bind_params(tape, model.params, joint_trainable);
    Graph<float> g{tape, cfg, [&](const std::string& n) { return bound.at(n); }};
    auto out = forward_train(g, model.shape, sb, fd, cfg.pooling, use_gt);
    const double loss = tape.val(out.l_joint)(0, 0);
    if (!std::isfinite(loss))
      fail(ErrorKind::divergence, "joint loss not finite at step " + std::to_string(step));
    tape.backward(out.l_joint);
    if (use_gt) ++rep.gt_pool_steps;
    if (out.logits >= 0) {
      const Matf act_part =
          tape.grad_or_zero(out.logits) - bce_grad_term(tape.val(out.logits), sb.gt_masks);
      const float mx = act_part.cwiseAbs().maxCoeff();
      if (mx != 0.0f) ++rep.nonzero_grad_gt_steps;
      rep.max_grad_gt = std::max(rep.max_grad_gt, double(mx));
    }
    adam.step(model.params, tape, bound);
    record_loss(rep, step, loss, opts.log_every, tail);
    ++rep.steps;
  }
  finish_report(rep, tail);
  return rep;
}

MaskEval eval_masks(const Model& model, const Dataset& data, int batch) {
  if (!model.shape.affhead)
    fail(ErrorKind::incompatible_flags, "variant has no affordance head to evaluate");
  if (data.steps.empty()) fail(ErrorKind::out_of_range, "empty dataset");
  double bce_total = 0.0, iou_total = 0.0;
  std::int64_t cells = 0, groups = 0;
  for (size_t at = 0; at < data.steps.size(); at += size_t(batch)) {
    std::vector<const EpisodeStep*> ptrs;
    for (size_t i = at; i < std::min(at + size_t(batch), data.steps.size()); ++i)
      ptrs.push_back(&data.steps[i]);
    StepBatch<float> sb = make_step_batch(model.cfg, ptrs);
    Tape<float> tape;
    auto bound = bind_params(tape, model.params, [](const std::string&) { return false; });
    Graph<float> g{tape, model.cfg, [&](const std::string& n) { return bound.at(n); }};
    auto out = forward_warmup(g, sb);
    bce_total += double(tape.val(out.l_aff)(0, 0)) * double(sb.gt_masks.size());
    cells += sb.gt_masks.size();
    const Matf& logits = tape.val(out.logits);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      int inter = 0, uni = 0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const bool pred = logits(r, c) > 0.0f;
        const bool gt = sb.gt_masks(r, c) > 0.5f;
        inter += pred && gt;
        uni += pred || gt;
      }
      iou_total += uni == 0 ? 1.0 : double(inter) / double(uni);
      ++groups;
    }
  }
  return MaskEval{bce_total / double(cells), iou_total / double(groups)};
}

// ----------------------------------------------------------- gradient audit

namespace {

using BuildFn = std::function<int(Tape<double>&, const std::vector<int>&)>;

double fd_rel(double analytic, double fd) {
  const double diff = std::abs(analytic - fd);
  if (diff < 1e-7) return 0.0;
  return diff / std::max(std::max(std::abs(analytic), std::abs(fd)), 1e-8);
}

double eval_at(const BuildFn& build, const std::vector<Matd>& leaves) {
  Tape<double> tape;
  std::vector<int> ids;
  ids.reserve(leaves.size());
  for (const Matd& m : leaves) ids.push_back(tape.leaf(m, true));
  return tape.val(build(tape, ids))(0, 0);
}

// Analytic gradients from build_a, finite differences through build_fd
// (the same builder for smooth paths; the soft surrogate for st).
void cross_fd(std::vector<Matd> leaves, const BuildFn& build_a, const BuildFn& build_fd,
              GradCheckReport& rep, double eps = 1e-4) {
  Tape<double> tape;
  std::vector<int> ids;
  for (const Matd& m : leaves) ids.push_back(tape.leaf(m, true));
  tape.backward(build_a(tape, ids));
  std::vector<Matd> analytic;
  for (int id : ids) analytic.push_back(tape.grad_or_zero(id));
  for (size_t l = 0; l < leaves.size(); ++l)
    for (Eigen::Index r = 0; r < leaves[l].rows(); ++r)
      for (Eigen::Index c = 0; c < leaves[l].cols(); ++c) {
        const double keep = leaves[l](r, c);
        leaves[l](r, c) = keep + eps;
        const double fp = eval_at(build_fd, leaves);
        leaves[l](r, c) = keep - eps;
        const double fm = eval_at(build_fd, leaves);
        leaves[l](r, c) = keep;
        rep.max_rel_err = std::max(rep.max_rel_err, fd_rel(analytic[l](r, c), (fp - fm) / (2 * eps)));
        ++rep.checked;
      }
}

std::vector<Matd> store_leaves(const ParamStore& ps, Rng& rng) {
  std::vector<Matd> out;
  for (const auto& name : ps.names()) {
    const Matf& v = ps.value(name);
    Matd m(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = 0.1 * rng.normal();
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0) m.array() += 1.0;
    out.push_back(std::move(m));
  }
  return out;
}

std::function<int(const std::string&)> store_lookup(const ParamStore& ps,
                                                    const std::vector<int>& ids, int offset) {
  auto index = std::make_shared<std::map<std::string, int>>();
  int i = offset;
  for (const auto& name : ps.names()) (*index)[name] = i++;
  return [index, &ids](const std::string& name) {
    auto it = index->find(name);
    if (it == index->end()) fail(ErrorKind::unknown_key, "gradcheck parameter " + name);
    return ids[size_t(it->second)];
  };
}

// Scalar weighted sum, linear in x: the incoming pooled gradient is then a
// constant, which is what makes the st-vs-soft comparison well posed.
int weighted_sum(Tape<double>& t, int x, Matd w) {
  Matd v(1, 1);
  v(0, 0) = (t.val(x).array() * w.array()).sum();
  return t.custom(std::move(v), t.needs_grad(x),
                  [&t, x, w = std::move(w)](int id) { t.acc(x) += t.grad(id)(0, 0) * w; });
}

}  // namespace

Config grad_check_config() {
  Config cfg;
  cfg.grid_h = cfg.grid_w = 4;
  cfg.c_vis = 8;
  cfg.c_llm = 16;
  cfg.k_aff = 2;
  cfg.topk = 4;
  cfg.chunk_len = 2;
  cfg.d_act = 1;
  cfg.backbone_depth = 1;
  cfg.backbone_heads = 2;
  cfg.decoder_dim = 16;
  cfg.decoder_layers = 2;
  cfg.decoder_heads = 2;
  cfg.action_dmodel = 8;
  cfg.action_blocks = 2;
  cfg.action_heads = 2;
  return cfg;
}

GradCheckReport run_grad_check(const std::string& target, int n_seeds, std::uint64_t seed0) {
  GradCheckReport rep;
  rep.target = target;
  rep.seeds = n_seeds;
  Config cfg = grad_check_config();

  for (int s = 0; s < n_seeds; ++s) {
    Rng rng = Rng::stream(seed0, "gradcheck/" + target + "/" + std::to_string(s));
    auto rand = [&rng](Eigen::Index r, Eigen::Index c, double scale) {
      Matd m(r, c);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
      return m;
    };

    if (target == "affhead") {
      ParamStore ps;
      register_affhead(ps, cfg);
      const int G = 2;
      std::vector<Matd> leaves = {rand(G * cfg.k_aff, cfg.c_llm, 0.5),
                                  rand(G * cfg.n_patches(), cfg.c_vis, 0.5)};
      for (Matd& m : store_leaves(ps, rng)) leaves.push_back(std::move(m));
      Matd targets(G, cfg.n_patches());
      for (Eigen::Index i = 0; i < targets.rows(); ++i)
        for (Eigen::Index j = 0; j < targets.cols(); ++j)
          targets(i, j) = rng.uniform() < 0.3 ? 1.0 : 0.0;
      BuildFn build = [&](Tape<double>& t, const std::vector<int>& ids) {
        Graph<double> g{t, cfg, store_lookup(ps, ids, 2)};
        return aff_loss(g, decode_logits(g, ids[0], ids[1], G), targets);
      };
      cross_fd(std::move(leaves), build, build, rep);
    } else if (target == "actionhead") {
      ParamStore ps;
      register_actionhead(ps, cfg);
      const int B = 2, l_z = 3;
      std::vector<Matd> leaves = {rand(B * cfg.chunk_len, cfg.d_act + 1, 0.5), rand(B, 16, 0.5),
                                  rand(B * l_z, cfg.c_llm, 0.5), rand(B, 3, 0.5)};
      for (Matd& m : store_leaves(ps, rng)) leaves.push_back(std::move(m));
      Matd v_star = rand(B * cfg.chunk_len, cfg.d_act, 1.0);
      BuildFn build = [&](Tape<double>& t, const std::vector<int>& ids) {
        Graph<double> g{t, cfg, store_lookup(ps, ids, 4)};
        return fm_loss(g, velocity(g, ids[0], ids[1], ids[2], ids[3], B, l_z), v_star);
      };
      cross_fd(std::move(leaves), build, build, rep);
    } else if (target == "project") {
      std::vector<Matd> leaves = {rand(3, cfg.c_vis, 0.5), rand(cfg.c_llm, cfg.c_vis, 0.2),
                                  rand(1, cfg.c_llm, 0.2)};
      Matd tgt = rand(3, cfg.c_llm, 0.5);
      BuildFn build = [&](Tape<double>& t, const std::vector<int>& ids) {
        return t.mse_mean(t.linear(ids[0], ids[1], ids[2]), tgt);
      };
      cross_fd(std::move(leaves), build, build, rep);
    } else if (target == "pooling.soft") {
      const int G = 3;
      std::vector<Matd> leaves = {rand(G, cfg.n_patches(), 1.0),
                                  rand(G * cfg.n_patches(), cfg.c_vis, 0.5)};
      Matd tgt = rand(G, cfg.c_vis, 0.5);
      BuildFn build = [&](Tape<double>& t, const std::vector<int>& ids) {
        return t.mse_mean(pool_soft(t, ids[0], ids[1], double(cfg.tau)), tgt);
      };
      cross_fd(std::move(leaves), build, build, rep);
    } else if (target == "pooling.st") {
      const int G = 3;
      std::vector<Matd> leaves = {rand(G, cfg.n_patches(), 1.0),
                                  rand(G * cfg.n_patches(), cfg.c_vis, 0.5)};
      Matd w = rand(G, cfg.c_vis, 1.0);
      // forward must be the hard path bit for bit
      {
        Tape<double> t;
        int l = t.leaf(leaves[0], true), p = t.leaf(leaves[1], true);
        Matd hard = hard_pool(leaves[0], leaves[1], cfg.topk);
        const Matd& st = t.val(pool_st(t, l, p, cfg.topk, double(cfg.tau)));
        if ((st.array() != hard.array()).any()) {
          rep.max_rel_err = 1.0;
          rep.pass = false;
          return rep;
        }
      }
      BuildFn build_st = [&](Tape<double>& t, const std::vector<int>& ids) {
        return weighted_sum(t, pool_st(t, ids[0], ids[1], cfg.topk, double(cfg.tau)), w);
      };
      BuildFn build_soft = [&](Tape<double>& t, const std::vector<int>& ids) {
        return weighted_sum(t, pool_soft(t, ids[0], ids[1], double(cfg.tau)), w);
      };
      cross_fd(std::move(leaves), build_st, build_soft, rep);
    } else if (target == "end2end") {
      Config ecfg = cfg;
      ecfg.pooling = PoolingMode::soft;
      Model model = build_model(ecfg);
      const int B = 2;
      StepBatch<double> sb;
      sb.batch = B;
      sb.patches = rand(B * ecfg.n_patches(), ecfg.c_vis, 0.5);
      sb.img_pooled = rand(B * ecfg.n_img_tokens(), ecfg.c_vis, 0.5);
      sb.text_ids = {1, 4, 7, 2, 5, 8};
      sb.state = rand(B, 3, 0.3);
      sb.gt_masks = Matd::Zero(B, ecfg.n_patches());
      for (Eigen::Index i = 0; i < sb.gt_masks.rows(); ++i)
        for (Eigen::Index j = 0; j < sb.gt_masks.cols(); ++j)
          sb.gt_masks(i, j) = rng.uniform() < 0.25 ? 1.0 : 0.0;
      FlowDraw<double> fd;
      fd.x_raw = rand(B * ecfg.chunk_len, ecfg.d_act + 1, 0.5);
      fd.tcode = rand(B, 16, 0.5);
      fd.v_star = rand(B * ecfg.chunk_len, ecfg.d_act, 1.0);
      std::vector<Matd> leaves = store_leaves(model.params, rng);
      BuildFn build = [&](Tape<double>& t, const std::vector<int>& ids) {
        Graph<double> g{t, ecfg, store_lookup(model.params, ids, 0)};
        return forward_train(g, model.shape, sb, fd, PoolingMode::soft, false).l_joint;
      };
      cross_fd(std::move(leaves), build, build, rep);
    } else {
      fail(ErrorKind::unknown_key, "unknown grad-check target " + target);
    }
  }
  rep.pass = rep.max_rel_err < 1e-4;
  return rep;
}

}  // namespace afvla
