#pragma once

// Two-stage optimization: mask-only warmup, then the joint objective
// L_act + L_aff under the configured variant/pooling/schedule, with Adam
// parameter groups, per-step divergence checks, and instrumentation of the
// action-loss gradient reaching the mask logits.

#include "afvla/config.hpp"
#include "afvla/model.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace afvla {

struct Dataset {
  std::vector<EpisodeStep> steps;
  std::vector<double> action_min, action_max;  // normalization bounds, one per action dim
};

// Min/max over the chunks, with a floor on the span so constant dims stay finite.
void fit_action_bounds(Dataset& data);

// Adam with one learning rate per parameter-name group:
//   lr_aff      affhead.*, backbone.aff_embed, backbone.view_embed, pooling.*
//   lr_backbone every other backbone.* tensor
//   lr_action   actionhead.*
double group_lr(const Config& cfg, const std::string& name);

class Adam {
 public:
  Adam(const Config& cfg, const ParamStore& ps, bool (*trainable)(const std::string&));
  // Applies one update from the gradients accumulated on the bound tape.
  void step(ParamStore& ps, Tape<float>& tape, const BoundParams<float>& bound);
  int t() const { return t_; }

 private:
  struct Slot {
    std::string name;
    double lr;
    Matf m, v;
  };
  std::vector<Slot> slots_;
  int t_ = 0;
};

struct TrainReport {
  std::string stage;
  int steps = 0;
  int gt_pool_steps = 0;
  double final_loss = 0.0;
  double mean_tail_loss = 0.0;            // mean over the last <=50 steps
  double max_grad_gt = 0.0;               // max |dL_act/dG_t| entry seen
  int nonzero_grad_gt_steps = 0;          // steps where that gradient was not exactly 0
  std::vector<std::pair<int, double>> curve;  // (step, loss) every log_every steps
};

struct StageOpts {
  int steps = 0;
  int log_every = 50;
};

// Stage 1: optimizes only the affordance pathway (affhead.*, the query and
// view embeddings) on L_aff. Everything else stays bit-identical.
TrainReport warmup_stage(Model& model, const Dataset& data, const StageOpts& opts);

// Stage 2 (or single stage): the joint loss under cfg.schedule. two_stage
// requires warmed_up (MissingWarmup otherwise); one_stage_gt pools from the
// ground-truth mask at every step; the others pool from predicted logits.
TrainReport joint_stage(Model& model, const Dataset& data, const StageOpts& opts, bool warmed_up);

// Mean per-cell BCE and mean IoU of the thresholded mask over a dataset.
struct MaskEval {
  double bce = 0.0;
  double iou = 0.0;
};
MaskEval eval_masks(const Model& model, const Dataset& data, int batch);

// Finite-difference audit of one gradient target at a small configuration.
// Targets: affhead, actionhead, project, pooling.soft, pooling.st, end2end.
struct GradCheckReport {
  std::string target;
  int seeds = 0;
  int checked = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};
GradCheckReport run_grad_check(const std::string& target, int n_seeds, std::uint64_t seed0);
Config grad_check_config();

}  // namespace afvla
