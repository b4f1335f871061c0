#pragma once

// End-to-end orchestration: dataset generation and loading, training runs
// (with run manifests and checkpoints), policy evaluation over fresh scenes,
// the ablation grid, and mask dumps. Everything here is deterministic in its
// seeds except the run manifest, which records wall-clock timestamps.

#include "afvla/config.hpp"
#include "afvla/model.hpp"
#include "afvla/serialize.hpp"
#include "afvla/synthworld.hpp"
#include "afvla/trainer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace afvla {

// Worker count for evaluation rollouts: AFVLA_THREADS when set (>= 1),
// otherwise the hardware concurrency. Training is always single-threaded.
int env_threads();

// --------------------------------------------------------------- datasets

struct GenDataOpts {
  std::string out_dir;
  Suite suite = Suite::easy;
  std::uint64_t seed = 0;
  int n_train = 512;
  int n_val = 64;
  int n_views = 1;
  int chunk_len = 8;
};

// Writes <out>/episodes/<split>/<id>.json plus <out>/manifest.json. Every
// sample is an independent scene observed from a randomized effector state.
void generate_dataset(const GenDataOpts& opts);

Dataset load_split(const std::string& data_dir, const std::string& split);

// ---------------------------------------------------------------- training

struct TrainOpts {
  Config cfg;
  std::string data_dir;
  std::string run_dir;
  std::string warmup_from;    // optional stage-1 checkpoint shared across runs
  std::string external_from;  // optional donor checkpoint (b_external)
  std::string cmdline;        // recorded verbatim in the run manifest
};

struct TrainOutcome {
  std::string checkpoint_path;
  TrainReport warmup, joint;
  std::optional<MaskEval> val_masks;  // on the val split when a mask head exists
};

// Writes <run>/run.json up front, trains per cfg.schedule, then writes
// <run>/checkpoint.afvla and <run>/train.json. b_external without an
// explicit donor trains its own frozen donor head first.
TrainOutcome run_training(const TrainOpts& opts);

// --------------------------------------------------------------- evaluation

struct EvalOpts {
  Suite suite = Suite::easy;
  int n_scenes = 100;
  std::uint64_t eval_seed = 1234;
  int max_steps = kMaxEnvSteps;
  bool oracle = false;  // evaluate the scripted controller instead
  int threads = 0;      // 0: env_threads()
};

struct EvalOutcome {
  int n_scenes = 0;
  int successes = 0;
  double mean_steps = 0.0;
  double mean_final_distance = 0.0;
  double success_rate() const { return n_scenes ? double(successes) / n_scenes : 0.0; }
};

// Rolls the model's policy (or the oracle) over n_scenes fresh scenes drawn
// from derive_seed(eval_seed, "eval", i). Thread-count independent.
EvalOutcome evaluate_policy(const Model& model, const EvalOpts& opts);

// Deterministic metrics document; success fields are null when n_scenes = 0,
// mask fields null when the dataset path is empty or the variant has no head.
std::string metrics_json(const Config& cfg, const EvalOpts& opts, const EvalOutcome& eval,
                         const std::optional<MaskEval>& masks);

// ---------------------------------------------------------------- ablation

struct AblateOpts {
  std::string out_dir;
  Suite suite = Suite::distractor;
  int seeds = 5;
  std::uint64_t seed0 = 0;
  int n_scenes = 100;
  GenDataOpts data;      // out_dir filled per seed
  int warmup_steps = -1; // -1: keep config default
  int joint_steps = -1;
  Config base;           // dims shared by every run
};

struct AblateRow {
  std::string name;  // grid label, e.g. "e_full_st+soft"
  Integration variant;
  PoolingMode pooling;
  Schedule schedule;
  std::uint64_t seed = 0;
  EvalOutcome eval;
  std::optional<MaskEval> masks;
};

// The full comparison grid: variants a-e plus pooling and schedule swaps of
// the full model, each trained per seed on a shared per-seed dataset (with a
// shared stage-1 checkpoint where the schedule allows it) and evaluated on
// the same scene stream. Writes <out>/ablate.csv and <out>/ablate.json.
std::vector<AblateRow> run_ablation(const AblateOpts& opts);

std::string ablation_csv(const std::vector<AblateRow>& rows);
std::string ablation_json(const std::vector<AblateRow>& rows);

// -------------------------------------------------------------- mask dumps

// Predicted per-view masks for one episode step as binary PGM files named
// mask_v<view>.pgm under out_dir; returns the file paths. Fails for
// variants without a mask source.
std::vector<std::string> dump_masks(const Model& model, const EpisodeStep& step,
                                    const std::string& out_dir);

}  // namespace afvla
