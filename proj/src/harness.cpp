#include "afvla/harness.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace afvla {

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string pad6(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

std::string iso_utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

int env_threads() {
  if (const char* raw = std::getenv("AFVLA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0' || v < 1)
      fail(ErrorKind::out_of_range, std::string("AFVLA_THREADS: ") + raw);
    return int(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? int(hw) : 1;
}

// ------------------------------------------------------------------ datasets

void generate_dataset(const GenDataOpts& opts) {
  if (opts.out_dir.empty()) fail(ErrorKind::usage, "gen-data: missing output directory");
  if (opts.n_train < 1 || opts.n_val < 0) fail(ErrorKind::out_of_range, "gen-data: bad counts");

  const std::pair<std::string, int> splits[] = {{"train", opts.n_train}, {"val", opts.n_val}};
  Dataset train_fit;
  for (const auto& [split, count] : splits) {
    const fs::path dir = fs::path(opts.out_dir) / "episodes" / split;
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
      Scene scene = gen_scene(derive_seed(opts.seed, "scene-" + split, std::uint64_t(i)),
                              opts.suite);
      Rng r = Rng::stream(opts.seed, "state/" + split + "/" + std::to_string(i));
      SimState sim;
      sim.x = r.uniform(0.05, 0.95);
      sim.y = r.uniform(0.05, 0.95);
      sim.gripper = r.uniform() < 0.5 ? 1.0 : 0.0;
      EpisodeStep step = make_step(scene, sim, opts.n_views, opts.chunk_len);
      save_episode((dir / (pad6(i) + ".json")).string(), step);
      if (split == "train") train_fit.steps.push_back(std::move(step));
    }
  }
  fit_action_bounds(train_fit);

  json m;
  m["format_version"] = 1;
  m["suite"] = to_string(opts.suite);
  m["seed"] = opts.seed;
  m["n_views"] = opts.n_views;
  m["chunk_len"] = opts.chunk_len;
  m["splits"] = {{"train", opts.n_train}, {"val", opts.n_val}};
  m["action_min"] = train_fit.action_min;
  m["action_max"] = train_fit.action_max;
  write_text_file((fs::path(opts.out_dir) / "manifest.json").string(), m.dump(2) + "\n");
}

Dataset load_split(const std::string& data_dir, const std::string& split) {
  const fs::path dir = fs::path(data_dir) / "episodes" / split;
  if (!fs::is_directory(dir))
    fail(ErrorKind::io_error, "no such split directory: " + dir.string());
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(ErrorKind::io_error, "empty split: " + dir.string());
  Dataset d;
  d.steps.reserve(files.size());
  for (const std::string& f : files) d.steps.push_back(load_episode(f));
  fit_action_bounds(d);
  return d;
}

// ------------------------------------------------------------------ training

namespace {

json report_json(const TrainReport& rep) {
  json j;
  j["stage"] = rep.stage;
  j["steps"] = rep.steps;
  j["gt_pool_steps"] = rep.gt_pool_steps;
  j["final_loss"] = rep.final_loss;
  j["mean_tail_loss"] = rep.mean_tail_loss;
  j["max_grad_gt"] = rep.max_grad_gt;
  j["nonzero_grad_gt_steps"] = rep.nonzero_grad_gt_steps;
  json curve = json::array();
  for (const auto& [step, loss] : rep.curve) curve.push_back({step, loss});
  j["curve"] = std::move(curve);
  return j;
}

// Shape-relevant keys that a warmup checkpoint must agree on; flags like the
// variant, pooling, schedule, learning rates, and budgets may differ.
const char* kStructuralKeys[] = {
    "seed",          "n_views",        "patch_grid",    "c_vis",          "c_llm",
    "k_aff",         "chunk_len",      "d_act",         "backbone_depth", "backbone_heads",
    "decoder_dim",   "decoder_layers", "decoder_heads", "action_dmodel",  "action_blocks",
    "action_heads"};

void check_structural_match(const Config& cfg, const Checkpoint& ckpt, const char* what) {
  const auto mine = config_to_map(cfg);
  for (const char* key : kStructuralKeys) {
    auto it = ckpt.meta.config.find(key);
    if (it == ckpt.meta.config.end() || it->second != mine.at(key))
      fail(ErrorKind::schema_mismatch,
           std::string(what) + ": checkpoint disagrees on " + key + " (" +
               (it == ckpt.meta.config.end() ? std::string("missing") : it->second) + " vs " +
               mine.at(key) + ")");
  }
}

Checkpoint train_donor(const Config& cfg, const Dataset& train) {
  Config donor_cfg = cfg;
  donor_cfg.variant = Integration::e_full_st;
  donor_cfg.pooling = PoolingMode::st;
  donor_cfg.schedule = Schedule::two_stage;
  donor_cfg.seed = derive_seed(cfg.seed, "external-donor", 0);
  Model donor = build_model(donor_cfg);
  TrainReport rep = warmup_stage(donor, train, StageOpts{cfg.warmup_steps});
  return model_checkpoint(donor, "warmup", rep.steps);
}

}  // namespace

TrainOutcome run_training(const TrainOpts& opts) {
  const Config& cfg = opts.cfg;
  check_variant_flags(cfg);
  if (opts.run_dir.empty()) fail(ErrorKind::usage, "train: missing run directory");
  fs::create_directories(opts.run_dir);

  {
    json run;
    run["cmdline"] = opts.cmdline;
    run["config"] = config_to_map(cfg);
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", (unsigned long long)config_hash(cfg));
    run["config_hash"] = hash;
    run["data_dir"] = opts.data_dir;
    run["started_at"] = iso_utc_now();
    run["version"] = kToolVersion;
    run["warmup_from"] = opts.warmup_from;
    run["external_from"] = opts.external_from;
    write_text_file((fs::path(opts.run_dir) / "run.json").string(), run.dump(2) + "\n");
  }

  Dataset train = load_split(opts.data_dir, "train");
  TrainOutcome out;
  Model model = build_model(cfg);

  if (model.shape.external) {
    Checkpoint donor = opts.external_from.empty()
                           ? train_donor(cfg, train)
                           : load_checkpoint(opts.external_from, nullptr);
    if (!opts.external_from.empty()) check_structural_match(cfg, donor, "external donor");
    load_external(model, donor);
  }

  bool warmed = false;
  if (cfg.schedule == Schedule::two_stage) {
    if (!opts.warmup_from.empty()) {
      Checkpoint w = load_checkpoint(opts.warmup_from, nullptr);
      check_structural_match(cfg, w, "warmup checkpoint");
      model.params.load(w);
      warmed = true;
    } else {
      out.warmup = warmup_stage(model, train, StageOpts{cfg.warmup_steps});
      warmed = true;
    }
  }
  if (cfg.joint_steps > 0) out.joint = joint_stage(model, train, StageOpts{cfg.joint_steps}, warmed);

  const bool ran_joint = out.joint.steps > 0;
  const std::string stage = ran_joint ? "joint" : (warmed ? "warmup" : "init");
  const int step = ran_joint ? out.joint.steps : out.warmup.steps;
  out.checkpoint_path = (fs::path(opts.run_dir) / "checkpoint.afvla").string();
  save_checkpoint(out.checkpoint_path, model_checkpoint(model, stage, step));

  if (model.shape.affhead && fs::is_directory(fs::path(opts.data_dir) / "episodes" / "val")) {
    Dataset val = load_split(opts.data_dir, "val");
    out.val_masks = eval_masks(model, val, cfg.batch_size);
  }

  json tj;
  tj["warmup"] = report_json(out.warmup);
  tj["joint"] = report_json(out.joint);
  if (out.val_masks) {
    tj["val_mask_bce"] = out.val_masks->bce;
    tj["val_mask_iou"] = out.val_masks->iou;
  } else {
    tj["val_mask_bce"] = nullptr;
    tj["val_mask_iou"] = nullptr;
  }
  write_text_file((fs::path(opts.run_dir) / "train.json").string(), tj.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------- evaluation

EvalOutcome evaluate_policy(const Model& model, const EvalOpts& opts) {
  EvalOutcome out;
  out.n_scenes = opts.n_scenes;
  if (opts.n_scenes <= 0) return out;

  std::vector<SuccessReport> reports(size_t(opts.n_scenes));
  // non-owning: rollouts only read the model
  std::shared_ptr<const Model> shared(&model, [](const Model*) {});
  const int threads = std::max(1, std::min(opts.threads > 0 ? opts.threads : env_threads(),
                                           opts.n_scenes));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < opts.n_scenes; i = next.fetch_add(1)) {
      Scene scene = gen_scene(derive_seed(opts.eval_seed, "eval", std::uint64_t(i)), opts.suite);
      Policy policy;
      if (opts.oracle) {
        const Scene* sc = &scene;
        const int chunk = model.cfg.chunk_len;
        policy = [sc, chunk](const EpisodeStep& st) {
          SimState sim{double(st.state(0)), double(st.state(1)), double(st.state(2)), 0};
          return oracle_actions(*sc, sim, chunk);
        };
      } else {
        policy = make_policy(shared, model.cfg.denoise_steps,
                             Rng::stream(opts.eval_seed, "policy/" + std::to_string(i)));
      }
      reports[size_t(i)] =
          evaluate_rollout(policy, scene, opts.max_steps, model.cfg.n_views, model.cfg.chunk_len);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  double steps_sum = 0, dist_sum = 0;
  for (const SuccessReport& r : reports) {
    out.successes += r.success ? 1 : 0;
    steps_sum += r.steps_used;
    dist_sum += r.final_distance;
  }
  out.mean_steps = steps_sum / opts.n_scenes;
  out.mean_final_distance = dist_sum / opts.n_scenes;
  return out;
}

std::string metrics_json(const Config& cfg, const EvalOpts& opts, const EvalOutcome& eval,
                         const std::optional<MaskEval>& masks) {
  json j;
  j["variant"] = to_string(cfg.variant);
  j["pooling"] = to_string(cfg.pooling);
  j["schedule"] = to_string(cfg.schedule);
  j["seed"] = cfg.seed;
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", (unsigned long long)config_hash(cfg));
  j["config_hash"] = hash;
  j["suite"] = to_string(opts.suite);
  j["eval_seed"] = opts.eval_seed;
  j["max_steps"] = opts.max_steps;
  j["oracle"] = opts.oracle;
  j["n_scenes"] = eval.n_scenes;
  if (eval.n_scenes > 0) {
    j["successes"] = eval.successes;
    j["success_rate"] = eval.success_rate();
    j["mean_steps"] = eval.mean_steps;
    j["mean_final_distance"] = eval.mean_final_distance;
  } else {
    j["successes"] = nullptr;
    j["success_rate"] = nullptr;
    j["mean_steps"] = nullptr;
    j["mean_final_distance"] = nullptr;
  }
  if (masks) {
    j["mask_bce"] = masks->bce;
    j["mask_iou"] = masks->iou;
  } else {
    j["mask_bce"] = nullptr;
    j["mask_iou"] = nullptr;
  }
  return j.dump(2) + "\n";
}

// ------------------------------------------------------------------ ablation

namespace {

struct GridEntry {
  const char* label;
  Integration variant;
  PoolingMode pooling;
  Schedule schedule;
};

const GridEntry kGrid[] = {
    {"a_baseline", Integration::a_baseline, PoolingMode::st, Schedule::one_stage_pred},
    {"b_external", Integration::b_external, PoolingMode::hard, Schedule::one_stage_pred},
    {"c_internal_noaction", Integration::c_internal_noaction, PoolingMode::st,
     Schedule::two_stage},
    {"d_full_hard", Integration::d_full_hard, PoolingMode::hard, Schedule::two_stage},
    {"e_full_st", Integration::e_full_st, PoolingMode::st, Schedule::two_stage},
    {"e_full_st+soft", Integration::e_full_st, PoolingMode::soft, Schedule::two_stage},
    {"e_full_st+one_stage_pred", Integration::e_full_st, PoolingMode::st,
     Schedule::one_stage_pred},
    {"e_full_st+one_stage_gt", Integration::e_full_st, PoolingMode::st, Schedule::one_stage_gt},
};

std::string csv_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<AblateRow> run_ablation(const AblateOpts& opts) {
  if (opts.out_dir.empty()) fail(ErrorKind::usage, "ablate: missing output directory");
  if (opts.seeds < 1) fail(ErrorKind::out_of_range, "ablate: need at least one seed");
  fs::create_directories(fs::path(opts.out_dir) / "runs");

  Config base = opts.base;
  if (opts.warmup_steps >= 0) base.warmup_steps = opts.warmup_steps;
  if (opts.joint_steps >= 0) base.joint_steps = opts.joint_steps;

  std::vector<AblateRow> rows;
  for (int s = 0; s < opts.seeds; ++s) {
    const std::uint64_t seed = opts.seed0 + std::uint64_t(s);
    GenDataOpts gd = opts.data;
    gd.out_dir = (fs::path(opts.out_dir) / ("data-s" + std::to_string(seed))).string();
    gd.suite = opts.suite;
    gd.seed = seed;
    gd.n_views = base.n_views;
    gd.chunk_len = base.chunk_len;
    generate_dataset(gd);
    Dataset train = load_split(gd.out_dir, "train");
    Dataset val = load_split(gd.out_dir, "val");

    // stage 1 shared by every two-stage run of this seed
    Config warm_cfg = base;
    warm_cfg.variant = Integration::e_full_st;
    warm_cfg.pooling = PoolingMode::st;
    warm_cfg.schedule = Schedule::two_stage;
    warm_cfg.seed = seed;
    Model warm = build_model(warm_cfg);
    TrainReport warm_rep = warmup_stage(warm, train, StageOpts{base.warmup_steps});
    const Checkpoint warm_ckpt = model_checkpoint(warm, "warmup", warm_rep.steps);

    Checkpoint donor_ckpt;  // lazily trained for b_external
    bool have_donor = false;

    for (const GridEntry& ge : kGrid) {
      Config cfg = base;
      cfg.variant = ge.variant;
      cfg.pooling = ge.pooling;
      cfg.schedule = ge.schedule;
      cfg.seed = seed;
      check_variant_flags(cfg);

      Model model = build_model(cfg);
      if (model.shape.external) {
        if (!have_donor) {
          donor_ckpt = train_donor(cfg, train);
          have_donor = true;
        }
        load_external(model, donor_ckpt);
      }
      bool warmed = false;
      if (cfg.schedule == Schedule::two_stage) {
        model.params.load(warm_ckpt);
        warmed = true;
      }
      TrainReport joint = joint_stage(model, train, StageOpts{base.joint_steps}, warmed);
      (void)joint;
      save_checkpoint((fs::path(opts.out_dir) / "runs" /
                       (std::string(ge.label) + "-s" + std::to_string(seed) + ".afvla"))
                          .string(),
                      model_checkpoint(model, "joint", base.joint_steps));

      AblateRow row;
      row.name = ge.label;
      row.variant = ge.variant;
      row.pooling = ge.pooling;
      row.schedule = ge.schedule;
      row.seed = seed;
      EvalOpts ev;
      ev.suite = opts.suite;
      ev.n_scenes = opts.n_scenes;
      ev.eval_seed = derive_seed(seed, "ablate-eval", 0);
      row.eval = evaluate_policy(model, ev);
      if (model.shape.affhead) row.masks = eval_masks(model, val, base.batch_size);
      rows.push_back(std::move(row));
    }
  }

  write_text_file((fs::path(opts.out_dir) / "ablate.csv").string(), ablation_csv(rows));
  write_text_file((fs::path(opts.out_dir) / "ablate.json").string(), ablation_json(rows));
  return rows;
}

std::string ablation_csv(const std::vector<AblateRow>& rows) {
  std::string out =
      "name,variant,pooling,schedule,seed,n_scenes,successes,success_rate,"
      "mean_steps,mean_final_distance,mask_bce,mask_iou\n";
  for (const AblateRow& r : rows) {
    out += r.name;
    out += ',';
    out += to_string(r.variant);
    out += ',';
    out += to_string(r.pooling);
    out += ',';
    out += to_string(r.schedule);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += std::to_string(r.eval.n_scenes);
    out += ',';
    out += std::to_string(r.eval.successes);
    out += ',';
    out += csv_num(r.eval.success_rate());
    out += ',';
    out += csv_num(r.eval.mean_steps);
    out += ',';
    out += csv_num(r.eval.mean_final_distance);
    out += ',';
    out += r.masks ? csv_num(r.masks->bce) : std::string();
    out += ',';
    out += r.masks ? csv_num(r.masks->iou) : std::string();
    out += '\n';
  }
  return out;
}

std::string ablation_json(const std::vector<AblateRow>& rows) {
  json arr = json::array();
  std::map<std::string, std::pair<double, int>> agg;
  for (const AblateRow& r : rows) {
    json j;
    j["name"] = r.name;
    j["variant"] = to_string(r.variant);
    j["pooling"] = to_string(r.pooling);
    j["schedule"] = to_string(r.schedule);
    j["seed"] = r.seed;
    j["n_scenes"] = r.eval.n_scenes;
    j["successes"] = r.eval.successes;
    j["success_rate"] = r.eval.success_rate();
    j["mean_steps"] = r.eval.mean_steps;
    j["mean_final_distance"] = r.eval.mean_final_distance;
    if (r.masks) {
      j["mask_bce"] = r.masks->bce;
      j["mask_iou"] = r.masks->iou;
    } else {
      j["mask_bce"] = nullptr;
      j["mask_iou"] = nullptr;
    }
    arr.push_back(std::move(j));
    auto& [sum, n] = agg[r.name];
    sum += r.eval.success_rate();
    n += 1;
  }
  json summary;
  for (const auto& [name, sn] : agg)
    summary[name] = {{"mean_success_rate", sn.first / sn.second}, {"seeds", sn.second}};
  json top;
  top["rows"] = std::move(arr);
  top["summary"] = std::move(summary);
  return top.dump(2) + "\n";
}

// ---------------------------------------------------------------- mask dumps

std::vector<std::string> dump_masks(const Model& model, const EpisodeStep& step,
                                    const std::string& out_dir) {
  CondOut c = compute_condition(model, step);
  if (c.logits.size() == 0)
    fail(ErrorKind::incompatible_flags,
         std::string("variant ") + to_string(model.cfg.variant) + " produces no masks");
  fs::create_directories(out_dir);
  std::vector<std::string> paths;
  for (Eigen::Index v = 0; v < c.logits.rows(); ++v) {
    Matf grid(model.cfg.grid_h, model.cfg.grid_w);
    for (int r = 0; r < model.cfg.grid_h; ++r)
      for (int col = 0; col < model.cfg.grid_w; ++col) {
        const float g = c.logits(v, r * model.cfg.grid_w + col);
        grid(r, col) = 1.0f / (1.0f + std::exp(-g));
      }
    std::string path = (fs::path(out_dir) / ("mask_v" + std::to_string(v) + ".pgm")).string();
    write_pgm(path, grid);
    paths.push_back(std::move(path));
  }
  return paths;
}

}  // namespace afvla
