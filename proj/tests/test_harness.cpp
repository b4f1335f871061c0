#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "afvla/harness.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

using namespace afvla;
namespace fs = std::filesystem;

namespace {

Config fast_config(Integration variant) {
  Config cfg;
  cfg.variant = variant;
  cfg.pooling = default_pooling(variant);
  cfg.schedule = default_schedule(variant);
  cfg.c_llm = 32;
  cfg.k_aff = 2;
  cfg.topk = 8;
  cfg.chunk_len = 4;
  cfg.backbone_depth = 1;
  cfg.backbone_heads = 2;
  cfg.decoder_dim = 32;
  cfg.decoder_layers = 1;
  cfg.decoder_heads = 2;
  cfg.action_dmodel = 32;
  cfg.action_blocks = 1;
  cfg.action_heads = 2;
  cfg.batch_size = 4;
  cfg.warmup_steps = 4;
  cfg.joint_steps = 4;
  return cfg;
}

// Fresh scratch directory per test run; doctest cases run in one process.
fs::path scratch(const std::string& leaf) {
  fs::path dir = fs::temp_directory_path() / "afvla-harness-test" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

GenDataOpts tiny_gen(const fs::path& out, std::uint64_t seed) {
  GenDataOpts gd;
  gd.out_dir = out.string();
  gd.suite = Suite::easy;
  gd.seed = seed;
  gd.n_train = 12;
  gd.n_val = 4;
  gd.n_views = 1;
  gd.chunk_len = 4;
  return gd;
}

struct EnvVarGuard {
  explicit EnvVarGuard(const char* value) {
    if (value)
      setenv("AFVLA_THREADS", value, 1);
    else
      unsetenv("AFVLA_THREADS");
  }
  ~EnvVarGuard() { unsetenv("AFVLA_THREADS"); }
};

}  // namespace

TEST_CASE("env_threads reads and validates AFVLA_THREADS") {
  {
    EnvVarGuard g("3");
    CHECK(env_threads() == 3);
  }
  {
    EnvVarGuard g(nullptr);
    CHECK(env_threads() >= 1);
  }
  for (const char* bad : {"0", "-2", "abc", "4x", ""}) {
    EnvVarGuard g(bad);
    CHECK_THROWS_AS(env_threads(), Error);
    try {
      env_threads();
    } catch (const Error& e) {
      CHECK(e.kind == ErrorKind::out_of_range);
    }
  }
}

TEST_CASE("generate_dataset: layout, manifest, and byte-identical regeneration") {
  fs::path a = scratch("gen-a"), b = scratch("gen-b");
  generate_dataset(tiny_gen(a, 5));
  generate_dataset(tiny_gen(b, 5));

  CHECK(fs::exists(a / "manifest.json"));
  CHECK(fs::exists(a / "episodes" / "train" / "000000.json"));
  CHECK(fs::exists(a / "episodes" / "train" / "000011.json"));
  CHECK(fs::exists(a / "episodes" / "val" / "000003.json"));
  CHECK_FALSE(fs::exists(a / "episodes" / "train" / "000012.json"));

  for (const char* rel : {"manifest.json", "episodes/train/000000.json",
                          "episodes/train/000007.json", "episodes/val/000002.json"})
    CHECK(read_text_file((a / rel).string()) == read_text_file((b / rel).string()));

  // a different seed produces different episodes
  fs::path c = scratch("gen-c");
  generate_dataset(tiny_gen(c, 6));
  CHECK(read_text_file((a / "episodes/train/000000.json").string()) !=
        read_text_file((c / "episodes/train/000000.json").string()));

  GenDataOpts bad = tiny_gen(scratch("gen-bad"), 5);
  bad.n_train = 0;
  CHECK_THROWS_AS(generate_dataset(bad), Error);
  bad = tiny_gen(scratch("gen-bad"), 5);
  bad.out_dir.clear();
  CHECK_THROWS_AS(generate_dataset(bad), Error);
}

TEST_CASE("load_split round trip matches generation and fits bounds") {
  fs::path dir = scratch("load");
  GenDataOpts gd = tiny_gen(dir, 9);
  generate_dataset(gd);

  Dataset train = load_split(dir.string(), "train");
  Dataset val = load_split(dir.string(), "val");
  CHECK(int(train.steps.size()) == gd.n_train);
  CHECK(int(val.steps.size()) == gd.n_val);
  CHECK(int(train.action_min.size()) == int(train.steps[0].gt_actions.actions.cols()));
  for (size_t j = 0; j < train.action_min.size(); ++j)
    CHECK(train.action_min[j] < train.action_max[j]);

  // order is by filename: regenerate episode 3 directly and compare
  Scene scene = gen_scene(derive_seed(9, "scene-train", 3), gd.suite);
  Rng r = Rng::stream(9, "state/train/3");
  SimState sim;
  sim.x = r.uniform(0.05, 0.95);
  sim.y = r.uniform(0.05, 0.95);
  sim.gripper = r.uniform() < 0.5 ? 1.0 : 0.0;
  EpisodeStep want = make_step(scene, sim, gd.n_views, gd.chunk_len);
  CHECK(train.steps[3].instruction == want.instruction);
  CHECK(train.steps[3].views[0].data.isApprox(want.views[0].data));
  CHECK(train.steps[3].gt_actions.actions.isApprox(want.gt_actions.actions));

  CHECK_THROWS_AS(load_split(dir.string(), "test"), Error);
  CHECK_THROWS_AS(load_split("/nonexistent/nowhere", "train"), Error);
}

TEST_CASE("run_training writes the run manifest before any training work") {
  fs::path run = scratch("run-manifest");
  TrainOpts to;
  to.cfg = fast_config(Integration::e_full_st);
  to.data_dir = "/nonexistent/data";  // load_split will fail after run.json
  to.run_dir = run.string();
  to.cmdline = "afvla train --make-it-so";
  CHECK_THROWS_AS(run_training(to), Error);
  CHECK(fs::exists(run / "run.json"));
  CHECK_FALSE(fs::exists(run / "train.json"));
  const std::string text = read_text_file((run / "run.json").string());
  CHECK(text.find("--make-it-so") != std::string::npos);
  CHECK(text.find("config_hash") != std::string::npos);
}

TEST_CASE("run_training: checkpoint, train.json, and warmup reuse") {
  fs::path dir = scratch("train");
  generate_dataset(tiny_gen(dir / "data", 11));

  TrainOpts to;
  to.cfg = fast_config(Integration::e_full_st);
  to.cfg.seed = 11;
  to.data_dir = (dir / "data").string();
  to.run_dir = (dir / "run1").string();
  TrainOutcome out = run_training(to);
  CHECK(fs::exists(out.checkpoint_path));
  CHECK(fs::exists(dir / "run1" / "train.json"));
  CHECK(out.warmup.steps == to.cfg.warmup_steps);
  CHECK(out.joint.steps == to.cfg.joint_steps);
  CHECK(out.val_masks.has_value());

  Checkpoint ck = load_checkpoint(out.checkpoint_path, nullptr);
  CHECK(ck.meta.stage == "joint");
  CHECK(ck.meta.step == to.cfg.joint_steps);

  // reuse: a run resumed from a warmup checkpoint skips stage 1
  fs::path warm_dir = scratch("train-warm");
  TrainOpts warm = to;
  warm.cfg.joint_steps = 0;
  warm.run_dir = (warm_dir / "stage1").string();
  TrainOutcome wout = run_training(warm);
  Checkpoint wck = load_checkpoint(wout.checkpoint_path, nullptr);
  CHECK(wck.meta.stage == "warmup");

  TrainOpts resumed = to;
  resumed.run_dir = (warm_dir / "stage2").string();
  resumed.warmup_from = wout.checkpoint_path;
  TrainOutcome rout = run_training(resumed);
  CHECK(rout.warmup.steps == 0);  // no fresh warmup ran
  CHECK(rout.joint.steps == to.cfg.joint_steps);

  // structural mismatch in the donated warmup is rejected by name
  TrainOpts clash = resumed;
  clash.cfg.k_aff = 4;
  clash.run_dir = (warm_dir / "clash").string();
  try {
    run_training(clash);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind == ErrorKind::schema_mismatch);
    CHECK(std::string(e.what()).find("k_aff") != std::string::npos);
  }
}

TEST_CASE("oracle evaluation solves every scene within the step budget") {
  Config cfg = fast_config(Integration::a_baseline);
  Model model = build_model(cfg);
  EvalOpts ev;
  ev.suite = Suite::distractor;
  ev.n_scenes = 20;
  ev.eval_seed = 77;
  ev.oracle = true;
  EvalOutcome out = evaluate_policy(model, ev);
  CHECK(out.n_scenes == 20);
  CHECK(out.successes == 20);
  CHECK(out.mean_final_distance < kSuccessRadius);
  CHECK(out.mean_steps <= kMaxEnvSteps);
}

TEST_CASE("evaluate_policy is thread-count independent") {
  Config cfg = fast_config(Integration::e_full_st);
  cfg.seed = 21;
  Model model = build_model(cfg);
  model.params.init_all(21);
  model.action_min = {-0.08, -0.08, 0.0};
  model.action_max = {0.08, 0.08, 1.0};

  EvalOpts ev;
  ev.suite = Suite::easy;
  ev.n_scenes = 12;
  ev.eval_seed = 31;
  ev.threads = 1;
  EvalOutcome serial = evaluate_policy(model, ev);
  ev.threads = 4;
  EvalOutcome parallel = evaluate_policy(model, ev);
  CHECK(serial.successes == parallel.successes);
  CHECK(serial.mean_steps == parallel.mean_steps);
  CHECK(serial.mean_final_distance == parallel.mean_final_distance);
}

TEST_CASE("metrics_json: deterministic bytes and null policy") {
  Config cfg = fast_config(Integration::e_full_st);
  EvalOpts ev;
  ev.suite = Suite::distractor;
  ev.n_scenes = 0;
  EvalOutcome empty;
  const std::string a = metrics_json(cfg, ev, empty, std::nullopt);
  const std::string b = metrics_json(cfg, ev, empty, std::nullopt);
  CHECK(a == b);
  CHECK(a.back() == '\n');
  CHECK(a.find("\"success_rate\": null") != std::string::npos);
  CHECK(a.find("\"mask_iou\": null") != std::string::npos);

  EvalOutcome five;
  five.n_scenes = 5;
  five.successes = 3;
  five.mean_steps = 7.5;
  five.mean_final_distance = 0.25;
  MaskEval masks{0.125, 0.5};
  ev.n_scenes = 5;
  const std::string full = metrics_json(cfg, ev, five, masks);
  CHECK(full.find("\"success_rate\": 0.6") != std::string::npos);
  CHECK(full.find("\"mask_bce\": 0.125") != std::string::npos);
  CHECK(full.find("null") == std::string::npos);
}

TEST_CASE("dump_masks writes PGMs that match the predicted mask bytes") {
  Config cfg = fast_config(Integration::e_full_st);
  Model model = build_model(cfg);
  model.params.init_all(33);
  {  // the mask readout starts at zero; perturb it so the dump has structure
    Rng r = Rng::stream(33, fnv1a("affhead.out.w"));
    r.fill_normal(model.params.value("affhead.out.w"), 0.2);
  }
  Scene scene = gen_scene(101, Suite::easy);
  SimState sim{scene.ee_start_x, scene.ee_start_y, 0.0, 0};
  EpisodeStep step = make_step(scene, sim, 1, cfg.chunk_len);

  fs::path out = scratch("masks");
  std::vector<std::string> paths = dump_masks(model, step, out.string());
  REQUIRE(paths.size() == 1);

  const std::string pgm = read_text_file(paths[0]);
  char header[64];
  std::snprintf(header, sizeof header, "P5\n%d %d\n255\n", cfg.grid_w, cfg.grid_h);
  REQUIRE(pgm.rfind(header, 0) == 0);
  REQUIRE(int(pgm.size()) == int(std::string(header).size()) + cfg.grid_w * cfg.grid_h);

  CondOut cond = compute_condition(model, step);
  const char* px = pgm.data() + std::string(header).size();
  int distinct = 0;
  unsigned char last = 0;
  for (int r = 0; r < cfg.grid_h; ++r)
    for (int c = 0; c < cfg.grid_w; ++c) {
      const float sig = 1.0f / (1.0f + std::exp(-cond.logits(0, r * cfg.grid_w + c)));
      const auto want = (unsigned char)std::lround(255.0 * sig);
      const auto got = (unsigned char)px[r * cfg.grid_w + c];
      CHECK(got == want);
      if (r + c == 0 || got != last) ++distinct;
      last = got;
    }
  CHECK(distinct > 1);  // a random-weight head is not flat

  // variants without a mask source refuse to dump
  Model plain = build_model(fast_config(Integration::a_baseline));
  CHECK_THROWS_AS(dump_masks(plain, step, out.string()), Error);
}

TEST_CASE("ablation tables: csv shape and json per-name means") {
  AblateRow r1;
  r1.name = "e_full_st";
  r1.variant = Integration::e_full_st;
  r1.pooling = PoolingMode::st;
  r1.schedule = Schedule::two_stage;
  r1.seed = 0;
  r1.eval.n_scenes = 4;
  r1.eval.successes = 3;
  r1.eval.mean_steps = 9.0;
  r1.eval.mean_final_distance = 0.125;
  r1.masks = MaskEval{0.25, 0.75};
  AblateRow r2 = r1;
  r2.seed = 1;
  r2.eval.successes = 1;
  r2.masks.reset();
  AblateRow r3 = r1;
  r3.name = "a_baseline";
  r3.variant = Integration::a_baseline;
  r3.eval.successes = 0;
  r3.masks.reset();

  const std::string csv = ablation_csv({r1, r2, r3});
  const std::string header = csv.substr(0, csv.find('\n'));
  CHECK(header ==
        "name,variant,pooling,schedule,seed,n_scenes,successes,success_rate,"
        "mean_steps,mean_final_distance,mask_bce,mask_iou");
  CHECK(csv.find("e_full_st,e,st,two_stage,0,4,3,0.750000,9.000000,0.125000,0.250000,0.750000\n") !=
        std::string::npos);
  CHECK(csv.find("e_full_st,e,st,two_stage,1,4,1,0.250000,9.000000,0.125000,,\n") !=
        std::string::npos);

  const std::string js = ablation_json({r1, r2, r3});
  CHECK(js == ablation_json({r1, r2, r3}));
  CHECK(js.find("\"mean_success_rate\": 0.5") != std::string::npos);  // (0.75 + 0.25) / 2
  CHECK(js.find("\"a_baseline\"") != std::string::npos);
  CHECK(js.find("\"mask_iou\": null") != std::string::npos);
}
