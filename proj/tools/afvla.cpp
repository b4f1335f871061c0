// Command-line front end: gen-data, train, eval, ablate, dump-masks,
// grad-check. Exit codes: 0 success, 1 domain error, 2 usage error.

#include "CLI11.hpp"

#include "afvla/harness.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

using namespace afvla;
namespace fs = std::filesystem;

namespace {

struct ConfigCli {
  std::string config_file;
  std::vector<std::string> sets;
  std::string variant, pooling, schedule;
  std::uint64_t seed = std::uint64_t(-1);
  int n_views = -1;
  int warmup_steps = -1, joint_steps = -1;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "config file with key = value lines");
    app->add_option("--set", sets, "override a config key, KEY=VALUE (repeatable)");
    app->add_option("--variant", variant, "integration variant (a_baseline..e_full_st)");
    app->add_option("--pooling", pooling, "pooling mode (hard|soft|st)");
    app->add_option("--schedule", schedule, "training schedule");
    app->add_option("--seed", seed, "training seed");
    app->add_option("--views", n_views, "camera views (1 or 2)");
    app->add_option("--warmup-steps", warmup_steps, "stage-1 budget");
    app->add_option("--joint-steps", joint_steps, "stage-2 budget");
  }

  Config resolve() const {
    std::map<std::string, std::string> kv;
    if (!config_file.empty()) kv = parse_kv_text(read_text_file(config_file));
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0)
        fail(ErrorKind::usage, "--set expects KEY=VALUE, got: " + s);
      kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (!variant.empty()) kv["variant"] = variant;
    const bool pooling_given = !pooling.empty() || kv.count("pooling");
    const bool schedule_given = !schedule.empty() || kv.count("schedule");
    if (!pooling.empty()) kv["pooling"] = pooling;
    if (!schedule.empty()) kv["schedule"] = schedule;
    if (seed != std::uint64_t(-1)) kv["seed"] = std::to_string(seed);
    if (n_views >= 0) kv["n_views"] = std::to_string(n_views);
    if (warmup_steps >= 0) kv["warmup_steps"] = std::to_string(warmup_steps);
    if (joint_steps >= 0) kv["joint_steps"] = std::to_string(joint_steps);

    Config cfg = validate_config(kv);
    // a variant chosen without explicit pooling/schedule takes its defaults
    if (!pooling_given) cfg.pooling = default_pooling(cfg.variant);
    if (!schedule_given) cfg.schedule = default_schedule(cfg.variant);
    check_variant_flags(cfg);
    return cfg;
  }
};

std::string join_args(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

int cmd_gen_data(const GenDataOpts& opts, const std::string& suite) {
  GenDataOpts g = opts;
  g.suite = suite_from(suite);
  generate_dataset(g);
  std::fprintf(stderr, "wrote %d train / %d val episodes under %s\n", g.n_train, g.n_val,
               g.out_dir.c_str());
  return 0;
}

int cmd_train(const ConfigCli& cc, TrainOpts opts) {
  opts.cfg = cc.resolve();
  TrainOutcome out = run_training(opts);
  std::fprintf(stderr, "checkpoint: %s\n", out.checkpoint_path.c_str());
  if (out.warmup.steps)
    std::fprintf(stderr, "warmup: %d steps, final loss %.4f\n", out.warmup.steps,
                 out.warmup.final_loss);
  if (out.joint.steps)
    std::fprintf(stderr, "joint: %d steps, final loss %.4f\n", out.joint.steps,
                 out.joint.final_loss);
  if (out.val_masks)
    std::fprintf(stderr, "val masks: bce %.4f iou %.3f\n", out.val_masks->bce,
                 out.val_masks->iou);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const ConfigCli& cc, EvalOpts ev,
             const std::string& suite, const std::string& data_dir, const std::string& split,
             const std::string& out_path) {
  ev.suite = suite_from(suite);
  Model model = ckpt_path.empty() ? build_model(cc.resolve())
                                  : model_from_checkpoint(load_checkpoint(ckpt_path, nullptr));
  if (ckpt_path.empty() && !ev.oracle)
    fail(ErrorKind::usage, "eval: --checkpoint is required unless --oracle is given");
  EvalOutcome out = evaluate_policy(model, ev);
  std::optional<MaskEval> masks;
  if (!data_dir.empty() && model.shape.affhead)
    masks = eval_masks(model, load_split(data_dir, split), model.cfg.batch_size);
  const std::string doc = metrics_json(model.cfg, ev, out, masks);
  if (out_path.empty()) {
    std::fputs(doc.c_str(), stdout);
  } else {
    write_text_file(out_path, doc);
    std::fprintf(stderr, "metrics: %s\n", out_path.c_str());
  }
  if (out.n_scenes > 0)
    std::fprintf(stderr, "success %d/%d (%.1f%%)\n", out.successes, out.n_scenes,
                 100.0 * out.success_rate());
  return 0;
}

int cmd_ablate(const ConfigCli& cc, AblateOpts opts, const std::string& suite) {
  opts.suite = suite_from(suite);
  opts.base = cc.resolve();
  std::vector<AblateRow> rows = run_ablation(opts);
  std::fprintf(stderr, "ablation grid: %zu runs -> %s\n", rows.size(), opts.out_dir.c_str());
  return 0;
}

int cmd_dump_masks(const std::string& ckpt_path, const std::string& episode_path,
                   std::uint64_t scene_seed, const std::string& suite,
                   const std::string& out_dir) {
  Model model = model_from_checkpoint(load_checkpoint(ckpt_path, nullptr));
  EpisodeStep step;
  if (!episode_path.empty()) {
    step = load_episode(episode_path);
  } else {
    Scene scene = gen_scene(scene_seed, suite_from(suite));
    step = make_step(scene, initial_state(scene), model.cfg.n_views, model.cfg.chunk_len);
  }
  for (const std::string& p : dump_masks(model, step, out_dir))
    std::fprintf(stderr, "wrote %s\n", p.c_str());
  return 0;
}

int cmd_grad_check(const std::string& target, int seeds, std::uint64_t seed0) {
  const std::vector<std::string> all = {"affhead",      "actionhead", "project",
                                        "pooling.soft", "pooling.st", "end2end"};
  std::vector<std::string> targets;
  if (target == "all")
    targets = all;
  else
    targets.push_back(target);
  bool ok = true;
  for (const std::string& t : targets) {
    GradCheckReport rep = run_grad_check(t, seeds, seed0);
    std::printf("%-14s seeds=%-3d checked=%-8d max_rel_err=%.3e  %s\n", rep.target.c_str(),
                rep.seeds, rep.checked, rep.max_rel_err, rep.pass ? "ok" : "FAIL");
    ok = ok && rep.pass;
  }
  if (!ok) fail(ErrorKind::divergence, "gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"affordance-conditioned flow policy on a synthetic tabletop"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate an episode dataset");
  GenDataOpts gd;
  std::string gd_suite = "easy";
  gen->add_option("--out", gd.out_dir, "dataset directory")->required();
  gen->add_option("--suite", gd_suite, "easy|distractor|multiview");
  gen->add_option("--seed", gd.seed, "dataset seed");
  gen->add_option("--train", gd.n_train, "train episode count");
  gen->add_option("--val", gd.n_val, "val episode count");
  gen->add_option("--views", gd.n_views, "camera views per step");
  gen->add_option("--chunk", gd.chunk_len, "action chunk length");

  // train
  auto* train = app.add_subcommand("train", "train a policy and write a checkpoint");
  ConfigCli train_cc;
  TrainOpts to;
  train->add_option("--data", to.data_dir, "dataset directory")->required();
  train->add_option("--run", to.run_dir, "run directory for outputs")->required();
  train->add_option("--warmup-from", to.warmup_from, "stage-1 checkpoint to reuse");
  train->add_option("--external-from", to.external_from, "frozen donor checkpoint");
  train_cc.attach(train);

  // eval
  auto* ev = app.add_subcommand("eval", "roll out a policy on fresh scenes");
  ConfigCli eval_cc;
  EvalOpts eo;
  std::string ev_ckpt, ev_suite = "easy", ev_data, ev_split = "val", ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint");
  ev->add_option("--suite", ev_suite, "scene suite");
  ev->add_option("--scenes", eo.n_scenes, "number of evaluation scenes");
  ev->add_option("--eval-seed", eo.eval_seed, "scene / sampler seed");
  ev->add_option("--max-steps", eo.max_steps, "environment step limit");
  ev->add_option("--threads", eo.threads, "worker threads (default AFVLA_THREADS)");
  ev->add_flag("--oracle", eo.oracle, "evaluate the scripted controller instead");
  ev->add_option("--data", ev_data, "dataset directory for mask metrics");
  ev->add_option("--split", ev_split, "dataset split for mask metrics");
  ev->add_option("--out", ev_out, "metrics.json path (default: stdout)");
  eval_cc.attach(ev);

  // ablate
  auto* ab = app.add_subcommand("ablate", "train + evaluate the comparison grid");
  ConfigCli ab_cc;
  AblateOpts ao;
  std::string ab_suite = "distractor";
  ab->add_option("--out", ao.out_dir, "output directory")->required();
  ab->add_option("--suite", ab_suite, "scene suite");
  ab->add_option("--seeds", ao.seeds, "number of seeds");
  ab->add_option("--seed0", ao.seed0, "first seed");
  ab->add_option("--scenes", ao.n_scenes, "evaluation scenes per run");
  ab->add_option("--train", ao.data.n_train, "train episodes per seed");
  ab->add_option("--val", ao.data.n_val, "val episodes per seed");
  ab_cc.attach(ab);

  // dump-masks
  auto* dm = app.add_subcommand("dump-masks", "write predicted masks as PGM images");
  std::string dm_ckpt, dm_episode, dm_suite = "easy", dm_out;
  std::uint64_t dm_scene_seed = 0;
  dm->add_option("--checkpoint", dm_ckpt, "trained checkpoint")->required();
  dm->add_option("--episode", dm_episode, "episode JSON to visualize");
  dm->add_option("--scene-seed", dm_scene_seed, "generate this scene instead");
  dm->add_option("--suite", dm_suite, "suite for --scene-seed");
  dm->add_option("--out", dm_out, "output directory")->required();

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient audit");
  std::string gc_target = "all";
  int gc_seeds = 5;
  std::uint64_t gc_seed0 = 7;
  gc->add_option("--target", gc_target,
                 "affhead|actionhead|project|pooling.soft|pooling.st|end2end|all");
  gc->add_option("--seeds", gc_seeds, "random draws per target");
  gc->add_option("--seed0", gc_seed0, "base seed");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gd, gd_suite);
    if (train->parsed()) {
      to.cmdline = join_args(argc, argv);
      return cmd_train(train_cc, to);
    }
    if (ev->parsed()) return cmd_eval(ev_ckpt, eval_cc, eo, ev_suite, ev_data, ev_split, ev_out);
    if (ab->parsed()) return cmd_ablate(ab_cc, ao, ab_suite);
    if (dm->parsed()) return cmd_dump_masks(dm_ckpt, dm_episode, dm_scene_seed, dm_suite, dm_out);
    if (gc->parsed()) return cmd_grad_check(gc_target, gc_seeds, gc_seed0);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const Error& e) {
    if (e.kind == ErrorKind::usage) {
      std::fprintf(stderr, "usage error: %s\n", e.what());
      return 2;
    }
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
