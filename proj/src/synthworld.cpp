#include "afvla/synthworld.hpp"

#include <algorithm>
#include <cmath>

namespace afvla {

namespace {

constexpr int kPlacementAttempts = 100;
constexpr double kHalfMin = 0.06, kHalfMax = 0.11;

double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

double cell_center(int idx) { return (idx + 0.5) / kWorldGrid; }

}  // namespace

const std::vector<std::string>& vocab() {
  static const std::vector<std::string> words = {
      "<pad>", "touch", "push", "reach", "red",  "green",  "blue", "square",
      "circle", "the",   "a",    "go",    "to",   "find",   "now",  "please"};
  return words;
}

std::vector<int> Scene::instruction() const {
  const SceneObject& t = target();
  return {verb, 4 + int(t.color), 7 + int(t.shape)};
}

bool point_in_footprint(const SceneObject& o, double x, double y) {
  if (o.shape == Shape::square)
    return std::abs(x - o.cx) <= o.half && std::abs(y - o.cy) <= o.half;
  const double dx = x - o.cx, dy = y - o.cy;
  return dx * dx + dy * dy <= o.half * o.half;
}

bool footprints_overlap(const SceneObject& a, const SceneObject& b) {
  if (a.shape == Shape::square && b.shape == Shape::square)
    return std::abs(a.cx - b.cx) < a.half + b.half && std::abs(a.cy - b.cy) < a.half + b.half;
  if (a.shape == Shape::circle && b.shape == Shape::circle) {
    const double dx = a.cx - b.cx, dy = a.cy - b.cy;
    const double r = a.half + b.half;
    return dx * dx + dy * dy < r * r;
  }
  const SceneObject& sq = a.shape == Shape::square ? a : b;
  const SceneObject& ci = a.shape == Shape::square ? b : a;
  const double dx = std::max(0.0, std::abs(ci.cx - sq.cx) - sq.half);
  const double dy = std::max(0.0, std::abs(ci.cy - sq.cy) - sq.half);
  return dx * dx + dy * dy < ci.half * ci.half;
}

Scene gen_scene(std::uint64_t seed, Suite difficulty) {
  Rng rng = Rng::stream(seed, std::string("scene/") + to_string(difficulty));
  Scene scene;
  scene.seed = seed;
  scene.difficulty = difficulty;
  scene.target_index = 0;

  const Color tcolor = Color(rng.uniform_index(3));
  const Shape tshape = Shape(rng.uniform_index(2));
  scene.verb = 1 + int(rng.uniform_index(3));

  const int n_distractors = difficulty == Suite::easy ? 1 : 3;
  for (int obj = 0; obj < 1 + n_distractors; ++obj) {
    SceneObject o;
    o.is_target = obj == 0;
    if (o.is_target) {
      o.color = tcolor;
      o.shape = tshape;
    } else {
      // Share exactly one of (color, shape) with the target. The first two
      // distractors of a 3-distractor scene cover both cases; the rest and
      // the easy suite's single distractor pick at random.
      const int j = obj - 1;
      bool share_color;
      if (n_distractors == 3 && j == 0) share_color = true;
      else if (n_distractors == 3 && j == 1) share_color = false;
      else share_color = rng.uniform() < 0.5;
      if (share_color) {
        o.color = tcolor;
        o.shape = tshape == Shape::square ? Shape::circle : Shape::square;
      } else {
        o.shape = tshape;
        const int other = int(rng.uniform_index(2));  // two remaining colors
        int c = 0, picked = -1;
        for (int cand = 0; cand < 3; ++cand)
          if (Color(cand) != tcolor && c++ == other) picked = cand;
        o.color = Color(picked);
      }
    }
    o.half = rng.uniform(kHalfMin, kHalfMax);
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      o.cx = rng.uniform(o.half, 1.0 - o.half);
      o.cy = rng.uniform(o.half, 1.0 - o.half);
      placed = true;
      for (const SceneObject& prev : scene.objects)
        if (footprints_overlap(prev, o)) {
          placed = false;
          break;
        }
    }
    if (!placed)
      fail(ErrorKind::placement_failure,
           "object " + std::to_string(obj) + " of scene seed " + std::to_string(seed) +
               " could not be placed in 100 attempts");
    scene.objects.push_back(o);
  }

  scene.ee_start_x = rng.uniform(0.1, 0.9);
  scene.ee_start_y = rng.uniform(0.1, 0.9);
  return scene;
}

SimState initial_state(const Scene& scene) {
  SimState s;
  s.x = scene.ee_start_x;
  s.y = scene.ee_start_y;
  s.gripper = 0.0;
  s.step_count = 0;
  return s;
}

std::pair<int, int> wrist_window_origin(const SimState& sim) {
  const int cr = int(std::lround(sim.y * kWorldGrid));
  const int cc = int(std::lround(sim.x * kWorldGrid));
  const int r0 = std::clamp(cr - kWristCells / 2, 0, kWorldGrid - kWristCells);
  const int c0 = std::clamp(cc - kWristCells / 2, 0, kWorldGrid - kWristCells);
  return {r0, c0};
}

VisualPatchFeatures render_features(const Scene& scene, const SimState& sim, int view_index) {
  if (view_index < 0 || view_index > 1)
    fail(ErrorKind::view_out_of_range, "view " + std::to_string(view_index));
  VisualPatchFeatures out;
  out.grid_h = out.grid_w = kWorldGrid;
  out.view_index = view_index;
  out.data.setZero(kWorldGrid * kWorldGrid, kWorldCvis);

  Rng noise = Rng::stream(scene.seed, "noise/" + std::to_string(sim.step_count) + "/" +
                                          std::to_string(view_index));
  const auto [wr0, wc0] = wrist_window_origin(sim);

  for (int r = 0; r < kWorldGrid; ++r) {
    for (int c = 0; c < kWorldGrid; ++c) {
      // wrist view samples the workspace cell under this output cell
      const int sr = view_index == 0 ? r : wr0 + r / 2;
      const int sc = view_index == 0 ? c : wc0 + c / 2;
      const double px = cell_center(sc);
      const double py = cell_center(sr);

      auto row = out.data.row(r * kWorldGrid + c);
      for (const SceneObject& o : scene.objects) {
        if (!point_in_footprint(o, px, py)) continue;
        row(int(o.color)) = 1.0f;      // color one-hot * occupancy
        row(3 + int(o.shape)) = 1.0f;  // shape one-hot * occupancy
        row(5) = 1.0f;                 // occupancy
        break;                         // footprints never overlap
      }
      double code[8];
      sinusoidal_code8(px, py, code);
      for (int i = 0; i < 8; ++i) row(6 + i) = float(code[i]);
      row(14) = float(noise.normal() * kFeatureNoise);
      row(15) = float(noise.normal() * kFeatureNoise);
    }
  }
  return out;
}

AffordanceMask gt_mask(const Scene& scene, const SimState& sim, int view_index) {
  if (view_index < 0 || view_index > 1)
    fail(ErrorKind::view_out_of_range, "view " + std::to_string(view_index));
  AffordanceMask mask;
  mask.values.setZero(kWorldGrid, kWorldGrid);
  const SceneObject& t = scene.target();
  const auto [wr0, wc0] = wrist_window_origin(sim);
  for (int r = 0; r < kWorldGrid; ++r)
    for (int c = 0; c < kWorldGrid; ++c) {
      const int sr = view_index == 0 ? r : wr0 + r / 2;
      const int sc = view_index == 0 ? c : wc0 + c / 2;
      if (point_in_footprint(t, cell_center(sc), cell_center(sr)))
        mask.values(r, c) = 1.0f;
    }
  return mask;
}

ActionChunk oracle_actions(const Scene& scene, const SimState& sim, int chunk_len) {
  ActionChunk chunk;
  chunk.actions.setZero(chunk_len, 3);
  const SceneObject& t = scene.target();
  double x = sim.x, y = sim.y;
  for (int h = 0; h < chunk_len; ++h) {
    const double dx = t.cx - x, dy = t.cy - y;
    const double dist = std::hypot(dx, dy);
    chunk.actions(h, 2) = dist <= kSuccessRadius ? 1.0f : 0.0f;
    double mx = dx, my = dy;
    if (dist > kMaxStep) {
      mx = dx / dist * kMaxStep;
      my = dy / dist * kMaxStep;
    }
    chunk.actions(h, 0) = float(mx);
    chunk.actions(h, 1) = float(my);
    x += mx;
    y += my;
  }
  return chunk;
}

SimState step(const Scene& scene, const SimState& sim, const Vecf& action) {
  (void)scene;
  if (action.size() < 3) fail(ErrorKind::shape_error, "step: action must have 3 entries");
  SimState next = sim;
  const double dx = clip(double(action(0)), -kMaxStep, kMaxStep);
  const double dy = clip(double(action(1)), -kMaxStep, kMaxStep);
  next.x = clip(sim.x + dx, 0.0, 1.0);
  next.y = clip(sim.y + dy, 0.0, 1.0);
  next.gripper = clip(double(action(2)), 0.0, 1.0);
  next.step_count = sim.step_count + 1;
  return next;
}

EpisodeStep make_step(const Scene& scene, const SimState& sim, int n_views, int chunk_len) {
  EpisodeStep s;
  for (int v = 0; v < n_views; ++v) {
    s.views.push_back(render_features(scene, sim, v));
    s.gt_masks.push_back(gt_mask(scene, sim, v));
  }
  s.instruction = scene.instruction();
  s.state.resize(3);
  s.state << float(sim.x), float(sim.y), float(sim.gripper);
  s.gt_actions = oracle_actions(scene, sim, chunk_len);
  return s;
}

namespace {

double target_distance(const Scene& scene, const SimState& sim) {
  return std::hypot(sim.x - scene.target().cx, sim.y - scene.target().cy);
}

}  // namespace

SuccessReport evaluate_rollout(const Policy& policy, const Scene& scene, int max_steps,
                               int n_views, int chunk_len) {
  SimState sim = initial_state(scene);
  SuccessReport report;
  while (report.steps_used < max_steps) {
    const ActionChunk chunk = policy(make_step(scene, sim, n_views, chunk_len));
    for (Eigen::Index h = 0; h < chunk.actions.rows() && report.steps_used < max_steps; ++h) {
      sim = step(scene, sim, chunk.actions.row(h).transpose());
      ++report.steps_used;
      if (target_distance(scene, sim) <= kSuccessRadius && sim.gripper > 0.5) {
        report.success = true;
        report.final_distance = target_distance(scene, sim);
        return report;
      }
    }
  }
  report.final_distance = target_distance(scene, sim);
  return report;
}

std::vector<EpisodeStep> oracle_trajectory(const Scene& scene, int n_views, int chunk_len,
                                           int max_steps) {
  std::vector<EpisodeStep> steps;
  SimState sim = initial_state(scene);
  for (int i = 0; i < max_steps; ++i) {
    EpisodeStep s = make_step(scene, sim, n_views, chunk_len);
    const Vecf first = s.gt_actions.actions.row(0).transpose();
    steps.push_back(std::move(s));
    sim = step(scene, sim, first);
    if (target_distance(scene, sim) <= kSuccessRadius && sim.gripper > 0.5) break;
  }
  return steps;
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t index) {
  return splitmix64(fnv1a(tag) ^ splitmix64(base) ^ splitmix64(index + 0x51ed2701));
}

}  // namespace afvla
