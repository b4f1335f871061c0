#pragma once

// Synthetic tabletop world on the unit square: scene generation with
// analytic ground-truth masks, a 16x16 patch-feature renderer with a wrist
// view, a clipped proportional oracle controller, and closed-loop rollout
// scoring.

#include "afvla/config.hpp"
#include "afvla/types.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace afvla {

enum class Color { red, green, blue };
enum class Shape { square, circle };

inline constexpr double kMaxStep = 0.08;
inline constexpr double kSuccessRadius = 0.05;
inline constexpr int kWorldGrid = 16;       // patch grid per view
inline constexpr int kWorldCvis = 16;       // renderer feature width
inline constexpr int kWristCells = 8;       // wrist window edge, in cells
inline constexpr int kMaxEnvSteps = 32;
inline constexpr double kFeatureNoise = 0.05;

struct SceneObject {
  double cx = 0, cy = 0;
  double half = 0;  // half edge (square) or radius (circle)
  Color color = Color::red;
  Shape shape = Shape::square;
  bool is_target = false;
};

struct Scene {
  std::vector<SceneObject> objects;
  int target_index = 0;
  Suite difficulty = Suite::easy;
  std::uint64_t seed = 0;
  double ee_start_x = 0.5, ee_start_y = 0.5;
  int verb = 1;  // instruction verb token id

  const SceneObject& target() const { return objects[size_t(target_index)]; }
  // [verb, color word, shape word]
  std::vector<int> instruction() const;
};

struct SimState {
  double x = 0.5, y = 0.5;
  double gripper = 0.0;
  int step_count = 0;
};

struct SuccessReport {
  bool success = false;
  int steps_used = 0;
  double final_distance = 0.0;
};

// Fixed 16-word vocabulary; instruction() indexes into it.
const std::vector<std::string>& vocab();

bool point_in_footprint(const SceneObject& o, double x, double y);
bool footprints_overlap(const SceneObject& a, const SceneObject& b);

// Deterministic in (seed, difficulty). easy: target + 1 distractor;
// distractor/multiview: target + 3 distractors, each sharing exactly one
// of (color, shape) with the target. Throws PlacementFailure when an
// object cannot be placed within 100 rejection attempts.
Scene gen_scene(std::uint64_t seed, Suite difficulty);

SimState initial_state(const Scene& scene);

// view 0: full workspace; view 1: 8x8-cell wrist window centered on the
// end effector (clamped), upsampled 2x by nearest-cell copy.
VisualPatchFeatures render_features(const Scene& scene, const SimState& sim, int view_index);
AffordanceMask gt_mask(const Scene& scene, const SimState& sim, int view_index);

// Top-left workspace cell (row, col) of the wrist window for this state.
std::pair<int, int> wrist_window_origin(const SimState& sim);

// H steps of the norm-clipped proportional controller toward the target
// centroid; gripper is 1 when the pre-move distance is within the success
// radius.
ActionChunk oracle_actions(const Scene& scene, const SimState& sim, int chunk_len);

SimState step(const Scene& scene, const SimState& sim, const Vecf& action);

// Observation bundle at the current state (instruction, rendered views,
// per-view GT masks, oracle chunk).
EpisodeStep make_step(const Scene& scene, const SimState& sim, int n_views, int chunk_len);

using Policy = std::function<ActionChunk(const EpisodeStep&)>;

// Executes policy chunks open-loop, re-querying after each chunk; success
// when distance <= kSuccessRadius and gripper > 0.5 after an env step.
SuccessReport evaluate_rollout(const Policy& policy, const Scene& scene, int max_steps,
                               int n_views, int chunk_len);

// Closed-loop oracle demonstration: one EpisodeStep per env step, executing
// the first action of each re-planned chunk, until success or max_steps.
std::vector<EpisodeStep> oracle_trajectory(const Scene& scene, int n_views, int chunk_len,
                                           int max_steps = kMaxEnvSteps);

// Stable per-index seed derivation for datasets and evaluation scenes.
std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t index);

}  // namespace afvla
