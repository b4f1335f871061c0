#pragma once

// Domain value types shared across modules. All matrices are float32 in
// storage; training runs in float32, gradient checks rebuild in double.

#include "afvla/core.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace afvla {

// P_t for one view: N x C_vis rows in row-major patch order (row*W + col).
struct VisualPatchFeatures {
  Matf data;
  int grid_h = 0, grid_w = 0;
  int view_index = 0;
  int n() const { return grid_h * grid_w; }
};

// Mask on the patch grid; entries in [0,1], binary {0,1} for ground truth.
struct AffordanceMask {
  Matf values;  // grid_h x grid_w
};

// a_{t:t+H}: chunk_len x d_act, per step (dx, dy, gripper).
struct ActionChunk {
  Matf actions;
};

struct EpisodeStep {
  std::vector<VisualPatchFeatures> views;
  std::vector<int> instruction;  // token ids
  Vecf state;                    // (x, y, gripper)
  std::vector<AffordanceMask> gt_masks;
  ActionChunk gt_actions;
};

struct CheckpointMeta {
  std::map<std::string, std::string> config;  // canonical config map
  std::string stage = "init";                 // init | warmup | joint
  int step = 0;
  std::vector<double> action_min, action_max;  // per-dimension, may be empty
};

// Ordered parameter map; order is the payload layout and is part of the
// on-disk contract. Matrices serialize row-major.
struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Matf>> params;
};

}  // namespace afvla
