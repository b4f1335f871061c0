#pragma once

// Run configuration: defaults, validation, canonical hashing, and the
// variant-flag compatibility rules used when assembling models.

#include "afvla/core.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace afvla {

enum class Integration { a_baseline, b_external, c_internal_noaction, d_full_hard, e_full_st };
enum class PoolingMode { hard, soft, st, gt };  // gt is schedule-internal, not a flag value
enum class Schedule { one_stage_gt, one_stage_pred, two_stage };
enum class Suite { easy, distractor, multiview };

const char* to_string(Integration v);
const char* to_string(PoolingMode v);
const char* to_string(Schedule v);
const char* to_string(Suite v);
Integration integration_from(const std::string& s);
PoolingMode pooling_from(const std::string& s);
Schedule schedule_from(const std::string& s);
Suite suite_from(const std::string& s);

struct Config {
  std::uint64_t seed = 0;
  int n_views = 1;
  int grid_h = 16, grid_w = 16;
  int c_vis = 16;
  int c_llm = 128;
  int k_aff = 4;
  int topk = 16;
  double tau = 1.0;
  int chunk_len = 8;
  int d_act = 3;
  int denoise_steps = 4;
  int backbone_depth = 2, backbone_heads = 4;
  int decoder_dim = 256, decoder_layers = 2, decoder_heads = 8;
  int action_dmodel = 128, action_blocks = 2, action_heads = 4;
  double lr_aff = 2.5e-4, lr_backbone = 1e-4, lr_action = 1e-3;
  int warmup_steps = 2000, joint_steps = 20000;
  int batch_size = 16;
  Integration variant = Integration::e_full_st;
  PoolingMode pooling = PoolingMode::st;
  Schedule schedule = Schedule::two_stage;

  int n_patches() const { return grid_h * grid_w; }
  int n_img_tokens() const { return (grid_h / 2) * (grid_w / 2); }  // 2x2 mean pooled
  int l_text() const { return 3; }
  int vocab_size() const { return 16; }
  // img + text + state rows of the encoded sequence (the H_t rows)
  int l_ctx() const { return n_views * n_img_tokens() + l_text() + 1; }
  int l_seq() const { return l_ctx() + n_views * k_aff; }
};

// Parses "key = value" / "key: value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_kv_text(const std::string& text);

// Fills defaults, rejects unknown keys, range violations, and bad enums.
Config validate_config(const std::map<std::string, std::string>& raw);

// Canonical field map (inverse of validate_config on valid input).
std::map<std::string, std::string> config_to_map(const Config& cfg);

// FNV-1a over the canonical "key=value\n" serialization, fixed key order.
std::uint64_t config_hash(const Config& cfg);

// Variant/pooling/schedule compatibility; throws IncompatibleFlags.
void check_variant_flags(const Config& cfg);

// Per-variant defaults applied when the CLI omits --pooling / --schedule.
PoolingMode default_pooling(Integration v);
Schedule default_schedule(Integration v);

}  // namespace afvla
