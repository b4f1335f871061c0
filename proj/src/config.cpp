#include "afvla/config.hpp"

#include <cctype>
#include <charconv>
#include <sstream>
#include <vector>

namespace afvla {

const char* to_string(Integration v) {
  switch (v) {
    case Integration::a_baseline: return "a";
    case Integration::b_external: return "b";
    case Integration::c_internal_noaction: return "c";
    case Integration::d_full_hard: return "d";
    case Integration::e_full_st: return "e";
  }
  return "?";
}
const char* to_string(PoolingMode v) {
  switch (v) {
    case PoolingMode::hard: return "hard";
    case PoolingMode::soft: return "soft";
    case PoolingMode::st: return "st";
    case PoolingMode::gt: return "gt";
  }
  return "?";
}
const char* to_string(Schedule v) {
  switch (v) {
    case Schedule::one_stage_gt: return "one_stage_gt";
    case Schedule::one_stage_pred: return "one_stage_pred";
    case Schedule::two_stage: return "two_stage";
  }
  return "?";
}
const char* to_string(Suite v) {
  switch (v) {
    case Suite::easy: return "easy";
    case Suite::distractor: return "distractor";
    case Suite::multiview: return "multiview";
  }
  return "?";
}

Integration integration_from(const std::string& s) {
  if (s == "a") return Integration::a_baseline;
  if (s == "b") return Integration::b_external;
  if (s == "c") return Integration::c_internal_noaction;
  if (s == "d") return Integration::d_full_hard;
  if (s == "e") return Integration::e_full_st;
  fail(ErrorKind::bad_enum, "variant must be one of a|b|c|d|e, got '" + s + "'");
}
PoolingMode pooling_from(const std::string& s) {
  if (s == "hard") return PoolingMode::hard;
  if (s == "soft") return PoolingMode::soft;
  if (s == "st") return PoolingMode::st;
  fail(ErrorKind::bad_enum, "pooling must be one of hard|soft|st, got '" + s + "'");
}
Schedule schedule_from(const std::string& s) {
  if (s == "one_stage_gt") return Schedule::one_stage_gt;
  if (s == "one_stage_pred") return Schedule::one_stage_pred;
  if (s == "two_stage") return Schedule::two_stage;
  fail(ErrorKind::bad_enum,
       "schedule must be one of one_stage_gt|one_stage_pred|two_stage, got '" + s + "'");
}
Suite suite_from(const std::string& s) {
  if (s == "easy") return Suite::easy;
  if (s == "distractor") return Suite::distractor;
  if (s == "multiview") return Suite::multiview;
  fail(ErrorKind::bad_enum, "suite must be one of easy|distractor|multiview, got '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const std::string t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size())
    fail(ErrorKind::out_of_range, key + ": '" + v + "' is not an integer");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const std::string t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size())
    fail(ErrorKind::out_of_range, key + ": '" + v + "' is not an unsigned integer");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  try {
    size_t used = 0;
    double out = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return out;
  } catch (const std::exception&) {
    fail(ErrorKind::out_of_range, key + ": '" + v + "' is not a real number");
  }
}

int parse_count(const std::string& key, const std::string& v, long long lo, long long hi) {
  long long n = parse_int(key, v);
  if (n < lo || n > hi)
    fail(ErrorKind::out_of_range,
         key + " = " + std::to_string(n) + " outside [" + std::to_string(lo) + ", " +
             std::to_string(hi) + "]");
  return int(n);
}

// Accepts "(16,16)", "16x16", "16,16".
std::pair<int, int> parse_grid(const std::string& v) {
  std::string t = trim(v);
  if (!t.empty() && t.front() == '(' && t.back() == ')') t = t.substr(1, t.size() - 2);
  size_t sep = t.find_first_of(",x");
  if (sep == std::string::npos)
    fail(ErrorKind::out_of_range, "patch_grid: '" + v + "' is not (H,W)");
  int h = parse_count("patch_grid", t.substr(0, sep), 1, 1 << 12);
  int w = parse_count("patch_grid", t.substr(sep + 1), 1, 1 << 12);
  return {h, w};
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t sep = line.find_first_of(":=");
    if (sep == std::string::npos)
      fail(ErrorKind::out_of_range, "config line is not key:value — '" + line + "'");
    out[trim(line.substr(0, sep))] = trim(line.substr(sep + 1));
  }
  return out;
}

Config validate_config(const std::map<std::string, std::string>& raw) {
  Config c;
  for (const auto& [key, val] : raw) {
    if (key == "seed") c.seed = parse_u64(key, val);
    else if (key == "n_views") c.n_views = parse_count(key, val, 1, 2);
    else if (key == "patch_grid") std::tie(c.grid_h, c.grid_w) = parse_grid(val);
    else if (key == "c_vis") c.c_vis = parse_count(key, val, 1, 4096);
    else if (key == "c_llm") c.c_llm = parse_count(key, val, 1, 4096);
    else if (key == "k_aff") c.k_aff = parse_count(key, val, 1, 256);
    else if (key == "topk") c.topk = parse_count(key, val, 1, 1 << 24);
    else if (key == "tau") c.tau = parse_real(key, val);
    else if (key == "chunk_len") c.chunk_len = parse_count(key, val, 1, 256);
    else if (key == "d_act") c.d_act = parse_count(key, val, 1, 64);
    else if (key == "denoise_steps") c.denoise_steps = parse_count(key, val, 1, 1 << 16);
    else if (key == "backbone_depth") c.backbone_depth = parse_count(key, val, 0, 64);
    else if (key == "backbone_heads") c.backbone_heads = parse_count(key, val, 1, 64);
    else if (key == "decoder_dim") c.decoder_dim = parse_count(key, val, 8, 4096);
    else if (key == "decoder_layers") c.decoder_layers = parse_count(key, val, 1, 64);
    else if (key == "decoder_heads") c.decoder_heads = parse_count(key, val, 1, 64);
    else if (key == "action_dmodel") c.action_dmodel = parse_count(key, val, 1, 4096);
    else if (key == "action_blocks") c.action_blocks = parse_count(key, val, 1, 64);
    else if (key == "action_heads") c.action_heads = parse_count(key, val, 1, 64);
    else if (key == "lr_aff") c.lr_aff = parse_real(key, val);
    else if (key == "lr_backbone") c.lr_backbone = parse_real(key, val);
    else if (key == "lr_action") c.lr_action = parse_real(key, val);
    else if (key == "warmup_steps") c.warmup_steps = parse_count(key, val, 0, 1 << 30);
    else if (key == "joint_steps") c.joint_steps = parse_count(key, val, 0, 1 << 30);
    else if (key == "batch_size") c.batch_size = parse_count(key, val, 1, 1 << 20);
    else if (key == "variant") c.variant = integration_from(val);
    else if (key == "pooling") c.pooling = pooling_from(val);
    else if (key == "schedule") c.schedule = schedule_from(val);
    else fail(ErrorKind::unknown_key, "unknown config key '" + key + "'");
  }

  if (c.tau <= 0) fail(ErrorKind::out_of_range, "tau must be > 0");
  if (c.lr_aff <= 0 || c.lr_backbone <= 0 || c.lr_action <= 0)
    fail(ErrorKind::out_of_range, "learning rates must be > 0");
  if (c.grid_h < 2 || c.grid_w < 2 || c.grid_h % 2 || c.grid_w % 2)
    fail(ErrorKind::out_of_range, "patch_grid dims must be even and >= 2");
  if (c.topk < 1 || c.topk > c.n_patches())
    fail(ErrorKind::out_of_range,
         "topk = " + std::to_string(c.topk) + " outside [1, " +
             std::to_string(c.n_patches()) + "]");
  if (c.c_llm % c.backbone_heads)
    fail(ErrorKind::out_of_range, "c_llm must be divisible by backbone_heads");
  if (c.decoder_dim % c.decoder_heads)
    fail(ErrorKind::out_of_range, "decoder_dim must be divisible by decoder_heads");
  if (c.action_dmodel % c.action_heads)
    fail(ErrorKind::out_of_range, "action_dmodel must be divisible by action_heads");
  if (c.pooling == PoolingMode::gt)
    fail(ErrorKind::bad_enum, "pooling flag must be hard|soft|st");
  return c;
}

std::map<std::string, std::string> config_to_map(const Config& c) {
  std::map<std::string, std::string> m;
  auto real = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  m["seed"] = std::to_string(c.seed);
  m["n_views"] = std::to_string(c.n_views);
  m["patch_grid"] = "(" + std::to_string(c.grid_h) + "," + std::to_string(c.grid_w) + ")";
  m["c_vis"] = std::to_string(c.c_vis);
  m["c_llm"] = std::to_string(c.c_llm);
  m["k_aff"] = std::to_string(c.k_aff);
  m["topk"] = std::to_string(c.topk);
  m["tau"] = real(c.tau);
  m["chunk_len"] = std::to_string(c.chunk_len);
  m["d_act"] = std::to_string(c.d_act);
  m["denoise_steps"] = std::to_string(c.denoise_steps);
  m["backbone_depth"] = std::to_string(c.backbone_depth);
  m["backbone_heads"] = std::to_string(c.backbone_heads);
  m["decoder_dim"] = std::to_string(c.decoder_dim);
  m["decoder_layers"] = std::to_string(c.decoder_layers);
  m["decoder_heads"] = std::to_string(c.decoder_heads);
  m["action_dmodel"] = std::to_string(c.action_dmodel);
  m["action_blocks"] = std::to_string(c.action_blocks);
  m["action_heads"] = std::to_string(c.action_heads);
  m["lr_aff"] = real(c.lr_aff);
  m["lr_backbone"] = real(c.lr_backbone);
  m["lr_action"] = real(c.lr_action);
  m["warmup_steps"] = std::to_string(c.warmup_steps);
  m["joint_steps"] = std::to_string(c.joint_steps);
  m["batch_size"] = std::to_string(c.batch_size);
  m["variant"] = to_string(c.variant);
  m["pooling"] = to_string(c.pooling);
  m["schedule"] = to_string(c.schedule);
  return m;
}

std::uint64_t config_hash(const Config& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : config_to_map(c)) h = fnv1a(v, fnv1a(k + "=", h));
  return h;
}

void check_variant_flags(const Config& c) {
  auto reject = [&](const std::string& why) {
    fail(ErrorKind::incompatible_flags,
         std::string("variant ") + to_string(c.variant) + " with pooling=" +
             to_string(c.pooling) + ", schedule=" + to_string(c.schedule) + ": " + why);
  };
  // gt pooling is what the one_stage_gt schedule does internally, never a flag
  if (c.pooling == PoolingMode::gt) reject("gt is not a pooling flag");
  switch (c.variant) {
    case Integration::a_baseline:
      // No affordance pathway: pooling/schedule flags would be silently inert.
      if (c.pooling != PoolingMode::st) reject("baseline has no pooling");
      if (c.schedule != Schedule::one_stage_pred) reject("baseline has no affordance stages");
      break;
    case Integration::b_external:
      if (c.pooling != PoolingMode::hard) reject("external logits are pooled hard (frozen)");
      if (c.schedule != Schedule::one_stage_pred) reject("external head is never warmed up here");
      break;
    case Integration::c_internal_noaction:
      if (c.pooling != PoolingMode::st) reject("no action conditioning, pooling flag is inert");
      if (c.schedule == Schedule::one_stage_gt) reject("gt pooling feeds nothing in this variant");
      break;
    case Integration::d_full_hard:
      if (c.pooling != PoolingMode::hard) reject("variant d is the hard-pooling model");
      break;
    case Integration::e_full_st:
      if (c.pooling == PoolingMode::hard) reject("hard pooling is variant d");
      break;
  }
}

PoolingMode default_pooling(Integration v) {
  switch (v) {
    case Integration::b_external:
    case Integration::d_full_hard: return PoolingMode::hard;
    default: return PoolingMode::st;
  }
}

Schedule default_schedule(Integration v) {
  switch (v) {
    case Integration::a_baseline:
    case Integration::b_external: return Schedule::one_stage_pred;
    default: return Schedule::two_stage;
  }
}

}  // namespace afvla
