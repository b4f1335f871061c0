#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "afvla/config.hpp"

using namespace afvla;

namespace {
ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind;
  }
  FAIL("expected an afvla::Error");
  return ErrorKind::usage;
}
}  // namespace

TEST_CASE("empty document yields the default mechanism constants") {
  Config c = validate_config({});
  CHECK(c.topk == 16);
  CHECK(c.tau == 1.0);
  CHECK(c.k_aff == 4);
  CHECK(c.grid_h == 16);
  CHECK(c.grid_w == 16);
  CHECK(c.chunk_len == 8);
  CHECK(c.denoise_steps == 4);
  CHECK(c.decoder_dim == 256);
  CHECK(c.decoder_layers == 2);
  CHECK(c.decoder_heads == 8);
  CHECK(c.c_llm == 128);
  CHECK(c.n_views == 1);
  CHECK(c.n_patches() == 256);
  CHECK(c.n_img_tokens() == 64);
  CHECK(c.l_seq() == 72);
  CHECK(c.l_ctx() == 68);
}

TEST_CASE("range and enum rejections") {
  CHECK(kind_of([] { validate_config({{"topk", "0"}}); }) == ErrorKind::out_of_range);
  CHECK(kind_of([] { validate_config({{"topk", "257"}, {"patch_grid", "(16,16)"}}); }) ==
        ErrorKind::out_of_range);
  CHECK(kind_of([] { validate_config({{"tau", "0"}}); }) == ErrorKind::out_of_range);
  CHECK(kind_of([] { validate_config({{"tau", "-1"}}); }) == ErrorKind::out_of_range);
  CHECK(kind_of([] { validate_config({{"n_views", "3"}}); }) == ErrorKind::out_of_range);
  CHECK(kind_of([] { validate_config({{"chunk_len", "0"}}); }) == ErrorKind::out_of_range);
  CHECK(kind_of([] { validate_config({{"mystery", "1"}}); }) == ErrorKind::unknown_key);
  CHECK(kind_of([] { validate_config({{"variant", "z"}}); }) == ErrorKind::bad_enum);
  CHECK(kind_of([] { validate_config({{"pooling", "gumbel"}}); }) == ErrorKind::bad_enum);
  CHECK(kind_of([] { validate_config({{"schedule", "three_stage"}}); }) == ErrorKind::bad_enum);
  CHECK(kind_of([] { validate_config({{"topk", "banana"}}); }) == ErrorKind::out_of_range);
}

TEST_CASE("patch_grid accepts the common spellings") {
  CHECK(validate_config({{"patch_grid", "(4,8)"}}).grid_h == 4);
  CHECK(validate_config({{"patch_grid", "4x8"}}).grid_w == 8);
  CHECK(validate_config({{"patch_grid", "4,8"}}).grid_w == 8);
  CHECK(kind_of([] { validate_config({{"patch_grid", "5,5"}}); }) == ErrorKind::out_of_range);
}

TEST_CASE("kv text parser") {
  auto m = parse_kv_text("topk = 8\n# comment\n tau :  0.5 # trailing\n\nseed: 9\n");
  CHECK(m.at("topk") == "8");
  CHECK(m.at("tau") == "0.5");
  CHECK(m.at("seed") == "9");
  Config c = validate_config(m);
  CHECK(c.topk == 8);
  CHECK(c.tau == 0.5);
  CHECK(c.seed == 9);
}

TEST_CASE("config map round-trips and hash is field-sensitive") {
  Config c = validate_config({{"seed", "123"}, {"topk", "12"}, {"variant", "d"},
                              {"pooling", "hard"}});
  Config c2 = validate_config(config_to_map(c));
  CHECK(config_hash(c) == config_hash(c2));
  CHECK(config_to_map(c) == config_to_map(c2));

  Config d = c;
  d.grid_h = 8;
  d.grid_w = 8;
  CHECK(config_hash(c) != config_hash(d));
  Config e = c;
  e.seed += 1;
  CHECK(config_hash(c) != config_hash(e));
}

TEST_CASE("variant flag compatibility") {
  auto cfg = [](const char* v, const char* p, const char* s) {
    return validate_config({{"variant", v}, {"pooling", p}, {"schedule", s}});
  };
  CHECK_NOTHROW(check_variant_flags(cfg("a", "st", "one_stage_pred")));
  CHECK_NOTHROW(check_variant_flags(cfg("b", "hard", "one_stage_pred")));
  CHECK_NOTHROW(check_variant_flags(cfg("c", "st", "two_stage")));
  CHECK_NOTHROW(check_variant_flags(cfg("c", "st", "one_stage_pred")));
  CHECK_NOTHROW(check_variant_flags(cfg("d", "hard", "two_stage")));
  CHECK_NOTHROW(check_variant_flags(cfg("d", "hard", "one_stage_gt")));
  CHECK_NOTHROW(check_variant_flags(cfg("e", "st", "two_stage")));
  CHECK_NOTHROW(check_variant_flags(cfg("e", "soft", "two_stage")));
  CHECK_NOTHROW(check_variant_flags(cfg("e", "st", "one_stage_gt")));

  auto bad = [&](const char* v, const char* p, const char* s) {
    try {
      check_variant_flags(cfg(v, p, s));
    } catch (const Error& e) {
      return e.kind == ErrorKind::incompatible_flags;
    }
    return false;
  };
  CHECK(bad("a", "st", "two_stage"));
  CHECK(bad("a", "st", "one_stage_gt"));
  CHECK(bad("a", "hard", "one_stage_pred"));
  CHECK(bad("b", "st", "one_stage_pred"));
  CHECK(bad("b", "hard", "two_stage"));
  CHECK(bad("c", "st", "one_stage_gt"));
  CHECK(bad("c", "soft", "two_stage"));
  CHECK(bad("d", "st", "two_stage"));
  CHECK(bad("d", "soft", "two_stage"));
  CHECK(bad("e", "hard", "two_stage"));
}

TEST_CASE("per-variant CLI defaults") {
  CHECK(default_pooling(Integration::a_baseline) == PoolingMode::st);
  CHECK(default_pooling(Integration::b_external) == PoolingMode::hard);
  CHECK(default_pooling(Integration::d_full_hard) == PoolingMode::hard);
  CHECK(default_pooling(Integration::e_full_st) == PoolingMode::st);
  CHECK(default_schedule(Integration::a_baseline) == Schedule::one_stage_pred);
  CHECK(default_schedule(Integration::e_full_st) == Schedule::two_stage);
}
