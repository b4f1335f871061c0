#pragma once

// On-disk formats:
//  - episodes: one JSON document per step, format_version 1
//  - checkpoints: 8-byte magic "AFVLACKP", u32 little-endian manifest
//    length, UTF-8 JSON manifest, then raw float32 little-endian payload
//  - masks: binary PGM (P5), maxval 255

#include "afvla/config.hpp"
#include "afvla/types.hpp"

#include <cstdint>
#include <string>

namespace afvla {

void save_episode(const std::string& path, const EpisodeStep& step);
EpisodeStep load_episode(const std::string& path);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// When expect is non-null, the manifest's config must hash-match it.
Checkpoint load_checkpoint(const std::string& path, const Config* expect = nullptr);

// values in [0,1]; written as round(255 * v), row-major.
void write_pgm(const std::string& path, const Matf& values01);
// Returns the quantized grid with entries 0..255.
Mat<int> read_pgm(const std::string& path);

// Whole-file helpers used across the harness.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace afvla
