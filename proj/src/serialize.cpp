#include "afvla/serialize.hpp"

#include "json.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

namespace afvla {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'F', 'V', 'L', 'A', 'C', 'K', 'P'};
constexpr int kEpisodeVersion = 1;

json matf_to_json(const Matf& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(double(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matf matf_from_json(const json& rows, const char* what) {
  if (!rows.is_array() || rows.empty() || !rows[0].is_array())
    fail(ErrorKind::schema_mismatch, std::string(what) + ": expected a 2-d array");
  const size_t nc = rows[0].size();
  Matf m(Eigen::Index(rows.size()), Eigen::Index(nc));
  for (size_t r = 0; r < rows.size(); ++r) {
    if (!rows[r].is_array() || rows[r].size() != nc)
      fail(ErrorKind::schema_mismatch, std::string(what) + ": ragged row lengths");
    for (size_t c = 0; c < nc; ++c) {
      if (!rows[r][c].is_number())
        fail(ErrorKind::schema_mismatch, std::string(what) + ": non-numeric entry");
      m(Eigen::Index(r), Eigen::Index(c)) = float(rows[r][c].get<double>());
    }
  }
  return m;
}

json parse_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io_error, "cannot open " + path);
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) fail(ErrorKind::schema_mismatch, path + ": invalid JSON");
  return doc;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io_error, "cannot open " + path);
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path);
  out << text;
  if (!out) fail(ErrorKind::io_error, "short write to " + path);
}

// --------------------------------------------------------------- episodes

void save_episode(const std::string& path, const EpisodeStep& step) {
  json doc;
  doc["format_version"] = kEpisodeVersion;
  json views = json::array();
  for (const auto& v : step.views) {
    views.push_back({{"data", matf_to_json(v.data)},
                     {"grid", {v.grid_h, v.grid_w}},
                     {"view_index", v.view_index}});
  }
  doc["views"] = std::move(views);
  doc["instruction"] = step.instruction;
  json state = json::array();
  for (Eigen::Index i = 0; i < step.state.size(); ++i) state.push_back(double(step.state(i)));
  doc["state"] = std::move(state);
  json masks = json::array();
  for (const auto& m : step.gt_masks) masks.push_back(matf_to_json(m.values));
  doc["gt_masks"] = std::move(masks);
  doc["gt_actions"] = matf_to_json(step.gt_actions.actions);
  write_text_file(path, doc.dump());
}

EpisodeStep load_episode(const std::string& path) {
  json doc = parse_json_file(path);
  for (const char* key : {"format_version", "views", "instruction", "state", "gt_masks",
                          "gt_actions"}) {
    if (!doc.contains(key))
      fail(ErrorKind::schema_mismatch, path + ": missing key '" + key + "'");
  }
  if (doc["format_version"] != kEpisodeVersion)
    fail(ErrorKind::schema_mismatch,
         path + ": format_version " + doc["format_version"].dump() + ", expected 1");

  EpisodeStep step;
  for (const auto& v : doc["views"]) {
    VisualPatchFeatures f;
    f.data = matf_from_json(v.at("data"), "views.data");
    f.grid_h = v.at("grid").at(0).get<int>();
    f.grid_w = v.at("grid").at(1).get<int>();
    f.view_index = v.at("view_index").get<int>();
    if (f.data.rows() != f.grid_h * f.grid_w)
      fail(ErrorKind::schema_mismatch, path + ": view rows != grid size");
    step.views.push_back(std::move(f));
  }
  step.instruction = doc["instruction"].get<std::vector<int>>();
  const auto& st = doc["state"];
  step.state.resize(Eigen::Index(st.size()));
  for (size_t i = 0; i < st.size(); ++i) step.state(Eigen::Index(i)) = float(st[i].get<double>());
  for (const auto& m : doc["gt_masks"]) {
    AffordanceMask mask;
    mask.values = matf_from_json(m, "gt_masks");
    step.gt_masks.push_back(std::move(mask));
  }
  step.gt_actions.actions = matf_from_json(doc["gt_actions"], "gt_actions");
  if (step.views.size() != step.gt_masks.size())
    fail(ErrorKind::schema_mismatch, path + ": |views| != |gt_masks|");
  return step;
}

// ------------------------------------------------------------- checkpoints

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json manifest;
  manifest["config"] = ckpt.meta.config;
  manifest["config_hash"] = config_hash(validate_config(ckpt.meta.config));
  manifest["stage"] = ckpt.meta.stage;
  manifest["step"] = ckpt.meta.step;
  manifest["action_min"] = ckpt.meta.action_min;
  manifest["action_max"] = ckpt.meta.action_max;
  json params = json::array();
  for (const auto& [name, m] : ckpt.params)
    params.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  manifest["params"] = std::move(params);

  const std::string mtext = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path);
  out.write(kMagic, 8);
  const std::uint32_t mlen = std::uint32_t(mtext.size());
  unsigned char lenb[4] = {static_cast<unsigned char>(mlen & 0xff),
                           static_cast<unsigned char>((mlen >> 8) & 0xff),
                           static_cast<unsigned char>((mlen >> 16) & 0xff),
                           static_cast<unsigned char>((mlen >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(mtext.data(), std::streamsize(mtext.size()));
  std::vector<float> buf;
  for (const auto& [name, m] : ckpt.params) {
    buf.resize(size_t(m.size()));
    size_t i = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) buf[i++] = m(r, c);
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size() * sizeof(float)));
  }
  if (!out) fail(ErrorKind::io_error, "short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path, const Config* expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io_error, "cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    fail(ErrorKind::schema_mismatch, path + ": bad checkpoint magic");
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  if (!in) fail(ErrorKind::schema_mismatch, path + ": truncated manifest length");
  const std::uint32_t mlen = std::uint32_t(lenb[0]) | (std::uint32_t(lenb[1]) << 8) |
                             (std::uint32_t(lenb[2]) << 16) | (std::uint32_t(lenb[3]) << 24);
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), mlen);
  if (!in) fail(ErrorKind::schema_mismatch, path + ": truncated manifest");
  json manifest = json::parse(mtext, nullptr, false);
  if (manifest.is_discarded())
    fail(ErrorKind::schema_mismatch, path + ": manifest is not valid JSON");

  Checkpoint ckpt;
  ckpt.meta.config = manifest.at("config").get<std::map<std::string, std::string>>();
  ckpt.meta.stage = manifest.at("stage").get<std::string>();
  ckpt.meta.step = manifest.at("step").get<int>();
  ckpt.meta.action_min = manifest.at("action_min").get<std::vector<double>>();
  ckpt.meta.action_max = manifest.at("action_max").get<std::vector<double>>();

  const Config own = validate_config(ckpt.meta.config);
  if (manifest.at("config_hash").get<std::uint64_t>() != config_hash(own))
    fail(ErrorKind::schema_mismatch, path + ": manifest hash does not match its config");
  if (expect && config_hash(*expect) != config_hash(own))
    fail(ErrorKind::hash_mismatch,
         path + ": checkpoint config hash does not match the requested config");

  std::vector<float> buf;
  for (const auto& p : manifest.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const Eigen::Index rows = p.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = p.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) fail(ErrorKind::schema_mismatch, path + ": negative shape");
    Matf m(rows, cols);
    buf.resize(size_t(rows * cols));
    in.read(reinterpret_cast<char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(float)));
    if (!in) fail(ErrorKind::schema_mismatch, path + ": truncated payload at " + name);
    size_t i = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = buf[i++];
    ckpt.params.emplace_back(name, std::move(m));
  }
  in.peek();
  if (!in.eof()) fail(ErrorKind::schema_mismatch, path + ": trailing bytes after payload");
  return ckpt;
}

// -------------------------------------------------------------------- pgm

void write_pgm(const std::string& path, const Matf& values01) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path);
  out << "P5\n" << values01.cols() << " " << values01.rows() << "\n255\n";
  for (Eigen::Index r = 0; r < values01.rows(); ++r)
    for (Eigen::Index c = 0; c < values01.cols(); ++c) {
      float v = std::min(1.0f, std::max(0.0f, values01(r, c)));
      unsigned char b = static_cast<unsigned char>(std::lround(255.0f * v));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  if (!out) fail(ErrorKind::io_error, "short write to " + path);
}

Mat<int> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io_error, "cannot open " + path);
  std::string tag;
  int w = 0, h = 0, maxval = 0;
  in >> tag >> w >> h >> maxval;
  if (tag != "P5" || w <= 0 || h <= 0 || maxval != 255)
    fail(ErrorKind::schema_mismatch, path + ": not a maxval-255 P5 PGM");
  in.get();  // single whitespace after the header
  Mat<int> m(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      int b = in.get();
      if (b == EOF) fail(ErrorKind::schema_mismatch, path + ": truncated pixel data");
      m(r, c) = b;
    }
  return m;
}

}  // namespace afvla
