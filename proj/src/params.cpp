#include "afvla/params.hpp"

#include "afvla/synthworld.hpp"

namespace afvla {

void ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init) {
  if (entries_.count(name)) fail(ErrorKind::shape_error, "duplicate parameter " + name);
  order_.push_back(name);
  entries_[name] = Entry{Matf::Zero(rows, cols), init};
}

Matf& ParamStore::value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::unknown_key, "no parameter " + name);
  return it->second.value;
}

const Matf& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::unknown_key, "no parameter " + name);
  return it->second.value;
}

std::int64_t ParamStore::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& name : order_) n += entries_.at(name).value.size();
  return n;
}

void ParamStore::init_all(std::uint64_t seed) {
  for (const auto& name : order_) {
    Entry& e = entries_.at(name);
    switch (e.init) {
      case Init::zeros:
        e.value.setZero();
        break;
      case Init::ones:
        e.value.setOnes();
        break;
      case Init::normal002: {
        Rng rng = Rng::stream(seed, fnv1a(name));
        rng.fill_normal(e.value, 0.02);
        break;
      }
    }
  }
}

Checkpoint ParamStore::to_checkpoint(const Config& cfg, const std::string& stage, int step) const {
  Checkpoint ckpt;
  ckpt.meta.config = config_to_map(cfg);
  ckpt.meta.stage = stage;
  ckpt.meta.step = step;
  if (cfg.d_act == 3) {
    ckpt.meta.action_min = {-kMaxStep, -kMaxStep, 0.0};
    ckpt.meta.action_max = {kMaxStep, kMaxStep, 1.0};
  } else {
    ckpt.meta.action_min.assign(cfg.d_act, -1.0);
    ckpt.meta.action_max.assign(cfg.d_act, 1.0);
  }
  ckpt.params.reserve(order_.size());
  for (const auto& name : order_) ckpt.params.emplace_back(name, entries_.at(name).value);
  return ckpt;
}

void ParamStore::load(const Checkpoint& ckpt) {
  std::map<std::string, const Matf*> by_name;
  for (const auto& [name, value] : ckpt.params) by_name[name] = &value;
  for (const auto& name : order_) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::schema_mismatch, "checkpoint missing parameter " + name);
    Entry& e = entries_.at(name);
    if (it->second->rows() != e.value.rows() || it->second->cols() != e.value.cols())
      fail(ErrorKind::shape_error, "checkpoint shape mismatch for " + name);
    e.value = *it->second;
  }
}

void ParamStore::load_prefixed(const Checkpoint& ckpt, const std::string& prefix) {
  std::map<std::string, const Matf*> by_name;
  for (const auto& [name, value] : ckpt.params) by_name[prefix + name] = &value;
  for (const auto& name : order_) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::schema_mismatch, "checkpoint missing parameter for " + name);
    Entry& e = entries_.at(name);
    if (it->second->rows() != e.value.rows() || it->second->cols() != e.value.cols())
      fail(ErrorKind::shape_error, "checkpoint shape mismatch for " + name);
    e.value = *it->second;
  }
}

}  // namespace afvla
