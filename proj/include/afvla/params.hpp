#pragma once

// Named, ordered parameter storage. Registration order defines checkpoint
// payload order; initialization draws one independent RNG stream per name,
// so shared tensors are bit-identical across model variants that register
// different subsets.

#include "afvla/config.hpp"
#include "afvla/core.hpp"
#include "afvla/tape.hpp"
#include "afvla/types.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace afvla {

enum class Init { normal002, zeros, ones };

class ParamStore {
 public:
  void add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init);
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  Matf& value(const std::string& name);
  const Matf& value(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }
  std::int64_t scalar_count() const;

  // Draws every tensor from Rng::stream(seed, fnv1a(name)) per its init kind.
  void init_all(std::uint64_t seed);

  Checkpoint to_checkpoint(const Config& cfg, const std::string& stage, int step) const;

  // Loads every registered name from the checkpoint (shape-checked); extra
  // checkpoint entries are ignored so a full-model stage-1 checkpoint can
  // seed variants owning a parameter subset. Missing names throw.
  void load(const Checkpoint& ckpt);

  // Loads checkpoint entry <name> into registered entry <prefix><name>.
  void load_prefixed(const Checkpoint& ckpt, const std::string& prefix);

 private:
  struct Entry {
    Matf value;
    Init init;
  };
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

// Tape bindings for one forward/backward pass. For float the tape reads the
// store's tensors in place; for other scalars a converted copy is kept here.
template <typename T>
struct BoundParams {
  std::map<std::string, int> ids;
  std::map<std::string, Mat<T>> copies;

  int at(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) fail(ErrorKind::shape_error, "unbound parameter " + name);
    return it->second;
  }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamStore& store,
                           const std::function<bool(const std::string&)>& trainable) {
  BoundParams<T> out;
  for (const std::string& name : store.names()) {
    const bool needs = trainable && trainable(name);
    if constexpr (std::is_same_v<T, float>) {
      out.ids[name] = tape.external_input(&store.value(name), needs);
    } else {
      out.copies[name] = store.value(name).template cast<T>();
      out.ids[name] = tape.external_input(&out.copies[name], needs);
    }
  }
  return out;
}

// A graph-building context: the tape, the run config, and a parameter
// lookup. Model builders are free functions over this.
template <typename T>
struct Graph {
  Tape<T>& tape;
  const Config& cfg;
  std::function<int(const std::string&)> param;

  int p(const std::string& name) const { return param(name); }
};

}  // namespace afvla
