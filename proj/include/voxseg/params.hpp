#ifndef VOXSEG_PARAMS_HPP
#define VOXSEG_PARAMS_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

// Flat registry of every learnable array, keyed by a stable hierarchical path.
// Non-learnable entries (BN running stats, batch counters) live here too so
// checkpoints capture them, but they are excluded from param_count.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string path;
    Tensor<T> tensor;
    bool learnable;
  };

  Tensor<T>& add(const std::string& path, Tensor<T> t, bool learnable) {
    check(index_.find(path) == index_.end(), ErrorKind::Config,
          "parameter store: duplicate path " + path);
    index_[path] = entries_.size();
    entries_.push_back(Entry{path, std::move(t), learnable});
    entries_.back().tensor.set_requires_grad(learnable);
    return entries_.back().tensor;
  }

  bool contains(const std::string& path) const { return index_.count(path) > 0; }

  Tensor<T>& at(const std::string& path) {
    auto it = index_.find(path);
    check(it != index_.end(), ErrorKind::Config, "parameter store: unknown path " + path);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.learnable) n += e.tensor.numel();
    return n;
  }

  int64_t param_count_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.learnable && e.path.rfind(prefix, 0) == 0) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_)
      if (e.learnable) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace voxseg

#endif  // VOXSEG_PARAMS_HPP
