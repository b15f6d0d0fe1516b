#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "m2unet/ops.hpp"
#include "m2unet/tensor.hpp"

namespace m2unet {

/// Named tensors of a model in registration order. `rank` is the logical rank
/// used on disk (1 for per-channel vectors stored as (c,1,1,1), 4 for kernels).
/// Running batch-norm statistics are stored but not trainable.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    std::uint8_t rank = 4;
    bool trainable = true;
  };

  void add(std::string name, Tensor<T> value, std::uint8_t rank, bool trainable) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value), rank, trainable});
  }

  void add_kernel(const std::string& name, Shape shape) { add(name, Tensor<T>(shape), 4, true); }

  void add_batchnorm(const std::string& prefix, std::size_t c) {
    const Shape s{c, 1, 1, 1};
    add(prefix + ".gamma", Tensor<T>(s, T(1)), 1, true);
    add(prefix + ".beta", Tensor<T>(s, T(0)), 1, true);
    add(prefix + ".running_mean", Tensor<T>(s, T(0)), 1, false);
    add(prefix + ".running_var", Tensor<T>(s, T(1)), 1, false);
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return entries_[it->second];
  }

  Tensor<T>& operator[](const std::string& name) { return entry(name).value; }
  const Tensor<T>& operator[](const std::string& name) const { return entry(name).value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Number of trainable scalars (kernels, gamma, beta).
  std::uint64_t trainable_count() const {
    std::uint64_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.value.size();
    }
    return n;
  }

  BatchNormParams<T> batchnorm(const std::string& prefix, T eps, T momentum) const {
    BatchNormParams<T> p;
    p.gamma = (*this)[prefix + ".gamma"].vec();
    p.beta = (*this)[prefix + ".beta"].vec();
    p.running_mean = (*this)[prefix + ".running_mean"].vec();
    p.running_var = (*this)[prefix + ".running_var"].vec();
    p.eps = eps;
    p.momentum = momentum;
    return p;
  }

  void store_running_stats(const std::string& prefix, const BatchNormParams<T>& p) {
    (*this)[prefix + ".running_mean"].vec() = p.running_mean;
    (*this)[prefix + ".running_var"].vec() = p.running_var;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.rank, e.trainable);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace m2unet
