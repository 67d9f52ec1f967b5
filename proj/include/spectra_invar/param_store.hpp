#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "spectra_invar/tensor.hpp"

namespace spectra_invar {

/// Named trainable leaves. Each parameter belongs to exactly one optimizer
/// group; iteration order is by name so serialization is deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    DiffTensor<T> tensor;
    std::string group;
  };

  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}

  DiffTensor<T>& add(const std::string& name, Shape shape, const std::string& group);
  /// Uniform in [-sqrt(6/fan_in), +sqrt(6/fan_in)].
  DiffTensor<T>& add_kaiming(const std::string& name, Shape shape, const std::string& group,
                             std::size_t fan_in);

  DiffTensor<T>& at(const std::string& name);
  const DiffTensor<T>& at(const std::string& name) const;
  const std::string& group_of(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void zero_grad();
  std::uint64_t seed() const { return seed_; }
  std::size_t parameter_count() const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::map<std::string, Entry> entries_;
};

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction and per-group hyperparameters. Moment state is
/// kept per parameter name and persists across calls to step().
template <typename T>
class Adam {
 public:
  explicit Adam(std::map<std::string, AdamSettings> groups) : groups_(std::move(groups)) {}

  /// Throws NumericError (naming the parameter) before touching any value if
  /// a gradient is NaN/Inf.
  void step(ParamStore<T>& params);
  /// Multiplies every group's learning rate, for schedules.
  void set_lr_scale(double scale) { lr_scale_ = scale; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
  };
  std::map<std::string, AdamSettings> groups_;
  std::map<std::string, Moments> state_;
  double lr_scale_ = 1.0;
};

/// Single-group convenience wrapper around a persistent optimizer.
template <typename T>
void adam_step(ParamStore<T>& params, Adam<T>& optimizer) {
  optimizer.step(params);
}

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace spectra_invar
