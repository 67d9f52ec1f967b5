#include "spectra_invar/param_store.hpp"

#include <cmath>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

template <typename T>
DiffTensor<T>& ParamStore<T>::add(const std::string& name, Shape shape, const std::string& group) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (group.empty()) throw ConfigError("parameter '" + name + "' has no optimizer group");
  auto [it, ok] = entries_.emplace(name, Entry{DiffTensor<T>::zeros(std::move(shape), true), group});
  return it->second.tensor;
}

template <typename T>
DiffTensor<T>& ParamStore<T>::add_kaiming(const std::string& name, Shape shape,
                                          const std::string& group, std::size_t fan_in) {
  DiffTensor<T>& t = add(name, std::move(shape), group);
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : t.values) v = static_cast<T>(dist(rng_));
  return t;
}

template <typename T>
DiffTensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second.tensor;
}

template <typename T>
const DiffTensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second.tensor;
}

template <typename T>
const std::string& ParamStore<T>::group_of(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second.group;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, e] : entries_) e.tensor.zero_grad();
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.tensor.size();
  return n;
}

template <typename T>
void Adam<T>::step(ParamStore<T>& params) {
  for (const auto& [name, e] : params.entries()) {
    if (!groups_.count(e.group)) {
      throw ConfigError("parameter '" + name + "' is in group '" + e.group +
                        "' which has no optimizer settings");
    }
    for (T g : e.tensor.grad) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + name + "'");
      }
    }
  }
  for (auto& [name, e] : params.entries()) {
    const AdamSettings& s = groups_.at(e.group);
    Moments& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(e.tensor.size(), 0.0);
      st.v.assign(e.tensor.size(), 0.0);
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(st.t));
    std::vector<T>& p = e.tensor.values;
    const std::vector<T>& g = e.tensor.grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      st.m[i] = s.beta1 * st.m[i] + (1.0 - s.beta1) * gi;
      st.v[i] = s.beta2 * st.v[i] + (1.0 - s.beta2) * gi * gi;
      const double mhat = st.m[i] / c1;
      const double vhat = st.v[i] / c2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr_scale_ * s.lr * mhat / (std::sqrt(vhat) + s.eps));
    }
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace spectra_invar
