#pragma once

// SINV1 container: magic "SINV1\n", u64 little-endian length of a UTF-8 JSON
// index, the index, then the raw little-endian tensor payloads. The index
// lists {name, shape, dtype, offset, group} per tensor with offsets relative
// to the start of the payload, plus a model-kind tag and free metadata.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/param_store.hpp"

namespace spectra_invar {

inline constexpr const char kCheckpointMagic[] = "SINV1\n";

struct ContainerTensor {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" or "f64"
  std::string group;  // optimizer group, or "buffer" for non-trainable state
  std::vector<double> values;
};

struct Container {
  std::string kind;
  std::uint64_t seed = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ContainerTensor> tensors;

  const ContainerTensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

std::vector<char> encode_container(const Container& c);
Container decode_container(const std::vector<char>& bytes);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

/// Appends every parameter of `store` (f32, group preserved) to `c`.
void append_params(Container& c, const ParamStore<float>& store, const std::string& prefix = "");
/// Rebuilds a store from the tensors whose name starts with `prefix` and whose
/// group is not "buffer".
ParamStore<float> params_from_container(const Container& c, const std::string& prefix = "");

}  // namespace spectra_invar
