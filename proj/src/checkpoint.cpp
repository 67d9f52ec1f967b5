#include "spectra_invar/checkpoint.hpp"

#include <fstream>

#include "binary_io.hpp"
#include "spectra_invar/error.hpp"

namespace spectra_invar {

using nlohmann::json;

namespace {

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw FormatError(FormatError::Kind::BadHeader, "unsupported tensor dtype '" + dtype + "'");
}

constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;

}  // namespace

const ContainerTensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError(FormatError::Kind::BadHeader, "checkpoint has no tensor '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::vector<char> encode_container(const Container& c) {
  std::vector<char> payload;
  json index = json::array();
  for (const ContainerTensor& t : c.tensors) {
    if (t.values.size() != numel(t.shape)) {
      throw ShapeError("tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                       " values for shape " + shape_string(t.shape));
    }
    index.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"dtype", t.dtype},
                     {"group", t.group},
                     {"offset", payload.size()}});
    if (t.dtype == "f32") {
      std::vector<float> f(t.values.begin(), t.values.end());
      detail::append_le(payload, f.data(), f.size());
    } else if (t.dtype == "f64") {
      detail::append_le(payload, t.values.data(), t.values.size());
    } else {
      dtype_size(t.dtype);
    }
  }
  const json header = {{"format", "SINV1"},
                       {"kind", c.kind},
                       {"seed", c.seed},
                       {"meta", c.meta},
                       {"tensors", index},
                       {"payload_bytes", payload.size()}};
  const std::string text = header.dump();
  std::vector<char> out(kCheckpointMagic, kCheckpointMagic + kMagicLen);
  const std::uint64_t len = text.size();
  detail::append_le(out, &len, 1);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Container decode_container(const std::vector<char>& bytes) {
  if (bytes.size() < kMagicLen || std::string(bytes.data(), kMagicLen) != kCheckpointMagic) {
    throw FormatError(FormatError::Kind::BadMagic, "not a SINV1 checkpoint (bad magic)");
  }
  if (bytes.size() < kMagicLen + 8) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint truncated before index length");
  }
  std::uint64_t len = 0;
  detail::read_le(bytes.data() + kMagicLen, &len, 1);
  const std::size_t body = kMagicLen + 8;
  if (bytes.size() - body < len) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint truncated inside index");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + body, bytes.begin() + body + len);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadHeader, std::string("checkpoint index: ") + e.what());
  }
  const std::size_t payload_start = body + len;
  const std::size_t available = bytes.size() - payload_start;
  Container c;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.seed = header.at("seed").get<std::uint64_t>();
    c.meta = header.at("meta");
    const std::size_t declared = header.at("payload_bytes").get<std::size_t>();
    if (available < declared) {
      throw FormatError(FormatError::Kind::Truncated,
                        "checkpoint payload truncated: " + std::to_string(available) + " of " +
                            std::to_string(declared) + " bytes");
    }
    if (available > declared) {
      throw FormatError(FormatError::Kind::SizeMismatch,
                        "checkpoint payload has trailing bytes: " + std::to_string(available) +
                            " present, " + std::to_string(declared) + " declared");
    }
    for (const json& e : header.at("tensors")) {
      ContainerTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      t.dtype = e.at("dtype").get<std::string>();
      t.group = e.at("group").get<std::string>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      const std::size_t n = numel(t.shape);
      const std::size_t nbytes = n * dtype_size(t.dtype);
      if (offset > declared || declared - offset < nbytes) {
        throw FormatError(FormatError::Kind::SizeMismatch,
                          "tensor '" + t.name + "' extends past the payload");
      }
      const char* src = bytes.data() + payload_start + offset;
      t.values.resize(n);
      if (t.dtype == "f32") {
        std::vector<float> f(n);
        detail::read_le(src, f.data(), n);
        std::copy(f.begin(), f.end(), t.values.begin());
      } else {
        detail::read_le(src, t.values.data(), n);
      }
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadHeader, std::string("checkpoint index: ") + e.what());
  }
  return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  const std::vector<char> bytes = encode_container(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint '" + path.string() + "'");
  return decode_container(detail::slurp(is));
}

void append_params(Container& c, const ParamStore<float>& store, const std::string& prefix) {
  for (const auto& [name, e] : store.entries()) {
    c.tensors.push_back({prefix + name, e.tensor.shape, "f32", e.group,
                         std::vector<double>(e.tensor.values.begin(), e.tensor.values.end())});
  }
}

ParamStore<float> params_from_container(const Container& c, const std::string& prefix) {
  ParamStore<float> store(c.seed);
  for (const ContainerTensor& t : c.tensors) {
    if (t.group == "buffer" || t.name.rfind(prefix, 0) != 0) continue;
    DiffTensor<float>& p = store.add(t.name.substr(prefix.size()), t.shape, t.group);
    std::copy(t.values.begin(), t.values.end(), p.values.begin());
  }
  return store;
}

}  // namespace spectra_invar
