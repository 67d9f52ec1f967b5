#pragma once

// Little-endian helpers shared by the cube and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace spectra_invar::detail {

template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

/// Appends `values` as little-endian bytes.
template <typename U>
void append_le(std::vector<char>& out, const U* values, std::size_t n) {
  const std::size_t start = out.size();
  out.resize(start + n * sizeof(U));
  for (std::size_t i = 0; i < n; ++i) {
    const U v = byteswap_if_big(values[i]);
    std::memcpy(out.data() + start + i * sizeof(U), &v, sizeof(U));
  }
}

template <typename U>
void read_le(const char* src, U* values, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    U v;
    std::memcpy(&v, src + i * sizeof(U), sizeof(U));
    values[i] = byteswap_if_big(v);
  }
}

/// Reads the whole stream into memory.
inline std::vector<char> slurp(std::istream& is) {
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace spectra_invar::detail
