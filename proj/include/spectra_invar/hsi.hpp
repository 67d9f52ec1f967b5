#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace spectra_invar {

/// Acquisition condition of a cube or patch.
class DomainLabel {
 public:
  enum class Kind { Lab, FieldAM, FieldPM, Other };

  DomainLabel() = default;
  static DomainLabel lab() { return DomainLabel(Kind::Lab, ""); }
  static DomainLabel field_am() { return DomainLabel(Kind::FieldAM, ""); }
  static DomainLabel field_pm() { return DomainLabel(Kind::FieldPM, ""); }
  /// Throws ConfigError unless `tag` is non-empty, lowercase and not a
  /// reserved name.
  static DomainLabel other(std::string tag);
  /// Inverse of name().
  static DomainLabel parse(const std::string& name);

  Kind kind() const { return kind_; }
  /// "lab", "field_am", "field_pm" or the custom tag.
  std::string name() const;

  friend bool operator==(const DomainLabel& a, const DomainLabel& b) {
    return a.kind_ == b.kind_ && a.tag_ == b.tag_;
  }
  friend bool operator<(const DomainLabel& a, const DomainLabel& b) {
    return a.kind_ != b.kind_ ? a.kind_ < b.kind_ : a.tag_ < b.tag_;
  }

 private:
  DomainLabel(Kind k, std::string tag) : kind_(k), tag_(std::move(tag)) {}
  Kind kind_ = Kind::Lab;
  std::string tag_;
};

struct GeoTag {
  double lat_deg = 0;
  double lon_deg = 0;
  friend bool operator==(const GeoTag&, const GeoTag&) = default;
};

inline constexpr std::size_t kDefaultBands = 224;
inline constexpr std::size_t kMaxSamples = 1024;

/// 224 band centres evenly spaced over 400-1000 nm.
std::vector<double> default_wavelengths(std::size_t bands = kDefaultBands);

/// Push-broom cube of raw digital numbers, layout [line][sample][band].
struct HsiCube {
  std::size_t lines = 0;
  std::size_t samples = 0;
  std::size_t bands = 0;
  std::vector<std::uint16_t> dn;
  std::vector<double> wavelengths_nm;
  std::vector<GeoTag> geotags;  // one per line
  DomainLabel domain;
  nlohmann::json capture_meta = nlohmann::json::object();

  std::size_t index(std::size_t line, std::size_t sample, std::size_t band) const {
    return (line * samples + sample) * bands + band;
  }
  std::uint16_t at(std::size_t line, std::size_t sample, std::size_t band) const {
    return dn[index(line, sample, band)];
  }
  std::span<const std::uint16_t> spectrum(std::size_t line, std::size_t sample) const {
    return {dn.data() + index(line, sample, 0), bands};
  }
  /// The "cube_id" entry of capture_meta, or "".
  std::string id() const;
  /// Throws ShapeError/ConfigError if an invariant does not hold.
  void validate() const;

  friend bool operator==(const HsiCube&, const HsiCube&) = default;
};

HsiCube make_cube(std::size_t lines, std::size_t samples, DomainLabel domain,
                  std::size_t bands = kDefaultBands);

// Cube file: "HSIC1\n", u64 little-endian header length, UTF-8 JSON header,
// little-endian u16 payload.
std::vector<char> encode_cube(const HsiCube& cube);
HsiCube decode_cube(const std::vector<char>& bytes);
void write_cube(const HsiCube& cube, const std::filesystem::path& path);
HsiCube read_cube(const std::filesystem::path& path);

/// Labelled rectangle; rect = [line0, sample0, lines, samples].
struct Annotation {
  std::string cube_id;
  std::array<std::size_t, 4> rect{};
  std::optional<double> brix;
  std::optional<double> acid;
  bool is_grape = false;
  std::optional<std::int64_t> bunch_id;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

nlohmann::json annotations_to_json(std::span<const Annotation> annotations);
std::vector<Annotation> annotations_from_json(const nlohmann::json& j);
void write_annotations(std::span<const Annotation> annotations, const std::filesystem::path& path);
std::vector<Annotation> read_annotations(const std::filesystem::path& path);

struct PatchSource {
  std::string cube_id;
  std::size_t line = 0;
  std::size_t sample = 0;
};

/// 8x8 spatial footprint over all bands, stored band-major [band][8][8] so a
/// batch is directly [N, bands, 8, 8].
struct SpectralPatch {
  static constexpr std::size_t kSize = 8;

  std::size_t bands = 0;
  std::vector<float> data;
  std::optional<double> brix;
  std::optional<double> acid;
  bool is_grape = false;
  bool annotated = false;
  std::optional<std::int64_t> bunch_id;
  DomainLabel domain;
  PatchSource source;

  float at(std::size_t band, std::size_t row, std::size_t col) const {
    return data[(band * kSize + row) * kSize + col];
  }
  bool has_quality() const { return brix.has_value() && acid.has_value(); }
};

/// Reads the 8x8 footprint whose top-left corner is (line, sample).
SpectralPatch patch_at(const HsiCube& cube, std::size_t line, std::size_t sample);

/// Tiles the cube with the given stride. A patch takes the labels of the
/// annotation covering the largest part of its footprint when that part is
/// at least half of it.
std::vector<SpectralPatch> extract_patches(const HsiCube& cube, std::size_t stride,
                                           std::span<const Annotation> labels = {});

struct RgbImage {
  std::size_t lines = 0;
  std::size_t samples = 0;
  std::vector<std::uint8_t> pixels;  // [line][sample][rgb]
};

inline constexpr std::array<std::size_t, 3> kPseudoRgbBands{114, 58, 20};

/// R <- band 114, G <- band 58, B <- band 20, each min-max scaled over the
/// whole cube; a constant channel maps to 0.
RgbImage pseudo_rgb(const HsiCube& cube);

}  // namespace spectra_invar
