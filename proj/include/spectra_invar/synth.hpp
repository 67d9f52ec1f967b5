#pragma once

// Synthetic paired multi-domain grape data: the same bunches rendered under
// several illumination domains, as tile mosaics for the quality models,
// native-size bunch crops for the weight model and push-broom scans for the
// mapping pipeline.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/hsi.hpp"
#include "spectra_invar/metrics.hpp"

namespace spectra_invar {

/// Relative spectral power of a black body, scaled to a maximum of 1 over
/// the given wavelengths.
std::vector<double> planck_illuminant(std::span<const double> wavelengths_nm, double kelvin);

struct DomainSpec {
  DomainLabel label;
  std::vector<double> illuminant;  // relative spectral power per band
  double color_temperature_k = 0;  // provenance of `illuminant`, 0 if explicit
  double intensity_scale = 1.0;
  double o2_absorption_depth = 0.0;
  double shadow_prob = 0.0;
  double blur_sigma = 0.0;  // pixels
  double ambient = 0.0;     // diffuse sky light relative to full scale

  /// Throws ConfigError unless the illuminant has `bands` strictly positive
  /// entries and the fractions lie in [0,1].
  void validate(std::size_t bands) const;

  static DomainSpec lab(std::span<const double> wavelengths_nm);
  static DomainSpec field_am(std::span<const double> wavelengths_nm);
  static DomainSpec field_pm(std::span<const double> wavelengths_nm);
};

/// `wavelengths_nm` is needed to expand a colour temperature into an
/// illuminant.
nlohmann::json domain_spec_to_json(const DomainSpec& d);
DomainSpec domain_spec_from_json(const nlohmann::json& j, std::span<const double> wavelengths_nm);

struct SynthConfig {
  std::size_t n_bunches = 60;
  std::array<double, 2> brix_range{17.0, 24.0};
  std::array<double, 2> acid_range{4.0, 10.0};
  std::vector<DomainSpec> domains;  // empty means lab, field_am, field_pm
  double noise_sd_dn = 8.0;
  std::uint64_t seed = 0;

  std::size_t bands = kDefaultBands;
  double full_scale_dn = 3500.0;
  bool bunch_variation = true;
  std::size_t grape_patches_per_bunch = 6;
  std::size_t other_patches_per_bunch = 2;
  double test_fraction = 0.25;

  std::vector<std::string> weight_domains{"lab"};
  std::array<double, 2> bunch_side_px{12.0, 36.0};
  double grams_per_px = 0.4;
  double grams_offset = 25.0;
  double grams_noise_sd = 8.0;

  std::size_t scans_per_domain = 1;
  std::size_t scan_lines = 160;
  std::size_t scan_samples = 64;
  std::size_t bunches_per_scan = 3;

  /// Fills in the default domains if none are given.
  void resolve_defaults();
  /// Throws ConfigError for degenerate ranges, zero bunches, fewer than two
  /// domains, unknown weight domains or scan layouts that cannot fit.
  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// Per-bunch deviation from the nominal grape spectrum.
struct GrapeVariation {
  double scale = 1.0;
  double edge_shift_nm = 0.0;
  double anthocyanin = 0.0;
};

GrapeVariation draw_variation(std::mt19937_64& rng);

inline constexpr std::array<double, 2> kBrixFeaturesNm{835.0, 905.0};
inline constexpr std::array<double, 2> kAcidFeaturesNm{640.0, 965.0};

/// Reflectance in (0,1): logistic red edge near 700 nm with Gaussian
/// absorption features whose depth grows with brix (kBrixFeaturesNm) and
/// with acid (kAcidFeaturesNm). Throws DataError for brix outside [0,35] or
/// acid outside [0,30].
std::vector<double> grape_reflectance(double brix, double acid, std::span<const double> wavelengths_nm,
                                      const GrapeVariation& variation);
std::vector<double> grape_reflectance(double brix, double acid, std::span<const double> wavelengths_nm,
                                      std::mt19937_64& rng);
std::vector<double> leaf_reflectance(std::span<const double> wavelengths_nm);
std::vector<double> background_reflectance(std::span<const double> wavelengths_nm);

struct BunchTruth {
  std::int64_t id = 0;
  double brix = 0;
  double acid = 0;
  GrapeVariation variation;
  std::array<double, 2> size_px{};  // silhouette height (lines) and width (samples)
  double weight_g = 0;
  bool test = false;
};

enum class Material { Background, Leaf, Grape };

struct Placement {
  Material material = Material::Grape;
  std::int64_t bunch_id = -1;  // grape placements name their bunch
  std::array<std::size_t, 4> rect{};  // line0, sample0, lines, samples
  bool ellipse = false;        // bunch silhouette inscribed in rect
  bool textured = true;        // berry shading
  bool annotate = true;
  bool ground_truth_box = false;
};

struct Layout {
  std::string cube_id;
  std::size_t lines = 0;
  std::size_t samples = 0;
  Material fill = Material::Background;
  std::vector<Placement> items;
  GeoTag origin{46.0, 7.0};
};

struct RenderSettings {
  std::vector<double> wavelengths_nm;
  double full_scale_dn = 3500.0;
  double noise_sd_dn = 8.0;
};

struct RenderedCube {
  HsiCube cube;
  std::vector<Annotation> annotations;
  std::vector<GroundTruthBox> boxes;  // x along samples, y along lines
};

/// dn = round(clip(full_scale * R * (intensity * shadow * illuminant * O2 +
/// ambient * sky) + noise)), blurred spatially before noise. Throws ShapeError
/// if a placement leaves the cube and DataError for an unknown bunch.
RenderedCube render_cube(const Layout& layout, std::span<const BunchTruth> bunches, const DomainSpec& domain,
                         const RenderSettings& settings, std::uint64_t seed);

struct DomainPatches {
  DomainLabel label;
  std::vector<SpectralPatch> train;
  std::vector<SpectralPatch> test;
};

struct Dataset {
  SynthConfig config;
  std::vector<BunchTruth> bunches;
  std::vector<DomainPatches> domains;
  std::vector<RenderedCube> patch_cubes;   // one tile mosaic per domain
  std::vector<RenderedCube> weight_cubes;  // one crop mosaic per weight domain
  std::vector<RenderedCube> scans;

  const BunchTruth& bunch(std::int64_t id) const;
  /// Throws DataError if the domain is not part of the dataset.
  const DomainPatches& domain(const DomainLabel& label) const;
};

Dataset make_dataset(SynthConfig config);

/// Splits rendered tile patches into train/test by bunch id.
DomainPatches split_patches(const DomainLabel& label, std::vector<SpectralPatch> patches,
                            std::span<const BunchTruth> bunches);

/// Directory layout: manifest.json, <cube_id>.hsic, <cube_id>.labels.json and
/// <cube_id>.gt.jsonl for cubes with boxes.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace spectra_invar
