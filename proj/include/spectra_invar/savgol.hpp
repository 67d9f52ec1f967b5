#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/hsi.hpp"

namespace spectra_invar {

/// Savitzky-Golay filter settings; the defaults are the first-derivative
/// filter used in front of every quality model.
struct SgConfig {
  int window = 15;
  int polyorder = 2;
  int deriv = 1;

  /// Throws ConfigError unless window is odd and positive,
  /// 0 <= polyorder < window and 0 <= deriv <= polyorder.
  void validate() const;
};

void to_json(nlohmann::json& j, const SgConfig& c);
void from_json(const nlohmann::json& j, SgConfig& c);

/// Weights w with dot(w, x[i-h .. i+h]) equal to the deriv-th derivative, at
/// the window centre, of the least-squares polynomial through the window
/// (unit sample spacing).
std::vector<double> sg_coefficients(const SgConfig& cfg);

/// Filters one spectrum with reflect padding at both ends (edge sample not
/// repeated). Needs at least `window` samples.
std::vector<double> sg_filter(std::span<const double> spectrum, const SgConfig& cfg);

/// Filters every pixel spectrum of the patch; labels and provenance are kept.
SpectralPatch sg_filter_patch(const SpectralPatch& patch, const SgConfig& cfg);

void sg_filter_patches(std::vector<SpectralPatch>& patches, const SgConfig& cfg);

}  // namespace spectra_invar
