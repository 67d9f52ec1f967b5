#include "spectra_invar/savgol.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

void SgConfig::validate() const {
  if (window < 1 || window % 2 == 0) {
    throw ConfigError("Savitzky-Golay window must be odd and positive, got " + std::to_string(window));
  }
  if (polyorder < 0 || polyorder >= window) {
    throw ConfigError("Savitzky-Golay polyorder must be in [0, window), got " +
                      std::to_string(polyorder));
  }
  if (deriv < 0 || deriv > polyorder) {
    throw ConfigError("Savitzky-Golay deriv must be in [0, polyorder], got " + std::to_string(deriv));
  }
}

void to_json(nlohmann::json& j, const SgConfig& c) {
  j = {{"window", c.window}, {"polyorder", c.polyorder}, {"deriv", c.deriv}};
}

void from_json(const nlohmann::json& j, SgConfig& c) {
  c = SgConfig{};
  if (j.contains("window")) c.window = j["window"].get<int>();
  if (j.contains("polyorder")) c.polyorder = j["polyorder"].get<int>();
  if (j.contains("deriv")) c.deriv = j["deriv"].get<int>();
}

std::vector<double> sg_coefficients(const SgConfig& cfg) {
  cfg.validate();
  const int half = cfg.window / 2;
  Eigen::MatrixXd vander(cfg.window, cfg.polyorder + 1);
  for (int i = 0; i < cfg.window; ++i) {
    double t = 1.0;
    for (int j = 0; j <= cfg.polyorder; ++j) {
      vander(i, j) = t;
      t *= static_cast<double>(i - half);
    }
  }
  // Row `deriv` of the pseudo-inverse gives the polynomial coefficient.
  const Eigen::MatrixXd pinv =
      vander.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(cfg.window, cfg.window));
  double factorial = 1.0;
  for (int k = 2; k <= cfg.deriv; ++k) factorial *= k;
  std::vector<double> w(cfg.window);
  for (int i = 0; i < cfg.window; ++i) w[i] = factorial * pinv(cfg.deriv, i);
  return w;
}

namespace {

std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

void apply(std::span<const double> x, std::span<const double> w, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto half = static_cast<std::ptrdiff_t>(w.size() / 2);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0;
    if (i >= half && i + half < n) {
      for (std::ptrdiff_t k = -half; k <= half; ++k) acc += w[k + half] * x[i + k];
    } else {
      for (std::ptrdiff_t k = -half; k <= half; ++k) acc += w[k + half] * x[reflect(i + k, n)];
    }
    out[i] = acc;
  }
}

}  // namespace

std::vector<double> sg_filter(std::span<const double> spectrum, const SgConfig& cfg) {
  const std::vector<double> w = sg_coefficients(cfg);
  if (spectrum.size() < static_cast<std::size_t>(cfg.window)) {
    throw ShapeError("spectrum of " + std::to_string(spectrum.size()) +
                     " bands is shorter than the filter window " + std::to_string(cfg.window));
  }
  std::vector<double> out(spectrum.size());
  apply(spectrum, w, out);
  return out;
}

SpectralPatch sg_filter_patch(const SpectralPatch& patch, const SgConfig& cfg) {
  const std::vector<double> w = sg_coefficients(cfg);
  if (patch.bands < static_cast<std::size_t>(cfg.window)) {
    throw ShapeError("patch has " + std::to_string(patch.bands) +
                     " bands, fewer than the filter window " + std::to_string(cfg.window));
  }
  constexpr std::size_t P = SpectralPatch::kSize * SpectralPatch::kSize;
  SpectralPatch out = patch;
  std::vector<double> spec(patch.bands), res(patch.bands);
  for (std::size_t pix = 0; pix < P; ++pix) {
    for (std::size_t b = 0; b < patch.bands; ++b) spec[b] = patch.data[b * P + pix];
    apply(spec, w, res);
    for (std::size_t b = 0; b < patch.bands; ++b) out.data[b * P + pix] = static_cast<float>(res[b]);
  }
  return out;
}

void sg_filter_patches(std::vector<SpectralPatch>& patches, const SgConfig& cfg) {
  for (SpectralPatch& p : patches) p = sg_filter_patch(p, cfg);
}

}  // namespace spectra_invar
