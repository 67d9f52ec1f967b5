#pragma once

// Bunch weight regression: a strided 2D CNN over the bounding-box crop,
// bilinearly resampled to 64x64 over all bands and SG-filtered.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/checkpoint.hpp"
#include "spectra_invar/hsi.hpp"
#include "spectra_invar/metrics.hpp"
#include "spectra_invar/param_store.hpp"
#include "spectra_invar/savgol.hpp"

namespace spectra_invar {

inline constexpr std::size_t kWeightCrop = 64;

struct WeightConfig {
  std::vector<int> channels{16, 32, 32};  // 3x3 stride-2 convolutions
  int head_hidden = 32;
  // Rescaling discards absolute size, so the box height and width in pixels
  // are fed to the head next to the pooled features.
  bool bbox_size_input = true;
  double leaky_slope = 0.01;
  double lr = 1e-3;
  int epochs = 150;
  int batch = 8;
  std::uint64_t seed = 0;
  SgConfig sg;

  /// Throws ConfigError for empty or non-positive sizes or rates.
  void validate() const;
};

void to_json(nlohmann::json& j, const WeightConfig& c);
void from_json(const nlohmann::json& j, WeightConfig& c);

/// Bilinear resample of the box (x along samples, y along lines, cube
/// coordinates) to [bands, out, out] in DN. Sample centres map linearly
/// between the box edges. Throws ShapeError for a box under 4 px area or
/// outside the cube.
std::vector<float> resample_crop(const HsiCube& cube, const Box& box, std::size_t out = kWeightCrop);

struct WeightSample {
  std::vector<float> crop;  // [bands, 64, 64], SG-filtered
  double box_lines = 0;
  double box_samples = 0;
  std::optional<double> grams;
};

WeightSample make_weight_sample(const HsiCube& cube, const Box& box, const SgConfig& sg);

struct WeightModel {
  WeightConfig config;
  std::size_t bands = kDefaultBands;
  std::vector<float> band_mean;
  std::vector<float> band_scale;
  double grams_mean = 0, grams_scale = 1;
  ParamStore<float> params;
};

WeightModel init_weight_model(const WeightConfig& config, std::size_t bands);

struct WeightTrainResult {
  WeightModel model;
  std::vector<double> epoch_mse;  // standardized units
};

/// Throws DataError without at least two labelled samples.
WeightTrainResult train_weight(const WeightConfig& config, std::span<const WeightSample> samples,
                               const std::function<void(int epoch, double mse)>& on_epoch = {});

/// Grams, clamped at 0.
std::vector<double> predict_weight(const WeightModel& model, std::span<const WeightSample> samples);
double predict_weight(const WeightModel& model, const HsiCube& cube, const Box& box);

Container to_container(const WeightModel& model);
WeightModel weight_from_container(const Container& c);
void save_weight_model(const WeightModel& model, const std::filesystem::path& path);
WeightModel load_weight_model(const std::filesystem::path& path);

}  // namespace spectra_invar
