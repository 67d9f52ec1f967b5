#pragma once

// Quality networks on 8x8 SG-filtered patches. kind "lisa": convolutional
// autoencoder whose latent map feeds the brix/acid/grape heads and, through a
// gradient reversal layer, a domain discriminator. kind "predictor": the same
// heads applied directly to the flattened patch.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/checkpoint.hpp"
#include "spectra_invar/hsi.hpp"
#include "spectra_invar/metrics.hpp"
#include "spectra_invar/param_store.hpp"

namespace spectra_invar {

struct LisaConfig {
  int latent_channels = 16;
  std::vector<int> hidden_channels{64, 32};
  int kernel = 3;
  int head_hidden = 128;
  int disc_hidden = 64;
  double leaky_slope = 0.01;
  // "linear" or "tanh"; tanh bounds z so the discriminator cannot be fooled
  // by inflating it.
  std::string latent_activation = "linear";
  double alpha = 0.011;   // reconstruction
  double beta = 0.066;    // manifold
  double gamma = 1.2e-4;  // domain
  double lr_ae = 1.5e-4;
  double lr_disc = 2.5e-4;
  int epochs = 200;
  // "constant", or "cosine" to anneal both learning rates to 0 over the epochs.
  std::string lr_schedule = "constant";
  int batch = 64;
  double brix_bin_width = 0.5;
  double grl_lambda = 1.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError on negative weights, non-positive bin width, learning
  /// rates, sizes, an even kernel, an unknown latent activation or schedule.
  void validate() const;
};

void to_json(nlohmann::json& j, const LisaConfig& c);
void from_json(const nlohmann::json& j, LisaConfig& c);

struct LossBreakdown {
  double total = 0;
  double task = 0;
  double recon = 0;
  double manifold = 0;
  double domain = 0;
};

struct LisaModel {
  std::string kind = "lisa";  // "lisa" or "predictor"
  LisaConfig config;
  std::vector<DomainLabel> domains;  // discriminator class order
  std::size_t bands = kDefaultBands;
  // Input standardization per band and target standardization, fitted on
  // the training patches.
  std::vector<float> band_mean;
  std::vector<float> band_scale;
  double brix_mean = 0, brix_scale = 1;
  double acid_mean = 0, acid_scale = 1;
  ParamStore<float> params;

  bool is_lisa() const { return kind == "lisa"; }
  std::size_t latent_size() const { return static_cast<std::size_t>(config.latent_channels) * 64; }
  /// Index of `d` in `domains`; throws DataError for an unknown domain.
  int domain_index(const DomainLabel& d) const;
};

/// Fresh parameters (Kaiming-uniform weights, zero biases, seeded by
/// config.seed) with identity standardization.
LisaModel init_lisa(const LisaConfig& config, std::size_t bands, std::vector<DomainLabel> domains);
LisaModel init_predictor(const LisaConfig& config, std::size_t bands);

/// Fits band and target standardization on `patches`.
void fit_standardization(LisaModel& model, std::span<const SpectralPatch> patches);

/// Latent maps [N, latent_channels, 8, 8] of standardized input [N, bands, 8, 8].
std::vector<float> encode_standardized(const LisaModel& model, std::span<const float> x, std::size_t n);
/// Standardizes the patches and encodes them.
std::vector<float> encode(const LisaModel& model, std::span<const SpectralPatch> patches);
/// Reconstruction [N, bands, 8, 8] in standardized units.
std::vector<float> decode(const LisaModel& model, std::span<const float> z, std::size_t n);

struct HeadOutputs {
  std::vector<double> brix;  // original units
  std::vector<double> acid;
  std::vector<std::array<float, 2>> grape_logits;
  std::vector<int> grape_class;  // argmax, 1 = grape, ties -> 0
};

/// Heads applied to flattened features ([N, latent_size] for lisa).
HeadOutputs predict_heads(const LisaModel& model, std::span<const float> features, std::size_t n);
HeadOutputs predict(const LisaModel& model, std::span<const SpectralPatch> patches);

/// Feature rows for invariance analysis: the flattened latent map (lisa) or
/// the flattened standardized patch; `pooled` averages over the 8x8 grid.
FeatureRows feature_rows(const LisaModel& model, std::span<const SpectralPatch> patches, bool pooled);
/// Standardized input rows with the same pooling convention.
FeatureRows input_rows(const LisaModel& model, std::span<const SpectralPatch> patches, bool pooled);

struct BunchQuality {
  bool empty = true;
  double brix_mean = 0;
  double acid_mean = 0;
  double grape_fraction = 0;
  std::size_t grape_patches = 0;
  std::size_t patches = 0;
};

/// Averages over patches whose grape head says grape.
BunchQuality predict_bunch_quality(const LisaModel& model, std::span<const SpectralPatch> patches);
/// Same aggregation rule for externally computed head outputs.
BunchQuality aggregate_bunch(const HeadOutputs& heads);

struct LossTerms {
  bool task = true;
  bool recon = true;
  bool manifold = true;
  bool domain = true;
};

/// Zeroes the gradients, runs one forward/backward pass of the weighted sum of
/// the selected terms over `batch` and leaves the gradients in model.params.
/// With `reverse_gradient` false the reversal layer is replaced by identity.
LossBreakdown accumulate_gradients(LisaModel& model, std::span<const SpectralPatch> batch,
                                   const LossTerms& terms = {}, bool reverse_gradient = true);

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;
  LossBreakdown loss;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;  // mean over the steps of the epoch
  const LisaModel* model = nullptr;
};

struct TrainOptions {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  LisaModel model;
  std::vector<LossBreakdown> epoch_log;  // mean over the steps of each epoch
};

/// Trains on SG-filtered patches. The autoencoder, heads ("ae" group, lr_ae)
/// and discriminator ("disc" group, lr_disc) are updated every step from one
/// combined backward pass. Throws DataError without quality labels or, when
/// gamma > 0, with fewer than two domains; NumericError naming the term on a
/// non-finite loss.
TrainResult train_lisa(const LisaConfig& config, std::span<const SpectralPatch> patches,
                       const TrainOptions& options = {});
/// Heads only, task loss only, a single "ae" group at lr_ae.
TrainResult train_predictor(const LisaConfig& config, std::span<const SpectralPatch> patches,
                            const TrainOptions& options = {});

/// Writes the epoch log as CSV `epoch,total,task,recon,manifold,domain`.
void write_epoch_log(std::span<const LossBreakdown> log, const std::filesystem::path& path);

Container to_container(const LisaModel& model);
nlohmann::json sidecar_json(const LisaModel& model);
LisaModel lisa_from_container(const Container& c, const nlohmann::json& sidecar);

/// `path` receives the container, `path` + ".json" the config sidecar.
void save_model(const LisaModel& model, const std::filesystem::path& path);
LisaModel load_model(const std::filesystem::path& path);

}  // namespace spectra_invar
