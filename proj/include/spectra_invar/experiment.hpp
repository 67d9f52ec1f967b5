#pragma once

// Evaluation scenarios over a synthetic (or loaded) dataset: which domains
// train and which are held out, model training per scenario, EvalReports and
// latent invariance diagnostics.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/lisa.hpp"
#include "spectra_invar/metrics.hpp"
#include "spectra_invar/pls.hpp"
#include "spectra_invar/savgol.hpp"
#include "spectra_invar/synth.hpp"
#include "spectra_invar/weight.hpp"

namespace spectra_invar {

enum class Scenario { IntraDomain, LabToField, FieldToField, DomainGeneralization };

std::string scenario_name(Scenario s);
/// Accepts the enum spelling ("DomainGeneralization") or snake case
/// ("domain_generalization"); throws ConfigError otherwise.
Scenario parse_scenario(const std::string& name);

struct ScenarioDomains {
  std::vector<DomainLabel> source;
  std::vector<DomainLabel> target;
};

/// IntraDomain lab -> lab, LabToField lab -> field_am + field_pm,
/// FieldToField field_am -> field_pm, DomainGeneralization lab + field_am ->
/// field_pm.
ScenarioDomains default_domains(Scenario s);

struct ExperimentConfig {
  Scenario scenario = Scenario::DomainGeneralization;
  // Override the scenario's default domain lists when non-empty.
  std::vector<std::string> source_domains;
  std::vector<std::string> target_domains;
  SgConfig sg;
  LisaConfig lisa;
  LisaConfig predictor;
  PlsSettings pls;
  WeightConfig weight;
  ProbeConfig probe;
  SynthConfig synth;
  // Synth output directory to load instead of generating from `synth`.
  std::optional<std::filesystem::path> dataset;
  std::filesystem::path output_dir = "runs/experiment";

  ScenarioDomains domains() const;
  /// Throws ConfigError for unknown domains, empty lists, overlapping source
  /// and target outside IntraDomain or invalid nested configs.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// Reads and validates a JSON config file.
ExperimentConfig read_experiment_config(const std::filesystem::path& path);

/// Generated from `synth`, or loaded when `dataset` is set.
Dataset load_or_make_dataset(const ExperimentConfig& c);

/// SG-filtered patches for one scenario. Training uses the train split of the
/// source domains; every reported number uses test splits, which never share
/// a bunch with training.
struct ScenarioData {
  ScenarioDomains domains;
  std::vector<SpectralPatch> train;
  std::vector<std::vector<SpectralPatch>> target_test;  // one per target domain
  // Every domain of the dataset, for the invariance diagnostics.
  std::vector<DomainLabel> all_domains;
  std::vector<std::vector<SpectralPatch>> all_train;
  std::vector<std::vector<SpectralPatch>> all_test;
};

ScenarioData scenario_data(const Dataset& d, const ScenarioDomains& domains, const SgConfig& sg);

enum class Ablation { None, Domain, Manifold, Recon };

/// Throws ConfigError for anything but "domain", "manifold" or "recon".
Ablation parse_ablation(const std::string& name);
/// Copy of the config with the named loss weight set to zero.
LisaConfig ablate(LisaConfig c, Ablation a);

TargetScores score_lisa(const LisaModel& m, const std::string& domain, std::span<const SpectralPatch> test);
TargetScores score_pls(const PlsQualityModel& m, const std::string& domain, std::span<const SpectralPatch> test);

/// Input space: SG-filtered mean spectra. Latent space: the flattened latent
/// map fed to the heads. The probe is fitted on the train splits of every
/// domain and scored on the test splits; MMD (unbiased, median-heuristic
/// bandwidth per space, clamped at 0) compares test splits pairwise.
struct InvarianceStats {
  std::vector<DomainPairMmd> mmd;
  double probe_input = 0;
  double probe_latent = 0;
  double mean_mmd_input() const;
  double mean_mmd_latent() const;
};

InvarianceStats invariance_stats(const LisaModel& m, const ScenarioData& data, const ProbeConfig& probe);

EvalReport evaluate_lisa(const LisaModel& m, Scenario s, const ScenarioData& data,
                         const std::optional<ProbeConfig>& probe);
EvalReport evaluate_pls(const PlsQualityModel& m, Scenario s, const ScenarioData& data);

/// Samples from the weight mosaic of the dataset's first weight domain; the
/// test flag selects the held-out bunches.
std::vector<WeightSample> weight_samples(const Dataset& d, const SgConfig& sg, bool test);
/// Held-out weight R^2 in a report with a single "weight" target.
EvalReport evaluate_weight(const WeightModel& m, const Dataset& d);

}  // namespace spectra_invar
