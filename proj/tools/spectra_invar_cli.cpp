// spectra-invar: synth, train, eval and scan commands.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "spectra_invar/checkpoint.hpp"
#include "spectra_invar/error.hpp"
#include "spectra_invar/experiment.hpp"
#include "spectra_invar/pipeline.hpp"

namespace fs = std::filesystem;
using namespace spectra_invar;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
}

// SPECTRA_INVAR_THREADS caps the worker count of the linear algebra backend.
void apply_thread_cap() {
  const char* v = std::getenv("SPECTRA_INVAR_THREADS");
  if (!v || !*v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("SPECTRA_INVAR_THREADS must be a positive integer, got '" + std::string(v) + "'");
  Eigen::setNbThreads(static_cast<int>(n));
}

ExperimentConfig experiment_config(const std::string& path) {
  return path.empty() ? experiment_config_from_json(nlohmann::json::object()) : read_experiment_config(path);
}

// synth accepts a bare synth config or an experiment config with a "synth" key.
SynthConfig synth_config(const fs::path& path) {
  const nlohmann::json j = read_json(path);
  if (j.is_object() && j.contains("synth")) return experiment_config_from_json(j).synth;
  SynthConfig c = synth_config_from_json(j);
  c.resolve_defaults();
  c.validate();
  return c;
}

int cmd_synth(const std::string& config, const fs::path& out) {
  const SynthConfig c = config.empty() ? SynthConfig{} : synth_config(config);
  SynthConfig checked = c;
  checked.resolve_defaults();
  checked.validate();
  const Dataset d = make_dataset(c);
  write_dataset(d, out);
  std::cout << "wrote " << d.bunches.size() << " bunches over " << d.domains.size() << " domains to " << out.string()
            << '\n';
  return kOk;
}

int cmd_train(const std::string& model, const std::string& config, const std::string& ablation,
              const std::string& out_override) {
  ExperimentConfig c = experiment_config(config);
  if (!out_override.empty()) c.output_dir = out_override;
  const Ablation ab = ablation.empty() ? Ablation::None : parse_ablation(ablation);
  if (ab != Ablation::None && model != "lisa") throw ConfigError("--ablate applies to --model lisa only");
  const Dataset d = load_or_make_dataset(c);
  fs::create_directories(c.output_dir);
  write_json(to_json(c), c.output_dir / "config.json");

  const fs::path ckpt = c.output_dir / (model + ".ckpt");
  if (model == "weight") {
    const auto samples = weight_samples(d, c.weight.sg, false);
    std::ofstream log(c.output_dir / "epoch_log.csv");
    log << "epoch,mse\n";
    const WeightTrainResult r = train_weight(c.weight, samples, [&](int e, double mse) { log << e << ',' << mse << '\n'; });
    save_weight_model(r.model, ckpt);
  } else {
    const ScenarioData data = scenario_data(d, c.domains(), c.sg);
    if (model == "pls") {
      write_container(to_container(train_pls(data.train, c.pls)), ckpt);
    } else if (model == "lisa" || model == "predictor") {
      const TrainResult r = model == "lisa" ? train_lisa(ablate(c.lisa, ab), data.train)
                                            : train_predictor(c.predictor, data.train);
      write_epoch_log(r.epoch_log, c.output_dir / "epoch_log.csv");
      save_model(r.model, ckpt);
    } else {
      throw ConfigError("unknown model '" + model + "'");
    }
  }
  std::cout << "wrote " << ckpt.string() << '\n';
  return kOk;
}

int cmd_eval(const std::string& scenario, const fs::path& checkpoint, const std::string& config,
             const std::string& out) {
  require_file(checkpoint, "checkpoint");
  ExperimentConfig c = experiment_config(config);
  if (!scenario.empty()) {
    c.scenario = parse_scenario(scenario);
    c.validate();
  }
  const Container ctr = read_container(checkpoint);
  const Dataset d = load_or_make_dataset(c);
  EvalReport report;
  if (ctr.kind == "weight") {
    report = evaluate_weight(weight_from_container(ctr), d);
  } else {
    const ScenarioData data = scenario_data(d, c.domains(), c.sg);
    if (ctr.kind == "pls") {
      report = evaluate_pls(pls_from_container(ctr), c.scenario, data);
    } else {
      report = evaluate_lisa(load_model(checkpoint), c.scenario, data, c.probe);
    }
  }
  const nlohmann::json j = to_json(report);
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json(j, out);
  }
  return kOk;
}

int cmd_scan(const fs::path& cube_path, const fs::path& dets_path, const fs::path& lisa_path,
             const fs::path& weight_path, const fs::path& out, const std::string& config, const std::string& gt) {
  require_file(cube_path, "cube");
  require_file(dets_path, "detections");
  require_file(lisa_path, "lisa checkpoint");
  require_file(weight_path, "weight checkpoint");
  if (!gt.empty()) require_file(gt, "ground truth");
  const PipelineConfig pc = config.empty() ? PipelineConfig{} : read_json(config).get<PipelineConfig>();
  pc.validate();

  const HsiCube cube = read_cube(cube_path);
  const WindowDetections dets = read_detections_jsonl(dets_path);
  const LisaModel lisa = load_model(lisa_path);
  const WeightModel weight = load_weight_model(weight_path);
  const ScanResult r = process_scan(cube, dets, pc, quality_from(lisa), weight_from(weight));
  write_records(r.records, out);

  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : r.log) log.push_back({{"track_id", e.track_id}, {"message", e.message}});
  write_json(log, out / "scan_log.json");

  if (!gt.empty()) {
    std::vector<ScoredBox> preds;
    const std::string id = cube.id();
    for (const Window& w : slide_windows(cube.lines, pc.window_lines, pc.overlap)) {
      const auto it = dets.find(w.offset);
      if (it == dets.end()) continue;
      for (const Detection& det : it->second) preds.push_back({id, to_cube_box(det, w, cube.samples), det.score});
    }
    std::vector<GroundTruthBox> truth;
    for (auto& g : read_ground_truth_jsonl(gt))
      if (g.image_id == id) truth.push_back(std::move(g));
    EvalReport report;
    report.model = "detections";
    report.scenario = "scan";
    report.detection = detection_eval(truth, preds);
    report.validate();
    write_json(to_json(report), out / "report.json");
  }
  std::cout << r.records.size() << " records, " << r.log.size() << " log entries, " << r.tracks.size()
            << " tracks\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-invariant grape quality from hyperspectral scans"};
  app.require_subcommand(1);

  std::string synth_cfg, synth_out;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic multi-domain dataset");
  synth->add_option("--config", synth_cfg, "Synth config JSON, or an experiment config with a \"synth\" key");
  synth->add_option("--out", synth_out, "Output directory")->required();

  std::string train_model, train_cfg, train_ablate, train_out;
  CLI::App* train = app.add_subcommand("train", "Train a model for the configured scenario");
  train->add_option("--model", train_model, "Model to train")
      ->required()
      ->check(CLI::IsMember({"lisa", "predictor", "pls", "weight"}));
  train->add_option("--config", train_cfg, "Experiment config JSON (defaults when omitted)");
  train->add_option("--ablate", train_ablate, "Zero one LISA loss weight")
      ->check(CLI::IsMember({"domain", "manifold", "recon"}));
  train->add_option("--out", train_out, "Output directory, overriding output_dir of the config");

  std::string eval_scenario, eval_ckpt, eval_cfg, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint on the scenario's held-out domains");
  eval->add_option("--scenario", eval_scenario,
                   "IntraDomain, LabToField, FieldToField or DomainGeneralization (default: from config)");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint written by train")->required();
  eval->add_option("--config", eval_cfg, "Experiment config JSON naming the data");
  eval->add_option("--out", eval_out, "Report path (default: stdout)");

  std::string scan_cube, scan_dets, scan_lisa, scan_weight, scan_out, scan_cfg, scan_gt;
  CLI::App* scan = app.add_subcommand("scan", "Run the scan pipeline over a cube and its detections");
  scan->add_option("--cube", scan_cube, "Cube file")->required();
  scan->add_option("--detections", scan_dets, "Window detections JSONL")->required();
  scan->add_option("--lisa", scan_lisa, "LISA checkpoint")->required();
  scan->add_option("--weight", scan_weight, "Weight checkpoint")->required();
  scan->add_option("--out", scan_out, "Output directory")->required();
  scan->add_option("--config", scan_cfg, "Pipeline config JSON");
  scan->add_option("--report", scan_gt, "Ground-truth JSONL; adds detection metrics in report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    apply_thread_cap();
    if (*synth) return cmd_synth(synth_cfg, synth_out);
    if (*train) return cmd_train(train_model, train_cfg, train_ablate, train_out);
    if (*eval) return cmd_eval(eval_scenario, eval_ckpt, eval_cfg, eval_out);
    if (*scan) return cmd_scan(scan_cube, scan_dets, scan_lisa, scan_weight, scan_out, scan_cfg, scan_gt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
