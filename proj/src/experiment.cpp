#include "spectra_invar/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

namespace {

void require_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("experiment config: " + msg);
}

std::vector<DomainLabel> parse_domains(const std::vector<std::string>& names) {
  std::vector<DomainLabel> out;
  for (const auto& n : names) out.push_back(DomainLabel::parse(n));
  return out;
}

std::vector<std::string> domain_names(const std::vector<DomainLabel>& ds) {
  std::vector<std::string> out;
  for (const auto& d : ds) out.push_back(d.name());
  return out;
}

std::vector<SpectralPatch> filtered(const std::vector<SpectralPatch>& patches, const SgConfig& sg) {
  std::vector<SpectralPatch> out = patches;
  sg_filter_patches(out, sg);
  return out;
}

// R^2 over the labelled rows, absent with fewer than two of them or a
// constant target.
std::optional<double> labelled_r2(const std::vector<double>& y, const std::vector<double>& y_hat) {
  if (y.size() < 2) return std::nullopt;
  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); })) return std::nullopt;
  return r_squared(y, y_hat);
}

TargetScores score(const std::string& domain, std::span<const SpectralPatch> test, std::span<const double> brix,
                   std::span<const double> acid, std::span<const int> grape_class) {
  TargetScores t;
  t.domain = domain;
  t.samples = test.size();
  std::vector<double> yb, pb, ya, pa;
  std::vector<int> lg, pg;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const SpectralPatch& p = test[i];
    if (p.has_quality()) {
      yb.push_back(*p.brix);
      pb.push_back(brix[i]);
      ya.push_back(*p.acid);
      pa.push_back(acid[i]);
    }
    if (p.annotated) {
      lg.push_back(p.is_grape ? 1 : 0);
      pg.push_back(grape_class[i]);
    }
  }
  t.brix_r2 = labelled_r2(yb, pb);
  t.acid_r2 = labelled_r2(ya, pa);
  if (!lg.empty()) t.grape_oa = overall_accuracy(lg, pg);
  return t;
}

FeatureRows mean_spectrum_rows(std::span<const SpectralPatch> patches) {
  const Eigen::MatrixXd x = mean_spectra(patches);
  FeatureRows rows(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    rows[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < x.cols(); ++j) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = x(i, j);
  }
  return rows;
}

nlohmann::json pls_json(const PlsSettings& s) {
  return {{"n_components", s.n_components}, {"max_iter", s.max_iter}, {"tol", s.tol}};
}

nlohmann::json probe_json(const ProbeConfig& p) { return {{"l2", p.l2}, {"steps", p.steps}}; }

void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& who) {
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError(who + ": unknown key '" + key + "'");
}

}  // namespace

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::IntraDomain: return "IntraDomain";
    case Scenario::LabToField: return "LabToField";
    case Scenario::FieldToField: return "FieldToField";
    case Scenario::DomainGeneralization: return "DomainGeneralization";
  }
  return "";
}

Scenario parse_scenario(const std::string& name) {
  for (Scenario s : {Scenario::IntraDomain, Scenario::LabToField, Scenario::FieldToField,
                     Scenario::DomainGeneralization}) {
    std::string snake;
    for (char ch : scenario_name(s)) {
      if (std::isupper(static_cast<unsigned char>(ch)) && !snake.empty()) snake += '_';
      snake += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    if (name == scenario_name(s) || name == snake) return s;
  }
  throw ConfigError("unknown scenario '" + name + "'");
}

ScenarioDomains default_domains(Scenario s) {
  const auto lab = DomainLabel::lab(), am = DomainLabel::field_am(), pm = DomainLabel::field_pm();
  switch (s) {
    case Scenario::IntraDomain: return {{lab}, {lab}};
    case Scenario::LabToField: return {{lab}, {am, pm}};
    case Scenario::FieldToField: return {{am}, {pm}};
    case Scenario::DomainGeneralization: return {{lab, am}, {pm}};
  }
  return {};
}

ScenarioDomains ExperimentConfig::domains() const {
  ScenarioDomains d = default_domains(scenario);
  if (!source_domains.empty()) d.source = parse_domains(source_domains);
  if (!target_domains.empty()) d.target = parse_domains(target_domains);
  return d;
}

void ExperimentConfig::validate() const {
  ScenarioDomains d;
  try {
    d = domains();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  require_config(!d.source.empty() && !d.target.empty(), "source and target domain lists must not be empty");
  const std::set<DomainLabel> src(d.source.begin(), d.source.end());
  require_config(src.size() == d.source.size(), "source domains repeat");
  if (scenario != Scenario::IntraDomain) {
    for (const auto& t : d.target)
      require_config(!src.count(t), "domain '" + t.name() + "' is both source and target");
  }
  SynthConfig s = synth;
  s.resolve_defaults();
  if (!dataset) {
    s.validate();
    std::set<DomainLabel> known;
    for (const auto& spec : s.domains) known.insert(spec.label);
    for (const auto& l : d.source) require_config(known.count(l), "domain '" + l.name() + "' is not synthesized");
    for (const auto& l : d.target) require_config(known.count(l), "domain '" + l.name() + "' is not synthesized");
  }
  sg.validate();
  lisa.validate();
  predictor.validate();
  weight.validate();
  require_config(pls.n_components >= 1, "pls.n_components must be >= 1");
  require_config(probe.steps > 0 && probe.l2 >= 0, "probe steps must be positive and l2 non-negative");
  require_config(!output_dir.empty(), "output_dir must not be empty");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"scenario", scenario_name(c.scenario)},
          {"source_domains", c.source_domains},
          {"target_domains", c.target_domains},
          {"sg", c.sg},
          {"lisa", c.lisa},
          {"predictor", c.predictor},
          {"pls", pls_json(c.pls)},
          {"weight", c.weight},
          {"probe", probe_json(c.probe)},
          {"synth", to_json(c.synth)},
          {"dataset", c.dataset ? nlohmann::json(c.dataset->string()) : nlohmann::json(nullptr)},
          {"output_dir", c.output_dir.string()}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  reject_unknown(j, to_json(c), "experiment config");
  try {
    if (j.contains("scenario")) c.scenario = parse_scenario(j.at("scenario").get<std::string>());
    c.source_domains = j.value("source_domains", c.source_domains);
    c.target_domains = j.value("target_domains", c.target_domains);
    if (j.contains("sg")) c.sg = j.at("sg").get<SgConfig>();
    if (j.contains("lisa")) c.lisa = j.at("lisa").get<LisaConfig>();
    if (j.contains("predictor")) c.predictor = j.at("predictor").get<LisaConfig>();
    if (j.contains("weight")) c.weight = j.at("weight").get<WeightConfig>();
    if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
    if (j.contains("pls")) {
      const auto& p = j.at("pls");
      reject_unknown(p, pls_json(c.pls), "pls config");
      c.pls.n_components = p.value("n_components", c.pls.n_components);
      c.pls.max_iter = p.value("max_iter", c.pls.max_iter);
      c.pls.tol = p.value("tol", c.pls.tol);
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      reject_unknown(p, probe_json(c.probe), "probe config");
      c.probe.l2 = p.value("l2", c.probe.l2);
      c.probe.steps = p.value("steps", c.probe.steps);
    }
    if (j.contains("dataset") && !j.at("dataset").is_null()) c.dataset = j.at("dataset").get<std::string>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig read_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

Dataset load_or_make_dataset(const ExperimentConfig& c) {
  return c.dataset ? load_dataset(*c.dataset) : make_dataset(c.synth);
}

ScenarioData scenario_data(const Dataset& d, const ScenarioDomains& domains, const SgConfig& sg) {
  ScenarioData out;
  out.domains = domains;
  for (const auto& dp : d.domains) {
    out.all_domains.push_back(dp.label);
    out.all_train.push_back(filtered(dp.train, sg));
    out.all_test.push_back(filtered(dp.test, sg));
  }
  const auto index_of = [&](const DomainLabel& l) {
    const auto it = std::find(out.all_domains.begin(), out.all_domains.end(), l);
    if (it == out.all_domains.end()) throw DataError("domain '" + l.name() + "' is not in the dataset");
    return static_cast<std::size_t>(it - out.all_domains.begin());
  };
  for (const auto& l : domains.source) {
    const auto& tr = out.all_train[index_of(l)];
    out.train.insert(out.train.end(), tr.begin(), tr.end());
  }
  for (const auto& l : domains.target) out.target_test.push_back(out.all_test[index_of(l)]);
  return out;
}

Ablation parse_ablation(const std::string& name) {
  if (name == "domain") return Ablation::Domain;
  if (name == "manifold") return Ablation::Manifold;
  if (name == "recon") return Ablation::Recon;
  throw ConfigError("unknown ablation '" + name + "' (expected domain, manifold or recon)");
}

LisaConfig ablate(LisaConfig c, Ablation a) {
  switch (a) {
    case Ablation::None: break;
    case Ablation::Domain: c.gamma = 0; break;
    case Ablation::Manifold: c.beta = 0; break;
    case Ablation::Recon: c.alpha = 0; break;
  }
  return c;
}

TargetScores score_lisa(const LisaModel& m, const std::string& domain, std::span<const SpectralPatch> test) {
  const HeadOutputs h = predict(m, test);
  return score(domain, test, h.brix, h.acid, h.grape_class);
}

TargetScores score_pls(const PlsQualityModel& m, const std::string& domain, std::span<const SpectralPatch> test) {
  const PlsQualityModel::Prediction p = m.predict(test);
  return score(domain, test, p.brix, p.acid, p.grape_class);
}

double InvarianceStats::mean_mmd_input() const {
  double s = 0;
  for (const auto& m : mmd) s += m.input;
  return mmd.empty() ? 0.0 : s / static_cast<double>(mmd.size());
}

double InvarianceStats::mean_mmd_latent() const {
  double s = 0;
  for (const auto& m : mmd) s += m.latent.value_or(0.0);
  return mmd.empty() ? 0.0 : s / static_cast<double>(mmd.size());
}

InvarianceStats invariance_stats(const LisaModel& m, const ScenarioData& data, const ProbeConfig& probe) {
  if (!m.is_lisa()) throw DataError("invariance diagnostics need a lisa model");
  const std::size_t nd = data.all_domains.size();
  if (nd < 2) throw DataError("invariance diagnostics need at least two domains");
  std::vector<FeatureRows> in_test(nd), z_test(nd);
  FeatureRows in_train, z_train, in_eval, z_eval;
  std::vector<int> train_dom, eval_dom;
  for (std::size_t k = 0; k < nd; ++k) {
    FeatureRows a = mean_spectrum_rows(data.all_train[k]);
    FeatureRows b = feature_rows(m, data.all_train[k], false);
    train_dom.insert(train_dom.end(), a.size(), static_cast<int>(k));
    in_train.insert(in_train.end(), a.begin(), a.end());
    z_train.insert(z_train.end(), b.begin(), b.end());
    in_test[k] = mean_spectrum_rows(data.all_test[k]);
    z_test[k] = feature_rows(m, data.all_test[k], false);
    eval_dom.insert(eval_dom.end(), in_test[k].size(), static_cast<int>(k));
    in_eval.insert(in_eval.end(), in_test[k].begin(), in_test[k].end());
    z_eval.insert(z_eval.end(), z_test[k].begin(), z_test[k].end());
  }
  InvarianceStats s;
  s.probe_input = domain_probe(in_train, train_dom, in_eval, eval_dom, probe);
  s.probe_latent = domain_probe(z_train, train_dom, z_eval, eval_dom, probe);
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t b = a + 1; b < nd; ++b) {
      DomainPairMmd p;
      p.domain_a = data.all_domains[a].name();
      p.domain_b = data.all_domains[b].name();
      p.input = std::max(0.0, mmd2_unbiased(in_test[a], in_test[b]));
      p.latent = std::max(0.0, mmd2_unbiased(z_test[a], z_test[b]));
      s.mmd.push_back(p);
    }
  return s;
}

EvalReport evaluate_lisa(const LisaModel& m, Scenario s, const ScenarioData& data,
                         const std::optional<ProbeConfig>& probe) {
  EvalReport r;
  r.model = m.kind;
  r.scenario = scenario_name(s);
  r.train_domains = domain_names(data.domains.source);
  for (std::size_t k = 0; k < data.domains.target.size(); ++k)
    r.targets.push_back(score_lisa(m, data.domains.target[k].name(), data.target_test[k]));
  if (probe && m.is_lisa() && data.all_domains.size() >= 2) {
    InvarianceStats st = invariance_stats(m, data, *probe);
    r.mmd = std::move(st.mmd);
    r.probe_input = st.probe_input;
    r.probe_latent = st.probe_latent;
  }
  r.validate();
  return r;
}

EvalReport evaluate_pls(const PlsQualityModel& m, Scenario s, const ScenarioData& data) {
  EvalReport r;
  r.model = "pls";
  r.scenario = scenario_name(s);
  r.train_domains = domain_names(data.domains.source);
  for (std::size_t k = 0; k < data.domains.target.size(); ++k)
    r.targets.push_back(score_pls(m, data.domains.target[k].name(), data.target_test[k]));
  r.validate();
  return r;
}

std::vector<WeightSample> weight_samples(const Dataset& d, const SgConfig& sg, bool test) {
  if (d.weight_cubes.empty()) throw DataError("dataset has no weight cubes");
  const RenderedCube& rc = d.weight_cubes.front();
  if (rc.boxes.size() != d.bunches.size()) throw DataError("weight mosaic boxes do not match the bunches");
  std::vector<WeightSample> out;
  for (std::size_t i = 0; i < d.bunches.size(); ++i) {
    if (d.bunches[i].test != test) continue;
    WeightSample s = make_weight_sample(rc.cube, rc.boxes[i].box, sg);
    s.grams = d.bunches[i].weight_g;
    out.push_back(std::move(s));
  }
  return out;
}

EvalReport evaluate_weight(const WeightModel& m, const Dataset& d) {
  const std::vector<WeightSample> test = weight_samples(d, m.config.sg, true);
  std::vector<double> y;
  for (const auto& s : test) y.push_back(*s.grams);
  EvalReport r;
  r.model = "weight";
  r.scenario = "WeightHoldout";
  r.train_domains = d.config.weight_domains;
  TargetScores t;
  t.domain = d.weight_cubes.front().cube.domain.name();
  t.samples = test.size();
  t.weight_r2 = labelled_r2(y, predict_weight(m, test));
  r.targets.push_back(t);
  r.validate();
  return r;
}

}  // namespace spectra_invar
