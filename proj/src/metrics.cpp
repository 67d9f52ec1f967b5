#include "spectra_invar/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

double r_squared(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw ShapeError("r_squared: " + std::to_string(y.size()) + " targets vs " +
                     std::to_string(y_hat.size()) + " predictions");
  }
  if (y.size() < 2) throw DataError("r_squared needs at least 2 samples");
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double ss_tot = 0, ss_res = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_tot += (y[i] - mean) * (y[i] - mean);
    ss_res += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  }
  if (ss_tot == 0) throw DataError("r_squared is undefined for a target with zero variance");
  return 1.0 - ss_res / ss_tot;
}

double overall_accuracy(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.size() != predictions.size()) throw ShapeError("overall_accuracy: length mismatch");
  if (labels.empty()) throw DataError("overall_accuracy of an empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == predictions[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace {

std::size_t check_rows(const FeatureRows& a, const FeatureRows& b, const char* what) {
  if (a.size() < 2 || b.size() < 2) {
    throw DataError(std::string(what) + " needs at least 2 rows per set, got " +
                    std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const std::size_t d = a.front().size();
  for (const FeatureRows* s : {&a, &b})
    for (const auto& row : *s)
      if (row.size() != d) throw ShapeError(std::string(what) + ": ragged feature rows");
  return d;
}

double sq_dist(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = x[k] - y[k];
    s += d * d;
  }
  return s;
}

// Summing in sorted order makes the result independent of enumeration order.
double canonical_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0;
  for (double t : terms) s += t;
  return s;
}

struct Kernel {
  double inv_two_s2;
  double operator()(const std::vector<double>& x, const std::vector<double>& y) const {
    return std::exp(-sq_dist(x, y) * inv_two_s2);
  }
};

Kernel make_kernel(const FeatureRows& a, const FeatureRows& b, std::optional<double> bandwidth) {
  const double s = bandwidth ? *bandwidth : median_heuristic_bandwidth(a, b);
  if (!(s > 0) || !std::isfinite(s)) throw ConfigError("MMD bandwidth must be positive and finite");
  return {1.0 / (2.0 * s * s)};
}

double within_sum(const FeatureRows& x, const Kernel& k, bool include_diagonal) {
  std::vector<double> t;
  t.reserve(x.size() * x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      if (include_diagonal || i != j) t.push_back(k(x[i], x[j]));
  return canonical_sum(t);
}

double cross_sum(const FeatureRows& a, const FeatureRows& b, const Kernel& k) {
  std::vector<double> t;
  t.reserve(a.size() * b.size());
  for (const auto& x : a)
    for (const auto& y : b) t.push_back(k(x, y));
  return canonical_sum(t);
}

}  // namespace

double median_heuristic_bandwidth(const FeatureRows& a, const FeatureRows& b) {
  check_rows(a, b, "median_heuristic_bandwidth");
  std::vector<const std::vector<double>*> pooled;
  for (const auto& r : a) pooled.push_back(&r);
  for (const auto& r : b) pooled.push_back(&r);
  std::vector<double> d;
  d.reserve(pooled.size() * (pooled.size() - 1) / 2);
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) d.push_back(std::sqrt(sq_dist(*pooled[i], *pooled[j])));
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  const double med = n % 2 == 1 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
  return med > 0 ? med : 1.0;
}

double mmd2_unbiased(const FeatureRows& a, const FeatureRows& b, std::optional<double> bandwidth) {
  check_rows(a, b, "mmd2");
  const Kernel k = make_kernel(a, b, bandwidth);
  if (a.size() == b.size()) {
    const std::size_t m = a.size();
    std::vector<double> h;
    h.reserve(m * (m - 1));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        h.push_back((k(a[i], a[j]) + k(b[i], b[j])) - (k(a[i], b[j]) + k(a[j], b[i])));
      }
    }
    return canonical_sum(h) / static_cast<double>(m * (m - 1));
  }
  const double m = static_cast<double>(a.size()), n = static_cast<double>(b.size());
  const double xx = within_sum(a, k, false) / (m * (m - 1));
  const double yy = within_sum(b, k, false) / (n * (n - 1));
  const double xy = cross_sum(a, b, k) / (m * n);
  return (xx + yy) - 2.0 * xy;
}

double mmd2_biased(const FeatureRows& a, const FeatureRows& b, std::optional<double> bandwidth) {
  check_rows(a, b, "mmd2");
  const Kernel k = make_kernel(a, b, bandwidth);
  const double m = static_cast<double>(a.size()), n = static_cast<double>(b.size());
  const double v = (within_sum(a, k, true) / (m * m) + within_sum(b, k, true) / (n * n)) -
                   2.0 * cross_sum(a, b, k) / (m * n);
  return std::max(0.0, v);
}

double domain_probe(const FeatureRows& train, std::span<const int> train_domains,
                    const FeatureRows& test, std::span<const int> test_domains,
                    const ProbeConfig& cfg) {
  if (train.size() != train_domains.size() || test.size() != test_domains.size()) {
    throw ShapeError("domain_probe: features and domain labels differ in length");
  }
  if (train.empty() || test.empty()) throw DataError("domain_probe needs train and test rows");
  const std::set<int> classes(train_domains.begin(), train_domains.end());
  if (classes.size() < 2) throw DataError("domain_probe needs at least 2 domains in the training set");
  if (*classes.begin() < 0) throw DataError("domain indices must be non-negative");
  if (cfg.steps < 1 || cfg.l2 < 0) throw ConfigError("domain_probe: steps >= 1 and l2 >= 0 required");

  const std::size_t d = train.front().size();
  const auto to_matrix = [d](const FeatureRows& rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != d) throw ShapeError("domain_probe: ragged feature rows");
      for (std::size_t j = 0; j < d; ++j) m(i, j) = rows[i][j];
    }
    return m;
  };
  Eigen::MatrixXd x = to_matrix(train);
  Eigen::MatrixXd xt = to_matrix(test);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::RowVectorXd sd = ((x.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (sd(j) < 1e-12) sd(j) = 1.0;
  x = (x.rowwise() - mean).array().rowwise() / sd.array();
  xt = (xt.rowwise() - mean).array().rowwise() / sd.array();

  // Class index k maps to the k-th smallest training domain id.
  const std::vector<int> cls(classes.begin(), classes.end());
  const Eigen::Index n = x.rows(), c = static_cast<Eigen::Index>(cls.size());
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto it = std::lower_bound(cls.begin(), cls.end(), train_domains[i]);
    y(i, it - cls.begin()) = 1.0;
  }

  // The softmax loss Hessian is bounded by 0.5 * [X 1]'[X 1] / n; its top
  // eigenvalue comes from a fixed-start power iteration.
  Eigen::MatrixXd xa(n, x.cols() + 1);
  xa << x, Eigen::VectorXd::Ones(n);
  Eigen::VectorXd v = Eigen::VectorXd::Ones(xa.cols()).normalized();
  double top = 0;
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd av = xa.transpose() * (xa * v) / static_cast<double>(n);
    top = av.norm();
    if (top == 0) break;
    v = av / top;
  }
  const double lr = 1.0 / std::max(0.5 * top * 1.05 + cfg.l2, 1e-12);

  // Nesterov-accelerated full-batch gradient descent; the bias row (last) is
  // not regularized.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(xa.cols(), c);
  Eigen::MatrixXd w_prev = w;
  Eigen::MatrixXd reg = Eigen::MatrixXd::Constant(xa.cols(), c, cfg.l2);
  reg.row(xa.cols() - 1).setZero();
  for (int step = 0; step < cfg.steps; ++step) {
    const double mom = static_cast<double>(step) / (step + 3.0);
    const Eigen::MatrixXd look = w + mom * (w - w_prev);
    const Eigen::MatrixXd logits = xa * look;
    const Eigen::VectorXd mx = logits.rowwise().maxCoeff();
    Eigen::MatrixXd p = (logits.colwise() - mx).array().exp();
    p.array().colwise() /= p.rowwise().sum().array();
    const Eigen::MatrixXd g = xa.transpose() * (p - y) / static_cast<double>(n) + reg.cwiseProduct(look);
    w_prev = w;
    w = look - lr * g;
  }
  const Eigen::RowVectorXd bias = w.row(xa.cols() - 1);
  w.conservativeResize(x.cols(), c);

  const Eigen::MatrixXd scores = (xt * w).rowwise() + bias;
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    hit += cls[static_cast<std::size_t>(best)] == test_domains[i];
  }
  return static_cast<double>(hit) / static_cast<double>(scores.rows());
}

void Box::validate() const {
  if (!(x1 > x0) || !(y1 > y0) || !std::isfinite(x0) || !std::isfinite(y0) || !std::isfinite(x1) ||
      !std::isfinite(y1)) {
    throw ShapeError("malformed box [" + std::to_string(x0) + "," + std::to_string(y0) + "," +
                     std::to_string(x1) + "," + std::to_string(y1) + "]");
  }
}

double iou(const Box& a, const Box& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0 || h <= 0) return 0.0;
  const double inter = w * h;
  return inter / (a.area() + b.area() - inter);
}

DetectionMetrics detection_eval(std::span<const GroundTruthBox> ground_truth,
                                std::span<const ScoredBox> predictions) {
  for (const auto& g : ground_truth) g.box.validate();
  for (const auto& p : predictions) {
    p.box.validate();
    if (!std::isfinite(p.score)) throw DataError("prediction score must be finite");
  }
  std::vector<std::size_t> order(predictions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return predictions[i].score > predictions[j].score; });

  DetectionMetrics out;
  out.num_ground_truth = ground_truth.size();
  if (ground_truth.empty()) return out;
  const double n_gt = static_cast<double>(ground_truth.size());

  for (int t = 0; t < 10; ++t) {
    const double tau = (50.0 + 5.0 * t) / 100.0;
    std::vector<bool> used(ground_truth.size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const ScoredBox& p = predictions[order[r]];
      double best = -1;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < ground_truth.size(); ++g) {
        if (used[g] || ground_truth[g].image_id != p.image_id) continue;
        const double v = iou(p.box, ground_truth[g].box);
        if (v >= tau && v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best >= 0) {
        used[best_g] = true;
        ++tp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
      recall.push_back(static_cast<double>(tp) / n_gt);
    }
    if (t == 0) out.recall = recall.empty() ? 0.0 : recall.back();
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0;
    for (int k = 0; k <= 100; ++k) {
      const double r = k / 100.0;
      const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
      if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    out.ap[t] = ap / 101.0;
  }
  out.map_50_95 = std::accumulate(out.ap.begin(), out.ap.end(), 0.0) / 10.0;
  return out;
}

namespace {

std::string id_string(const nlohmann::json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer()) return std::to_string(j.get<long long>());
  throw FormatError(FormatError::Kind::BadRecord, "image_id must be a string or integer");
}

Box box_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw FormatError(FormatError::Kind::BadRecord, "bbox must be [x0,y0,x1,y1]");
  }
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  b.validate();
  return b;
}

template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      f(j);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatError::Kind::BadRecord,
                        path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<ScoredBox> read_scored_boxes_jsonl(const std::filesystem::path& path) {
  std::vector<ScoredBox> out;
  for_each_jsonl(path, [&](const nlohmann::json& j) {
    out.push_back({id_string(j.at("image_id")), box_from(j.at("bbox")), j.value("score", 1.0)});
  });
  return out;
}

std::vector<GroundTruthBox> read_ground_truth_jsonl(const std::filesystem::path& path) {
  std::vector<GroundTruthBox> out;
  for_each_jsonl(path, [&](const nlohmann::json& j) {
    out.push_back({id_string(j.at("image_id")), box_from(j.at("bbox"))});
  });
  return out;
}

void EvalReport::validate() const {
  const auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (const auto& t : targets) {
    for (const auto& r2 : {t.brix_r2, t.acid_r2, t.weight_r2})
      if (r2 && !(*r2 <= 1.0)) throw DataError("R^2 above 1 in report for " + t.domain);
    if (t.grape_oa && !in01(*t.grape_oa)) throw DataError("OA outside [0,1] for " + t.domain);
  }
  for (const auto& m : mmd) {
    if (!(m.input >= 0) || (m.latent && !(*m.latent >= 0))) throw DataError("negative MMD in report");
  }
  for (const auto& p : {probe_input, probe_latent})
    if (p && !in01(*p)) throw DataError("probe accuracy outside [0,1]");
  if (detection && !(in01(detection->map_50_95) && in01(detection->recall))) {
    throw DataError("detection metrics outside [0,1]");
  }
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json to_json(const DetectionMetrics& d) {
  return {{"recall", d.recall},
          {"mAP_50_95", d.map_50_95},
          {"ap_per_threshold", d.ap},
          {"num_ground_truth", d.num_ground_truth}};
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : r.targets) {
    targets.push_back({{"domain", t.domain},
                       {"samples", t.samples},
                       {"brix_r2", opt(t.brix_r2)},
                       {"acid_r2", opt(t.acid_r2)},
                       {"grape_oa", opt(t.grape_oa)},
                       {"weight_r2", opt(t.weight_r2)}});
  }
  nlohmann::json mmd = nlohmann::json::array();
  for (const auto& m : r.mmd) {
    mmd.push_back({{"domain_a", m.domain_a}, {"domain_b", m.domain_b}, {"input", m.input}, {"latent", opt(m.latent)}});
  }
  return {{"model", r.model},
          {"scenario", r.scenario},
          {"train_domains", r.train_domains},
          {"targets", targets},
          {"mmd", mmd},
          {"probe", {{"input", opt(r.probe_input)}, {"latent", opt(r.probe_latent)}}},
          {"detection", r.detection ? to_json(*r.detection) : nlohmann::json(nullptr)}};
}

}  // namespace spectra_invar
