#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace spectra_invar {

using FeatureRows = std::vector<std::vector<double>>;

/// 1 - SS_res / SS_tot. Throws DataError when y has zero variance or fewer
/// than two elements.
double r_squared(std::span<const double> y, std::span<const double> y_hat);

double overall_accuracy(std::span<const int> labels, std::span<const int> predictions);

/// Median pairwise Euclidean distance over the pooled rows of a and b
/// (1.0 if that median is zero).
double median_heuristic_bandwidth(const FeatureRows& a, const FeatureRows& b);

/// Unbiased squared MMD with the Gaussian kernel exp(-d^2 / (2 s^2)).
/// For |a| == |b| this is the paired U-statistic, which is exactly 0 for
/// identical ordered samples; otherwise the three-block estimator. Sums are
/// order-canonical, so mmd2_unbiased(a, b) == mmd2_unbiased(b, a) bit for bit.
double mmd2_unbiased(const FeatureRows& a, const FeatureRows& b,
                     std::optional<double> bandwidth = std::nullopt);
/// Biased (V-statistic) estimator; never negative.
double mmd2_biased(const FeatureRows& a, const FeatureRows& b,
                   std::optional<double> bandwidth = std::nullopt);

struct ProbeConfig {
  double l2 = 1e-3;
  int steps = 500;
};

/// Accuracy on the test rows of an L2-regularized multinomial logistic
/// classifier trained with full-batch gradient descent to predict the domain
/// index. Features are standardized with training statistics.
double domain_probe(const FeatureRows& train, std::span<const int> train_domains,
                    const FeatureRows& test, std::span<const int> test_domains,
                    const ProbeConfig& cfg = {});

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  /// Throws ShapeError unless x1 > x0 and y1 > y0.
  void validate() const;
  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

struct GroundTruthBox {
  std::string image_id;
  Box box;
};

struct ScoredBox {
  std::string image_id;
  Box box;
  double score = 0;
};

struct DetectionMetrics {
  double recall = 0;     // at IoU 0.5
  double map_50_95 = 0;  // mean AP over IoU 0.50, 0.55, ..., 0.95
  std::array<double, 10> ap{};
  std::size_t num_ground_truth = 0;
};

/// Single-class, COCO-style evaluation: greedy score-ordered matching (equal
/// scores keep input order) and 101-point interpolated AP.
DetectionMetrics detection_eval(std::span<const GroundTruthBox> ground_truth,
                                std::span<const ScoredBox> predictions);

std::vector<ScoredBox> read_scored_boxes_jsonl(const std::filesystem::path& path);
std::vector<GroundTruthBox> read_ground_truth_jsonl(const std::filesystem::path& path);

struct TargetScores {
  std::string domain;
  std::size_t samples = 0;
  std::optional<double> brix_r2;
  std::optional<double> acid_r2;
  std::optional<double> grape_oa;
  std::optional<double> weight_r2;
};

struct DomainPairMmd {
  std::string domain_a;
  std::string domain_b;
  double input = 0;
  std::optional<double> latent;
};

struct EvalReport {
  std::string model;
  std::string scenario;
  std::vector<std::string> train_domains;
  std::vector<TargetScores> targets;
  std::vector<DomainPairMmd> mmd;
  std::optional<double> probe_input;
  std::optional<double> probe_latent;
  std::optional<DetectionMetrics> detection;

  /// Throws DataError if a metric is outside its range (R^2 <= 1, OA and
  /// mAP in [0,1]).
  void validate() const;
};

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const DetectionMetrics& d);

}  // namespace spectra_invar
