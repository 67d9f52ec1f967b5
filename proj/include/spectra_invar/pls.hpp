#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "spectra_invar/checkpoint.hpp"
#include "spectra_invar/hsi.hpp"

namespace spectra_invar {

struct PlsSettings {
  int n_components = 10;
  int max_iter = 500;
  double tol = 1e-8;
};

/// PLS2 regression fitted with NIPALS. Predictions are (x - x_mean) * coef + y_mean.
struct PlsModel {
  int n_components = 0;
  Eigen::VectorXd x_mean;
  Eigen::VectorXd y_mean;
  Eigen::MatrixXd weights;     // features x k
  Eigen::MatrixXd x_loadings;  // features x k
  Eigen::MatrixXd y_loadings;  // targets x k
  Eigen::MatrixXd coef;        // features x targets

  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const;
};

/// Throws DataError for fewer than 2 rows, non-finite values or an X with no
/// variance, ConfigError for n_components < 1. The component count is clamped
/// to min(N - 1, features) and stops early once X is fully deflated.
PlsModel pls_fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const PlsSettings& settings = {});

/// Mean spectrum over the 64 pixels of each patch, one row per patch.
Eigen::MatrixXd mean_spectra(std::span<const SpectralPatch> patches);

/// Chemometric baseline on mean spectra: a PLS2 model for (brix, acid) fitted
/// on quality-labelled patches and a PLS-DA model for the grape mask.
struct PlsQualityModel {
  PlsModel quality;
  PlsModel grape;

  struct Prediction {
    std::vector<double> brix;
    std::vector<double> acid;
    std::vector<int> grape_class;  // 1 = grape
  };
  Prediction predict(std::span<const SpectralPatch> patches) const;
};

/// Needs at least two quality-labelled patches and both grape classes among
/// the annotated ones.
PlsQualityModel train_pls(std::span<const SpectralPatch> patches, const PlsSettings& settings = {});

Container to_container(const PlsQualityModel& m, std::uint64_t seed = 0);
PlsQualityModel pls_from_container(const Container& c);

}  // namespace spectra_invar
