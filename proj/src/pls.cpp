#include "spectra_invar/pls.hpp"

#include <algorithm>
#include <cmath>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

Eigen::MatrixXd PlsModel::predict(const Eigen::MatrixXd& x) const {
  if (x.cols() != x_mean.size()) {
    throw ShapeError("PLS model expects " + std::to_string(x_mean.size()) + " features, got " +
                     std::to_string(x.cols()));
  }
  return ((x.rowwise() - x_mean.transpose()) * coef).rowwise() + y_mean.transpose();
}

PlsModel pls_fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const PlsSettings& s) {
  if (s.n_components < 1) throw ConfigError("PLS needs at least one component");
  if (s.max_iter < 1 || !(s.tol > 0)) throw ConfigError("PLS max_iter >= 1 and tol > 0 required");
  if (x.rows() != y.rows()) throw ShapeError("PLS: X and Y row counts differ");
  if (x.rows() < 2) throw DataError("PLS needs at least 2 samples");
  if (x.cols() < 1 || y.cols() < 1) throw ShapeError("PLS: empty feature or target matrix");
  if (!x.allFinite() || !y.allFinite()) throw DataError("PLS input contains NaN or Inf");

  PlsModel m;
  m.x_mean = x.colwise().mean();
  m.y_mean = y.colwise().mean();
  Eigen::MatrixXd e = x.rowwise() - m.x_mean.transpose();
  Eigen::MatrixXd f = y.rowwise() - m.y_mean.transpose();
  const double x_scale = e.norm();
  if (x_scale == 0.0) throw DataError("PLS: X has zero variance");

  const Eigen::Index k_max =
      std::min<Eigen::Index>({static_cast<Eigen::Index>(s.n_components), x.rows() - 1, x.cols()});
  std::vector<Eigen::VectorXd> ws, ps, qs;
  for (Eigen::Index a = 0; a < k_max; ++a) {
    if (e.norm() <= 1e-12 * x_scale) break;
    Eigen::Index start = 0;
    f.colwise().squaredNorm().maxCoeff(&start);
    Eigen::VectorXd u = f.col(start);
    if (u.squaredNorm() == 0.0) u = e.col(0);  // Y exhausted: any direction in X.
    Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols());
    Eigen::VectorXd t, q;
    for (int it = 0; it < s.max_iter; ++it) {
      Eigen::VectorXd w_new = e.transpose() * u;
      const double wn = w_new.norm();
      if (wn == 0.0) break;
      w_new /= wn;
      t = e * w_new;
      q = f.transpose() * t / t.squaredNorm();
      const double qq = q.squaredNorm();
      const bool done = (w_new - w).norm() < s.tol;
      w = w_new;
      if (done || qq == 0.0) break;
      u = f * q / qq;
    }
    if (w.squaredNorm() == 0.0) break;
    t = e * w;
    const double tt = t.squaredNorm();
    if (tt <= 0.0) break;
    q = f.transpose() * t / tt;
    const Eigen::VectorXd p = e.transpose() * t / tt;
    e -= t * p.transpose();
    f -= t * q.transpose();
    ws.push_back(w);
    ps.push_back(p);
    qs.push_back(q);
  }

  const auto k = static_cast<Eigen::Index>(ws.size());
  m.n_components = static_cast<int>(k);
  m.weights.resize(x.cols(), k);
  m.x_loadings.resize(x.cols(), k);
  m.y_loadings.resize(y.cols(), k);
  for (Eigen::Index a = 0; a < k; ++a) {
    m.weights.col(a) = ws[a];
    m.x_loadings.col(a) = ps[a];
    m.y_loadings.col(a) = qs[a];
  }
  const Eigen::MatrixXd ptw = m.x_loadings.transpose() * m.weights;
  m.coef = m.weights * ptw.fullPivLu().solve(m.y_loadings.transpose());
  return m;
}

Eigen::MatrixXd mean_spectra(std::span<const SpectralPatch> patches) {
  constexpr std::size_t P = SpectralPatch::kSize * SpectralPatch::kSize;
  if (patches.empty()) return {};
  const std::size_t bands = patches.front().bands;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(patches.size()), static_cast<Eigen::Index>(bands));
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const SpectralPatch& p = patches[i];
    if (p.bands != bands || p.data.size() != bands * P) throw ShapeError("patches differ in band count");
    for (std::size_t b = 0; b < bands; ++b) {
      double s = 0;
      for (std::size_t k = 0; k < P; ++k) s += p.data[b * P + k];
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) = s / P;
    }
  }
  return out;
}

PlsQualityModel::Prediction PlsQualityModel::predict(std::span<const SpectralPatch> patches) const {
  Prediction out;
  if (patches.empty()) return out;
  const Eigen::MatrixXd x = mean_spectra(patches);
  const Eigen::MatrixXd yq = quality.predict(x);
  const Eigen::MatrixXd yg = grape.predict(x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.brix.push_back(yq(i, 0));
    out.acid.push_back(yq(i, 1));
    out.grape_class.push_back(yg(i, 0) > 0.5 ? 1 : 0);
  }
  return out;
}

PlsQualityModel train_pls(std::span<const SpectralPatch> patches, const PlsSettings& settings) {
  std::vector<SpectralPatch> labelled, annotated;
  for (const SpectralPatch& p : patches) {
    if (p.has_quality()) labelled.push_back(p);
    if (p.annotated) annotated.push_back(p);
  }
  if (labelled.size() < 2) throw DataError("PLS needs at least 2 patches with brix and acid labels");
  const bool any_grape = std::any_of(annotated.begin(), annotated.end(), [](const auto& p) { return p.is_grape; });
  const bool any_other = std::any_of(annotated.begin(), annotated.end(), [](const auto& p) { return !p.is_grape; });
  if (!any_grape || !any_other) throw DataError("PLS-DA grape mask needs grape and non-grape patches");

  PlsQualityModel m;
  Eigen::MatrixXd yq(static_cast<Eigen::Index>(labelled.size()), 2);
  for (std::size_t i = 0; i < labelled.size(); ++i) {
    yq(static_cast<Eigen::Index>(i), 0) = *labelled[i].brix;
    yq(static_cast<Eigen::Index>(i), 1) = *labelled[i].acid;
  }
  m.quality = pls_fit(mean_spectra(labelled), yq, settings);
  Eigen::MatrixXd yg(static_cast<Eigen::Index>(annotated.size()), 1);
  for (std::size_t i = 0; i < annotated.size(); ++i) yg(static_cast<Eigen::Index>(i), 0) = annotated[i].is_grape ? 1.0 : 0.0;
  m.grape = pls_fit(mean_spectra(annotated), yg, settings);
  return m;
}

namespace {

void put(Container& c, const std::string& name, const Eigen::MatrixXd& m) {
  ContainerTensor t{name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, "f64", "buffer", {}};
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index col = 0; col < m.cols(); ++col) t.values.push_back(m(r, col));
  c.tensors.push_back(std::move(t));
}

Eigen::MatrixXd get(const Container& c, const std::string& name) {
  const ContainerTensor& t = c.tensor(name);
  if (t.shape.size() != 2) throw FormatError(FormatError::Kind::BadRecord, name + " is not a matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index col = 0; col < m.cols(); ++col) m(r, col) = t.values[static_cast<std::size_t>(r * m.cols() + col)];
  return m;
}

void put_model(Container& c, const std::string& prefix, const PlsModel& m) {
  put(c, prefix + ".x_mean", m.x_mean.transpose());
  put(c, prefix + ".y_mean", m.y_mean.transpose());
  put(c, prefix + ".weights", m.weights);
  put(c, prefix + ".x_loadings", m.x_loadings);
  put(c, prefix + ".y_loadings", m.y_loadings);
  put(c, prefix + ".coef", m.coef);
}

PlsModel get_model(const Container& c, const std::string& prefix) {
  PlsModel m;
  m.x_mean = get(c, prefix + ".x_mean").row(0).transpose();
  m.y_mean = get(c, prefix + ".y_mean").row(0).transpose();
  m.weights = get(c, prefix + ".weights");
  m.x_loadings = get(c, prefix + ".x_loadings");
  m.y_loadings = get(c, prefix + ".y_loadings");
  m.coef = get(c, prefix + ".coef");
  m.n_components = static_cast<int>(m.weights.cols());
  if (m.coef.rows() != m.x_mean.size() || m.coef.cols() != m.y_mean.size()) {
    throw FormatError(FormatError::Kind::BadRecord, "PLS coefficient shape does not match its means");
  }
  return m;
}

}  // namespace

Container to_container(const PlsQualityModel& m, std::uint64_t seed) {
  Container c;
  c.kind = "pls";
  c.seed = seed;
  c.meta = {{"n_components", {{"quality", m.quality.n_components}, {"grape", m.grape.n_components}}}};
  put_model(c, "quality", m.quality);
  put_model(c, "grape", m.grape);
  return c;
}

PlsQualityModel pls_from_container(const Container& c) {
  if (c.kind != "pls") throw FormatError(FormatError::Kind::BadHeader, "checkpoint kind '" + c.kind + "' is not pls");
  return {get_model(c, "quality"), get_model(c, "grape")};
}

}  // namespace spectra_invar
