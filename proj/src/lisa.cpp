#include "spectra_invar/lisa.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

namespace {

constexpr std::size_t kPix = SpectralPatch::kSize * SpectralPatch::kSize;
constexpr std::size_t kInferChunk = 256;

void require_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("lisa config: " + msg);
}

// Binds parameters as gradient leaves when a mutable store is given, as
// constants otherwise.
class Net {
 public:
  Net(const LisaModel& model, ParamStore<float>* trainable) : m_(model), store_(trainable) {}

  Graph<float>& g() { return g_; }

  Var param(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    Var v;
    if (store_) {
      v = g_.input(store_->at(name));
    } else {
      const DiffTensor<float>& t = m_.params.at(name);
      v = g_.constant(t.shape, t.values);
    }
    bound_.emplace(name, v);
    return v;
  }

  Var conv(Var x, const std::string& name) {
    const int pad = m_.config.kernel / 2;
    return g_.conv2d(x, param(name + ".weight"), param(name + ".bias"), 1, pad);
  }

  Var fc(Var x, const std::string& name) { return g_.linear(x, param(name + ".weight"), param(name + ".bias")); }

  Var act(Var x) { return g_.leaky_relu(x, static_cast<float>(m_.config.leaky_slope)); }

  Var encoder(Var x) {
    const std::size_t depth = m_.config.hidden_channels.size();
    for (std::size_t i = 0; i < depth; ++i) x = act(conv(x, "enc.conv" + std::to_string(i + 1)));
    Var z = conv(x, "enc.conv" + std::to_string(depth + 1));
    return m_.config.latent_activation == "tanh" ? g_.tanh(z) : z;
  }

  Var decoder(Var z) {
    const std::size_t depth = m_.config.hidden_channels.size();
    for (std::size_t i = 0; i < depth; ++i) z = act(conv(z, "dec.conv" + std::to_string(i + 1)));
    return conv(z, "dec.conv" + std::to_string(depth + 1));
  }

  Var head(Var features, const std::string& name) {
    return fc(act(fc(features, "head." + name + ".fc1")), "head." + name + ".fc2");
  }

  Var discriminator(Var features, bool reverse) {
    Var h = reverse ? g_.grl(features, static_cast<float>(m_.config.grl_lambda)) : features;
    return fc(act(fc(h, "disc.fc1")), "disc.fc2");
  }

  // Flattened [N, D] features fed to the heads.
  Var features(Var x, std::size_t n, Var* latent = nullptr) {
    if (m_.is_lisa()) {
      Var z = encoder(x);
      if (latent) *latent = z;
      return g_.reshape(z, {n, m_.latent_size()});
    }
    return g_.reshape(x, {n, m_.bands * kPix});
  }

 private:
  const LisaModel& m_;
  ParamStore<float>* store_;
  Graph<float> g_;
  std::map<std::string, Var> bound_;
};

std::vector<float> standardize(const LisaModel& m, std::span<const SpectralPatch> patches) {
  std::vector<float> x(patches.size() * m.bands * kPix);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const SpectralPatch& p = patches[i];
    if (p.bands != m.bands || p.data.size() != m.bands * kPix) {
      throw ShapeError("patch has " + std::to_string(p.bands) + " bands, model expects " +
                       std::to_string(m.bands));
    }
    float* dst = x.data() + i * m.bands * kPix;
    for (std::size_t b = 0; b < m.bands; ++b) {
      const float mu = m.band_mean[b], sd = m.band_scale[b];
      for (std::size_t k = 0; k < kPix; ++k) dst[b * kPix + k] = (p.data[b * kPix + k] - mu) / sd;
    }
  }
  return x;
}

Shape input_shape(const LisaModel& m, std::size_t n) { return {n, m.bands, SpectralPatch::kSize, SpectralPatch::kSize}; }

void add_head(ParamStore<float>& ps, const std::string& name, std::size_t in, int hidden, std::size_t out) {
  const std::size_t h = static_cast<std::size_t>(hidden);
  ps.add_kaiming("head." + name + ".fc1.weight", {in, h}, "ae", in);
  ps.add("head." + name + ".fc1.bias", {h}, "ae");
  ps.add_kaiming("head." + name + ".fc2.weight", {h, out}, "ae", h);
  ps.add("head." + name + ".fc2.bias", {out}, "ae");
}

void add_conv(ParamStore<float>& ps, const std::string& name, std::size_t in, std::size_t out, int k) {
  const std::size_t kk = static_cast<std::size_t>(k);
  ps.add_kaiming(name + ".weight", {out, in, kk, kk}, "ae", in * kk * kk);
  ps.add(name + ".bias", {out}, "ae");
}

LisaModel blank_model(const LisaConfig& config, std::size_t bands, std::string kind) {
  config.validate();
  if (bands < 1) throw ConfigError("model needs at least one band");
  LisaModel m;
  m.kind = std::move(kind);
  m.config = config;
  m.bands = bands;
  m.band_mean.assign(bands, 0.0f);
  m.band_scale.assign(bands, 1.0f);
  m.params = ParamStore<float>(config.seed);
  return m;
}

struct Targets {
  std::vector<std::size_t> quality_rows;
  std::vector<float> brix, acid;  // standardized
  std::vector<std::int64_t> bins;
  std::vector<std::size_t> grape_rows;
  std::vector<int> grape;
  std::vector<int> domain;
};

Targets targets_of(const LisaModel& m, std::span<const SpectralPatch> batch, bool need_domains) {
  Targets t;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SpectralPatch& p = batch[i];
    if (p.has_quality()) {
      t.quality_rows.push_back(i);
      t.brix.push_back(static_cast<float>((*p.brix - m.brix_mean) / m.brix_scale));
      t.acid.push_back(static_cast<float>((*p.acid - m.acid_mean) / m.acid_scale));
      t.bins.push_back(static_cast<std::int64_t>(std::floor(*p.brix / m.config.brix_bin_width)));
    }
    if (p.annotated) {
      t.grape_rows.push_back(i);
      t.grape.push_back(p.is_grape ? 1 : 0);
    }
    if (need_domains) t.domain.push_back(m.domain_index(p.domain));
  }
  return t;
}

void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + term + " loss");
}

LossBreakdown forward_backward(LisaModel& m, std::span<const SpectralPatch> batch, const LossTerms& terms,
                               bool reverse) {
  if (batch.empty()) throw DataError("empty training batch");
  const std::size_t n = batch.size();
  const bool lisa = m.is_lisa();
  const bool use_domain = lisa && terms.domain && m.config.gamma > 0 && m.domains.size() >= 2;
  const Targets t = targets_of(m, batch, use_domain);

  m.params.zero_grad();
  Net net(m, &m.params);
  Graph<float>& g = net.g();
  Var x = g.constant(input_shape(m, n), standardize(m, batch));
  Var z;
  Var feat = net.features(x, n, &z);

  LossBreakdown lb;
  std::vector<Var> parts;
  auto weigh = [&](Var v, double w) { parts.push_back(w == 1.0 ? v : g.scale(v, static_cast<float>(w))); };

  if (terms.task) {
    std::vector<Var> task;
    if (!t.quality_rows.empty()) {
      Var fq = g.rows(feat, t.quality_rows);
      const std::size_t nq = t.quality_rows.size();
      task.push_back(g.mse(net.head(fq, "brix"), g.constant({nq, 1}, t.brix)));
      task.push_back(g.mse(net.head(fq, "acid"), g.constant({nq, 1}, t.acid)));
    }
    if (!t.grape_rows.empty()) {
      task.push_back(g.cross_entropy(net.head(g.rows(feat, t.grape_rows), "grape"), t.grape));
    }
    if (!task.empty()) {
      Var sum = task[0];
      for (std::size_t i = 1; i < task.size(); ++i) sum = g.add(sum, task[i]);
      lb.task = g.item(sum);
      check_finite(lb.task, "task");
      weigh(sum, 1.0);
    }
  }
  if (lisa && terms.recon) {
    Var r = g.mse(net.decoder(z), x);
    lb.recon = g.item(r);
    check_finite(lb.recon, "reconstruction");
    weigh(r, m.config.alpha);
  }
  if (lisa && terms.manifold && t.quality_rows.size() >= 2) {
    Var mf = g.same_bin_pair_sq(g.rows(feat, t.quality_rows), t.bins);
    lb.manifold = g.item(mf);
    check_finite(lb.manifold, "manifold");
    weigh(mf, m.config.beta);
  }
  if (use_domain) {
    Var d = g.cross_entropy(net.discriminator(feat, reverse), t.domain);
    lb.domain = g.item(d);
    check_finite(lb.domain, "domain");
    weigh(d, m.config.gamma);
  }
  if (parts.empty()) return lb;
  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = g.add(total, parts[i]);
  lb.total = g.item(total);
  check_finite(lb.total, "total");
  g.backward(total);
  return lb;
}

std::vector<DomainLabel> distinct_domains(std::span<const SpectralPatch> patches) {
  std::vector<DomainLabel> d;
  for (const SpectralPatch& p : patches) d.push_back(p.domain);
  std::sort(d.begin(), d.end());
  d.erase(std::unique(d.begin(), d.end()), d.end());
  return d;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& l, double w) {
  acc.total += w * l.total;
  acc.task += w * l.task;
  acc.recon += w * l.recon;
  acc.manifold += w * l.manifold;
  acc.domain += w * l.domain;
}

TrainResult run_training(LisaModel model, std::span<const SpectralPatch> patches, const LossTerms& terms,
                         const std::map<std::string, AdamSettings>& groups, const TrainOptions& options) {
  const LisaConfig& cfg = model.config;
  Adam<float> adam(groups);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(cfg.batch);

  TrainResult result;
  std::vector<SpectralPatch> batch;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    if (cfg.lr_schedule == "cosine")
      adam.set_lr_scale(0.5 * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs)));
    LossBreakdown mean;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(patches[order[i]]);
      const LossBreakdown lb = forward_backward(model, batch, terms, true);
      adam.step(model.params);
      accumulate(mean, lb, 1.0);
      ++steps;
      if (options.on_step) options.on_step({epoch, step, lb});
      ++step;
    }
    LossBreakdown avg;
    accumulate(avg, mean, 1.0 / static_cast<double>(steps));
    result.epoch_log.push_back(avg);
    if (options.on_epoch) options.on_epoch({epoch, avg, &model});
  }
  result.model = std::move(model);
  return result;
}

void check_training_set(std::span<const SpectralPatch> patches) {
  if (patches.empty()) throw DataError("no training patches");
  const auto labelled = std::count_if(patches.begin(), patches.end(),
                                      [](const SpectralPatch& p) { return p.has_quality(); });
  if (labelled == 0) throw DataError("no quality-labelled training patches");
  for (const SpectralPatch& p : patches) {
    for (float v : p.data) {
      if (!std::isfinite(v)) throw DataError("non-finite value in a training patch");
    }
  }
}

std::vector<float> pool_rows(std::span<const float> flat, std::size_t n, std::size_t channels) {
  std::vector<float> out(n * channels);
  for (std::size_t i = 0; i < n * channels; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < kPix; ++k) s += flat[i * kPix + k];
    out[i] = static_cast<float>(s / kPix);
  }
  return out;
}

FeatureRows to_rows(std::span<const float> flat, std::size_t n) {
  FeatureRows rows(n);
  const std::size_t d = n ? flat.size() / n : 0;
  for (std::size_t i = 0; i < n; ++i) rows[i].assign(flat.begin() + i * d, flat.begin() + (i + 1) * d);
  return rows;
}

}  // namespace

void LisaConfig::validate() const {
  require_config(latent_channels > 0, "latent_channels must be positive");
  for (int c : hidden_channels) require_config(c > 0, "hidden channel counts must be positive");
  require_config(kernel > 0 && kernel % 2 == 1, "kernel must be odd and positive");
  require_config(head_hidden > 0 && disc_hidden > 0, "hidden widths must be positive");
  require_config(leaky_slope >= 0 && leaky_slope < 1, "leaky_slope must lie in [0,1)");
  require_config(latent_activation == "linear" || latent_activation == "tanh",
                 "latent_activation must be 'linear' or 'tanh'");
  require_config(lr_schedule == "constant" || lr_schedule == "cosine",
                 "lr_schedule must be 'constant' or 'cosine'");
  require_config(alpha >= 0 && beta >= 0 && gamma >= 0, "loss weights must be non-negative");
  require_config(lr_ae > 0 && lr_disc > 0, "learning rates must be positive");
  require_config(epochs >= 0, "epochs must be non-negative");
  require_config(batch > 0, "batch must be positive");
  require_config(brix_bin_width > 0, "brix_bin_width must be positive");
  require_config(grl_lambda >= 0, "grl_lambda must be non-negative");
}

void to_json(nlohmann::json& j, const LisaConfig& c) {
  j = {{"latent_channels", c.latent_channels}, {"hidden_channels", c.hidden_channels},
       {"kernel", c.kernel},                   {"head_hidden", c.head_hidden},
       {"disc_hidden", c.disc_hidden},         {"leaky_slope", c.leaky_slope},
       {"latent_activation", c.latent_activation},
       {"alpha", c.alpha},                     {"beta", c.beta},
       {"gamma", c.gamma},                     {"lr_ae", c.lr_ae},
       {"lr_disc", c.lr_disc},                 {"lr_schedule", c.lr_schedule},
       {"epochs", c.epochs},
       {"batch", c.batch},                     {"brix_bin_width", c.brix_bin_width},
       {"grl_lambda", c.grl_lambda},           {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, LisaConfig& c) {
  if (!j.is_object()) throw ConfigError("lisa config must be a JSON object");
  LisaConfig d;
  try {
    c.latent_channels = j.value("latent_channels", d.latent_channels);
    c.hidden_channels = j.value("hidden_channels", d.hidden_channels);
    c.kernel = j.value("kernel", d.kernel);
    c.head_hidden = j.value("head_hidden", d.head_hidden);
    c.disc_hidden = j.value("disc_hidden", d.disc_hidden);
    c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
    c.latent_activation = j.value("latent_activation", d.latent_activation);
    c.alpha = j.value("alpha", d.alpha);
    c.beta = j.value("beta", d.beta);
    c.gamma = j.value("gamma", d.gamma);
    c.lr_ae = j.value("lr_ae", d.lr_ae);
    c.lr_disc = j.value("lr_disc", d.lr_disc);
    c.lr_schedule = j.value("lr_schedule", d.lr_schedule);
    c.epochs = j.value("epochs", d.epochs);
    c.batch = j.value("batch", d.batch);
    c.brix_bin_width = j.value("brix_bin_width", d.brix_bin_width);
    c.grl_lambda = j.value("grl_lambda", d.grl_lambda);
    c.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("lisa config: ") + e.what());
  }
  for (const auto& [key, _] : j.items()) {
    if (!nlohmann::json(c).contains(key)) throw ConfigError("lisa config: unknown key '" + key + "'");
  }
  c.validate();
}

int LisaModel::domain_index(const DomainLabel& d) const {
  const auto it = std::find(domains.begin(), domains.end(), d);
  if (it == domains.end()) throw DataError("domain '" + d.name() + "' unknown to the model");
  return static_cast<int>(it - domains.begin());
}

LisaModel init_lisa(const LisaConfig& config, std::size_t bands, std::vector<DomainLabel> domains) {
  LisaModel m = blank_model(config, bands, "lisa");
  m.domains = std::move(domains);
  ParamStore<float>& ps = m.params;
  const std::size_t depth = config.hidden_channels.size();
  std::vector<std::size_t> widths{bands};
  for (int c : config.hidden_channels) widths.push_back(static_cast<std::size_t>(c));
  widths.push_back(static_cast<std::size_t>(config.latent_channels));
  for (std::size_t i = 0; i <= depth; ++i) {
    add_conv(ps, "enc.conv" + std::to_string(i + 1), widths[i], widths[i + 1], config.kernel);
  }
  for (std::size_t i = 0; i <= depth; ++i) {
    add_conv(ps, "dec.conv" + std::to_string(i + 1), widths[depth + 1 - i], widths[depth - i], config.kernel);
  }
  const std::size_t feat = m.latent_size();
  add_head(ps, "brix", feat, config.head_hidden, 1);
  add_head(ps, "acid", feat, config.head_hidden, 1);
  add_head(ps, "grape", feat, config.head_hidden, 2);
  if (!m.domains.empty()) {
    const std::size_t h = static_cast<std::size_t>(config.disc_hidden);
    ps.add_kaiming("disc.fc1.weight", {feat, h}, "disc", feat);
    ps.add("disc.fc1.bias", {h}, "disc");
    ps.add_kaiming("disc.fc2.weight", {h, m.domains.size()}, "disc", h);
    ps.add("disc.fc2.bias", {m.domains.size()}, "disc");
  }
  return m;
}

LisaModel init_predictor(const LisaConfig& config, std::size_t bands) {
  LisaModel m = blank_model(config, bands, "predictor");
  const std::size_t feat = bands * kPix;
  add_head(m.params, "brix", feat, config.head_hidden, 1);
  add_head(m.params, "acid", feat, config.head_hidden, 1);
  add_head(m.params, "grape", feat, config.head_hidden, 2);
  return m;
}

void fit_standardization(LisaModel& m, std::span<const SpectralPatch> patches) {
  if (patches.empty()) throw DataError("no patches to fit standardization on");
  std::vector<double> s(m.bands, 0.0), s2(m.bands, 0.0);
  for (const SpectralPatch& p : patches) {
    if (p.bands != m.bands) throw ShapeError("patch band count differs from the model");
    for (std::size_t b = 0; b < m.bands; ++b) {
      for (std::size_t k = 0; k < kPix; ++k) {
        const double v = p.data[b * kPix + k];
        s[b] += v;
        s2[b] += v * v;
      }
    }
  }
  const double cnt = static_cast<double>(patches.size() * kPix);
  for (std::size_t b = 0; b < m.bands; ++b) {
    const double mu = s[b] / cnt;
    const double sd = std::sqrt(std::max(0.0, s2[b] / cnt - mu * mu));
    m.band_mean[b] = static_cast<float>(mu);
    m.band_scale[b] = static_cast<float>(sd > 1e-12 ? sd : 1.0);
  }
  auto fit_target = [&](auto get, double& mean, double& scale) {
    std::vector<double> v;
    for (const SpectralPatch& p : patches)
      if (p.has_quality()) v.push_back(get(p));
    if (v.empty()) return;
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size()));
    scale = sd > 1e-12 ? sd : 1.0;
  };
  fit_target([](const SpectralPatch& p) { return *p.brix; }, m.brix_mean, m.brix_scale);
  fit_target([](const SpectralPatch& p) { return *p.acid; }, m.acid_mean, m.acid_scale);
}

std::vector<float> encode_standardized(const LisaModel& m, std::span<const float> x, std::size_t n) {
  if (!m.is_lisa()) throw ConfigError("a predictor model has no latent space");
  if (x.size() != n * m.bands * kPix) throw ShapeError("encode: input size does not match " + std::to_string(n) + " patches");
  std::vector<float> out;
  out.reserve(n * m.latent_size());
  const std::size_t stride = m.bands * kPix;
  for (std::size_t s = 0; s < n; s += kInferChunk) {
    const std::size_t c = std::min(kInferChunk, n - s);
    Net net(m, nullptr);
    Var xv = net.g().constant(input_shape(m, c), std::vector<float>(x.begin() + s * stride, x.begin() + (s + c) * stride));
    const auto z = net.g().value(net.encoder(xv));
    out.insert(out.end(), z.begin(), z.end());
  }
  return out;
}

std::vector<float> encode(const LisaModel& m, std::span<const SpectralPatch> patches) {
  return encode_standardized(m, standardize(m, patches), patches.size());
}

std::vector<float> decode(const LisaModel& m, std::span<const float> z, std::size_t n) {
  if (!m.is_lisa()) throw ConfigError("a predictor model has no decoder");
  const std::size_t per = m.latent_size();
  if (z.size() != n * per) throw ShapeError("decode: latent size does not match " + std::to_string(n) + " patches");
  std::vector<float> out;
  out.reserve(n * m.bands * kPix);
  for (std::size_t s = 0; s < n; s += kInferChunk) {
    const std::size_t c = std::min(kInferChunk, n - s);
    Net net(m, nullptr);
    Var zv = net.g().constant({c, static_cast<std::size_t>(m.config.latent_channels), 8, 8},
                              std::vector<float>(z.begin() + s * per, z.begin() + (s + c) * per));
    const auto r = net.g().value(net.decoder(zv));
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

HeadOutputs predict_heads(const LisaModel& m, std::span<const float> features, std::size_t n) {
  const std::size_t d = m.is_lisa() ? m.latent_size() : m.bands * kPix;
  if (features.size() != n * d) throw ShapeError("predict_heads: expected " + std::to_string(n) + " rows of " + std::to_string(d));
  HeadOutputs h;
  for (std::size_t s = 0; s < n; s += kInferChunk) {
    const std::size_t c = std::min(kInferChunk, n - s);
    Net net(m, nullptr);
    Var f = net.g().constant({c, d}, std::vector<float>(features.begin() + s * d, features.begin() + (s + c) * d));
    const auto brix = net.g().value(net.head(f, "brix"));
    const auto acid = net.g().value(net.head(f, "acid"));
    const auto grape = net.g().value(net.head(f, "grape"));
    for (std::size_t i = 0; i < c; ++i) {
      h.brix.push_back(brix[i] * m.brix_scale + m.brix_mean);
      h.acid.push_back(acid[i] * m.acid_scale + m.acid_mean);
      h.grape_logits.push_back({grape[2 * i], grape[2 * i + 1]});
      h.grape_class.push_back(grape[2 * i + 1] > grape[2 * i] ? 1 : 0);
    }
  }
  return h;
}

HeadOutputs predict(const LisaModel& m, std::span<const SpectralPatch> patches) {
  std::vector<float> x = standardize(m, patches);
  if (m.is_lisa()) return predict_heads(m, encode_standardized(m, x, patches.size()), patches.size());
  return predict_heads(m, x, patches.size());
}

FeatureRows feature_rows(const LisaModel& m, std::span<const SpectralPatch> patches, bool pooled) {
  if (!m.is_lisa()) return input_rows(m, patches, pooled);
  const std::size_t n = patches.size();
  std::vector<float> z = encode(m, patches);
  if (pooled) z = pool_rows(z, n, static_cast<std::size_t>(m.config.latent_channels));
  return to_rows(z, n);
}

FeatureRows input_rows(const LisaModel& m, std::span<const SpectralPatch> patches, bool pooled) {
  const std::size_t n = patches.size();
  std::vector<float> x = standardize(m, patches);
  if (pooled) x = pool_rows(x, n, m.bands);
  return to_rows(x, n);
}

BunchQuality aggregate_bunch(const HeadOutputs& h) {
  BunchQuality q;
  q.patches = h.grape_class.size();
  double brix = 0, acid = 0;
  for (std::size_t i = 0; i < q.patches; ++i) {
    if (h.grape_class[i] != 1) continue;
    ++q.grape_patches;
    brix += h.brix[i];
    acid += h.acid[i];
  }
  if (q.patches) q.grape_fraction = static_cast<double>(q.grape_patches) / static_cast<double>(q.patches);
  if (q.grape_patches) {
    q.empty = false;
    q.brix_mean = brix / static_cast<double>(q.grape_patches);
    q.acid_mean = acid / static_cast<double>(q.grape_patches);
  }
  return q;
}

BunchQuality predict_bunch_quality(const LisaModel& m, std::span<const SpectralPatch> patches) {
  if (patches.empty()) return {};
  return aggregate_bunch(predict(m, patches));
}

LossBreakdown accumulate_gradients(LisaModel& m, std::span<const SpectralPatch> batch, const LossTerms& terms,
                                   bool reverse_gradient) {
  return forward_backward(m, batch, terms, reverse_gradient);
}

TrainResult train_lisa(const LisaConfig& config, std::span<const SpectralPatch> patches, const TrainOptions& options) {
  config.validate();
  check_training_set(patches);
  std::vector<DomainLabel> domains = distinct_domains(patches);
  if (config.gamma > 0 && domains.size() < 2) {
    throw DataError("domain-adversarial training needs at least two domains, got " + std::to_string(domains.size()));
  }
  LisaModel m = init_lisa(config, patches.front().bands, std::move(domains));
  fit_standardization(m, patches);
  return run_training(std::move(m), patches, LossTerms{},
                      {{"ae", AdamSettings{config.lr_ae}}, {"disc", AdamSettings{config.lr_disc}}}, options);
}

TrainResult train_predictor(const LisaConfig& config, std::span<const SpectralPatch> patches,
                            const TrainOptions& options) {
  config.validate();
  check_training_set(patches);
  LisaModel m = init_predictor(config, patches.front().bands);
  fit_standardization(m, patches);
  return run_training(std::move(m), patches, LossTerms{true, false, false, false},
                      {{"ae", AdamSettings{config.lr_ae}}}, options);
}

void write_epoch_log(std::span<const LossBreakdown> log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,total,task,recon,manifold,domain\n";
  out.precision(9);
  for (std::size_t e = 0; e < log.size(); ++e) {
    const LossBreakdown& l = log[e];
    out << e << ',' << l.total << ',' << l.task << ',' << l.recon << ',' << l.manifold << ',' << l.domain << '\n';
  }
}

nlohmann::json sidecar_json(const LisaModel& m) {
  nlohmann::json domains = nlohmann::json::array();
  for (const DomainLabel& d : m.domains) domains.push_back(d.name());
  return {{"kind", m.kind}, {"bands", m.bands}, {"config", m.config}, {"domains", domains}};
}

Container to_container(const LisaModel& m) {
  Container c;
  c.kind = m.kind;
  c.seed = m.config.seed;
  c.meta = sidecar_json(m);
  append_params(c, m.params);
  auto buffer = [&](const std::string& name, std::vector<double> v) {
    c.tensors.push_back({name, {v.size()}, "f64", "buffer", std::move(v)});
  };
  buffer("buffer.band_mean", {m.band_mean.begin(), m.band_mean.end()});
  buffer("buffer.band_scale", {m.band_scale.begin(), m.band_scale.end()});
  buffer("buffer.targets", {m.brix_mean, m.brix_scale, m.acid_mean, m.acid_scale});
  return c;
}

LisaModel lisa_from_container(const Container& c, const nlohmann::json& sidecar) {
  if (c.kind != "lisa" && c.kind != "predictor") {
    throw FormatError(FormatError::Kind::BadHeader, "checkpoint kind '" + c.kind + "' is not a quality network");
  }
  LisaModel m;
  try {
    if (sidecar.at("kind").get<std::string>() != c.kind) {
      throw FormatError(FormatError::Kind::BadHeader, "sidecar kind does not match the checkpoint");
    }
    m.kind = c.kind;
    m.bands = sidecar.at("bands").get<std::size_t>();
    m.config = sidecar.at("config").get<LisaConfig>();
    for (const auto& d : sidecar.at("domains")) m.domains.push_back(DomainLabel::parse(d.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::BadRecord, std::string("checkpoint sidecar: ") + e.what());
  }
  LisaModel ref = m.is_lisa() ? init_lisa(m.config, m.bands, m.domains) : init_predictor(m.config, m.bands);
  m.params = params_from_container(c);
  for (const auto& [name, e] : ref.params.entries()) {
    if (!m.params.contains(name) || m.params.at(name).shape != e.tensor.shape) {
      throw FormatError(FormatError::Kind::BadRecord, "checkpoint parameter '" + name + "' missing or misshapen");
    }
  }
  if (m.params.entries().size() != ref.params.entries().size()) {
    throw FormatError(FormatError::Kind::BadRecord, "checkpoint has unexpected parameters");
  }
  const auto& mean = c.tensor("buffer.band_mean").values;
  const auto& scale = c.tensor("buffer.band_scale").values;
  const auto& tg = c.tensor("buffer.targets").values;
  if (mean.size() != m.bands || scale.size() != m.bands || tg.size() != 4) {
    throw FormatError(FormatError::Kind::BadRecord, "checkpoint standardization buffers misshapen");
  }
  m.band_mean.assign(mean.begin(), mean.end());
  m.band_scale.assign(scale.begin(), scale.end());
  m.brix_mean = tg[0];
  m.brix_scale = tg[1];
  m.acid_mean = tg[2];
  m.acid_scale = tg[3];
  return m;
}

void save_model(const LisaModel& m, const std::filesystem::path& path) {
  write_container(to_container(m), path);
  std::ofstream side(path.string() + ".json");
  if (!side) throw DataError("cannot write " + path.string() + ".json");
  side << sidecar_json(m).dump(2) << '\n';
}

LisaModel load_model(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const std::filesystem::path side = path.string() + ".json";
  if (!std::filesystem::exists(side)) return lisa_from_container(c, c.meta);
  std::ifstream in(side);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::BadRecord, side.string() + ": " + e.what());
  }
  return lisa_from_container(c, j);
}

}  // namespace spectra_invar
