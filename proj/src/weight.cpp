#include "spectra_invar/weight.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

namespace {

constexpr std::size_t kCropPix = kWeightCrop * kWeightCrop;
constexpr std::size_t kInferChunk = 8;

class WeightNet {
 public:
  WeightNet(const WeightModel& m, ParamStore<float>* trainable) : m_(m), store_(trainable) {}

  Graph<float>& g() { return g_; }

  Var param(const std::string& name) {
    if (store_) return g_.input(store_->at(name));
    const DiffTensor<float>& t = m_.params.at(name);
    return g_.constant(t.shape, t.values);
  }

  Var act(Var x) { return g_.leaky_relu(x, static_cast<float>(m_.config.leaky_slope)); }

  // [N, bands, 64, 64] plus [N, 2] box sizes -> [N, 1] standardized grams.
  Var forward(Var x, Var sizes) {
    for (std::size_t i = 0; i < m_.config.channels.size(); ++i) {
      const std::string name = "conv" + std::to_string(i + 1);
      x = act(g_.conv2d(x, param(name + ".weight"), param(name + ".bias"), 2, 1));
    }
    Var h = g_.linear(g_.spatial_mean(x), param("fc1.weight"), param("fc1.bias"));
    if (m_.config.bbox_size_input) h = g_.add(h, g_.linear(sizes, param("size.weight"), param("size.bias")));
    return g_.linear(act(h), param("fc2.weight"), param("fc2.bias"));
  }

 private:
  const WeightModel& m_;
  ParamStore<float>* store_;
  Graph<float> g_;
};

void require_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("weight config: " + msg);
}

void validate_box(const HsiCube& cube, const Box& b) {
  if (!(b.x1 > b.x0) || !(b.y1 > b.y0) || (b.x1 - b.x0) * (b.y1 - b.y0) < 4.0 || b.x0 < 0 || b.y0 < 0 ||
      b.x1 > static_cast<double>(cube.samples) || b.y1 > static_cast<double>(cube.lines)) {
    throw ShapeError("degenerate or out-of-cube box [" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                     std::to_string(b.x1) + "," + std::to_string(b.y1) + "]");
  }
}

// Source coordinate and weight for each output index along one axis.
struct Tap {
  std::size_t lo, hi;
  float w;
};

std::vector<Tap> axis_taps(double a0, double a1, std::size_t out) {
  const double lo_px = std::floor(a0);
  const double hi_px = std::ceil(a1) - 1.0;
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    double u = a0 + (static_cast<double>(i) + 0.5) * (a1 - a0) / static_cast<double>(out) - 0.5;
    u = std::clamp(u, lo_px, hi_px);
    const double f = std::floor(u);
    const auto lo = static_cast<std::size_t>(f);
    const auto hi = static_cast<std::size_t>(std::min(f + 1.0, hi_px));
    taps[i] = {lo, hi, static_cast<float>(u - f)};
  }
  return taps;
}

std::vector<float> batch_input(const WeightModel& m, std::span<const WeightSample> s, std::span<const std::size_t> idx) {
  std::vector<float> x(idx.size() * m.bands * kCropPix);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const WeightSample& w = s[idx[k]];
    if (w.crop.size() != m.bands * kCropPix) throw ShapeError("weight sample crop does not match the model bands");
    float* dst = x.data() + k * m.bands * kCropPix;
    for (std::size_t b = 0; b < m.bands; ++b) {
      const float mu = m.band_mean[b], sd = m.band_scale[b];
      for (std::size_t p = 0; p < kCropPix; ++p) dst[b * kCropPix + p] = (w.crop[b * kCropPix + p] - mu) / sd;
    }
  }
  return x;
}

std::vector<float> batch_sizes(std::span<const WeightSample> s, std::span<const std::size_t> idx) {
  std::vector<float> out;
  for (std::size_t i : idx) {
    out.push_back(static_cast<float>(s[i].box_lines / kWeightCrop));
    out.push_back(static_cast<float>(s[i].box_samples / kWeightCrop));
  }
  return out;
}

Shape crop_shape(const WeightModel& m, std::size_t n) { return {n, m.bands, kWeightCrop, kWeightCrop}; }

}  // namespace

void WeightConfig::validate() const {
  require_config(!channels.empty(), "channels must not be empty");
  for (int c : channels) require_config(c > 0, "channel counts must be positive");
  require_config(head_hidden > 0, "head_hidden must be positive");
  require_config(leaky_slope >= 0 && leaky_slope < 1, "leaky_slope must lie in [0,1)");
  require_config(lr > 0, "lr must be positive");
  require_config(epochs >= 0, "epochs must be non-negative");
  require_config(batch > 0, "batch must be positive");
  sg.validate();
}

void to_json(nlohmann::json& j, const WeightConfig& c) {
  j = {{"channels", c.channels}, {"head_hidden", c.head_hidden}, {"bbox_size_input", c.bbox_size_input},
       {"leaky_slope", c.leaky_slope}, {"lr", c.lr}, {"epochs", c.epochs},
       {"batch", c.batch}, {"seed", c.seed}, {"sg", c.sg}};
}

void from_json(const nlohmann::json& j, WeightConfig& c) {
  if (!j.is_object()) throw ConfigError("weight config must be a JSON object");
  const WeightConfig d;
  try {
    c.channels = j.value("channels", d.channels);
    c.head_hidden = j.value("head_hidden", d.head_hidden);
    c.bbox_size_input = j.value("bbox_size_input", d.bbox_size_input);
    c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
    c.lr = j.value("lr", d.lr);
    c.epochs = j.value("epochs", d.epochs);
    c.batch = j.value("batch", d.batch);
    c.seed = j.value("seed", d.seed);
    c.sg = j.value("sg", d.sg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("weight config: ") + e.what());
  }
  for (const auto& [key, _] : j.items()) {
    if (!nlohmann::json(c).contains(key)) throw ConfigError("weight config: unknown key '" + key + "'");
  }
  c.validate();
}

std::vector<float> resample_crop(const HsiCube& cube, const Box& box, std::size_t out) {
  validate_box(cube, box);
  if (out == 0) throw ShapeError("resample to zero size");
  const auto ty = axis_taps(box.y0, box.y1, out);
  const auto tx = axis_taps(box.x0, box.x1, out);
  const std::size_t B = cube.bands;
  std::vector<float> crop(B * out * out);
  for (std::size_t i = 0; i < out; ++i) {
    for (std::size_t j = 0; j < out; ++j) {
      const Tap& a = ty[i];
      const Tap& c = tx[j];
      const float w00 = (1 - a.w) * (1 - c.w), w01 = (1 - a.w) * c.w, w10 = a.w * (1 - c.w), w11 = a.w * c.w;
      const auto s00 = cube.spectrum(a.lo, c.lo), s01 = cube.spectrum(a.lo, c.hi);
      const auto s10 = cube.spectrum(a.hi, c.lo), s11 = cube.spectrum(a.hi, c.hi);
      for (std::size_t b = 0; b < B; ++b) {
        crop[(b * out + i) * out + j] = w00 * s00[b] + w01 * s01[b] + w10 * s10[b] + w11 * s11[b];
      }
    }
  }
  return crop;
}

WeightSample make_weight_sample(const HsiCube& cube, const Box& box, const SgConfig& sg) {
  WeightSample s;
  s.crop = resample_crop(cube, box);
  s.box_lines = box.y1 - box.y0;
  s.box_samples = box.x1 - box.x0;
  std::vector<double> spec(cube.bands);
  for (std::size_t p = 0; p < kCropPix; ++p) {
    for (std::size_t b = 0; b < cube.bands; ++b) spec[b] = s.crop[b * kCropPix + p];
    const std::vector<double> f = sg_filter(spec, sg);
    for (std::size_t b = 0; b < cube.bands; ++b) s.crop[b * kCropPix + p] = static_cast<float>(f[b]);
  }
  return s;
}

WeightModel init_weight_model(const WeightConfig& config, std::size_t bands) {
  config.validate();
  if (bands < 1) throw ConfigError("weight model needs at least one band");
  WeightModel m;
  m.config = config;
  m.bands = bands;
  m.band_mean.assign(bands, 0.0f);
  m.band_scale.assign(bands, 1.0f);
  m.params = ParamStore<float>(config.seed);
  std::size_t in = bands;
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    const auto out = static_cast<std::size_t>(config.channels[i]);
    const std::string name = "conv" + std::to_string(i + 1);
    m.params.add_kaiming(name + ".weight", {out, in, 3, 3}, "weight", in * 9);
    m.params.add(name + ".bias", {out}, "weight");
    in = out;
  }
  const auto h = static_cast<std::size_t>(config.head_hidden);
  m.params.add_kaiming("fc1.weight", {in, h}, "weight", in);
  m.params.add("fc1.bias", {h}, "weight");
  if (config.bbox_size_input) {
    m.params.add_kaiming("size.weight", {2, h}, "weight", 2);
    m.params.add("size.bias", {h}, "weight");
  }
  m.params.add_kaiming("fc2.weight", {h, 1}, "weight", h);
  m.params.add("fc2.bias", {1}, "weight");
  return m;
}

WeightTrainResult train_weight(const WeightConfig& config, std::span<const WeightSample> samples,
                               const std::function<void(int, double)>& on_epoch) {
  config.validate();
  std::vector<std::size_t> labelled;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].grams) labelled.push_back(i);
  if (labelled.size() < 2) throw DataError("weight training needs at least two samples with grams");
  const std::size_t bands = samples[labelled[0]].crop.size() / kCropPix;
  WeightModel m = init_weight_model(config, bands);

  std::vector<double> s(bands, 0.0), s2(bands, 0.0), g;
  for (std::size_t i : labelled) {
    const auto& c = samples[i].crop;
    if (c.size() != bands * kCropPix) throw ShapeError("weight samples differ in band count");
    for (std::size_t b = 0; b < bands; ++b)
      for (std::size_t p = 0; p < kCropPix; ++p) {
        const double v = c[b * kCropPix + p];
        if (!std::isfinite(v)) throw DataError("non-finite value in a weight crop");
        s[b] += v;
        s2[b] += v * v;
      }
    g.push_back(*samples[i].grams);
  }
  const double cnt = static_cast<double>(labelled.size() * kCropPix);
  for (std::size_t b = 0; b < bands; ++b) {
    const double mu = s[b] / cnt, sd = std::sqrt(std::max(0.0, s2[b] / cnt - mu * mu));
    m.band_mean[b] = static_cast<float>(mu);
    m.band_scale[b] = static_cast<float>(sd > 1e-12 ? sd : 1.0);
  }
  m.grams_mean = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
  double ss = 0;
  for (double v : g) ss += (v - m.grams_mean) * (v - m.grams_mean);
  const double sd = std::sqrt(ss / static_cast<double>(g.size()));
  m.grams_scale = sd > 1e-12 ? sd : 1.0;

  Adam<float> adam({{"weight", AdamSettings{config.lr}}});
  std::mt19937_64 rng(config.seed ^ 0x2545f4914f6cdd1dULL);
  WeightTrainResult result;
  const auto bs = static_cast<std::size_t>(config.batch);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(labelled.begin(), labelled.end(), rng);
    double sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < labelled.size(); start += bs) {
      const std::span<const std::size_t> idx(labelled.data() + start, std::min(bs, labelled.size() - start));
      std::vector<float> target;
      for (std::size_t i : idx) target.push_back(static_cast<float>((*samples[i].grams - m.grams_mean) / m.grams_scale));
      m.params.zero_grad();
      WeightNet net(m, &m.params);
      Graph<float>& gr = net.g();
      Var x = gr.constant(crop_shape(m, idx.size()), batch_input(m, samples, idx));
      Var sz = gr.constant({idx.size(), 2}, batch_sizes(samples, idx));
      Var loss = gr.mse(net.forward(x, sz), gr.constant({idx.size(), 1}, target));
      const double l = gr.item(loss);
      if (!std::isfinite(l)) throw NumericError("non-finite weight loss");
      gr.backward(loss);
      adam.step(m.params);
      sum += l;
      ++steps;
    }
    result.epoch_mse.push_back(sum / static_cast<double>(steps));
    if (on_epoch) on_epoch(epoch, result.epoch_mse.back());
  }
  result.model = std::move(m);
  return result;
}

std::vector<double> predict_weight(const WeightModel& m, std::span<const WeightSample> samples) {
  std::vector<double> out;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < samples.size(); s += kInferChunk) {
    idx.resize(std::min(kInferChunk, samples.size() - s));
    std::iota(idx.begin(), idx.end(), s);
    WeightNet net(m, nullptr);
    Graph<float>& g = net.g();
    Var x = g.constant(crop_shape(m, idx.size()), batch_input(m, samples, idx));
    Var sz = g.constant({idx.size(), 2}, batch_sizes(samples, idx));
    for (float v : g.value(net.forward(x, sz))) out.push_back(std::max(0.0, v * m.grams_scale + m.grams_mean));
  }
  return out;
}

double predict_weight(const WeightModel& m, const HsiCube& cube, const Box& box) {
  if (cube.bands != m.bands) throw ShapeError("cube band count differs from the weight model");
  const WeightSample s = make_weight_sample(cube, box, m.config.sg);
  return predict_weight(m, std::span<const WeightSample>(&s, 1)).front();
}

Container to_container(const WeightModel& m) {
  Container c;
  c.kind = "weight";
  c.seed = m.config.seed;
  c.meta = {{"config", m.config}, {"bands", m.bands}};
  append_params(c, m.params);
  c.tensors.push_back({"buffer.band_mean", {m.bands}, "f64", "buffer", {m.band_mean.begin(), m.band_mean.end()}});
  c.tensors.push_back({"buffer.band_scale", {m.bands}, "f64", "buffer", {m.band_scale.begin(), m.band_scale.end()}});
  c.tensors.push_back({"buffer.grams", {2}, "f64", "buffer", {m.grams_mean, m.grams_scale}});
  return c;
}

WeightModel weight_from_container(const Container& c) {
  if (c.kind != "weight") throw FormatError(FormatError::Kind::BadHeader, "checkpoint kind '" + c.kind + "' is not weight");
  WeightModel m;
  try {
    m.config = c.meta.at("config").get<WeightConfig>();
    m.bands = c.meta.at("bands").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::BadRecord, std::string("weight checkpoint meta: ") + e.what());
  }
  const WeightModel ref = init_weight_model(m.config, m.bands);
  m.params = params_from_container(c);
  if (m.params.entries().size() != ref.params.entries().size()) {
    throw FormatError(FormatError::Kind::BadRecord, "weight checkpoint has unexpected parameters");
  }
  for (const auto& [name, e] : ref.params.entries()) {
    if (!m.params.contains(name) || m.params.at(name).shape != e.tensor.shape) {
      throw FormatError(FormatError::Kind::BadRecord, "weight parameter '" + name + "' missing or misshapen");
    }
  }
  const auto& mean = c.tensor("buffer.band_mean").values;
  const auto& scale = c.tensor("buffer.band_scale").values;
  const auto& grams = c.tensor("buffer.grams").values;
  if (mean.size() != m.bands || scale.size() != m.bands || grams.size() != 2) {
    throw FormatError(FormatError::Kind::BadRecord, "weight checkpoint buffers misshapen");
  }
  m.band_mean.assign(mean.begin(), mean.end());
  m.band_scale.assign(scale.begin(), scale.end());
  m.grams_mean = grams[0];
  m.grams_scale = grams[1];
  return m;
}

void save_weight_model(const WeightModel& m, const std::filesystem::path& path) { write_container(to_container(m), path); }

WeightModel load_weight_model(const std::filesystem::path& path) { return weight_from_container(read_container(path)); }

}  // namespace spectra_invar
