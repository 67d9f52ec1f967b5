#include "spectra_invar/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

namespace {

constexpr double kSkyKelvin = 12000.0;
constexpr double kO2CentreNm = 760.0;
constexpr double kO2WidthNm = 4.0;
constexpr double kShadowStrength = 0.75;
constexpr double kShadowSmoothPx = 2.0;
constexpr double kBerryRadiusPx = 3.0;

double gauss(double x, double mu, double sigma) {
  const double t = (x - mu) / sigma;
  return std::exp(-0.5 * t * t);
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

// Separable Gaussian blur of a [lines][samples][channels] float buffer with
// clamped edges.
void blur(std::vector<float>& buf, std::size_t lines, std::size_t samples, std::size_t channels, double sigma) {
  if (sigma <= 0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) ks += k[i + radius] = gauss(i, 0, sigma);
  for (double& v : k) v /= ks;
  std::vector<float> tmp(buf.size());
  const auto L = static_cast<long>(lines), S = static_cast<long>(samples);
  for (long l = 0; l < L; ++l)
    for (long s = 0; s < S; ++s)
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const long ss = std::clamp(s + i, 0L, S - 1);
          acc += k[i + radius] * buf[(l * S + ss) * channels + c];
        }
        tmp[(l * S + s) * channels + c] = static_cast<float>(acc);
      }
  for (long l = 0; l < L; ++l)
    for (long s = 0; s < S; ++s)
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const long ll = std::clamp(l + i, 0L, L - 1);
          acc += k[i + radius] * tmp[(ll * S + s) * channels + c];
        }
        buf[(l * S + s) * channels + c] = static_cast<float>(acc);
      }
}

const char* material_name(Material m) {
  switch (m) {
    case Material::Background: return "background";
    case Material::Leaf: return "leaf";
    case Material::Grape: return "grape";
  }
  return "?";
}

}  // namespace

std::vector<double> planck_illuminant(std::span<const double> wavelengths_nm, double kelvin) {
  if (!(kelvin > 0)) throw ConfigError("colour temperature must be positive");
  constexpr double c2 = 1.4388e7;  // nm K
  std::vector<double> out(wavelengths_nm.size());
  double peak = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double l = wavelengths_nm[i];
    out[i] = 1.0 / (std::pow(l / 1000.0, 5) * std::expm1(c2 / (l * kelvin)));
    peak = std::max(peak, out[i]);
  }
  for (double& v : out) v /= peak;
  return out;
}

void DomainSpec::validate(std::size_t bands) const {
  const std::string who = "domain " + label.name() + ": ";
  if (illuminant.size() != bands) {
    throw ConfigError(who + "illuminant has " + std::to_string(illuminant.size()) + " entries, expected " +
                      std::to_string(bands));
  }
  for (double v : illuminant)
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError(who + "illuminant must be strictly positive");
  if (!(intensity_scale > 0)) throw ConfigError(who + "intensity_scale must be positive");
  for (double f : {o2_absorption_depth, shadow_prob})
    if (!(f >= 0 && f <= 1)) throw ConfigError(who + "o2_absorption_depth and shadow_prob must lie in [0,1]");
  if (!(blur_sigma >= 0) || !(ambient >= 0)) throw ConfigError(who + "blur_sigma and ambient must be >= 0");
}

DomainSpec DomainSpec::lab(std::span<const double> wl) {
  DomainSpec d;
  d.label = DomainLabel::lab();
  d.color_temperature_k = 2900;
  d.illuminant = planck_illuminant(wl, d.color_temperature_k);
  d.intensity_scale = 1.0;
  return d;
}

DomainSpec DomainSpec::field_am(std::span<const double> wl) {
  DomainSpec d;
  d.label = DomainLabel::field_am();
  d.color_temperature_k = 4500;
  d.illuminant = planck_illuminant(wl, d.color_temperature_k);
  d.intensity_scale = 0.6;
  d.o2_absorption_depth = 0.35;
  d.shadow_prob = 0.3;
  d.blur_sigma = 0.5;
  d.ambient = 0.05;
  return d;
}

DomainSpec DomainSpec::field_pm(std::span<const double> wl) {
  DomainSpec d;
  d.label = DomainLabel::field_pm();
  d.color_temperature_k = 5500;
  d.illuminant = planck_illuminant(wl, d.color_temperature_k);
  d.intensity_scale = 0.4;
  d.o2_absorption_depth = 0.45;
  d.shadow_prob = 0.4;
  d.blur_sigma = 1.2;
  d.ambient = 0.08;
  return d;
}

nlohmann::json domain_spec_to_json(const DomainSpec& d) {
  nlohmann::json j = {{"label", d.label.name()},
                      {"intensity_scale", d.intensity_scale},
                      {"o2_absorption_depth", d.o2_absorption_depth},
                      {"shadow_prob", d.shadow_prob},
                      {"blur_sigma", d.blur_sigma},
                      {"ambient", d.ambient}};
  if (d.color_temperature_k > 0) {
    j["color_temperature_k"] = d.color_temperature_k;
  } else {
    j["illuminant"] = d.illuminant;
  }
  return j;
}

DomainSpec domain_spec_from_json(const nlohmann::json& j, std::span<const double> wl) {
  DomainSpec d;
  try {
    d.label = DomainLabel::parse(j.at("label").get<std::string>());
    if (j.contains("illuminant")) {
      d.illuminant = j["illuminant"].get<std::vector<double>>();
    } else {
      d.color_temperature_k = j.value("color_temperature_k", 5000.0);
      d.illuminant = planck_illuminant(wl, d.color_temperature_k);
    }
    d.intensity_scale = j.value("intensity_scale", 1.0);
    d.o2_absorption_depth = j.value("o2_absorption_depth", 0.0);
    d.shadow_prob = j.value("shadow_prob", 0.0);
    d.blur_sigma = j.value("blur_sigma", 0.0);
    d.ambient = j.value("ambient", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad domain spec: ") + e.what());
  }
  return d;
}

void SynthConfig::resolve_defaults() {
  if (!domains.empty()) return;
  const auto wl = default_wavelengths(bands);
  domains = {DomainSpec::lab(wl), DomainSpec::field_am(wl), DomainSpec::field_pm(wl)};
}

void SynthConfig::validate() const {
  if (n_bunches == 0) throw ConfigError("n_bunches must be at least 1");
  if (!(brix_range[0] < brix_range[1]) || !(acid_range[0] < acid_range[1])) {
    throw ConfigError("brix_range and acid_range must be non-degenerate [lo, hi]");
  }
  if (brix_range[0] < 0 || brix_range[1] > 35 || acid_range[0] < 0 || acid_range[1] > 30) {
    throw ConfigError("brix_range must lie in [0,35] and acid_range in [0,30]");
  }
  if (bands < 16) throw ConfigError("at least 16 bands required");
  if (domains.size() < 2) throw ConfigError("at least two domains are required");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    domains[i].validate(bands);
    for (std::size_t k = 0; k < i; ++k)
      if (domains[k].label == domains[i].label) throw ConfigError("duplicate domain " + domains[i].label.name());
  }
  if (!(noise_sd_dn >= 0) || !(full_scale_dn > 0)) throw ConfigError("noise_sd_dn >= 0 and full_scale_dn > 0 required");
  if (grape_patches_per_bunch == 0) throw ConfigError("grape_patches_per_bunch must be at least 1");
  if (!(test_fraction >= 0 && test_fraction < 1)) throw ConfigError("test_fraction must lie in [0,1)");
  for (const auto& w : weight_domains) {
    const auto label = DomainLabel::parse(w);
    if (std::none_of(domains.begin(), domains.end(), [&](const DomainSpec& d) { return d.label == label; })) {
      throw ConfigError("weight domain '" + w + "' is not among the configured domains");
    }
  }
  if (!(bunch_side_px[0] >= 4 && bunch_side_px[0] <= bunch_side_px[1])) {
    throw ConfigError("bunch_side_px must satisfy 4 <= lo <= hi");
  }
  if (scans_per_domain > 0) {
    if (bunches_per_scan == 0) throw ConfigError("bunches_per_scan must be at least 1");
    if (scan_lines / bunches_per_scan < 16 || scan_samples < 16) {
      throw ConfigError("scan of " + std::to_string(scan_lines) + "x" + std::to_string(scan_samples) +
                        " cannot hold " + std::to_string(bunches_per_scan) + " bunches");
    }
    if (scan_samples > kMaxSamples) throw ConfigError("scan_samples exceeds the sensor width");
  }
}

nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json doms = nlohmann::json::array();
  for (const auto& d : c.domains) doms.push_back(domain_spec_to_json(d));
  return {{"n_bunches", c.n_bunches},
          {"brix_range", c.brix_range},
          {"acid_range", c.acid_range},
          {"domains", doms},
          {"noise_sd_dn", c.noise_sd_dn},
          {"seed", c.seed},
          {"bands", c.bands},
          {"full_scale_dn", c.full_scale_dn},
          {"bunch_variation", c.bunch_variation},
          {"grape_patches_per_bunch", c.grape_patches_per_bunch},
          {"other_patches_per_bunch", c.other_patches_per_bunch},
          {"test_fraction", c.test_fraction},
          {"weight_domains", c.weight_domains},
          {"bunch_side_px", c.bunch_side_px},
          {"grams_per_px", c.grams_per_px},
          {"grams_offset", c.grams_offset},
          {"grams_noise_sd", c.grams_noise_sd},
          {"scans_per_domain", c.scans_per_domain},
          {"scan_lines", c.scan_lines},
          {"scan_samples", c.scan_samples},
          {"bunches_per_scan", c.bunches_per_scan}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    const auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    get("n_bunches", c.n_bunches);
    get("brix_range", c.brix_range);
    get("acid_range", c.acid_range);
    get("noise_sd_dn", c.noise_sd_dn);
    get("seed", c.seed);
    get("bands", c.bands);
    get("full_scale_dn", c.full_scale_dn);
    get("bunch_variation", c.bunch_variation);
    get("grape_patches_per_bunch", c.grape_patches_per_bunch);
    get("other_patches_per_bunch", c.other_patches_per_bunch);
    get("test_fraction", c.test_fraction);
    get("weight_domains", c.weight_domains);
    get("bunch_side_px", c.bunch_side_px);
    get("grams_per_px", c.grams_per_px);
    get("grams_offset", c.grams_offset);
    get("grams_noise_sd", c.grams_noise_sd);
    get("scans_per_domain", c.scans_per_domain);
    get("scan_lines", c.scan_lines);
    get("scan_samples", c.scan_samples);
    get("bunches_per_scan", c.bunches_per_scan);
    if (j.contains("domains")) {
      const auto wl = default_wavelengths(c.bands);
      for (const auto& d : j["domains"]) c.domains.push_back(domain_spec_from_json(d, wl));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad synth config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("bad synth config: ") + e.what());
  }
  c.resolve_defaults();
  return c;
}

GrapeVariation draw_variation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> scale(0.9, 1.1), anth(0.0, 0.3);
  std::normal_distribution<double> shift(0.0, 5.0);
  GrapeVariation v;
  v.scale = scale(rng);
  v.edge_shift_nm = shift(rng);
  v.anthocyanin = anth(rng);
  return v;
}

std::vector<double> grape_reflectance(double brix, double acid, std::span<const double> wl,
                                      const GrapeVariation& v) {
  if (!(brix >= 0 && brix <= 35)) throw DataError("brix " + std::to_string(brix) + " outside [0,35]");
  if (!(acid >= 0 && acid <= 30)) throw DataError("acid " + std::to_string(acid) + " outside [0,30]");
  const double brix_depth = 0.02 + 0.30 * brix / 35.0;
  const double acid_depth = 0.02 + 0.25 * acid / 30.0;
  std::vector<double> r(wl.size());
  for (std::size_t i = 0; i < wl.size(); ++i) {
    const double l = wl[i];
    double base = 0.04 + 0.40 * logistic((l - 705.0 - v.edge_shift_nm) / 18.0);
    base *= v.scale * (1.0 - v.anthocyanin * gauss(l, 540.0, 35.0));
    double sugar = 0, acidity = 0;
    for (double c : kBrixFeaturesNm) sugar += gauss(l, c, 15.0);
    for (double c : kAcidFeaturesNm) acidity += gauss(l, c, 15.0);
    r[i] = std::clamp(base * (1.0 - brix_depth * sugar) * (1.0 - acid_depth * acidity), 1e-4, 0.999);
  }
  return r;
}

std::vector<double> grape_reflectance(double brix, double acid, std::span<const double> wl,
                                      std::mt19937_64& rng) {
  return grape_reflectance(brix, acid, wl, draw_variation(rng));
}

std::vector<double> leaf_reflectance(std::span<const double> wl) {
  std::vector<double> r(wl.size());
  for (std::size_t i = 0; i < wl.size(); ++i) {
    const double l = wl[i];
    r[i] = 0.05 + 0.07 * gauss(l, 550.0, 30.0) - 0.02 * gauss(l, 670.0, 20.0) + 0.45 * logistic((l - 715.0) / 12.0);
  }
  return r;
}

std::vector<double> background_reflectance(std::span<const double> wl) {
  std::vector<double> r(wl.size());
  for (std::size_t i = 0; i < wl.size(); ++i) r[i] = 0.15 + 0.10 * (wl[i] - 400.0) / 600.0;
  return r;
}

RenderedCube render_cube(const Layout& layout, std::span<const BunchTruth> bunches, const DomainSpec& domain,
                         const RenderSettings& settings, std::uint64_t seed) {
  const std::vector<double>& wl = settings.wavelengths_nm;
  const std::size_t B = wl.size(), L = layout.lines, S = layout.samples;
  domain.validate(B);
  if (L == 0 || S == 0 || S > kMaxSamples) throw ShapeError("invalid cube size for layout " + layout.cube_id);

  std::mt19937_64 rng(seed);
  const auto find_bunch = [&](std::int64_t id) -> const BunchTruth& {
    for (const auto& b : bunches)
      if (b.id == id) return b;
    throw DataError("layout references unknown bunch " + std::to_string(id));
  };

  // Per-pixel material (0 background, 1 leaf, 2+k grape of bunch k), shade.
  std::vector<std::int64_t> mat(L * S);
  std::vector<float> shade(L * S, 1.0f);
  std::vector<std::vector<double>> spectra{background_reflectance(wl), leaf_reflectance(wl)};
  std::vector<std::int64_t> spectrum_bunch{-1, -1};
  const auto grape_index = [&](std::int64_t id) {
    for (std::size_t k = 2; k < spectra.size(); ++k)
      if (spectrum_bunch[k] == id) return static_cast<std::int64_t>(k);
    const BunchTruth& b = find_bunch(id);
    spectra.push_back(grape_reflectance(b.brix, b.acid, wl, b.variation));
    spectrum_bunch.push_back(id);
    return static_cast<std::int64_t>(spectra.size() - 1);
  };
  const std::int64_t fill = layout.fill == Material::Leaf ? 1 : (layout.fill == Material::Background ? 0 : -1);
  if (fill < 0) throw ConfigError("layout fill must be background or leaf");
  std::fill(mat.begin(), mat.end(), fill);
  std::uniform_real_distribution<double> leaf_shade(0.85, 1.0);
  if (fill == 1)
    for (float& s : shade) s = static_cast<float>(leaf_shade(rng));

  RenderedCube out;
  for (const Placement& p : layout.items) {
    const auto [l0, s0, nl, ns] = p.rect;
    if (nl == 0 || ns == 0 || l0 + nl > L || s0 + ns > S) {
      throw ShapeError("placement [" + std::to_string(l0) + "," + std::to_string(s0) + "," + std::to_string(nl) +
                       "," + std::to_string(ns) + "] overflows cube " + layout.cube_id + " of " +
                       std::to_string(L) + "x" + std::to_string(S));
    }
    std::int64_t m = p.material == Material::Background ? 0 : 1;
    if (p.material == Material::Grape) {
      if (p.bunch_id < 0) throw DataError("grape placement without a bunch id");
      m = grape_index(p.bunch_id);
    }
    const double cl = l0 + nl / 2.0, cs = s0 + ns / 2.0;
    const auto inside = [&](std::size_t l, std::size_t s) {
      if (!p.ellipse) return true;
      const double dl = (l + 0.5 - cl) / (nl / 2.0), ds = (s + 0.5 - cs) / (ns / 2.0);
      return dl * dl + ds * ds <= 1.0;
    };
    std::vector<float> local(nl * ns, 1.0f);
    if (p.material == Material::Grape && p.textured) {
      // Berries on a jittered hexagonal grid; uncovered pixels are gaps.
      std::fill(local.begin(), local.end(), 0.3f);
      std::uniform_real_distribution<double> jitter(-0.5, 0.5);
      const double r = kBerryRadiusPx, dx = 1.8 * r, dy = dx * std::sqrt(3.0) / 2.0;
      int row = 0;
      for (double y = -r; y < nl + r; y += dy, ++row) {
        for (double x = (row % 2 ? dx / 2 : 0.0) - r; x < ns + r; x += dx) {
          const double by = y + jitter(rng), bx = x + jitter(rng);
          const long ly0 = std::max(0L, static_cast<long>(std::floor(by - r)));
          const long ly1 = std::min(static_cast<long>(nl) - 1, static_cast<long>(std::ceil(by + r)));
          const long lx0 = std::max(0L, static_cast<long>(std::floor(bx - r)));
          const long lx1 = std::min(static_cast<long>(ns) - 1, static_cast<long>(std::ceil(bx + r)));
          for (long a = ly0; a <= ly1; ++a)
            for (long b = lx0; b <= lx1; ++b) {
              const double d2 = ((a + 0.5 - by) * (a + 0.5 - by) + (b + 0.5 - bx) * (b + 0.5 - bx)) / (r * r);
              if (d2 < 1.0) {
                float& v = local[a * ns + b];
                v = std::max(v, static_cast<float>(0.55 + 0.45 * std::sqrt(1.0 - d2)));
              }
            }
        }
      }
    } else if (p.material == Material::Leaf) {
      for (float& v : local) v = static_cast<float>(leaf_shade(rng));
    }
    for (std::size_t a = 0; a < nl; ++a)
      for (std::size_t b = 0; b < ns; ++b) {
        if (!inside(l0 + a, s0 + b)) continue;
        mat[(l0 + a) * S + s0 + b] = m;
        shade[(l0 + a) * S + s0 + b] = local[a * ns + b];
      }

    if (p.annotate) {
      Annotation ann;
      ann.cube_id = layout.cube_id;
      ann.rect = p.rect;
      ann.is_grape = p.material == Material::Grape;
      if (p.bunch_id >= 0) ann.bunch_id = p.bunch_id;
      if (ann.is_grape) {
        const BunchTruth& b = find_bunch(p.bunch_id);
        ann.brix = b.brix;
        ann.acid = b.acid;
      }
      out.annotations.push_back(ann);
    }
    if (p.ground_truth_box) {
      out.boxes.push_back({layout.cube_id,
                           Box{static_cast<double>(s0), static_cast<double>(l0), static_cast<double>(s0 + ns),
                               static_cast<double>(l0 + nl)}});
    }
  }

  std::vector<float> shadow(L * S, 1.0f);
  if (domain.shadow_prob > 0) {
    std::bernoulli_distribution occluded(domain.shadow_prob);
    for (float& v : shadow) v = occluded(rng) ? 1.0f : 0.0f;
    blur(shadow, L, S, 1, kShadowSmoothPx);
    for (float& v : shadow) v = static_cast<float>(1.0 - kShadowStrength * v);
  }

  const std::vector<double> sky = planck_illuminant(wl, kSkyKelvin);
  std::vector<double> direct(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double o2 = 1.0 - domain.o2_absorption_depth * gauss(wl[b], kO2CentreNm, kO2WidthNm);
    direct[b] = domain.intensity_scale * domain.illuminant[b] * o2;
  }
  std::vector<float> radiance(L * S * B);
  for (std::size_t px = 0; px < L * S; ++px) {
    const std::vector<double>& r = spectra[static_cast<std::size_t>(mat[px])];
    const double g = settings.full_scale_dn * shade[px];
    for (std::size_t b = 0; b < B; ++b)
      radiance[px * B + b] = static_cast<float>(g * r[b] * (shadow[px] * direct[b] + domain.ambient * sky[b]));
  }
  blur(radiance, L, S, B, domain.blur_sigma);

  HsiCube cube = make_cube(L, S, domain.label, B);
  cube.wavelengths_nm = wl;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < radiance.size(); ++i) {
    const double v = radiance[i] + (settings.noise_sd_dn > 0 ? settings.noise_sd_dn * noise(rng) : 0.0);
    cube.dn[i] = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 65535.0)));
  }
  for (std::size_t l = 0; l < L; ++l) cube.geotags[l] = {layout.origin.lat_deg + 1e-6 * l, layout.origin.lon_deg};
  cube.capture_meta = {{"cube_id", layout.cube_id}, {"domain", domain.label.name()}, {"synthetic", true},
                       {"fill", material_name(layout.fill)}};
  cube.validate();
  out.cube = std::move(cube);
  return out;
}

const BunchTruth& Dataset::bunch(std::int64_t id) const {
  for (const auto& b : bunches)
    if (b.id == id) return b;
  throw DataError("unknown bunch id " + std::to_string(id));
}

const DomainPatches& Dataset::domain(const DomainLabel& label) const {
  for (const auto& d : domains)
    if (d.label == label) return d;
  throw DataError("domain " + label.name() + " is not part of the dataset");
}

DomainPatches split_patches(const DomainLabel& label, std::vector<SpectralPatch> patches,
                            std::span<const BunchTruth> bunches) {
  DomainPatches out;
  out.label = label;
  for (SpectralPatch& p : patches) {
    bool test = false;
    if (p.bunch_id) {
      const auto it = std::find_if(bunches.begin(), bunches.end(), [&](const auto& b) { return b.id == *p.bunch_id; });
      if (it == bunches.end()) throw DataError("patch references unknown bunch " + std::to_string(*p.bunch_id));
      test = it->test;
    }
    (test ? out.test : out.train).push_back(std::move(p));
  }
  return out;
}

namespace {

std::vector<BunchTruth> draw_bunches(const SynthConfig& c) {
  std::mt19937_64 rng(derive_seed(c.seed, 1));
  std::uniform_real_distribution<double> brix(c.brix_range[0], c.brix_range[1]);
  std::uniform_real_distribution<double> acid(c.acid_range[0], c.acid_range[1]);
  std::uniform_real_distribution<double> side(c.bunch_side_px[0], c.bunch_side_px[1]);
  std::normal_distribution<double> grams(0.0, c.grams_noise_sd);
  std::vector<BunchTruth> out(c.n_bunches);
  for (std::size_t i = 0; i < c.n_bunches; ++i) {
    BunchTruth& b = out[i];
    b.id = static_cast<std::int64_t>(i);
    b.brix = brix(rng);
    b.acid = acid(rng);
    b.variation = draw_variation(rng);
    if (!c.bunch_variation) b.variation = GrapeVariation{};
    b.size_px = {std::round(side(rng)), std::round(side(rng))};
    const double area = std::numbers::pi / 4.0 * b.size_px[0] * b.size_px[1];
    b.weight_g = std::max(1.0, c.grams_per_px * area + c.grams_offset + grams(rng));
  }
  std::vector<std::size_t> order(c.n_bunches);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(c.test_fraction * static_cast<double>(c.n_bunches)));
  for (std::size_t k = 0; k < std::min(n_test, c.n_bunches - 1); ++k) out[order[k]].test = true;
  return out;
}

Layout patch_layout(const SynthConfig& c, const DomainLabel& d) {
  constexpr std::size_t T = SpectralPatch::kSize, cols = 8;
  const std::size_t per = c.grape_patches_per_bunch + c.other_patches_per_bunch;
  const std::size_t total = per * c.n_bunches;
  const std::size_t rows = (total + cols - 1) / cols;
  Layout lay{"patches_" + d.name(), rows * T, cols * T, Material::Background, {}, {46.0, 7.0}};
  for (std::size_t k = 0; k < rows * cols; ++k) {
    Placement p;
    p.rect = {(k / cols) * T, (k % cols) * T, T, T};
    if (k < total) {
      const std::size_t j = k % per;
      p.bunch_id = static_cast<std::int64_t>(k / per);
      if (j < c.grape_patches_per_bunch) {
        p.material = Material::Grape;
      } else {
        p.material = (j - c.grape_patches_per_bunch) % 2 == 0 ? Material::Leaf : Material::Background;
      }
    } else {
      p.material = Material::Background;
    }
    lay.items.push_back(p);
  }
  return lay;
}

Layout weight_layout(const SynthConfig& c, const DomainLabel& d) {
  const auto cell = static_cast<std::size_t>(std::ceil(c.bunch_side_px[1])) + 8;
  auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(c.n_bunches))));
  cols = std::min(cols, kMaxSamples / cell);
  const std::size_t rows = (c.n_bunches + cols - 1) / cols;
  Layout lay{"weights_" + d.name(), rows * cell, cols * cell, Material::Leaf, {}, {46.001, 7.0}};
  for (std::size_t i = 0; i < c.n_bunches; ++i) {
    Placement p;
    p.material = Material::Grape;
    p.bunch_id = static_cast<std::int64_t>(i);
    p.ellipse = true;
    p.ground_truth_box = true;
    lay.items.push_back(p);
  }
  return lay;
}

void place_weight_bunches(Layout& lay, const SynthConfig& c, std::span<const BunchTruth> bunches) {
  const auto cell = static_cast<std::size_t>(std::ceil(c.bunch_side_px[1])) + 8;
  const std::size_t cols = lay.samples / cell;
  for (std::size_t i = 0; i < lay.items.size(); ++i) {
    const BunchTruth& b = bunches[i];
    const auto h = static_cast<std::size_t>(b.size_px[0]), w = static_cast<std::size_t>(b.size_px[1]);
    const std::size_t l0 = (i / cols) * cell + (cell - h) / 2, s0 = (i % cols) * cell + (cell - w) / 2;
    lay.items[i].rect = {l0, s0, h, w};
  }
}

Layout scan_layout(const SynthConfig& c, const DomainLabel& d, std::size_t k, std::span<const BunchTruth> bunches) {
  Layout lay{"scan_" + d.name() + "_" + std::to_string(k), c.scan_lines, c.scan_samples, Material::Leaf, {},
             {46.002 + 0.0005 * static_cast<double>(k), 7.0}};
  const std::size_t segment = c.scan_lines / c.bunches_per_scan;
  for (std::size_t j = 0; j < c.bunches_per_scan; ++j) {
    const BunchTruth& b = bunches[(k * c.bunches_per_scan + j) % bunches.size()];
    const auto h = std::min(static_cast<std::size_t>(b.size_px[0]), segment - 8);
    const auto w = std::min(static_cast<std::size_t>(b.size_px[1]), c.scan_samples - 8);
    Placement p;
    p.material = Material::Grape;
    p.bunch_id = b.id;
    p.ellipse = true;
    p.ground_truth_box = true;
    p.rect = {j * segment + (segment - h) / 2, (c.scan_samples - w) / 2, h, w};
    lay.items.push_back(p);
  }
  return lay;
}

RenderSettings settings_for(const SynthConfig& c) {
  return {default_wavelengths(c.bands), c.full_scale_dn, c.noise_sd_dn};
}

}  // namespace

Dataset make_dataset(SynthConfig config) {
  config.resolve_defaults();
  config.validate();
  Dataset d;
  d.config = config;
  d.bunches = draw_bunches(config);
  const RenderSettings rs = settings_for(config);
  for (std::size_t di = 0; di < config.domains.size(); ++di) {
    const DomainSpec& spec = config.domains[di];
    RenderedCube rc = render_cube(patch_layout(config, spec.label), d.bunches, spec, rs, derive_seed(config.seed, 2, di));
    d.domains.push_back(split_patches(spec.label, extract_patches(rc.cube, SpectralPatch::kSize, rc.annotations),
                                      d.bunches));
    d.patch_cubes.push_back(std::move(rc));
  }
  for (const auto& name : config.weight_domains) {
    const auto label = DomainLabel::parse(name);
    const auto it = std::find_if(config.domains.begin(), config.domains.end(),
                                 [&](const DomainSpec& s) { return s.label == label; });
    Layout lay = weight_layout(config, label);
    place_weight_bunches(lay, config, d.bunches);
    d.weight_cubes.push_back(
        render_cube(lay, d.bunches, *it, rs, derive_seed(config.seed, 3, static_cast<std::uint64_t>(it - config.domains.begin()))));
  }
  for (std::size_t di = 0; di < config.domains.size(); ++di) {
    for (std::size_t k = 0; k < config.scans_per_domain; ++k) {
      d.scans.push_back(render_cube(scan_layout(config, config.domains[di].label, k, d.bunches), d.bunches,
                                    config.domains[di], rs, derive_seed(config.seed, 4 + di, k)));
    }
  }
  return d;
}

namespace {

void write_rendered(const RenderedCube& rc, const std::filesystem::path& dir) {
  const std::string id = rc.cube.id();
  write_cube(rc.cube, dir / (id + ".hsic"));
  write_annotations(rc.annotations, dir / (id + ".labels.json"));
  if (!rc.boxes.empty()) {
    std::ofstream f(dir / (id + ".gt.jsonl"), std::ios::binary);
    for (const auto& b : rc.boxes) {
      f << nlohmann::json{{"image_id", b.image_id}, {"bbox", {b.box.x0, b.box.y0, b.box.x1, b.box.y1}}}.dump()
        << "\n";
    }
    if (!f) throw Error("cannot write ground truth for " + id);
  }
}

RenderedCube read_rendered(const std::filesystem::path& dir, const std::string& id) {
  RenderedCube rc;
  rc.cube = read_cube(dir / (id + ".hsic"));
  rc.annotations = read_annotations(dir / (id + ".labels.json"));
  if (std::filesystem::exists(dir / (id + ".gt.jsonl"))) rc.boxes = read_ground_truth_jsonl(dir / (id + ".gt.jsonl"));
  return rc;
}

nlohmann::json bunch_to_json(const BunchTruth& b) {
  return {{"id", b.id},
          {"brix", b.brix},
          {"acid", b.acid},
          {"weight_g", b.weight_g},
          {"size_px", b.size_px},
          {"split", b.test ? "test" : "train"},
          {"variation",
           {{"scale", b.variation.scale},
            {"edge_shift_nm", b.variation.edge_shift_nm},
            {"anthocyanin", b.variation.anthocyanin}}}};
}

BunchTruth bunch_from_json(const nlohmann::json& j) {
  BunchTruth b;
  b.id = j.at("id").get<std::int64_t>();
  b.brix = j.at("brix").get<double>();
  b.acid = j.at("acid").get<double>();
  b.weight_g = j.at("weight_g").get<double>();
  b.size_px = j.at("size_px").get<std::array<double, 2>>();
  b.test = j.at("split").get<std::string>() == "test";
  const auto& v = j.at("variation");
  b.variation = {v.at("scale").get<double>(), v.at("edge_shift_nm").get<double>(), v.at("anthocyanin").get<double>()};
  return b;
}

}  // namespace

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"format", "spectra-invar-synth-1"}, {"config", to_json(d.config)}};
  manifest["bunches"] = nlohmann::json::array();
  for (const auto& b : d.bunches) manifest["bunches"].push_back(bunch_to_json(b));
  manifest["domains"] = nlohmann::json::array();
  for (const auto& dom : d.domains) manifest["domains"].push_back(dom.label.name());
  for (const auto& [key, cubes] : {std::pair{"patch_cubes", &d.patch_cubes}, std::pair{"weight_cubes", &d.weight_cubes},
                                   std::pair{"scans", &d.scans}}) {
    manifest[key] = nlohmann::json::array();
    for (const auto& rc : *cubes) {
      write_rendered(rc, dir);
      manifest[key].push_back(rc.cube.id());
    }
  }
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  f << manifest.dump(2) << "\n";
  if (!f) throw Error("cannot write " + (dir / "manifest.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw Error("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::BadHeader, std::string("manifest.json: ") + e.what());
  }
  Dataset d;
  try {
    d.config = synth_config_from_json(m.at("config"));
    for (const auto& b : m.at("bunches")) d.bunches.push_back(bunch_from_json(b));
    for (const auto& id : m.at("patch_cubes")) d.patch_cubes.push_back(read_rendered(dir, id.get<std::string>()));
    for (const auto& id : m.at("weight_cubes")) d.weight_cubes.push_back(read_rendered(dir, id.get<std::string>()));
    for (const auto& id : m.at("scans")) d.scans.push_back(read_rendered(dir, id.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::BadRecord, std::string("manifest.json: ") + e.what());
  }
  for (const auto& rc : d.patch_cubes) {
    d.domains.push_back(split_patches(rc.cube.domain, extract_patches(rc.cube, SpectralPatch::kSize, rc.annotations),
                                      d.bunches));
  }
  return d;
}

}  // namespace spectra_invar
