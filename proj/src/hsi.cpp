#include "spectra_invar/hsi.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>

#include "binary_io.hpp"
#include "spectra_invar/error.hpp"

namespace spectra_invar {

using nlohmann::json;

DomainLabel DomainLabel::other(std::string tag) {
  if (tag.empty()) throw ConfigError("custom domain tag must be non-empty");
  for (char c : tag) {
    if (std::isupper(static_cast<unsigned char>(c))) {
      throw ConfigError("custom domain tag '" + tag + "' must be lowercase");
    }
  }
  if (tag == "lab" || tag == "field_am" || tag == "field_pm") {
    throw ConfigError("custom domain tag '" + tag + "' collides with a built-in domain");
  }
  return DomainLabel(Kind::Other, std::move(tag));
}

DomainLabel DomainLabel::parse(const std::string& name) {
  if (name == "lab") return lab();
  if (name == "field_am") return field_am();
  if (name == "field_pm") return field_pm();
  return other(name);
}

std::string DomainLabel::name() const {
  switch (kind_) {
    case Kind::Lab:
      return "lab";
    case Kind::FieldAM:
      return "field_am";
    case Kind::FieldPM:
      return "field_pm";
    case Kind::Other:
      break;
  }
  return tag_;
}

std::vector<double> default_wavelengths(std::size_t bands) {
  std::vector<double> wl(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    wl[b] = bands == 1 ? 400.0 : 400.0 + 600.0 * static_cast<double>(b) / static_cast<double>(bands - 1);
  }
  return wl;
}

std::string HsiCube::id() const {
  if (capture_meta.is_object() && capture_meta.contains("cube_id") &&
      capture_meta["cube_id"].is_string()) {
    return capture_meta["cube_id"].get<std::string>();
  }
  return "";
}

void HsiCube::validate() const {
  if (bands == 0) throw ShapeError("cube has zero bands");
  if (samples > kMaxSamples) {
    throw ShapeError("cube has " + std::to_string(samples) + " samples, more than " +
                     std::to_string(kMaxSamples));
  }
  if (dn.size() != lines * samples * bands) {
    throw ShapeError("cube payload has " + std::to_string(dn.size()) + " values, expected " +
                     std::to_string(lines * samples * bands));
  }
  if (wavelengths_nm.size() != bands) {
    throw ShapeError("cube has " + std::to_string(wavelengths_nm.size()) +
                     " wavelengths for " + std::to_string(bands) + " bands");
  }
  for (std::size_t b = 0; b < bands; ++b) {
    const double w = wavelengths_nm[b];
    if (!(w >= 400.0 && w <= 1000.0)) {
      throw ConfigError("wavelength " + std::to_string(w) + " nm outside [400, 1000]");
    }
    if (b > 0 && !(w > wavelengths_nm[b - 1])) {
      throw ConfigError("wavelengths are not strictly increasing at band " + std::to_string(b));
    }
  }
  if (geotags.size() != lines) {
    throw ShapeError("cube has " + std::to_string(geotags.size()) + " geotags for " +
                     std::to_string(lines) + " lines");
  }
}

HsiCube make_cube(std::size_t lines, std::size_t samples, DomainLabel domain, std::size_t bands) {
  HsiCube c;
  c.lines = lines;
  c.samples = samples;
  c.bands = bands;
  c.dn.assign(lines * samples * bands, 0);
  c.wavelengths_nm = default_wavelengths(bands);
  c.geotags.assign(lines, GeoTag{});
  c.domain = std::move(domain);
  return c;
}

namespace {

constexpr char kCubeMagic[] = "HSIC1\n";
constexpr std::size_t kCubeMagicLen = sizeof(kCubeMagic) - 1;

}  // namespace

std::vector<char> encode_cube(const HsiCube& cube) {
  cube.validate();
  json tags = json::array();
  for (const GeoTag& g : cube.geotags) tags.push_back({g.lat_deg, g.lon_deg});
  const json header = {{"lines", cube.lines},
                       {"samples", cube.samples},
                       {"bands", cube.bands},
                       {"dtype", "u16"},
                       {"wavelengths_nm", cube.wavelengths_nm},
                       {"domain", cube.domain.name()},
                       {"geotags", tags},
                       {"meta", cube.capture_meta}};
  const std::string text = header.dump();
  std::vector<char> out(kCubeMagic, kCubeMagic + kCubeMagicLen);
  const std::uint64_t len = text.size();
  detail::append_le(out, &len, 1);
  out.insert(out.end(), text.begin(), text.end());
  detail::append_le(out, cube.dn.data(), cube.dn.size());
  return out;
}

HsiCube decode_cube(const std::vector<char>& bytes) {
  if (bytes.size() < kCubeMagicLen || std::string(bytes.data(), kCubeMagicLen) != kCubeMagic) {
    throw FormatError(FormatError::Kind::BadMagic, "not a cube file (bad magic)");
  }
  if (bytes.size() < kCubeMagicLen + 8) {
    throw FormatError(FormatError::Kind::Truncated, "cube file truncated before header length");
  }
  std::uint64_t len = 0;
  detail::read_le(bytes.data() + kCubeMagicLen, &len, 1);
  const std::size_t body = kCubeMagicLen + 8;
  if (bytes.size() - body < len) {
    throw FormatError(FormatError::Kind::Truncated, "cube file truncated inside header");
  }
  HsiCube cube;
  try {
    const json h = json::parse(bytes.begin() + body, bytes.begin() + body + len);
    if (h.at("dtype").get<std::string>() != "u16") {
      throw FormatError(FormatError::Kind::BadHeader, "unsupported cube dtype");
    }
    cube.lines = h.at("lines").get<std::size_t>();
    cube.samples = h.at("samples").get<std::size_t>();
    cube.bands = h.at("bands").get<std::size_t>();
    cube.wavelengths_nm = h.at("wavelengths_nm").get<std::vector<double>>();
    cube.domain = DomainLabel::parse(h.at("domain").get<std::string>());
    for (const json& g : h.at("geotags")) {
      cube.geotags.push_back({g.at(0).get<double>(), g.at(1).get<double>()});
    }
    cube.capture_meta = h.at("meta");
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadHeader, std::string("cube header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::BadHeader, std::string("cube header: ") + e.what());
  }
  const std::size_t payload = bytes.size() - body - len;
  const std::size_t expected = cube.lines * cube.samples * cube.bands * sizeof(std::uint16_t);
  if (payload != expected) {
    throw FormatError(FormatError::Kind::SizeMismatch,
                      "cube header declares " + std::to_string(cube.lines) + "x" +
                          std::to_string(cube.samples) + "x" + std::to_string(cube.bands) +
                          " (" + std::to_string(expected) + " bytes) but payload has " +
                          std::to_string(payload) + " bytes");
  }
  cube.dn.resize(cube.lines * cube.samples * cube.bands);
  detail::read_le(bytes.data() + body + len, cube.dn.data(), cube.dn.size());
  try {
    cube.validate();
  } catch (const Error& e) {
    throw FormatError(FormatError::Kind::BadHeader, std::string("cube header: ") + e.what());
  }
  return cube;
}

void write_cube(const HsiCube& cube, const std::filesystem::path& path) {
  const std::vector<char> bytes = encode_cube(cube);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

HsiCube read_cube(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open cube '" + path.string() + "'");
  return decode_cube(detail::slurp(is));
}

json annotations_to_json(std::span<const Annotation> annotations) {
  json out = json::array();
  for (const Annotation& a : annotations) {
    json e = {{"cube_id", a.cube_id},
              {"rect", a.rect},
              {"brix", a.brix ? json(*a.brix) : json(nullptr)},
              {"acid", a.acid ? json(*a.acid) : json(nullptr)},
              {"is_grape", a.is_grape}};
    if (a.bunch_id) e["bunch_id"] = *a.bunch_id;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Annotation> annotations_from_json(const json& j) {
  std::vector<Annotation> out;
  try {
    for (const json& e : j) {
      Annotation a;
      a.cube_id = e.at("cube_id").get<std::string>();
      a.rect = e.at("rect").get<std::array<std::size_t, 4>>();
      if (e.contains("brix") && !e["brix"].is_null()) a.brix = e["brix"].get<double>();
      if (e.contains("acid") && !e["acid"].is_null()) a.acid = e["acid"].get<double>();
      a.is_grape = e.at("is_grape").get<bool>();
      if (e.contains("bunch_id") && !e["bunch_id"].is_null()) a.bunch_id = e["bunch_id"].get<std::int64_t>();
      out.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadRecord, std::string("annotation: ") + e.what());
  }
  return out;
}

void write_annotations(std::span<const Annotation> annotations, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << annotations_to_json(annotations).dump(1) << '\n';
}

std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open annotations '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadRecord, std::string("annotations: ") + e.what());
  }
  return annotations_from_json(j);
}

SpectralPatch patch_at(const HsiCube& cube, std::size_t line, std::size_t sample) {
  constexpr std::size_t S = SpectralPatch::kSize;
  if (line + S > cube.lines || sample + S > cube.samples) {
    throw ShapeError("patch at (" + std::to_string(line) + "," + std::to_string(sample) +
                     ") exceeds cube " + std::to_string(cube.lines) + "x" +
                     std::to_string(cube.samples));
  }
  SpectralPatch p;
  p.bands = cube.bands;
  p.data.resize(cube.bands * S * S);
  for (std::size_t r = 0; r < S; ++r) {
    for (std::size_t c = 0; c < S; ++c) {
      const std::uint16_t* spec = cube.dn.data() + cube.index(line + r, sample + c, 0);
      for (std::size_t b = 0; b < cube.bands; ++b) p.data[(b * S + r) * S + c] = spec[b];
    }
  }
  p.domain = cube.domain;
  p.source = {cube.id(), line, sample};
  return p;
}

std::vector<SpectralPatch> extract_patches(const HsiCube& cube, std::size_t stride,
                                           std::span<const Annotation> labels) {
  constexpr std::size_t S = SpectralPatch::kSize;
  if (stride == 0) throw ConfigError("patch stride must be >= 1");
  if (cube.lines < S || cube.samples < S) {
    throw ShapeError("cube " + std::to_string(cube.lines) + "x" + std::to_string(cube.samples) +
                     " is smaller than one 8x8 patch");
  }
  const std::string cid = cube.id();
  std::vector<SpectralPatch> out;
  for (std::size_t l = 0; l + S <= cube.lines; l += stride) {
    for (std::size_t s = 0; s + S <= cube.samples; s += stride) {
      SpectralPatch p = patch_at(cube, l, s);
      std::size_t best = 0;
      const Annotation* chosen = nullptr;
      for (const Annotation& a : labels) {
        if (!a.cube_id.empty() && !cid.empty() && a.cube_id != cid) continue;
        const std::size_t l0 = std::max(l, a.rect[0]), l1 = std::min(l + S, a.rect[0] + a.rect[2]);
        const std::size_t s0 = std::max(s, a.rect[1]), s1 = std::min(s + S, a.rect[1] + a.rect[3]);
        const std::size_t overlap = (l1 > l0 && s1 > s0) ? (l1 - l0) * (s1 - s0) : 0;
        if (overlap > best) {
          best = overlap;
          chosen = &a;
        }
      }
      if (chosen && 2 * best >= S * S) {
        p.annotated = true;
        p.is_grape = chosen->is_grape;
        p.brix = chosen->brix;
        p.acid = chosen->acid;
        p.bunch_id = chosen->bunch_id;
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

RgbImage pseudo_rgb(const HsiCube& cube) {
  for (std::size_t b : kPseudoRgbBands) {
    if (b >= cube.bands) {
      throw ShapeError("pseudo-RGB needs band " + std::to_string(b) + " but cube has " +
                       std::to_string(cube.bands) + " bands");
    }
  }
  RgbImage img;
  img.lines = cube.lines;
  img.samples = cube.samples;
  img.pixels.assign(cube.lines * cube.samples * 3, 0);
  const std::size_t npix = cube.lines * cube.samples;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const std::size_t band = kPseudoRgbBands[ch];
    std::uint16_t lo = std::numeric_limits<std::uint16_t>::max(), hi = 0;
    for (std::size_t p = 0; p < npix; ++p) {
      const std::uint16_t v = cube.dn[p * cube.bands + band];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi <= lo) continue;
    const double range = static_cast<double>(hi - lo);
    for (std::size_t p = 0; p < npix; ++p) {
      const double v = static_cast<double>(cube.dn[p * cube.bands + band] - lo) / range;
      img.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

}  // namespace spectra_invar
