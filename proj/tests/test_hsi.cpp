#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "spectra_invar/error.hpp"
#include "spectra_invar/hsi.hpp"

using namespace spectra_invar;

namespace {

HsiCube random_cube(std::mt19937_64& rng, std::size_t lines, std::size_t samples,
                    std::size_t bands = kDefaultBands) {
  const DomainLabel domains[] = {DomainLabel::lab(), DomainLabel::field_am(),
                                 DomainLabel::field_pm(), DomainLabel::other("dusk")};
  HsiCube c = make_cube(lines, samples, domains[rng() % 4], bands);
  std::uniform_int_distribution<int> dn(0, 65535);
  for (auto& v : c.dn) v = static_cast<std::uint16_t>(dn(rng));
  std::uniform_real_distribution<double> deg(-90, 90);
  for (auto& g : c.geotags) g = {deg(rng), 2 * deg(rng)};
  // irregular but strictly increasing wavelengths
  double w = 400.0 + std::uniform_real_distribution<double>(0, 1)(rng);
  for (auto& x : c.wavelengths_nm) {
    x = w;
    w += std::uniform_real_distribution<double>(0.5, 2.6)(rng);
  }
  c.capture_meta = {{"cube_id", "c" + std::to_string(rng() % 1000)}, {"exposure_ms", 3.25}};
  return c;
}

FormatError::Kind decode_error_kind(const std::vector<char>& bytes) {
  try {
    decode_cube(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("expected a FormatError");
  return FormatError::Kind::BadRecord;
}

}  // namespace

TEST_CASE("domain labels") {
  CHECK(DomainLabel::parse("lab") == DomainLabel::lab());
  CHECK(DomainLabel::parse("field_pm").name() == "field_pm");
  CHECK(DomainLabel::other("overcast").name() == "overcast");
  CHECK_THROWS_AS(DomainLabel::other(""), ConfigError);
  CHECK_THROWS_AS(DomainLabel::other("Dusk"), ConfigError);
  CHECK_THROWS_AS(DomainLabel::other("lab"), ConfigError);
}

TEST_CASE("default wavelengths place the pseudo-RGB bands near 705/555/454 nm") {
  const auto wl = default_wavelengths();
  REQUIRE(wl.size() == 224);
  CHECK(wl.front() == 400.0);
  CHECK(wl.back() == 1000.0);
  CHECK(std::abs(wl[114] - 705) < 3.0);
  CHECK(std::abs(wl[58] - 555) < 3.0);
  CHECK(std::abs(wl[20] - 454) < 3.0);
}

TEST_CASE("cube file round-trips") {
  std::mt19937_64 rng(1);
  HsiCube c = random_cube(rng, 4, 8);
  const auto path = std::filesystem::temp_directory_path() / "spectra_invar_cube_test.hsic";
  write_cube(c, path);
  const HsiCube back = read_cube(path);
  CHECK(back == c);
  std::filesystem::remove(path);

  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 r(100 + trial);
    const HsiCube cube = random_cube(r, 1 + r() % 6, 1 + r() % 9, 1 + r() % 40);
    CHECK(decode_cube(encode_cube(cube)) == cube);
  }
}

TEST_CASE("cube decode errors") {
  CHECK(decode_error_kind({}) == FormatError::Kind::BadMagic);
  CHECK(decode_error_kind({'H', 'S', 'I', 'C', '2', '\n'}) == FormatError::Kind::BadMagic);

  std::mt19937_64 rng(2);
  HsiCube full = random_cube(rng, 2, 3, 224);
  HsiCube small = full;
  small.bands = 100;
  small.wavelengths_nm.resize(100);
  small.dn.resize(2 * 3 * 100);
  // header of the 224-band cube followed by a 100-band payload
  std::vector<char> header = encode_cube(full);
  header.resize(header.size() - full.dn.size() * 2);
  std::vector<char> mixed = header;
  const std::vector<char> payload100 = encode_cube(small);
  mixed.insert(mixed.end(), payload100.end() - small.dn.size() * 2, payload100.end());
  CHECK(decode_error_kind(mixed) == FormatError::Kind::SizeMismatch);

  std::vector<char> cut = encode_cube(full);
  cut.resize(20);
  CHECK(decode_error_kind(cut) == FormatError::Kind::Truncated);
}

TEST_CASE("cube invariants are enforced") {
  HsiCube c = make_cube(2, 2, DomainLabel::lab(), 3);
  CHECK_NOTHROW(c.validate());
  c.wavelengths_nm = {400, 400, 500};
  CHECK_THROWS(c.validate());
  c.wavelengths_nm = {390, 400, 500};
  CHECK_THROWS(c.validate());
  c.wavelengths_nm = {400, 450, 500};
  c.geotags.pop_back();
  CHECK_THROWS_AS(c.validate(), ShapeError);
  CHECK_THROWS_AS(encode_cube(c), ShapeError);
}

TEST_CASE("pseudo-RGB band mapping and scaling") {
  std::mt19937_64 rng(3);
  HsiCube c = make_cube(3, 5, DomainLabel::lab());
  std::uniform_int_distribution<int> noise(0, 4000);
  for (auto& v : c.dn) v = static_cast<std::uint16_t>(noise(rng));
  // R channel must follow band 114 only: write a ramp into it
  for (std::size_t l = 0; l < c.lines; ++l) {
    for (std::size_t s = 0; s < c.samples; ++s) {
      c.dn[c.index(l, s, 114)] = static_cast<std::uint16_t>(100 + 37 * s);
      c.dn[c.index(l, s, 58)] = static_cast<std::uint16_t>(500 + 11 * l);
      c.dn[c.index(l, s, 20)] = 900;
    }
  }
  const RgbImage img = pseudo_rgb(c);
  REQUIRE(img.pixels.size() == c.lines * c.samples * 3);
  for (std::size_t l = 0; l < c.lines; ++l) {
    for (std::size_t s = 0; s < c.samples; ++s) {
      const std::size_t p = (l * c.samples + s) * 3;
      // direct per-pixel scaling oracle
      const double r = (37.0 * s) / (37.0 * (c.samples - 1)) * 255.0;
      const double g = (11.0 * l) / (11.0 * (c.lines - 1)) * 255.0;
      CHECK(img.pixels[p] == static_cast<int>(std::lround(r)));
      CHECK(img.pixels[p + 1] == static_cast<int>(std::lround(g)));
      CHECK(img.pixels[p + 2] == 0);  // constant band
      if (s > 0) CHECK(img.pixels[p] >= img.pixels[p - 3]);
    }
  }

  HsiCube flat = make_cube(4, 4, DomainLabel::lab());
  std::fill(flat.dn.begin(), flat.dn.end(), 1234);
  for (auto v : pseudo_rgb(flat).pixels) CHECK(v == 0);

  HsiCube narrow = make_cube(2, 2, DomainLabel::lab(), 100);
  CHECK_THROWS_AS(pseudo_rgb(narrow), ShapeError);
}

TEST_CASE("patch extraction tiling") {
  std::mt19937_64 rng(4);
  auto count_by_enumeration = [](std::size_t l, std::size_t s, std::size_t stride) {
    std::size_t n = 0;
    for (std::size_t a = 0; a + 8 <= l; ++a)
      for (std::size_t b = 0; b + 8 <= s; ++b)
        if (a % stride == 0 && b % stride == 0) ++n;
    return n;
  };

  HsiCube c8 = random_cube(rng, 8, 8, 16);
  CHECK(extract_patches(c8, 8).size() == 1);

  HsiCube c16 = random_cube(rng, 16, 16, 16);
  const auto p8 = extract_patches(c16, 8);
  REQUIRE(p8.size() == 4);
  const std::pair<std::size_t, std::size_t> offsets[] = {{0, 0}, {0, 8}, {8, 0}, {8, 8}};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p8[i].source.line == offsets[i].first);
    CHECK(p8[i].source.sample == offsets[i].second);
  }
  const std::size_t per_axis = (16 - 8) / 4 + 1;
  CHECK(extract_patches(c16, 4).size() == per_axis * per_axis);
  CHECK(per_axis * per_axis == count_by_enumeration(16, 16, 4));
  CHECK(extract_patches(c16, 3).size() == count_by_enumeration(16, 16, 3));

  HsiCube tiny = random_cube(rng, 7, 16, 4);
  CHECK_THROWS_AS(extract_patches(tiny, 1), ShapeError);
  CHECK_THROWS_AS(extract_patches(c16, 0), ConfigError);
}

TEST_CASE("patches reproduce cube data at their source offsets") {
  for (int trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(50 + trial);
    HsiCube c = random_cube(rng, 8 + rng() % 9, 8 + rng() % 9, 1 + rng() % 20);
    for (const SpectralPatch& p : extract_patches(c, 1 + rng() % 4)) {
      CHECK(p.domain == c.domain);
      CHECK(p.source.cube_id == c.id());
      for (std::size_t b = 0; b < c.bands; ++b)
        for (std::size_t r = 0; r < 8; ++r)
          for (std::size_t col = 0; col < 8; ++col)
            REQUIRE(p.at(b, r, col) == c.at(p.source.line + r, p.source.sample + col, b));
    }
  }
}

TEST_CASE("patch labels need at least half the footprint") {
  std::mt19937_64 rng(5);
  HsiCube c = random_cube(rng, 16, 16, 8);
  c.capture_meta["cube_id"] = "cube-a";
  std::vector<Annotation> ann;
  // covers rows 0..7 and columns 0..3 of patch (0,0): exactly half
  ann.push_back({"cube-a", {0, 0, 8, 4}, 20.5, 6.1, true, 7});
  // covers 3 rows of patch (8,8): below half
  ann.push_back({"cube-a", {8, 8, 3, 8}, 18.0, 5.0, true, 8});
  // different cube: ignored
  ann.push_back({"cube-b", {0, 8, 8, 8}, 19.0, 5.5, true, 9});
  const auto patches = extract_patches(c, 8, ann);
  REQUIRE(patches.size() == 4);
  CHECK(patches[0].annotated);
  CHECK(patches[0].is_grape);
  CHECK(*patches[0].brix == 20.5);
  CHECK(*patches[0].acid == 6.1);
  CHECK(*patches[0].bunch_id == 7);
  CHECK_FALSE(patches[1].annotated);
  CHECK_FALSE(patches[1].brix.has_value());
  CHECK_FALSE(patches[3].annotated);

  const auto path = std::filesystem::temp_directory_path() / "spectra_invar_ann_test.json";
  write_annotations(ann, path);
  CHECK(read_annotations(path) == ann);
  std::filesystem::remove(path);
}
