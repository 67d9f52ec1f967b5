#pragma once

// Push-broom scan with three bunches at known lines, plus detections taken
// from the ground-truth boxes clipped to each window.

#include <algorithm>
#include <array>

#include "spectra_invar/pipeline.hpp"
#include "spectra_invar/synth.hpp"

namespace testing {

inline constexpr std::array<std::array<std::size_t, 2>, 3> kFixtureBunchLines{{{20, 44}, {68, 92}, {116, 140}}};

struct ScanFixture {
  spectra_invar::RenderedCube scan;
  std::vector<spectra_invar::BunchTruth> bunches;
};

inline ScanFixture make_scan_fixture(std::size_t bands = spectra_invar::kDefaultBands, std::uint64_t seed = 3,
                                     std::size_t lines = 160, std::size_t samples = 64,
                                     spectra_invar::DomainLabel::Kind domain = spectra_invar::DomainLabel::Kind::Lab) {
  using namespace spectra_invar;
  ScanFixture f;
  Layout lay{"fixture_scan", lines, samples, Material::Leaf, {}, {46.0, 7.0}};
  for (std::size_t i = 0; i < kFixtureBunchLines.size(); ++i) {
    BunchTruth b;
    b.id = static_cast<std::int64_t>(i);
    b.brix = 18.0 + 2.0 * static_cast<double>(i);
    b.acid = 6.0;
    b.size_px = {24.0, 20.0};
    f.bunches.push_back(b);
    Placement p;
    p.material = Material::Grape;
    p.bunch_id = b.id;
    p.ellipse = true;
    p.ground_truth_box = true;
    const auto [l0, l1] = kFixtureBunchLines[i];
    p.rect = {l0, 20 + 4 * i, l1 - l0, 20};
    lay.items.push_back(p);
  }
  RenderSettings rs{default_wavelengths(bands), 3500.0, 8.0};
  const auto wl = default_wavelengths(bands);
  const DomainSpec spec = domain == DomainLabel::Kind::FieldAM   ? DomainSpec::field_am(wl)
                          : domain == DomainLabel::Kind::FieldPM ? DomainSpec::field_pm(wl)
                                                                 : DomainSpec::lab(wl);
  f.scan = render_cube(lay, f.bunches, spec, rs, seed);
  return f;
}

/// Ground-truth boxes clipped to each window, window-local; boxes with less
/// than `min_lines` visible lines are left out.
inline spectra_invar::WindowDetections perfect_detections(const spectra_invar::RenderedCube& rc,
                                                          const spectra_invar::PipelineConfig& cfg,
                                                          double min_lines = 2.0) {
  using namespace spectra_invar;
  WindowDetections out;
  for (const Window& w : slide_windows(rc.cube.lines, cfg.window_lines, cfg.overlap)) {
    auto& list = out[w.offset];
    const auto lo = static_cast<double>(w.offset), hi = static_cast<double>(w.offset + w.lines);
    for (const auto& gt : rc.boxes) {
      const double y0 = std::max(gt.box.y0, lo), y1 = std::min(gt.box.y1, hi);
      if (y1 - y0 < min_lines) continue;
      list.push_back({w.offset, Box{gt.box.x0, y0 - lo, gt.box.x1, y1 - lo}, 0.9});
    }
  }
  return out;
}

}  // namespace testing
