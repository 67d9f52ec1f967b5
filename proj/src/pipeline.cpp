#include "spectra_invar/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spectra_invar/error.hpp"

namespace spectra_invar {

namespace {

void require_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("pipeline config: " + msg);
}

std::string box_string(const Box& b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "[%g,%g,%g,%g]", b.x0, b.y0, b.x1, b.y1);
  return buf;
}

// IoU of the two boxes restricted to the lines both windows cover, so a box
// cut by one window edge still matches its full view in the next window.
double overlap_iou(const Box& a, const Window& wa, const Box& b, const Window& wb) {
  const double lo = static_cast<double>(std::max(wa.offset, wb.offset));
  const double hi = static_cast<double>(std::min(wa.offset + wa.lines, wb.offset + wb.lines));
  if (hi <= lo) return 0.0;
  const Box ca{a.x0, std::max(a.y0, lo), a.x1, std::min(a.y1, hi)};
  const Box cb{b.x0, std::max(b.y0, lo), b.x1, std::min(b.y1, hi)};
  if (ca.y1 <= ca.y0 || cb.y1 <= cb.y0) return 0.0;
  return iou(ca, cb);
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void PipelineConfig::validate() const {
  require_config(window_lines > 0, "window_lines must be positive");
  require_config(overlap >= 0 && overlap < 1, "overlap must lie in [0,1)");
  require_config(iou_match > 0 && iou_match < 1, "iou_match must lie in (0,1)");
  require_config(g_min >= 0 && g_min <= 1, "g_min must lie in [0,1]");
  require_config(patch_stride > 0, "patch_stride must be positive");
  require_config(2 * margin < window_lines, "margin leaves no room in the window");
  sg.validate();
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"window_lines", c.window_lines}, {"overlap", c.overlap}, {"margin", c.margin},
       {"iou_match", c.iou_match},       {"g_min", c.g_min},     {"patch_stride", c.patch_stride},
       {"sg", c.sg}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  const PipelineConfig d;
  try {
    c.window_lines = j.value("window_lines", d.window_lines);
    c.overlap = j.value("overlap", d.overlap);
    c.margin = j.value("margin", d.margin);
    c.iou_match = j.value("iou_match", d.iou_match);
    c.g_min = j.value("g_min", d.g_min);
    c.patch_stride = j.value("patch_stride", d.patch_stride);
    c.sg = j.value("sg", d.sg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  for (const auto& [key, _] : j.items()) {
    if (!nlohmann::json(c).contains(key)) throw ConfigError("pipeline config: unknown key '" + key + "'");
  }
  c.validate();
}

std::vector<Window> slide_windows(std::size_t cube_lines, std::size_t window_lines, double overlap) {
  if (!(overlap >= 0 && overlap < 1)) throw ConfigError("window overlap must lie in [0,1)");
  if (window_lines == 0 || window_lines > cube_lines) {
    throw ConfigError("window of " + std::to_string(window_lines) + " lines does not fit a cube of " +
                      std::to_string(cube_lines));
  }
  const auto stride = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(static_cast<double>(window_lines) * (1.0 - overlap))));
  std::vector<Window> out;
  for (std::size_t off = 0;; off += stride) {
    if (off + window_lines >= cube_lines) {
      out.push_back({cube_lines - window_lines, window_lines});
      break;
    }
    out.push_back({off, window_lines});
  }
  return out;
}

HsiCube window_view(const HsiCube& cube, const Window& w) {
  if (w.lines == 0 || w.offset + w.lines > cube.lines) throw ShapeError("window leaves the cube");
  HsiCube v;
  v.lines = w.lines;
  v.samples = cube.samples;
  v.bands = cube.bands;
  const std::size_t per_line = cube.samples * cube.bands;
  v.dn.assign(cube.dn.begin() + static_cast<std::ptrdiff_t>(w.offset * per_line),
              cube.dn.begin() + static_cast<std::ptrdiff_t>((w.offset + w.lines) * per_line));
  v.wavelengths_nm = cube.wavelengths_nm;
  v.geotags.assign(cube.geotags.begin() + static_cast<std::ptrdiff_t>(w.offset),
                   cube.geotags.begin() + static_cast<std::ptrdiff_t>(w.offset + w.lines));
  v.domain = cube.domain;
  v.capture_meta = cube.capture_meta;
  v.capture_meta["window_offset"] = w.offset;
  return v;
}

WindowDetections parse_detections_jsonl(std::istream& in, const std::string& source) {
  WindowDetections out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(n);
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      Detection d;
      d.window_offset = j.at("window_offset").get<std::size_t>();
      const auto& b = j.at("bbox");
      if (!b.is_array() || b.size() != 4) throw FormatError(FormatError::Kind::BadRecord, where + ": bbox must have 4 numbers");
      d.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      d.score = j.value("score", 1.0);
      if (!(d.score >= 0 && d.score <= 1)) throw FormatError(FormatError::Kind::BadRecord, where + ": score outside [0,1]");
      out[d.window_offset].push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatError::Kind::BadRecord, where + ": " + e.what());
    }
  }
  return out;
}

WindowDetections read_detections_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open detections " + path.string());
  return parse_detections_jsonl(in, path.string());
}

void write_detections_jsonl(const WindowDetections& dets, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [offset, list] : dets) {
    for (const Detection& d : list) {
      out << nlohmann::json{{"window_offset", offset},
                            {"bbox", {d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1}},
                            {"score", d.score}}
                 .dump()
          << '\n';
    }
  }
}

Box to_cube_box(const Detection& d, const Window& w, std::size_t samples) {
  const Box& b = d.bbox;
  if (!(b.x1 > b.x0) || !(b.y1 > b.y0) || b.x0 < 0 || b.y0 < 0 || b.x1 > static_cast<double>(samples) ||
      b.y1 > static_cast<double>(w.lines)) {
    throw DataError("detection " + box_string(b) + " outside window at line " + std::to_string(w.offset) + " (" +
                    std::to_string(w.lines) + " lines x " + std::to_string(samples) + " samples)");
  }
  const auto off = static_cast<double>(w.offset);
  return {b.x0, b.y0 + off, b.x1, b.y1 + off};
}

bool fully_framed(const Box& b, const Window& w, std::size_t margin) {
  const auto lo = static_cast<double>(w.offset + margin);
  const auto hi = static_cast<double>(w.offset + w.lines) - static_cast<double>(margin);
  return b.y0 >= lo && b.y1 <= hi;
}

Tracker::Tracker(double iou_match, std::size_t margin) : iou_match_(iou_match), margin_(margin) {
  if (!(iou_match > 0 && iou_match < 1)) throw ConfigError("iou_match must lie in (0,1)");
}

std::vector<std::uint64_t> Tracker::update(std::span<const Box> boxes, const Window& window) {
  struct Pair {
    double iou;
    std::size_t live;
    std::size_t det;
  };
  std::vector<Pair> pairs;
  for (std::size_t t = 0; t < live_.size(); ++t) {
    const TrackedBunch& tr = tracks_[live_[t]];
    const Window prev{tr.last_window, window.lines};
    for (std::size_t d = 0; d < boxes.size(); ++d) {
      const double v = overlap_iou(tr.bbox, prev, boxes[d], window);
      if (v >= iou_match_) pairs.push_back({v, t, d});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<std::optional<std::uint64_t>> det_track(boxes.size());
  std::vector<bool> used(live_.size(), false);
  for (const Pair& p : pairs) {
    if (used[p.live] || det_track[p.det]) continue;
    used[p.live] = true;
    det_track[p.det] = live_[p.live];
  }
  std::vector<std::uint64_t> next_live;
  for (std::size_t d = 0; d < boxes.size(); ++d) {
    if (!det_track[d]) {
      tracks_.push_back({tracks_.size(), boxes[d], 0, TrackState::Open, window.offset});
      det_track[d] = tracks_.back().id;
    }
    TrackedBunch& tr = tracks_[*det_track[d]];
    tr.bbox = boxes[d];
    tr.last_window = window.offset;
    ++tr.observations;
    next_live.push_back(tr.id);
  }
  std::sort(next_live.begin(), next_live.end());
  live_ = std::move(next_live);

  std::vector<std::uint64_t> framed;
  for (std::uint64_t id : live_) {
    TrackedBunch& tr = tracks_[id];
    if (tr.state == TrackState::Open && fully_framed(tr.bbox, window, margin_)) {
      tr.state = TrackState::FullyFramed;
      framed.push_back(id);
    }
  }
  return framed;
}

void Tracker::mark_emitted(std::uint64_t id) {
  if (id >= tracks_.size() || tracks_[id].state != TrackState::FullyFramed) {
    throw GraphError("track " + std::to_string(id) + " is not awaiting emission");
  }
  tracks_[id].state = TrackState::Emitted;
}

const TrackedBunch& Tracker::track(std::uint64_t id) const {
  if (id >= tracks_.size()) throw DataError("no track " + std::to_string(id));
  return tracks_[id];
}

QualityFn quality_from(const LisaModel& model) {
  return [&model](std::span<const SpectralPatch> patches) { return predict_bunch_quality(model, patches); };
}

WeightFn weight_from(const WeightModel& model) {
  return [&model](const HsiCube& cube, const Box& box) { return predict_weight(model, cube, box); };
}

std::vector<SpectralPatch> bunch_patches(const HsiCube& cube, const Box& box, std::size_t stride, const SgConfig& sg) {
  constexpr std::size_t P = SpectralPatch::kSize;
  if (cube.lines < P || cube.samples < P) throw ShapeError("cube smaller than one patch");
  auto starts = [&](double a0, double a1, std::size_t limit) {
    std::vector<std::size_t> s;
    const auto lo = static_cast<std::size_t>(std::max(0.0, std::ceil(a0)));
    const auto hi = static_cast<std::size_t>(std::max(0.0, std::floor(a1)));
    for (std::size_t v = lo; v + P <= hi; v += stride) s.push_back(v);
    if (s.empty()) {
      const double centre = 0.5 * (a0 + a1) - 0.5 * P;
      s.push_back(static_cast<std::size_t>(std::clamp(std::round(centre), 0.0, static_cast<double>(limit - P))));
    }
    return s;
  };
  std::vector<SpectralPatch> out;
  for (std::size_t l : starts(box.y0, box.y1, cube.lines))
    for (std::size_t s : starts(box.x0, box.x1, cube.samples)) out.push_back(sg_filter_patch(patch_at(cube, l, s), sg));
  return out;
}

ScanProcessor::ScanProcessor(PipelineConfig config, QualityFn quality, WeightFn weight)
    : config_(std::move(config)),
      quality_(std::move(quality)),
      weight_(std::move(weight)),
      tracker_(config_.iou_match, config_.margin) {
  config_.validate();
}

std::vector<BunchRecord> ScanProcessor::push(const HsiCube& wc, const Window& window,
                                             std::span<const Detection> detections) {
  if (wc.lines != window.lines) throw ShapeError("window cube does not match the window length");
  if (last_offset_ && window.offset <= *last_offset_) throw DataError("windows must be pushed in increasing offset order");
  if (last_offset_ && wc.samples != samples_) throw ShapeError("window cubes differ in sample count");
  last_offset_ = window.offset;
  samples_ = wc.samples;

  std::vector<Box> boxes;
  for (const Detection& d : detections) boxes.push_back(to_cube_box(d, window, wc.samples));
  const auto off = static_cast<double>(window.offset);

  std::vector<BunchRecord> records;
  for (std::uint64_t id : tracker_.update(boxes, window)) {
    const Box cb = tracker_.track(id).bbox;
    const Box wb{cb.x0, cb.y0 - off, cb.x1, cb.y1 - off};
    tracker_.mark_emitted(id);
    try {
      const BunchQuality q = quality_(bunch_patches(wc, wb, config_.patch_stride, config_.sg));
      if (q.empty) {
        log_.push_back({id, "suppressed: no grape patches"});
        continue;
      }
      if (q.grape_fraction < config_.g_min) {
        log_.push_back({id, "suppressed: grape fraction " + fixed6(q.grape_fraction) + " below " + fixed6(config_.g_min)});
        continue;
      }
      BunchRecord r;
      r.id = id;
      const auto centre = static_cast<std::size_t>(std::floor(0.5 * (wb.y0 + wb.y1)));
      const GeoTag& tag = wc.geotags.at(std::min(centre, wc.lines - 1));
      r.lat_deg = tag.lat_deg;
      r.lon_deg = tag.lon_deg;
      r.weight_g = weight_(wc, wb);
      r.brix = q.brix_mean;
      r.acid = q.acid_mean;
      r.grape_fraction = q.grape_fraction;
      r.bbox = cb;
      records.push_back(r);
    } catch (const Error& e) {
      log_.push_back({id, std::string("prediction failed: ") + e.what()});
    }
  }
  return records;
}

ScanResult process_scan(const HsiCube& cube, const WindowDetections& detections, const PipelineConfig& config,
                        const QualityFn& quality, const WeightFn& weight) {
  config.validate();
  const std::vector<Window> windows = slide_windows(cube.lines, config.window_lines, config.overlap);
  for (const auto& [offset, _] : detections) {
    if (std::none_of(windows.begin(), windows.end(), [&](const Window& w) { return w.offset == offset; })) {
      throw DataError("detections reference window offset " + std::to_string(offset) + ", which is not a window start");
    }
  }
  ScanProcessor proc(config, quality, weight);
  ScanResult result;
  static const std::vector<Detection> none;
  for (const Window& w : windows) {
    const auto it = detections.find(w.offset);
    const auto& dets = it == detections.end() ? none : it->second;
    for (BunchRecord& r : proc.push(window_view(cube, w), w, dets)) result.records.push_back(r);
  }
  result.log = proc.log();
  result.tracks = proc.tracker().tracks();
  return result;
}

std::string records_csv(std::span<const BunchRecord> records) {
  std::string s = "id,lat,lon,weight_g,brix,acid,grape_fraction\n";
  for (const BunchRecord& r : records) {
    s += std::to_string(r.id) + ',' + fixed6(r.lat_deg) + ',' + fixed6(r.lon_deg) + ',' + fixed6(r.weight_g) + ',' +
         fixed6(r.brix) + ',' + fixed6(r.acid) + ',' + fixed6(r.grape_fraction) + '\n';
  }
  return s;
}

std::string records_geojson(std::span<const BunchRecord> records) {
  std::string s = "{\"type\":\"FeatureCollection\",\"features\":[";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BunchRecord& r = records[i];
    if (i) s += ',';
    s += "\n{\"type\":\"Feature\",\"geometry\":{\"type\":\"Point\",\"coordinates\":[" + fixed6(r.lon_deg) + ',' +
         fixed6(r.lat_deg) + "]},\"properties\":{\"id\":" + std::to_string(r.id) + ",\"lat\":" + fixed6(r.lat_deg) +
         ",\"lon\":" + fixed6(r.lon_deg) + ",\"weight_g\":" + fixed6(r.weight_g) + ",\"brix\":" + fixed6(r.brix) +
         ",\"acid\":" + fixed6(r.acid) + ",\"grape_fraction\":" + fixed6(r.grape_fraction) + "}}";
  }
  s += "\n]}\n";
  return s;
}

void write_records(std::span<const BunchRecord> records, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, text] : {std::pair{"records.csv", records_csv(records)},
                                   std::pair{"records.geojson", records_geojson(records)}}) {
    std::ofstream out(dir / name, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + (dir / name).string());
  }
}

std::vector<Detection> detect_blobs(const HsiCube& wc, const Window& window, const BlobDetectorConfig& cfg) {
  if (cfg.numerator_band >= wc.bands || cfg.denominator_band >= wc.bands) {
    throw ConfigError("blob detector bands exceed the cube's band count");
  }
  const std::size_t L = wc.lines, S = wc.samples;
  std::vector<std::uint8_t> mask(L * S, 0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t s = 0; s < S; ++s) {
      const double num = wc.at(l, s, cfg.numerator_band);
      const double den = std::max<double>(1.0, wc.at(l, s, cfg.denominator_band));
      mask[l * S + s] = num / den > cfg.ratio_threshold;
    }
  std::vector<Detection> out;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < L * S; ++start) {
    if (mask[start] != 1) continue;
    std::size_t count = 0, l0 = L, l1 = 0, s0 = S, s1 = 0;
    stack.push_back(start);
    mask[start] = 2;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t l = p / S, s = p % S;
      ++count;
      l0 = std::min(l0, l);
      l1 = std::max(l1, l);
      s0 = std::min(s0, s);
      s1 = std::max(s1, s);
      const std::size_t nb[4] = {l > 0 ? p - S : p, l + 1 < L ? p + S : p, s > 0 ? p - 1 : p, s + 1 < S ? p + 1 : p};
      for (std::size_t q : nb)
        if (mask[q] == 1) {
          mask[q] = 2;
          stack.push_back(q);
        }
    }
    if (count < cfg.min_pixels) continue;
    out.push_back({window.offset,
                   Box{static_cast<double>(s0), static_cast<double>(l0), static_cast<double>(s1 + 1),
                       static_cast<double>(l1 + 1)},
                   1.0});
  }
  return out;
}

WindowDetections detect_scan(const HsiCube& cube, const PipelineConfig& config, const BlobDetectorConfig& detector) {
  WindowDetections out;
  for (const Window& w : slide_windows(cube.lines, config.window_lines, config.overlap)) {
    out[w.offset] = detect_blobs(window_view(cube, w), w, detector);
  }
  return out;
}

}  // namespace spectra_invar
