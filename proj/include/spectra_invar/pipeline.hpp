#pragma once

// Scan processing: overlapping windows along the line axis, detections per
// window, a greedy IoU tracker, per-bunch weight and quality inference once a
// bunch is fully framed, and georeferenced CSV/GeoJSON records.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectra_invar/hsi.hpp"
#include "spectra_invar/lisa.hpp"
#include "spectra_invar/metrics.hpp"
#include "spectra_invar/savgol.hpp"
#include "spectra_invar/weight.hpp"

namespace spectra_invar {

struct PipelineConfig {
  std::size_t window_lines = 64;
  double overlap = 0.5;
  std::size_t margin = 4;  // lines between a framed box and the window edges
  double iou_match = 0.5;
  double g_min = 0.5;
  std::size_t patch_stride = 4;
  SgConfig sg;

  /// Throws ConfigError for overlap outside [0,1), iou_match outside (0,1),
  /// g_min outside [0,1] or zero sizes.
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

struct Window {
  std::size_t offset = 0;  // first line
  std::size_t lines = 0;
  friend bool operator==(const Window&, const Window&) = default;
};

/// Stride floor(window_lines * (1 - overlap)), at least 1; the last window
/// is clamped to end at the last line. Throws ConfigError for an invalid
/// overlap or a window longer than the cube.
std::vector<Window> slide_windows(std::size_t cube_lines, std::size_t window_lines, double overlap);

/// Lines [w.offset, w.offset + w.lines) of the cube, geotags included.
HsiCube window_view(const HsiCube& cube, const Window& w);

/// bbox is window-local: x along samples, y along lines from the window start.
struct Detection {
  std::size_t window_offset = 0;
  Box bbox;
  double score = 1.0;
};

using WindowDetections = std::map<std::size_t, std::vector<Detection>>;

/// Groups JSONL lines {window_offset, bbox, score} by offset. Throws
/// FormatError naming the line on malformed input.
WindowDetections read_detections_jsonl(const std::filesystem::path& path);
WindowDetections parse_detections_jsonl(std::istream& in, const std::string& source = "<stream>");
void write_detections_jsonl(const WindowDetections& dets, const std::filesystem::path& path);

/// Cube-coordinate box; throws DataError quoting the coordinates if the box
/// is degenerate or leaves the window.
Box to_cube_box(const Detection& d, const Window& w, std::size_t samples);

enum class TrackState { Open, FullyFramed, Emitted };

struct TrackedBunch {
  std::uint64_t id = 0;
  Box bbox;  // cube coordinates, latest observation
  std::size_t observations = 0;
  TrackState state = TrackState::Open;
  std::size_t last_window = 0;  // offset of the last window that saw it
};

class Tracker {
 public:
  Tracker(double iou_match, std::size_t margin);

  /// Greedy highest-IoU matching of cube-coordinate boxes to live tracks;
  /// unmatched boxes open new tracks and tracks missing from this window
  /// retire. Returns the ids that became fully framed in this window.
  std::vector<std::uint64_t> update(std::span<const Box> boxes, const Window& window);
  /// FullyFramed -> Emitted; throws GraphError on any other transition.
  void mark_emitted(std::uint64_t id);

  const TrackedBunch& track(std::uint64_t id) const;
  /// Every track ever opened, in id order.
  const std::vector<TrackedBunch>& tracks() const { return tracks_; }

 private:
  double iou_match_;
  std::size_t margin_;
  std::vector<TrackedBunch> tracks_;
  std::vector<std::uint64_t> live_;
};

/// True when the box lies inside the window with at least `margin` lines to
/// its leading and trailing edges.
bool fully_framed(const Box& cube_box, const Window& w, std::size_t margin);

struct BunchRecord {
  std::uint64_t id = 0;
  double lat_deg = 0;
  double lon_deg = 0;
  double weight_g = 0;
  double brix = 0;
  double acid = 0;
  double grape_fraction = 0;
  Box bbox;  // cube coordinates

  friend bool operator==(const BunchRecord&, const BunchRecord&) = default;
};

struct ScanLogEntry {
  std::uint64_t track_id = 0;
  std::string message;
};

/// Quality of one bunch from its SG-filtered 8x8 patches.
using QualityFn = std::function<BunchQuality(std::span<const SpectralPatch>)>;
/// Grams for one cube-coordinate box of the given window cube.
using WeightFn = std::function<double(const HsiCube& window_cube, const Box& window_box)>;

QualityFn quality_from(const LisaModel& model);
WeightFn weight_from(const WeightModel& model);

/// SG-filtered 8x8 patches tiling the box at the given stride; boxes smaller
/// than a patch yield one patch centred on the box, clamped to the cube.
std::vector<SpectralPatch> bunch_patches(const HsiCube& cube, const Box& box, std::size_t stride,
                                         const SgConfig& sg);

/// Streaming scan processor. Windows are pushed in order of increasing
/// offset; records are returned in track-id order as bunches are framed.
class ScanProcessor {
 public:
  ScanProcessor(PipelineConfig config, QualityFn quality, WeightFn weight);

  /// `window_cube` holds only the window's lines; detections are
  /// window-local.
  std::vector<BunchRecord> push(const HsiCube& window_cube, const Window& window,
                                std::span<const Detection> detections);

  const Tracker& tracker() const { return tracker_; }
  const std::vector<ScanLogEntry>& log() const { return log_; }

 private:
  PipelineConfig config_;
  QualityFn quality_;
  WeightFn weight_;
  Tracker tracker_;
  std::vector<ScanLogEntry> log_;
  std::optional<std::size_t> last_offset_;
  std::size_t samples_ = 0;
};

struct ScanResult {
  std::vector<BunchRecord> records;
  std::vector<ScanLogEntry> log;
  std::vector<TrackedBunch> tracks;
};

/// Batch form: slides the windows over the cube and feeds a ScanProcessor.
ScanResult process_scan(const HsiCube& cube, const WindowDetections& detections, const PipelineConfig& config,
                        const QualityFn& quality, const WeightFn& weight);

std::string records_csv(std::span<const BunchRecord> records);
/// FeatureCollection of Points with the CSV columns as properties.
std::string records_geojson(std::span<const BunchRecord> records);
/// Writes records.csv and records.geojson into `dir`.
void write_records(std::span<const BunchRecord> records, const std::filesystem::path& dir);

/// Reference detector for fixtures, not a trained model: connected
/// components of pixels whose red-edge ratio exceeds the threshold, one box
/// per component of at least `min_pixels`.
struct BlobDetectorConfig {
  std::size_t numerator_band = 112;   // ~700 nm
  std::size_t denominator_band = 60;  // ~560 nm
  double ratio_threshold = 3.0;
  std::size_t min_pixels = 16;
};

std::vector<Detection> detect_blobs(const HsiCube& window_cube, const Window& window,
                                    const BlobDetectorConfig& config = {});
/// Runs the reference detector over every window.
WindowDetections detect_scan(const HsiCube& cube, const PipelineConfig& config, const BlobDetectorConfig& detector = {});

}  // namespace spectra_invar
