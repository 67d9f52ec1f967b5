#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "scan_fixture.hpp"
#include "spectra_invar/error.hpp"
#include "spectra_invar/pipeline.hpp"

using namespace spectra_invar;

namespace {

std::vector<std::size_t> offsets(const std::vector<Window>& ws) {
  std::vector<std::size_t> o;
  for (const Window& w : ws) o.push_back(w.offset);
  return o;
}

QualityFn fixed_quality(double fraction) {
  return [fraction](std::span<const SpectralPatch> patches) {
    BunchQuality q;
    q.patches = patches.size();
    q.grape_patches = static_cast<std::size_t>(fraction * static_cast<double>(patches.size()));
    q.empty = q.grape_patches == 0;
    q.grape_fraction = fraction;
    q.brix_mean = 20.5;
    q.acid_mean = 6.25;
    return q;
  };
}

// Grams from the box area so records can be told apart.
double area_weight(const HsiCube&, const Box& b) { return b.area() * 0.4 + 25; }

}  // namespace

TEST_CASE("window offsets") {
  CHECK(offsets(slide_windows(100, 50, 0.5)) == std::vector<std::size_t>{0, 25, 50});
  CHECK(offsets(slide_windows(100, 25, 0.0)) == std::vector<std::size_t>{0, 25, 50, 75});
  CHECK(offsets(slide_windows(100, 100, 0.5)) == std::vector<std::size_t>{0});
  CHECK(offsets(slide_windows(160, 64, 0.5)) == std::vector<std::size_t>{0, 32, 64, 96});
  CHECK(offsets(slide_windows(110, 50, 0.5)) == std::vector<std::size_t>{0, 25, 50, 60});
  CHECK(offsets(slide_windows(5, 3, 0.9)) == std::vector<std::size_t>{0, 1, 2});
  for (const Window& w : slide_windows(110, 50, 0.5)) CHECK(w.lines == 50);
  CHECK_THROWS_AS(slide_windows(100, 50, 1.0), ConfigError);
  CHECK_THROWS_AS(slide_windows(100, 50, -0.1), ConfigError);
  CHECK_THROWS_AS(slide_windows(40, 50, 0.5), ConfigError);
}

TEST_CASE("window view carries lines and geotags") {
  HsiCube c = make_cube(10, 3, DomainLabel::lab(), 16);
  for (std::size_t i = 0; i < c.dn.size(); ++i) c.dn[i] = static_cast<std::uint16_t>(i);
  for (std::size_t l = 0; l < 10; ++l) c.geotags[l] = {46.0 + static_cast<double>(l), 7.0};
  const HsiCube v = window_view(c, {4, 3});
  CHECK(v.lines == 3);
  CHECK(v.at(0, 1, 2) == c.at(4, 1, 2));
  CHECK(v.at(2, 2, 15) == c.at(6, 2, 15));
  CHECK(v.geotags[1].lat_deg == 51.0);
  CHECK_THROWS_AS(window_view(c, {8, 3}), ShapeError);
}

TEST_CASE("tracker matching") {
  SUBCASE("same box in consecutive windows is one track") {
    Tracker t(0.5, 4);
    const std::vector<Box> b{{10, 20, 30, 40}};
    t.update(b, {0, 64});
    t.update(b, {32, 64});
    REQUIRE(t.tracks().size() == 1);
    CHECK(t.tracks()[0].observations == 2);
  }
  SUBCASE("disjoint boxes are two tracks") {
    Tracker t(0.5, 4);
    const std::vector<Box> b{{0, 10, 10, 20}, {20, 10, 30, 20}};
    t.update(b, {0, 64});
    CHECK(t.tracks().size() == 2);
  }
  SUBCASE("IoU below the threshold opens a new track") {
    Tracker t(0.5, 4);
    t.update(std::vector<Box>{{0, 10, 10, 20}}, {0, 64});
    // Shifted along x so that intersection / union is exactly 0.4.
    const Box moved{0, 10, 10, 20};
    const Box shifted{4.2857142857142856, 10, 14.285714285714286, 20};
    CHECK(iou(moved, shifted) == doctest::Approx(0.4));
    t.update(std::vector<Box>{shifted}, {32, 64});
    CHECK(t.tracks().size() == 2);
  }
  SUBCASE("box cut by a window edge still matches its full view") {
    Tracker t(0.5, 4);
    t.update(std::vector<Box>{{10, 50, 30, 64}}, {0, 64});
    t.update(std::vector<Box>{{10, 50, 30, 74}}, {32, 64});
    CHECK(t.tracks().size() == 1);
  }
  SUBCASE("state machine") {
    Tracker t(0.5, 4);
    const auto framed = t.update(std::vector<Box>{{10, 20, 30, 40}}, {0, 64});
    REQUIRE(framed == std::vector<std::uint64_t>{0});
    CHECK(t.track(0).state == TrackState::FullyFramed);
    t.mark_emitted(0);
    CHECK(t.track(0).state == TrackState::Emitted);
    CHECK_THROWS_AS(t.mark_emitted(0), GraphError);
    CHECK(t.update(std::vector<Box>{{10, 20, 30, 40}}, {8, 64}).empty());
  }
  CHECK_THROWS_AS(Tracker(1.0, 4), ConfigError);
}

TEST_CASE("fully framed margin") {
  const Window w{32, 64};
  CHECK(fully_framed({0, 36, 5, 92}, w, 4));
  CHECK_FALSE(fully_framed({0, 35, 5, 92}, w, 4));
  CHECK_FALSE(fully_framed({0, 36, 5, 93}, w, 4));
  CHECK(fully_framed({0, 32, 5, 96}, w, 0));
}

TEST_CASE("detection ingestion") {
  std::istringstream ok(
      "{\"window_offset\":0,\"bbox\":[1,2,3,4],\"score\":0.5}\n\n"
      "{\"window_offset\":32,\"bbox\":[0,0,5,5],\"score\":1}\n"
      "{\"window_offset\":0,\"bbox\":[5,6,7,8],\"score\":0.25}\n");
  const WindowDetections d = parse_detections_jsonl(ok);
  REQUIRE(d.size() == 2);
  CHECK(d.at(0).size() == 2);
  CHECK(d.at(0)[1].bbox == Box{5, 6, 7, 8});
  CHECK(d.at(32)[0].score == 1.0);

  std::istringstream bad("{\"window_offset\":0,\"bbox\":[1,2,3,4]}\n{\"window_offset\":0,\"bbox\":[1,2]}\n");
  try {
    parse_detections_jsonl(bad, "dets.jsonl");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("dets.jsonl:2") != std::string::npos);
  }
  std::istringstream not_json("{oops\n");
  CHECK_THROWS_AS(parse_detections_jsonl(not_json), FormatError);

  try {
    to_cube_box({0, Box{10, 50, 20, 70}, 1.0}, {32, 64}, 64);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("[10,50,20,70]") != std::string::npos);
  }
  CHECK(to_cube_box({32, Box{10, 5, 20, 15}, 1.0}, {32, 64}, 64) == Box{10, 37, 20, 47});

  const auto path = std::filesystem::temp_directory_path() / "spectra_invar_dets.jsonl";
  write_detections_jsonl(d, path);
  const WindowDetections back = read_detections_jsonl(path);
  CHECK(back.at(0)[0].bbox == d.at(0)[0].bbox);
  CHECK(back.at(32)[0].score == d.at(32)[0].score);
  std::filesystem::remove(path);
}

TEST_CASE("fixture scan yields each bunch exactly once") {
  const auto f = testing::make_scan_fixture(32);
  PipelineConfig cfg;
  const WindowDetections dets = testing::perfect_detections(f.scan, cfg);
  REQUIRE(dets.size() == 4);
  const ScanResult r = process_scan(f.scan.cube, dets, cfg, fixed_quality(1.0), area_weight);
  REQUIRE(r.records.size() == 3);
  REQUIRE(r.tracks.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const BunchRecord& rec = r.records[i];
    CHECK(rec.id == i);
    const auto [l0, l1] = testing::kFixtureBunchLines[i];
    CHECK(rec.bbox.y0 == static_cast<double>(l0));
    CHECK(rec.bbox.y1 == static_cast<double>(l1));
    const auto centre = static_cast<std::size_t>((l0 + l1) / 2);
    CHECK(rec.lat_deg == f.scan.cube.geotags[centre].lat_deg);
    CHECK(rec.lon_deg == f.scan.cube.geotags[centre].lon_deg);
    CHECK(rec.brix == 20.5);
    CHECK(rec.weight_g == doctest::Approx(rec.bbox.area() * 0.4 + 25));
    CHECK(r.tracks[i].state == TrackState::Emitted);
    CHECK(r.tracks[i].observations >= 2);
  }
}

TEST_CASE("a bunch seen in four windows is emitted once") {
  const auto f = testing::make_scan_fixture(32);
  PipelineConfig cfg;
  cfg.overlap = 0.75;  // stride 16: part of the middle bunch shows in windows 16 to 80
  const WindowDetections dets = testing::perfect_detections(f.scan, cfg);
  std::size_t seen = 0;
  for (const auto& [off, list] : dets)
    for (const Detection& d : list)
      if (d.bbox.y0 + static_cast<double>(off) >= 68 && d.bbox.y1 + static_cast<double>(off) <= 92) ++seen;
  CHECK(seen >= 4);
  const ScanResult r = process_scan(f.scan.cube, dets, cfg, fixed_quality(1.0), area_weight);
  CHECK(r.records.size() == 3);
  CHECK(r.tracks.size() == 3);
}

TEST_CASE("streaming equals batch byte for byte") {
  const auto f = testing::make_scan_fixture(32);
  PipelineConfig cfg;
  const WindowDetections dets = testing::perfect_detections(f.scan, cfg);
  const ScanResult batch = process_scan(f.scan.cube, dets, cfg, fixed_quality(1.0), area_weight);

  ScanProcessor stream(cfg, fixed_quality(1.0), area_weight);
  std::vector<BunchRecord> records;
  for (const Window& w : slide_windows(f.scan.cube.lines, cfg.window_lines, cfg.overlap)) {
    // Each window is materialized on its own, as a live sensor would deliver it.
    const HsiCube part = decode_cube(encode_cube(window_view(f.scan.cube, w)));
    for (const BunchRecord& r : stream.push(part, w, dets.at(w.offset))) records.push_back(r);
  }
  CHECK(records_csv(records) == records_csv(batch.records));
  CHECK(records_geojson(records) == records_geojson(batch.records));
  CHECK_THROWS_AS(stream.push(window_view(f.scan.cube, {0, 64}), {0, 64}, {}), DataError);
}

TEST_CASE("grape fraction suppression") {
  const auto f = testing::make_scan_fixture(32);
  PipelineConfig cfg;
  const WindowDetections dets = testing::perfect_detections(f.scan, cfg);
  const ScanResult r = process_scan(f.scan.cube, dets, cfg, fixed_quality(0.1), area_weight);
  CHECK(r.records.empty());
  REQUIRE(r.log.size() == 3);
  CHECK(r.log[0].message.find("suppressed") != std::string::npos);
  for (const auto& t : r.tracks) CHECK(t.state == TrackState::Emitted);
  cfg.g_min = 0.05;
  CHECK(process_scan(f.scan.cube, dets, cfg, fixed_quality(0.1), area_weight).records.size() == 3);
}

TEST_CASE("empty detections and failing predictions") {
  const auto f = testing::make_scan_fixture(32);
  PipelineConfig cfg;
  CHECK(process_scan(f.scan.cube, {}, cfg, fixed_quality(1.0), area_weight).records.empty());

  const WindowDetections dets = testing::perfect_detections(f.scan, cfg);
  int calls = 0;
  const WeightFn flaky = [&](const HsiCube& c, const Box& b) {
    if (calls++ == 1) throw DataError("weight model exploded");
    return area_weight(c, b);
  };
  const ScanResult r = process_scan(f.scan.cube, dets, cfg, fixed_quality(1.0), flaky);
  CHECK(r.records.size() == 2);
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].track_id == 1);
  CHECK(r.log[0].message.find("exploded") != std::string::npos);

  WindowDetections stray;
  stray[5].push_back({5, Box{1, 1, 5, 5}, 1.0});
  CHECK_THROWS_AS(process_scan(f.scan.cube, stray, cfg, fixed_quality(1.0), area_weight), DataError);
}

TEST_CASE("record files") {
  BunchRecord r;
  r.id = 7;
  r.lat_deg = 46.0000215;
  r.lon_deg = 7.0;
  r.weight_g = 123.4567891;
  r.brix = 20.0;
  r.acid = 6.5;
  r.grape_fraction = 2.0 / 3.0;
  const std::vector<BunchRecord> rs{r};
  CHECK(records_csv(rs) ==
        "id,lat,lon,weight_g,brix,acid,grape_fraction\n7,46.000022,7.000000,123.456789,20.000000,6.500000,0.666667\n");
  const auto j = nlohmann::json::parse(records_geojson(rs));
  CHECK(j["type"] == "FeatureCollection");
  REQUIRE(j["features"].size() == 1);
  const auto& feat = j["features"][0];
  CHECK(feat["geometry"]["type"] == "Point");
  CHECK(feat["geometry"]["coordinates"][0].get<double>() == 7.0);
  CHECK(feat["geometry"]["coordinates"][1].get<double>() == doctest::Approx(46.000022));
  CHECK(feat["properties"]["id"] == 7);
  CHECK(feat["properties"]["grape_fraction"].get<double>() == doctest::Approx(0.666667));
  CHECK(nlohmann::json::parse(records_geojson({}))["features"].empty());

  const auto dir = std::filesystem::temp_directory_path() / "spectra_invar_records";
  write_records(rs, dir);
  std::ifstream in(dir / "records.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == records_csv(rs));
  std::filesystem::remove_all(dir);
}

TEST_CASE("bunch patches tile the box") {
  HsiCube c = make_cube(40, 40, DomainLabel::lab(), 16);
  for (std::size_t i = 0; i < c.dn.size(); ++i) c.dn[i] = static_cast<std::uint16_t>(100 + i % 7);
  CHECK(bunch_patches(c, {0, 0, 16, 16}, 4, SgConfig{5, 2, 1}).size() == 9);
  CHECK(bunch_patches(c, {0, 0, 16, 16}, 8, SgConfig{5, 2, 1}).size() == 4);
  const auto tiny = bunch_patches(c, {37, 37, 40, 40}, 4, SgConfig{5, 2, 1});
  REQUIRE(tiny.size() == 1);
  CHECK(tiny[0].source.line == 32);
  CHECK(tiny[0].source.sample == 32);
}

TEST_CASE("reference blob detector finds the fixture bunches") {
  using Kind = DomainLabel::Kind;
  for (const Kind kind : {Kind::Lab, Kind::FieldAM, Kind::FieldPM}) {
    const auto f = testing::make_scan_fixture(kDefaultBands, 5, 160, 64, kind);
    PipelineConfig cfg;
    const WindowDetections dets = detect_scan(f.scan.cube, cfg);
    const ScanResult r = process_scan(f.scan.cube, dets, cfg, fixed_quality(1.0), area_weight);
    REQUIRE(r.records.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(iou(r.records[i].bbox, f.scan.boxes[i].box) > 0.7);
  }
}

TEST_CASE("config JSON and validation") {
  PipelineConfig c;
  c.g_min = 0.3;
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<PipelineConfig>()) == j);
  CHECK(PipelineConfig{}.margin == 4);
  CHECK(PipelineConfig{}.iou_match == 0.5);
  CHECK(PipelineConfig{}.g_min == 0.5);
  nlohmann::json bad = j;
  bad["overlap"] = 1.0;
  CHECK_THROWS_AS(bad.get<PipelineConfig>(), ConfigError);
  bad = j;
  bad["iou_match"] = 0.0;
  CHECK_THROWS_AS(bad.get<PipelineConfig>(), ConfigError);
  bad = j;
  bad["extra"] = 1;
  CHECK_THROWS_AS(bad.get<PipelineConfig>(), ConfigError);
}

TEST_CASE("desk-scale scan throughput") {
  HsiCube cube = make_cube(200, 256, DomainLabel::field_am());
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(200, 3000);
  for (auto& v : cube.dn) v = static_cast<std::uint16_t>(u(rng));
  for (std::size_t l = 0; l < 200; ++l) cube.geotags[l] = {46.0 + 1e-6 * static_cast<double>(l), 7.0};
  PipelineConfig cfg;
  // Six bunches per window row of the scan, each fully framed once.
  WindowDetections dets;
  for (const Window& w : slide_windows(200, cfg.window_lines, cfg.overlap))
    for (std::size_t k = 0; k < 6; ++k) dets[w.offset].push_back({w.offset, Box{8.0 + 40.0 * k, 14, 44.0 + 40.0 * k, 50}, 1.0});

  LisaConfig lc;
  const LisaModel lisa = init_lisa(lc, kDefaultBands, {DomainLabel::lab(), DomainLabel::field_am()});
  const WeightModel weight = init_weight_model(WeightConfig{}, kDefaultBands);
  const auto t0 = std::chrono::steady_clock::now();
  const ScanResult r = process_scan(cube, dets, cfg, quality_from(lisa), weight_from(weight));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("scan of 200x256x224 with " << r.tracks.size() << " tracks took " << secs << " s");
  CHECK(r.tracks.size() >= 24);
  CHECK(secs < 60.0);
}
