#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "spectra_invar/error.hpp"
#include "spectra_invar/lisa.hpp"

using namespace spectra_invar;

namespace {

constexpr std::size_t kBands = 12;

LisaConfig small_config() {
  LisaConfig c;
  c.hidden_channels = {6, 4};
  c.latent_channels = 3;
  c.head_hidden = 8;
  c.disc_hidden = 5;
  c.epochs = 3;
  c.batch = 8;
  c.seed = 7;
  return c;
}

// Brix drives a bump in the upper bands, the domain adds an offset.
std::vector<SpectralPatch> toy_patches(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(17, 24);
  std::normal_distribution<double> noise(0, 0.05);
  const DomainLabel domains[] = {DomainLabel::lab(), DomainLabel::field_am()};
  std::vector<SpectralPatch> out;
  for (std::size_t i = 0; i < n; ++i) {
    SpectralPatch p;
    p.bands = kBands;
    p.domain = domains[i % 2];
    p.annotated = true;
    p.is_grape = i % 4 != 3;
    if (p.is_grape) {
      p.brix = u(rng);
      p.acid = 11 - 0.2 * *p.brix;
    }
    p.data.resize(kBands * 64);
    for (std::size_t b = 0; b < kBands; ++b)
      for (std::size_t k = 0; k < 64; ++k) {
        const double level = p.is_grape ? (b >= 8 ? 0.1 * *p.brix : 1.0) : 0.5;
        p.data[b * 64 + k] = static_cast<float>(level + (i % 2) * 0.7 + noise(rng));
      }
    out.push_back(std::move(p));
  }
  return out;
}

bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }

}  // namespace

TEST_CASE("shapes of encode, decode and heads") {
  const LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  const auto patches = toy_patches(5, 1);
  const auto z = encode(m, patches);
  CHECK(z.size() == 5 * 3 * 64);
  CHECK(decode(m, z, 5).size() == 5 * kBands * 64);
  const HeadOutputs h = predict_heads(m, z, 5);
  CHECK(h.brix.size() == 5);
  CHECK(h.acid.size() == 5);
  CHECK(h.grape_class.size() == 5);
  CHECK_THROWS_AS(predict_heads(m, z, 4), ShapeError);
  CHECK_THROWS_AS(decode(m, std::span<const float>(z).first(10), 5), ShapeError);

  SpectralPatch wrong = patches[0];
  wrong.bands = kBands + 1;
  wrong.data.resize((kBands + 1) * 64);
  CHECK_THROWS_AS(encode(m, std::span<const SpectralPatch>(&wrong, 1)), ShapeError);
}

TEST_CASE("zero input maps to zero latent when biases are zero") {
  const LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  const std::vector<float> x(2 * kBands * 64, 0.0f);
  for (float v : encode_standardized(m, x, 2)) CHECK(v == 0.0f);
}

TEST_CASE("parameter naming and groups") {
  const LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  CHECK(m.params.at("enc.conv1.weight").shape == Shape{6, kBands, 3, 3});
  CHECK(m.params.at("enc.conv3.weight").shape == Shape{3, 4, 3, 3});
  CHECK(m.params.at("dec.conv3.weight").shape == Shape{kBands, 6, 3, 3});
  CHECK(m.params.at("head.brix.fc1.weight").shape == Shape{3 * 64, 8});
  CHECK(m.params.at("head.grape.fc2.weight").shape == Shape{8, 2});
  CHECK(m.params.at("disc.fc2.weight").shape == Shape{5, 2});
  CHECK(m.params.group_of("disc.fc1.weight") == "disc");
  CHECK(m.params.group_of("head.acid.fc1.bias") == "ae");

  const LisaModel p = init_predictor(small_config(), kBands);
  CHECK(p.params.at("head.brix.fc1.weight").shape == Shape{kBands * 64, 8});
  CHECK_FALSE(p.params.contains("enc.conv1.weight"));
  CHECK_THROWS_AS(encode(p, toy_patches(1, 1)), ConfigError);
}

TEST_CASE("reversal layer negates exactly the encoder-side domain gradient") {
  LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  m.config.gamma = 0.5;
  const auto batch = toy_patches(8, 3);
  const LossTerms domain_only{false, false, false, true};

  accumulate_gradients(m, batch, domain_only, true);
  std::map<std::string, std::vector<float>> reversed;
  for (const auto& [name, e] : m.params.entries()) reversed[name] = e.tensor.grad;
  accumulate_gradients(m, batch, domain_only, false);

  bool any_nonzero = false;
  for (const auto& [name, e] : m.params.entries()) {
    const auto& plain = e.tensor.grad;
    const auto& rev = reversed.at(name);
    REQUIRE(plain.size() == rev.size());
    for (std::size_t i = 0; i < plain.size(); ++i) {
      if (is_encoder_param(name)) {
        CHECK(rev[i] == -plain[i]);
        any_nonzero = any_nonzero || plain[i] != 0.0f;
      } else if (name.rfind("disc.", 0) == 0) {
        CHECK(rev[i] == plain[i]);
      } else {
        CHECK(plain[i] == 0.0f);
      }
    }
  }
  CHECK(any_nonzero);
}

TEST_CASE("total loss recomposes from its weighted terms at every step") {
  LisaConfig c = small_config();
  c.epochs = 4;
  const auto patches = toy_patches(40, 4);
  std::size_t steps = 0;
  TrainOptions o;
  o.on_step = [&](const StepRecord& r) {
    const LossBreakdown& l = r.loss;
    const double recomposed = l.task + c.alpha * l.recon + c.beta * l.manifold + c.gamma * l.domain;
    CHECK(std::abs(l.total - recomposed) <= 1e-5 * std::abs(l.total));
    CHECK(l.domain > 0);
    ++steps;
  };
  const TrainResult r = train_lisa(c, patches, o);
  CHECK(steps == 4 * 5);
  CHECK(r.epoch_log.size() == 4);
}

TEST_CASE("manifold term is zero when no two labelled rows share a bin") {
  LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  auto batch = toy_patches(8, 5);
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch[i].brix) batch[i].brix = 17.0 + static_cast<double>(i);
  CHECK(accumulate_gradients(m, batch).manifold == 0.0);
  for (auto& p : batch)
    if (p.brix) p.brix = 20.1;
  CHECK(accumulate_gradients(m, batch).manifold > 0.0);
}

TEST_CASE("unknown domain and non-finite data are rejected") {
  LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  auto batch = toy_patches(4, 6);
  batch[1].domain = DomainLabel::field_pm();
  CHECK_THROWS_AS(accumulate_gradients(m, batch), DataError);

  auto patches = toy_patches(8, 6);
  patches[2].data[5] = std::nanf("");
  CHECK_THROWS_AS(train_lisa(small_config(), patches), DataError);

  auto one_domain = toy_patches(8, 6);
  for (auto& p : one_domain) p.domain = DomainLabel::lab();
  CHECK_THROWS_AS(train_lisa(small_config(), one_domain), DataError);
  LisaConfig no_adv = small_config();
  no_adv.gamma = 0;
  CHECK_NOTHROW(train_lisa(no_adv, one_domain));
}

TEST_CASE("non-finite loss names the offending term") {
  LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  for (float& w : m.params.at("head.brix.fc2.weight").values) w = 1e30f;
  for (float& w : m.params.at("head.brix.fc1.bias").values) w = 1e30f;
  try {
    accumulate_gradients(m, toy_patches(8, 8));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("task") != std::string::npos);
  }
}

TEST_CASE("grape head ties resolve to non-grape and bunch aggregation") {
  LisaModel m = init_lisa(small_config(), kBands, {DomainLabel::lab(), DomainLabel::field_am()});
  const auto patches = toy_patches(6, 9);
  auto set_grape = [&](float b0, float b1) {
    for (float& w : m.params.at("head.grape.fc2.weight").values) w = 0;
    m.params.at("head.grape.fc2.bias").values = {b0, b1};
  };
  set_grape(0, 0);
  for (int c : predict(m, patches).grape_class) CHECK(c == 0);

  set_grape(5, -5);
  const BunchQuality none = predict_bunch_quality(m, patches);
  CHECK(none.empty);
  CHECK(none.grape_fraction == 0.0);
  CHECK(none.patches == 6);

  set_grape(-5, 5);
  const BunchQuality all = predict_bunch_quality(m, patches);
  const HeadOutputs h = predict(m, patches);
  double brix = 0;
  for (double b : h.brix) brix += b;
  CHECK_FALSE(all.empty);
  CHECK(all.grape_fraction == 1.0);
  CHECK(all.brix_mean == doctest::Approx(brix / 6).epsilon(1e-12));
  CHECK(predict_bunch_quality(m, {}).empty);

  HeadOutputs mixed;
  mixed.brix = {20, 100, 22};
  mixed.acid = {5, 100, 7};
  mixed.grape_class = {1, 0, 1};
  const BunchQuality q = aggregate_bunch(mixed);
  CHECK(q.brix_mean == 21.0);
  CHECK(q.acid_mean == 6.0);
  CHECK(q.grape_fraction == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("training learns the toy task") {
  LisaConfig c = small_config();
  c.epochs = 60;
  c.lr_ae = 3e-3;
  c.lr_disc = 3e-3;
  const auto train = toy_patches(64, 10);
  const auto test = toy_patches(32, 11);
  for (const bool lisa : {true, false}) {
    const TrainResult r = lisa ? train_lisa(c, train) : train_predictor(c, train);
    CHECK(r.epoch_log.back().task < 0.5 * r.epoch_log.front().task);
    const HeadOutputs h = predict(r.model, test);
    double sse = 0, sst = 0, mean = 0, n = 0;
    for (const auto& p : test)
      if (p.brix) mean += *p.brix, ++n;
    mean /= n;
    int correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      correct += h.grape_class[i] == (test[i].is_grape ? 1 : 0);
      if (!test[i].brix) continue;
      sse += (h.brix[i] - *test[i].brix) * (h.brix[i] - *test[i].brix);
      sst += (*test[i].brix - mean) * (*test[i].brix - mean);
    }
    CHECK(1 - sse / sst > 0.8);
    CHECK(correct == static_cast<int>(test.size()));
  }
}

TEST_CASE("predictor-only trains the task loss alone") {
  const TrainResult r = train_predictor(small_config(), toy_patches(16, 12));
  for (const LossBreakdown& l : r.epoch_log) {
    CHECK(l.recon == 0.0);
    CHECK(l.manifold == 0.0);
    CHECK(l.domain == 0.0);
    CHECK(l.total == doctest::Approx(l.task).epsilon(1e-12));
  }
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  const auto patches = toy_patches(24, 13);
  const TrainResult a = train_lisa(small_config(), patches);
  const TrainResult b = train_lisa(small_config(), patches);
  CHECK(encode_container(to_container(a.model)) == encode_container(to_container(b.model)));

  const auto dir = std::filesystem::temp_directory_path() / "spectra_invar_test_lisa";
  std::filesystem::create_directories(dir);
  const TrainResult pred = train_predictor(small_config(), patches);
  for (const LisaModel* m : {&a.model, &pred.model}) {
    const auto path = dir / (m->kind + ".sinv");
    save_model(*m, path);
    const LisaModel back = load_model(path);
    CHECK(back.kind == m->kind);
    CHECK(back.domains == m->domains);
    CHECK(encode_container(to_container(back)) == encode_container(to_container(*m)));
    const HeadOutputs h0 = predict(*m, patches), h1 = predict(back, patches);
    CHECK(h0.brix == h1.brix);
    CHECK(h0.grape_class == h1.grape_class);
  }

  Container c = to_container(a.model);
  c.tensors.erase(c.tensors.begin());
  CHECK_THROWS_AS(lisa_from_container(c, sidecar_json(a.model)), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("epoch log CSV") {
  const auto path = std::filesystem::temp_directory_path() / "spectra_invar_epochs.csv";
  const std::vector<LossBreakdown> log{{1.5, 1, 2, 3, 4}, {0.5, 0.25, 0, 0, 0}};
  write_epoch_log(log, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,total,task,recon,manifold,domain");
  std::getline(in, line);
  CHECK(line == "0,1.5,1,2,3,4");
  std::filesystem::remove(path);
}

TEST_CASE("config JSON and validation") {
  LisaConfig c = small_config();
  c.gamma = 0.3;
  const nlohmann::json j = c;
  const LisaConfig back = j.get<LisaConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(LisaConfig{}.alpha == 0.011);
  CHECK(LisaConfig{}.beta == 0.066);
  CHECK(LisaConfig{}.gamma == 1.2e-4);
  CHECK(LisaConfig{}.lr_ae == 1.5e-4);
  CHECK(LisaConfig{}.lr_disc == 2.5e-4);

  nlohmann::json bad = j;
  bad["typo"] = 1;
  CHECK_THROWS_AS(bad.get<LisaConfig>(), ConfigError);
  bad = j;
  bad["kernel"] = 4;
  CHECK_THROWS_AS(bad.get<LisaConfig>(), ConfigError);
  bad = j;
  bad["beta"] = -1;
  CHECK_THROWS_AS(bad.get<LisaConfig>(), ConfigError);
  bad = j;
  bad["brix_bin_width"] = 0;
  CHECK_THROWS_AS(bad.get<LisaConfig>(), ConfigError);
}
