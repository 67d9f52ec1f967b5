#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "spectra_invar/checkpoint.hpp"
#include "spectra_invar/error.hpp"
#include "spectra_invar/param_store.hpp"
#include "spectra_invar/tensor.hpp"

using namespace spectra_invar;
using spectra_invar::testing::gradcheck;
using spectra_invar::testing::random_away_from_zero;
using spectra_invar::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;
constexpr int kSeeds = 20;

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Weighted sum with fixed random weights so every output element matters.
Var weighted(Graph<double>& g, Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DiffTensor<double> w = random_tensor(g.shape(x), rng, -1, 1, false);
  return g.frobenius_sq(x, g.constant(w.shape, w.values));
}

}  // namespace

TEST_CASE("conv2d forward cases") {
  Graph<float> g;
  DiffTensor<float> x({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  DiffTensor<float> k({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  DiffTensor<float> b({1}, {0.0f});
  Var y = g.conv2d(g.input(x), g.input(k), g.input(b), 1, 0);
  CHECK(g.shape(y) == Shape{1, 1, 1, 1});
  CHECK(g.item(y) == 9.0f);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> d(-1, 1);
  std::vector<float> xs(2 * 1 * 5 * 4);
  for (float& e : xs) e = d(rng);
  DiffTensor<float> x2({2, 1, 5, 4}, xs);
  DiffTensor<float> id({1, 1, 1, 1}, {1.0f});
  Graph<float> g2;
  Var y2 = g2.conv2d(g2.input(x2), g2.input(id), g2.input(b), 1, 0);
  CHECK(g2.shape(y2) == x2.shape);
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(g2.value(y2)[i] == xs[i]);
}

TEST_CASE("conv2d output size and shape errors") {
  Graph<float> g;
  auto x = DiffTensor<float>::zeros({2, 3, 8, 8});
  auto k = DiffTensor<float>::zeros({5, 3, 3, 3});
  auto b = DiffTensor<float>::zeros({5});
  Var vx = g.input(x), vk = g.input(k), vb = g.input(b);
  CHECK(g.shape(g.conv2d(vx, vk, vb, 2, 1)) == Shape{2, 5, 4, 4});
  CHECK(g.shape(g.conv2d(vx, vk, vb, 1, 0)) == Shape{2, 5, 6, 6});

  auto bad_k = DiffTensor<float>::zeros({5, 4, 3, 3});
  CHECK_THROWS_AS(g.conv2d(vx, g.input(bad_k), vb, 1, 1), ShapeError);
  auto big_k = DiffTensor<float>::zeros({5, 3, 11, 11});
  CHECK_THROWS_AS(g.conv2d(vx, g.input(big_k), vb, 1, 1), ShapeError);
  auto bad_b = DiffTensor<float>::zeros({4});
  CHECK_THROWS_AS(g.conv2d(vx, vk, g.input(bad_b), 1, 1), ShapeError);
}

TEST_CASE("conv2d kernel gradient of sum matches finite differences") {
  std::mt19937_64 rng(11);
  std::vector<DiffTensor<double>> leaves{random_tensor({2, 4, 8, 8}, rng),
                                         random_tensor({6, 4, 3, 3}, rng),
                                         random_tensor({6}, rng)};
  leaves[0].requires_grad = false;
  const double err = gradcheck(leaves, [](Graph<double>& g, const std::vector<Var>& v) {
    return g.sum(g.conv2d(v[0], v[1], v[2], 1, 1));
  });
  CHECK(err < kTol);
}

TEST_CASE("conv2d gradients over random shapes, strides and pads") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 3, 6),
                      w = pick(rng, 3, 6), k = pick(rng, 1, 3);
    const int stride = static_cast<int>(pick(rng, 1, 2)), pad = static_cast<int>(pick(rng, 0, 1));
    std::vector<DiffTensor<double>> leaves{random_tensor({n, c, h, w}, rng),
                                           random_tensor({k, c, 3, 3}, rng),
                                           random_tensor({k}, rng)};
    const double err = gradcheck(leaves, [&](Graph<double>& g, const std::vector<Var>& v) {
      return weighted(g, g.conv2d(v[0], v[1], v[2], stride, pad), seed);
    });
    CHECK_MESSAGE(err < kTol, "seed " << seed);
  }
}

TEST_CASE("linear forward and gradients") {
  Graph<float> g;
  DiffTensor<float> x({1, 2}, {1, 2}), w({2, 2}, {1, 0, 0, 1}), b({2}, {3, 3});
  Var y = g.linear(g.input(x), g.input(w), g.input(b));
  CHECK(g.value(y)[0] == 4.0f);
  CHECK(g.value(y)[1] == 5.0f);
  DiffTensor<float> bad({3, 2}, std::vector<float>(6, 0.f));
  CHECK_THROWS_AS(g.linear(g.input(x), g.input(bad), g.input(b)), ShapeError);

  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const std::size_t n = seed == 0 ? 3 : pick(rng, 1, 4), d = seed == 0 ? 5 : pick(rng, 1, 6),
                      m = seed == 0 ? 4 : pick(rng, 1, 5);
    std::vector<DiffTensor<double>> leaves{random_tensor({n, d}, rng), random_tensor({d, m}, rng),
                                           random_tensor({m}, rng)};
    const double err = gradcheck(leaves, [&](Graph<double>& g2, const std::vector<Var>& v) {
      return weighted(g2, g2.linear(v[0], v[1], v[2]), seed);
    });
    CHECK_MESSAGE(err < kTol, "seed " << seed);
  }
}

TEST_CASE("gradient reversal layer") {
  std::mt19937_64 rng(5);
  DiffTensor<double> x = random_tensor({3, 4}, rng);
  Graph<double> g;
  Var vx = g.input(x);
  Var r = g.grl(vx, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(r)[i] == x.values[i]);

  // upstream gradient w, so d/dx = -w
  DiffTensor<double> w = random_tensor({3, 4}, rng, -1, 1, false);
  x.zero_grad();
  {
    Graph<double> h;
    Var out = h.grl(h.input(x), 1.0);
    // sum(out * w) written as (||out + w||^2 - ||out - w||^2) / 4
    Var cw = h.constant(w.shape, w.values);
    Var plus = h.frobenius_sq(out, h.scale(cw, -1.0));
    Var minus = h.frobenius_sq(out, cw);
    h.backward(h.scale(h.add(plus, h.scale(minus, -1.0)), 0.25));
  }
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad[i] == doctest::Approx(-w.values[i]).epsilon(1e-12));

  x.zero_grad();
  {
    Graph<double> h;
    Var out = h.grl(h.grl(h.input(x), 1.0), 1.0);
    h.backward(h.sum(out));
  }
  for (double e : x.grad) CHECK(e == 1.0);

  x.zero_grad();
  {
    Graph<double> h;
    h.backward(h.sum(h.grl(h.input(x), 2.5)));
  }
  for (double e : x.grad) CHECK(e == -2.5);

  Graph<double> h;
  CHECK_THROWS_AS(h.grl(h.input(x), 0.0), ConfigError);
}

TEST_CASE("activation and reduction gradients") {
  using Op = std::function<Var(Graph<double>&, Var)>;
  const std::vector<std::pair<const char*, Op>> unary = {
      {"relu", [](Graph<double>& g, Var x) { return g.relu(x); }},
      {"leaky_relu", [](Graph<double>& g, Var x) { return g.leaky_relu(x, 0.01); }},
      {"sigmoid", [](Graph<double>& g, Var x) { return g.sigmoid(x); }},
      {"tanh", [](Graph<double>& g, Var x) { return g.tanh(x); }},
      {"softmax_rows", [](Graph<double>& g, Var x) { return g.softmax_rows(x); }},
      {"reshape", [](Graph<double>& g, Var x) { return g.reshape(x, {numel(g.shape(x))}); }},
      {"scale", [](Graph<double>& g, Var x) { return g.scale(x, -1.7); }},
  };
  for (const auto& [name, op] : unary) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(200 + seed);
      const std::size_t r = pick(rng, 1, 5), c = pick(rng, 2, 6);
      std::vector<DiffTensor<double>> leaves{random_away_from_zero({r, c}, rng)};
      const double err = gradcheck(leaves, [&](Graph<double>& g, const std::vector<Var>& v) {
        return weighted(g, op(g, v[0]), seed);
      });
      CHECK_MESSAGE(err < kTol, name << " seed " << seed);
    }
  }

  const std::vector<std::pair<const char*, Op>> reductions = {
      {"sum", [](Graph<double>& g, Var x) { return g.sum(g.scale(x, 1.3)); }},
      {"mean", [](Graph<double>& g, Var x) { return g.mean(g.leaky_relu(x, 0.2)); }},
      {"spatial_mean",
       [](Graph<double>& g, Var x) {
         Var m = g.spatial_mean(g.reshape(x, {1, g.shape(x)[0], g.shape(x)[1], 1}));
         return g.frobenius_sq(m, g.scale(m, 0.5));
       }},
  };
  for (const auto& [name, op] : reductions) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(300 + seed);
      std::vector<DiffTensor<double>> leaves{
          random_away_from_zero({pick(rng, 1, 5), pick(rng, 1, 6)}, rng)};
      const double err = gradcheck(leaves, [&](Graph<double>& g, const std::vector<Var>& v) {
        return op(g, v[0]);
      });
      CHECK_MESSAGE(err < kTol, name << " seed " << seed);
    }
  }
}

TEST_CASE("loss gradients: mse, frobenius_sq, cross_entropy, rows, same_bin_pair_sq") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(400 + seed);
    {
      const Shape s = seed == 0 ? Shape{8, 8, 4} : Shape{pick(rng, 1, 4), pick(rng, 1, 5)};
      std::vector<DiffTensor<double>> leaves{random_tensor(s, rng), random_tensor(s, rng)};
      CHECK(gradcheck(leaves, [](Graph<double>& g, const std::vector<Var>& v) {
              return g.frobenius_sq(v[0], v[1]);
            }) < kTol);
      CHECK(gradcheck(leaves, [](Graph<double>& g, const std::vector<Var>& v) {
              return g.mse(v[0], v[1]);
            }) < kTol);
    }
    {
      const std::size_t n = pick(rng, 1, 6), c = pick(rng, 2, 4);
      std::vector<int> cls(n);
      for (int& k : cls) k = static_cast<int>(pick(rng, 0, c - 1));
      std::vector<DiffTensor<double>> leaves{random_tensor({n, c}, rng, -3, 3)};
      CHECK(gradcheck(leaves, [&](Graph<double>& g, const std::vector<Var>& v) {
              return g.cross_entropy(v[0], cls);
            }) < kTol);
    }
    {
      const std::size_t n = pick(rng, 2, 7), d = pick(rng, 1, 5);
      std::vector<std::int64_t> bins(n);
      for (auto& b : bins) b = static_cast<std::int64_t>(pick(rng, 0, 2));
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < n; i += 2) idx.push_back(i);
      std::vector<DiffTensor<double>> leaves{random_tensor({n, d}, rng)};
      CHECK(gradcheck(leaves, [&](Graph<double>& g, const std::vector<Var>& v) {
              return g.same_bin_pair_sq(v[0], bins);
            }) < kTol);
      CHECK(gradcheck(leaves, [&](Graph<double>& g, const std::vector<Var>& v) {
              return weighted(g, g.rows(v[0], idx), seed);
            }) < kTol);
    }
  }
}

TEST_CASE("loss values on hand cases") {
  Graph<double> g;
  Var a = g.constant({2}, {1, 2});
  CHECK(g.item(g.mse(a, g.constant({2}, {1, 2}))) == 0.0);

  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 60.0}) {
    Var logits = g.constant({1, 2}, {margin, 0.0});
    const std::vector<int> cls{0};
    const double l = g.item(g.cross_entropy(logits, cls));
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-20);
  const std::vector<int> uniform_cls{1, 0};
  CHECK(g.item(g.cross_entropy(g.constant({2, 2}, {0.3, 0.3, -1, -1}), uniform_cls)) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<int> bad{2};
  CHECK_THROWS_AS(g.cross_entropy(g.constant({1, 2}, {0, 0}), bad), ShapeError);

  // single pair in one bin
  std::vector<double> z(2 * 4, 0.0);
  z[4] = 1.0;
  const std::vector<std::int64_t> same{3, 3}, diff{3, 4};
  CHECK(g.item(g.same_bin_pair_sq(g.constant({2, 4}, z), same)) == 1.0);
  CHECK(g.item(g.same_bin_pair_sq(g.constant({2, 4}, z), diff)) == 0.0);
}

TEST_CASE("backward populates exactly the bound leaves and runs once") {
  std::mt19937_64 rng(9);
  DiffTensor<double> a = random_tensor({3}, rng), b = random_tensor({3}, rng),
                     unused = random_tensor({3}, rng);
  Graph<double> g;
  Var va = g.input(a), vb = g.input(b);
  g.input(unused);
  Var da = g.detach(va);
  Var root = g.sum(g.add(g.add(va, vb), da));
  g.backward(root);
  for (double e : a.grad) CHECK(e == 1.0);
  for (double e : b.grad) CHECK(e == 1.0);
  for (double e : unused.grad) CHECK(e == 0.0);
  for (double e : g.grad(da)) CHECK(e == 0.0);
  CHECK_FALSE(g.requires_grad(da));
  CHECK_THROWS_AS(g.backward(root), GraphError);

  Graph<double> h;
  CHECK_THROWS_AS(h.backward(h.input(a)), ShapeError);
}

TEST_CASE("adam update") {
  ParamStore<float> store(1);
  auto& p = store.add("p", {1}, "main");
  p.grad[0] = 1.0f;
  Adam<float> adam({{"main", AdamSettings{0.1, 0.9, 0.999, 1e-8}}});
  adam.step(store);
  // m_hat = 1, v_hat = 1 on the first bias-corrected step
  CHECK(p.values[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-7));

  ParamStore<float> still(1);
  auto& q = still.add("q", {3}, "main");
  q.values = {1.0f, -2.0f, 3.0f};
  Adam<float> adam2({{"main", AdamSettings{0.1}}});
  adam2.step(still);
  CHECK(q.values == std::vector<float>{1.0f, -2.0f, 3.0f});

  ParamStore<float> two(1);
  auto& fast = two.add("fast", {1}, "a");
  auto& slow = two.add("slow", {1}, "b");
  fast.grad[0] = slow.grad[0] = 1.0f;
  Adam<float> adam3({{"a", AdamSettings{0.5}}, {"b", AdamSettings{0.01}}});
  adam3.step(two);
  CHECK(fast.values[0] == doctest::Approx(-0.5).epsilon(1e-6));
  CHECK(slow.values[0] == doctest::Approx(-0.01).epsilon(1e-6));

  fast.grad[0] = std::nanf("");
  CHECK_THROWS_AS(adam3.step(two), NumericError);
  CHECK(slow.values[0] == doctest::Approx(-0.01).epsilon(1e-6));

  ParamStore<float> orphan(1);
  orphan.add("x", {1}, "nogroup");
  CHECK_THROWS_AS(adam3.step(orphan), ConfigError);
  CHECK_THROWS_AS(orphan.add("x", {1}, "a"), ConfigError);
}

TEST_CASE("kaiming init bounds and determinism") {
  ParamStore<float> a(42), b(42), c(43);
  auto& wa = a.add_kaiming("w", {16, 8}, "g", 8);
  auto& wb = b.add_kaiming("w", {16, 8}, "g", 8);
  auto& wc = c.add_kaiming("w", {16, 8}, "g", 8);
  CHECK(wa.values == wb.values);
  CHECK(wa.values != wc.values);
  const float bound = std::sqrt(6.0f / 8.0f);
  for (float v : wa.values) CHECK(std::abs(v) <= bound);
}

TEST_CASE("checkpoint container round-trips randomized stores") {
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    ParamStore<float> store(trial);
    const std::size_t n = pick(rng, 1, 5);
    for (std::size_t i = 0; i < n; ++i) {
      Shape s;
      for (std::size_t d = pick(rng, 1, 4); d > 0; --d) s.push_back(pick(rng, 1, 5));
      store.add_kaiming("t" + std::to_string(i), s, i % 2 ? "ae" : "disc", 3);
    }
    Container c;
    c.kind = "test";
    c.seed = trial;
    c.meta = {{"trial", trial}};
    append_params(c, store);
    c.tensors.push_back({"buf", {2}, "f64", "buffer", {std::acos(-1.0), 1e-300}});
    const auto bytes = encode_container(c);
    const Container back = decode_container(bytes);
    CHECK(encode_container(back) == bytes);
    const ParamStore<float> restored = params_from_container(back);
    REQUIRE(restored.entries().size() == store.entries().size());
    for (const auto& [name, e] : store.entries()) {
      CHECK(restored.at(name).values == e.tensor.values);
      CHECK(restored.at(name).shape == e.tensor.shape);
      CHECK(restored.group_of(name) == e.group);
    }
    CHECK(back.tensor("buf").values[0] == std::acos(-1.0));
    CHECK(back.meta["trial"] == trial);
  }
}

TEST_CASE("checkpoint decode errors") {
  Container c;
  c.kind = "x";
  c.tensors.push_back({"a", {4}, "f32", "g", {1, 2, 3, 4}});
  auto bytes = encode_container(c);
  auto kind_of = [](const std::vector<char>& b) {
    try {
      decode_container(b);
    } catch (const FormatError& e) {
      return e.kind();
    }
    FAIL("expected FormatError");
    return FormatError::Kind::BadRecord;
  };
  CHECK(kind_of({}) == FormatError::Kind::BadMagic);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK(kind_of(truncated) == FormatError::Kind::Truncated);
  auto extra = bytes;
  extra.push_back('\0');
  CHECK(kind_of(extra) == FormatError::Kind::SizeMismatch);

  const auto path = std::filesystem::temp_directory_path() / "spectra_invar_ckpt_test.sinv";
  write_container(c, path);
  CHECK(read_container(path).tensor("a").values == std::vector<double>{1, 2, 3, 4});
  std::filesystem::remove(path);
}
