#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lumexp/core.hpp"
#include "lumexp/errors.hpp"
#include "lumexp/rng.hpp"

using namespace lumexp;
namespace fs = std::filesystem;

namespace {

// Independent point-in-hull oracle: p is inside conv(S) iff no supporting
// line through two points of S separates p from S. No hull construction, no
// scan conversion; O(n^2) per query.
bool oracle_in_hull(double px, double py, const std::vector<LandmarkPoint>& pts) {
  const double eps = 1e-9;
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = 0; j < pts.size(); ++j) {
      if (i == j) continue;
      const double ax = pts[i][0], ay = pts[i][1];
      const double dx = pts[j][0] - ax, dy = pts[j][1] - ay;
      bool all_left = true;
      for (const auto& q : pts) {
        if (dx * (q[1] - ay) - dy * (q[0] - ax) < -eps) {
          all_left = false;
          break;
        }
      }
      if (all_left && dx * (py - ay) - dy * (px - ax) < -eps) return false;
    }
  return true;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("lumexp_core_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name, const std::string& contents) {
    fs::path p = path / name;
    std::ofstream out(p);
    out << contents;
    return p.string();
  }
};

ImageTensor gradient_image(int64_t h, int64_t w) {
  ImageTensor img = ImageTensor::zeros(h, w);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        img.at(c, y, x) = 2.0 * static_cast<double>(x) / static_cast<double>(w - 1) - 1.0;
  return img;
}

}  // namespace

TEST_CASE("encode_conditions produces tiled one-hot planes") {
  AttributeSpec spec;  // 6 x 20
  auto maps = encode_conditions(2, 5, spec, 128, 128);
  CHECK(maps.expression_maps.shape == Shape{6, 128, 128});
  CHECK(maps.lighting_maps.shape == Shape{20, 128, 128});
  int64_t plane = 128 * 128;
  for (int64_t ch = 0; ch < 6; ++ch) {
    double want = ch == 2 ? 1.0 : 0.0;
    CHECK(maps.expression_maps.data[static_cast<size_t>(ch * plane)] == want);
    CHECK(maps.expression_maps.data[static_cast<size_t>(ch * plane + plane - 1)] == want);
  }
  double light_sum = 0;
  for (double v : maps.lighting_maps.data) light_sum += v;
  CHECK(light_sum == static_cast<double>(plane));  // exactly one active channel

  AttributeSpec tiny{2, 2, {}, {}};
  auto small = encode_conditions(0, 0, tiny, 4, 4);
  CHECK(small.expression_maps.shape == Shape{2, 4, 4});
  for (int64_t i = 0; i < 16; ++i) CHECK(small.expression_maps.data[static_cast<size_t>(i)] == 1.0);

  CHECK_THROWS_AS(encode_conditions(6, 0, spec, 128, 128), BoundsError);
  CHECK_THROWS_AS(encode_conditions(0, 20, spec, 128, 128), BoundsError);
  CHECK_THROWS_AS(encode_conditions(-1, 0, spec, 128, 128), BoundsError);
}

TEST_CASE("encode_conditions invariants hold for random ids and specs") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    AttributeSpec spec;
    spec.num_expressions = 2 + static_cast<int64_t>(rng.uniform_index(9));
    spec.num_lightings = 2 + static_cast<int64_t>(rng.uniform_index(9));
    const int64_t h = 4 + static_cast<int64_t>(rng.uniform_index(13));
    const int64_t w = 4 + static_cast<int64_t>(rng.uniform_index(13));
    const int64_t e = static_cast<int64_t>(rng.uniform_index(spec.num_expressions));
    const int64_t l = static_cast<int64_t>(rng.uniform_index(spec.num_lightings));
    auto maps = encode_conditions(e, l, spec, h, w);
    // every position: exactly one nonzero expression and lighting channel,
    // and every channel spatially constant
    for (int64_t ch = 0; ch < spec.num_expressions; ++ch) {
      const double first = maps.expression_maps.data[static_cast<size_t>(ch * h * w)];
      CHECK(first == (ch == e ? 1.0 : 0.0));
      for (int64_t i = 1; i < h * w; ++i)
        REQUIRE(maps.expression_maps.data[static_cast<size_t>(ch * h * w + i)] == first);
    }
    for (int64_t ch = 0; ch < spec.num_lightings; ++ch) {
      const double first = maps.lighting_maps.data[static_cast<size_t>(ch * h * w)];
      CHECK(first == (ch == l ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("mask_from_landmarks matches the documented examples") {
  // Square corners, inclusive centers 10..20 on both axes -> 11 * 11 pixels.
  auto square = mask_from_landmarks({{10, 10}, {10, 20}, {20, 20}, {20, 10}}, 64, 64);
  CHECK(square.count() == 121);

  auto tri = mask_from_landmarks({{0, 0}, {0, 2}, {2, 0}}, 8, 8);
  CHECK(tri.count() == 6);

  CHECK_THROWS_AS(mask_from_landmarks({{0, 0}, {5, 5}}, 8, 8), GeometryError);
  CHECK_THROWS_AS(mask_from_landmarks({{0, 0}, {2, 2}, {4, 4}, {6, 6}}, 8, 8), GeometryError);
}

TEST_CASE("mask_from_landmarks agrees with the separating-line oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t h = 24, w = 24;
    std::vector<LandmarkPoint> pts;
    const size_t n = 3 + rng.uniform_index(6);
    for (size_t i = 0; i < n; ++i)
      pts.push_back({rng.uniform(1.0, static_cast<double>(w) - 2.0),
                     rng.uniform(1.0, static_cast<double>(h) - 2.0)});
    FaceMask mask;
    try {
      mask = mask_from_landmarks(pts, h, w);
    } catch (const GeometryError&) {
      continue;  // degenerate random draw
    }
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const bool expected =
            oracle_in_hull(static_cast<double>(x), static_cast<double>(y), pts);
        REQUIRE(mask.mask.data[static_cast<size_t>(y * w + x)] == (expected ? 1.0 : 0.0));
      }
  }
}

TEST_CASE("apply_mask blacks out dropped pixels and is idempotent") {
  ImageTensor img = gradient_image(8, 8);

  FaceMask ones;
  ones.mask = Tensor::ones({8, 8});
  ImageTensor same = apply_mask(img, ones);
  for (size_t i = 0; i < img.chw.data.size(); ++i) CHECK(same.chw.data[i] == img.chw.data[i]);

  FaceMask zeros;
  zeros.mask = Tensor::zeros({8, 8});
  ImageTensor black = apply_mask(img, zeros);
  for (double v : black.chw.data) CHECK(v == -1.0);

  FaceMask half;
  half.mask = Tensor::zeros({8, 8});
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 4; ++x) half.mask.data[static_cast<size_t>(y * 8 + x)] = 1.0;
  ImageTensor halved = apply_mask(img, half);
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x)
      for (int64_t c = 0; c < 3; ++c)
        CHECK(halved.at(c, y, x) == (x < 4 ? img.at(c, y, x) : -1.0));

  ImageTensor twice = apply_mask(halved, half);
  for (size_t i = 0; i < twice.chw.data.size(); ++i)
    CHECK(twice.chw.data[i] == halved.chw.data[i]);

  FaceMask wrong;
  wrong.mask = Tensor::ones({4, 4});
  CHECK_THROWS_AS(apply_mask(img, wrong), DimensionError);
}

TEST_CASE("mirror flips columns and is an involution") {
  ImageTensor img = gradient_image(8, 8);
  ImageTensor m = mirror(img);
  for (int64_t x = 0; x < 8; ++x) CHECK(m.at(0, 3, x) == img.at(0, 3, 7 - x));

  Rng rng(3);
  ImageTensor noise = ImageTensor::zeros(12, 16);
  for (auto& v : noise.chw.data) v = rng.uniform(-1.0, 1.0);
  ImageTensor twice = mirror(mirror(noise));
  for (size_t i = 0; i < noise.chw.data.size(); ++i)
    CHECK(twice.chw.data[i] == noise.chw.data[i]);

  // symmetric image unchanged
  ImageTensor sym = ImageTensor::zeros(4, 4);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x = 0; x < 4; ++x) sym.at(c, y, x) = (x == 0 || x == 3) ? 0.5 : -0.25;
  ImageTensor sym_m = mirror(sym);
  for (size_t i = 0; i < sym.chw.data.size(); ++i) CHECK(sym_m.chw.data[i] == sym.chw.data[i]);
}

TEST_CASE("aggregate_ratings computes mean and population deviation") {
  auto [mu1, sg1] = aggregate_ratings({7, 7, 7});
  CHECK(mu1 == 7.0);
  CHECK(sg1 == 0.0);

  // oracle: independent mean / population-variance computation
  std::vector<double> vals = {5, 7, 9};
  double om = (5.0 + 7.0 + 9.0) / 3.0;
  double ov = ((5 - om) * (5 - om) + (7 - om) * (7 - om) + (9 - om) * (9 - om)) / 3.0;
  auto [mu2, sg2] = aggregate_ratings(vals);
  CHECK(mu2 == doctest::Approx(om).epsilon(1e-12));
  CHECK(sg2 == doctest::Approx(std::sqrt(ov)).epsilon(1e-12));
  CHECK(sg2 == doctest::Approx(1.632993161855452).epsilon(1e-12));

  auto [mu3, sg3] = aggregate_ratings({0, 10});
  CHECK(mu3 == 5.0);
  CHECK(sg3 == 5.0);

  CHECK_THROWS_AS(aggregate_ratings({}), ValidationError);
  CHECK_THROWS_AS(aggregate_ratings({4.0, 11.0}), ValidationError);
  CHECK_THROWS_AS(aggregate_ratings({-0.5}), ValidationError);
}

TEST_CASE("aggregate_ratings: permutation invariance, sigma zero iff constant") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> vals;
    const size_t n = 1 + rng.uniform_index(8);
    for (size_t i = 0; i < n; ++i) vals.push_back(rng.uniform(0.0, 10.0));
    auto [mu, sigma] = aggregate_ratings(vals);
    std::vector<double> shuffled = vals;
    rng.shuffle(shuffled);
    auto [mu2, sigma2] = aggregate_ratings(shuffled);
    CHECK(mu == doctest::Approx(mu2).epsilon(1e-12));
    CHECK(sigma == doctest::Approx(sigma2).epsilon(1e-12));
    const bool constant = std::all_of(vals.begin(), vals.end(),
                                      [&](double v) { return v == vals[0]; });
    CHECK((sigma == 0.0) == constant);
  }
}

TEST_CASE("load_manifest parses, validates and preserves order") {
  TempDir dir;
  dir.file("a.png", "x");
  dir.file("b.png", "x");
  dir.file("c.png", "x");
  AttributeSpec spec;

  std::string path = dir.file("ok.jsonl",
                              R"({"image": "a.png", "expression": 0, "lighting": 3}
{"image": "b.png", "expression": 5, "lighting": 19, "subject": 7}
{"image": "c.png", "expression": 1, "lighting": 0, "landmarks": [[1, 2], [3, 4], [5, 1]]}
)");
  auto manifest = load_manifest(path, spec);
  REQUIRE(manifest.size() == 3);
  CHECK(manifest.records[1].subject.value() == 7);
  CHECK(manifest.records[2].landmarks->size() == 3);
  CHECK(manifest.records[0].image.find("a.png") != std::string::npos);

  std::string bad_label = dir.file("bad_label.jsonl",
                                   R"({"image": "a.png", "expression": 0, "lighting": 20}
)");
  CHECK_THROWS_WITH_AS(load_manifest(bad_label, spec) /* lighting 20 under (6,20) */,
                       doctest::Contains("lighting id 20"), ValidationError);

  std::string empty = dir.file("empty.jsonl", "");
  CHECK(load_manifest(empty, spec).empty());

  std::string malformed = dir.file("broken.jsonl", "{\"image\": \"a.png\"\n");
  CHECK_THROWS_WITH_AS(load_manifest(malformed, spec), doctest::Contains(":1:"), ParseError);

  std::string missing = dir.file("missing.jsonl",
                                 R"({"image": "nope.png", "expression": 0, "lighting": 0}
)");
  CHECK_THROWS_AS(load_manifest(missing, spec), ValidationError);
  CHECK_NOTHROW(load_manifest(missing, spec, /*require_paths=*/false));
}

TEST_CASE("ratings files round-trip and cross-check stored moments") {
  TempDir dir;
  std::string path = dir.file("r.jsonl",
                              R"({"image": "a.png", "ratings": [5, 7, 9]}
{"image": "b.png", "mu": 4.5, "sigma": 0.5}
)");
  auto recs = load_ratings(path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].mu == doctest::Approx(7.0));
  CHECK(recs[0].sigma == doctest::Approx(1.632993161855452));
  CHECK(recs[1].mu == 4.5);

  std::string lying = dir.file("lying.jsonl",
                               R"({"image": "a.png", "ratings": [5, 7, 9], "mu": 6.0}
)");
  CHECK_THROWS_AS(load_ratings(lying), ValidationError);

  std::string incomplete = dir.file("incomplete.jsonl", R"({"image": "a.png", "mu": 6.0}
)");
  CHECK_THROWS_AS(load_ratings(incomplete), ValidationError);

  save_ratings(recs, (dir.path / "out.jsonl").string());
  auto again = load_ratings((dir.path / "out.jsonl").string());
  CHECK(again[0].mu == recs[0].mu);
  CHECK(again[0].sigma == recs[0].sigma);
}

TEST_CASE("default ellipse mask covers the face region only") {
  FaceMask mask = default_ellipse_mask(64, 64);
  CHECK(mask.mask.data[static_cast<size_t>(33 * 64 + 32)] == 1.0);  // center
  CHECK(mask.mask.data[0] == 0.0);                                  // corner
  const double frac =
      static_cast<double>(mask.count()) / static_cast<double>(64 * 64);
  CHECK(frac > 0.5);
  CHECK(frac < 0.75);  // pi * 0.42 * 0.48 ~= 0.63
}
