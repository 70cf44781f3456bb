#include "bsm/errors.hpp"
#include "bsm/hierarchy.hpp"
#include "testing.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>

using namespace bsm;
using bsm::testing::T;

namespace {

T rgb(Index h, Index w, double r, double g, double b) {
  Vector<double> v(3 * h * w);
  v.segment(0, h * w).setConstant(r);
  v.segment(h * w, h * w).setConstant(g);
  v.segment(2 * h * w, h * w).setConstant(b);
  return T({3, h, w}, v);
}

HierarchyMap<double> map_of(Index h, Index w, const std::vector<double>& values) {
  HierarchyMap<double> m;
  m.values = Eigen::Map<const Plane<double>>(values.data(), h, w);
  return m;
}

// Insertion sort over (key, index): stable by construction.
Permutation brute_argsort(const std::vector<double>& keys) {
  Permutation order;
  for (Index i = 0; i < static_cast<Index>(keys.size()); ++i) {
    auto pos = order.end();
    while (pos != order.begin() && keys[*(pos - 1)] > keys[i]) --pos;
    order.insert(pos, i);
  }
  return order;
}

}  // namespace

TEST_CASE("luma score") {
  CHECK(luma_score(rgb(2, 2, 1, 1, 1)).values.isApproxToConstant(1.0, 1e-15));
  CHECK((luma_score(rgb(2, 2, 0, 0, 0)).values == 0.0).all());
  CHECK(luma_score(rgb(1, 1, 1, 0, 0)).values(0, 0) == doctest::Approx(0.299).epsilon(1e-15));
  CHECK_THROWS_AS(luma_score(T::zeros({1, 2, 2})), InputError);
}

TEST_CASE("histogram score is the luma CDF") {
  CHECK((histogram_score(rgb(3, 3, 0.4, 0.4, 0.4)).values == 1.0).all());
  Vector<double> v = Vector<double>::Zero(3 * 4 * 4);
  for (Index c = 0; c < 3; ++c) v.segment(c * 16 + 8, 8).setOnes();  // bottom half white
  const auto s = histogram_score(T({3, 4, 4}, v));
  CHECK(s.values(0, 0) == 0.5);
  CHECK(s.values(3, 3) == 1.0);
  CHECK_THROWS_AS(histogram_score(rgb(2, 2, 0, 0, 0), 1), ConfigError);

  Rng rng(1);
  const T img = uniform<double>({3, 16, 16}, 0, 1, rng);
  const auto luma = luma_score(img), hist = histogram_score(img);
  for (Index i = 0; i < 256; ++i)
    for (Index j = 0; j < 256; ++j)
      if (luma.values(i / 16, i % 16) < luma.values(j / 16, j % 16))
        CHECK(hist.values(i / 16, i % 16) <= hist.values(j / 16, j % 16));
}

TEST_CASE("luma and histogram plans agree when luma bins are distinct") {
  // One pixel per 8-bit level, shuffled; then every luma falls in its own bin.
  Rng rng(2);
  std::vector<double> levels(256);
  for (int i = 0; i < 256; ++i) levels[i] = (i + 0.5) / 256.0;
  std::shuffle(levels.begin(), levels.end(), rng);
  Vector<double> v(3 * 256);
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 256; ++i) v[c * 256 + i] = levels[i];
  const T img({3, 16, 16}, v);
  CHECK(build_sort_plan(luma_score(img)).forward_index == build_sort_plan(histogram_score(img)).forward_index);
}

TEST_CASE("grading ranges and semantic map") {
  const auto r2 = grading_ranges(2);
  REQUIRE(r2.size() == 3);
  CHECK(r2[0] == std::make_pair(0.0, 1.0 / 3));
  CHECK(r2[1] == std::make_pair(1.0 / 3, 2.0 / 3));
  CHECK(r2[2] == std::make_pair(2.0 / 3, 1.0));

  CHECK((semantic_map(InstanceMaskSet<double>::empty(4, 4)).values == 0.5).all());

  InstanceMaskSet<double> one;
  one.height = one.width = 4;
  Plane<double> m = Plane<double>::Zero(4, 4);
  m.block(1, 1, 2, 2) = 1.0;
  one.instance_maps = {m};
  one.scores = {0.9};
  const auto s = semantic_map(one);
  CHECK(s.values(1, 1) == doctest::Approx((1 + 0.9) / 2).epsilon(1e-15));
  CHECK(s.values(0, 0) == 0.25);

  // Range partition, and the highest-confidence instance wins overlaps.
  InstanceMaskSet<double> three;
  three.height = three.width = 6;
  Rng rng(3);
  for (int k = 0; k < 3; ++k) {
    Plane<double> mk = Plane<double>::Zero(6, 6);
    mk.block(k, k, 3, 3) = 0.3 + 0.2 * k;
    three.instance_maps.push_back(mk);
  }
  three.scores = {0.8, 0.2, 0.5};  // ranks 3, 1, 2
  const auto t = semantic_map(three);
  const int rank[3] = {3, 1, 2};
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 6; ++x) {
      int best = 0;
      for (int k = 0; k < 3; ++k)
        if (three.instance_maps[k](y, x) > 0) best = std::max(best, rank[k]);
      const double lo = best / 4.0, hi = (best + 1) / 4.0;
      CHECK(t.values(y, x) >= lo);
      CHECK(t.values(y, x) <= hi);
      if (best == 0) CHECK(t.values(y, x) == 0.125);
    }

  InstanceMaskSet<double> bad = one;
  bad.instance_maps[0] = Plane<double>::Zero(3, 4);
  CHECK_THROWS_AS(semantic_map(bad), InputError);
}

TEST_CASE("stable argsort") {
  const auto plan = build_sort_plan(map_of(1, 3, {0.3, 0.1, 0.2}));
  CHECK(plan.forward_index == Permutation{1, 2, 0});
  CHECK(plan.inverse_index == Permutation{2, 0, 1});

  const auto flat = build_sort_plan(map_of(2, 3, std::vector<double>(6, 0.7)));
  CHECK(flat.forward_index == Permutation{0, 1, 2, 3, 4, 5});

  Rng rng(4);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> keys(30);
    for (auto& k : keys) k = level(rng) / 5.0;
    const auto p = build_sort_plan(map_of(5, 6, keys));
    CHECK(p.forward_index == brute_argsort(keys));
    for (Index i = 0; i < 30; ++i) CHECK(p.inverse_index[p.forward_index[i]] == i);
  }
  CHECK_THROWS_AS(build_sort_plan(map_of(1, 2, {0.1, std::nan("")})), InputError);
}

TEST_CASE("plans are invariant under strictly increasing transforms") {
  Rng rng(5);
  std::vector<double> keys(64), warped(64);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 64; ++i) {
    keys[i] = u(rng);
    warped[i] = std::pow(keys[i], 3.0) * 0.5 + 0.1;
  }
  CHECK(build_sort_plan(map_of(8, 8, keys)) .forward_index == build_sort_plan(map_of(8, 8, warped)).forward_index);
}

TEST_CASE("downsample map") {
  CHECK(downsample_map(map_of(2, 2, {0, 0, 1, 1}), 1, 1).values(0, 0) == 0.5);
  CHECK(downsample_map(map_of(4, 4, std::vector<double>(16, 0.3)), 2, 2).values.isApproxToConstant(0.3, 1e-15));

  Rng rng(6);
  std::vector<double> keys(64);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& k : keys) k = u(rng);
  const auto d = downsample_map(map_of(8, 8, keys), 2, 4);
  for (Index y = 0; y < 2; ++y)
    for (Index x = 0; x < 4; ++x) {
      double s = 0;
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 2; ++j) s += keys[(y * 4 + i) * 8 + x * 2 + j];
      CHECK(std::abs(d.values(y, x) - s / 8) < 1e-12);
    }
  CHECK_THROWS_AS(downsample_map(map_of(8, 8, keys), 3, 3), ConfigError);
}

TEST_CASE("mask sidecars") {
  const auto dir = testing::scratch_dir("sidecar");
  const auto image = dir / "a.png";
  Plane<int> labels = Plane<int>::Zero(4, 4);
  labels(0, 0) = 1;
  labels(3, 3) = 2;
  write_mask_sidecar(image, labels, {0.7, 0.4});
  CHECK(has_mask_sidecar(image));
  const auto set = load_mask_sidecar(image, std::make_pair(Index(4), Index(4)));
  CHECK(set.count() == 2);
  CHECK(set.scores[1] == 0.4);
  CHECK_THROWS_AS(load_mask_sidecar(image, std::make_pair(Index(5), Index(4))), DatasetError);

  // Three ids but two score lines.
  labels(2, 2) = 3;
  GrayImage pgm{4, 4, 65535, {}};
  for (Index i = 0; i < 16; ++i) pgm.pixels.push_back(static_cast<std::uint16_t>(labels(i / 4, i % 4)));
  write_pgm(sidecar_paths(image).labels, pgm);
  try {
    load_mask_sidecar(image);
    FAIL("expected a mask-consistency error");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()).find("mask-consistency") != std::string::npos);
  }
}
