#include "bsm/errors.hpp"
#include "bsm/losses.hpp"
#include "bsm/ops.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace bsm;
using namespace bsm::testing;

namespace {

T vertical_step(Index size, Index at) {
  Vector<double> v = Vector<double>::Zero(3 * size * size);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < size; ++y)
      for (Index x = at; x < size; ++x) v[(c * size + y) * size + x] = 1.0;
  return T({1, 3, size, size}, v);
}

Plane<double> gray_step(Index size, Index at) {
  Plane<double> p = Plane<double>::Zero(size, size);
  p.rightCols(size - at) = 1.0;
  return p;
}

}  // namespace

TEST_CASE("l1") {
  Rng rng(1);
  const T a = uniform<double>({2, 3, 5, 5}, 0, 1, rng), b = uniform<double>({2, 3, 5, 5}, 0, 1, rng);
  CHECK(l1_loss(a, a).item() == 0.0);
  CHECK(l1_loss(add_scalar(a, 0.1), a).item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(std::abs(l1_loss(a, b).item() - l1_oracle(a, b)) < 1e-12);
  CHECK_THROWS_AS(l1_loss(a, T::zeros({2, 3, 5, 4})), DimensionError);
}

TEST_CASE("ssim against the scalar oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const T a = uniform<double>({3, 16, 16}, 0, 1, rng);
    const T b = quantize_8bit(T(a.shape(), (a.values().array() * 0.7 + 0.1 * trial / 20.0).matrix()));
    CHECK(std::abs(ssim(a, b).item() - ssim_oracle(a, b)) < 1e-6);
    CHECK(std::abs(ssim(a, b).item() - ssim(b, a).item()) < 1e-12);
    CHECK(ssim(a, a).item() == 1.0);
  }
  CHECK_THROWS_AS(ssim(T::zeros({1, 10, 16}), T::zeros({1, 10, 16})), InputError);
}

TEST_CASE("ssim of an inverted checkerboard is negative") {
  Vector<double> v(16 * 16);
  for (Index i = 0; i < 256; ++i) v[i] = ((i / 16 + i % 16) % 2) ? 1.0 : 0.0;
  const T board({1, 16, 16}, v);
  const T inverted = add_scalar(neg(board), 1.0);
  CHECK(ssim(inverted, board).item() < 0);
  CHECK(ssim_oracle(inverted, board) < 0);
  CHECK(std::abs(ssim(inverted, board).item() - ssim_oracle(inverted, board)) < 1e-9);
}

TEST_CASE("ssim gradient") {
  Rng rng(3);
  T a = uniform<double>({1, 2, 12, 12}, 0, 1, rng);
  const T b = uniform<double>({1, 2, 12, 12}, 0, 1, rng);
  CHECK(gradient_error([&] { return ssim_loss(a, b); }, {a}) < 1e-4);
}

TEST_CASE("soft edges of a vertical step") {
  CHECK((soft_edge(T::full({1, 3, 8, 8}, 0.4)).values().array() == 0.0).all());
  const T out = soft_edge(vertical_step(16, 8));
  CHECK(out.shape() == Shape{1, 1, 16, 16});
  // Blurred row profile from the normalized 1-D Gaussian, then central differences.
  double g[5], total = 0;
  for (int k = -2; k <= 2; ++k) total += g[k + 2] = std::exp(-k * k / (2 * 1.4 * 1.4));
  auto blurred = [&](Index x) {
    double s = 0;
    for (int k = -2; k <= 2; ++k) s += (x + k >= 8 ? 1.0 : 0.0) * g[k + 2] / total;
    return s;
  };
  std::vector<double> response(16);
  double peak = 0;
  for (Index x = 3; x < 13; ++x) peak = std::max(peak, response[x] = blurred(x + 1) - blurred(x - 1));
  for (Index y = 0; y < 16; ++y)
    for (Index x = 0; x < 16; ++x) {
      const double want = (x >= 3 && x < 13) ? response[x] / peak : 0.0;
      CHECK(std::abs(out.at({0, 0, y, x}) - want) < 1e-5);
    }
  CHECK(out.at({0, 0, 5, 7}) > 0.99);
  CHECK(out.at({0, 0, 5, 0}) == 0.0);
  Rng rng(4);
  const T r = soft_edge(uniform<double>({2, 3, 16, 16}, 0, 1, rng));
  CHECK(r.values().minCoeff() >= 0.0);
  CHECK(r.values().maxCoeff() <= 1.0);
}

TEST_CASE("canny reference") {
  CHECK((canny_reference(Plane<double>::Constant(16, 16, 0.3)) == 0.0).all());
  const Plane<double> edges = canny_reference(gray_step(16, 8));
  Index columns = 0;
  for (Index x = 0; x < 16; ++x)
    if (edges.col(x).sum() > 0) {
      ++columns;
      CHECK(edges.col(x).sum() == 16);
    }
  CHECK(columns == 1);

  Rng rng(5);
  const T noise = uniform<double>({32 * 32}, 0, 1, rng);
  const auto s = canny_stages(Eigen::Map<const Plane<double>>(noise.values().data(), 32, 32));
  CHECK((s.edges <= s.weak).all());
  CHECK(((s.edges == 0.0) || (s.edges == 1.0)).all());
}

TEST_CASE("binary cross-entropy") {
  CHECK(binary_cross_entropy(T::zeros({4}), T::zeros({4})).item() == 0.0);
  const T half = T::full({6}, 0.5), target = T::from_values({6}, {0, 1, 1, 0, 1, 0});
  CHECK(binary_cross_entropy(half, target).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  // Minimized as the probability approaches the target.
  for (double t : {0.0, 1.0}) {
    double previous = HUGE_VAL;
    for (int k = 0; k <= 10; ++k) {
      const double p = t == 1.0 ? k / 10.0 : 1 - k / 10.0;
      const double v = binary_cross_entropy(T::full({1}, p), T::full({1}, t)).item();
      CHECK(v <= previous);
      previous = v;
    }
  }
}

TEST_CASE("edge loss flows only through the prediction") {
  Rng rng(6);
  T pred = uniform<double>({1, 3, 12, 12}, 0, 1, rng);
  T gt = uniform<double>({1, 3, 12, 12}, 0, 1, rng, true);
  CHECK(gradient_error([&] { return edge_loss(pred, gt); }, {pred}) < 1e-4);
  edge_loss(pred, gt).backward();
  CHECK(!gt.has_grad());
  CHECK(std::abs(edge_loss(pred, gt).item() - bce_oracle(soft_edge(pred), canny_reference(gt))) < 1e-12);
}

TEST_CASE("total loss") {
  Rng rng(7);
  const T a = uniform<double>({1, 3, 16, 16}, 0, 1, rng), b = uniform<double>({1, 3, 16, 16}, 0, 1, rng);
  const LossWeights defaults;
  CHECK(defaults.l1 == 1.0);
  CHECK(defaults.ssim == 0.5);
  CHECK(defaults.edge == 0.1);
  const double want = l1_oracle(a, b) + 0.5 * (1 - ssim_oracle(a, b)) +
                      0.1 * bce_oracle(soft_edge(a), canny_reference(b));
  CHECK(std::abs(total_loss(a, b).total.item() - want) < 1e-12);
  CHECK(total_loss(a, b, LossWeights{1, 0, 0}).total.item() == l1_loss(a, b).item());
  CHECK(total_loss(a, a).total.item() >= 0.0);
  const T flat = T::full({1, 3, 16, 16}, 0.5);
  CHECK(total_loss(flat, flat).total.item() == 0.0);
  CHECK_THROWS_AS(total_loss(a, b, LossWeights{1, -1, 0}), ConfigError);
}

TEST_CASE("psnr") {
  Rng rng(8);
  const T a = uniform<double>({3, 8, 8}, 0, 1, rng);
  CHECK(psnr(a, a) == 100.0);
  CHECK(psnr(add_scalar(a, 0.1), a) == doctest::Approx(20.0).epsilon(1e-12));
  for (int trial = 0; trial < 20; ++trial) {
    const T b = uniform<double>({3, 8, 8}, 0, 1, rng);
    CHECK(std::abs(psnr(a, b) - psnr_oracle(a, b)) < 1e-9);
  }
}

TEST_CASE("edge F1") {
  Plane<double> a = Plane<double>::Zero(4, 4), b = Plane<double>::Zero(4, 4);
  CHECK(edge_f1(a, b) == 1.0);
  a(0, 0) = b(0, 0) = b(1, 1) = 1;
  CHECK(edge_f1(a, b) == doctest::Approx(2.0 / 3.0));
}
