#include "bsm/errors.hpp"
#include "bsm/ops.hpp"
#include "testing.hpp"

#include <doctest.h>

#include <cmath>

using namespace bsm;
using bsm::testing::gradient_error;
using bsm::testing::T;

namespace {

// out[o, y, x] = sum over c, i, j of in[c, y+i-pad, x+j-pad] * k[o, c, i, j]
std::vector<double> sliding_window(const T& in, const T& k, Index pad, Index stride) {
  const Index cin = in.dim(1), h = in.dim(2), w = in.dim(3);
  const Index cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out;
  for (Index o = 0; o < cout; ++o)
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x) {
        double s = 0;
        for (Index c = 0; c < cin; ++c)
          for (Index i = 0; i < kh; ++i)
            for (Index j = 0; j < kw; ++j) {
              const Index yy = y * stride + i - pad, xx = x * stride + j - pad;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              s += in.at({0, c, yy, xx}) * k.at({o, c, i, j});
            }
        out.push_back(s);
      }
  return out;
}

T weights_like(const Shape& shape, Rng& rng) { return uniform<double>(shape, -1, 1, rng); }

}  // namespace

TEST_CASE("elementwise basics") {
  const T a = T::from_values({2}, {1, 2}), b = T::from_values({2}, {3, 4});
  CHECK(add(a, b).values() == T::from_values({2}, {4, 6}).values());
  CHECK(sigmoid(T::scalar(0)).item() == 0.5);
  CHECK(silu(T::scalar(0)).item() == 0.0);
  CHECK_THROWS_AS(log(T::from_values({2}, {1, 0})), DomainError);
  CHECK_THROWS_AS(add(T::zeros({2, 3}), T::zeros({4})), DimensionError);
}

TEST_CASE("broadcast matches a scalar-loop oracle") {
  Rng rng(1);
  const std::vector<std::pair<Shape, Shape>> cases = {
      {{2, 3, 4}, {4}}, {{2, 1, 4}, {3, 1}}, {{1, 3, 1, 5}, {2, 1, 4, 1}}, {{3}, {2, 3}}};
  for (const auto& [sa, sb] : cases) {
    const T a = uniform<double>(sa, -1, 1, rng), b = uniform<double>(sb, -1, 1, rng);
    const T out = mul(a, b);
    const Shape so = broadcast_shapes(sa, sb);
    REQUIRE(out.shape() == so);
    // Walk every output index and read each operand with stride 0 on size-1 axes.
    const int nd = static_cast<int>(so.size());
    std::vector<Index> idx(nd, 0);
    auto offset = [&](const Shape& s) {
      Index off = 0;
      const int lead = nd - static_cast<int>(s.size());
      for (int d = 0; d < static_cast<int>(s.size()); ++d) off = off * s[d] + (s[d] == 1 ? 0 : idx[lead + d]);
      return off;
    };
    for (Index flat = 0; flat < out.numel(); ++flat) {
      Index r = flat;
      for (int d = nd - 1; d >= 0; --d) {
        idx[d] = r % so[d];
        r /= so[d];
      }
      CHECK(out.values()[flat] == a.values()[offset(sa)] * b.values()[offset(sb)]);
    }
  }
}

TEST_CASE("matmul identity") {
  Rng rng(2);
  const T a = uniform<double>({3, 3}, -1, 1, rng);
  T eye = T::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_values()[i * 3 + i] = 1;
  CHECK(matmul(eye, a).values() == a.values());
}

TEST_CASE("conv2d matches direct sliding-window summation") {
  Rng rng(3);
  const T x = uniform<double>({1, 1, 5, 5}, -1, 1, rng);
  const T k = uniform<double>({1, 1, 3, 3}, -1, 1, rng);
  const auto want = sliding_window(x, k, 1, 1);
  const T got = conv2d(x, k, {}, 1, 1);
  REQUIRE(got.numel() == static_cast<Index>(want.size()));
  for (Index i = 0; i < got.numel(); ++i) CHECK(std::abs(got.values()[i] - want[i]) < 1e-12);

  const T x2 = uniform<double>({1, 3, 8, 8}, -1, 1, rng);
  const T k2 = uniform<double>({4, 3, 3, 3}, -1, 1, rng);
  const auto want2 = sliding_window(x2, k2, 1, 2);
  const T got2 = conv2d(x2, k2, {}, 2, 1);
  CHECK(got2.shape() == Shape{1, 4, 4, 4});
  for (Index i = 0; i < got2.numel(); ++i) CHECK(std::abs(got2.values()[i] - want2[i]) < 1e-12);
}

TEST_CASE("nonlinear op gradients at 10 random points") {
  Rng rng(4);
  using Op = T (*)(const T&);
  const std::vector<std::pair<const char*, Op>> ops = {
      {"silu", &silu<double>},       {"sigmoid", &sigmoid<double>}, {"softplus", &softplus<double>},
      {"exp", &bsm::exp<double>},    {"gelu", &gelu<double>},       {"square", &square<double>}};
  for (const auto& [name, op] : ops) {
    T x = uniform<double>({10}, -2, 2, rng);
    const T w = weights_like({10}, rng);
    CAPTURE(name);
    CHECK(gradient_error([&] { return sum(mul(op(x), w)); }, {x}) < 1e-6);
  }
  T pos = uniform<double>({10}, 0.2, 3, rng);
  const T w = weights_like({10}, rng);
  CHECK(gradient_error([&] { return sum(mul(bsm::log(pos), w)); }, {pos}) < 1e-6);
  CHECK(gradient_error([&] { return sum(mul(bsm::sqrt(pos), w)); }, {pos}) < 1e-6);
}

TEST_CASE("trainable op gradients") {
  Rng rng(5);
  T x = uniform<double>({2, 4, 5}, -1, 1, rng), wl = uniform<double>({5, 3}, -1, 1, rng),
    bl = uniform<double>({3}, -1, 1, rng);
  const T r1 = weights_like({2, 4, 3}, rng);
  CHECK(gradient_error([&] { return sum(mul(linear(x, wl, bl), r1)); }, {x, wl, bl}) < 1e-6);

  T img = uniform<double>({2, 3, 6, 6}, -1, 1, rng), k = uniform<double>({4, 3, 3, 3}, -1, 1, rng),
    kb = uniform<double>({4}, -1, 1, rng);
  const T r2 = weights_like({2, 4, 3, 3}, rng);
  CHECK(gradient_error([&] { return sum(mul(conv2d(img, k, kb, 2, 1), r2)); }, {img, k, kb}) < 1e-6);

  T a = uniform<double>({2, 3, 4}, -1, 1, rng), b = uniform<double>({4, 5}, -1, 1, rng);
  const T r3 = weights_like({2, 3, 5}, rng);
  CHECK(gradient_error([&] { return sum(mul(matmul(a, b), r3)); }, {a, b}) < 1e-6);

  T up = uniform<double>({1, 2, 3, 3}, -1, 1, rng);
  const T r4 = weights_like({1, 2, 6, 6}, rng);
  CHECK(gradient_error([&] { return sum(mul(upsample_nearest2x(up), r4)); }, {up}) < 1e-6);

  T p = uniform<double>({1, 2, 5, 5}, -1, 1, rng);
  const T r5 = weights_like({1, 2, 9, 9}, rng);
  CHECK(gradient_error([&] { return sum(mul(pad_reflect(p, 2), r5)); }, {p}) < 1e-6);

  T m = uniform<double>({3, 4}, -1, 1, rng);
  const T r6 = weights_like({3}, rng);
  CHECK(gradient_error([&] { return sum(mul(max(m, 1), r6)); }, {m}) < 1e-6);
  CHECK(gradient_error([&] { return sum(mul(div(m, add_scalar(square(m), 1.0)), m)); }, {m}) < 1e-6);
}

TEST_CASE("layer_norm values and gradient") {
  const T one = T::from_values({2}, {1, 1}), zero = T::from_values({2}, {0, 0});
  const T out = layer_norm(T::from_values({1, 2}, {1, 3}), one, zero);
  const double expected = 1.0 / std::sqrt(1.0 + kLayerNormEpsilon);
  CHECK(out.values()[0] == doctest::Approx(-expected).epsilon(1e-15));
  CHECK(out.values()[1] == doctest::Approx(expected).epsilon(1e-15));
  CHECK(layer_norm(T::full({1, 2}, 7.0), one, zero).values().cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(layer_norm(T::zeros({2, 3}), one, zero), DimensionError);

  Rng rng(6);
  T x = uniform<double>({3, 6}, -1, 1, rng), g = uniform<double>({6}, 0.5, 1.5, rng),
    b = uniform<double>({6}, -0.5, 0.5, rng);
  const T r = weights_like({3, 6}, rng);
  CHECK(gradient_error([&] { return sum(mul(layer_norm(x, g, b), r)); }, {x, g, b}) < 1e-6);
}

TEST_CASE("gather and scatter tokens") {
  Rng rng(7);
  const T x = uniform<double>({2, 9, 3}, -1, 1, rng);
  Permutation id(9);
  for (Index i = 0; i < 9; ++i) id[i] = i;
  CHECK(gather_tokens(x, id).values() == x.values());

  for (int trial = 0; trial < 100; ++trial) {
    Permutation p = id;
    std::shuffle(p.begin(), p.end(), rng);
    const T g = gather_tokens(x, p);
    CHECK(g.at({1, 4, 2}) == x.at({1, p[4], 2}));
    CHECK(scatter_tokens(g, invert_permutation(p)).values() == x.values());
  }

  // Composition: gather by q after gather by p equals gather by p[q[i]].
  Permutation p = id, q = id, pq(9);
  std::shuffle(p.begin(), p.end(), rng);
  std::shuffle(q.begin(), q.end(), rng);
  for (Index i = 0; i < 9; ++i) pq[i] = p[q[i]];
  CHECK(gather_tokens(gather_tokens(x, p), q).values() == gather_tokens(x, pq).values());

  T leaf = x.detach();
  const T r = weights_like({2, 9, 3}, rng);
  CHECK(gradient_error([&] { return sum(mul(gather_tokens(leaf, p), r)); }, {leaf}) < 1e-6);
  const std::vector<Permutation> per_batch = {p, q};
  CHECK(gradient_error([&] { return sum(mul(scatter_tokens(gather_tokens(leaf, per_batch), per_batch), r)); },
                       {leaf}) < 1e-6);

  CHECK_THROWS_AS(gather_tokens(x, Permutation{0, 1, 2}), PermutationError);
  Permutation dup = id;
  dup[3] = 4;
  CHECK_THROWS_AS(gather_tokens(x, dup), PermutationError);
}

TEST_CASE("backward semantics") {
  Rng rng(8);
  T x = uniform<double>({4}, -1, 1, rng, true);
  sum(x).backward();
  CHECK(x.grad() == Vector<double>::Ones(4));
  x.zero_grad();
  sum(mul(x, x)).backward();
  CHECK((x.grad() - 2 * x.values()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(mul(x, x).backward(), ContractError);
}

TEST_CASE("same seed gives bit-identical values") {
  Rng a(42), b(42);
  CHECK(normal<double>({64}, 0, 1, a).values() == normal<double>({64}, 0, 1, b).values());
}
