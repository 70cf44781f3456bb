#include "bsm/selftest.hpp"

#include "bsm/backbone.hpp"
#include "bsm/fft.hpp"
#include "bsm/hierarchy.hpp"
#include "bsm/losses.hpp"
#include "bsm/model.hpp"
#include "bsm/ops.hpp"
#include "bsm/ssm.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

namespace bsm {

namespace {

using T = Tensor<double>;

std::string number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Largest relative error between autodiff and central differences of f at x.
double gradient_error(const std::function<T(const T&)>& f, T x) {
  x.set_requires_grad(true);
  f(x).backward();
  const Vector<double> analytic = x.grad();
  const double h = 1e-5;
  double worst = 0;
  for (Index i = 0; i < x.numel(); ++i) {
    const double keep = x.values()[i];
    x.mutable_values()[i] = keep + h;
    const double up = f(x.detach()).item();
    x.mutable_values()[i] = keep - h;
    const double down = f(x.detach()).item();
    x.mutable_values()[i] = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

SelfTestResult check(std::string name, double error, double tolerance) {
  return {std::move(name), error < tolerance, "error " + number(error) + " (tolerance " + number(tolerance) + ")"};
}

}  // namespace

std::vector<SelfTestResult> run_selftest(unsigned seed) {
  std::vector<SelfTestResult> out;
  Rng rng(seed);

  double scan_error = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const T x = uniform<double>({2, 24, 4}, -1, 1, rng);
    const auto p = SsmParams<double>::init(4, 6, rng);
    scan_error = std::max(scan_error, (selective_scan(x, p).values() - selective_scan_oracle(x, p).values())
                                          .cwiseAbs()
                                          .maxCoeff());
  }
  out.push_back(check("selective scan vs scalar recurrence", scan_error, 1e-10));

  const T w = uniform<double>({5, 3}, -1, 1, rng);
  const T k = uniform<double>({2, 3, 3, 3}, -1, 1, rng);
  const T gamma = uniform<double>({5}, 0.5, 1.5, rng), beta = uniform<double>({5}, -0.5, 0.5, rng);
  const T weights = uniform<double>({4, 5}, -1, 1, rng);
  double grad_error = 0;
  grad_error = std::max(grad_error, gradient_error([&](const T& v) { return sum(square(linear(v, w))); },
                                                   uniform<double>({4, 5}, -1, 1, rng)));
  grad_error = std::max(grad_error, gradient_error([&](const T& v) { return sum(square(conv2d(v, k, {}, 1, 1))); },
                                                   uniform<double>({1, 3, 5, 5}, -1, 1, rng)));
  grad_error = std::max(grad_error, gradient_error([&](const T& v) { return sum(mul(layer_norm(v, gamma, beta), weights)); },
                                                   uniform<double>({4, 5}, -1, 1, rng)));
  grad_error = std::max(grad_error, gradient_error([&](const T& v) { return sum(mul(gelu(v), weights)); },
                                                   uniform<double>({4, 5}, -2, 2, rng)));
  grad_error = std::max(grad_error, gradient_error([&](const T& v) { return sum(mul(softplus(v), weights)); },
                                                   uniform<double>({4, 5}, -2, 2, rng)));
  out.push_back(check("finite-difference gradients", grad_error, 1e-6));

  const T image = uniform<double>({2, 8, 16}, -1, 1, rng);
  const double fft_error = (ifft2_real(fft2_real(image)).values() - image.values()).cwiseAbs().maxCoeff();
  out.push_back(check("FFT round trip", fft_error, 1e-10));

  bool plans_ok = true;
  for (int trial = 0; trial < 100 && plans_ok; ++trial) {
    HierarchyMap<double> map;
    // Coarse levels so that ties are common.
    const T v = uniform<double>({64}, 0, 4, rng);
    map.values = Eigen::Map<const Plane<double>>(v.values().data(), 8, 8).floor();
    const SortPlan plan = build_sort_plan(map);
    for (Index i = 0; i < plan.size(); ++i) plans_ok = plans_ok && plan.inverse_index[plan.forward_index[i]] == i;
  }
  out.push_back({"sort plan inverse round trip", plans_ok, plans_ok ? "100 random maps" : "inverse mismatch"});

  Index counts[2] = {0, 0};
  const Composition modes[2] = {Composition::sequential_BS, Composition::vanilla_ss2d};
  for (int m = 0; m < 2; ++m) {
    ModelConfig config;
    config.block.channels = 8;
    config.block.state_dim = 4;
    config.block.composition = modes[m];
    config.blocks = 1;
    config.use_denet = false;
    const BsmambaModel<double> model(config, 1);
    const T x = uniform<double>({1, 3, 16, 16}, 0, 1, rng);
    const auto bright = luma_score(reshape(x, {3, 16, 16}));
    const auto sem = semantic_map(InstanceMaskSet<double>::empty(16, 16));
    ForwardContext ctx = make_context<double>({bright}, {sem}, 16, 16);
    model.forward(x, ctx);
    counts[m] = ctx.counter.scans;
  }
  out.push_back({"scans per block", counts[0] == 2 && counts[1] == 4,
                 "hierarchy " + std::to_string(counts[0]) + ", vanilla " + std::to_string(counts[1])});

  const T pred = uniform<double>({1, 3, 16, 16}, 0, 1, rng), gt = uniform<double>({1, 3, 16, 16}, 0, 1, rng);
  const auto loss = total_loss(pred, gt, LossWeights{});
  const double recomputed = l1_loss(pred, gt).item() + 0.5 * (1.0 - ssim(pred, gt).item()) + 0.1 * edge_loss(pred, gt).item();
  out.push_back(check("default loss weights", std::abs(loss.total.item() - recomputed), 1e-12));
  return out;
}

}  // namespace bsm
