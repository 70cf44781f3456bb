// Acceptance runner: one PASS/FAIL line per criterion, with its runtime.
// Exit status is the number of failed criteria.

#include "bsm/backbone.hpp"
#include "bsm/denet.hpp"
#include "bsm/fft.hpp"
#include "bsm/hierarchy.hpp"
#include "bsm/losses.hpp"
#include "bsm/model.hpp"
#include "bsm/ops.hpp"
#include "bsm/ssm.hpp"
#include "bsm/train.hpp"
#include "oracles.hpp"
#include "testing.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>

using namespace bsm;
using namespace bsm::testing;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

int failures = 0;

std::string fmt(const char* pattern, double v) {
  char buf[128];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

void criterion(const char* name, double budget_seconds, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = secs < budget_seconds;
  const bool ok = out.ok && in_time;
  failures += ok ? 0 : 1;
  const std::string budget = std::isinf(budget_seconds) ? "no time budget" : fmt("budget %.0f s", budget_seconds);
  std::printf("%s %-22s %s; %.2f s (%s)%s\n", ok ? "PASS" : "FAIL", name, out.detail.c_str(), secs, budget.c_str(),
              in_time ? "" : " OVER BUDGET");
  std::fflush(stdout);
}

HierarchyMap<double> random_map(Index h, Index w, Rng& rng) {
  HierarchyMap<double> m;
  const T v = uniform<double>({h * w}, 0, 1, rng);
  m.values = Eigen::Map<const Plane<double>>(v.values().data(), h, w);
  return m;
}

ForwardContext context_for(const T& images, Rng& rng) {
  std::vector<HierarchyMap<double>> b, s;
  for (Index i = 0; i < images.dim(0); ++i) {
    b.push_back(random_map(images.dim(2), images.dim(3), rng));
    s.push_back(random_map(images.dim(2), images.dim(3), rng));
  }
  return make_context(b, s, images.dim(2), images.dim(3));
}

template <typename Module>
void randomize(Module& module, Rng& rng) {
  module.visit("", [&](const std::string& name, T& t) {
    if (name.find("log_a") != std::string::npos) return;
    t = uniform<double>(t.shape(), -0.3, 0.3, rng, true);
  });
}

Outcome scan_count() {
  Rng rng(1);
  const T img = uniform<double>({1, 3, 32, 32}, 0, 1, rng);
  Index counts[2];
  const Composition modes[2] = {Composition::sequential_BS, Composition::vanilla_ss2d};
  for (int m = 0; m < 2; ++m) {
    ModelConfig cfg;
    cfg.block.composition = modes[m];
    const BsmambaModel<double> model(cfg, 1);
    ForwardContext ctx = context_for(img, rng);
    model.forward(img, ctx);
    counts[m] = ctx.counter.scans / cfg.blocks;
  }
  return {counts[0] == 2 && counts[1] == 4,
          "scans per block: hierarchy " + std::to_string(counts[0]) + ", vanilla SS2D " + std::to_string(counts[1])};
}

Outcome scan_oracle() {
  Rng rng(2);
  std::uniform_int_distribution<Index> nb(1, 2), nl(1, 256), nc(1, 4), nn(1, 8);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index b = nb(rng), l = nl(rng), c = nc(rng), n = nn(rng);
    const T x = uniform<double>({b, l, c}, -1, 1, rng);
    auto p = SsmParams<double>::init(c, n, rng);
    p.log_a = uniform<double>({c, n}, -1, 1.5, rng);
    p.b_delta = uniform<double>({c}, -1, 1, rng);
    p.d = uniform<double>({c}, -1, 1, rng);
    worst = std::max(worst, max_abs_diff(selective_scan(x, p), selective_scan_oracle(x, p)));
  }
  return {worst < 1e-10, fmt("100 cases, max abs deviation %.3g (tol 1e-10)", worst)};
}

Outcome gradient_suite() {
  Rng rng(3);
  auto u = [&](const Shape& s, double lo = -1, double hi = 1) { return uniform<double>(s, lo, hi, rng); };
  std::vector<std::pair<std::string, double>> errors;
  // Scalar probe: inner product with a fixed pseudo-random tensor of the same shape.
  auto project = [](const T& t) {
    Rng fixed(17);
    return sum(mul(t, uniform<double>(t.shape(), -1, 1, fixed)));
  };
  auto check = [&](const std::string& name, const std::function<T()>& f, std::vector<T> leaves) {
    errors.emplace_back(name, gradient_error(f, std::move(leaves)));
  };
  T a = u({2, 3, 4}), b = u({3, 4}), pos = u({2, 3, 4}, 0.2, 2);
  check("add", [&] { return project(add(a, b)); }, {a, b});
  check("sub", [&] { return project(sub(a, b)); }, {a, b});
  check("mul", [&] { return project(mul(a, b)); }, {a, b});
  check("div", [&] { return project(div(a, add_scalar(square(b), 1.0))); }, {a, b});
  check("exp", [&] { return project(bsm::exp(a)); }, {a});
  check("log", [&] { return project(bsm::log(pos)); }, {pos});
  check("sqrt", [&] { return project(bsm::sqrt(pos)); }, {pos});
  check("sigmoid", [&] { return project(sigmoid(a)); }, {a});
  check("silu", [&] { return project(silu(a)); }, {a});
  check("softplus", [&] { return project(softplus(a)); }, {a});
  check("gelu", [&] { return project(gelu(a)); }, {a});
  check("abs", [&] { return project(bsm::abs(a)); }, {a});
  check("square", [&] { return project(square(a)); }, {a});
  check("clamp", [&] { return project(clamp(a, -0.5, 0.5)); }, {a});
  check("mean", [&] { return project(mean(a, 1)); }, {a});
  check("max", [&] { return project(max(a, 2)); }, {a});
  check("permute", [&] { return project(permute(a, {2, 0, 1})); }, {a});
  check("transpose", [&] { return project(transpose(a, 1, 2)); }, {a});
  check("concat+split", [&] {
    const auto parts = split(concat<double>({a, pos}, 1), {2, 4}, 1);
    return add(project(parts[0]), project(parts[1]));
  }, {a, pos});
  T m1 = u({2, 3, 4}), m2 = u({4, 5});
  check("matmul", [&] { return project(matmul(m1, m2)); }, {m1, m2});
  T w = u({4, 5}), bias = u({5});
  check("linear", [&] { return project(linear(m1, w, bias)); }, {m1, w, bias});
  T img = u({2, 3, 6, 6}), k = u({4, 3, 3, 3}), kb = u({4});
  check("conv2d", [&] { return project(conv2d(img, k, kb, 2, 1)); }, {img, k, kb});
  check("pad_reflect", [&] { return project(pad_reflect(img, 2)); }, {img});
  check("upsample", [&] { return project(upsample_nearest2x(img)); }, {img});
  T g = u({5}, 0.5, 1.5), be = u({5});
  check("layer_norm", [&] { return project(layer_norm(linear(m1, w), g, be)); },
        {m1, w, g, be});
  Permutation perm(12);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  T tok = u({2, 12, 3});
  check("gather/scatter", [&] {
    return add(project(gather_tokens(tok, perm)),
               project(scatter_tokens(tok, invert_permutation(perm))));
  }, {tok});
  T sp = u({2, 8, 8});
  check("fft2/ifft2", [&] {
    const auto f = fft2_real(sp);
    return add(project(f.real), project(ifft2_real(ComplexPair<double>{f.imag, f.real})));
  }, {sp});
  T sx = u({2, 7, 3});
  auto ssm = SsmParams<double>::init(3, 4, rng);
  check("selective_scan", [&] { return project(selective_scan(sx, ssm)); },
        {sx, ssm.log_a, ssm.w_delta, ssm.b_delta, ssm.w_b, ssm.w_c, ssm.d});
  auto ffc = FfcBlockWeights<double>::init(8, 0.5, rng);
  T fx = u({1, 8, 8, 8});
  check("ffc_block", [&] { return project(ffc_block(fx, ffc)); },
        {fx, ffc.l2l_w, ffc.l2l_b, ffc.g2l_w, ffc.l2g_w, ffc.spec_w, ffc.spec_b});
  T pi = u({1, 3, 12, 12}, 0, 1), gi = u({1, 3, 12, 12}, 0, 1);
  check("l1", [&] { return l1_loss(pi, gi); }, {pi});
  check("ssim", [&] { return ssim(pi, gi); }, {pi});
  check("soft_edge+bce", [&] { return edge_loss(pi, gi); }, {pi});

  std::string worst_op;
  double worst = 0;
  for (const auto& [name, e] : errors)
    if (e >= worst) {
      worst = e;
      worst_op = name;
    }

  // Full model and loss, desk configuration, all weights randomized.
  ModelConfig cfg;
  BsmambaModel<double> model(cfg, 4);
  randomize(model, rng);
  T x = u({1, 3, 16, 16}, 0.05, 0.95);
  const T gt = u({1, 3, 16, 16}, 0, 1);
  ForwardContext ctx = context_for(x, rng);
  std::vector<T> leaves{x};
  for (auto& [name, t] : model.parameters()) leaves.push_back(t);
  const double e2e = gradient_error([&] {
    ForwardContext c = ctx;
    return total_loss(model.forward(x, c).output, gt).total;
  }, leaves, 1e-5, 3);

  const bool ok = worst < 1e-6 && e2e < 1e-4;
  return {ok, std::to_string(errors.size()) + " ops, worst " + worst_op + fmt(" %.3g (tol 1e-6)", worst) +
                  fmt("; end-to-end %.3g (tol 1e-4)", e2e)};
}

Outcome permutation_suite() {
  Rng rng(5);
  bool round_trip = true;
  for (int trial = 0; trial < 1000; ++trial) {
    HierarchyMap<double> m = random_map(8, 8, rng);
    if (trial % 2) m.values = (m.values * 4).floor();  // many ties
    const SortPlan p = build_sort_plan(m);
    const T tokens = uniform<double>({1, 64, 2}, -1, 1, rng);
    round_trip = round_trip && scatter_tokens(gather_tokens(tokens, p.forward_index), p.inverse_index).values() ==
                                   tokens.values();
    for (Index i = 0; i < 64; ++i) round_trip = round_trip && p.inverse_index[p.forward_index[i]] == i;
  }
  HierarchyMap<double> flat;
  flat.values = Plane<double>::Constant(6, 7, 0.4);
  const SortPlan id = build_sort_plan(flat);
  bool identity = true;
  for (Index i = 0; i < id.size(); ++i) identity = identity && id.forward_index[i] == i;
  bool ranges = true;
  for (Index n : {0, 1, 2, 5}) {
    const auto r = grading_ranges(n);
    ranges = ranges && static_cast<Index>(r.size()) == n + 1;
    for (Index i = 0; i <= n && ranges; ++i)
      ranges = r[i].first == double(i) / double(n + 1) && r[i].second == double(i + 1) / double(n + 1);
  }
  return {round_trip && identity && ranges,
          std::string("1000 round trips ") + (round_trip ? "exact" : "BROKEN") + ", constant map " +
              (identity ? "identity" : "NOT identity") + ", ranges n=0,1,2,5 " + (ranges ? "exact" : "WRONG")};
}

Outcome fft_suite() {
  Rng rng(6);
  double trip = 0, parseval = 0;
  for (Index n : {8, 16})
    for (int trial = 0; trial < 10; ++trial) {
      const T x = uniform<double>({n, n}, -1, 1, rng);
      const auto f = fft2_real(x);
      trip = std::max(trip, max_abs_diff(ifft2_real(f), x));
      const double spatial = x.values().squaredNorm();
      parseval = std::max(parseval, std::abs(full_spectrum_energy(f) / double(n * n) - spatial) / spatial);
    }
  auto w = FfcBlockWeights<double>::init(16, 0.5, rng);
  w.set_identity_spectral();
  const T g = uniform<double>({2, w.global_channels, 16, 16}, -1, 1, rng);
  const double ffc = max_abs_diff(ffc_spectral_branch(g, w), g);
  return {trip < 1e-10 && parseval < 1e-9 && ffc < 1e-10,
          fmt("round trip %.3g", trip) + fmt(", Parseval %.3g", parseval) + fmt(", FFC identity %.3g", ffc)};
}

Outcome loss_defaults() {
  Rng rng(7);
  const LossWeights d;
  const bool defaults = d.l1 == 1.0 && d.ssim == 0.5 && d.edge == 0.1;
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const T a = uniform<double>({1, 3, 24, 24}, 0, 1, rng), b = uniform<double>({1, 3, 24, 24}, 0, 1, rng);
    const double want = 1.0 * l1_oracle(a, b) + 0.5 * (1 - ssim_oracle(a, b)) +
                        0.1 * bce_oracle(soft_edge(a), canny_reference(b));
    worst = std::max(worst, std::abs(total_loss(a, b).total.item() - want));
  }
  return {defaults && worst < 1e-12, fmt("weights [%g, ", d.l1) + fmt("%g, ", d.ssim) + fmt("%g]", d.edge) +
                                         fmt(", max deviation %.3g (tol 1e-12)", worst)};
}

double windowed(const std::vector<double>& v, std::size_t from, std::size_t count) {
  double s = 0;
  for (std::size_t i = from; i < from + count; ++i) s += v[i];
  return s / double(count);
}

Outcome overfit(const PairedDataset& data, double* rerun_seconds) {
  TrainConfig cfg;
  cfg.iterations = 500;
  cfg.precision = 64;
  const TrainResult first = train(cfg, data);
  const auto start = std::chrono::steady_clock::now();
  const TrainResult again = train(cfg, data);
  *rerun_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double early = windowed(first.losses, 0, 50), late = windowed(first.losses, 450, 50);
  const bool gain = first.final_psnr >= first.baseline_psnr + 5.0;
  const bool same = first.log_text == again.log_text;
  return {gain && late < early && same,
          fmt("PSNR %.2f dB", first.final_psnr) + fmt(" vs baseline %.2f", first.baseline_psnr) +
              fmt(" (+%.2f, need +5)", first.final_psnr - first.baseline_psnr) +
              fmt(", loss window %.4f", early) + fmt(" -> %.4f", late) +
              ", rerun log " + (same ? "bit-identical" : "DIFFERS")};
}

Outcome ablation(const PairedDataset& data) {
  const Composition modes[] = {Composition::sequential_BS, Composition::sequential_SB, Composition::parallel_sum,
                               Composition::parallel_concat, Composition::vanilla_ss2d};
  int runs = 0;
  std::string failed;
  for (Composition mode : modes)
    for (ScorerKind scorer : {ScorerKind::luma, ScorerKind::histogram}) {
      TrainConfig cfg;
      cfg.iterations = 10;
      cfg.log_every = 5;
      cfg.model.block.composition = mode;
      cfg.model.block.scorer = scorer;
      try {
        const TrainResult r = train(cfg, data);
        if (!std::isfinite(r.final_psnr)) failed += " " + to_string(mode) + "/" + to_string(scorer);
        ++runs;
      } catch (const std::exception& e) {
        failed += " " + to_string(mode) + "/" + to_string(scorer) + " (" + e.what() + ")";
      }
    }

  Rng rng(8);
  const T img = uniform<double>({1, 3, 32, 32}, 0, 1, rng);
  ForwardContext ctx = context_for(img, rng);
  ModelConfig bs_cfg, sb_cfg;
  sb_cfg.block.composition = Composition::sequential_SB;
  BsmambaModel<double> bs(bs_cfg, 9), sb(sb_cfg, 9);
  randomize(bs, rng);
  sb.load_parameters(bs.parameters());
  ForwardContext c2 = ctx;
  const auto a = bs.forward(img, ctx), b = sb.forward(img, c2);
  const double features = max_abs_diff(a.features, b.features), gap = max_abs_diff(a.output, b.output);
  return {failed.empty() && runs == 10 && features > 1e-6 && gap > 1e-6,
          std::to_string(runs) + "/10 mode x scorer runs" + (failed.empty() ? "" : ", failed:" + failed) +
              fmt(", BS vs SB max gap: features %.3g", features) + fmt(", output %.3g", gap)};
}

Outcome parameter_budget() {
  BsmambaModel<double> model(ModelConfig{}, 0);
  const Index n = model.parameter_count();
  return {n < 1'000'000, std::to_string(n) + " trainable scalars (limit 1000000)"};
}

}  // namespace

int main() {
  criterion("scan-count", 1, scan_count);
  criterion("scan-oracle", 30, scan_oracle);
  criterion("gradient-suite", 300, gradient_suite);
  criterion("permutation-suite", 10, permutation_suite);
  criterion("fft-ffc-suite", 10, fft_suite);
  criterion("loss-defaults", 5, loss_defaults);

  const auto root = scratch_dir("acceptance");
  write_synthetic_dataset(root, 2, 64);
  const PairedDataset data = load_dataset(root);
  double rerun = 0;
  // The budget applies to one 500-iteration experiment; the determinism rerun is timed separately.
  const auto start = std::chrono::steady_clock::now();
  Outcome fit;
  try {
    fit = overfit(data, &rerun);
  } catch (const std::exception& e) {
    fit = {false, std::string("exception: ") + e.what()};
  }
  const double experiment = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() - rerun;
  const bool fit_ok = fit.ok && experiment < 600;
  failures += fit_ok ? 0 : 1;
  std::printf("%s %-22s %s; %.2f s per run (budget 600 s), rerun %.2f s\n", fit_ok ? "PASS" : "FAIL", "overfit",
              fit.detail.c_str(), experiment, rerun);
  std::fflush(stdout);

  criterion("ablation", HUGE_VAL, [&] { return ablation(data); });
  criterion("parameter-budget", HUGE_VAL, parameter_budget);
  std::filesystem::remove_all(root);
  std::printf("%d criteria failed\n", failures);
  return failures;
}
