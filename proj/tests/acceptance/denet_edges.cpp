// Property run: after fitting the two synthetic pairs, the model with the
// detail network reaches at least the edge F1 of the model without it.

#include "bsm/inference.hpp"
#include "bsm/losses.hpp"
#include "bsm/train.hpp"
#include "testing.hpp"

#include <cstdio>

using namespace bsm;
using namespace bsm::testing;

namespace {

Plane<double> edges_of(const T& image) {
  const T e = canny_reference(reshape(image, {1, 3, image.dim(1), image.dim(2)}));
  return Eigen::Map<const Plane<double>>(e.values().data(), image.dim(1), image.dim(2));
}

double fitted_edge_f1(const PairedDataset& data, bool use_denet) {
  TrainConfig cfg;
  cfg.model.use_denet = use_denet;
  BsmambaModel<double> model(cfg.model, cfg.seed);
  train_model(model, cfg, data);
  double total = 0;
  for (const auto& sample : data.samples)
    total += edge_f1(edges_of(enhance_sample(model, sample).output), edges_of(sample.gt));
  return total / double(data.size());
}

}  // namespace

int main() {
  const auto root = scratch_dir("denet_edges");
  write_synthetic_dataset(root, 2, 64);
  const PairedDataset data = load_dataset(root);
  const double with = fitted_edge_f1(data, true), without = fitted_edge_f1(data, false);
  std::filesystem::remove_all(root);
  const bool ok = with >= without;
  std::printf("%s denet-edge-f1          with DE-Net %.4f, without %.4f\n", ok ? "PASS" : "FAIL", with, without);
  return ok ? 0 : 1;
}
