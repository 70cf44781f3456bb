#pragma once

// Four-block hierarchy-scan backbone.
//
// A Mamba sub-block applies, in token layout [B, L, C],
//   X' = X + scan(LayerNorm(X))        scan sorted by a hierarchy plan
//   Y  = X' + MLP(LayerNorm(X'))       MLP = linear -> gelu -> linear
// and a backbone block combines a brightness and a semantic sub-block
// according to the composition mode.

#include "bsm/hierarchy.hpp"
#include "bsm/ops.hpp"
#include "bsm/ssm.hpp"
#include "bsm/tensor.hpp"

#include <string>
#include <vector>

namespace bsm {

enum class Composition { sequential_BS, sequential_SB, parallel_sum, parallel_concat, vanilla_ss2d };

std::string to_string(Composition mode);
/// Throws ConfigError on an unknown name.
Composition parse_composition(const std::string& name);
/// Hierarchy scans one block performs: 2 in the hierarchy modes, 4 for vanilla SS2D.
Index scans_per_block(Composition mode);

struct BlockConfig {
  Index channels = 32;
  Index mlp_expansion = 2;
  Index state_dim = 8;
  Composition composition = Composition::sequential_BS;
  ScorerKind scorer = ScorerKind::luma;

  /// Throws ConfigError on non-positive sizes or an odd width in parallel_concat.
  void validate() const;
};

/// Token orders for every batch entry, with their inverses precomputed.
struct PlanSet {
  std::vector<SortPlan> plans;
  std::vector<Permutation> forward;
  std::vector<Permutation> inverse;

  static PlanSet from(std::vector<SortPlan> plans);
  /// Identity order of the given length (raster scan).
  static PlanSet identity(Index length);
  Index length() const { return plans.empty() ? 0 : plans.front().size(); }
};

/// Per-forward state: image-level plans shared by every block, and the scan counter.
struct ForwardContext {
  PlanSet brightness;
  PlanSet semantic;
  ScanCounter counter;
  /// When set, every scan appends the plan set it used.
  bool record_plans = false;
  std::vector<std::pair<MapKind, std::vector<SortPlan>>> plan_log;
};

/// Downsamples the per-image maps to height x width and builds both plan sets.
template <typename Scalar>
ForwardContext make_context(const std::vector<HierarchyMap<Scalar>>& brightness,
                            const std::vector<HierarchyMap<Scalar>>& semantic, Index height,
                            Index width);

/// Gather by the plan, scan, scatter back. tokens: [B, L, C]. One traversal.
template <typename Scalar>
Tensor<Scalar> hierarchy_scan(const Tensor<Scalar>& tokens, const PlanSet& plans,
                              const SsmParams<Scalar>& ssm, ScanCounter* counter = nullptr);

/// Brightness hierarchy scan on a spatial map [B, C, H, W].
template <typename Scalar>
Tensor<Scalar> bhs_apply(const Tensor<Scalar>& x, const PlanSet& plans, const SsmParams<Scalar>& ssm,
                         ScanCounter* counter = nullptr);
/// Semantic hierarchy scan; same contract as bhs_apply.
template <typename Scalar>
Tensor<Scalar> shs_apply(const Tensor<Scalar>& x, const PlanSet& plans, const SsmParams<Scalar>& ssm,
                         ScanCounter* counter = nullptr);

/// LayerNorm, scan and output projection. `ssm` holds 1 entry, or 4 for vanilla SS2D.
template <typename Scalar>
struct ScanBranch {
  Tensor<Scalar> ln_gamma, ln_beta;
  std::vector<SsmParams<Scalar>> ssm;
  Tensor<Scalar> w_out, b_out;  // [C, C_out], [C_out]

  static ScanBranch init(Index channels, Index out_channels, Index state_dim, int scans, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln.gamma", ln_gamma);
    f(prefix + "ln.beta", ln_beta);
    for (std::size_t k = 0; k < ssm.size(); ++k)
      ssm[k].visit(prefix + "ssm" + std::to_string(k) + ".", f);
    f(prefix + "out.w", w_out);
    f(prefix + "out.b", b_out);
  }
};

/// LayerNorm, linear -> gelu -> linear.
template <typename Scalar>
struct MlpBranch {
  Tensor<Scalar> ln_gamma, ln_beta;
  Tensor<Scalar> w1, b1, w2, b2;

  static MlpBranch init(Index channels, Index expansion, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln.gamma", ln_gamma);
    f(prefix + "ln.beta", ln_beta);
    f(prefix + "fc1.w", w1);
    f(prefix + "fc1.b", b1);
    f(prefix + "fc2.w", w2);
    f(prefix + "fc2.b", b2);
  }
};

template <typename Scalar>
struct MambaSubBlock {
  ScanBranch<Scalar> scan;
  MlpBranch<Scalar> mlp;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    scan.visit(prefix + "scan.", f);
    mlp.visit(prefix + "mlp.", f);
  }
};

/// Weights of one backbone block. vanilla_ss2d uses only `brightness`.
template <typename Scalar>
struct BsmambaBlockState {
  Composition composition = Composition::sequential_BS;
  MambaSubBlock<Scalar> brightness;
  MambaSubBlock<Scalar> semantic;

  static BsmambaBlockState init(const BlockConfig& config, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    brightness.visit(prefix + (composition == Composition::vanilla_ss2d ? "ss2d." : "bright."), f);
    if (composition != Composition::vanilla_ss2d) semantic.visit(prefix + "sem.", f);
  }
};

/// Scan branch output (before the residual add) in token layout.
template <typename Scalar>
Tensor<Scalar> scan_branch_forward(const Tensor<Scalar>& tokens, const ScanBranch<Scalar>& branch,
                                   MapKind kind, Index height, Index width, ForwardContext& ctx);

template <typename Scalar>
Tensor<Scalar> mlp_branch_forward(const Tensor<Scalar>& tokens, const MlpBranch<Scalar>& branch);

/// X' = X + scan(LN(X)), Y = X' + MLP(LN(X')) on [B, C, H, W].
template <typename Scalar>
Tensor<Scalar> mamba_block_forward(const Tensor<Scalar>& x, const MambaSubBlock<Scalar>& block,
                                   MapKind kind, ForwardContext& ctx);

/// One backbone block in token layout [B, H*W, C].
template <typename Scalar>
Tensor<Scalar> bsmamba_block_tokens(const Tensor<Scalar>& tokens, const BsmambaBlockState<Scalar>& block,
                                    Index height, Index width, ForwardContext& ctx);

template <typename Scalar>
struct BackboneWeights {
  BlockConfig config;
  Tensor<Scalar> stem_w, stem_b;  // [C, 3, 3, 3], [C]
  std::vector<BsmambaBlockState<Scalar>> blocks;
  Tensor<Scalar> head_w, head_b;  // [3, C, 3, 3], [3], zero at init

  static BackboneWeights init(const BlockConfig& config, Index block_count, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "stem.w", stem_w);
    f(prefix + "stem.b", stem_b);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + "block" + std::to_string(i) + ".", f);
    f(prefix + "head.w", head_w);
    f(prefix + "head.b", head_b);
  }
};

template <typename Scalar>
struct BackboneOutput {
  Tensor<Scalar> features;  // [B, C, H, W]
  Tensor<Scalar> image;     // [B, 3, H, W], in (0, 1)
};

/// Input pixels are clamped to [eps, 1 - eps] before the logit skip of the head.
inline constexpr double kHeadLogitEpsilon = 1e-4;

/// Stem conv, the blocks, then image = sigmoid(head(features) + logit(input)).
template <typename Scalar>
BackboneOutput<Scalar> backbone_forward(const Tensor<Scalar>& image, const BackboneWeights<Scalar>& weights,
                                        ForwardContext& ctx);

}  // namespace bsm
