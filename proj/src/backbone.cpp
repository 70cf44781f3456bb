#include "bsm/backbone.hpp"

#include "bsm/errors.hpp"
#include "record.hpp"

#include <cmath>
#include <numeric>

namespace bsm {

std::string to_string(Composition mode) {
  switch (mode) {
    case Composition::sequential_BS: return "sequential_BS";
    case Composition::sequential_SB: return "sequential_SB";
    case Composition::parallel_sum: return "parallel_sum";
    case Composition::parallel_concat: return "parallel_concat";
    case Composition::vanilla_ss2d: return "vanilla_ss2d";
  }
  return "?";
}

Composition parse_composition(const std::string& name) {
  for (auto mode : {Composition::sequential_BS, Composition::sequential_SB, Composition::parallel_sum,
                    Composition::parallel_concat, Composition::vanilla_ss2d})
    if (name == to_string(mode)) return mode;
  throw ConfigError("unknown composition '" + name +
                    "' (expected sequential_BS|sequential_SB|parallel_sum|parallel_concat|vanilla_ss2d)");
}

Index scans_per_block(Composition mode) { return mode == Composition::vanilla_ss2d ? 4 : 2; }

void BlockConfig::validate() const {
  if (channels < 1 || mlp_expansion < 1 || state_dim < 1)
    throw ConfigError("channels, mlp_expansion and state_dim must be positive");
  if (composition == Composition::parallel_concat && channels % 2 != 0)
    throw ConfigError("parallel_concat needs an even channel count, got " + std::to_string(channels));
}

PlanSet PlanSet::from(std::vector<SortPlan> plans) {
  PlanSet set;
  if (plans.empty()) throw InputError("plan set needs at least one plan");
  for (const auto& p : plans) {
    if (p.size() != plans.front().size())
      throw DimensionError("plans of different lengths in one batch");
    validate_permutation(p.forward_index, p.size());
    set.forward.push_back(p.forward_index);
    set.inverse.push_back(p.inverse_index);
  }
  set.plans = std::move(plans);
  return set;
}

PlanSet PlanSet::identity(Index length) {
  SortPlan p;
  p.forward_index.resize(length);
  std::iota(p.forward_index.begin(), p.forward_index.end(), Index{0});
  p.inverse_index = p.forward_index;
  p.key_snapshot.assign(length, 0.0);
  return from({std::move(p)});
}

template <typename Scalar>
ForwardContext make_context(const std::vector<HierarchyMap<Scalar>>& brightness,
                            const std::vector<HierarchyMap<Scalar>>& semantic, Index height,
                            Index width) {
  if (brightness.size() != semantic.size() || brightness.empty())
    throw InputError("need one brightness and one semantic map per image (got " +
                     std::to_string(brightness.size()) + " and " + std::to_string(semantic.size()) + ")");
  std::vector<SortPlan> b, s;
  for (std::size_t i = 0; i < brightness.size(); ++i) {
    b.push_back(build_sort_plan(downsample_map(brightness[i], height, width)));
    s.push_back(build_sort_plan(downsample_map(semantic[i], height, width)));
  }
  ForwardContext ctx;
  ctx.brightness = PlanSet::from(std::move(b));
  ctx.semantic = PlanSet::from(std::move(s));
  return ctx;
}

namespace {

void check_plan_length(const PlanSet& plans, Index batch, Index length) {
  if (plans.length() != length)
    throw DimensionError("sort plan of length " + std::to_string(plans.length()) + " for " +
                         std::to_string(length) + " tokens");
  if (plans.plans.size() != 1 && static_cast<Index>(plans.plans.size()) != batch)
    throw DimensionError(std::to_string(plans.plans.size()) + " sort plans for a batch of " +
                         std::to_string(batch));
}

template <typename Scalar>
Tensor<Scalar> spatial_scan(const Tensor<Scalar>& x, const PlanSet& plans, const SsmParams<Scalar>& ssm,
                            ScanCounter* counter) {
  if (x.ndim() != 4) throw DimensionError("hierarchy scan expects [B,C,H,W], got " + shape_string(x.shape()));
  const Index h = x.dim(2), w = x.dim(3);
  return from_tokens(hierarchy_scan(to_tokens(x), plans, ssm, counter), h, w);
}

template <typename Scalar>
Tensor<Scalar> init_weight(const Shape& shape, Index fan_in, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(fan_in));
  return uniform<Scalar>(shape, -bound, bound, rng, true);
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> hierarchy_scan(const Tensor<Scalar>& tokens, const PlanSet& plans,
                              const SsmParams<Scalar>& ssm, ScanCounter* counter) {
  if (tokens.ndim() != 3) throw DimensionError("hierarchy scan expects [B,L,C], got " + shape_string(tokens.shape()));
  check_plan_length(plans, tokens.dim(0), tokens.dim(1));
  const Tensor<Scalar> sorted = gather_tokens(tokens, plans.forward);
  return scatter_tokens(selective_scan(sorted, ssm, counter), plans.inverse);
}

template <typename Scalar>
Tensor<Scalar> bhs_apply(const Tensor<Scalar>& x, const PlanSet& plans, const SsmParams<Scalar>& ssm,
                         ScanCounter* counter) {
  return spatial_scan(x, plans, ssm, counter);
}

template <typename Scalar>
Tensor<Scalar> shs_apply(const Tensor<Scalar>& x, const PlanSet& plans, const SsmParams<Scalar>& ssm,
                         ScanCounter* counter) {
  return spatial_scan(x, plans, ssm, counter);
}

template <typename Scalar>
ScanBranch<Scalar> ScanBranch<Scalar>::init(Index channels, Index out_channels, Index state_dim,
                                            int scans, Rng& rng) {
  ScanBranch b;
  b.ln_gamma = Tensor<Scalar>::full({channels}, Scalar(1), true);
  b.ln_beta = Tensor<Scalar>::zeros({channels}, true);
  for (int k = 0; k < scans; ++k) b.ssm.push_back(SsmParams<Scalar>::init(channels, state_dim, rng));
  b.w_out = init_weight<Scalar>({channels, out_channels}, channels, rng);
  b.b_out = Tensor<Scalar>::zeros({out_channels}, true);
  return b;
}

template <typename Scalar>
MlpBranch<Scalar> MlpBranch<Scalar>::init(Index channels, Index expansion, Rng& rng) {
  MlpBranch m;
  const Index hidden = channels * expansion;
  m.ln_gamma = Tensor<Scalar>::full({channels}, Scalar(1), true);
  m.ln_beta = Tensor<Scalar>::zeros({channels}, true);
  m.w1 = init_weight<Scalar>({channels, hidden}, channels, rng);
  m.b1 = Tensor<Scalar>::zeros({hidden}, true);
  m.w2 = init_weight<Scalar>({hidden, channels}, hidden, rng);
  m.b2 = Tensor<Scalar>::zeros({channels}, true);
  return m;
}

template <typename Scalar>
BsmambaBlockState<Scalar> BsmambaBlockState<Scalar>::init(const BlockConfig& config, Rng& rng) {
  config.validate();
  BsmambaBlockState s;
  s.composition = config.composition;
  const Index c = config.channels;
  switch (config.composition) {
    case Composition::vanilla_ss2d:
      s.brightness.scan = ScanBranch<Scalar>::init(c, c, config.state_dim, 4, rng);
      s.brightness.mlp = MlpBranch<Scalar>::init(c, config.mlp_expansion, rng);
      break;
    case Composition::parallel_concat:
      s.brightness.scan = ScanBranch<Scalar>::init(c, c / 2, config.state_dim, 1, rng);
      s.brightness.mlp = MlpBranch<Scalar>::init(c, config.mlp_expansion, rng);
      s.semantic.scan = ScanBranch<Scalar>::init(c, c / 2, config.state_dim, 1, rng);
      s.semantic.mlp = MlpBranch<Scalar>::init(c, config.mlp_expansion, rng);
      break;
    default:
      s.brightness.scan = ScanBranch<Scalar>::init(c, c, config.state_dim, 1, rng);
      s.brightness.mlp = MlpBranch<Scalar>::init(c, config.mlp_expansion, rng);
      s.semantic.scan = ScanBranch<Scalar>::init(c, c, config.state_dim, 1, rng);
      s.semantic.mlp = MlpBranch<Scalar>::init(c, config.mlp_expansion, rng);
      break;
  }
  return s;
}

template <typename Scalar>
Tensor<Scalar> scan_branch_forward(const Tensor<Scalar>& tokens, const ScanBranch<Scalar>& branch,
                                   MapKind kind, Index height, Index width, ForwardContext& ctx) {
  const Tensor<Scalar> normed = layer_norm(tokens, branch.ln_gamma, branch.ln_beta);
  Tensor<Scalar> scanned;
  if (branch.ssm.size() == 4) {
    scanned = ss2d_tokens(normed, height, width,
                          std::array<SsmParams<Scalar>, 4>{branch.ssm[0], branch.ssm[1], branch.ssm[2],
                                                          branch.ssm[3]},
                          &ctx.counter);
  } else if (branch.ssm.size() == 1) {
    const PlanSet& plans = kind == MapKind::brightness ? ctx.brightness : ctx.semantic;
    if (ctx.record_plans) ctx.plan_log.emplace_back(kind, plans.plans);
    scanned = hierarchy_scan(normed, plans, branch.ssm.front(), &ctx.counter);
  } else {
    throw CheckpointError("scan branch with " + std::to_string(branch.ssm.size()) + " SSMs");
  }
  return linear(scanned, branch.w_out, branch.b_out);
}

template <typename Scalar>
Tensor<Scalar> mlp_branch_forward(const Tensor<Scalar>& tokens, const MlpBranch<Scalar>& branch) {
  const Tensor<Scalar> normed = layer_norm(tokens, branch.ln_gamma, branch.ln_beta);
  return linear(gelu(linear(normed, branch.w1, branch.b1)), branch.w2, branch.b2);
}

namespace {

template <typename Scalar>
Tensor<Scalar> sub_block_tokens(const Tensor<Scalar>& tokens, const MambaSubBlock<Scalar>& block,
                                MapKind kind, Index height, Index width, ForwardContext& ctx) {
  const Tensor<Scalar> mid = add(tokens, scan_branch_forward(tokens, block.scan, kind, height, width, ctx));
  return add(mid, mlp_branch_forward(mid, block.mlp));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> mamba_block_forward(const Tensor<Scalar>& x, const MambaSubBlock<Scalar>& block,
                                   MapKind kind, ForwardContext& ctx) {
  if (x.ndim() != 4) throw DimensionError("mamba block expects [B,C,H,W], got " + shape_string(x.shape()));
  const Index h = x.dim(2), w = x.dim(3);
  return from_tokens(sub_block_tokens(to_tokens(x), block, kind, h, w, ctx), h, w);
}

template <typename Scalar>
Tensor<Scalar> bsmamba_block_tokens(const Tensor<Scalar>& tokens, const BsmambaBlockState<Scalar>& block,
                                    Index height, Index width, ForwardContext& ctx) {
  const auto& b = block.brightness;
  const auto& s = block.semantic;
  switch (block.composition) {
    case Composition::sequential_BS:
      return sub_block_tokens(sub_block_tokens(tokens, b, MapKind::brightness, height, width, ctx), s,
                              MapKind::semantic, height, width, ctx);
    case Composition::sequential_SB:
      return sub_block_tokens(sub_block_tokens(tokens, s, MapKind::semantic, height, width, ctx), b,
                              MapKind::brightness, height, width, ctx);
    case Composition::vanilla_ss2d:
      return sub_block_tokens(tokens, b, MapKind::brightness, height, width, ctx);
    case Composition::parallel_sum:
    case Composition::parallel_concat: {
      const Tensor<Scalar> yb = scan_branch_forward(tokens, b.scan, MapKind::brightness, height, width, ctx);
      const Tensor<Scalar> ys = scan_branch_forward(tokens, s.scan, MapKind::semantic, height, width, ctx);
      const Tensor<Scalar> merged =
          block.composition == Composition::parallel_sum ? add(yb, ys) : concat<Scalar>({yb, ys}, 2);
      const Tensor<Scalar> mid = add(tokens, merged);
      return add(mid, add(mlp_branch_forward(mid, b.mlp), mlp_branch_forward(mid, s.mlp)));
    }
  }
  throw ConfigError("unknown composition");
}

template <typename Scalar>
BackboneWeights<Scalar> BackboneWeights<Scalar>::init(const BlockConfig& config, Index block_count, Rng& rng) {
  config.validate();
  if (block_count < 1) throw ConfigError("backbone needs at least one block");
  BackboneWeights w;
  w.config = config;
  const Index c = config.channels;
  w.stem_w = init_weight<Scalar>({c, 3, 3, 3}, 27, rng);
  w.stem_b = Tensor<Scalar>::zeros({c}, true);
  for (Index i = 0; i < block_count; ++i) w.blocks.push_back(BsmambaBlockState<Scalar>::init(config, rng));
  w.head_w = Tensor<Scalar>::zeros({3, c, 3, 3}, true);
  w.head_b = Tensor<Scalar>::zeros({3}, true);
  return w;
}

template <typename Scalar>
BackboneOutput<Scalar> backbone_forward(const Tensor<Scalar>& image, const BackboneWeights<Scalar>& weights,
                                        ForwardContext& ctx) {
  if (image.ndim() != 4 || image.dim(1) != 3)
    throw InputError("backbone expects images [B,3,H,W], got " + shape_string(image.shape()));
  const Index h = image.dim(2), w = image.dim(3);
  Tensor<Scalar> tokens = to_tokens(conv2d(image, weights.stem_w, weights.stem_b, 1, 1));
  for (const auto& block : weights.blocks) tokens = bsmamba_block_tokens(tokens, block, h, w, ctx);
  BackboneOutput<Scalar> out;
  out.features = from_tokens(tokens, h, w);
  const Scalar eps = static_cast<Scalar>(kHeadLogitEpsilon);
  const Tensor<Scalar> p = clamp(image, eps, Scalar(1) - eps);
  const Tensor<Scalar> logit = sub(log(p), log(add_scalar(neg(p), Scalar(1))));
  out.image = sigmoid(add(conv2d(out.features, weights.head_w, weights.head_b, 1, 1), logit));
  return out;
}

#define BSM_INSTANTIATE_BACKBONE(S)                                                                  \
  template ForwardContext make_context(const std::vector<HierarchyMap<S>>&,                          \
                                       const std::vector<HierarchyMap<S>>&, Index, Index);           \
  template Tensor<S> hierarchy_scan(const Tensor<S>&, const PlanSet&, const SsmParams<S>&, ScanCounter*); \
  template Tensor<S> bhs_apply(const Tensor<S>&, const PlanSet&, const SsmParams<S>&, ScanCounter*); \
  template Tensor<S> shs_apply(const Tensor<S>&, const PlanSet&, const SsmParams<S>&, ScanCounter*); \
  template struct ScanBranch<S>;                                                                     \
  template struct MlpBranch<S>;                                                                      \
  template struct BsmambaBlockState<S>;                                                              \
  template struct BackboneWeights<S>;                                                                \
  template Tensor<S> scan_branch_forward(const Tensor<S>&, const ScanBranch<S>&, MapKind, Index,     \
                                         Index, ForwardContext&);                                    \
  template Tensor<S> mlp_branch_forward(const Tensor<S>&, const MlpBranch<S>&);                      \
  template Tensor<S> mamba_block_forward(const Tensor<S>&, const MambaSubBlock<S>&, MapKind,         \
                                         ForwardContext&);                                           \
  template Tensor<S> bsmamba_block_tokens(const Tensor<S>&, const BsmambaBlockState<S>&, Index,      \
                                          Index, ForwardContext&);                                   \
  template BackboneOutput<S> backbone_forward(const Tensor<S>&, const BackboneWeights<S>&, ForwardContext&);

BSM_INSTANTIATE_FOR_SCALARS(BSM_INSTANTIATE_BACKBONE)

}  // namespace bsm
