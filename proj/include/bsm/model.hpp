#pragma once

// Full enhancement model: backbone followed by the optional DE-Net.

#include "bsm/backbone.hpp"
#include "bsm/denet.hpp"
#include "bsm/tensor.hpp"

#include <map>
#include <string>

namespace bsm {

struct ModelConfig {
  BlockConfig block;
  Index blocks = 4;
  bool use_denet = true;
  DenetConfig denet;

  void validate() const;
  /// `key = value` lines, the architecture block stored in checkpoints.
  std::string to_text() const;
  /// Reads the keys written by to_text; unknown keys throw ConfigError.
  static ModelConfig from_entries(const std::map<std::string, std::string>& entries);
  bool operator==(const ModelConfig& other) const { return to_text() == other.to_text(); }
};

template <typename Scalar>
struct ModelOutput {
  Tensor<Scalar> features;      // backbone features [B, C, H, W]
  Tensor<Scalar> intermediate;  // backbone image [B, 3, H, W]
  Tensor<Scalar> output;        // final image [B, 3, H, W]
};

template <typename Scalar>
class BsmambaModel {
 public:
  BsmambaModel() = default;
  BsmambaModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  BackboneWeights<Scalar>& backbone() { return backbone_; }
  const BackboneWeights<Scalar>& backbone() const { return backbone_; }
  DenetWeights<Scalar>& denet() { return denet_; }
  const DenetWeights<Scalar>& denet() const { return denet_; }

  /// Every trainable tensor with its checkpoint name, in a fixed order.
  NamedParameters<Scalar> parameters();
  /// Replaces the weights; CheckpointError on a missing name or shape mismatch.
  void load_parameters(const NamedParameters<Scalar>& source);
  Index parameter_count();

  /// images: [B, 3, H, W] in [0, 1]; ctx holds plans at H x W.
  ModelOutput<Scalar> forward(const Tensor<Scalar>& images, ForwardContext& ctx) const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    backbone_.visit(prefix + "backbone.", f);
    if (config_.use_denet) denet_.visit(prefix + "denet.", f);
  }

 private:
  ModelConfig config_;
  BackboneWeights<Scalar> backbone_;
  DenetWeights<Scalar> denet_;
};

}  // namespace bsm
