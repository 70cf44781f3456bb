#include "bsm/model.hpp"

#include "bsm/errors.hpp"
#include "bsm/parameters.hpp"
#include "parse.hpp"

#include <sstream>

namespace bsm {

using detail::parse_bool;
using detail::parse_double;
using detail::parse_index;

void ModelConfig::validate() const {
  block.validate();
  if (blocks < 1) throw ConfigError("model needs at least one block");
  if (use_denet) denet.validate();
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "channels = " << block.channels << '\n'
      << "mlp_expansion = " << block.mlp_expansion << '\n'
      << "state_dim = " << block.state_dim << '\n'
      << "composition = " << to_string(block.composition) << '\n'
      << "scorer = " << to_string(block.scorer) << '\n'
      << "blocks = " << blocks << '\n'
      << "use_denet = " << (use_denet ? "true" : "false") << '\n'
      << "denet_width = " << denet.width << '\n'
      << "denet_ffc_blocks = " << denet.ffc_blocks << '\n'
      << "denet_alpha = " << denet.alpha << '\n';
  return out.str();
}

ModelConfig ModelConfig::from_entries(const std::map<std::string, std::string>& entries) {
  ModelConfig c;
  for (const auto& [key, value] : entries) {
    if (key == "channels") c.block.channels = parse_index(key, value);
    else if (key == "mlp_expansion") c.block.mlp_expansion = parse_index(key, value);
    else if (key == "state_dim") c.block.state_dim = parse_index(key, value);
    else if (key == "composition") c.block.composition = parse_composition(value);
    else if (key == "scorer") c.block.scorer = parse_scorer(value);
    else if (key == "blocks") c.blocks = parse_index(key, value);
    else if (key == "use_denet") c.use_denet = parse_bool(key, value);
    else if (key == "denet_width") c.denet.width = parse_index(key, value);
    else if (key == "denet_ffc_blocks") c.denet.ffc_blocks = parse_index(key, value);
    else if (key == "denet_alpha") c.denet.alpha = parse_double(key, value);
    else throw ConfigError("unknown architecture key '" + key + "'");
  }
  c.validate();
  return c;
}

template <typename Scalar>
BsmambaModel<Scalar>::BsmambaModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  backbone_ = BackboneWeights<Scalar>::init(config_.block, config_.blocks, rng);
  if (config_.use_denet) denet_ = DenetWeights<Scalar>::init(config_.denet, rng);
}

template <typename Scalar>
NamedParameters<Scalar> BsmambaModel<Scalar>::parameters() {
  return collect_parameters<Scalar>(*this);
}

template <typename Scalar>
void BsmambaModel<Scalar>::load_parameters(const NamedParameters<Scalar>& source) {
  const auto own = parameters();
  if (own.size() != source.size())
    throw CheckpointError("architecture has " + std::to_string(own.size()) + " tensors, checkpoint has " +
                          std::to_string(source.size()));
  assign_parameters<Scalar>(*this, source);
  for (auto& [name, t] : parameters()) t.set_requires_grad(true);
}

template <typename Scalar>
Index BsmambaModel<Scalar>::parameter_count() {
  return count_scalars(parameters());
}

template <typename Scalar>
ModelOutput<Scalar> BsmambaModel<Scalar>::forward(const Tensor<Scalar>& images, ForwardContext& ctx) const {
  ModelOutput<Scalar> out;
  BackboneOutput<Scalar> b = backbone_forward(images, backbone_, ctx);
  out.features = b.features;
  out.intermediate = b.image;
  out.output = config_.use_denet ? denet_forward(b.image, denet_) : b.image;
  return out;
}

template class BsmambaModel<float>;
template class BsmambaModel<double>;

}  // namespace bsm
