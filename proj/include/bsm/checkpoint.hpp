#pragma once

// Model checkpoint file.
//
//   "BSMK"  u32 version  u32 config_bytes  config text
//   u32 tensor_count, then per tensor:
//     u16 name_bytes  name  u8 dtype (1 = f32, 2 = f64)  u8 ndim  i64 dims[ndim]  u64 offset
//   payload (little-endian values, offsets relative to its start)
//   u32 CRC-32 of every preceding byte
//
// Files are written to a temporary name and renamed into place.

#include "bsm/model.hpp"
#include "bsm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace bsm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // widened to double on read
};

struct CheckpointContents {
  ModelConfig config;
  std::string config_text;
  std::vector<StoredTensor> tensors;
};

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const NamedParameters<Scalar>& parameters);

/// Parses and verifies a checkpoint. Throws CheckpointError on a bad magic,
/// version, CRC, truncation, duplicate tensor names or an invalid config block.
CheckpointContents read_checkpoint(const std::filesystem::path& path);

/// Builds the model described by the checkpoint and loads its weights.
/// CheckpointError when a tensor is missing, extra, or of the wrong shape.
template <typename Scalar>
BsmambaModel<Scalar> load_model(const std::filesystem::path& path);

/// As load_model, additionally requiring the stored architecture to equal `expected`.
template <typename Scalar>
BsmambaModel<Scalar> load_model(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace bsm
