#pragma once

#include <stdexcept>
#include <string>

namespace bsm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes do not conform (broadcast, matmul, channel counts, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN/Inf, or a gradient went non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an op's mathematical domain (e.g. log of a non-positive value).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Index list is not a permutation of 0..L-1.
class PermutationError : public Error {
 public:
  using Error::Error;
};

/// Size not supported by a kernel (radix-2 FFT on non power-of-two extents).
class UnsupportedSizeError : public Error {
 public:
  using Error::Error;
};

/// API misuse: backward on a non-scalar, mutating a non-leaf, ...
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad input data (wrong channel count, mask shape mismatch, image too small).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint is corrupt or does not match the architecture.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Dataset layout problem (orphan files, inconsistent mask sidecars).
class DatasetError : public Error {
 public:
  using Error::Error;
};

/// File could not be decoded (PNG/PGM/config syntax).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace bsm
