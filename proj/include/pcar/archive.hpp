#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "pcar/backbone.hpp"
#include "pcar/nn/module.hpp"

namespace pcar {

/// Raised when stored tensors do not fit the model they are loaded into.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor archive: `dir/manifest.json` maps every name to {shape, dtype}
/// and `dir/<name>.bin` holds the raw little-endian float32 values.
void save_archive(const std::filesystem::path& dir, const NamedTensors<float>& tensors);
NamedTensors<float> load_archive(const std::filesystem::path& dir);

/// Parameters and buffers of `state` converted to float32.
template <typename Real>
NamedTensors<float> export_state(const nn::StateDict<Real>& state);

/// Copies every parameter and buffer of `state` from `tensors`. A shape
/// difference, or a missing name unless `allow_missing`, raises
/// CheckpointMismatch; tensors that the model does not use are ignored.
template <typename Real>
void import_state(nn::StateDict<Real>& state, const NamedTensors<float>& tensors, bool allow_missing = false);

}  // namespace pcar
