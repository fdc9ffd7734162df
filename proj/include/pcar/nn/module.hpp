#pragma once

#include <string>
#include <vector>

#include "pcar/tensor.hpp"

namespace pcar::nn {

enum class Phase { kTrain, kEval };

/// A trainable tensor with its gradient accumulator. `decay` is false for
/// normalization scales/shifts and biases, which are excluded from weight
/// decay.
template <typename Real>
struct Parameter {
  Tensor<Real> value;
  Tensor<Real> grad;
  bool decay = true;

  Parameter() = default;
  Parameter(Shape shape, bool decay_)
      : value(shape), grad(shape), decay(decay_) {}

  void zero_grad() { grad.zero(); }
};

template <typename Real>
struct NamedParameter {
  std::string name;
  Parameter<Real>* param;
};

template <typename Real>
struct NamedBuffer {
  std::string name;
  Tensor<Real>* tensor;
};

/// Flat view of every parameter and non-trainable buffer (batch-norm running
/// statistics) of a network, keyed by dotted path.
template <typename Real>
struct StateDict {
  std::vector<NamedParameter<Real>> params;
  std::vector<NamedBuffer<Real>> buffers;

  void add(const std::string& name, Parameter<Real>& p) { params.push_back({name, &p}); }
  void add_buffer(const std::string& name, Tensor<Real>& t) { buffers.push_back({name, &t}); }

  void zero_grad() {
    for (auto& p : params) p.param->zero_grad();
  }

  Parameter<Real>* find(const std::string& name) const {
    for (const auto& p : params) {
      if (p.name == name) return p.param;
    }
    return nullptr;
  }

  std::int64_t num_parameters() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.param->value.numel();
    return n;
  }
};

}  // namespace pcar::nn
