#pragma once

#include <span>
#include <vector>

#include "pcar/tensor.hpp"

namespace pcar {

template <typename Real>
struct LossResult {
  Real value{};
  Tensor<Real> grad;  // dL/d(input), same shape as the scored tensor
};

/// Row-wise softmax of an N x n logit matrix, computed in double and
/// shifted by the row max.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& logits);

/// Mean over the batch of -log softmax(logits)[label].
template <typename Real>
LossResult<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels);

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> scores);

}  // namespace pcar
