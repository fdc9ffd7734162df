#include "pcar/classify.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcar {

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax: expected N x n logits, got " + shape_str(logits.shape()));
  const int n_batch = logits.dim(0);
  const int n = logits.dim(1);
  Tensor<Real> probs(logits.shape());
  for (int i = 0; i < n_batch; ++i) {
    const Real* row = logits.data() + static_cast<std::int64_t>(i) * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (int j = 0; j < n; ++j) {
      probs[static_cast<std::int64_t>(i) * n + j] = static_cast<Real>(std::exp(static_cast<double>(row[j]) - mx) / z);
    }
  }
  return probs;
}

template <typename Real>
LossResult<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size()) {
    throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const int n_batch = logits.dim(0);
  const int n = logits.dim(1);
  LossResult<Real> out;
  out.grad = Tensor<Real>(logits.shape());
  double total = 0.0;
  for (int i = 0; i < n_batch; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= n) throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    const Real* row = logits.data() + static_cast<std::int64_t>(i) * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = std::log(z) + mx;
    total += log_z - static_cast<double>(row[y]);
    for (int j = 0; j < n; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - log_z);
      out.grad[static_cast<std::int64_t>(i) * n + j] = static_cast<Real>((p - (j == y ? 1.0 : 0.0)) / n_batch);
    }
  }
  out.value = static_cast<Real>(total / n_batch);
  return out;
}

int argmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax: empty input");
  int best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template Tensor<float> softmax<float>(const Tensor<float>&);
template Tensor<double> softmax<double>(const Tensor<double>&);
template LossResult<float> softmax_cross_entropy<float>(const Tensor<float>&, std::span<const int>);
template LossResult<double> softmax_cross_entropy<double>(const Tensor<double>&, std::span<const int>);

}  // namespace pcar
