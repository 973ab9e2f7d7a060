#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "tsformer/autodiff.hpp"
#include "tsformer/dsp.hpp"

namespace tsf::obj {

/// Symmetric temporal/spectral consistency loss over a batch of N paired
/// features (rows of z_tem and z_spe). Each anchor's denominator holds its
/// same-view negatives (j != i) and every cross-view pair, the positive
/// included, so N = 1 yields exactly zero.
template <typename T>
ad::Tensor<T> multiview_loss(const ad::Tensor<T>& z_tem, const ad::Tensor<T>& z_spe, T tau);

/// Mean negative log-likelihood of softmax(logits) for integer labels.
template <typename T>
ad::Tensor<T> cross_entropy(const ad::Tensor<T>& logits, std::span<const int> labels);

template <typename T>
ad::Tensor<T> overall_loss(const ad::Tensor<T>& ce, const ad::Tensor<T>& mv) {
  return ad::add(ce, mv);
}

struct ConfusionCounts {
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;

  void add(dsp::Label truth, dsp::Label predicted);
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

struct Metrics {
  double ba = 0, tpr = 0, fpr = 0;
};

/// Throws NumericalError when a class has no samples.
Metrics metrics(const ConfusionCounts& c);

/// {"ba":..,"tpr":..,"fpr":..,"tp":..,"fn":..,"tn":..,"fp":..}
std::string metrics_json(const ConfusionCounts& c);

}  // namespace tsf::obj
