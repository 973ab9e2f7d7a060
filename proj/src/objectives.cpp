#include "tsformer/objectives.hpp"

#include <vector>

#include "json.hpp"
#include "tsformer/error.hpp"

namespace tsf::obj {

using ad::Tensor;

namespace {

// log g for every anchor of view a against view b.
template <typename T>
Tensor<T> anchor_log_ratio(const Tensor<T>& a, const Tensor<T>& b, const std::vector<T>& off_diag,
                           T inv_tau) {
  const Tensor<T> same = ad::exp(ad::mul_scalar(ad::matmul(a, ad::transpose(a)), inv_tau));
  const Tensor<T> cross = ad::exp(ad::mul_scalar(ad::matmul(a, ad::transpose(b)), inv_tau));
  const Tensor<T> den = ad::add(ad::row_sum(ad::mask_mul<T>(same, off_diag)), ad::row_sum(cross));
  return ad::sub(ad::log(ad::diag(cross)), ad::log(den));
}

}  // namespace

template <typename T>
Tensor<T> multiview_loss(const Tensor<T>& z_tem, const Tensor<T>& z_spe, T tau) {
  if (!(tau > T{0})) throw ConfigError("multiview_loss: temperature must be positive");
  if (z_tem.rank() != 2 || z_tem.shape() != z_spe.shape())
    throw ShapeError("multiview_loss: feature batches must be equal N x dz matrices");
  const std::size_t n = z_tem.dim(0);
  if (n == 0) throw ShapeError("multiview_loss: empty batch");
  std::vector<T> off_diag(n * n, T{1});
  for (std::size_t i = 0; i < n; ++i) off_diag[i * n + i] = T{0};

  const Tensor<T> ut = ad::normalize_rows(z_tem);
  const Tensor<T> us = ad::normalize_rows(z_spe);
  const T inv_tau = T{1} / tau;
  const Tensor<T> total = ad::add(ad::sum(anchor_log_ratio(ut, us, off_diag, inv_tau)),
                                  ad::sum(anchor_log_ratio(us, ut, off_diag, inv_tau)));
  return ad::mul_scalar(total, T{-1} / static_cast<T>(2 * n));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits must be N x R with one label per row");
  const std::size_t n = logits.dim(0), r = logits.dim(1);
  std::vector<T> onehot(n * r, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= r)
      throw DataError("cross_entropy: label out of range");
    onehot[i * r + static_cast<std::size_t>(labels[i])] = T{1};
  }
  const Tensor<T> picked = ad::mask_mul<T>(ad::log_softmax_rows(logits), onehot);
  return ad::mul_scalar(ad::sum(picked), T{-1} / static_cast<T>(n));
}

void ConfusionCounts::add(dsp::Label truth, dsp::Label predicted) {
  const bool pos = truth == dsp::Label::target;
  const bool hit = truth == predicted;
  if (pos) (hit ? tp : fn) += 1;
  else (hit ? tn : fp) += 1;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fn += o.fn;
  tn += o.tn;
  fp += o.fp;
  return *this;
}

Metrics metrics(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) throw NumericalError("metrics: no positive samples, TPR undefined");
  if (c.tn + c.fp == 0) throw NumericalError("metrics: no negative samples, FPR undefined");
  Metrics m;
  m.tpr = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  m.fpr = static_cast<double>(c.fp) / static_cast<double>(c.tn + c.fp);
  const double tnr = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  m.ba = (m.tpr + tnr) / 2.0;
  return m;
}

std::string metrics_json(const ConfusionCounts& c) {
  const Metrics m = metrics(c);
  nlohmann::ordered_json j;
  j["ba"] = m.ba;
  j["tpr"] = m.tpr;
  j["fpr"] = m.fpr;
  j["tp"] = c.tp;
  j["fn"] = c.fn;
  j["tn"] = c.tn;
  j["fp"] = c.fp;
  return j.dump();
}

template Tensor<float> multiview_loss<float>(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> multiview_loss<double>(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> cross_entropy<float>(const Tensor<float>&, std::span<const int>);
template Tensor<double> cross_entropy<double>(const Tensor<double>&, std::span<const int>);

}  // namespace tsf::obj
