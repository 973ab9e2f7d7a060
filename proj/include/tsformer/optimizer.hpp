#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tsformer/config.hpp"
#include "tsformer/model.hpp"

namespace tsf::optim {

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::set<std::string> trainable;
  std::map<std::string, std::vector<double>> m, v;
};

/// Zero moments for exactly the `trainable` tensors.
template <typename T>
AdamState<T> make_adam(const model::ModelParams<T>& params, const std::set<std::string>& trainable);

/// One bias-corrected Adam update of the trainable subset at learning rate
/// `lr`. Gradients must be supplied for exactly that subset; a gradient for
/// any other tensor is rejected before anything is modified.
template <typename T>
void adam_step(model::ModelParams<T>& params, const std::map<std::string, std::vector<T>>& grads,
               AdamState<T>& state, const OptimizerConfig& cfg, double lr);

}  // namespace tsf::optim
