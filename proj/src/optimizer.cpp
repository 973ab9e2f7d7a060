#include "tsformer/optimizer.hpp"

#include <cmath>

#include "tsformer/error.hpp"

namespace tsf::optim {

template <typename T>
AdamState<T> make_adam(const model::ModelParams<T>& params, const std::set<std::string>& trainable) {
  AdamState<T> st;
  st.trainable = trainable;
  for (const std::string& name : trainable) {
    const std::size_t n = params.at(name).values.size();
    st.m.emplace(name, std::vector<double>(n, 0.0));
    st.v.emplace(name, std::vector<double>(n, 0.0));
  }
  return st;
}

template <typename T>
void adam_step(model::ModelParams<T>& params, const std::map<std::string, std::vector<T>>& grads,
               AdamState<T>& state, const OptimizerConfig& cfg, double lr) {
  for (const auto& [name, g] : grads) {
    if (!state.trainable.contains(name))
      throw ConfigError("adam_step: gradient supplied for frozen tensor '" + name + "'");
    if (g.size() != params.at(name).values.size())
      throw ShapeError("adam_step: gradient size mismatch for '" + name + "'");
  }
  for (const std::string& name : state.trainable)
    if (!grads.contains(name)) throw ConfigError("adam_step: missing gradient for '" + name + "'");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    auto& theta = params.at(name).values;
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double p = static_cast<double>(theta[i]);
      double gi = static_cast<double>(g[i]);
      if (!cfg.decoupled) gi += cfg.weight_decay * p;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double next = p - lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (cfg.decoupled) next -= lr * cfg.weight_decay * p;
      theta[i] = static_cast<T>(next);
    }
  }
}

template AdamState<float> make_adam<float>(const model::ModelParams<float>&, const std::set<std::string>&);
template AdamState<double> make_adam<double>(const model::ModelParams<double>&, const std::set<std::string>&);
template void adam_step<float>(model::ModelParams<float>&, const std::map<std::string, std::vector<float>>&,
                               AdamState<float>&, const OptimizerConfig&, double);
template void adam_step<double>(model::ModelParams<double>&, const std::map<std::string, std::vector<double>>&,
                                AdamState<double>&, const OptimizerConfig&, double);

}  // namespace tsf::optim
