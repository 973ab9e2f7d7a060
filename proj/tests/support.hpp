#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <vector>

#include "tsformer/autodiff.hpp"
#include "tsformer/config.hpp"
#include "tsformer/dsp.hpp"
#include "tsformer/random.hpp"

namespace test {

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
  tsf::Rng r(seed);
  std::vector<double> v(n);
  for (double& x : v) x = r.uniform(lo, hi);
  return v;
}

/// Largest |a - n| / max(|a|, |n|, floor) between reverse-mode gradients of
/// `loss` and central differences, over every leaf in `leaves`.
inline double gradcheck(const std::vector<tsf::ad::Tensor<double>>& leaves,
                        const std::function<tsf::ad::Tensor<double>()>& loss, double h = 1e-5,
                        double floor = 1e-8) {
  for (const auto& l : leaves) l.node()->grad.clear();
  tsf::ad::backward(loss());
  double worst = 0;
  for (const auto& leaf : leaves) {
    const auto analytic = leaf.grad();
    auto vals = const_cast<tsf::ad::Tensor<double>&>(leaf).leaf_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double lp = loss().item();
      vals[i] = orig - h;
      const double lm = loss().item();
      vals[i] = orig;
      const double num = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - num) /
                                  std::max({std::abs(analytic[i]), std::abs(num), floor}));
    }
  }
  return worst;
}

/// Single-bin DFT amplitude of x at frequency f (Hz).
inline double tone_amplitude(std::span<const double> x, double f, double fs) {
  std::complex<double> acc = 0;
  for (std::size_t k = 0; k < x.size(); ++k)
    acc += x[k] * std::exp(std::complex<double>(0, -2 * std::numbers::pi * f * static_cast<double>(k) / fs));
  return 2.0 * std::abs(acc) / static_cast<double>(x.size());
}

inline tsf::dsp::RawRecording recording(std::size_t channels, std::size_t samples, double fs) {
  tsf::dsp::RawRecording r;
  r.channels = channels;
  r.samples = samples;
  r.sample_rate = fs;
  r.data.assign(channels * samples, 0.0f);
  r.subject_id = "S01";
  r.block_id = 1;
  for (std::size_t c = 0; c < channels; ++c) r.channel_names.push_back("C" + std::to_string(c + 1));
  return r;
}

/// A run small enough for unit tests: 3 subjects x 2 blocks x 80 trials.
inline tsf::RunConfig small_config() {
  tsf::RunConfig c;
  c.model.channels = 4;
  c.model.dim = 16;
  c.model.heads = 2;
  c.synth.channels = 4;
  c.synth.subjects = 3;
  c.synth.blocks = 2;
  c.synth.trials_per_block = 80;
  c.synth.target_rate = 0.25;
  c.train.batch_size = 16;
  c.train.pretrain_epochs = 2;
  c.train.finetune_epochs = 3;
  c.protocol.training_blocks = 1;
  c.seed = 5;
  return c;
}

}  // namespace test
