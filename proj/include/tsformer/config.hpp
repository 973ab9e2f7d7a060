#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsformer/dsp.hpp"
#include "tsformer/storage.hpp"
#include "tsformer/model.hpp"
#include "tsformer/synthgen.hpp"

namespace tsf {

enum class Protocol { subject_dependent, loso, two_stage };

std::string_view protocol_name(Protocol p);
Protocol parse_protocol(std::string_view name);

struct PreprocessConfig {
  double target_rate = 250.0;
  dsp::FilterSpec filter{};
  double epoch_length_s = 1.0;
  dsp::Wavelet wavelet = dsp::Wavelet::mexican_hat;
  std::vector<double> scales = dsp::default_scales(20);

  bool operator==(const PreprocessConfig&) const = default;
};

struct OptimizerConfig {
  double base_lr = 5e-4;
  double decay = 0.8;
  std::size_t decay_every = 40;  // epochs
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool decoupled = true;  // false folds the decay into the gradient

  /// base_lr * decay^floor(epoch / decay_every), by repeated multiplication.
  double lr(std::size_t epoch) const;
  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t pretrain_epochs = 100;
  std::size_t finetune_epochs = 50;
  double tau = 0.2;
  double holdout_fraction = 0.1;
  bool finetune_rebalance = true;

  bool operator==(const TrainConfig&) const = default;
};

struct ProtocolConfig {
  Protocol name = Protocol::two_stage;
  std::size_t training_blocks = 4;
  std::vector<std::string> test_subjects;  // empty = every subject is a fold

  bool operator==(const ProtocolConfig&) const = default;
};

struct RunConfig {
  model::ModelConfig model{};
  PreprocessConfig preprocess{};
  TrainConfig train{};
  OptimizerConfig optimizer{};
  ProtocolConfig protocol{};
  synth::SynthConfig synth{};
  std::uint64_t seed = 0;

  /// Throws ConfigError. Also requires model.scales == scale count and a
  /// time length matching the epoch length at the target rate.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Settings used by the synthetic end-to-end run.
RunConfig reduced_config();

std::string to_json(const RunConfig& cfg);
/// Keys absent from `text` keep the values already in `base`; unknown keys
/// are rejected.
RunConfig from_json(const std::string& text, const RunConfig& base = RunConfig{});
RunConfig load_config(const fs::path& file, const RunConfig& base = RunConfig{});

}  // namespace tsf
