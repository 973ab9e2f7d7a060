#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tsformer/config.hpp"
#include "tsformer/model.hpp"
#include "tsformer/storage.hpp"

namespace tsf {

enum class Stage { pretrained, finetuned };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;  // mean training loss over the epoch
  double ce = 0;
  double mv = 0;
  std::optional<double> holdout_ba;

  bool operator==(const EpochLog&) const = default;
};

struct Checkpoint {
  RunConfig config;
  Stage stage = Stage::pretrained;
  std::size_t epoch = 0;  // number of completed epochs
  std::string subject;    // fine-tuned subject, empty after pre-training
  std::vector<EpochLog> history;
  model::ModelParams<float> params;

  bool operator==(const Checkpoint&) const = default;
};

/// header.json plus tensors/<name>.json and tensors/<name>.bin.
void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& dir);

}  // namespace tsf
