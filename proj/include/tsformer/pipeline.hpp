#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tsformer/checkpoint.hpp"
#include "tsformer/config.hpp"
#include "tsformer/dsp.hpp"
#include "tsformer/model.hpp"
#include "tsformer/objectives.hpp"
#include "tsformer/synthgen.hpp"

namespace tsf::pipeline {

using Log = std::function<void(const std::string&)>;

struct Block {
  std::string subject;
  int block_id = 0;
  dsp::EpochSet epochs;
  fs::path spectrogram_cache;  // empty when the CWT must be computed
};

struct Subject {
  std::string id;
  std::vector<Block> blocks;  // ascending block_id
};

using Corpus = std::vector<Subject>;

/// Band-pass at the recording rate, decimate to the target rate, epoch.
dsp::EpochSet preprocess_recording(const dsp::RawRecording& rec, const PreprocessConfig& cfg);

/// Reads <root>/<subject>/<block>/. A block directory holds either a raw
/// recording or cached `epochs/` (+ optional `spectrogram/`) written by
/// preprocess_corpus.
Corpus load_corpus(const fs::path& root, const PreprocessConfig& cfg);
Corpus corpus_from_synthetic(const std::vector<synth::SubjectData>& data, const PreprocessConfig& cfg);
/// Writes epochs/ and spectrogram/ caches for every block under `out`.
void preprocess_corpus(const fs::path& raw_root, const fs::path& out, const RunConfig& cfg,
                       const Log& log = {});

const Subject& find_subject(const Corpus& corpus, const std::string& id);
/// Blocks whose 1-based position is in [first, last].
std::vector<const Block*> select_blocks(const Subject& s, std::size_t first, std::size_t last);

/// Paired temporal and spectral inputs, aligned by trial index.
struct TrialSet {
  dsp::EpochSet epochs;
  dsp::Spectrogram spectra;

  std::size_t size() const { return epochs.trials; }
  model::TrialView view(std::size_t i) const { return {epochs.trial(i), spectra.trial(i)}; }
};

/// Trials `indices` of the pooled blocks (all when null), spectra read from
/// a matching cache or computed.
TrialSet build_trials(std::span<const Block* const> blocks, const std::vector<std::size_t>* indices,
                      const PreprocessConfig& cfg);

/// Every target plus an equal number of nontargets drawn without
/// replacement, in a seeded random order.
std::vector<std::size_t> rebalance_indices(std::span<const dsp::Label> labels, std::uint64_t seed);
dsp::EpochSet rebalance(const dsp::EpochSet& train, std::uint64_t seed);

struct TrainResult {
  Checkpoint final_ckpt;
  Checkpoint best_ckpt;  // lowest mean training loss
};

TrainResult pretrain(std::span<const Block* const> blocks, const RunConfig& cfg, const Log& log = {});
TrainResult pretrain(const TrialSet& train, const TrialSet* holdout, const RunConfig& cfg,
                     const Log& log = {});

/// Adapter-only training with cross-entropy. The frozen trunk is evaluated
/// once per trial; the pretrainable tensors are left untouched.
TrainResult finetune(const Checkpoint& pretrained, std::span<const Block* const> blocks,
                     const RunConfig& cfg, const std::string& subject, const Log& log = {});

obj::ConfusionCounts evaluate(const model::ModelParams<float>& params, const TrialSet& trials,
                              model::Mode mode);
/// Streams over the blocks in chunks so spectra for all trials are never
/// resident at once.
obj::ConfusionCounts evaluate(const model::ModelParams<float>& params,
                              std::span<const Block* const> blocks, model::Mode mode,
                              const PreprocessConfig& cfg);

struct FoldRecord {
  std::string subject;
  Protocol protocol{};
  std::vector<int> train_blocks, test_blocks;
  obj::ConfusionCounts counts;
  std::optional<obj::ConfusionCounts> before_finetune;  // two_stage only
  std::string to_json() const;
};

struct Report {
  std::vector<FoldRecord> folds;
  std::string summary_json() const;
};

Report run_protocol(const Corpus& corpus, const RunConfig& cfg, const Log& log = {},
                    const std::function<void(const FoldRecord&)>& on_fold = {});

struct GradcheckReport {
  double max_rel_error = 0;
  std::string worst_parameter;
  std::size_t checked = 0;
  std::map<std::string, double> per_parameter;
};

/// Central differences of the overall loss over every parameter of the tiny
/// configuration against reverse-mode gradients. `use_double` selects the
/// 64-bit graph; otherwise the 32-bit graph is compared with 64-bit
/// differences.
GradcheckReport gradcheck(bool use_double, std::uint64_t seed = 1, double h = 1e-5);
model::ModelConfig tiny_config();

/// Writes z_tem, z_spe, z_fus (and z_sub when adapted) as N x dim tensors
/// plus a trials.json with labels and provenance.
void export_features(const model::ModelParams<float>& params, std::span<const Block* const> blocks,
                     model::Mode mode, const PreprocessConfig& cfg, const fs::path& out);

}  // namespace tsf::pipeline
