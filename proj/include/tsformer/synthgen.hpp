#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsformer/dsp.hpp"
#include "tsformer/storage.hpp"

namespace tsf::synth {

/// Corpus-wide generator settings.
struct SynthConfig {
  std::size_t subjects = 9;
  std::size_t blocks = 2;
  std::size_t trials_per_block = 700;
  std::size_t channels = 16;
  double sample_rate = 1000.0;
  double stimulus_rate = 10.0;  // Hz
  double target_rate = 0.04;
  double noise_level = 1.0;     // RMS of the background per channel
  double erp_amplitude = 1.0;   // P300 peak before subject scaling
  double harmonic_amplitude = 0.6;
  double shift = 0.25;          // inter-subject variability, 0 = identical subjects
  double shifted_extra = 1.5;   // variability multiplier for shifted subjects
  std::size_t shifted_subjects = 1;  // the last ones are drawn with the larger shift
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

struct SubjectProfile {
  std::uint64_t seed = 0;
  std::size_t channels = 0;
  std::vector<double> mixing;  // row-major C x C
  double jitter_ms = 20.0;
  double p300_scale = 1.0;
  double harmonic_scale = 1.0;
  double noise_scale = 1.0;
  double latency_shift_ms = 0.0;
};

/// Draws a profile whose deviation from the canonical subject grows with
/// `shift`. The mixing matrix is I + eR, shrunk until its condition number
/// is at most 50.
SubjectProfile make_profile(std::uint64_t seed, std::size_t channels, double shift);

double condition_number(const SubjectProfile& p);

/// Index of the channel carrying the strongest P300 pattern.
std::size_t parietal_channel(std::size_t channels);

/// One recording per block; events every 1/stimulus_rate seconds, labels
/// drawn independently with probability target_rate.
std::vector<dsp::RawRecording> gen_subject(const SubjectProfile& profile, const std::string& subject_id,
                                           std::size_t n_blocks, std::size_t trials_per_block,
                                           double target_rate, const SynthConfig& cfg);

struct SubjectData {
  std::string id;
  SubjectProfile profile;
  std::vector<dsp::RawRecording> blocks;
};

/// Subjects "S01".. with profiles derived from cfg.seed.
std::vector<SubjectData> gen_corpus(const SynthConfig& cfg);

/// Writes <root>/<subject>/block_<k>/ recording directories.
void write_corpus(const fs::path& root, const std::vector<SubjectData>& corpus);

/// Unfiltered pink noise of unit RMS from seeded white noise shaped by 1/sqrt(f).
std::vector<double> pink_noise(std::size_t n, std::uint64_t seed);

}  // namespace tsf::synth
