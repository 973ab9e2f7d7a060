#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsformer/dsp.hpp"

namespace tsf {
namespace fs = std::filesystem;
}

namespace tsf::io {

/// Raw little-endian float blobs.
void write_f32(const fs::path& file, std::span<const float> values);
void write_f64(const fs::path& file, std::span<const double> values);
std::vector<float> read_f32(const fs::path& file, std::size_t expected_count);
std::vector<double> read_f64(const fs::path& file, std::size_t expected_count);

/// Recording container: meta.json + signal.bin + events.tsv.
void write_recording(const fs::path& dir, const dsp::RawRecording& rec);
dsp::RawRecording read_recording(const fs::path& dir);
bool is_recording_dir(const fs::path& dir);

/// EpochSet container: meta.json (shape, labels, provenance) + data.bin.
void write_epochs(const fs::path& dir, const dsp::EpochSet& ep);
dsp::EpochSet read_epochs(const fs::path& dir);

/// Spectrogram container: meta.json (shape, scales, wavelet) + data.bin.
void write_spectrogram(const fs::path& dir, const dsp::Spectrogram& sg);
dsp::Spectrogram read_spectrogram(const fs::path& dir);

/// Named tensor blob: <name>.json {name, shape, dtype, byte_order} + <name>.bin.
struct TensorBlob {
  std::string name;
  std::vector<std::size_t> shape;
  std::string dtype;  // "f32" or "f64"
  std::vector<double> values;
};

void write_tensor(const fs::path& dir, const std::string& name,
                  std::span<const std::size_t> shape, std::span<const float> values);
void write_tensor(const fs::path& dir, const std::string& name,
                  std::span<const std::size_t> shape, std::span<const double> values);
TensorBlob read_tensor(const fs::path& dir, const std::string& name);

/// Writes text atomically enough for our purposes (truncate + write).
void write_text(const fs::path& file, const std::string& text);
std::string read_text(const fs::path& file);

}  // namespace tsf::io
