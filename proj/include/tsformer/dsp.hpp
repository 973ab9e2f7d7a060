#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tsf::dsp {

/// Guards FFTW planner calls, which are not thread-safe; plan execution is.
std::mutex& fft_planner_mutex();

enum class Label : std::uint8_t { nontarget = 0, target = 1 };

struct Event {
  std::size_t onset_sample = 0;
  Label label = Label::nontarget;

  bool operator==(const Event&) const = default;
};

/// Continuous multichannel recording of one block. `data` is row-major
/// channels x samples.
struct RawRecording {
  std::vector<float> data;
  std::size_t channels = 0;
  std::size_t samples = 0;
  double sample_rate = 0.0;
  std::vector<std::string> channel_names;
  std::vector<Event> events;
  std::string subject_id;
  int block_id = 0;

  std::span<const float> channel(std::size_t c) const {
    return {data.data() + c * samples, samples};
  }
  std::span<float> channel(std::size_t c) { return {data.data() + c * samples, samples}; }

  /// Throws DataError when the container invariants do not hold.
  void validate() const;
};

/// Fixed-length labeled trials, row-major trials x channels x samples.
struct EpochSet {
  std::vector<float> data;
  std::size_t trials = 0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<Label> labels;
  std::vector<std::string> subject_ids;
  std::vector<int> block_ids;
  double sample_rate = 0.0;

  std::size_t trial_size() const { return channels * samples; }
  std::span<const float> trial(std::size_t i) const {
    return {data.data() + i * trial_size(), trial_size()};
  }

  std::size_t count(Label label) const;

  /// New set holding the given trials in the given order.
  EpochSet select(std::span<const std::size_t> indices) const;

  /// Concatenates sets with identical trial geometry.
  static EpochSet concat(std::span<const EpochSet> parts);
};

enum class Wavelet { mexican_hat, morlet, gaussian, complex_gaussian };

std::string_view wavelet_name(Wavelet w);
/// Accepts "mexican_hat"/"mexh", "morlet"/"morl", "gaussian"/"gaus1",
/// "complex_gaussian"/"cgau1". Throws ConfigError otherwise.
Wavelet parse_wavelet(std::string_view name);

/// Per-trial CWT coefficients, row-major trials x scales x channels x samples.
struct Spectrogram {
  std::vector<float> data;
  std::size_t trials = 0;
  std::size_t scales_count = 0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<double> scales;
  Wavelet wavelet = Wavelet::mexican_hat;

  std::size_t trial_size() const { return scales_count * channels * samples; }
  std::span<const float> trial(std::size_t i) const {
    return {data.data() + i * trial_size(), trial_size()};
  }
};

struct FilterSpec {
  int order = 3;
  double low_hz = 0.5;
  double high_hz = 15.0;
  bool zero_phase = true;

  void validate(double sample_rate) const;
  bool operator==(const FilterSpec&) const = default;
};

/// One biquad in transposed direct form II, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

/// Digital Butterworth band-pass as second-order sections. A band-pass of
/// prototype order N has N sections.
std::vector<Biquad> butterworth_bandpass(const FilterSpec& spec, double sample_rate);

/// Complex frequency response of a cascade at `freq_hz`.
std::complex<double> frequency_response(std::span<const Biquad> sos, double freq_hz,
                                        double sample_rate);

/// Zero-phase (forward-backward) filtering of one signal with odd reflection
/// padding of `pad` samples on both ends and steady-state initial conditions.
std::vector<double> filtfilt(std::span<const Biquad> sos, std::span<const double> x,
                             std::size_t pad);

/// Causal single-pass filtering with zero initial state.
std::vector<double> lfilter(std::span<const Biquad> sos, std::span<const double> x);

RawRecording bandpass(const RawRecording& rec, const FilterSpec& spec);

/// Keeps every k-th sample, k = sample_rate / target_hz (must be an integer).
RawRecording resample(const RawRecording& rec, double target_hz);

/// One trial per event over [onset, onset + round(length_s * rate)), each
/// normalized to zero mean and unit variance over all channels x samples.
EpochSet epoch(const RawRecording& rec, double length_s = 1.0);

/// Mother wavelet value at u. Real wavelets put the value in `.real()`.
std::complex<double> mother_wavelet(Wavelet w, double u);
bool is_complex(Wavelet w);

/// Half-width of the sampled support for scale a: floor(5a).
std::size_t wavelet_half_support(double scale);

/// Default scale set 1..20.
std::vector<double> default_scales(std::size_t count = 20);

/// Precomputed spectra for a fixed signal length, wavelet, and scale set.
/// Thread-safe after construction.
class CwtPlan {
 public:
  CwtPlan(std::size_t samples, Wavelet wavelet, std::vector<double> scales);
  ~CwtPlan();
  CwtPlan(const CwtPlan&) = delete;
  CwtPlan& operator=(const CwtPlan&) = delete;

  std::size_t samples() const { return samples_; }
  std::size_t fft_size() const { return fft_size_; }
  const std::vector<double>& scales() const { return scales_; }
  Wavelet wavelet() const { return wavelet_; }

  /// Coefficients for one signal into `out` (scales x samples, row-major):
  /// out[a, t] = sum_tau x[tau] psi_a(tau - t), psi_a(u) = psi(u/a)/sqrt(a).
  /// Complex wavelets yield magnitudes.
  void transform(std::span<const double> x, std::span<double> out) const;

 private:
  std::size_t samples_;
  std::size_t fft_size_;
  Wavelet wavelet_;
  std::vector<double> scales_;
  // Kernel spectra, scales x fft_size
  std::vector<std::complex<double>> kernels_;
  void* forward_plan_ = nullptr;
  void* inverse_plan_ = nullptr;
};

/// Convenience single-signal transform, scales x samples.
std::vector<double> cwt_signal(std::span<const double> x, Wavelet wavelet,
                               std::span<const double> scales);

Spectrogram cwt(const EpochSet& ep, Wavelet wavelet, std::span<const double> scales);

/// Subset of trials, avoiding a full-set transform.
Spectrogram cwt(const EpochSet& ep, Wavelet wavelet, std::span<const double> scales,
                std::span<const std::size_t> trials);

}  // namespace tsf::dsp
