#include "tsformer/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>

#include "tsformer/error.hpp"

namespace tsf::dsp {

std::mutex& fft_planner_mutex() {
  static std::mutex m;
  return m;
}

namespace {

using cd = std::complex<double>;
constexpr double kPi = std::numbers::pi;

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
using FftwBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

FftwBuffer fftw_alloc(std::size_t n) {
  return FftwBuffer(fftw_alloc_complex(n));
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void check_finite(const RawRecording& rec) {
  for (std::size_t i = 0; i < rec.data.size(); ++i) {
    if (!std::isfinite(rec.data[i])) {
      std::ostringstream os;
      os << "non-finite sample at channel " << i / rec.samples << ", index " << i % rec.samples
         << " (subject " << rec.subject_id << ", block " << rec.block_id << ")";
      throw DataError(os.str());
    }
  }
}

// Steady-state state vector of a cascade for a unit-step input.
std::vector<double> cascade_zi(std::span<const Biquad> sos) {
  std::vector<double> zi(2 * sos.size());
  double level = 1.0;
  for (std::size_t k = 0; k < sos.size(); ++k) {
    const Biquad& s = sos[k];
    const double gain = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    const double z2 = level * (s.b2 - s.a2 * gain);
    const double z1 = level * (s.b1 - s.a1 * gain) + z2;
    zi[2 * k] = z1;
    zi[2 * k + 1] = z2;
    level *= gain;
  }
  return zi;
}

void run_cascade(std::span<const Biquad> sos, std::span<double> x, std::vector<double> state) {
  for (std::size_t k = 0; k < sos.size(); ++k) {
    const Biquad& s = sos[k];
    double z1 = state[2 * k];
    double z2 = state[2 * k + 1];
    for (double& v : x) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
}

}  // namespace

void RawRecording::validate() const {
  if (channels == 0) throw DataError("recording has no channels");
  if (!(sample_rate > 0.0)) throw DataError("recording sample rate must be positive");
  if (data.size() != channels * samples) throw DataError("recording buffer size mismatch");
  if (!channel_names.empty() && channel_names.size() != channels)
    throw DataError("channel name count does not match channel count");
  const auto span = static_cast<std::size_t>(std::ceil(sample_rate - 1e-9));
  for (const Event& e : events) {
    if (e.onset_sample + span > samples) {
      std::ostringstream os;
      os << "event at sample " << e.onset_sample << " does not fit in recording of " << samples
         << " samples (subject " << subject_id << ", block " << block_id << ")";
      throw DataError(os.str());
    }
  }
}

std::size_t EpochSet::count(Label label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

EpochSet EpochSet::select(std::span<const std::size_t> indices) const {
  EpochSet out;
  out.trials = indices.size();
  out.channels = channels;
  out.samples = samples;
  out.sample_rate = sample_rate;
  out.data.resize(out.trials * trial_size());
  out.labels.reserve(indices.size());
  out.subject_ids.reserve(indices.size());
  out.block_ids.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= trials) throw DataError("trial index out of range");
    std::copy_n(data.data() + i * trial_size(), trial_size(), out.data.data() + k * trial_size());
    out.labels.push_back(labels[i]);
    out.subject_ids.push_back(subject_ids[i]);
    out.block_ids.push_back(block_ids[i]);
  }
  return out;
}

EpochSet EpochSet::concat(std::span<const EpochSet> parts) {
  EpochSet out;
  if (parts.empty()) return out;
  out.channels = parts.front().channels;
  out.samples = parts.front().samples;
  out.sample_rate = parts.front().sample_rate;
  for (const EpochSet& p : parts) {
    if (p.channels != out.channels || p.samples != out.samples || p.sample_rate != out.sample_rate)
      throw DataError("cannot concatenate epoch sets with different geometry");
    out.trials += p.trials;
    out.data.insert(out.data.end(), p.data.begin(), p.data.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.subject_ids.insert(out.subject_ids.end(), p.subject_ids.begin(), p.subject_ids.end());
    out.block_ids.insert(out.block_ids.end(), p.block_ids.begin(), p.block_ids.end());
  }
  return out;
}

std::string_view wavelet_name(Wavelet w) {
  switch (w) {
    case Wavelet::mexican_hat: return "mexican_hat";
    case Wavelet::morlet: return "morlet";
    case Wavelet::gaussian: return "gaussian";
    case Wavelet::complex_gaussian: return "complex_gaussian";
  }
  throw ConfigError("unknown wavelet");
}

Wavelet parse_wavelet(std::string_view name) {
  if (name == "mexican_hat" || name == "mexh") return Wavelet::mexican_hat;
  if (name == "morlet" || name == "morl") return Wavelet::morlet;
  if (name == "gaussian" || name == "gaus1") return Wavelet::gaussian;
  if (name == "complex_gaussian" || name == "cgau1") return Wavelet::complex_gaussian;
  throw ConfigError("unknown wavelet '" + std::string(name) + "'");
}

void FilterSpec::validate(double sample_rate) const {
  if (order < 1) throw ConfigError("filter order must be >= 1");
  if (!(low_hz > 0.0)) throw ConfigError("band-pass low cutoff must be positive");
  if (!(low_hz < high_hz)) throw ConfigError("band-pass low cutoff must be below high cutoff");
  if (!(high_hz < sample_rate / 2.0)) {
    std::ostringstream os;
    os << "band-pass high cutoff " << high_hz << " Hz is not below Nyquist (" << sample_rate / 2.0
       << " Hz)";
    throw ConfigError(os.str());
  }
}

std::vector<Biquad> butterworth_bandpass(const FilterSpec& spec, double sample_rate) {
  spec.validate(sample_rate);
  const int n = spec.order;
  const double fs2 = 2.0 * sample_rate;
  // Pre-warped analog band edges (rad/s).
  const double w1 = fs2 * std::tan(kPi * spec.low_hz / sample_rate);
  const double w2 = fs2 * std::tan(kPi * spec.high_hz / sample_rate);
  const double w0 = std::sqrt(w1 * w2);
  const double bw = w2 - w1;

  std::vector<cd> zpoles;
  zpoles.reserve(2 * n);
  for (int k = 0; k < n; ++k) {
    const cd p = std::polar(1.0, kPi * (2.0 * k + n + 1.0) / (2.0 * n));
    const cd half = p * (bw / 2.0);
    const cd disc = std::sqrt(half * half - w0 * w0);
    for (const cd s : {half + disc, half - disc}) zpoles.push_back((fs2 + s) / (fs2 - s));
  }

  std::vector<cd> upper;
  std::vector<double> reals;
  for (const cd& z : zpoles) {
    if (std::abs(z.imag()) <= 1e-12 * std::abs(z)) {
      reals.push_back(z.real());
    } else if (z.imag() > 0.0) {
      upper.push_back(z);
    }
  }
  std::sort(reals.begin(), reals.end());
  std::sort(upper.begin(), upper.end(), [](const cd& a, const cd& b) { return a.real() < b.real(); });
  if (reals.size() % 2 != 0 || upper.size() + reals.size() / 2 != static_cast<std::size_t>(n))
    throw NumericalError("butterworth design produced an unpaired pole");

  std::vector<Biquad> sos;
  for (const cd& z : upper) sos.push_back({1.0, 0.0, -1.0, -2.0 * z.real(), std::norm(z)});
  for (std::size_t i = 0; i < reals.size(); i += 2)
    sos.push_back({1.0, 0.0, -1.0, -(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]});

  // Unit gain at the band centre, which the bilinear map sends to 2 atan(w0 / 2fs).
  const double centre_hz = std::atan(w0 / fs2) * sample_rate / kPi;
  const double g = 1.0 / std::abs(frequency_response(sos, centre_hz, sample_rate));
  sos.front().b0 *= g;
  sos.front().b1 *= g;
  sos.front().b2 *= g;
  return sos;
}

std::complex<double> frequency_response(std::span<const Biquad> sos, double freq_hz,
                                        double sample_rate) {
  const cd zinv = std::polar(1.0, -2.0 * kPi * freq_hz / sample_rate);
  cd h{1.0, 0.0};
  for (const Biquad& s : sos) {
    h *= (s.b0 + zinv * (s.b1 + zinv * s.b2)) / (1.0 + zinv * (s.a1 + zinv * s.a2));
  }
  return h;
}

std::vector<double> lfilter(std::span<const Biquad> sos, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  run_cascade(sos, y, std::vector<double>(2 * sos.size(), 0.0));
  return y;
}

std::vector<double> filtfilt(std::span<const Biquad> sos, std::span<const double> x,
                             std::size_t pad) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  pad = std::min(pad, n - 1);

  std::vector<double> ext(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) ext[i] = 2.0 * x[0] - x[pad - i];
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(pad));
  for (std::size_t i = 0; i < pad; ++i) ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  const std::vector<double> zi = cascade_zi(sos);
  auto scaled = [&](double level) {
    std::vector<double> s(zi);
    for (double& v : s) v *= level;
    return s;
  };

  run_cascade(sos, ext, scaled(ext.front()));
  std::reverse(ext.begin(), ext.end());
  run_cascade(sos, ext, scaled(ext.front()));
  std::reverse(ext.begin(), ext.end());

  return {ext.begin() + static_cast<std::ptrdiff_t>(pad),
          ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

RawRecording bandpass(const RawRecording& rec, const FilterSpec& spec) {
  spec.validate(rec.sample_rate);
  check_finite(rec);
  const std::vector<Biquad> sos = butterworth_bandpass(spec, rec.sample_rate);
  const std::size_t pad = 3 * static_cast<std::size_t>(spec.order);

  RawRecording out = rec;
  std::vector<double> buf(rec.samples);
  for (std::size_t c = 0; c < rec.channels; ++c) {
    const auto src = rec.channel(c);
    std::copy(src.begin(), src.end(), buf.begin());
    const std::vector<double> y = spec.zero_phase ? filtfilt(sos, buf, pad) : lfilter(sos, buf);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < rec.samples; ++i) dst[i] = static_cast<float>(y[i]);
  }
  return out;
}

RawRecording resample(const RawRecording& rec, double target_hz) {
  if (!(target_hz > 0.0)) throw ConfigError("target sample rate must be positive");
  const double ratio = rec.sample_rate / target_hz;
  const double k_round = std::round(ratio);
  if (k_round < 1.0 || std::abs(ratio - k_round) > 1e-9 * ratio) {
    std::ostringstream os;
    os << "cannot resample " << rec.sample_rate << " Hz to " << target_hz
       << " Hz: ratio is not a positive integer";
    throw ConfigError(os.str());
  }
  const auto k = static_cast<std::size_t>(k_round);

  RawRecording out;
  out.channels = rec.channels;
  out.samples = (rec.samples + k - 1) / k;
  out.sample_rate = target_hz;
  out.channel_names = rec.channel_names;
  out.subject_id = rec.subject_id;
  out.block_id = rec.block_id;
  out.data.resize(out.channels * out.samples);
  for (std::size_t c = 0; c < rec.channels; ++c) {
    const auto src = rec.channel(c);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < out.samples; ++i) dst[i] = src[i * k];
  }
  out.events.reserve(rec.events.size());
  for (const Event& e : rec.events) out.events.push_back({e.onset_sample / k, e.label});
  return out;
}

EpochSet epoch(const RawRecording& rec, double length_s) {
  if (!(length_s > 0.0)) throw ConfigError("epoch length must be positive");
  const auto len = static_cast<std::size_t>(std::llround(length_s * rec.sample_rate));
  if (len == 0) throw ConfigError("epoch length rounds to zero samples");

  EpochSet out;
  out.trials = rec.events.size();
  out.channels = rec.channels;
  out.samples = len;
  out.sample_rate = rec.sample_rate;
  out.data.resize(out.trials * out.trial_size());
  out.labels.reserve(out.trials);
  out.subject_ids.assign(out.trials, rec.subject_id);
  out.block_ids.assign(out.trials, rec.block_id);

  std::vector<double> buf(out.trial_size());
  for (std::size_t i = 0; i < rec.events.size(); ++i) {
    const Event& e = rec.events[i];
    if (e.onset_sample + len > rec.samples) {
      std::ostringstream os;
      os << "trial " << i << " (onset " << e.onset_sample << ") exceeds recording of "
         << rec.samples << " samples (subject " << rec.subject_id << ", block " << rec.block_id
         << ")";
      throw DataError(os.str());
    }
    for (std::size_t c = 0; c < rec.channels; ++c) {
      const auto src = rec.channel(c);
      for (std::size_t t = 0; t < len; ++t) buf[c * len + t] = src[e.onset_sample + t];
    }
    double mean = 0.0;
    for (double v : buf) mean += v;
    mean /= static_cast<double>(buf.size());
    double var = 0.0;
    for (double v : buf) var += (v - mean) * (v - mean);
    var /= static_cast<double>(buf.size());
    const auto [lo, hi] = std::minmax_element(buf.begin(), buf.end());
    if (*lo == *hi || !(var > 1e-24)) {
      std::ostringstream os;
      os << "trial " << i << " (onset " << e.onset_sample << ", subject " << rec.subject_id
         << ", block " << rec.block_id << ") has zero variance";
      throw DataError(os.str());
    }
    const double inv_sd = 1.0 / std::sqrt(var);
    float* dst = out.data.data() + i * out.trial_size();
    for (std::size_t j = 0; j < buf.size(); ++j)
      dst[j] = static_cast<float>((buf[j] - mean) * inv_sd);
    out.labels.push_back(e.label);
  }
  return out;
}

bool is_complex(Wavelet w) { return w == Wavelet::complex_gaussian; }

std::complex<double> mother_wavelet(Wavelet w, double u) {
  const double u2 = u * u;
  switch (w) {
    case Wavelet::mexican_hat: {
      const double c = 2.0 / (std::sqrt(3.0) * std::pow(kPi, 0.25));
      return {c * (1.0 - u2) * std::exp(-u2 / 2.0), 0.0};
    }
    case Wavelet::morlet:
      return {std::exp(-u2 / 2.0) * std::cos(5.0 * u), 0.0};
    case Wavelet::gaussian: {
      // -d/du exp(-u^2/2), unit L2 norm
      const double c = std::sqrt(2.0 / std::sqrt(kPi));
      return {-c * u * std::exp(-u2 / 2.0), 0.0};
    }
    case Wavelet::complex_gaussian: {
      // d/du [exp(-iu) exp(-u^2)], unit L2 norm
      const double c = 1.0 / std::sqrt(2.0 * std::sqrt(kPi / 2.0));
      return c * cd(-2.0 * u, -1.0) * std::polar(std::exp(-u2), -u);
    }
  }
  throw ConfigError("unknown wavelet");
}

std::size_t wavelet_half_support(double scale) {
  return static_cast<std::size_t>(std::floor(5.0 * scale + 1e-12));
}

std::vector<double> default_scales(std::size_t count) {
  std::vector<double> s(count);
  for (std::size_t i = 0; i < count; ++i) s[i] = static_cast<double>(i + 1);
  return s;
}

CwtPlan::CwtPlan(std::size_t samples, Wavelet wavelet, std::vector<double> scales)
    : samples_(samples), wavelet_(wavelet), scales_(std::move(scales)) {
  if (samples_ == 0) throw ConfigError("cwt needs a nonempty signal length");
  if (scales_.empty()) throw ConfigError("cwt needs at least one scale");
  std::size_t max_half = 0;
  for (double a : scales_) {
    if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("cwt scales must be positive");
    max_half = std::max(max_half, wavelet_half_support(a));
  }
  mother_wavelet(wavelet_, 0.0);  // rejects an unknown enum value
  fft_size_ = next_pow2(samples_ + max_half + 1);
  const std::size_t p = fft_size_;

  FftwBuffer in = fftw_alloc(p);
  FftwBuffer out = fftw_alloc(p);
  {
    std::lock_guard lock(fft_planner_mutex());
    forward_plan_ = fftw_plan_dft_1d(static_cast<int>(p), in.get(), out.get(), FFTW_FORWARD,
                                     FFTW_ESTIMATE);
    inverse_plan_ = fftw_plan_dft_1d(static_cast<int>(p), in.get(), out.get(), FFTW_BACKWARD,
                                     FFTW_ESTIMATE);
  }

  kernels_.resize(scales_.size() * p);
  for (std::size_t s = 0; s < scales_.size(); ++s) {
    const double a = scales_[s];
    const auto half = static_cast<std::ptrdiff_t>(wavelet_half_support(a));
    const double norm = 1.0 / std::sqrt(a);
    std::fill_n(reinterpret_cast<double*>(in.get()), 2 * p, 0.0);
    // h[m] = psi_a(-m), stored circularly so that x * h is the correlation.
    for (std::ptrdiff_t m = -half; m <= half; ++m) {
      const cd v = norm * mother_wavelet(wavelet_, static_cast<double>(-m) / a);
      const auto idx = static_cast<std::size_t>((m + static_cast<std::ptrdiff_t>(p)) %
                                                static_cast<std::ptrdiff_t>(p));
      in[idx][0] = v.real();
      in[idx][1] = v.imag();
    }
    fftw_execute_dft(static_cast<fftw_plan>(forward_plan_), in.get(), out.get());
    for (std::size_t k = 0; k < p; ++k) kernels_[s * p + k] = {out[k][0], out[k][1]};
  }
}

CwtPlan::~CwtPlan() {
  std::lock_guard lock(fft_planner_mutex());
  if (forward_plan_) fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  if (inverse_plan_) fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

void CwtPlan::transform(std::span<const double> x, std::span<double> out) const {
  if (x.size() != samples_) throw ShapeError("cwt input length does not match plan");
  if (out.size() != scales_.size() * samples_) throw ShapeError("cwt output buffer size");
  const std::size_t p = fft_size_;
  FftwBuffer buf = fftw_alloc(p);
  FftwBuffer spec = fftw_alloc(p);
  FftwBuffer prod = fftw_alloc(p);
  for (std::size_t i = 0; i < p; ++i) {
    buf[i][0] = i < samples_ ? x[i] : 0.0;
    buf[i][1] = 0.0;
  }
  fftw_execute_dft(static_cast<fftw_plan>(forward_plan_), buf.get(), spec.get());

  const bool magnitude = is_complex(wavelet_);
  const double inv_p = 1.0 / static_cast<double>(p);
  for (std::size_t s = 0; s < scales_.size(); ++s) {
    const cd* h = kernels_.data() + s * p;
    for (std::size_t k = 0; k < p; ++k) {
      const cd v = cd(spec[k][0], spec[k][1]) * h[k];
      prod[k][0] = v.real();
      prod[k][1] = v.imag();
    }
    fftw_execute_dft(static_cast<fftw_plan>(inverse_plan_), prod.get(), buf.get());
    double* row = out.data() + s * samples_;
    for (std::size_t t = 0; t < samples_; ++t) {
      row[t] = magnitude ? std::hypot(buf[t][0], buf[t][1]) * inv_p : buf[t][0] * inv_p;
    }
  }
}

std::vector<double> cwt_signal(std::span<const double> x, Wavelet wavelet,
                               std::span<const double> scales) {
  CwtPlan plan(x.size(), wavelet, {scales.begin(), scales.end()});
  std::vector<double> out(scales.size() * x.size());
  plan.transform(x, out);
  return out;
}

Spectrogram cwt(const EpochSet& ep, Wavelet wavelet, std::span<const double> scales) {
  std::vector<std::size_t> all(ep.trials);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return cwt(ep, wavelet, scales, all);
}

Spectrogram cwt(const EpochSet& ep, Wavelet wavelet, std::span<const double> scales,
                std::span<const std::size_t> trials) {
  const CwtPlan plan(ep.samples, wavelet, {scales.begin(), scales.end()});
  Spectrogram out;
  out.trials = trials.size();
  out.scales_count = scales.size();
  out.channels = ep.channels;
  out.samples = ep.samples;
  out.scales.assign(scales.begin(), scales.end());
  out.wavelet = wavelet;
  out.data.resize(out.trials * out.trial_size());

  std::vector<double> x(ep.samples);
  std::vector<double> coeffs(scales.size() * ep.samples);
  for (std::size_t k = 0; k < trials.size(); ++k) {
    if (trials[k] >= ep.trials) throw DataError("trial index out of range");
    const auto trial = ep.trial(trials[k]);
    float* dst = out.data.data() + k * out.trial_size();
    for (std::size_t c = 0; c < ep.channels; ++c) {
      std::copy_n(trial.data() + c * ep.samples, ep.samples, x.begin());
      plan.transform(x, coeffs);
      for (std::size_t s = 0; s < scales.size(); ++s) {
        for (std::size_t t = 0; t < ep.samples; ++t) {
          dst[(s * ep.channels + c) * ep.samples + t] =
              static_cast<float>(coeffs[s * ep.samples + t]);
        }
      }
    }
  }
  return out;
}

}  // namespace tsf::dsp
