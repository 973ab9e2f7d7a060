#include "tsformer/synthgen.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "tsformer/error.hpp"
#include "tsformer/random.hpp"

namespace tsf::synth {

namespace {

constexpr double kPi = std::numbers::pi;

double bump(double t, double centre, double width) {
  const double z = (t - centre) / width;
  return std::exp(-0.5 * z * z);
}

// Spatial weight of a source centred on channel `centre` with spread in channels.
std::vector<double> pattern(std::size_t channels, double centre, double spread) {
  std::vector<double> w(channels);
  for (std::size_t c = 0; c < channels; ++c) w[c] = bump(static_cast<double>(c), centre, spread);
  return w;
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
  if (subjects == 0 || blocks == 0 || trials_per_block == 0 || channels == 0)
    fail("counts must be positive");
  if (!(sample_rate > 0) || !(stimulus_rate > 0) || stimulus_rate >= sample_rate)
    fail("rates must be positive with stimulus_rate < sample_rate");
  if (!(target_rate > 0 && target_rate < 1)) fail("target_rate must lie in (0, 1)");
  if (noise_level < 0 || erp_amplitude < 0 || harmonic_amplitude < 0 || shift < 0 || shifted_extra < 0)
    fail("amplitudes and shifts must be non-negative");
  if (shifted_subjects > subjects) fail("shifted_subjects exceeds subjects");
}

std::size_t parietal_channel(std::size_t channels) {
  return static_cast<std::size_t>(std::lround(0.75 * static_cast<double>(channels - 1)));
}

double condition_number(const SubjectProfile& p) {
  const auto c = static_cast<Eigen::Index>(p.channels);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      p.mixing.data(), c, c);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  return s(0) / s(c - 1);
}

SubjectProfile make_profile(std::uint64_t seed, std::size_t channels, double shift) {
  if (channels == 0) throw ConfigError("make_profile: channels must be positive");
  Rng rng(seed);
  SubjectProfile p;
  p.seed = seed;
  p.channels = channels;
  std::vector<double> r(channels * channels);
  for (double& v : r) v = rng.normal() / std::sqrt(static_cast<double>(channels));
  double eps = shift;
  for (;;) {
    p.mixing.assign(channels * channels, 0.0);
    for (std::size_t i = 0; i < channels * channels; ++i) p.mixing[i] = eps * r[i];
    for (std::size_t c = 0; c < channels; ++c) p.mixing[c * channels + c] += 1.0;
    if (condition_number(p) <= 50.0) break;
    eps *= 0.8;
  }
  p.jitter_ms = 15.0 + 20.0 * shift * rng.uniform();
  p.p300_scale = std::clamp(1.0 + 0.5 * shift * rng.normal(), 0.5, 2.0);
  p.harmonic_scale = std::clamp(1.0 + 0.5 * shift * rng.normal(), 0.3, 2.0);
  p.noise_scale = std::clamp(1.0 + 0.3 * shift * std::abs(rng.normal()), 1.0, 2.0);
  p.latency_shift_ms = std::clamp(60.0 * shift * rng.normal(), -80.0, 80.0);
  return p;
}

std::vector<double> pink_noise(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("pink_noise: need at least two samples");
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  const std::size_t bins = n / 2 + 1;
  auto* spec = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins));
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(dsp::fft_planner_mutex());
    fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), x.data(), spec, FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec, x.data(), FFTW_ESTIMATE);
  }
  fftw_execute(fwd);
  spec[0][0] = spec[0][1] = 0.0;
  for (std::size_t k = 1; k < bins; ++k) {
    const double g = 1.0 / std::sqrt(static_cast<double>(k));
    spec[k][0] *= g;
    spec[k][1] *= g;
  }
  fftw_execute(inv);
  {
    std::lock_guard lock(dsp::fft_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  fftw_free(spec);
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(n));
  for (double& v : x) v /= rms;
  return x;
}

std::vector<dsp::RawRecording> gen_subject(const SubjectProfile& profile, const std::string& subject_id,
                                           std::size_t n_blocks, std::size_t trials_per_block,
                                           double target_rate, const SynthConfig& cfg) {
  if (!(target_rate > 0 && target_rate < 1)) throw ConfigError("gen_subject: target_rate must lie in (0, 1)");
  const std::size_t c_count = profile.channels;
  if (c_count == 0 || profile.mixing.size() != c_count * c_count)
    throw ConfigError("gen_subject: profile mixing matrix does not match its channel count");
  const double fs = cfg.sample_rate;
  const auto spacing = static_cast<std::size_t>(std::lround(fs / cfg.stimulus_rate));
  const auto lead = static_cast<std::size_t>(std::lround(0.5 * fs));
  const auto epoch_len = static_cast<std::size_t>(std::ceil(fs));
  const std::size_t total = 2 * lead + trials_per_block * spacing + epoch_len;

  const double cm = static_cast<double>(c_count - 1);
  const auto w_p300 = pattern(c_count, static_cast<double>(parietal_channel(c_count)), 0.3 * c_count);
  const auto w_n200 = pattern(c_count, 0.4 * cm, 0.25 * c_count);
  const auto w_vis = pattern(c_count, cm, 0.3 * c_count);

  const auto visual_len = static_cast<std::size_t>(std::lround(0.5 * fs));
  std::vector<double> visual(visual_len);
  for (std::size_t k = 0; k < visual_len; ++k) {
    const double t = static_cast<double>(k) / fs;
    visual[k] = cfg.harmonic_amplitude * profile.harmonic_scale * std::sin(2 * kPi * 10.0 * t) *
                bump(t, 0.15, 0.08);
  }
  const auto erp_len = static_cast<std::size_t>(std::lround(0.9 * fs));
  const double amp = cfg.erp_amplitude * profile.p300_scale;

  std::vector<dsp::RawRecording> out;
  out.reserve(n_blocks);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    Rng rng(Rng::derive(profile.seed, 1000 + b));
    Eigen::MatrixXd src = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c_count),
                                                static_cast<Eigen::Index>(total));
    dsp::RawRecording rec;
    rec.sample_rate = fs;
    rec.channels = c_count;
    rec.samples = total;
    rec.subject_id = subject_id;
    rec.block_id = static_cast<int>(b + 1);
    for (std::size_t c = 0; c < c_count; ++c) {
      char name[32];
      std::snprintf(name, sizeof name, "Ch%02zu", c + 1);
      rec.channel_names.emplace_back(name);
    }
    for (std::size_t i = 0; i < trials_per_block; ++i) {
      const std::size_t onset = lead + i * spacing;
      const bool target = rng.uniform() < target_rate;
      rec.events.push_back({onset, target ? dsp::Label::target : dsp::Label::nontarget});
      for (std::size_t k = 0; k < visual_len; ++k)
        for (std::size_t c = 0; c < c_count; ++c)
          src(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(onset + k)) += w_vis[c] * visual[k];
      if (!target) continue;
      const double jitter = profile.jitter_ms * rng.normal() / 1000.0;
      const double lat = 0.35 + profile.latency_shift_ms / 1000.0 + jitter;
      const double lat_n = 0.2 + 0.5 * profile.latency_shift_ms / 1000.0 + 0.5 * jitter;
      for (std::size_t k = 0; k < erp_len; ++k) {
        const double t = static_cast<double>(k) / fs;
        const double p3 = amp * bump(t, lat, 0.07);
        const double n2 = -0.5 * amp * bump(t, lat_n, 0.03);
        for (std::size_t c = 0; c < c_count; ++c)
          src(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(onset + k)) +=
              w_p300[c] * p3 + w_n200[c] * n2;
      }
    }
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mix(
        profile.mixing.data(), static_cast<Eigen::Index>(c_count), static_cast<Eigen::Index>(c_count));
    const Eigen::MatrixXd sensors = mix * src;
    rec.data.resize(c_count * total);
    const double noise = cfg.noise_level * profile.noise_scale;
    for (std::size_t c = 0; c < c_count; ++c) {
      const auto bg = pink_noise(total, Rng::derive(profile.seed, 100000 + b * 1000 + c));
      for (std::size_t k = 0; k < total; ++k)
        rec.data[c * total + k] = static_cast<float>(
            sensors(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) + noise * bg[k]);
    }
    rec.validate();
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<SubjectData> gen_corpus(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SubjectData> corpus;
  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    const bool shifted = s >= cfg.subjects - cfg.shifted_subjects;
    const double shift = shifted ? cfg.shift * cfg.shifted_extra : cfg.shift;
    char id[32];
    std::snprintf(id, sizeof id, "S%02zu", s + 1);
    SubjectData sd;
    sd.id = id;
    sd.profile = make_profile(Rng::derive(cfg.seed, s + 1), cfg.channels, shift);
    sd.blocks = gen_subject(sd.profile, sd.id, cfg.blocks, cfg.trials_per_block, cfg.target_rate, cfg);
    corpus.push_back(std::move(sd));
  }
  return corpus;
}

void write_corpus(const fs::path& root, const std::vector<SubjectData>& corpus) {
  for (const SubjectData& sd : corpus) {
    for (const dsp::RawRecording& rec : sd.blocks) {
      char name[32];
      std::snprintf(name, sizeof name, "block_%02d", rec.block_id);
      io::write_recording(root / sd.id / name, rec);
    }
  }
}

}  // namespace tsf::synth
