#include "tsformer/config.hpp"

#include <cmath>
#include <exception>
#include <set>

#include "json.hpp"
#include "tsformer/error.hpp"

namespace tsf {

using nlohmann::ordered_json;

std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::subject_dependent: return "subject_dependent";
    case Protocol::loso: return "loso";
    case Protocol::two_stage: return "two_stage";
  }
  return "?";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "subject_dependent") return Protocol::subject_dependent;
  if (name == "loso") return Protocol::loso;
  if (name == "two_stage") return Protocol::two_stage;
  throw ConfigError("unknown protocol '" + std::string(name) +
                    "' (expected subject_dependent, loso or two_stage)");
}

double OptimizerConfig::lr(std::size_t epoch) const {
  double v = base_lr;
  for (std::size_t k = 0; k < epoch / decay_every; ++k) v *= decay;
  return v;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("run config: " + m); };
  model.validate();
  preprocess.filter.validate(preprocess.target_rate);
  if (preprocess.scales.empty()) fail("scales must be nonempty");
  for (double s : preprocess.scales)
    if (!(s > 0)) fail("scales must be positive");
  if (preprocess.scales.size() != model.scales) fail("model.scales must equal the number of CWT scales");
  if (!(preprocess.epoch_length_s > 0)) fail("epoch length must be positive");
  const auto t = static_cast<std::size_t>(std::lround(preprocess.epoch_length_s * preprocess.target_rate));
  if (t != model.samples) fail("model.samples must equal round(epoch_length_s * target_rate)");
  if (train.batch_size == 0) fail("batch_size must be positive");
  if (train.pretrain_epochs == 0 || train.finetune_epochs == 0) fail("epoch budgets must be positive");
  if (!(train.tau > 0)) fail("tau must be positive");
  if (!(train.holdout_fraction >= 0 && train.holdout_fraction < 1)) fail("holdout_fraction must lie in [0, 1)");
  if (!(optimizer.base_lr > 0) || !(optimizer.decay > 0) || optimizer.decay_every == 0)
    fail("learning-rate schedule must be positive");
  if (optimizer.weight_decay < 0) fail("weight_decay must be non-negative");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    fail("betas must lie in [0, 1)");
  if (!(optimizer.eps > 0)) fail("eps must be positive");
  if (protocol.training_blocks < 1 || protocol.training_blocks > 4) fail("training_blocks must be in 1..4");
  synth.validate();
}

RunConfig reduced_config() {
  RunConfig c;
  c.model.channels = 16;
  c.model.dim = 64;
  c.model.heads = 4;
  c.train.batch_size = 32;
  c.train.pretrain_epochs = 30;
  c.train.finetune_epochs = 50;
  c.protocol.name = Protocol::two_stage;
  c.protocol.training_blocks = 1;
  c.protocol.test_subjects = {"S09"};
  c.synth.channels = 16;
  return c;
}

namespace {

ordered_json to_j(const RunConfig& c) {
  ordered_json j;
  const auto& m = c.model;
  j["seed"] = c.seed;
  j["model"] = {{"channels", m.channels},
                {"samples", m.samples},
                {"scales", m.scales},
                {"slice_len", m.slice_len},
                {"dim", m.dim},
                {"heads", m.heads},
                {"ffn_hidden", m.ffn_hidden},
                {"classes", m.classes},
                {"fusion_kernels", m.fusion_kernels},
                {"contrast_kernels", m.contrast_kernels},
                {"conv_rows", m.conv_rows},
                {"ln_eps", m.ln_eps},
                {"fuse_variant", m.fuse_variant == model::FuseVariant::literal ? "literal" : "average_selected"}};
  const auto& p = c.preprocess;
  j["preprocess"] = {{"target_rate", p.target_rate},
                     {"filter",
                      {{"order", p.filter.order},
                       {"low_hz", p.filter.low_hz},
                       {"high_hz", p.filter.high_hz},
                       {"zero_phase", p.filter.zero_phase}}},
                     {"epoch_length_s", p.epoch_length_s},
                     {"wavelet", std::string(dsp::wavelet_name(p.wavelet))},
                     {"scales", p.scales}};
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},         {"pretrain_epochs", t.pretrain_epochs},
                {"finetune_epochs", t.finetune_epochs}, {"tau", t.tau},
                {"holdout_fraction", t.holdout_fraction}, {"finetune_rebalance", t.finetune_rebalance}};
  const auto& o = c.optimizer;
  j["optimizer"] = {{"base_lr", o.base_lr}, {"decay", o.decay}, {"decay_every", o.decay_every},
                    {"weight_decay", o.weight_decay}, {"beta1", o.beta1}, {"beta2", o.beta2},
                    {"eps", o.eps}, {"decoupled", o.decoupled}};
  j["protocol"] = {{"name", std::string(protocol_name(c.protocol.name))},
                   {"training_blocks", c.protocol.training_blocks},
                   {"test_subjects", c.protocol.test_subjects}};
  const auto& s = c.synth;
  j["synth"] = {{"subjects", s.subjects},
                {"blocks", s.blocks},
                {"trials_per_block", s.trials_per_block},
                {"channels", s.channels},
                {"sample_rate", s.sample_rate},
                {"stimulus_rate", s.stimulus_rate},
                {"target_rate", s.target_rate},
                {"noise_level", s.noise_level},
                {"erp_amplitude", s.erp_amplitude},
                {"harmonic_amplitude", s.harmonic_amplitude},
                {"shift", s.shift},
                {"shifted_extra", s.shifted_extra},
                {"shifted_subjects", s.shifted_subjects},
                {"seed", s.seed}};
  return j;
}

// Assigns fields present in `j`, rejecting keys that are not recognised.
class Reader {
 public:
  Reader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError("unknown config key '" + path_ + "." + k + "'");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const ordered_json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

 private:
  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void from_j(const ordered_json& j, RunConfig& c) {
  Reader r(j, "config");
  r.get("seed", c.seed);
  if (const auto* mj = r.child("model")) {
    Reader m(*mj, r.path("model"));
    auto& v = c.model;
    m.get("channels", v.channels);
    m.get("samples", v.samples);
    m.get("scales", v.scales);
    m.get("slice_len", v.slice_len);
    m.get("dim", v.dim);
    m.get("heads", v.heads);
    m.get("ffn_hidden", v.ffn_hidden);
    m.get("classes", v.classes);
    m.get("fusion_kernels", v.fusion_kernels);
    m.get("contrast_kernels", v.contrast_kernels);
    m.get("conv_rows", v.conv_rows);
    m.get("ln_eps", v.ln_eps);
    std::string fv;
    m.get("fuse_variant", fv);
    if (fv == "literal") v.fuse_variant = model::FuseVariant::literal;
    else if (fv == "average_selected") v.fuse_variant = model::FuseVariant::average_selected;
    else if (!fv.empty()) throw ConfigError("model.fuse_variant must be literal or average_selected");
  }
  if (const auto* pj = r.child("preprocess")) {
    Reader p(*pj, r.path("preprocess"));
    auto& v = c.preprocess;
    p.get("target_rate", v.target_rate);
    if (const auto* fj = p.child("filter")) {
      Reader f(*fj, p.path("filter"));
      f.get("order", v.filter.order);
      f.get("low_hz", v.filter.low_hz);
      f.get("high_hz", v.filter.high_hz);
      f.get("zero_phase", v.filter.zero_phase);
    }
    p.get("epoch_length_s", v.epoch_length_s);
    std::string w;
    p.get("wavelet", w);
    if (!w.empty()) v.wavelet = dsp::parse_wavelet(w);
    p.get("scales", v.scales);
  }
  if (const auto* tj = r.child("train")) {
    Reader t(*tj, r.path("train"));
    auto& v = c.train;
    t.get("batch_size", v.batch_size);
    t.get("pretrain_epochs", v.pretrain_epochs);
    t.get("finetune_epochs", v.finetune_epochs);
    t.get("tau", v.tau);
    t.get("holdout_fraction", v.holdout_fraction);
    t.get("finetune_rebalance", v.finetune_rebalance);
  }
  if (const auto* oj = r.child("optimizer")) {
    Reader o(*oj, r.path("optimizer"));
    auto& v = c.optimizer;
    o.get("base_lr", v.base_lr);
    o.get("decay", v.decay);
    o.get("decay_every", v.decay_every);
    o.get("weight_decay", v.weight_decay);
    o.get("beta1", v.beta1);
    o.get("beta2", v.beta2);
    o.get("eps", v.eps);
    o.get("decoupled", v.decoupled);
  }
  if (const auto* pj = r.child("protocol")) {
    Reader p(*pj, r.path("protocol"));
    std::string name;
    p.get("name", name);
    if (!name.empty()) c.protocol.name = parse_protocol(name);
    p.get("training_blocks", c.protocol.training_blocks);
    p.get("test_subjects", c.protocol.test_subjects);
  }
  if (const auto* sj = r.child("synth")) {
    Reader s(*sj, r.path("synth"));
    auto& v = c.synth;
    s.get("subjects", v.subjects);
    s.get("blocks", v.blocks);
    s.get("trials_per_block", v.trials_per_block);
    s.get("channels", v.channels);
    s.get("sample_rate", v.sample_rate);
    s.get("stimulus_rate", v.stimulus_rate);
    s.get("target_rate", v.target_rate);
    s.get("noise_level", v.noise_level);
    s.get("erp_amplitude", v.erp_amplitude);
    s.get("harmonic_amplitude", v.harmonic_amplitude);
    s.get("shift", v.shift);
    s.get("shifted_extra", v.shifted_extra);
    s.get("shifted_subjects", v.shifted_subjects);
    s.get("seed", v.seed);
  }
}

}  // namespace

std::string to_json(const RunConfig& cfg) { return to_j(cfg).dump(2) + "\n"; }

RunConfig from_json(const std::string& text, const RunConfig& base) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = base;
  from_j(j, c);
  return c;
}

RunConfig load_config(const fs::path& file, const RunConfig& base) {
  try {
    return from_json(io::read_text(file), base);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace tsf
