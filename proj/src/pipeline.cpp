#include "tsformer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "tsformer/error.hpp"
#include "tsformer/optimizer.hpp"
#include "tsformer/random.hpp"
#include "tsformer/storage.hpp"

namespace tsf::pipeline {

using ad::Tensor;
using model::Mode;
using model::ModelParams;
using nlohmann::ordered_json;

namespace {

void emit(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string block_dir_name(int block_id) {
  char name[32];
  std::snprintf(name, sizeof name, "block_%02d", block_id);
  return name;
}

bool cache_matches(const dsp::Spectrogram& sg, const dsp::EpochSet& ep, const PreprocessConfig& cfg) {
  return sg.trials == ep.trials && sg.channels == ep.channels && sg.samples == ep.samples &&
         sg.wavelet == cfg.wavelet && sg.scales == cfg.scales;
}

std::vector<dsp::Label> pooled_labels(std::span<const Block* const> blocks) {
  std::vector<dsp::Label> out;
  for (const Block* b : blocks) out.insert(out.end(), b->epochs.labels.begin(), b->epochs.labels.end());
  return out;
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& rows) {
  std::vector<Tensor<T>> r;
  r.reserve(rows.size());
  for (const auto& t : rows) r.push_back(ad::reshape(t, {1, t.size()}));
  return ad::concat_rows<T>(r);
}

dsp::Label predict(std::span<const float> logits) {
  return logits[1] > logits[0] ? dsp::Label::target : dsp::Label::nontarget;
}

void check_geometry(const TrialSet& t, const model::ModelConfig& m) {
  if (t.size() == 0) return;
  if (t.epochs.channels != m.channels || t.epochs.samples != m.samples)
    throw DataError("trials have " + std::to_string(t.epochs.channels) + " channels x " +
                    std::to_string(t.epochs.samples) + " samples; the model expects " +
                    std::to_string(m.channels) + " x " + std::to_string(m.samples));
  if (t.spectra.scales_count != m.scales) throw DataError("spectrogram scale count does not match the model");
}

struct BatchLoss {
  double total = 0, ce = 0, mv = 0;
};

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

dsp::EpochSet preprocess_recording(const dsp::RawRecording& rec, const PreprocessConfig& cfg) {
  dsp::RawRecording r = dsp::bandpass(rec, cfg.filter);
  if (r.sample_rate != cfg.target_rate) r = dsp::resample(r, cfg.target_rate);
  return dsp::epoch(r, cfg.epoch_length_s);
}

namespace {

std::vector<fs::path> sorted_dirs(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void finish_subject(Corpus& corpus, Subject s, const fs::path& dir) {
  if (s.blocks.empty()) return;
  std::sort(s.blocks.begin(), s.blocks.end(),
            [](const Block& a, const Block& b) { return a.block_id < b.block_id; });
  for (std::size_t i = 1; i < s.blocks.size(); ++i)
    if (s.blocks[i].block_id == s.blocks[i - 1].block_id)
      throw DataError(dir.string() + ": duplicate block " + std::to_string(s.blocks[i].block_id));
  for (const Subject& other : corpus)
    if (other.id == s.id) throw DataError("subject '" + s.id + "' appears twice");
  corpus.push_back(std::move(s));
}

}  // namespace

Corpus load_corpus(const fs::path& root, const PreprocessConfig& cfg) {
  if (!fs::is_directory(root)) throw DataError(root.string() + ": data directory not found");
  Corpus corpus;
  for (const fs::path& sdir : sorted_dirs(root)) {
    Subject s;
    for (const fs::path& bdir : sorted_dirs(sdir)) {
      Block b;
      if (fs::is_regular_file(bdir / "epochs" / "meta.json")) {
        b.epochs = io::read_epochs(bdir / "epochs");
        if (fs::is_regular_file(bdir / "spectrogram" / "meta.json")) b.spectrogram_cache = bdir / "spectrogram";
      } else if (io::is_recording_dir(bdir)) {
        b.epochs = preprocess_recording(io::read_recording(bdir), cfg);
      } else {
        continue;
      }
      if (b.epochs.trials == 0) throw DataError(bdir.string() + ": block has no trials");
      if (b.epochs.sample_rate != cfg.target_rate)
        throw DataError(bdir.string() + ": cached epochs are at " + std::to_string(b.epochs.sample_rate) +
                        " Hz, expected " + std::to_string(cfg.target_rate));
      b.subject = b.epochs.subject_ids.front();
      b.block_id = b.epochs.block_ids.front();
      if (!s.id.empty() && s.id != b.subject)
        throw DataError(bdir.string() + ": subject id '" + b.subject + "' differs from '" + s.id + "'");
      s.id = b.subject;
      s.blocks.push_back(std::move(b));
    }
    finish_subject(corpus, std::move(s), sdir);
  }
  if (corpus.empty()) throw DataError(root.string() + ": no subject/block recordings found");
  return corpus;
}

Corpus corpus_from_synthetic(const std::vector<synth::SubjectData>& data, const PreprocessConfig& cfg) {
  Corpus corpus;
  for (const auto& sd : data) {
    Subject s;
    s.id = sd.id;
    for (const auto& rec : sd.blocks) {
      Block b;
      b.subject = sd.id;
      b.block_id = rec.block_id;
      b.epochs = preprocess_recording(rec, cfg);
      s.blocks.push_back(std::move(b));
    }
    finish_subject(corpus, std::move(s), sd.id);
  }
  return corpus;
}

void preprocess_corpus(const fs::path& raw_root, const fs::path& out, const RunConfig& cfg, const Log& log) {
  const Corpus corpus = load_corpus(raw_root, cfg.preprocess);
  fs::create_directories(out);
  io::write_text(out / "config.json", to_json(cfg));
  for (const Subject& s : corpus) {
    for (const Block& b : s.blocks) {
      const fs::path dir = out / s.id / block_dir_name(b.block_id);
      io::write_epochs(dir / "epochs", b.epochs);
      io::write_spectrogram(dir / "spectrogram",
                            dsp::cwt(b.epochs, cfg.preprocess.wavelet, cfg.preprocess.scales));
      emit(log, "preprocessed " + s.id + " block " + std::to_string(b.block_id) + " (" +
                    std::to_string(b.epochs.trials) + " trials)");
    }
  }
}

const Subject& find_subject(const Corpus& corpus, const std::string& id) {
  for (const Subject& s : corpus)
    if (s.id == id) return s;
  throw DataError("subject '" + id + "' not found in the corpus");
}

std::vector<const Block*> select_blocks(const Subject& s, std::size_t first, std::size_t last) {
  std::vector<const Block*> out;
  for (std::size_t k = first; k <= last; ++k) {
    if (k == 0 || k > s.blocks.size() || s.blocks[k - 1].block_id != static_cast<int>(k))
      throw DataError("subject " + s.id + ": block " + std::to_string(k) + " is missing");
    out.push_back(&s.blocks[k - 1]);
  }
  return out;
}

TrialSet build_trials(std::span<const Block* const> blocks, const std::vector<std::size_t>* indices,
                      const PreprocessConfig& cfg) {
  if (blocks.empty()) throw DataError("no blocks selected");
  std::vector<std::size_t> offsets{0};
  for (const Block* b : blocks) {
    if (b->epochs.channels != blocks.front()->epochs.channels ||
        b->epochs.samples != blocks.front()->epochs.samples)
      throw DataError("blocks disagree on trial geometry");
    offsets.push_back(offsets.back() + b->epochs.trials);
  }
  const std::vector<std::size_t> all = indices ? std::vector<std::size_t>{} : iota(offsets.back());
  const std::vector<std::size_t>& idx = indices ? *indices : all;

  TrialSet out;
  const dsp::EpochSet& first = blocks.front()->epochs;
  out.epochs.trials = idx.size();
  out.epochs.channels = first.channels;
  out.epochs.samples = first.samples;
  out.epochs.sample_rate = first.sample_rate;
  out.epochs.data.resize(idx.size() * first.trial_size());
  out.spectra.trials = idx.size();
  out.spectra.scales_count = cfg.scales.size();
  out.spectra.channels = first.channels;
  out.spectra.samples = first.samples;
  out.spectra.scales = cfg.scales;
  out.spectra.wavelet = cfg.wavelet;
  out.spectra.data.resize(idx.size() * out.spectra.trial_size());

  // destination positions per block
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> wanted(blocks.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= offsets.back()) throw DataError("trial index out of range");
    const auto b = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), idx[k]) -
                                            offsets.begin() - 1);
    wanted[b].emplace_back(k, idx[k] - offsets[b]);
    const dsp::EpochSet& ep = blocks[b]->epochs;
    const std::size_t local = idx[k] - offsets[b];
    std::copy_n(ep.trial(local).data(), ep.trial_size(), out.epochs.data.data() + k * ep.trial_size());
    out.epochs.labels.push_back(ep.labels[local]);
    out.epochs.subject_ids.push_back(ep.subject_ids[local]);
    out.epochs.block_ids.push_back(ep.block_ids[local]);
  }

  const std::size_t ss = out.spectra.trial_size();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (wanted[b].empty()) continue;
    const Block& blk = *blocks[b];
    std::optional<dsp::Spectrogram> cached;
    if (!blk.spectrogram_cache.empty()) {
      dsp::Spectrogram sg = io::read_spectrogram(blk.spectrogram_cache);
      if (cache_matches(sg, blk.epochs, cfg)) cached = std::move(sg);
    }
    if (cached) {
      for (const auto& [dst, local] : wanted[b])
        std::copy_n(cached->trial(local).data(), ss, out.spectra.data.data() + dst * ss);
      continue;
    }
    std::vector<std::size_t> locals;
    for (const auto& w : wanted[b]) locals.push_back(w.second);
    const dsp::Spectrogram sg = dsp::cwt(blk.epochs, cfg.wavelet, cfg.scales, locals);
    for (std::size_t j = 0; j < wanted[b].size(); ++j)
      std::copy_n(sg.trial(j).data(), ss, out.spectra.data.data() + wanted[b][j].first * ss);
  }
  return out;
}

std::vector<std::size_t> rebalance_indices(std::span<const dsp::Label> labels, std::uint64_t seed) {
  std::vector<std::size_t> targets, nontargets;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == dsp::Label::target ? targets : nontargets).push_back(i);
  if (targets.empty()) throw DataError("rebalance: training data contains no target trials");
  if (nontargets.empty()) throw DataError("rebalance: training data contains no nontarget trials");
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(nontargets));
  nontargets.resize(std::min(nontargets.size(), targets.size()));
  std::vector<std::size_t> out = targets;
  out.insert(out.end(), nontargets.begin(), nontargets.end());
  rng.shuffle(std::span<std::size_t>(out));
  return out;
}

dsp::EpochSet rebalance(const dsp::EpochSet& train, std::uint64_t seed) {
  return train.select(rebalance_indices(train.labels, seed));
}

TrainResult pretrain(std::span<const Block* const> blocks, const RunConfig& cfg, const Log& log) {
  cfg.validate();
  const auto labels = pooled_labels(blocks);
  const auto idx = rebalance_indices(labels, Rng::derive(cfg.seed, 11));
  const auto n_hold = static_cast<std::size_t>(std::floor(cfg.train.holdout_fraction * static_cast<double>(idx.size())));
  const std::vector<std::size_t> train_idx(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_hold));
  const std::vector<std::size_t> hold_idx(idx.end() - static_cast<std::ptrdiff_t>(n_hold), idx.end());
  emit(log, "pretrain: " + std::to_string(train_idx.size()) + " training trials, " +
                std::to_string(hold_idx.size()) + " held out, from " + std::to_string(labels.size()));
  const TrialSet train = build_trials(blocks, &train_idx, cfg.preprocess);
  if (hold_idx.empty()) return pretrain(train, nullptr, cfg, log);
  const TrialSet hold = build_trials(blocks, &hold_idx, cfg.preprocess);
  return pretrain(train, &hold, cfg, log);
}

TrainResult pretrain(const TrialSet& train, const TrialSet* holdout, const RunConfig& cfg, const Log& log) {
  cfg.validate();
  if (train.size() == 0) throw DataError("pretrain: empty training set");
  check_geometry(train, cfg.model);
  if (holdout) check_geometry(*holdout, cfg.model);

  ModelParams<float> params = ModelParams<float>::init(cfg.model, Rng::derive(cfg.seed, 12));
  const std::set<std::string> trainable = params.name_set(model::Group::pretrainable);
  auto state = optim::make_adam(params, trainable);
  Rng order_rng(Rng::derive(cfg.seed, 13));
  std::vector<std::size_t> order = iota(train.size());
  const auto tau = static_cast<float>(cfg.train.tau);

  TrainResult res;
  res.final_ckpt.config = cfg;
  res.final_ckpt.stage = Stage::pretrained;
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.train.pretrain_epochs; ++epoch) {
    const double lr = cfg.optimizer.lr(epoch);
    order_rng.shuffle(std::span<std::size_t>(order));
    BatchLoss sum;
    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.train.batch_size);
      model::GraphParams<float> gp(params, trainable);
      std::vector<Tensor<float>> logits, zt, zs;
      std::vector<int> y;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto out = model::forward(train.view(i), gp, Mode::pretrain);
        logits.push_back(out.logits);
        zt.push_back(out.z_tem);
        zs.push_back(out.z_spe);
        y.push_back(static_cast<int>(train.epochs.labels[i]));
      }
      const auto ce = obj::cross_entropy(stack(logits), y);
      const auto mv = obj::multiview_loss(stack(zt), stack(zs), tau);
      const auto loss = obj::overall_loss(ce, mv);
      ad::backward(loss);
      optim::adam_step(params, gp.grads(), state, cfg.optimizer, lr);
      const auto bs = static_cast<double>(end - start);
      sum.total += bs * loss.item();
      sum.ce += bs * ce.item();
      sum.mv += bs * mv.item();
    }
    const auto n = static_cast<double>(order.size());
    EpochLog e{epoch, lr, sum.total / n, sum.ce / n, sum.mv / n, std::nullopt};
    if (holdout && holdout->size() > 0) {
      try {
        e.holdout_ba = obj::metrics(evaluate(params, *holdout, Mode::pretrain)).ba;
      } catch (const NumericalError&) {
      }
    }
    res.final_ckpt.history.push_back(e);
    std::ostringstream msg;
    msg << "pretrain epoch " << epoch + 1 << "/" << cfg.train.pretrain_epochs << " lr " << lr << " loss "
        << e.loss << " (ce " << e.ce << ", mv " << e.mv << ")";
    if (e.holdout_ba) msg << " holdout BA " << *e.holdout_ba;
    emit(log, msg.str());
    if (e.loss < best) {
      best = e.loss;
      res.best_ckpt.params = params;
      res.best_ckpt.history = res.final_ckpt.history;
      res.best_ckpt.epoch = epoch + 1;
    }
  }
  res.final_ckpt.params = std::move(params);
  res.final_ckpt.epoch = cfg.train.pretrain_epochs;
  res.best_ckpt.config = cfg;
  res.best_ckpt.stage = Stage::pretrained;
  return res;
}

TrainResult finetune(const Checkpoint& pretrained, std::span<const Block* const> blocks, const RunConfig& cfg,
                     const std::string& subject, const Log& log) {
  cfg.validate();
  if (pretrained.stage != Stage::pretrained)
    throw ConfigError("finetune: checkpoint stage is '" + std::string(stage_name(pretrained.stage)) +
                      "', expected 'pretrained'");
  if (!(pretrained.config.model == cfg.model))
    throw ConfigError("finetune: model configuration differs from the pretrained checkpoint");

  const auto labels = pooled_labels(blocks);
  const auto idx = cfg.train.finetune_rebalance ? rebalance_indices(labels, Rng::derive(cfg.seed, 21))
                                                : iota(labels.size());
  const TrialSet trials = build_trials(blocks, &idx, cfg.preprocess);
  check_geometry(trials, cfg.model);
  emit(log, "finetune " + subject + ": " + std::to_string(trials.size()) + " trials");

  ModelParams<float> params = pretrained.params;
  const std::size_t n = cfg.model.tokens(), d = cfg.model.dim, zf = cfg.model.fusion_feature_dim();
  std::vector<std::vector<float>> tokens(trials.size()), zfus(trials.size());
  {
    const model::GraphParams<float> frozen(params, {});
    for (std::size_t i = 0; i < trials.size(); ++i) {
      model::Trace<float> trace;
      const auto out = model::forward(trials.view(i), frozen, Mode::pretrain, &trace);
      tokens[i].assign(trace.fusion_tokens->values().begin(), trace.fusion_tokens->values().end());
      zfus[i].assign(out.z_fus.values().begin(), out.z_fus.values().end());
    }
  }

  const std::set<std::string> trainable = params.name_set(model::Group::adapter);
  std::set<std::string> subset = trainable;
  subset.insert("classifier.fus");
  auto state = optim::make_adam(params, trainable);
  Rng order_rng(Rng::derive(cfg.seed, 22));
  std::vector<std::size_t> order = iota(trials.size());

  TrainResult res;
  res.final_ckpt.config = cfg;
  res.final_ckpt.stage = Stage::finetuned;
  res.final_ckpt.subject = subject;
  res.final_ckpt.history = pretrained.history;
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.train.finetune_epochs; ++epoch) {
    const double lr = cfg.optimizer.lr(epoch);
    order_rng.shuffle(std::span<std::size_t>(order));
    double sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.train.batch_size);
      model::GraphParams<float> gp(params, trainable, subset);
      std::vector<Tensor<float>> logits;
      std::vector<int> y;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto ft = Tensor<float>::constant({n, d}, tokens[i]);
        const auto z = Tensor<float>::constant({zf}, zfus[i]);
        logits.push_back(model::classify(z, std::optional(model::adapt(ft, gp, Mode::adapted)), gp));
        y.push_back(static_cast<int>(trials.epochs.labels[i]));
      }
      const auto ce = obj::cross_entropy(stack(logits), y);
      ad::backward(ce);
      optim::adam_step(params, gp.grads(), state, cfg.optimizer, lr);
      sum += static_cast<double>(end - start) * ce.item();
    }
    const double loss = sum / static_cast<double>(order.size());
    res.final_ckpt.history.push_back({epoch, lr, loss, loss, 0.0, std::nullopt});
    std::ostringstream msg;
    msg << "finetune epoch " << epoch + 1 << "/" << cfg.train.finetune_epochs << " lr " << lr << " ce " << loss;
    emit(log, msg.str());
    if (loss < best) {
      best = loss;
      res.best_ckpt.params = params;
      res.best_ckpt.history = res.final_ckpt.history;
      res.best_ckpt.epoch = epoch + 1;
    }
  }
  res.final_ckpt.params = std::move(params);
  res.final_ckpt.epoch = cfg.train.finetune_epochs;
  res.best_ckpt.config = cfg;
  res.best_ckpt.stage = Stage::finetuned;
  res.best_ckpt.subject = subject;
  return res;
}

obj::ConfusionCounts evaluate(const ModelParams<float>& params, const TrialSet& trials, Mode mode) {
  check_geometry(trials, params.config());
  const model::GraphParams<float> gp(params, {});
  obj::ConfusionCounts c;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto out = model::forward(trials.view(i), gp, mode);
    c.add(trials.epochs.labels[i], predict(out.logits.values()));
  }
  return c;
}

namespace {

// Calls fn(TrialSet) over contiguous chunks of each block.
template <typename Fn>
void for_each_chunk(std::span<const Block* const> blocks, const PreprocessConfig& cfg, Fn&& fn) {
  constexpr std::size_t kChunk = 64;
  for (const Block* b : blocks) {
    const Block* one[] = {b};
    if (!b->spectrogram_cache.empty()) {
      fn(build_trials(one, nullptr, cfg));
      continue;
    }
    for (std::size_t start = 0; start < b->epochs.trials; start += kChunk) {
      std::vector<std::size_t> idx(std::min(kChunk, b->epochs.trials - start));
      std::iota(idx.begin(), idx.end(), start);
      fn(build_trials(one, &idx, cfg));
    }
  }
}

}  // namespace

obj::ConfusionCounts evaluate(const ModelParams<float>& params, std::span<const Block* const> blocks, Mode mode,
                              const PreprocessConfig& cfg) {
  obj::ConfusionCounts c;
  for_each_chunk(blocks, cfg, [&](const TrialSet& t) { c += evaluate(params, t, mode); });
  return c;
}

namespace {

ordered_json metrics_object(const obj::ConfusionCounts& c) {
  ordered_json j;
  try {
    const obj::Metrics m = obj::metrics(c);
    j["ba"] = m.ba;
    j["tpr"] = m.tpr;
    j["fpr"] = m.fpr;
  } catch (const NumericalError&) {
    j["ba"] = j["tpr"] = j["fpr"] = nullptr;
  }
  j["tp"] = c.tp;
  j["fn"] = c.fn;
  j["tn"] = c.tn;
  j["fp"] = c.fp;
  return j;
}

}  // namespace

std::string FoldRecord::to_json() const {
  ordered_json j;
  j["subject"] = subject;
  j["protocol"] = std::string(protocol_name(protocol));
  j["train_blocks"] = train_blocks;
  j["test_blocks"] = test_blocks;
  const ordered_json m = metrics_object(counts);
  for (const auto& [k, v] : m.items()) j[k] = v;
  if (before_finetune) j["before_finetune"] = metrics_object(*before_finetune);
  return j.dump();
}

std::string Report::summary_json() const {
  ordered_json j;
  j["summary"] = true;
  j["protocol"] = folds.empty() ? "" : std::string(protocol_name(folds.front().protocol));
  j["folds"] = folds.size();
  double ba = 0, tpr = 0, fpr = 0, before = 0;
  std::size_t n = 0, n_before = 0;
  for (const FoldRecord& f : folds) {
    try {
      const auto m = obj::metrics(f.counts);
      ba += m.ba;
      tpr += m.tpr;
      fpr += m.fpr;
      ++n;
    } catch (const NumericalError&) {
    }
    if (f.before_finetune) {
      try {
        before += obj::metrics(*f.before_finetune).ba;
        ++n_before;
      } catch (const NumericalError&) {
      }
    }
  }
  auto mean = [](double s, std::size_t k) { return k ? ordered_json(s / static_cast<double>(k)) : ordered_json(nullptr); };
  j["mean_ba"] = mean(ba, n);
  j["mean_tpr"] = mean(tpr, n);
  j["mean_fpr"] = mean(fpr, n);
  if (n_before) j["mean_ba_before_finetune"] = mean(before, n_before);
  return j.dump();
}

Report run_protocol(const Corpus& corpus, const RunConfig& cfg, const Log& log,
                    const std::function<void(const FoldRecord&)>& on_fold) {
  cfg.validate();
  const std::size_t b = cfg.protocol.training_blocks;
  const Protocol proto = cfg.protocol.name;
  std::vector<std::size_t> folds;
  if (cfg.protocol.test_subjects.empty()) {
    folds = iota(corpus.size());
  } else {
    for (const std::string& id : cfg.protocol.test_subjects)
      folds.push_back(static_cast<std::size_t>(&find_subject(corpus, id) - corpus.data()));
  }
  if (proto != Protocol::subject_dependent && corpus.size() < 2)
    throw DataError(std::string(protocol_name(proto)) + " needs at least two subjects");
  for (std::size_t f : folds) {
    const Subject& s = corpus[f];
    if (proto != Protocol::loso && s.blocks.size() <= b)
      throw DataError("subject " + s.id + " has " + std::to_string(s.blocks.size()) +
                      " blocks; training on " + std::to_string(b) + " leaves none for testing");
  }

  Report report;
  for (std::size_t f : folds) {
    const Subject& s = corpus[f];
    RunConfig fold_cfg = cfg;
    fold_cfg.seed = Rng::derive(cfg.seed, f + 1);
    FoldRecord rec;
    rec.subject = s.id;
    rec.protocol = proto;
    emit(log, "fold " + s.id + " (" + std::string(protocol_name(proto)) + ")");

    std::vector<const Block*> others;
    for (std::size_t o = 0; o < corpus.size(); ++o) {
      if (o == f) continue;
      const auto blocks = select_blocks(corpus[o], 1, corpus[o].blocks.size());
      others.insert(others.end(), blocks.begin(), blocks.end());
    }
    std::vector<const Block*> train, test;
    switch (proto) {
      case Protocol::subject_dependent:
        train = select_blocks(s, 1, b);
        test = select_blocks(s, b + 1, s.blocks.size());
        break;
      case Protocol::loso:
        train = others;
        test = select_blocks(s, 1, s.blocks.size());
        break;
      case Protocol::two_stage:
        train = select_blocks(s, 1, b);
        test = select_blocks(s, b + 1, s.blocks.size());
        break;
    }
    if (proto != Protocol::loso)
      for (const Block* blk : train) rec.train_blocks.push_back(blk->block_id);
    for (const Block* blk : test) rec.test_blocks.push_back(blk->block_id);

    if (proto == Protocol::two_stage) {
      const TrainResult pre = pretrain(others, fold_cfg, log);
      rec.before_finetune = evaluate(pre.final_ckpt.params, test, Mode::pretrain, cfg.preprocess);
      const TrainResult ft = finetune(pre.final_ckpt, train, fold_cfg, s.id, log);
      rec.counts = evaluate(ft.final_ckpt.params, test, Mode::adapted, cfg.preprocess);
    } else {
      const TrainResult pre = pretrain(train, fold_cfg, log);
      rec.counts = evaluate(pre.final_ckpt.params, test, Mode::pretrain, cfg.preprocess);
    }
    if (on_fold) on_fold(rec);
    report.folds.push_back(std::move(rec));
  }
  return report;
}

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.channels = 4;
  c.samples = 20;
  c.scales = 3;
  c.slice_len = 5;
  c.dim = 8;
  c.heads = 2;
  return c;
}

namespace {

struct TinyBatch {
  std::vector<std::vector<float>> temporal, spectral;
  std::vector<int> labels;
};

template <typename T>
Tensor<T> tiny_loss(const ModelParams<T>& p, const TinyBatch& batch, bool with_grad,
                    std::unique_ptr<model::GraphParams<T>>* keep, std::vector<std::vector<T>>* masks) {
  std::set<std::string> trainable;
  if (with_grad)
    for (const auto& [name, e] : p.entries()) trainable.insert(name);
  auto gp = std::make_unique<model::GraphParams<T>>(p, trainable);
  std::vector<Tensor<T>> logits, zt, zs;
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    model::Trace<T> trace;
    const auto out = model::forward({batch.temporal[i], batch.spectral[i]}, *gp, Mode::adapted, &trace);
    if (masks) {
      masks->push_back(trace.mask_temporal);
      masks->push_back(trace.mask_spectral);
    }
    logits.push_back(out.logits);
    zt.push_back(out.z_tem);
    zs.push_back(out.z_spe);
  }
  const auto loss = obj::overall_loss(obj::cross_entropy(stack(logits), batch.labels),
                                      obj::multiview_loss(stack(zt), stack(zs), static_cast<T>(0.2)));
  if (keep) *keep = std::move(gp);
  return loss;
}

}  // namespace

GradcheckReport gradcheck(bool use_double, std::uint64_t seed, double h) {
  const model::ModelConfig cfg = tiny_config();
  Rng rng(seed);
  ModelParams<double> p64 = ModelParams<double>::init(cfg, Rng::derive(seed, 1));
  // Zero-initialised blocks get generic values so every partial derivative is exercised.
  for (const model::ParamSpec& s : model::parameter_layout(cfg))
    if (s.init == model::Init::zeros)
      for (double& v : p64.at(s.name).values) v = rng.uniform(-0.3, 0.3);

  TinyBatch batch;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<float> t(cfg.channels * cfg.samples), sp(cfg.scales * cfg.channels * cfg.samples);
    for (float& v : t) v = static_cast<float>(rng.normal());
    for (float& v : sp) v = static_cast<float>(std::abs(rng.normal()));
    batch.temporal.push_back(std::move(t));
    batch.spectral.push_back(std::move(sp));
    batch.labels.push_back(static_cast<int>(i % 2));
  }

  std::map<std::string, std::vector<double>> analytic;
  std::vector<std::vector<double>> base_masks;
  {
    tiny_loss<double>(p64, batch, false, nullptr, &base_masks);
    if (use_double) {
      std::unique_ptr<model::GraphParams<double>> gp;
      ad::backward(tiny_loss<double>(p64, batch, true, &gp, nullptr));
      for (const auto& [k, g] : gp->grads()) analytic[k] = g;
    } else {
      const ModelParams<float> p32 = p64.cast<float>();
      std::unique_ptr<model::GraphParams<float>> gp;
      ad::backward(tiny_loss<float>(p32, batch, true, &gp, nullptr));
      for (const auto& [k, g] : gp->grads()) analytic[k].assign(g.begin(), g.end());
    }
  }

  const double floor = use_double ? 1e-6 : 1e-3;
  GradcheckReport rep;
  std::vector<std::string> all_names;
  for (const auto& [name, entry] : p64.entries()) all_names.push_back(name);
  for (const std::string& name : all_names) {
    auto& values = p64.at(name).values;
    double worst = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      std::vector<std::vector<double>> mp, mm;
      values[i] = orig + h;
      const double lp = tiny_loss<double>(p64, batch, false, nullptr, &mp).item();
      values[i] = orig - h;
      const double lm = tiny_loss<double>(p64, batch, false, nullptr, &mm).item();
      values[i] = orig;
      if (mp != base_masks || mm != base_masks)
        throw NumericalError("gradcheck: fusion mask changed under perturbation of " + name);
      const double num = (lp - lm) / (2 * h);
      const double a = analytic.at(name)[i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      worst = std::max(worst, rel);
      ++rep.checked;
    }
    rep.per_parameter[name] = worst;
    if (worst >= rep.max_rel_error) {
      rep.max_rel_error = worst;
      rep.worst_parameter = name;
    }
  }
  return rep;
}

void export_features(const ModelParams<float>& params, std::span<const Block* const> blocks, Mode mode,
                     const PreprocessConfig& cfg, const fs::path& out) {
  std::vector<float> zt, zs, zf, zsub;
  ordered_json meta;
  meta["mode"] = mode == Mode::adapted ? "adapted" : "pretrain";
  std::vector<int> labels, block_ids;
  std::vector<std::string> subjects;
  std::size_t n = 0;
  const model::GraphParams<float> gp(params, {});
  for_each_chunk(blocks, cfg, [&](const TrialSet& t) {
    check_geometry(t, params.config());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto o = model::forward(t.view(i), gp, mode);
      zt.insert(zt.end(), o.z_tem.values().begin(), o.z_tem.values().end());
      zs.insert(zs.end(), o.z_spe.values().begin(), o.z_spe.values().end());
      zf.insert(zf.end(), o.z_fus.values().begin(), o.z_fus.values().end());
      if (o.z_sub) zsub.insert(zsub.end(), o.z_sub->values().begin(), o.z_sub->values().end());
      labels.push_back(static_cast<int>(t.epochs.labels[i]));
      subjects.push_back(t.epochs.subject_ids[i]);
      block_ids.push_back(t.epochs.block_ids[i]);
      ++n;
    }
  });
  const auto& mc = params.config();
  const std::size_t dz = mc.contrast_feature_dim(), dfus = mc.fusion_feature_dim();
  io::write_tensor(out, "z_tem", std::vector<std::size_t>{n, dz}, std::span<const float>(zt));
  io::write_tensor(out, "z_spe", std::vector<std::size_t>{n, dz}, std::span<const float>(zs));
  io::write_tensor(out, "z_fus", std::vector<std::size_t>{n, dfus}, std::span<const float>(zf));
  if (mode == Mode::adapted)
    io::write_tensor(out, "z_sub", std::vector<std::size_t>{n, dfus}, std::span<const float>(zsub));
  meta["trials"] = n;
  meta["labels"] = labels;
  meta["subject_ids"] = subjects;
  meta["block_ids"] = block_ids;
  io::write_text(out / "trials.json", meta.dump(2) + "\n");
}

}  // namespace tsf::pipeline
