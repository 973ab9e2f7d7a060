#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "tsformer/error.hpp"
#include "tsformer/pipeline.hpp"

using namespace tsf;
using namespace tsf::pipeline;
using dsp::Label;

namespace {

const Corpus& small_corpus() {
  static const Corpus corpus = [] {
    const auto cfg = test::small_config();
    return corpus_from_synthetic(synth::gen_corpus(cfg.synth), cfg.preprocess);
  }();
  return corpus;
}

std::vector<const Block*> all_blocks_except(const Corpus& c, const std::string& id) {
  std::vector<const Block*> out;
  for (const auto& s : c)
    if (s.id != id)
      for (const auto& b : s.blocks) out.push_back(&b);
  return out;
}

std::vector<std::string> pretrainable_bytes(const model::ModelParams<float>& p) {
  std::vector<std::string> out;
  for (const auto& name : p.names(model::Group::pretrainable)) {
    const auto& v = p.at(name).values;
    out.emplace_back(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  return out;
}

}  // namespace

TEST_CASE("preprocessing yields 250-sample normalized trials") {
  const auto& c = small_corpus();
  REQUIRE(c.size() == 3);
  for (const auto& s : c) {
    REQUIRE(s.blocks.size() == 2);
    for (const auto& b : s.blocks) {
      CHECK(b.epochs.trials == 80);
      CHECK(b.epochs.samples == 250);
      CHECK(b.epochs.channels == 4);
      CHECK(b.epochs.sample_rate == 250);
      CHECK(b.subject == s.id);
    }
  }
}

TEST_CASE("block selection and missing blocks") {
  const auto& s = find_subject(small_corpus(), "S02");
  const auto first = select_blocks(s, 1, 1);
  REQUIRE(first.size() == 1);
  CHECK(first[0]->block_id == 1);
  CHECK(select_blocks(s, 2, 2)[0]->block_id == 2);
  try {
    select_blocks(s, 1, 3);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("S02") != std::string::npos);
    CHECK(msg.find('3') != std::string::npos);
  }
  CHECK_THROWS_AS(find_subject(small_corpus(), "S77"), DataError);
}

TEST_CASE("rebalancing keeps every target and matches the count without replacement") {
  std::vector<Label> labels(200, Label::nontarget);
  for (std::size_t i = 0; i < 200; i += 9) labels[i] = Label::target;
  const std::size_t targets = 23;
  const auto idx = rebalance_indices(labels, 4);
  CHECK(idx.size() == 2 * targets);
  std::set<std::size_t> uniq(idx.begin(), idx.end());
  CHECK(uniq.size() == idx.size());
  std::size_t t = 0;
  for (auto i : idx) t += labels[i] == Label::target;
  CHECK(t == targets);
  CHECK(rebalance_indices(labels, 4) == idx);
  CHECK(rebalance_indices(labels, 5) != idx);
}

TEST_CASE("trial sets reuse a matching spectrogram cache") {
  const auto& s = small_corpus().front();
  const std::vector<const Block*> blocks{&s.blocks[0]};
  const std::vector<std::size_t> idx{3, 1};
  const auto cfg = test::small_config();
  const auto ts = build_trials(blocks, &idx, cfg.preprocess);
  CHECK(ts.size() == 2);
  CHECK(ts.spectra.scales_count == 20);
  const auto full = dsp::cwt(s.blocks[0].epochs, cfg.preprocess.wavelet, cfg.preprocess.scales);
  CHECK(std::equal(ts.spectra.trial(0).begin(), ts.spectra.trial(0).end(), full.trial(3).begin()));
  CHECK(std::equal(ts.epochs.trial(1).begin(), ts.epochs.trial(1).end(), s.blocks[0].epochs.trial(1).begin()));
}

TEST_CASE("preprocessed corpus on disk loads back identically") {
  const auto cfg = test::small_config();
  const auto raw = fs::temp_directory_path() / "tsf_pp_raw";
  const auto out = fs::temp_directory_path() / "tsf_pp_out";
  fs::remove_all(raw);
  fs::remove_all(out);
  auto synth_cfg = cfg.synth;
  synth_cfg.subjects = 2;
  synth_cfg.blocks = 1;
  synth_cfg.trials_per_block = 20;
  synth::write_corpus(raw, synth::gen_corpus(synth_cfg));
  const auto from_raw = load_corpus(raw, cfg.preprocess);
  preprocess_corpus(raw, out, cfg);
  CHECK(fs::exists(out / "S01" / "block_01" / "spectrogram"));
  const auto cached = load_corpus(out, cfg.preprocess);
  REQUIRE(cached.size() == 2);
  CHECK(cached[1].blocks[0].epochs.data == from_raw[1].blocks[0].epochs.data);
  CHECK(!cached[1].blocks[0].spectrogram_cache.empty());
  const std::vector<const Block*> b{&cached[1].blocks[0]}, r{&from_raw[1].blocks[0]};
  CHECK(build_trials(b, nullptr, cfg.preprocess).spectra.data == build_trials(r, nullptr, cfg.preprocess).spectra.data);
  // a second run over the same inputs is a no-op on the results
  preprocess_corpus(raw, out, cfg);
  CHECK(load_corpus(out, cfg.preprocess)[0].blocks[0].epochs.data == cached[0].blocks[0].epochs.data);
  fs::remove_all(raw);
  fs::remove_all(out);
  CHECK_THROWS_AS(load_corpus(raw, cfg.preprocess), DataError);
}

TEST_CASE("pretraining is deterministic and tags the stage") {
  const auto cfg = test::small_config();
  const auto blocks = all_blocks_except(small_corpus(), "S03");
  const auto a = pretrain(blocks, cfg);
  const auto b = pretrain(blocks, cfg);
  CHECK(a.final_ckpt.stage == Stage::pretrained);
  CHECK(a.final_ckpt.epoch == 2);
  REQUIRE(a.final_ckpt.history.size() == 2);
  CHECK(a.final_ckpt.history[0].loss == b.final_ckpt.history[0].loss);
  CHECK(a.final_ckpt == b.final_ckpt);
  CHECK(a.final_ckpt.history[0].holdout_ba.has_value());
  for (const auto& h : a.final_ckpt.history) {
    CHECK(std::isfinite(h.loss));
    CHECK(h.loss == doctest::Approx(h.ce + h.mv).epsilon(1e-6));
  }
  const auto best_loss = a.best_ckpt.history.back().loss;
  for (const auto& h : a.final_ckpt.history) CHECK(best_loss <= h.loss);

  auto other = cfg;
  other.seed = 6;
  CHECK(!(pretrain(blocks, other).final_ckpt.params == a.final_ckpt.params));
}

TEST_CASE("fine-tuning touches only the adapter") {
  const auto cfg = test::small_config();
  const auto pre = pretrain(all_blocks_except(small_corpus(), "S03"), cfg).final_ckpt;
  const auto& s3 = find_subject(small_corpus(), "S03");
  const auto ft = finetune(pre, select_blocks(s3, 1, 1), cfg, "S03").final_ckpt;
  CHECK(ft.stage == Stage::finetuned);
  CHECK(ft.subject == "S03");
  CHECK(pretrainable_bytes(ft.params) == pretrainable_bytes(pre.params));
  bool moved = false;
  for (const auto& name : ft.params.names(model::Group::adapter))
    moved = moved || ft.params.at(name).values != pre.params.at(name).values;
  CHECK(moved);
  CHECK_THROWS_AS(finetune(ft, select_blocks(s3, 1, 1), cfg, "S03"), ConfigError);
  auto wrong = cfg;
  wrong.model.dim = 32;
  CHECK_THROWS_AS(finetune(pre, select_blocks(s3, 1, 1), wrong, "S03"), ConfigError);
}

TEST_CASE("evaluation never rebalances the test split") {
  const auto cfg = test::small_config();
  const auto& s = find_subject(small_corpus(), "S01");
  const auto p = model::ModelParams<float>::init(cfg.model, 2);
  const auto test_blocks = select_blocks(s, 2, 2);
  const auto c = evaluate(p, test_blocks, model::Mode::pretrain, cfg.preprocess);
  CHECK(c.tp + c.fn == s.blocks[1].epochs.count(Label::target));
  CHECK(c.tn + c.fp == s.blocks[1].epochs.count(Label::nontarget));
  const auto ts = build_trials(test_blocks, nullptr, cfg.preprocess);
  CHECK(evaluate(p, ts, model::Mode::pretrain) == c);
}

TEST_CASE("loso yields one record per subject") {
  auto cfg = test::small_config();
  cfg.protocol.name = Protocol::loso;
  cfg.train.pretrain_epochs = 1;
  std::vector<std::string> seen;
  const auto report = run_protocol(small_corpus(), cfg, {}, [&](const FoldRecord& f) { seen.push_back(f.subject); });
  CHECK(report.folds.size() == 3);
  CHECK(seen == std::vector<std::string>{"S01", "S02", "S03"});
  for (const auto& f : report.folds) {
    CHECK(f.train_blocks.empty());
    CHECK(f.test_blocks == std::vector<int>{1, 2});
    CHECK(f.to_json().find("\"subject\":\"" + f.subject + "\"") != std::string::npos);
  }
  CHECK(report.summary_json().find("\"folds\":3") != std::string::npos);
}

TEST_CASE("subject-dependent training uses exactly the first b blocks") {
  auto cfg = test::small_config();
  cfg.protocol.name = Protocol::subject_dependent;
  cfg.protocol.test_subjects = {"S02"};
  cfg.train.pretrain_epochs = 1;
  const auto report = run_protocol(small_corpus(), cfg);
  REQUIRE(report.folds.size() == 1);
  CHECK(report.folds[0].train_blocks == std::vector<int>{1});
  CHECK(report.folds[0].test_blocks == std::vector<int>{2});
  CHECK(!report.folds[0].before_finetune);
}

TEST_CASE("two-stage protocol tests on the remaining blocks and records both stages") {
  auto cfg = test::small_config();
  cfg.protocol.test_subjects = {"S03"};
  cfg.train.pretrain_epochs = 1;
  cfg.train.finetune_epochs = 1;
  const auto report = run_protocol(small_corpus(), cfg);
  REQUIRE(report.folds.size() == 1);
  CHECK(report.folds[0].train_blocks == std::vector<int>{1});
  CHECK(report.folds[0].test_blocks == std::vector<int>{2});
  CHECK(report.folds[0].before_finetune.has_value());
  CHECK(report.folds[0].to_json().find("before_finetune") != std::string::npos);

  cfg.protocol.training_blocks = 2;
  CHECK_THROWS_AS(run_protocol(small_corpus(), cfg), DataError);
}

TEST_CASE("ten-block layout with b = 4 tests on blocks 5 to 10") {
  Subject s;
  s.id = "S01";
  for (int k = 1; k <= 10; ++k) {
    Block b;
    b.subject = "S01";
    b.block_id = k;
    s.blocks.push_back(b);
  }
  std::vector<int> ids;
  for (const Block* b : select_blocks(s, 5, s.blocks.size())) ids.push_back(b->block_id);
  CHECK(ids == std::vector<int>{5, 6, 7, 8, 9, 10});
}

TEST_CASE("full-model gradient check at 64 bit") {
  const auto r = gradcheck(true, 1);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(r.checked > 0);
  CHECK(r.per_parameter.size() == parameter_layout(tiny_config()).size());
}

TEST_CASE("exported features have the model dimensions") {
  const auto cfg = test::small_config();
  const auto p = model::ModelParams<float>::init(cfg.model, 3);
  const auto out = fs::temp_directory_path() / "tsf_features";
  fs::remove_all(out);
  const auto& s = small_corpus().front();
  export_features(p, select_blocks(s, 1, 1), model::Mode::adapted, cfg.preprocess, out);
  const auto zf = io::read_tensor(out, "z_fus");
  CHECK(zf.shape == std::vector<std::size_t>{80, cfg.model.fusion_feature_dim()});
  CHECK(io::read_tensor(out, "z_tem").shape == std::vector<std::size_t>{80, cfg.model.contrast_feature_dim()});
  CHECK(fs::exists(out / "z_sub.bin"));
  CHECK(fs::exists(out / "trials.json"));
  fs::remove_all(out);
}
