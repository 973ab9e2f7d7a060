#include "tsformer/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "tsformer/checkpoint.hpp"
#include "tsformer/config.hpp"
#include "tsformer/error.hpp"
#include "tsformer/pipeline.hpp"
#include "tsformer/synthgen.hpp"

namespace tsf::cli {

namespace {

struct Flags {
  std::string config, data, out, protocol, wavelet, dtype = "f64", checkpoint, subject;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> blocks;
  bool quiet = false;
};

RunConfig effective_config(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = load_config(f.config, cfg);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.synth.seed = *f.seed;
  }
  if (!f.protocol.empty()) cfg.protocol.name = parse_protocol(f.protocol);
  if (f.blocks) cfg.protocol.training_blocks = *f.blocks;
  if (!f.wavelet.empty()) cfg.preprocess.wavelet = dsp::parse_wavelet(f.wavelet);
  cfg.validate();
  return cfg;
}

void echo_config(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  io::write_text(dir / "config.json", to_json(cfg));
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required flag ") + flag);
}

pipeline::Log logger(const Flags& f, std::ostream& err) {
  if (f.quiet) return {};
  return [&err](const std::string& m) { err << m << '\n'; };
}

std::vector<const pipeline::Block*> all_blocks(const pipeline::Subject& s) {
  return pipeline::select_blocks(s, 1, s.blocks.size());
}

int cmd_synth(const Flags& f, std::ostream& out, std::ostream& err) {
  require(f.out, "--out");
  const RunConfig cfg = effective_config(f);
  const auto corpus = synth::gen_corpus(cfg.synth);
  synth::write_corpus(f.out, corpus);
  echo_config(f.out, cfg);
  for (const auto& s : corpus) {
    std::size_t targets = 0, trials = 0;
    for (const auto& b : s.blocks) {
      trials += b.events.size();
      for (const auto& e : b.events) targets += e.label == dsp::Label::target;
    }
    if (!f.quiet) err << s.id << ": " << s.blocks.size() << " blocks, " << trials << " trials, " << targets << " targets\n";
  }
  out << "wrote " << corpus.size() << " subjects to " << f.out << '\n';
  return 0;
}

int cmd_preprocess(const Flags& f, std::ostream& out, std::ostream& err) {
  require(f.data, "--data");
  require(f.out, "--out");
  const RunConfig cfg = effective_config(f);
  pipeline::preprocess_corpus(f.data, f.out, cfg, logger(f, err));
  out << "wrote cached epochs and spectrograms to " << f.out << '\n';
  return 0;
}

int cmd_pretrain(const Flags& f, std::ostream& out, std::ostream& err) {
  require(f.data, "--data");
  require(f.out, "--out");
  const RunConfig cfg = effective_config(f);
  const auto corpus = pipeline::load_corpus(f.data, cfg.preprocess);
  std::vector<const pipeline::Block*> blocks;
  for (const auto& s : corpus) {
    const auto& held = cfg.protocol.test_subjects;
    if (std::find(held.begin(), held.end(), s.id) != held.end()) continue;
    const auto b = all_blocks(s);
    blocks.insert(blocks.end(), b.begin(), b.end());
  }
  if (blocks.empty()) throw DataError("no training subjects left after excluding protocol.test_subjects");
  const auto res = pipeline::pretrain(blocks, cfg, logger(f, err));
  const fs::path dir = f.out;
  save_checkpoint(dir / "final", res.final_ckpt);
  save_checkpoint(dir / "best", res.best_ckpt);
  echo_config(dir, cfg);
  out << "pretrained checkpoint: " << (dir / "final").string() << " (best epoch " << res.best_ckpt.epoch << ")\n";
  return 0;
}

int cmd_finetune(const Flags& f, std::ostream& out, std::ostream& err) {
  require(f.checkpoint, "--checkpoint");
  require(f.data, "--data");
  require(f.subject, "--subject");
  require(f.out, "--out");
  const Checkpoint pre = load_checkpoint(f.checkpoint);
  Flags g = f;
  RunConfig cfg = pre.config;
  if (!f.config.empty()) cfg = load_config(f.config, cfg);
  if (g.seed) cfg.seed = *g.seed;
  if (g.blocks) cfg.protocol.training_blocks = *g.blocks;
  if (!g.wavelet.empty()) cfg.preprocess.wavelet = dsp::parse_wavelet(g.wavelet);
  cfg.validate();
  const auto corpus = pipeline::load_corpus(f.data, cfg.preprocess);
  const auto& subject = pipeline::find_subject(corpus, f.subject);
  const auto blocks = pipeline::select_blocks(subject, 1, cfg.protocol.training_blocks);
  const auto res = pipeline::finetune(pre, blocks, cfg, subject.id, logger(f, err));
  const fs::path dir = f.out;
  save_checkpoint(dir / "final", res.final_ckpt);
  save_checkpoint(dir / "best", res.best_ckpt);
  echo_config(dir, cfg);
  out << "fine-tuned checkpoint: " << (dir / "final").string() << '\n';
  return 0;
}

int cmd_evaluate(const Flags& f, std::ostream& out, std::ostream& err) {
  require(f.data, "--data");
  std::ofstream report;
  if (!f.out.empty()) fs::create_directories(f.out);

  if (!f.checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(f.checkpoint);
    RunConfig cfg = ck.config;
    if (f.blocks) cfg.protocol.training_blocks = *f.blocks;
    const auto corpus = pipeline::load_corpus(f.data, cfg.preprocess);
    const auto mode = ck.stage == Stage::finetuned ? model::Mode::adapted : model::Mode::pretrain;
    if (!f.out.empty()) {
      echo_config(f.out, cfg);
      report.open(fs::path(f.out) / "report.jsonl", std::ios::trunc);
    }
    pipeline::Report rep;
    for (const auto& s : corpus) {
      if (!f.subject.empty() && s.id != f.subject) continue;
      const std::size_t first = f.blocks ? *f.blocks + 1 : 1;
      if (first > s.blocks.size()) throw DataError("subject " + s.id + " has no blocks after block " + std::to_string(first - 1));
      pipeline::FoldRecord rec;
      rec.subject = s.id;
      rec.protocol = cfg.protocol.name;
      const auto blocks = pipeline::select_blocks(s, first, s.blocks.size());
      for (const auto* b : blocks) rec.test_blocks.push_back(b->block_id);
      rec.counts = pipeline::evaluate(ck.params, blocks, mode, cfg.preprocess);
      out << rec.to_json() << '\n';
      if (report) report << rec.to_json() << '\n';
      rep.folds.push_back(rec);
    }
    if (rep.folds.empty()) throw DataError("no subject matched --subject " + f.subject);
    out << rep.summary_json() << '\n';
    if (report) report << rep.summary_json() << '\n';
    return 0;
  }

  const RunConfig cfg = effective_config(f);
  const auto corpus = pipeline::load_corpus(f.data, cfg.preprocess);
  if (!f.out.empty()) {
    echo_config(f.out, cfg);
    report.open(fs::path(f.out) / "report.jsonl", std::ios::trunc);
  }
  const auto rep = pipeline::run_protocol(corpus, cfg, logger(f, err), [&](const pipeline::FoldRecord& r) {
    out << r.to_json() << '\n' << std::flush;
    if (report) report << r.to_json() << '\n';
  });
  out << rep.summary_json() << '\n';
  if (report) report << rep.summary_json() << '\n';
  return 0;
}

int cmd_gradcheck(const Flags& f, std::ostream& out, std::ostream&) {
  if (f.dtype != "f32" && f.dtype != "f64") throw ConfigError("--dtype must be f32 or f64");
  const bool f64 = f.dtype == "f64";
  const double tol = f64 ? 1e-4 : 1e-3;
  const auto rep = pipeline::gradcheck(f64, f.seed.value_or(1));
  for (const auto& [name, e] : rep.per_parameter)
    out << std::left << std::setw(22) << name << ' ' << std::scientific << std::setprecision(3) << e << '\n';
  out << "max relative error " << std::scientific << std::setprecision(3) << rep.max_rel_error << " ("
      << rep.worst_parameter << ", " << rep.checked << " entries, " << f.dtype << ", tolerance " << tol << ")\n";
  return rep.max_rel_error <= tol ? 0 : 3;
}

int cmd_export(const Flags& f, std::ostream& out, std::ostream&) {
  require(f.checkpoint, "--checkpoint");
  require(f.data, "--data");
  require(f.out, "--out");
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  const auto corpus = pipeline::load_corpus(f.data, ck.config.preprocess);
  std::vector<const pipeline::Block*> blocks;
  for (const auto& s : corpus) {
    if (!f.subject.empty() && s.id != f.subject) continue;
    const auto b = all_blocks(s);
    blocks.insert(blocks.end(), b.begin(), b.end());
  }
  if (blocks.empty()) throw DataError("no blocks selected for export");
  const auto mode = ck.stage == Stage::finetuned ? model::Mode::adapted : model::Mode::pretrain;
  pipeline::export_features(ck.params, blocks, mode, ck.config.preprocess, f.out);
  echo_config(f.out, ck.config);
  out << "wrote features to " << f.out << '\n';
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"TSformer-SA: two-view EEG transformer for RSVP target detection", "tsformer"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* c, bool data, bool outdir) {
    c->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
    c->add_option("--seed", f.seed, "Run seed");
    if (data) c->add_option("--data", f.data, "Data directory");
    if (outdir) c->add_option("--out", f.out, "Output directory");
    c->add_option("--wavelet", f.wavelet, "mexican_hat, morlet, gaussian or complex_gaussian");
    c->add_flag("--quiet", f.quiet, "No progress messages");
  };

  auto* synth = app.add_subcommand("synth", "Write a synthetic RSVP corpus");
  common(synth, false, true);
  auto* prep = app.add_subcommand("preprocess", "Cache epochs and spectrograms for a raw corpus");
  common(prep, true, true);
  auto* pre = app.add_subcommand("pretrain", "Stage 1: train the full model on existing subjects");
  common(pre, true, true);
  auto* ft = app.add_subcommand("finetune", "Stage 2: train the subject adapter");
  common(ft, true, true);
  ft->add_option("--checkpoint", f.checkpoint, "Pretrained checkpoint directory");
  ft->add_option("--subject", f.subject, "New subject id");
  ft->add_option("--blocks", f.blocks, "Number of leading blocks to fine-tune on");
  auto* ev = app.add_subcommand("evaluate", "Run a protocol, or score a checkpoint");
  common(ev, true, true);
  ev->add_option("--protocol", f.protocol, "subject_dependent, loso or two_stage");
  ev->add_option("--blocks", f.blocks, "Training blocks per subject");
  ev->add_option("--checkpoint", f.checkpoint, "Score this checkpoint instead of training");
  ev->add_option("--subject", f.subject, "Restrict checkpoint scoring to one subject");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check on the tiny configuration");
  gc->add_option("--dtype", f.dtype, "f32 or f64");
  gc->add_option("--seed", f.seed, "Seed for parameters and inputs");
  auto* ex = app.add_subcommand("export-features", "Dump z_tem, z_spe, z_fus per trial");
  common(ex, true, true);
  ex->add_option("--checkpoint", f.checkpoint, "Checkpoint directory");
  ex->add_option("--subject", f.subject, "Restrict to one subject");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(f, out, err);
    if (prep->parsed()) return cmd_preprocess(f, out, err);
    if (pre->parsed()) return cmd_pretrain(f, out, err);
    if (ft->parsed()) return cmd_finetune(f, out, err);
    if (ev->parsed()) return cmd_evaluate(f, out, err);
    if (gc->parsed()) return cmd_gradcheck(f, out, err);
    if (ex->parsed()) return cmd_export(f, out, err);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace tsf::cli
