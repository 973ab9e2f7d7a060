#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "tsformer/checkpoint.hpp"
#include "tsformer/cli.hpp"
#include "tsformer/config.hpp"
#include "tsformer/storage.hpp"

using namespace tsf;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "tsformer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_text(e.path());
  return out;
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / "tsf_cli_test";
  std::string config, raw, cache;
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    config = (root / "run.json").string();
    raw = (root / "raw").string();
    cache = (root / "cache").string();
    io::write_text(config, to_json(test::small_config()));
  }
  ~Workspace() { fs::remove_all(root); }
  std::string path(const std::string& name) const { return (root / name).string(); }
};

}  // namespace

TEST_CASE("unknown flags exit with status 1 and print usage") {
  const auto r = run({"pretrain", "--no-such-flag"});
  CHECK(r.code == 1);
  CHECK(r.err.find("pretrain") != std::string::npos);
  CHECK(r.err.find("--data") != std::string::npos);
  CHECK(run({}).code == 1);
  CHECK(run({"fly"}).code == 1);
}

TEST_CASE("help exits cleanly") {
  const auto r = run({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("gradcheck") != std::string::npos);
}

TEST_CASE("gradcheck at 64 bit passes") {
  const auto r = run({"gradcheck", "--dtype", "f64"});
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(run({"gradcheck", "--dtype", "f16"}).code == 1);
}

TEST_CASE("configuration errors and data errors map to distinct exit codes") {
  Workspace ws;
  io::write_text(ws.path("bad.json"), R"({"train": {"batch_size": 0}})");
  CHECK(run({"synth", "--config", ws.path("bad.json"), "--out", ws.raw}).code == 1);
  io::write_text(ws.path("typo.json"), R"({"trian": {}})");
  CHECK(run({"synth", "--config", ws.path("typo.json"), "--out", ws.raw}).code == 1);
  CHECK(run({"pretrain", "--config", ws.config, "--data", ws.path("absent"), "--out", ws.path("o")}).code == 2);
  CHECK(run({"synth", "--config", ws.config}).code == 1);
}

TEST_CASE("end-to-end commands") {
  Workspace ws;
  const auto q = "--quiet";

  auto r = run({"synth", "--config", ws.config, "--out", ws.raw, q});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(fs::path(ws.raw) / "S03" / "block_02"));
  CHECK(from_json(io::read_text(fs::path(ws.raw) / "config.json")) == test::small_config());
  const auto first = tree(ws.raw);
  REQUIRE(run({"synth", "--config", ws.config, "--out", ws.raw, q}).code == 0);
  CHECK(tree(ws.raw) == first);

  REQUIRE(run({"preprocess", "--config", ws.config, "--data", ws.raw, "--out", ws.cache, q}).code == 0);
  CHECK(fs::exists(fs::path(ws.cache) / "S01" / "block_01" / "epochs"));

  SUBCASE("flags take precedence over the config file") {
    r = run({"pretrain", "--config", ws.config, "--data", ws.cache, "--out", ws.path("pre"), "--seed", "17", q});
    REQUIRE(r.code == 0);
    const auto echoed = from_json(io::read_text(fs::path(ws.path("pre")) / "config.json"));
    CHECK(echoed.seed == 17);
    CHECK(echoed.train.batch_size == test::small_config().train.batch_size);
  }

  SUBCASE("pretrain, fine-tune and score") {
    const auto pre = ws.path("pre");
    REQUIRE(run({"pretrain", "--config", ws.config, "--data", ws.cache, "--out", pre, q}).code == 0);
    const auto ck = load_checkpoint(fs::path(pre) / "final");
    CHECK(ck.stage == Stage::pretrained);
    CHECK(fs::exists(fs::path(pre) / "best" / "header.json"));
    const auto once = tree(pre);
    REQUIRE(run({"pretrain", "--config", ws.config, "--data", ws.cache, "--out", pre, q}).code == 0);
    CHECK(tree(pre) == once);

    const auto ft = ws.path("ft");
    r = run({"finetune", "--checkpoint", (fs::path(pre) / "final").string(), "--data", ws.cache, "--subject", "S03",
             "--blocks", "1", "--out", ft, q});
    REQUIRE(r.code == 0);
    const auto tuned = load_checkpoint(fs::path(ft) / "final");
    CHECK(tuned.stage == Stage::finetuned);
    CHECK(tuned.subject == "S03");
    // a fine-tuned checkpoint cannot be fine-tuned again
    CHECK(run({"finetune", "--checkpoint", (fs::path(ft) / "final").string(), "--data", ws.cache, "--subject", "S03",
               "--out", ws.path("ft2"), q})
              .code == 1);

    r = run({"evaluate", "--checkpoint", (fs::path(ft) / "final").string(), "--data", ws.cache, "--subject", "S03",
             "--blocks", "1", "--out", ws.path("ev")});
    REQUIRE(r.code == 0);
    const auto ls = lines(r.out);
    REQUIRE(ls.size() == 2);
    const auto rec = nlohmann::json::parse(ls[0]);
    CHECK(rec["subject"] == "S03");
    CHECK(rec["test_blocks"] == nlohmann::json::array({2}));
    CHECK(rec.contains("ba"));
    CHECK(nlohmann::json::parse(ls[1])["summary"] == true);
    CHECK(lines(io::read_text(fs::path(ws.path("ev")) / "report.jsonl")) == ls);

    const auto feats = ws.path("feat");
    REQUIRE(run({"export-features", "--checkpoint", (fs::path(ft) / "final").string(), "--data", ws.cache,
                 "--subject", "S01", "--out", feats})
                .code == 0);
    CHECK(io::read_tensor(feats, "z_fus").shape.front() == 160);
  }

  SUBCASE("loso emits one JSON line per subject") {
    auto cfg = test::small_config();
    cfg.train.pretrain_epochs = 1;
    io::write_text(ws.path("loso.json"), to_json(cfg));
    r = run({"evaluate", "--protocol", "loso", "--config", ws.path("loso.json"), "--data", ws.cache, "--out",
             ws.path("loso"), q});
    REQUIRE(r.code == 0);
    const auto ls = lines(r.out);
    REQUIRE(ls.size() == 4);
    std::vector<std::string> subjects;
    for (std::size_t i = 0; i < 3; ++i) {
      const auto j = nlohmann::json::parse(ls[i]);
      CHECK(j["protocol"] == "loso");
      subjects.push_back(j["subject"]);
    }
    CHECK(subjects == std::vector<std::string>{"S01", "S02", "S03"});
    CHECK(nlohmann::json::parse(ls[3])["folds"] == 3);
    CHECK(from_json(io::read_text(fs::path(ws.path("loso")) / "config.json")).protocol.name == Protocol::loso);
  }
}
