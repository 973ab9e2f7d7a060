#include "tsformer/checkpoint.hpp"

#include "json.hpp"
#include "tsformer/error.hpp"

namespace tsf {

using nlohmann::ordered_json;

namespace {
constexpr const char* kFormat = "tsformer-sa-checkpoint";
constexpr int kVersion = 1;
}  // namespace

std::string_view stage_name(Stage s) { return s == Stage::pretrained ? "pretrained" : "finetuned"; }

Stage parse_stage(std::string_view name) {
  if (name == "pretrained") return Stage::pretrained;
  if (name == "finetuned") return Stage::finetuned;
  throw DataError("unknown checkpoint stage '" + std::string(name) + "'");
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir / "tensors");
  ordered_json h;
  h["format"] = kFormat;
  h["version"] = kVersion;
  h["stage"] = std::string(stage_name(ckpt.stage));
  h["epoch"] = ckpt.epoch;
  h["subject"] = ckpt.subject;
  h["config"] = ordered_json::parse(to_json(ckpt.config));
  ordered_json hist = ordered_json::array();
  for (const EpochLog& e : ckpt.history) {
    ordered_json r;
    r["epoch"] = e.epoch;
    r["lr"] = e.lr;
    r["loss"] = e.loss;
    r["ce"] = e.ce;
    r["mv"] = e.mv;
    r["holdout_ba"] = e.holdout_ba ? ordered_json(*e.holdout_ba) : ordered_json(nullptr);
    hist.push_back(r);
  }
  h["history"] = hist;
  ordered_json tensors = ordered_json::array();
  for (const auto& [name, e] : ckpt.params.entries()) {
    tensors.push_back({{"name", name},
                       {"group", e.group == model::Group::pretrainable ? "pretrainable" : "adapter"},
                       {"shape", e.shape}});
    io::write_tensor(dir / "tensors", name, e.shape, std::span<const float>(e.values));
  }
  h["tensors"] = tensors;
  io::write_text(dir / "header.json", h.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_regular_file(dir / "header.json"))
    throw DataError(dir.string() + ": not a checkpoint (header.json missing)");
  ordered_json h;
  try {
    h = ordered_json::parse(io::read_text(dir / "header.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "header.json").string() + ": " + e.what());
  }
  Checkpoint c;
  try {
    if (h.at("format").get<std::string>() != kFormat || h.at("version").get<int>() != kVersion)
      throw DataError(dir.string() + ": unsupported checkpoint format");
    c.stage = parse_stage(h.at("stage").get<std::string>());
    c.epoch = h.at("epoch").get<std::size_t>();
    c.subject = h.at("subject").get<std::string>();
    c.config = from_json(h.at("config").dump());
    for (const auto& r : h.at("history")) {
      EpochLog e;
      e.epoch = r.at("epoch").get<std::size_t>();
      e.lr = r.at("lr").get<double>();
      e.loss = r.at("loss").get<double>();
      e.ce = r.at("ce").get<double>();
      e.mv = r.at("mv").get<double>();
      if (!r.at("holdout_ba").is_null()) e.holdout_ba = r.at("holdout_ba").get<double>();
      c.history.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "header.json").string() + ": " + e.what());
  }
  c.config.model.validate();
  c.params = model::ModelParams<float>(c.config.model);
  std::size_t listed = 0;
  for (const auto& t : h.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    if (!c.params.contains(name)) throw DataError(dir.string() + ": unexpected tensor '" + name + "'");
    const io::TensorBlob blob = io::read_tensor(dir / "tensors", name);
    auto& e = c.params.at(name);
    if (blob.dtype != "f32" || blob.shape != e.shape)
      throw DataError(dir.string() + ": tensor '" + name + "' has shape " + ad::to_string(blob.shape) +
                      ", expected " + ad::to_string(e.shape));
    e.values.assign(blob.values.begin(), blob.values.end());
    ++listed;
  }
  if (listed != c.params.entries().size()) throw DataError(dir.string() + ": checkpoint is missing tensors");
  return c;
}

}  // namespace tsf
