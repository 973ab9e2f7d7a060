#include "tsformer/storage.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tsformer/error.hpp"

namespace tsf::io {

namespace {

using nlohmann::json;

template <typename T>
void write_blob(const fs::path& file, std::span<const T> values) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + file.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      os.write(bytes.data(), sizeof(T));
    }
  }
  if (!os) throw DataError("short write to " + file.string());
}

template <typename T>
std::vector<T> read_blob(const fs::path& file, std::size_t expected_count) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot open " + file.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != expected_count * sizeof(T)) {
    std::ostringstream os;
    os << file.string() << ": expected " << expected_count * sizeof(T) << " bytes, found "
       << bytes;
    throw DataError(os.str());
  }
  is.seekg(0);
  std::vector<T> out(expected_count);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : out) {
      auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(b.begin(), b.end());
      v = std::bit_cast<T>(b);
    }
  }
  return out;
}

json read_json(const fs::path& file) {
  try {
    return json::parse(read_text(file));
  } catch (const json::exception& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

void check_header(const json& meta, const fs::path& dir) {
  if (meta.value("dtype", "f32") != "f32")
    throw DataError(dir.string() + ": only dtype f32 is supported");
  if (meta.value("byte_order", "little") != "little")
    throw DataError(dir.string() + ": only little-endian data is supported");
}

std::size_t product(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

template <typename T>
void write_tensor_impl(const fs::path& dir, const std::string& name,
                       std::span<const std::size_t> shape, std::span<const T> values,
                       const char* dtype) {
  if (product(shape) != values.size()) throw ShapeError("tensor '" + name + "' shape/size mismatch");
  fs::create_directories(dir);
  json meta;
  meta["name"] = name;
  meta["shape"] = std::vector<std::size_t>(shape.begin(), shape.end());
  meta["dtype"] = dtype;
  meta["byte_order"] = "little";
  write_text(dir / (name + ".json"), meta.dump(2) + "\n");
  write_blob(dir / (name + ".bin"), values);
}

}  // namespace

void write_f32(const fs::path& file, std::span<const float> values) { write_blob(file, values); }
void write_f64(const fs::path& file, std::span<const double> values) { write_blob(file, values); }
std::vector<float> read_f32(const fs::path& file, std::size_t n) { return read_blob<float>(file, n); }
std::vector<double> read_f64(const fs::path& file, std::size_t n) {
  return read_blob<double>(file, n);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + file.string() + " for writing");
  os << text;
}

std::string read_text(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot open " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool is_recording_dir(const fs::path& dir) {
  return fs::is_regular_file(dir / "meta.json") && fs::is_regular_file(dir / "signal.bin");
}

void write_recording(const fs::path& dir, const dsp::RawRecording& rec) {
  rec.validate();
  fs::create_directories(dir);
  json meta;
  meta["sample_rate"] = rec.sample_rate;
  meta["channel_names"] = rec.channel_names;
  meta["subject_id"] = rec.subject_id;
  meta["block_id"] = rec.block_id;
  meta["dtype"] = "f32";
  meta["byte_order"] = "little";
  meta["shape"] = {rec.channels, rec.samples};
  write_text(dir / "meta.json", meta.dump(2) + "\n");
  write_blob<float>(dir / "signal.bin", rec.data);

  std::ostringstream ev;
  ev << "onset_sample\tlabel\n";
  for (const dsp::Event& e : rec.events)
    ev << e.onset_sample << '\t' << static_cast<int>(e.label) << '\n';
  write_text(dir / "events.tsv", ev.str());
}

dsp::RawRecording read_recording(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  check_header(meta, dir);
  dsp::RawRecording rec;
  try {
    rec.sample_rate = meta.at("sample_rate").get<double>();
    rec.channel_names = meta.value("channel_names", std::vector<std::string>{});
    rec.subject_id = meta.at("subject_id").get<std::string>();
    rec.block_id = meta.at("block_id").get<int>();
    if (meta.contains("shape")) {
      rec.channels = meta["shape"].at(0).get<std::size_t>();
      rec.samples = meta["shape"].at(1).get<std::size_t>();
    } else {
      rec.channels = rec.channel_names.size();
    }
  } catch (const json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  if (rec.channels == 0) throw DataError(dir.string() + ": recording has no channels");
  if (rec.samples == 0) {
    const auto bytes = fs::file_size(dir / "signal.bin");
    rec.samples = bytes / (sizeof(float) * rec.channels);
  }
  rec.data = read_blob<float>(dir / "signal.bin", rec.channels * rec.samples);

  std::istringstream ev(read_text(dir / "events.tsv"));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ev, line)) {
    ++lineno;
    if (line.empty() || !std::isdigit(static_cast<unsigned char>(line[0]))) continue;
    std::istringstream ls(line);
    std::size_t onset = 0;
    int label = -1;
    if (!(ls >> onset >> label) || (label != 0 && label != 1)) {
      std::ostringstream os;
      os << (dir / "events.tsv").string() << ":" << lineno << ": malformed event";
      throw DataError(os.str());
    }
    rec.events.push_back({onset, static_cast<dsp::Label>(label)});
  }
  rec.validate();
  return rec;
}

void write_epochs(const fs::path& dir, const dsp::EpochSet& ep) {
  fs::create_directories(dir);
  json meta;
  meta["kind"] = "epochs";
  meta["shape"] = {ep.trials, ep.channels, ep.samples};
  meta["sample_rate"] = ep.sample_rate;
  meta["dtype"] = "f32";
  meta["byte_order"] = "little";
  std::vector<int> labels;
  labels.reserve(ep.labels.size());
  for (dsp::Label l : ep.labels) labels.push_back(static_cast<int>(l));
  meta["labels"] = labels;
  meta["subject_ids"] = ep.subject_ids;
  meta["block_ids"] = ep.block_ids;
  write_text(dir / "meta.json", meta.dump(2) + "\n");
  write_blob<float>(dir / "data.bin", ep.data);
}

dsp::EpochSet read_epochs(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  check_header(meta, dir);
  dsp::EpochSet ep;
  try {
    if (meta.value("kind", "") != "epochs") throw DataError(dir.string() + ": not an epoch set");
    const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw DataError(dir.string() + ": epoch shape must be 3-D");
    ep.trials = shape[0];
    ep.channels = shape[1];
    ep.samples = shape[2];
    ep.sample_rate = meta.at("sample_rate").get<double>();
    for (int l : meta.at("labels").get<std::vector<int>>())
      ep.labels.push_back(static_cast<dsp::Label>(l));
    ep.subject_ids = meta.at("subject_ids").get<std::vector<std::string>>();
    ep.block_ids = meta.at("block_ids").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  if (ep.labels.size() != ep.trials || ep.subject_ids.size() != ep.trials ||
      ep.block_ids.size() != ep.trials)
    throw DataError(dir.string() + ": per-trial metadata length mismatch");
  ep.data = read_blob<float>(dir / "data.bin", ep.trials * ep.trial_size());
  return ep;
}

void write_spectrogram(const fs::path& dir, const dsp::Spectrogram& sg) {
  fs::create_directories(dir);
  json meta;
  meta["kind"] = "spectrogram";
  meta["shape"] = {sg.trials, sg.scales_count, sg.channels, sg.samples};
  meta["scales"] = sg.scales;
  meta["wavelet"] = std::string(dsp::wavelet_name(sg.wavelet));
  meta["dtype"] = "f32";
  meta["byte_order"] = "little";
  write_text(dir / "meta.json", meta.dump(2) + "\n");
  write_blob<float>(dir / "data.bin", sg.data);
}

dsp::Spectrogram read_spectrogram(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  check_header(meta, dir);
  dsp::Spectrogram sg;
  try {
    if (meta.value("kind", "") != "spectrogram")
      throw DataError(dir.string() + ": not a spectrogram");
    const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 4) throw DataError(dir.string() + ": spectrogram shape must be 4-D");
    sg.trials = shape[0];
    sg.scales_count = shape[1];
    sg.channels = shape[2];
    sg.samples = shape[3];
    sg.scales = meta.at("scales").get<std::vector<double>>();
    sg.wavelet = dsp::parse_wavelet(meta.at("wavelet").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  if (sg.scales.size() != sg.scales_count) throw DataError(dir.string() + ": scale count mismatch");
  sg.data = read_blob<float>(dir / "data.bin", sg.trials * sg.trial_size());
  return sg;
}

void write_tensor(const fs::path& dir, const std::string& name,
                  std::span<const std::size_t> shape, std::span<const float> values) {
  write_tensor_impl(dir, name, shape, values, "f32");
}

void write_tensor(const fs::path& dir, const std::string& name,
                  std::span<const std::size_t> shape, std::span<const double> values) {
  write_tensor_impl(dir, name, shape, values, "f64");
}

TensorBlob read_tensor(const fs::path& dir, const std::string& name) {
  const json meta = read_json(dir / (name + ".json"));
  TensorBlob blob;
  try {
    blob.name = meta.at("name").get<std::string>();
    blob.shape = meta.at("shape").get<std::vector<std::size_t>>();
    blob.dtype = meta.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/" + name + ".json: " + e.what());
  }
  if (meta.value("byte_order", "little") != "little")
    throw DataError(name + ": only little-endian tensors are supported");
  const std::size_t n = product(blob.shape);
  if (blob.dtype == "f32") {
    const auto v = read_blob<float>(dir / (name + ".bin"), n);
    blob.values.assign(v.begin(), v.end());
  } else if (blob.dtype == "f64") {
    blob.values = read_blob<double>(dir / (name + ".bin"), n);
  } else {
    throw DataError(name + ": unsupported dtype " + blob.dtype);
  }
  return blob;
}

}  // namespace tsf::io
