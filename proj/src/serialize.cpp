#include "lomt/serialize.hpp"

#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

using ordered_json = nlohmann::ordered_json;

namespace lomt {

std::string history_to_jsonl(const History& history) {
  std::ostringstream out;
  for (const EpochRecord& rec : history) {
    ordered_json j;
    j["epoch"] = rec.epoch;
    if (rec.train_loss)
      j["train_loss"] = *rec.train_loss;
    else
      j["train_loss"] = nullptr;
    j["task_losses"] = rec.task_losses;
    j["penalty"] = rec.penalty;
    j["percent_sparsity"] = rec.percent_sparsity;
    j["sigma_sq"] = rec.sigma_sq;
    if (rec.val_metrics)
      j["val_metrics"] = *rec.val_metrics;
    else
      j["val_metrics"] = nullptr;
    out << j.dump() << "\n";
  }
  return out.str();
}

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'O', 'M', 'T', 'C', 'K', 'P', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const ModelGraph& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put<uint32_t>(os, (uint32_t)model.params.size());
  for (const Parameter& p : model.params) {
    put<uint32_t>(os, (uint32_t)p.id.size());
    os.write(p.id.data(), (std::streamsize)p.id.size());
    put<uint8_t>(os, (uint8_t)p.role);
    put<int32_t>(os, p.layer_id);
    put<uint8_t>(os, p.penalizable ? 1 : 0);
    const Tensor& t = p.values();
    put<uint32_t>(os, (uint32_t)t.shape.size());
    for (int d : t.shape) put<int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.v.data()),
             (std::streamsize)(sizeof(double) * t.v.size()));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, ModelGraph& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw std::runtime_error("bad checkpoint magic in " + path);
  const uint32_t count = get<uint32_t>(is);
  std::map<std::string, Tensor> stored;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t idlen = get<uint32_t>(is);
    std::string id((size_t)idlen, '\0');
    is.read(id.data(), idlen);
    get<uint8_t>(is);   // role
    get<int32_t>(is);   // layer_id
    get<uint8_t>(is);   // penalizable
    const uint32_t rank = get<uint32_t>(is);
    std::vector<int> shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(get<int32_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.v.data()),
            (std::streamsize)(sizeof(double) * t.v.size()));
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    stored[id] = std::move(t);
  }
  for (Parameter& p : model.params) {
    auto it = stored.find(p.id);
    if (it == stored.end())
      throw std::runtime_error("checkpoint " + path + " lacks parameter " + p.id);
    if (!it->second.same_shape(p.values()))
      throw std::runtime_error("checkpoint shape mismatch for " + p.id);
    p.node = make_leaf(std::move(it->second), true);
  }
}

std::string pattern_to_json(const SparsityPattern& pattern) {
  ordered_json j;
  j["task"] = pattern.task_name;
  j["lambda"] = pattern.lambda;
  j["seed"] = pattern.seed;
  j["layers"] = ordered_json::array();
  for (const LayerPattern& lp : pattern.layers) {
    ordered_json layer;
    layer["layer_id"] = lp.layer_id;
    layer["zero_channels"] = ordered_json::array();
    for (uint8_t f : lp.zero_channels) layer["zero_channels"].push_back((int)f);
    j["layers"].push_back(layer);
  }
  return j.dump(2) + "\n";
}

SparsityPattern pattern_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing pattern file: " + path);
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("pattern parse error in " + path + ": " + e.what());
  }
  SparsityPattern p;
  p.task_name = j.at("task").get<std::string>();
  p.lambda = j.at("lambda").get<double>();
  p.seed = j.at("seed").get<uint64_t>();
  for (const auto& layer : j.at("layers")) {
    LayerPattern lp;
    lp.layer_id = layer.at("layer_id").get<int>();
    for (const auto& f : layer.at("zero_channels"))
      lp.zero_channels.push_back((uint8_t)f.get<int>());
    p.layers.push_back(std::move(lp));
  }
  return p;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace lomt
