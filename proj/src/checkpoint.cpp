#include "fedst/checkpoint.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

namespace fedst::io {

using nlohmann::json;

void save_checkpoint(
    const std::string& prefix,
    const std::vector<std::pair<std::string, const num::Tensor*>>& tensors) {
  json manifest;
  manifest["format"] = "fedst-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "f64le";
  json list = json::array();

  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot open for writing: " + prefix + ".bin");
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t->shape();
    entry["offset"] = offset;
    list.push_back(entry);
    bin.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->numel() * sizeof(double)));
    offset += t->numel();
  }
  manifest["tensors"] = list;
  manifest["total_elements"] = offset;

  std::ofstream mf(prefix + ".json");
  if (!mf) throw Error("cannot open for writing: " + prefix + ".json");
  mf << manifest.dump(2) << "\n";
}

std::vector<LoadedTensor> load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".json");
  if (!mf) throw Error("cannot open for reading: " + prefix + ".json");
  json manifest = json::parse(mf);
  if (manifest.value("format", "") != "fedst-checkpoint") {
    throw Error("not a checkpoint manifest: " + prefix + ".json");
  }

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot open for reading: " + prefix + ".bin");

  std::vector<LoadedTensor> out;
  for (const json& entry : manifest.at("tensors")) {
    num::Shape shape = entry.at("shape").get<num::Shape>();
    num::Tensor t(shape);
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>() *
                                          sizeof(double)));
    bin.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!bin) {
      throw Error("checkpoint payload truncated: " + prefix + ".bin");
    }
    out.push_back(LoadedTensor{entry.at("name").get<std::string>(), std::move(t)});
  }
  return out;
}

void load_checkpoint_into(
    const std::string& prefix,
    const std::vector<std::pair<std::string, num::Tensor*>>& tensors) {
  std::vector<LoadedTensor> loaded = load_checkpoint(prefix);
  for (auto& [name, dst] : tensors) {
    bool found = false;
    for (LoadedTensor& lt : loaded) {
      if (lt.name != name) continue;
      if (lt.tensor.shape() != dst->shape()) {
        throw DimensionError("checkpoint tensor '" + name + "' has shape " +
                             num::shape_str(lt.tensor.shape()) + ", expected " +
                             num::shape_str(dst->shape()));
      }
      dst->values() = lt.tensor.values();
      found = true;
      break;
    }
    if (!found) {
      throw Error("checkpoint is missing tensor '" + name + "'");
    }
  }
}

}  // namespace fedst::io
