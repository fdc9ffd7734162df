#include "pcar/archive.hpp"

#include <bit>
#include <fstream>

#include "json.hpp"

namespace pcar {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

void save_archive(const fs::path& dir, const NamedTensors<float>& tensors) {
  fs::create_directories(dir);
  json manifest = json::object();
  for (const auto& [name, tensor] : tensors) {
    manifest[name] = {{"shape", tensor.shape()}, {"dtype", "float32"}};
    const fs::path path = dir / (name + ".bin");
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
    if (!out) throw std::runtime_error("cannot write " + path.string());
  }
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path);
  out << manifest.dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

NamedTensors<float> load_archive(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(manifest_path.string() + ": " + e.what());
  }
  NamedTensors<float> tensors;
  for (const auto& [name, entry] : manifest.items()) {
    if (!entry.contains("shape") || entry.value("dtype", "") != "float32") {
      throw std::runtime_error(manifest_path.string() + ": bad entry for " + name);
    }
    Tensor<float> t(entry["shape"].get<Shape>());
    const fs::path path = dir / (name + ".bin");
    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + path.string());
    bin.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (bin.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(float)) || bin.peek() != EOF) {
      throw std::runtime_error(path.string() + ": size does not match shape " + shape_str(t.shape()));
    }
    tensors.emplace(name, std::move(t));
  }
  return tensors;
}

template <typename Real>
NamedTensors<float> export_state(const nn::StateDict<Real>& state) {
  NamedTensors<float> out;
  for (const auto& p : state.params) out.emplace(p.name, p.param->value.template cast<float>());
  for (const auto& b : state.buffers) out.emplace(b.name, b.tensor->template cast<float>());
  return out;
}

namespace {

template <typename Real>
void copy_into(Tensor<Real>& dst, const std::string& name, const NamedTensors<float>& tensors, bool allow_missing) {
  const auto it = tensors.find(name);
  if (it == tensors.end() && allow_missing) return;
  if (it == tensors.end()) throw CheckpointMismatch("checkpoint has no tensor " + name);
  if (it->second.shape() != dst.shape()) {
    throw CheckpointMismatch("tensor " + name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                             shape_str(dst.shape()));
  }
  dst = it->second.template cast<Real>();
}

}  // namespace

template <typename Real>
void import_state(nn::StateDict<Real>& state, const NamedTensors<float>& tensors, bool allow_missing) {
  for (auto& p : state.params) copy_into(p.param->value, p.name, tensors, allow_missing);
  for (auto& b : state.buffers) copy_into(*b.tensor, b.name, tensors, allow_missing);
}

template NamedTensors<float> export_state<float>(const nn::StateDict<float>&);
template NamedTensors<float> export_state<double>(const nn::StateDict<double>&);
template void import_state<float>(nn::StateDict<float>&, const NamedTensors<float>&, bool);
template void import_state<double>(nn::StateDict<double>&, const NamedTensors<float>&, bool);

}  // namespace pcar
