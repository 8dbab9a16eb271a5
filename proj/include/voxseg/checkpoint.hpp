#ifndef VOXSEG_CHECKPOINT_HPP
#define VOXSEG_CHECKPOINT_HPP

#include <cstring>
#include <fstream>
#include <memory>

#include "voxseg/config.hpp"
#include "voxseg/network.hpp"

namespace voxseg {

// Checkpoint file: 8-byte magic, u32 manifest length, JSON manifest (config,
// format version, creation seed), then each parameter as
// (u32 path_len, path, u8 learnable, u32 ndim, i64 dims..., f32 payload).
// Round-trip is bit-exact.
namespace ckpt {
constexpr char kMagic[8] = {'V', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;
}  // namespace ckpt

inline void save_checkpoint(const Model<float>& model, const std::string& path) {
  json manifest;
  manifest["format_version"] = ckpt::kFormatVersion;
  manifest["seed"] = model.seed();
  manifest["config"] = to_json(model.config());
  const std::string mstr = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Data, "checkpoint: cannot open for writing: " + path);
  f.write(ckpt::kMagic, 8);
  const uint32_t mlen = static_cast<uint32_t>(mstr.size());
  f.write(reinterpret_cast<const char*>(&mlen), 4);
  f.write(mstr.data(), mlen);
  for (const auto& e : model.params().entries()) {
    const uint32_t plen = static_cast<uint32_t>(e.path.size());
    f.write(reinterpret_cast<const char*>(&plen), 4);
    f.write(e.path.data(), plen);
    const uint8_t learnable = e.learnable ? 1 : 0;
    f.write(reinterpret_cast<const char*>(&learnable), 1);
    const uint32_t ndim = static_cast<uint32_t>(e.tensor.ndim());
    f.write(reinterpret_cast<const char*>(&ndim), 4);
    for (size_t d = 0; d < ndim; ++d) {
      const int64_t dim = e.tensor.dim(d);
      f.write(reinterpret_cast<const char*>(&dim), 8);
    }
    f.write(reinterpret_cast<const char*>(e.tensor.data()),
            static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
  }
  check(f.good(), ErrorKind::Data, "checkpoint: write failed: " + path);
}

inline Model<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Data, "checkpoint: cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  check(f.gcount() == 8 && std::memcmp(magic, ckpt::kMagic, 8) == 0, ErrorKind::Data,
        "checkpoint: " + path + ": bad magic");
  uint32_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 4);
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), mlen);
  check(f.good(), ErrorKind::Data, "checkpoint: " + path + ": truncated manifest");
  json manifest;
  try {
    manifest = json::parse(mstr);
  } catch (const std::exception& e) {
    fail(ErrorKind::Data, "checkpoint: " + path + ": manifest parse error: " + e.what());
  }
  check(manifest.value("format_version", -1) == ckpt::kFormatVersion, ErrorKind::Data,
        "checkpoint: " + path + ": unsupported format version");

  Model<float> model(model_config_from_json(manifest.at("config")),
                     manifest.value("seed", uint64_t(0)));
  size_t loaded = 0;
  while (true) {
    uint32_t plen = 0;
    f.read(reinterpret_cast<char*>(&plen), 4);
    if (f.eof() || f.gcount() == 0) break;
    check(f.gcount() == 4, ErrorKind::Data, "checkpoint: " + path + ": truncated entry header");
    std::string p(plen, '\0');
    f.read(p.data(), plen);
    uint8_t learnable = 0;
    f.read(reinterpret_cast<char*>(&learnable), 1);
    uint32_t ndim = 0;
    f.read(reinterpret_cast<char*>(&ndim), 4);
    Shape shape(ndim);
    for (auto& d : shape) f.read(reinterpret_cast<char*>(&d), 8);
    check(f.good(), ErrorKind::Data, "checkpoint: " + path + ": truncated entry for " + p);
    check(model.params().contains(p), ErrorKind::Data,
          "checkpoint: " + path + ": unknown parameter " + p);
    Tensor<float>& t = model.params().at(p);
    check(t.shape() == shape, ErrorKind::Data,
          "checkpoint: " + path + ": shape mismatch for " + p + " (" + shape_str(shape) +
              " vs model " + shape_str(t.shape()) + ")");
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    check(f.gcount() == static_cast<std::streamsize>(t.numel() * sizeof(float)), ErrorKind::Data,
          "checkpoint: " + path + ": truncated payload for " + p);
    ++loaded;
  }
  check(loaded == model.params().entries().size(), ErrorKind::Data,
        "checkpoint: " + path + ": expected " +
            std::to_string(model.params().entries().size()) + " parameters, found " +
            std::to_string(loaded));
  return model;
}

}  // namespace voxseg

#endif  // VOXSEG_CHECKPOINT_HPP
