#pragma once

// Checkpoint format: a directory holding
//   manifest.json  - config, training step, and per-tensor (name, shape,
//                    dtype, byte offset, byte length) in blob order
//   weights.bin    - raw little-endian IEEE-754 float32 values concatenated
//                    in manifest order
//
// Weights are stored at float32; loading re-expands to float64, so a second
// save of a loaded model reproduces the blob byte for byte.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmoe/model.hpp"

namespace dsmoe {

static_assert(sizeof(float) == 4, "float32 storage requires 4-byte float");

namespace detail {
// Checkpoints are little-endian on disk; byte-swap on big-endian hosts.
inline bool host_little_endian() {
  const uint16_t probe = 1;
  uint8_t b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

inline void to_disk_order(std::vector<float>& v) {
  if (host_little_endian()) return;
  for (float& f : v) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    u = __builtin_bswap32(u);
    std::memcpy(&f, &u, 4);
  }
}
}  // namespace detail

inline void save_checkpoint(const DsMoeModel& model, const std::string& dir,
                            int64_t step = 0) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["format"] = "dsmoe-checkpoint-v1";
  manifest["step"] = step;
  manifest["config"] = config_to_json(model.config());

  std::ofstream blob(fs::path(dir) / "weights.bin",
                     std::ios::binary | std::ios::trunc);
  if (!blob) throw DataError("checkpoint: cannot write weights.bin in " + dir);

  nlohmann::json tensors = nlohmann::json::array();
  int64_t offset = 0;
  std::vector<float> buf;
  for (const Param* p : model.params()) {
    buf.resize(static_cast<size_t>(p->numel()));
    for (int64_t i = 0; i < p->numel(); ++i)
      buf[static_cast<size_t>(i)] = static_cast<float>(p->value[i]);
    detail::to_disk_order(buf);
    const int64_t nbytes = p->numel() * 4;
    blob.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(nbytes));
    tensors.push_back({{"name", p->name},
                       {"shape", p->value.shape()},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["tensors"] = std::move(tensors);
  if (!blob) throw DataError("checkpoint: short write to weights.bin");
  blob.close();

  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!mf) throw DataError("checkpoint: cannot write manifest.json in " + dir);
  mf << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
  std::unique_ptr<DsMoeModel> model;
  int64_t step = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw DataError("checkpoint: cannot open manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "dsmoe-checkpoint-v1")
    throw IntegrityError("checkpoint: unknown format tag");

  LoadedCheckpoint out;
  out.step = manifest.value("step", 0);
  const ModelConfig cfg = config_from_json(manifest.at("config"));
  out.model = std::make_unique<DsMoeModel>(cfg);

  std::ifstream blob(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!blob) throw DataError("checkpoint: cannot open weights.bin in " + dir);
  blob.seekg(0, std::ios::end);
  const int64_t blob_size = static_cast<int64_t>(blob.tellg());

  const auto& tensors = manifest.at("tensors");
  const auto& params = out.model->params();
  if (tensors.size() != params.size())
    throw IntegrityError("checkpoint: manifest lists " +
                         std::to_string(tensors.size()) + " tensors, model has " +
                         std::to_string(params.size()));

  int64_t expect_offset = 0;
  std::vector<float> buf;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = tensors[i];
    Param* p = params[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != p->name)
      throw IntegrityError("checkpoint: tensor '" + name +
                           "' where '" + p->name + "' expected");
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != p->value.shape())
      throw IntegrityError("checkpoint: tensor '" + name + "' has shape " +
                           shape_str(shape) + ", model expects " +
                           shape_str(p->value.shape()));
    const int64_t offset = entry.at("offset").get<int64_t>();
    const int64_t nbytes = entry.at("nbytes").get<int64_t>();
    if (offset != expect_offset || nbytes != p->numel() * 4)
      throw IntegrityError("checkpoint: tensor '" + name +
                           "' offsets are not contiguous");
    if (offset + nbytes > blob_size)
      throw IntegrityError("checkpoint: weights.bin truncated at tensor '" +
                           name + "'");
    expect_offset += nbytes;

    buf.resize(static_cast<size_t>(p->numel()));
    blob.seekg(offset);
    blob.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(nbytes));
    if (!blob)
      throw IntegrityError("checkpoint: read failed for tensor '" + name + "'");
    detail::to_disk_order(buf);
    for (int64_t k = 0; k < p->numel(); ++k)
      p->value[k] = static_cast<double>(buf[static_cast<size_t>(k)]);
  }
  if (expect_offset != blob_size)
    throw IntegrityError("checkpoint: weights.bin has " +
                         std::to_string(blob_size) + " bytes, manifest sums to " +
                         std::to_string(expect_offset));
  return out;
}

// Rounds every parameter through float32 in place; after this, a save/load
// round trip is the identity on the values.
inline void quantize_to_storage(DsMoeModel& model) {
  for (Param* p : model.params())
    for (int64_t i = 0; i < p->numel(); ++i)
      p->value[i] = static_cast<double>(static_cast<float>(p->value[i]));
}

}  // namespace dsmoe
