#include "tpskg/checkpoint.hpp"

#include <cstring>

namespace tpskg {

CheckpointFile read_checkpoint(const std::string& path) {
  std::string bytes = read_file(path);
  ByteReader r(bytes, "checkpoint " + path);
  std::string magic = r.raw(8);
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint " + path + ": bad magic, not a checkpoint file");
  CheckpointFile ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion)
    throw IoError("checkpoint " + path + ": unsupported format version " + std::to_string(ck.version));
  ck.precision = r.u32();
  ck.config_hash = r.u64();
  ck.config_text = r.str();
  ck.epoch = r.u32();
  ck.global_step = r.u64();
  ck.sampler_state = r.str();
  ck.augment_state = r.str();
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    uint32_t rank = r.u32();
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = r.i64();
    uint64_t len = r.u64();
    CheckpointFile::Blob blob{std::move(shape), r.raw(len)};
    ck.tensors.emplace(std::move(name), std::move(blob));
  }
  return ck;
}

}  // namespace tpskg
