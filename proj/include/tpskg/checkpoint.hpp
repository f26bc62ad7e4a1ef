#pragma once

// Binary checkpoint format (little-endian, versioned):
//   magic "TPSKGCKP", u32 version, u32 precision, u64 config_hash,
//   config text, u32 completed epochs, u64 global step, sampler / augment
//   RNG states, then named tensor blobs for every parameter and its
//   momentum buffer. Round-tripping a checkpoint reproduces training
//   bit-identically from the saved epoch.

#include <bit>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tpskg/fileio.hpp"
#include "tpskg/train.hpp"

namespace tpskg {

constexpr char kCheckpointMagic[] = "TPSKGCKP";
constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  uint32_t version = 0;
  uint32_t precision = 0;
  uint64_t config_hash = 0;
  std::string config_text;
  uint32_t epoch = 0;
  uint64_t global_step = 0;
  std::string sampler_state;
  std::string augment_state;
  struct Blob {
    Shape shape;
    std::string bytes;
  };
  std::map<std::string, Blob> tensors;
};

/// Parses a checkpoint file. Rejects bad magic or unsupported versions.
CheckpointFile read_checkpoint(const std::string& path);

namespace detail {

template <typename S>
std::string scalar_bytes(const std::vector<S>& v) {
  std::string out;
  out.reserve(v.size() * sizeof(S));
  for (S x : v) {
    if constexpr (sizeof(S) == 4) {
      uint32_t bits = std::bit_cast<uint32_t>(x);
      put_u32(out, bits);
    } else {
      uint64_t bits = std::bit_cast<uint64_t>(x);
      put_u64(out, bits);
    }
  }
  return out;
}

template <typename S>
std::vector<S> scalars_from_bytes(const std::string& bytes, const std::string& what) {
  if (bytes.size() % sizeof(S) != 0) throw IoError(what + ": blob size not a multiple of scalar width");
  size_t n = bytes.size() / sizeof(S);
  std::vector<S> out(n);
  ByteReader r(bytes, what);
  for (size_t i = 0; i < n; ++i) {
    if constexpr (sizeof(S) == 4) {
      out[i] = std::bit_cast<S>(r.u32());
    } else {
      out[i] = std::bit_cast<S>(r.u64());
    }
  }
  return out;
}

}  // namespace detail

template <typename S>
void write_checkpoint(const std::string& path, TrainState<S>& st, const std::string& config_text,
                      uint64_t config_hash) {
  std::string buf;
  buf.append(kCheckpointMagic, 8);
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<uint32_t>(sizeof(S) * 8));
  put_u64(buf, config_hash);
  put_str(buf, config_text);
  put_u32(buf, static_cast<uint32_t>(st.epoch));
  put_u64(buf, static_cast<uint64_t>(st.global_step));
  put_str(buf, st.sampler_rng.save_state());
  put_str(buf, st.augment_rng.save_state());

  put_u32(buf, static_cast<uint32_t>(st.params.size() * 2));
  for (size_t i = 0; i < st.params.size(); ++i) {
    const auto& [name, p] = st.params[i];
    put_str(buf, "param." + name);
    put_u32(buf, static_cast<uint32_t>(p.rank()));
    for (int64_t d : p.shape()) put_i64(buf, d);
    std::string data = detail::scalar_bytes<S>(p.data());
    put_u64(buf, data.size());
    buf.append(data);

    put_str(buf, "momentum." + name);
    put_u32(buf, static_cast<uint32_t>(p.rank()));
    for (int64_t d : p.shape()) put_i64(buf, d);
    std::string vel = detail::scalar_bytes<S>(st.opt.velocity[i]);
    put_u64(buf, vel.size());
    buf.append(vel);
  }
  atomic_write_file(path, buf);
}

/// Restores parameters, momentum buffers, RNG streams, and counters into an
/// already-constructed TrainState. The caller is responsible for building the
/// state from the checkpoint's own config text first.
template <typename S>
void apply_checkpoint(const CheckpointFile& ck, TrainState<S>& st) {
  if (ck.precision != sizeof(S) * 8)
    throw IoError("checkpoint precision " + std::to_string(ck.precision) + " does not match model precision " +
                  std::to_string(sizeof(S) * 8));
  st.epoch = ck.epoch;
  st.global_step = static_cast<int64_t>(ck.global_step);
  st.sampler_rng.load_state(ck.sampler_state);
  st.augment_rng.load_state(ck.augment_state);
  for (size_t i = 0; i < st.params.size(); ++i) {
    auto& [name, p] = st.params[i];
    auto pit = ck.tensors.find("param." + name);
    auto mit = ck.tensors.find("momentum." + name);
    if (pit == ck.tensors.end() || mit == ck.tensors.end())
      throw IoError("checkpoint is missing tensor '" + name + "'");
    if (pit->second.shape != p.shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(pit->second.shape) +
                    ", expected " + shape_str(p.shape()));
    p.mutable_data() = detail::scalars_from_bytes<S>(pit->second.bytes, name);
    st.opt.velocity[i] = detail::scalars_from_bytes<S>(mit->second.bytes, name);
    if (p.mutable_data().size() != static_cast<size_t>(numel(p.shape())))
      throw IoError("checkpoint tensor '" + name + "' has inconsistent element count");
  }
}

}  // namespace tpskg
