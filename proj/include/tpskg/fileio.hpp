#pragma once

#include <cstdint>
#include <string>

namespace tpskg {

/// Whole-file read; throws IoError with the path on failure.
std::string read_file(const std::string& path);

/// Write-temp-then-rename, so readers never observe partial files.
void atomic_write_file(const std::string& path, const std::string& bytes);

// Little-endian primitive packing for the binary formats.
void put_u32(std::string& buf, uint32_t v);
void put_u64(std::string& buf, uint64_t v);
void put_i64(std::string& buf, int64_t v);
void put_str(std::string& buf, const std::string& s);

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  uint32_t u32();
  uint64_t u64();
  int64_t i64();
  std::string str();
  std::string raw(size_t n);
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) const;
  const std::string& bytes_;
  std::string what_;
  size_t pos_ = 0;
};

}  // namespace tpskg
