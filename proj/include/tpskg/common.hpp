#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tpskg {

// ---------------------------------------------------------------------------
// Error taxonomy. Library code throws; the CLI maps these to exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimension mismatch; message names the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range element or label access.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse: scalar-loss violations, double backward, missing grads.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration; message names the key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system / serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value detected during training; message names the first
/// offending tensor.
class TrainAbort : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the project flows through this class
// so that a fixed seed reproduces runs bit-for-bit. mt19937_64 has a
// standardized output sequence and a standardized text serialization, which
// the checkpoint format relies on.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Integer in [0, n). n must be positive.
  int64_t bounded(int64_t n) {
    if (n <= 0) throw ContractError("Rng::bounded requires n > 0");
    return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
  }

  /// Uniform double in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. Consumes exactly two draws per call and
  /// keeps no hidden state, so serialization of the engine is sufficient.
  double normal() {
    double u1 = static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Normal(0, stddev) resampled until |x| <= 2*stddev.
  double truncated_normal(double stddev) {
    for (;;) {
      double z = normal();
      if (std::fabs(z) <= 2.0) return z * stddev;
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void load_state(const std::string& state) {
    std::istringstream is(state);
    is >> gen_;
    if (is.fail()) throw IoError("Rng::load_state: malformed engine state");
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Misc small utilities.
// ---------------------------------------------------------------------------

/// FNV-1a, used for config hashes embedded in checkpoints and metrics.
inline uint64_t fnv1a64(std::string_view text) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Worker-thread cap from TPSKG_THREADS (default 1). Only gradient-free,
/// per-image-independent work (evaluation) is ever parallelized.
inline int worker_threads() {
  const char* env = std::getenv("TPSKG_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  int n = std::atoi(env);
  if (n < 1) return 1;
  unsigned hw = std::thread::hardware_concurrency();
  if (hw > 0 && n > static_cast<int>(hw)) n = static_cast<int>(hw);
  return n;
}

/// Runs fn(i) for i in [0, n). With TPSKG_THREADS > 1 the index range is
/// split into contiguous chunks; every fn(i) must write only state owned by
/// index i, which keeps results identical to the serial loop.
template <typename F>
void parallel_for(int64_t n, F&& fn) {
  int threads = worker_threads();
  if (threads <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (threads > n) threads = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace tpskg
