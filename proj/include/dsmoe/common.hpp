#pragma once

// Error taxonomy, deterministic RNG, and small shared helpers.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dsmoe {

// ---- errors ---------------------------------------------------------------
// Contract violations throw a typed subclass of std::runtime_error so callers
// (and tests) can tell shape bugs from data or file problems.

#define DSMOE_DEFINE_ERROR(NAME)                    \
  struct NAME : std::runtime_error {                \
    explicit NAME(const std::string& msg)           \
        : std::runtime_error(msg) {}                \
  }

DSMOE_DEFINE_ERROR(ShapeError);      // tensor dimensions disagree
DSMOE_DEFINE_ERROR(NumericError);    // NaN/Inf where finite values are required
DSMOE_DEFINE_ERROR(IndexError);      // out-of-range class/token index
DSMOE_DEFINE_ERROR(RangeError);      // value outside its documented domain
DSMOE_DEFINE_ERROR(DataError);       // unusable input data (too short, empty)
DSMOE_DEFINE_ERROR(StateError);      // operation called in the wrong order
DSMOE_DEFINE_ERROR(ConfigError);     // invalid model/training configuration
DSMOE_DEFINE_ERROR(IntegrityError);  // corrupt checkpoint
DSMOE_DEFINE_ERROR(CapacityError);   // KV cache overflow

#undef DSMOE_DEFINE_ERROR

// ---- deterministic rng ------------------------------------------------------
// All randomness in the library flows through splitmix64 so that runs are
// bit-reproducible for a given seed on any platform. std::random distributions
// are implementation-defined and deliberately avoided.

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Order-independent mix of up to three words into one stream position.
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c = 0) {
  uint64_t s = a;
  splitmix64(s);
  s ^= b + 0x9E3779B97F4A7C15ull;
  splitmix64(s);
  s ^= c + 0xD1B54A32D192ED03ull;
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) { splitmix64(state_); }

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // N(0, 1) via Box-Muller with a cached spare.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---- optional worker threads -----------------------------------------------
// Default is the single-threaded reference mode. When raised, loops split
// [0, n) into contiguous chunks whose bodies write disjoint buffers only;
// any reduction happens afterwards in index order, so results stay
// bit-identical to the serial path.

inline int& thread_count() {
  static int n = 1;
  return n;
}

template <typename F>
void parallel_for(int64_t n, F&& fn) {
  const int64_t workers =
      std::min<int64_t>(static_cast<int64_t>(thread_count()), n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int64_t w = 0; w < workers; ++w) {
    const int64_t lo = n * w / workers;
    const int64_t hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace dsmoe
