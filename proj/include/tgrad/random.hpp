#pragma once

#include <cstdint>

namespace tgrad {

/// Counter-based generator: the n-th draw is a pure function of
/// (key, n), so streams can be split and replayed without shared state.
class CounterRng {
 public:
  explicit CounterRng(uint64_t key) : key_(key) {}

  static uint64_t mix(uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  /// Bits at an absolute counter position; does not advance.
  uint64_t bitsAt(uint64_t counter) const noexcept {
    return mix(mix(key_) ^ (counter * 0xD1B54A32D192ED03ull));
  }

  /// Independent child stream.
  CounterRng split(uint64_t stream) const noexcept { return CounterRng(mix(key_ ^ mix(stream + 1))); }

  uint64_t nextBits() noexcept { return bitsAt(counter_++); }
  /// Uniform in [0, 1) with 24 bits of mantissa.
  float nextUnit() noexcept { return static_cast<float>(nextBits() >> 40) * 0x1.0p-24f; }
  float uniform(float lo, float hi) noexcept;
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) noexcept { return n == 0 ? 0 : nextBits() % n; }

  uint64_t key() const noexcept { return key_; }
  uint64_t counter() const noexcept { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace tgrad
