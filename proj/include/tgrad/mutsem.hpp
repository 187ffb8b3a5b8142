#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tgrad/tensor.hpp"

namespace tgrad::mutsem {

struct OpCounts {
  uint64_t elementWrites = 0;
  uint64_t elementsAllocated = 0;
};

/// Process-wide tallies of tangent-array element writes and allocations made
/// by the pullbacks in this header.
class OpCounter {
 public:
  static OpCounts snapshot() noexcept;
  static void reset() noexcept;
  static void countWrites(uint64_t n) noexcept;
  static void countAllocation(uint64_t n) noexcept;
};

/// Output tangent -> full-length input tangent.
using FunctionalPullback = std::function<std::vector<float>(float)>;
/// (output tangent, accumulator): adds the input tangent into the accumulator.
using MutablePullback = std::function<void(float, std::span<float>)>;

template <class Pullback>
struct ValueWithPullback {
  float value = 0.0f;
  Pullback pullback;
};

ValueWithPullback<FunctionalPullback> subscriptWithFunctionalPullback(std::span<const float> values, int64_t index);
ValueWithPullback<MutablePullback> subscriptWithMutablePullback(std::span<const float> values, int64_t index);

/// Elementwise a + b into a new array.
std::vector<float> sumArrays(const std::vector<float>& a, const std::vector<float>& b);

/// values[a] + values[b].
ValueWithPullback<FunctionalPullback> myOpFunctional(std::span<const float> values, int64_t a, int64_t b);
ValueWithPullback<MutablePullback> myOpMutable(std::span<const float> values, int64_t a, int64_t b);

struct GatherWithPullback {
  Tensor value;
  /// (seed shaped like `value`, accumulator with the source's element count).
  std::function<void(const Tensor&, std::span<float>)> pullback;
};

/// Elements of the flattened `source` at `indices`, as a rank-1 tensor.
GatherWithPullback gatherWithMutablePullback(const Tensor& source, std::vector<int64_t> indices);

}  // namespace tgrad::mutsem
