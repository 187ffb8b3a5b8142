#include "tgrad/mutsem.hpp"

#include <atomic>
#include <string>

#include "tgrad/error.hpp"

namespace tgrad::mutsem {

namespace {

std::atomic<uint64_t> gWrites{0};
std::atomic<uint64_t> gAllocated{0};

void checkIndex(int64_t index, size_t length) {
  if (index < 0 || static_cast<size_t>(index) >= length) {
    throw Error(ErrorKind::IndexOutOfBounds,
                "index " + std::to_string(index) + " out of bounds for length " + std::to_string(length));
  }
}

void checkAccumulator(std::span<float> acc, size_t length) {
  if (acc.size() != length) {
    throw Error(ErrorKind::ShapeMismatch, "accumulator has " + std::to_string(acc.size()) + " elements, expected " +
                                              std::to_string(length));
  }
}

std::vector<float> zeros(size_t n) {
  OpCounter::countAllocation(n);
  OpCounter::countWrites(n);
  return std::vector<float>(n, 0.0f);
}

}  // namespace

OpCounts OpCounter::snapshot() noexcept { return {gWrites.load(), gAllocated.load()}; }

void OpCounter::reset() noexcept {
  gWrites = 0;
  gAllocated = 0;
}

void OpCounter::countWrites(uint64_t n) noexcept { gWrites += n; }
void OpCounter::countAllocation(uint64_t n) noexcept { gAllocated += n; }

ValueWithPullback<FunctionalPullback> subscriptWithFunctionalPullback(std::span<const float> values, int64_t index) {
  checkIndex(index, values.size());
  const size_t n = values.size();
  return {values[static_cast<size_t>(index)], [n, index](float dx) {
            std::vector<float> d = zeros(n);
            d[static_cast<size_t>(index)] = dx;
            OpCounter::countWrites(1);
            return d;
          }};
}

ValueWithPullback<MutablePullback> subscriptWithMutablePullback(std::span<const float> values, int64_t index) {
  checkIndex(index, values.size());
  const size_t n = values.size();
  return {values[static_cast<size_t>(index)], [n, index](float dx, std::span<float> acc) {
            checkAccumulator(acc, n);
            acc[static_cast<size_t>(index)] += dx;
            OpCounter::countWrites(1);
          }};
}

std::vector<float> sumArrays(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "cannot add arrays of length " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  OpCounter::countAllocation(a.size());
  OpCounter::countWrites(a.size());
  std::vector<float> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

ValueWithPullback<FunctionalPullback> myOpFunctional(std::span<const float> values, int64_t a, int64_t b) {
  auto x = subscriptWithFunctionalPullback(values, a);
  auto y = subscriptWithFunctionalPullback(values, b);
  return {x.value + y.value, [pa = x.pullback, pb = y.pullback](float dx) { return sumArrays(pa(dx), pb(dx)); }};
}

ValueWithPullback<MutablePullback> myOpMutable(std::span<const float> values, int64_t a, int64_t b) {
  auto x = subscriptWithMutablePullback(values, a);
  auto y = subscriptWithMutablePullback(values, b);
  return {x.value + y.value, [pa = x.pullback, pb = y.pullback](float dx, std::span<float> acc) {
            pa(dx, acc);
            pb(dx, acc);
          }};
}

GatherWithPullback gatherWithMutablePullback(const Tensor& source, std::vector<int64_t> indices) {
  const size_t n = static_cast<size_t>(source.numel());
  auto src = source.data();
  std::vector<float> out;
  out.reserve(indices.size());
  for (int64_t i : indices) {
    checkIndex(i, n);
    out.push_back(src[static_cast<size_t>(i)]);
  }
  const int64_t count = static_cast<int64_t>(indices.size());
  return {Tensor(Shape{count}, std::move(out)),
          [n, indices = std::move(indices)](const Tensor& seed, std::span<float> acc) {
            checkAccumulator(acc, n);
            if (seed.numel() != static_cast<int64_t>(indices.size())) {
              throw Error(ErrorKind::ShapeMismatch, "gather seed has " + std::to_string(seed.numel()) +
                                                        " elements, expected " + std::to_string(indices.size()));
            }
            auto s = seed.data();
            for (size_t k = 0; k < indices.size(); ++k) acc[static_cast<size_t>(indices[k])] += s[k];
            OpCounter::countWrites(indices.size());
          }};
}

}  // namespace tgrad::mutsem
