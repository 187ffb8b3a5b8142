#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "tgrad/autodiff.hpp"
#include "tgrad/mutsem.hpp"
#include "tgrad/random.hpp"

using namespace tgrad;
using namespace tgrad::mutsem;
using tgrad::testing::errorOf;

namespace {

OpCounts delta(const OpCounts& before) {
  OpCounts now = OpCounter::snapshot();
  return {now.elementWrites - before.elementWrites, now.elementsAllocated - before.elementsAllocated};
}

/// Random composite over subscript reads, adds and scalar multiplies,
/// carried in both pullback styles.
struct Composite {
  std::vector<float> value;
  std::vector<FunctionalPullback> functional;
  std::vector<MutablePullback> mutableForm;

  Composite(std::span<const float> values, uint64_t seed) {
    CounterRng rng(seed);
    const size_t ops = 1 + rng.below(8);
    const float scales[] = {0.5f, 2.0f, -1.0f, 1.5f};
    for (size_t k = 0; k < ops; ++k) {
      const uint64_t kind = k == 0 ? 0 : rng.below(3);
      if (kind == 0) {
        auto i = static_cast<int64_t>(rng.below(values.size()));
        auto f = subscriptWithFunctionalPullback(values, i);
        auto m = subscriptWithMutablePullback(values, i);
        push(f.value, f.pullback, m.pullback);
      } else if (kind == 1) {
        size_t a = rng.below(k), b = rng.below(k);
        FunctionalPullback fa = functional[a], fb = functional[b];
        MutablePullback ma = mutableForm[a], mb = mutableForm[b];
        push(
            value[a] + value[b], [fa, fb](float dx) { return sumArrays(fa(dx), fb(dx)); },
            [ma, mb](float dx, std::span<float> acc) {
              ma(dx, acc);
              mb(dx, acc);
            });
      } else {
        size_t a = rng.below(k);
        float c = scales[rng.below(4)];
        FunctionalPullback fa = functional[a];
        MutablePullback ma = mutableForm[a];
        push(
            c * value[a], [fa, c](float dx) { return fa(c * dx); },
            [ma, c](float dx, std::span<float> acc) { ma(c * dx, acc); });
      }
    }
  }

  void push(float v, FunctionalPullback f, MutablePullback m) {
    value.push_back(v);
    functional.push_back(std::move(f));
    mutableForm.push_back(std::move(m));
  }
};

}  // namespace

TEST_CASE("functional subscript pullback") {
  std::vector<float> values{1, 2, 3};
  auto r = subscriptWithFunctionalPullback(values, 2);
  CHECK(r.value == 3.0f);
  CHECK(r.pullback(1.0f) == std::vector<float>{0, 0, 1});
  CHECK(r.pullback(0.0f) == std::vector<float>{0, 0, 0});

  // Finite difference of the read itself.
  for (int64_t j = 0; j < 3; ++j) {
    std::vector<float> bumped = values;
    bumped[static_cast<size_t>(j)] += 0.5f;
    float fd = (subscriptWithFunctionalPullback(bumped, 2).value - r.value) / 0.5f;
    CHECK(r.pullback(1.0f)[static_cast<size_t>(j)] == fd);
  }

  CHECK(errorOf([&] { (void)subscriptWithFunctionalPullback(values, 3); }) == ErrorKind::IndexOutOfBounds);
  CHECK(errorOf([&] { (void)subscriptWithFunctionalPullback(values, -1); }) == ErrorKind::IndexOutOfBounds);
}

TEST_CASE("mutable subscript pullback") {
  std::vector<float> values{1, 2, 3};
  auto r = subscriptWithMutablePullback(values, 2);
  CHECK(r.value == 3.0f);
  std::vector<float> acc(3, 0.0f);
  r.pullback(1.0f, acc);
  CHECK(acc == subscriptWithFunctionalPullback(values, 2).pullback(1.0f));
  r.pullback(1.0f, acc);
  CHECK(acc == std::vector<float>{0, 0, 2});

  std::vector<float> wrong(4, 0.0f);
  CHECK(errorOf([&] { r.pullback(1.0f, wrong); }) == ErrorKind::ShapeMismatch);
  CHECK(errorOf([&] { (void)subscriptWithMutablePullback(values, 7); }) == ErrorKind::IndexOutOfBounds);
}

TEST_CASE("pullback cost as the array grows") {
  for (size_t n : {size_t{10}, size_t{1000}, size_t{100000}}) {
    CAPTURE(n);
    std::vector<float> values(n, 1.0f);
    std::vector<float> acc(n, 0.0f);
    auto f = subscriptWithFunctionalPullback(values, static_cast<int64_t>(n / 2));
    auto m = subscriptWithMutablePullback(values, static_cast<int64_t>(n / 2));

    OpCounts before = OpCounter::snapshot();
    auto dense = f.pullback(1.0f);
    OpCounts functionalCost = delta(before);
    CHECK(functionalCost.elementsAllocated == n);
    CHECK(functionalCost.elementWrites == n + 1);

    before = OpCounter::snapshot();
    AllocStats buffers = AllocCounter::snapshot();
    m.pullback(1.0f, acc);
    OpCounts mutableCost = delta(before);
    CHECK(mutableCost.elementWrites == 1);
    CHECK(mutableCost.elementsAllocated == 0);
    CHECK(AllocCounter::snapshot().elementsAllocated == buffers.elementsAllocated);
    CHECK(acc == dense);
  }
}

TEST_CASE("myOp in both styles") {
  std::vector<float> values{1, 2, 3};
  auto f = myOpFunctional(values, 0, 2);
  auto m = myOpMutable(values, 0, 2);
  CHECK(f.value == 4.0f);
  CHECK(m.value == 4.0f);
  CHECK(f.pullback(1.0f) == std::vector<float>{1, 0, 1});
  std::vector<float> acc(3, 0.0f);
  m.pullback(1.0f, acc);
  CHECK(acc == std::vector<float>{1, 0, 1});

  std::vector<float> pair{5, 7};
  CHECK(myOpFunctional(pair, 1, 1).pullback(1.0f) == std::vector<float>{0, 2});
  std::vector<float> acc2(2, 0.0f);
  myOpMutable(pair, 1, 1).pullback(1.0f, acc2);
  CHECK(acc2 == std::vector<float>{0, 2});

  CHECK(errorOf([&] { (void)myOpMutable(values, 0, 3); }) == ErrorKind::IndexOutOfBounds);
  CHECK(errorOf([&] { (void)myOpFunctional(values, 5, 0); }) == ErrorKind::IndexOutOfBounds);

  for (uint64_t seed = 0; seed < 200; ++seed) {
    CounterRng rng(seed);
    size_t n = 1 + rng.below(20);
    std::vector<float> v(n);
    for (float& x : v) x = rng.uniform(-5, 5);
    auto a = static_cast<int64_t>(rng.below(n)), b = static_cast<int64_t>(rng.below(n));
    float dx = rng.uniform(-2, 2);
    std::vector<float> accum(n, 0.0f);
    myOpMutable(v, a, b).pullback(dx, accum);
    CHECK(accum == myOpFunctional(v, a, b).pullback(dx));
  }
}

TEST_CASE("random composites: mutable accumulation equals the functional result") {
  const float seeds[] = {1.0f, -0.5f, 3.0f};
  for (uint64_t s = 0; s < 300; ++s) {
    CAPTURE(s);
    CounterRng rng(s * 7919 + 1);
    size_t n = 1 + rng.below(12);
    std::vector<float> values(n);
    for (float& x : values) x = rng.uniform(-3, 3);
    Composite c(values, s);
    float dx = seeds[s % 3];
    std::vector<float> expected = c.functional.back()(dx);
    std::vector<float> acc(n, 0.0f);
    OpCounts before = OpCounter::snapshot();
    c.mutableForm.back()(dx, acc);
    CHECK(delta(before).elementsAllocated == 0);
    CHECK(acc == expected);
  }
}

TEST_CASE("gather with mutable pullback") {
  Tensor source(Shape{2, 3}, {1, 2, 3, 4, 5, 6});

  SUBCASE("all indices is the identity") {
    std::vector<int64_t> all(6);
    std::iota(all.begin(), all.end(), int64_t{0});
    auto g = gatherWithMutablePullback(source, all);
    CHECK(g.value.toVector() == source.toVector());
    Tensor seed(Shape{6}, {0.5f, -1, 2, 3, 4, 5});
    std::vector<float> acc(6, 0.0f);
    g.pullback(seed, acc);
    CHECK(acc == seed.toVector());
  }

  SUBCASE("single index behaves like a subscript") {
    auto g = gatherWithMutablePullback(source, {4});
    auto s = subscriptWithMutablePullback(source.data(), 4);
    CHECK(g.value.item() == s.value);
    std::vector<float> a(6, 0.0f), b(6, 0.0f);
    g.pullback(Tensor(Shape{1}, {1.0f}), a);
    s.pullback(1.0f, b);
    CHECK(a == b);
  }

  SUBCASE("writes scale with the index list, not the source") {
    for (int64_t n : {10, 1000, 100000}) {
      CAPTURE(n);
      Tensor big = Tensor::fill(Shape{n}, 1.0f);
      auto g = gatherWithMutablePullback(big, {0, n - 1, n / 2});
      std::vector<float> acc(static_cast<size_t>(n), 0.0f);
      OpCounts before = OpCounter::snapshot();
      g.pullback(Tensor(Shape{3}, {1, 1, 1}), acc);
      CHECK(delta(before).elementWrites == 3);
      CHECK(delta(before).elementsAllocated == 0);
    }
  }

  CHECK(errorOf([&] { (void)gatherWithMutablePullback(source, {6}); }) == ErrorKind::IndexOutOfBounds);
}

TEST_CASE("engine subscript pullbacks accumulate in place") {
  auto m = ir::parse(
      "func @f(%v: tensor<5xf32>, %i: i64, %j: i64) -> f32 {\n"
      "^entry(%v: tensor<5xf32>, %i: i64, %j: i64):\n"
      "  %a = subscript_get %v, %i : f32\n"
      "  %b = subscript_get %v, %j : f32\n"
      "  %c = add %a, %b : f32\n"
      "  return %c\n"
      "}\n");
  ad::Differentiator d(m);
  auto bundle = d.transform("f", {0});
  size_t accum = 0;
  for (const auto& block : d.module()->get(bundle->pullback).blocks) {
    for (const auto& inst : block.body) accum += inst.opcode == "subscript_accum";
  }
  CHECK(accum == 2);

  rt::EagerDevice eager;
  Tensor v(Shape{5}, {1, 2, 3, 4, 5});
  auto g = ad::gradient(d, "f", {v, int64_t{3}, int64_t{3}}, {0}, eager);
  CHECK(std::get<Tensor>(g[0]).toVector() == std::vector<float>{0, 0, 0, 2, 0});
}
