#include <cmath>
#include <thread>

#include "doctest.h"
#include "test_util.hpp"
#include "tgrad/error.hpp"
#include "tgrad/ir.hpp"
#include "tgrad/kernels.hpp"
#include "tgrad/lazy.hpp"
#include "tgrad/random.hpp"
#include "tgrad/runtime.hpp"

using namespace tgrad;
using namespace tgrad::lazy;
using tgrad::testing::errorOf;
using Op = TraceGraph::Operand;

namespace {

Op node(int i) { return {Op::Kind::Node, i}; }
Op ph(int i) { return {Op::Kind::Placeholder, i}; }

TraceGraph::Node mk(std::string op, std::vector<Op> in, Shape s, Attributes attrs = {}) {
  return {std::move(op), std::move(attrs), std::move(in), std::move(s)};
}

/// x -> five pointwise ops.
TraceGraph chainGraph(const Shape& s) {
  TraceGraph g;
  g.placeholders = {s, s};
  g.nodes.push_back(mk("add", {ph(0), ph(1)}, s));
  g.nodes.push_back(mk("mul", {node(0), ph(0)}, s));
  g.nodes.push_back(mk("neg", {node(1)}, s));
  g.nodes.push_back(mk("exp", {node(2)}, s));
  g.nodes.push_back(mk("sub", {node(3), ph(1)}, s));
  g.outputs = {4};
  return g;
}

Tensor mat(uint64_t seed, int64_t r, int64_t c) { return randomUniform(Shape{r, c}, seed, -1, 1); }

/// Random DAG over pointwise ops, matmuls, reductions and small constants.
/// Magnitudes are tracked so values stay finite.
TraceGraph randomGraph(uint64_t seed, size_t count) {
  CounterRng rng(seed);
  TraceGraph g;
  const int64_t n = 1 + static_cast<int64_t>(rng.below(4));
  const Shape sq{n, n};
  g.placeholders = {sq, sq, Shape{n}, Shape{}};
  struct V {
    Op op;
    Shape shape;
    double bound;
  };
  std::vector<V> pool = {{ph(0), sq, 1}, {ph(1), sq, 1}, {ph(2), Shape{n}, 1}, {ph(3), Shape{}, 1}};
  auto add = [&](TraceGraph::Node nd, double bound) {
    g.nodes.push_back(std::move(nd));
    int id = static_cast<int>(g.nodes.size() - 1);
    pool.push_back({node(id), g.nodes.back().shape, bound});
  };
  while (g.nodes.size() < count) {
    const V a = pool[pool.size() - 1 - rng.below(std::min<size_t>(pool.size(), 4))];
    const V b = pool[rng.below(pool.size())];
    switch (rng.below(9)) {
      case 0:
      case 1: {
        Shape s = broadcastShapes(a.shape, b.shape.rank() <= a.shape.rank() ? b.shape : a.shape);
        if (!(broadcastShapes(a.shape, b.shape) == s)) break;
        add(mk(rng.below(2) ? "add" : "sub", {a.op, b.op}, s), a.bound + b.bound);
        break;
      }
      case 2: {
        if (a.bound * b.bound > 50) break;
        Shape s = broadcastShapes(a.shape, b.shape);
        add(mk("mul", {a.op, b.op}, s), a.bound * b.bound);
        break;
      }
      case 3: add(mk(rng.below(2) ? "neg" : "relu", {a.op}, a.shape), a.bound); break;
      case 4:
        if (a.bound > 3) break;
        add(mk("exp", {a.op}, a.shape), std::exp(a.bound));
        break;
      case 5: {
        if (a.shape != sq || a.bound > 10) break;
        const V& c = pool[rng.below(2)];
        add(mk("matmul", {a.op, c.op}, sq), a.bound * static_cast<double>(n));
        break;
      }
      case 6: {
        if (a.shape.rank() == 0) break;
        add(mk("reduce_sum", {a.op}, Shape{}, {{"axes", std::vector<int64_t>{}}}), a.bound * static_cast<double>(a.shape.numel()));
        break;
      }
      case 7: {
        // Constant subgraph feeding a live op, to exercise folding.
        float v = rng.uniform(-1, 1);
        add(mk("const", {}, Shape{}, {{"value", static_cast<double>(v)}}), 1);
        add(mk("exp", {node(static_cast<int>(g.nodes.size() - 1))}, Shape{}), 3);
        add(mk("mul", {a.op, node(static_cast<int>(g.nodes.size() - 1))}, a.shape), a.bound * 3);
        break;
      }
      case 8: {
        if (a.shape.rank() != 0 || b.shape.rank() != 0) break;
        add(mk("gt", {a.op, b.op}, Shape{}), 1);
        Op cond = node(static_cast<int>(g.nodes.size() - 1));
        add(mk("select", {cond, pool[0].op, pool[1].op}, sq), 1);
        break;
      }
    }
  }
  // A couple of outputs, including possibly-dead nodes in between.
  g.outputs = {static_cast<int>(g.nodes.size() - 1)};
  if (g.nodes.size() > 3) g.outputs.push_back(static_cast<int>(rng.below(g.nodes.size() - 1)));
  return g;
}

std::vector<Tensor> inputsFor(const TraceGraph& g, uint64_t seed) {
  std::vector<Tensor> out;
  for (size_t i = 0; i < g.placeholders.size(); ++i) out.push_back(randomUniform(g.placeholders[i], seed + i, -1, 1));
  return out;
}

}  // namespace

TEST_CASE("recording executes nothing") {
  LazyDevice d;
  Tensor x = mat(1, 3, 3), y = mat(2, 3, 3);
  auto a = d.dispatch("add", {}, {x, y});
  auto b = d.dispatch("mul", {}, {a, x});
  auto c = d.dispatch("neg", {}, {b});
  CHECK(d.stats().kernelsExecuted == 0);
  CHECK(d.stats().opsDispatched == 3);
  CHECK(d.stats().compilations == 0);
  Tensor got = d.materialize(c);
  CHECK(d.stats().kernelsExecuted == 1);
  Tensor want = elementwise(ElementwiseOp::Neg, elementwise(ElementwiseOp::Mul, elementwise(ElementwiseOp::Add, x, &y), &x));
  CHECK(approxEqual(got, want, 1e-5f, 1e-5f));
}

TEST_CASE("shape errors surface at record time") {
  LazyDevice d;
  rt::RuntimeValue a = d.dispatch("neg", {}, {mat(1, 2, 3)});
  CHECK(errorOf([&] { d.dispatch("add", {}, {a, mat(2, 3, 2)}); }) == ErrorKind::ShapeMismatch);
  CHECK(errorOf([&] { d.dispatch("matmul", {}, {a, a}); }) == ErrorKind::ShapeMismatch);
  CHECK(d.stats().kernelsExecuted == 0);
}

TEST_CASE("a reused handle is one node with fanout") {
  LazyDevice d;
  auto a = d.dispatch("add", {}, {mat(1, 2, 2), mat(2, 2, 2)});
  auto b = d.dispatch("neg", {}, {a});
  auto c = d.dispatch("exp", {}, {a});
  CanonicalTrace t = d.pendingTrace();
  CHECK(t.graph.nodes.size() == 3);
  int users = 0;
  for (const auto& nd : t.graph.nodes) {
    for (const auto& in : nd.inputs) users += in.kind == Op::Kind::Node;
  }
  CHECK(users == 2);
}

TEST_CASE("(a+b)*c matches eager") {
  Tensor a = mat(3, 4, 4), b = mat(4, 4, 4), c = mat(5, 4, 4);
  LazyDevice d;
  auto s = d.dispatch("add", {}, {a, b});
  Tensor got = d.materialize(d.dispatch("mul", {}, {s, c}));
  rt::EagerDevice e;
  Tensor want = e.materialize(e.dispatch("mul", {}, {e.dispatch("add", {}, {a, b}), c}));
  CHECK(approxEqual(got, want, 1e-5f, 1e-5f));
}

TEST_CASE("same computation compiles once; a new shape compiles again") {
  LazyDevice d;
  auto step = [&](int64_t n, uint64_t seed) {
    auto s = d.dispatch("add", {}, {mat(seed, n, n), mat(seed + 1, n, n)});
    return d.materialize(d.dispatch("exp", {}, {s}));
  };
  step(2, 1);
  step(2, 7);
  CHECK(d.stats().compilations == 1);
  CHECK(d.stats().cacheHits == 1);
  REQUIRE(d.executedKeys().size() == 2);
  CHECK(d.executedKeys()[0] == d.executedKeys()[1]);
  step(3, 1);
  CHECK(d.stats().compilations == 2);
  CHECK(d.executedKeys()[2] != d.executedKeys()[0]);
}

TEST_CASE("barrier") {
  LazyDevice d;
  d.barrier();
  CHECK(d.stats().compilations == 0);
  CHECK(d.executedKeys().empty());

  Tensor x = mat(1, 3, 3);
  auto a = d.dispatch("exp", {}, {x});
  auto b = d.dispatch("neg", {}, {a});
  d.barrier();
  CHECK(d.stats().compilations == 1);
  CHECK(d.pendingTrace().graph.nodes.empty());
  Tensor viaBarrier = d.materialize(b);
  CHECK(d.stats().compilations == 1);

  LazyDevice fresh;
  Tensor viaMaterialize = fresh.materialize(fresh.dispatch("neg", {}, {fresh.dispatch("exp", {}, {x})}));
  CHECK(viaBarrier.bitwiseEqual(viaMaterialize));
  // Ops on materialized values start a new trace with a placeholder input.
  auto c = d.dispatch("add", {}, {b, x});
  CanonicalTrace t = d.pendingTrace();
  CHECK(t.graph.nodes.size() == 1);
  CHECK(t.graph.placeholders.size() == 2);
  (void)c;
}

TEST_CASE("trace keys") {
  const Shape s{2, 2};
  TraceGraph g1;
  g1.placeholders = {s, s};
  g1.nodes = {mk("add", {ph(0), ph(1)}, s), mk("neg", {ph(0)}, s), mk("mul", {node(0), node(1)}, s)};
  g1.outputs = {2, 1};
  // Same topology recorded in another order, with the placeholders swapped.
  TraceGraph g2;
  g2.placeholders = {s, s};
  g2.nodes = {mk("neg", {ph(1)}, s), mk("add", {ph(1), ph(0)}, s), mk("mul", {node(1), node(0)}, s)};
  g2.outputs = {0, 2};
  CHECK(traceKey(g1) == traceKey(g2));

  TraceGraph c1;
  c1.placeholders = {Shape{1, 5, 5, 1}, Shape{2, 2, 1, 1}};
  c1.nodes = {mk("conv2d", {ph(0), ph(1)}, Shape{1, 4, 4, 1},
                 {{"strides", std::vector<int64_t>{1, 1}}, {"padding", std::string("valid")}})};
  c1.outputs = {0};
  TraceGraph c2 = c1;
  c2.nodes[0].attrs["strides"] = std::vector<int64_t>{2, 2};
  c2.nodes[0].shape = Shape{1, 2, 2, 1};
  CHECK(traceKey(c1) != traceKey(c2));

  // Values are excluded from the key.
  LazyDevice d;
  d.materialize(d.dispatch("exp", {}, {mat(1, 2, 2)}));
  d.materialize(d.dispatch("exp", {}, {mat(99, 2, 2)}));
  CHECK(d.executedKeys()[0] == d.executedKeys()[1]);
  // Small constants are part of the key.
  LazyDevice k;
  k.materialize(k.dispatch("mul", {}, {mat(1, 2, 2), k.dispatch("const", {{"value", 2.0}}, {})}));
  k.materialize(k.dispatch("mul", {}, {mat(1, 2, 2), k.dispatch("const", {{"value", 3.0}}, {})}));
  CHECK(k.executedKeys()[0] != k.executedKeys()[1]);
}

TEST_CASE("optimize: fusion, barriers and DCE") {
  CompiledPlan chain = optimize(chainGraph(Shape{16}));
  CHECK(chain.kernelCount() == 1);
  CHECK(chain.fusedKernelCount() == 1);

  const Shape s{3, 3};
  TraceGraph g;
  g.placeholders = {s, s};
  g.nodes = {mk("add", {ph(0), ph(1)}, s), mk("exp", {node(0)}, s), mk("matmul", {node(1), ph(1)}, s),
             mk("neg", {node(2)}, s),
             // Dead: not reachable from the output.
             mk("log", {ph(0)}, s)};
  g.outputs = {3};
  CompiledPlan p = optimize(g);
  CHECK(p.kernelCount() == 3);
  for (const auto& st : p.steps) {
    CHECK(st.opcode != "log");
    for (const auto& op : st.ops) CHECK(op.code != kernels::elementwiseCode("log"));
  }

  OptimizeOptions off;
  off.fuse = false;
  CHECK(optimize(chainGraph(Shape{16}), off).kernelCount() == 5);

  // A fully constant graph folds to literals and runs no kernels.
  TraceGraph k;
  k.nodes = {mk("const", {}, Shape{}, {{"value", 2.0}}), mk("exp", {node(0)}, Shape{})};
  k.outputs = {1};
  CompiledPlan kp = optimize(k);
  CHECK(kp.kernelCount() == 0);
  CHECK(kp.run({})[0].item() == doctest::Approx(std::exp(2.0)));
}

TEST_CASE("optimized plans match unoptimized execution on random graphs") {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    CAPTURE(seed);
    TraceGraph g = randomGraph(seed, 5 + seed % 26);
    auto inputs = inputsFor(g, seed);
    auto want = executeUnoptimized(g, inputs);
    auto got = optimize(g).run(inputs);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(approxEqual(got[i], want[i], 1e-5f, 1e-5f));
    // Canonicalization preserves the computation.
    CanonicalTrace c = canonicalize(g);
    std::vector<Tensor> permuted;
    for (int origin : c.placeholderOrigin) permuted.push_back(inputs[static_cast<size_t>(origin)]);
    auto viaCanon = optimize(c.graph).run(permuted);
    for (size_t i = 0; i < viaCanon.size(); ++i) {
      CHECK(approxEqual(viaCanon[i], want[static_cast<size_t>(c.outputOrigin[i])], 1e-5f, 1e-5f));
    }
  }
}

TEST_CASE("traced loops unroll linearly") {
  ir::Module m = ir::parse(
      "func @loop(%x: tensor<4xf32>, %n: i64) -> tensor<4xf32> {\n"
      "^entry(%x: tensor<4xf32>, %n: i64):\n"
      "  %i0 = const {value = 0} : i64\n"
      "  br ^body(%i0, %x)\n"
      "^body(%i: i64, %acc: tensor<4xf32>):\n"
      "  %a = mul %acc, %x : tensor<4xf32>\n"
      "  %b = add %a, %x : tensor<4xf32>\n"
      "  %one = const {value = 1} : i64\n"
      "  %i1 = add %i, %one : i64\n"
      "  %more = lt %i1, %n : bool\n"
      "  cond_br %more, ^body(%i1, %b), ^exit(%b)\n"
      "^exit(%r: tensor<4xf32>):\n"
      "  return %r\n"
      "}\n");
  std::vector<size_t> counts;
  for (int64_t n = 1; n <= 6; ++n) {
    LazyDevice d;
    rt::EvalOptions o;
    o.syncResult = false;
    auto result = rt::evaluate(m, "loop", {randomUniform(Shape{4}, 1, -1, 1), n}, d, o);
    CHECK(d.stats().kernelsExecuted == 0);
    counts.push_back(d.pendingTrace().graph.nodes.size());
  }
  for (size_t i = 0; i < counts.size(); ++i) CHECK(counts[i] == 2 * (i + 1));
}

TEST_CASE("plan cache compiles each key once under concurrency") {
  PlanCache cache;
  CanonicalTrace c = canonicalize(chainGraph(Shape{64}));
  const uint64_t key = fnv1a(canonicalText(c.graph));
  std::vector<std::thread> threads;
  std::vector<std::shared_ptr<const CompiledPlan>> plans(8);
  for (size_t i = 0; i < plans.size(); ++i) {
    threads.emplace_back([&, i] { plans[i] = cache.getOrCompile(c.graph, key).plan; });
  }
  for (auto& t : threads) t.join();
  CHECK(cache.compilations() == 1);
  CHECK(cache.hits() == 7);
  for (const auto& p : plans) CHECK(p == plans[0]);
}

TEST_CASE("plan cache LRU bound and collision safety") {
  PlanCache cache(2);
  std::vector<CanonicalTrace> traces;
  for (int64_t n : {2, 3, 4}) traces.push_back(canonicalize(chainGraph(Shape{n})));
  for (const auto& t : traces) cache.getOrCompile(t.graph, traceKey(t.graph));
  CHECK(cache.size() == 2);
  CHECK(cache.getOrCompile(traces[0].graph, traceKey(traces[0].graph)).compiled);
  CHECK_FALSE(cache.getOrCompile(traces[2].graph, traceKey(traces[2].graph)).compiled);

  // Two different traces forced onto one key are still told apart.
  PlanCache shared;
  auto a = shared.getOrCompile(traces[0].graph, 42);
  auto b = shared.getOrCompile(traces[1].graph, 42);
  CHECK(a.compiled);
  CHECK(b.compiled);
  CHECK(a.plan != b.plan);
}

TEST_CASE("trace dump is valid IR") {
  LazyDevice d;
  std::string dumped;
  d.setTraceListener([&](const TraceGraph& g, uint64_t) { dumped = traceToIr(g); });
  auto a = d.dispatch("conv2d", {{"strides", std::vector<int64_t>{1, 1}}, {"padding", std::string("same")}},
                      {randomUniform(Shape{1, 4, 4, 1}, 1, -1, 1), randomUniform(Shape{3, 3, 1, 2}, 2, -1, 1)});
  auto b = d.dispatch("relu", {}, {a});
  auto i = d.dispatch("subscript_get", {}, {d.dispatch("reshape", {{"shape", std::vector<int64_t>{32}}}, {b}), int64_t{5}});
  d.materialize(i);
  REQUIRE_FALSE(dumped.empty());
  ir::Module m = ir::parse(dumped);
  CHECK(ir::verify(m).empty());
  CHECK(dumped.find("conv2d") != std::string::npos);
}
