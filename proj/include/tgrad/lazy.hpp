#pragma once

#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "tgrad/attributes.hpp"
#include "tgrad/runtime.hpp"
#include "tgrad/tensor.hpp"

namespace tgrad::lazy {

/// Recorded op DAG with externally supplied placeholder inputs.
struct TraceGraph {
  struct Operand {
    enum class Kind { Node, Placeholder, Int };
    Kind kind = Kind::Node;
    /// Node or placeholder index, or the integer itself.
    int64_t value = 0;
    friend bool operator==(const Operand&, const Operand&) = default;
  };
  struct Node {
    std::string opcode;
    Attributes attrs;
    std::vector<Operand> inputs;
    Shape shape;
  };

  std::vector<Shape> placeholders;
  /// Topological order: inputs precede users.
  std::vector<Node> nodes;
  std::vector<int> outputs;
};

/// Canonical form of a trace: only nodes reachable from the outputs, outputs
/// ordered by structural hash, nodes in depth-first post-order and
/// placeholders numbered by first use. Independent of how the trace was
/// recorded.
struct CanonicalTrace {
  TraceGraph graph;
  /// Original placeholder index of each canonical placeholder.
  std::vector<int> placeholderOrigin;
  /// Original output position of each canonical output.
  std::vector<int> outputOrigin;
};

CanonicalTrace canonicalize(const TraceGraph& g);
/// Serialization hashed by traceKey; also the exact-match key of the cache.
std::string canonicalText(const TraceGraph& canonical);
uint64_t fnv1a(std::string_view bytes);
/// Stable 64-bit key of a trace (canonicalizes first).
uint64_t traceKey(const TraceGraph& g);

/// Executable form of a trace.
struct CompiledPlan {
  struct Ref {
    enum class Kind { Buffer, Int };
    Kind kind = Kind::Buffer;
    int64_t value = 0;
  };
  struct FusedOp {
    int code = 0;
    /// Operands: >= 0 is a member index, < 0 is external input (-1 - i).
    std::vector<int> args;
  };
  struct Step {
    bool fused = false;
    /// Single kernel.
    std::string opcode;
    Attributes attrs;
    std::vector<Ref> inputs;
    int output = -1;
    /// Fused elementwise group.
    Shape shape;
    std::vector<int> externals;
    std::vector<FusedOp> ops;
    /// (member index, buffer) pairs written by the group.
    std::vector<std::pair<int, int>> results;
    /// Buffers whose last reader is this step.
    std::vector<int> release;
  };

  size_t bufferCount = 0;
  size_t placeholderCount = 0;
  /// Buffers holding constant-folded values.
  std::vector<std::pair<int, Tensor>> literals;
  std::vector<Step> steps;
  std::vector<int> outputs;

  size_t kernelCount() const { return steps.size(); }
  size_t fusedKernelCount() const;
  std::vector<Tensor> run(std::vector<Tensor> placeholders) const;
};

struct OptimizeOptions {
  bool foldConstants = true;
  bool fuse = true;
};

CompiledPlan optimize(const TraceGraph& g, OptimizeOptions options = {});
/// Straight op-by-op execution of the graph, the reference for optimize.
std::vector<Tensor> executeUnoptimized(const TraceGraph& g, const std::vector<Tensor>& placeholders);

/// Compile cache keyed by trace key, verified by full canonical text.
/// Concurrent misses on one key compile once; the others wait.
class PlanCache {
 public:
  explicit PlanCache(size_t maxEntries = 0) : maxEntries_(maxEntries) {}

  struct Lookup {
    std::shared_ptr<const CompiledPlan> plan;
    bool compiled = false;
  };
  Lookup getOrCompile(const TraceGraph& canonical, uint64_t key, const OptimizeOptions& options = {});

  size_t size() const;
  uint64_t compilations() const;
  uint64_t hits() const;
  void clear();

 private:
  struct Entry;
  size_t maxEntries_;
  mutable std::mutex mu_;
  std::unordered_map<uint64_t, std::vector<std::shared_ptr<Entry>>> entries_;
  std::list<std::shared_ptr<Entry>> lru_;
  uint64_t compilations_ = 0;
  uint64_t hits_ = 0;
};

/// IR text for a trace, for inspection.
std::string traceToIr(const TraceGraph& g, const std::string& name = "trace");

struct LazyOptions {
  OptimizeOptions optimize;
  /// Constants with at most this many elements are embedded in the trace.
  int64_t maxEmbeddedConstant = 16;
};

class LazyNode;

/// Device that records ops and executes them only when a value is observed
/// or a barrier is issued.
class LazyDevice final : public rt::Device {
 public:
  explicit LazyDevice(std::shared_ptr<PlanCache> cache = std::make_shared<PlanCache>(), LazyOptions options = {});
  ~LazyDevice() override;

  std::string name() const override { return "lazy"; }
  rt::RuntimeValue dispatch(const std::string& opcode, const Attributes& attrs,
                            std::vector<rt::RuntimeValue> operands) override;
  Tensor materialize(const rt::RuntimeValue& v) override;
  void sync() override { barrier(); }
  rt::DeviceStats stats() const override { return stats_; }
  void resetStats() override { stats_ = {}; }

  /// Executes every pending node reachable from a live handle.
  void barrier();
  /// The trace a barrier would run now, canonicalized.
  CanonicalTrace pendingTrace() const;
  /// Keys of the traces executed so far, in order.
  const std::vector<uint64_t>& executedKeys() const noexcept { return executedKeys_; }
  void clearKeyLog() { executedKeys_.clear(); }
  PlanCache& cache() { return *cache_; }
  /// Called with each trace right before it runs.
  void setTraceListener(std::function<void(const TraceGraph&, uint64_t)> listener) {
    listener_ = std::move(listener);
  }

 private:
  struct Handle;
  TraceGraph collect(std::vector<std::shared_ptr<LazyNode>>& outputNodes,
                     std::vector<Tensor>& placeholderValues) const;
  void run();

  std::shared_ptr<PlanCache> cache_;
  LazyOptions options_;
  rt::DeviceStats stats_;
  std::vector<std::weak_ptr<Handle>> handles_;
  std::vector<uint64_t> executedKeys_;
  std::function<void(const TraceGraph&, uint64_t)> listener_;
};

}  // namespace tgrad::lazy
