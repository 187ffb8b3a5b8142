#include <algorithm>
#include <map>
#include <optional>
#include <unordered_map>

#include "tgrad/error.hpp"
#include "tgrad/kernels.hpp"
#include "tgrad/lazy.hpp"

namespace tgrad::lazy {

/// One recorded op, or a leaf holding a concrete value. Once executed a
/// node keeps its value and drops its inputs, so later traces see it as a
/// placeholder.
class LazyNode {
 public:
  struct Input {
    std::shared_ptr<LazyNode> node;
    int64_t intValue = 0;
  };
  std::string opcode;
  Attributes attrs;
  std::vector<Input> inputs;
  Shape shape;
  std::optional<Tensor> value;
};

struct LazyDevice::Handle final : rt::DeferredTensor {
  explicit Handle(std::shared_ptr<LazyNode> n) : node(std::move(n)) {}
  const Shape& shape() const override { return node->shape; }
  std::shared_ptr<LazyNode> node;
};

LazyDevice::LazyDevice(std::shared_ptr<PlanCache> cache, LazyOptions options)
    : cache_(std::move(cache)), options_(options) {
  if (!cache_) cache_ = std::make_shared<PlanCache>();
}

LazyDevice::~LazyDevice() = default;

rt::RuntimeValue LazyDevice::dispatch(const std::string& opcode, const Attributes& attrs,
                                      std::vector<rt::RuntimeValue> operands) {
  ++stats_.opsDispatched;
  auto node = std::make_shared<LazyNode>();
  node->opcode = opcode;
  node->attrs = attrs;
  std::vector<kernels::ArgShape> shapes;
  for (auto& v : operands) {
    LazyNode::Input in;
    if (auto* t = std::get_if<Tensor>(&v)) {
      in.node = std::make_shared<LazyNode>();
      in.node->shape = t->shape();
      in.node->value = std::move(*t);
      shapes.emplace_back(in.node->shape);
    } else if (auto* d = std::get_if<rt::DeferredRef>(&v)) {
      auto* h = dynamic_cast<Handle*>(d->get());
      if (!h) throw Error(ErrorKind::TypeMismatch, opcode + ": deferred tensor from another device");
      in.node = h->node;
      shapes.emplace_back(in.node->shape);
    } else if (auto* i = std::get_if<int64_t>(&v)) {
      in.intValue = *i;
      shapes.emplace_back(*i);
    } else {
      throw Error(ErrorKind::TypeMismatch, opcode + ": lazy device cannot take " + rt::describe(v));
    }
    node->inputs.push_back(std::move(in));
  }
  // Shape errors surface at record time, not when the trace runs.
  node->shape = kernels::inferShape(opcode, attrs, shapes);
  if (opcode == "const" && node->shape.numel() > options_.maxEmbeddedConstant) {
    node->value = kernels::runKernel(opcode, attrs, {});
    node->attrs.clear();
    node->opcode.clear();
    return node->value.value();
  }
  auto handle = std::make_shared<Handle>(node);
  if (handles_.size() >= 64 && handles_.size() == handles_.capacity()) {
    std::erase_if(handles_, [](const std::weak_ptr<Handle>& w) { return w.expired(); });
  }
  handles_.push_back(handle);
  return rt::DeferredRef(handle);
}

Tensor LazyDevice::materialize(const rt::RuntimeValue& v) {
  if (auto* t = std::get_if<Tensor>(&v)) return *t;
  auto* d = std::get_if<rt::DeferredRef>(&v);
  if (!d) throw Error(ErrorKind::TypeMismatch, "cannot materialize " + rt::describe(v));
  auto* h = dynamic_cast<Handle*>(d->get());
  if (!h) throw Error(ErrorKind::TypeMismatch, "deferred tensor from another device");
  if (!h->node->value) run();
  return *h->node->value;
}

void LazyDevice::barrier() { run(); }

TraceGraph LazyDevice::collect(std::vector<std::shared_ptr<LazyNode>>& outputNodes,
                               std::vector<Tensor>& placeholderValues) const {
  TraceGraph g;
  std::unordered_map<const LazyNode*, int> nodeIndex;
  std::unordered_map<const LazyNode*, int> leafIndex;
  std::map<std::pair<const void*, std::vector<int64_t>>, int> storageIndex;
  std::vector<std::pair<const LazyNode*, size_t>> stack;

  auto leaf = [&](const LazyNode* n) {
    auto it = leafIndex.find(n);
    if (it != leafIndex.end()) return it->second;
    auto key = std::make_pair(n->value->storageId(), n->shape.dims());
    auto sit = storageIndex.find(key);
    int id;
    if (sit != storageIndex.end()) {
      id = sit->second;
    } else {
      id = static_cast<int>(g.placeholders.size());
      g.placeholders.push_back(n->shape);
      placeholderValues.push_back(*n->value);
      storageIndex.emplace(key, id);
    }
    leafIndex.emplace(n, id);
    return id;
  };

  // Iterative post-order so long unrolled traces do not exhaust the stack.
  for (const auto& out : outputNodes) {
    stack.push_back({out.get(), 0});
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (nodeIndex.count(n)) {
        stack.pop_back();
        continue;
      }
      if (next < n->inputs.size()) {
        const auto& in = n->inputs[next++];
        if (in.node && !in.node->value && !nodeIndex.count(in.node.get())) stack.push_back({in.node.get(), 0});
        continue;
      }
      TraceGraph::Node node{n->opcode, n->attrs, {}, n->shape};
      for (const auto& in : n->inputs) {
        TraceGraph::Operand op;
        if (!in.node) {
          op.kind = TraceGraph::Operand::Kind::Int;
          op.value = in.intValue;
        } else if (in.node->value) {
          op.kind = TraceGraph::Operand::Kind::Placeholder;
          op.value = leaf(in.node.get());
        } else {
          op.value = nodeIndex.at(in.node.get());
        }
        node.inputs.push_back(op);
      }
      nodeIndex.emplace(n, static_cast<int>(g.nodes.size()));
      g.nodes.push_back(std::move(node));
      stack.pop_back();
    }
    g.outputs.push_back(nodeIndex.at(out.get()));
  }
  return g;
}

CanonicalTrace LazyDevice::pendingTrace() const {
  std::vector<std::shared_ptr<LazyNode>> outputs;
  for (const auto& w : handles_) {
    if (auto h = w.lock(); h && !h->node->value) outputs.push_back(h->node);
  }
  std::vector<Tensor> values;
  return canonicalize(collect(outputs, values));
}

void LazyDevice::run() {
  std::vector<std::shared_ptr<LazyNode>> outputs;
  for (const auto& w : handles_) {
    auto h = w.lock();
    if (!h || h->node->value) continue;
    if (std::find(outputs.begin(), outputs.end(), h->node) == outputs.end()) outputs.push_back(h->node);
  }
  handles_.clear();
  if (outputs.empty()) return;

  std::vector<Tensor> values;
  TraceGraph raw = collect(outputs, values);
  CanonicalTrace canon = canonicalize(raw);
  const uint64_t key = fnv1a(canonicalText(canon.graph));
  if (listener_) listener_(canon.graph, key);
  PlanCache::Lookup found = cache_->getOrCompile(canon.graph, key, options_.optimize);
  if (found.compiled) ++stats_.compilations;
  else ++stats_.cacheHits;
  executedKeys_.push_back(key);

  std::vector<Tensor> inputs;
  inputs.reserve(canon.placeholderOrigin.size());
  for (int origin : canon.placeholderOrigin) inputs.push_back(values[static_cast<size_t>(origin)]);
  values.clear();
  std::vector<Tensor> results = found.plan->run(std::move(inputs));
  stats_.kernelsExecuted += found.plan->kernelCount();
  for (size_t i = 0; i < results.size(); ++i) {
    auto& node = outputs[static_cast<size_t>(canon.outputOrigin[i])];
    node->value = std::move(results[i]);
    node->inputs.clear();
    node->attrs.clear();
  }
}

}  // namespace tgrad::lazy
