#include <algorithm>
#include <future>
#include <set>

#include "tgrad/error.hpp"
#include "tgrad/kernels.hpp"
#include "tgrad/lazy.hpp"

namespace tgrad::lazy {

namespace {

using Operand = TraceGraph::Operand;

constexpr size_t kChunk = 1024;

bool fusible(const TraceGraph::Node& node, const TraceGraph& g) {
  if (!kernels::isElementwiseOpcode(node.opcode) || node.shape.numel() == 0) return false;
  for (const auto& in : node.inputs) {
    const Shape& s = in.kind == Operand::Kind::Node ? g.nodes[static_cast<size_t>(in.value)].shape
                     : in.kind == Operand::Kind::Placeholder ? g.placeholders[static_cast<size_t>(in.value)]
                                                             : node.shape;
    if (s != node.shape && s.numel() != 1) return false;
  }
  return true;
}

/// Union-find-free grouping: groups are merged by relabeling, which is fine
/// at trace sizes.
struct Grouping {
  std::vector<int> groupOf;
  std::vector<std::set<int>> members;
  std::vector<std::set<int>> deps;
  std::vector<bool> fused;

  bool reaches(int from, int to, int skipDirect) const {
    // Is `to` reachable from `from` through at least one intermediate
    // group? Direct edges from `from` to `skipDirect` are ignored.
    std::vector<int> stack;
    std::set<int> seen;
    for (int d : deps[static_cast<size_t>(from)]) {
      if (d != skipDirect) stack.push_back(d);
    }
    while (!stack.empty()) {
      int x = stack.back();
      stack.pop_back();
      if (x == to) return true;
      if (!seen.insert(x).second) continue;
      for (int d : deps[static_cast<size_t>(x)]) stack.push_back(d);
    }
    return false;
  }

  void merge(int into, int from) {
    for (int m : members[static_cast<size_t>(from)]) {
      groupOf[static_cast<size_t>(m)] = into;
      members[static_cast<size_t>(into)].insert(m);
    }
    members[static_cast<size_t>(from)].clear();
    for (int d : deps[static_cast<size_t>(from)]) deps[static_cast<size_t>(into)].insert(d);
    deps[static_cast<size_t>(from)].clear();
    deps[static_cast<size_t>(into)].erase(into);
    deps[static_cast<size_t>(into)].erase(from);
    for (auto& d : deps) {
      if (d.erase(from)) d.insert(into);
    }
    deps[static_cast<size_t>(into)].erase(into);
  }
};

}  // namespace

size_t CompiledPlan::fusedKernelCount() const {
  return static_cast<size_t>(std::count_if(steps.begin(), steps.end(), [](const Step& s) { return s.fused; }));
}

CompiledPlan optimize(const TraceGraph& g, OptimizeOptions options) {
  const size_t n = g.nodes.size();

  // Dead-code elimination from the outputs.
  std::vector<bool> live(n, false);
  for (int o : g.outputs) live[static_cast<size_t>(o)] = true;
  for (size_t i = n; i-- > 0;) {
    if (!live[i]) continue;
    for (const auto& in : g.nodes[i].inputs) {
      if (in.kind == Operand::Kind::Node) live[static_cast<size_t>(in.value)] = true;
    }
  }

  // Constant folding: nodes computable without any placeholder.
  std::vector<std::optional<Tensor>> folded(n);
  if (options.foldConstants) {
    for (size_t i = 0; i < n; ++i) {
      if (!live[i]) continue;
      const auto& node = g.nodes[i];
      bool constant = true;
      for (const auto& in : node.inputs) {
        if (in.kind == Operand::Kind::Placeholder) constant = false;
        if (in.kind == Operand::Kind::Node && !folded[static_cast<size_t>(in.value)]) constant = false;
      }
      if (!constant) continue;
      std::vector<kernels::KernelArg> args;
      for (const auto& in : node.inputs) {
        if (in.kind == Operand::Kind::Node) args.emplace_back(*folded[static_cast<size_t>(in.value)]);
        else args.emplace_back(in.value);
      }
      folded[i] = kernels::runKernel(node.opcode, node.attrs, std::move(args));
    }
  }

  // Grouping. Every live, unfolded node starts in its own group.
  Grouping gr;
  gr.groupOf.assign(n, -1);
  for (size_t i = 0; i < n; ++i) {
    if (!live[i] || folded[i]) continue;
    int id = static_cast<int>(gr.members.size());
    gr.groupOf[i] = id;
    gr.members.push_back({static_cast<int>(i)});
    gr.deps.emplace_back();
    gr.fused.push_back(options.fuse && fusible(g.nodes[i], g));
    for (const auto& in : g.nodes[i].inputs) {
      if (in.kind == Operand::Kind::Node && gr.groupOf[static_cast<size_t>(in.value)] >= 0) {
        gr.deps.back().insert(gr.groupOf[static_cast<size_t>(in.value)]);
      }
    }
    if (!gr.fused.back()) continue;
    for (const auto& in : g.nodes[i].inputs) {
      if (in.kind != Operand::Kind::Node) continue;
      int producer = gr.groupOf[static_cast<size_t>(in.value)];
      int mine = gr.groupOf[i];
      if (producer < 0 || producer == mine || !gr.fused[static_cast<size_t>(producer)]) continue;
      const auto& pnode = g.nodes[static_cast<size_t>(*gr.members[static_cast<size_t>(producer)].begin())];
      if (pnode.shape != g.nodes[i].shape) continue;
      // Merging must not route a dependency path out of the group and back.
      if (gr.reaches(mine, producer, producer) || gr.reaches(producer, mine, mine)) continue;
      gr.merge(mine, producer);
    }
  }

  // Order groups topologically (ties by smallest member).
  std::vector<int> groupIds;
  for (size_t k = 0; k < gr.members.size(); ++k) {
    if (!gr.members[k].empty()) groupIds.push_back(static_cast<int>(k));
  }
  std::vector<int> orderedGroups;
  {
    std::set<int> done;
    std::vector<int> remaining = groupIds;
    std::sort(remaining.begin(), remaining.end(), [&](int a, int b) {
      return *gr.members[static_cast<size_t>(a)].begin() < *gr.members[static_cast<size_t>(b)].begin();
    });
    while (!remaining.empty()) {
      auto it = std::find_if(remaining.begin(), remaining.end(), [&](int k) {
        return std::all_of(gr.deps[static_cast<size_t>(k)].begin(), gr.deps[static_cast<size_t>(k)].end(),
                           [&](int d) { return done.count(d) > 0; });
      });
      if (it == remaining.end()) throw Error(ErrorKind::InvalidArgument, "fusion produced a cyclic plan");
      orderedGroups.push_back(*it);
      done.insert(*it);
      remaining.erase(it);
    }
  }

  CompiledPlan plan;
  plan.placeholderCount = g.placeholders.size();
  int nextBuffer = static_cast<int>(g.placeholders.size());
  std::vector<int> bufferOf(n, -1);

  // Which nodes are read outside their own group.
  std::vector<bool> escapes(n, false);
  for (int o : g.outputs) escapes[static_cast<size_t>(o)] = true;
  for (size_t i = 0; i < n; ++i) {
    if (!live[i] || folded[i]) continue;
    for (const auto& in : g.nodes[i].inputs) {
      if (in.kind != Operand::Kind::Node) continue;
      auto src = static_cast<size_t>(in.value);
      if (folded[src] || gr.groupOf[src] != gr.groupOf[i]) escapes[src] = true;
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if (folded[i] && escapes[i] && live[i]) {
      bufferOf[i] = nextBuffer++;
      plan.literals.emplace_back(bufferOf[i], *folded[i]);
    }
  }
  auto refOf = [&](const Operand& in) {
    CompiledPlan::Ref r;
    if (in.kind == Operand::Kind::Int) {
      r.kind = CompiledPlan::Ref::Kind::Int;
      r.value = in.value;
    } else if (in.kind == Operand::Kind::Placeholder) {
      r.value = in.value;
    } else {
      r.value = bufferOf[static_cast<size_t>(in.value)];
    }
    return r;
  };

  for (int k : orderedGroups) {
    const auto& mem = gr.members[static_cast<size_t>(k)];
    CompiledPlan::Step step;
    if (!gr.fused[static_cast<size_t>(k)]) {
      int id = *mem.begin();
      const auto& node = g.nodes[static_cast<size_t>(id)];
      step.opcode = node.opcode;
      step.attrs = node.attrs;
      for (const auto& in : node.inputs) step.inputs.push_back(refOf(in));
      bufferOf[static_cast<size_t>(id)] = nextBuffer++;
      step.output = bufferOf[static_cast<size_t>(id)];
    } else {
      step.fused = true;
      std::vector<int> ordered(mem.begin(), mem.end());
      step.shape = g.nodes[static_cast<size_t>(ordered.front())].shape;
      std::vector<int> memberIndex(n, -1);
      for (size_t m = 0; m < ordered.size(); ++m) memberIndex[static_cast<size_t>(ordered[m])] = static_cast<int>(m);
      for (int id : ordered) {
        const auto& node = g.nodes[static_cast<size_t>(id)];
        CompiledPlan::FusedOp op;
        op.code = kernels::elementwiseCode(node.opcode);
        for (const auto& in : node.inputs) {
          if (in.kind == Operand::Kind::Node && memberIndex[static_cast<size_t>(in.value)] >= 0) {
            op.args.push_back(memberIndex[static_cast<size_t>(in.value)]);
            continue;
          }
          int buffer = refOf(in).value;
          auto it = std::find(step.externals.begin(), step.externals.end(), buffer);
          int ext = static_cast<int>(it - step.externals.begin());
          if (it == step.externals.end()) step.externals.push_back(buffer);
          op.args.push_back(-1 - ext);
        }
        step.ops.push_back(std::move(op));
      }
      for (size_t m = 0; m < ordered.size(); ++m) {
        auto id = static_cast<size_t>(ordered[m]);
        if (!escapes[id]) continue;
        bufferOf[id] = nextBuffer++;
        step.results.emplace_back(static_cast<int>(m), bufferOf[id]);
      }
    }
    plan.steps.push_back(std::move(step));
  }
  for (int o : g.outputs) plan.outputs.push_back(bufferOf[static_cast<size_t>(o)]);
  plan.bufferCount = static_cast<size_t>(nextBuffer);

  // Release buffers after their last reader so memory is returned early and
  // a last reader may update its input in place.
  std::vector<int> lastUse(plan.bufferCount, -1);
  for (size_t s = 0; s < plan.steps.size(); ++s) {
    const auto& step = plan.steps[s];
    if (step.fused) {
      for (int b : step.externals) lastUse[static_cast<size_t>(b)] = static_cast<int>(s);
    } else {
      for (const auto& r : step.inputs) {
        if (r.kind == CompiledPlan::Ref::Kind::Buffer) lastUse[static_cast<size_t>(r.value)] = static_cast<int>(s);
      }
    }
  }
  for (int o : plan.outputs) lastUse[static_cast<size_t>(o)] = -1;
  for (size_t b = 0; b < plan.bufferCount; ++b) {
    if (lastUse[b] >= 0) plan.steps[static_cast<size_t>(lastUse[b])].release.push_back(static_cast<int>(b));
  }
  return plan;
}

std::vector<Tensor> CompiledPlan::run(std::vector<Tensor> placeholders) const {
  if (placeholders.size() != placeholderCount) {
    throw Error(ErrorKind::CountMismatch, "plan expects " + std::to_string(placeholderCount) + " inputs");
  }
  std::vector<Tensor> buf(bufferCount);
  for (size_t i = 0; i < placeholders.size(); ++i) buf[i] = std::move(placeholders[i]);
  placeholders.clear();
  for (const auto& [b, t] : literals) buf[static_cast<size_t>(b)] = t;

  std::vector<float> scratch;
  for (const Step& step : steps) {
    auto released = [&](int b) { return std::find(step.release.begin(), step.release.end(), b) != step.release.end(); };
    if (!step.fused) {
      std::vector<kernels::KernelArg> args;
      args.reserve(step.inputs.size());
      for (const auto& r : step.inputs) {
        if (r.kind == Ref::Kind::Int) {
          args.emplace_back(r.value);
        } else if (released(static_cast<int>(r.value)) &&
                   std::count_if(step.inputs.begin(), step.inputs.end(),
                                 [&](const Ref& o) { return o.kind == Ref::Kind::Buffer && o.value == r.value; }) == 1) {
          args.emplace_back(std::move(buf[static_cast<size_t>(r.value)]));
        } else {
          args.emplace_back(buf[static_cast<size_t>(r.value)]);
        }
      }
      buf[static_cast<size_t>(step.output)] = kernels::runKernel(step.opcode, step.attrs, std::move(args));
    } else {
      const auto total = static_cast<size_t>(step.shape.numel());
      const size_t members = step.ops.size();
      std::vector<const float*> ext(step.externals.size());
      std::vector<bool> extScalar(step.externals.size());
      for (size_t e = 0; e < step.externals.size(); ++e) {
        const Tensor& t = buf[static_cast<size_t>(step.externals[e])];
        ext[e] = t.data().data();
        extScalar[e] = t.numel() == 1 && total != 1;
      }
      std::vector<std::vector<float>> results(members);
      std::vector<float*> outBase(members, nullptr);
      for (const auto& [m, b] : step.results) {
        results[static_cast<size_t>(m)].resize(total);
        outBase[static_cast<size_t>(m)] = results[static_cast<size_t>(m)].data();
      }
      scratch.assign(members * kChunk, 0.0f);
      for (size_t start = 0; start < total; start += kChunk) {
        const size_t len = std::min(kChunk, total - start);
        for (size_t m = 0; m < members; ++m) {
          const FusedOp& op = step.ops[m];
          float* out = outBase[m] ? outBase[m] + start : scratch.data() + m * kChunk;
          const float* ptrs[3] = {nullptr, nullptr, nullptr};
          bool flags[3] = {false, false, false};
          for (size_t k = 0; k < op.args.size(); ++k) {
            const int a = op.args[k];
            if (a >= 0) {
              auto src = static_cast<size_t>(a);
              ptrs[k] = outBase[src] ? outBase[src] + start : scratch.data() + src * kChunk;
            } else {
              auto e = static_cast<size_t>(-1 - a);
              ptrs[k] = extScalar[e] ? ext[e] : ext[e] + start;
              flags[k] = extScalar[e];
            }
          }
          kernels::applyElementwise(op.code, std::span<float>(out, len),
                                    std::span<const float* const>(ptrs, op.args.size()),
                                    std::span<const bool>(flags, op.args.size()));
        }
      }
      for (const auto& [m, b] : step.results) {
        buf[static_cast<size_t>(b)] = Tensor(step.shape, std::move(results[static_cast<size_t>(m)]));
      }
    }
    for (int b : step.release) buf[static_cast<size_t>(b)] = Tensor();
  }
  std::vector<Tensor> out;
  out.reserve(outputs.size());
  for (int o : outputs) out.push_back(buf[static_cast<size_t>(o)]);
  return out;
}

struct PlanCache::Entry {
  uint64_t key = 0;
  std::string text;
  std::shared_future<std::shared_ptr<const CompiledPlan>> plan;
  std::list<std::shared_ptr<Entry>>::iterator lruPos;
};

PlanCache::Lookup PlanCache::getOrCompile(const TraceGraph& canonical, uint64_t key, const OptimizeOptions& options) {
  std::string text = canonicalText(canonical);
  std::promise<std::shared_ptr<const CompiledPlan>> promise;
  std::shared_ptr<Entry> entry;
  {
    std::unique_lock<std::mutex> lock(mu_);
    auto& bucket = entries_[key];
    for (const auto& e : bucket) {
      if (e->text == text) {
        ++hits_;
        lru_.splice(lru_.begin(), lru_, e->lruPos);
        auto fut = e->plan;
        lock.unlock();
        return {fut.get(), false};
      }
    }
    entry = std::make_shared<Entry>();
    entry->key = key;
    entry->text = std::move(text);
    entry->plan = promise.get_future().share();
    bucket.push_back(entry);
    lru_.push_front(entry);
    entry->lruPos = lru_.begin();
    ++compilations_;
    while (maxEntries_ > 0 && lru_.size() > maxEntries_) {
      auto victim = lru_.back();
      lru_.pop_back();
      auto& vb = entries_[victim->key];
      vb.erase(std::remove(vb.begin(), vb.end(), victim), vb.end());
      if (vb.empty()) entries_.erase(victim->key);
    }
  }
  try {
    auto plan = std::make_shared<const CompiledPlan>(optimize(canonical, options));
    promise.set_value(plan);
    return {plan, true};
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      auto& vb = it->second;
      vb.erase(std::remove(vb.begin(), vb.end(), entry), vb.end());
      if (vb.empty()) entries_.erase(it);
    }
    if (std::find(lru_.begin(), lru_.end(), entry) != lru_.end()) lru_.erase(entry->lruPos);
    throw;
  }
}

size_t PlanCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return lru_.size();
}

uint64_t PlanCache::compilations() const {
  std::lock_guard<std::mutex> lock(mu_);
  return compilations_;
}

uint64_t PlanCache::hits() const {
  std::lock_guard<std::mutex> lock(mu_);
  return hits_;
}

void PlanCache::clear() {
  std::lock_guard<std::mutex> lock(mu_);
  entries_.clear();
  lru_.clear();
}

}  // namespace tgrad::lazy
