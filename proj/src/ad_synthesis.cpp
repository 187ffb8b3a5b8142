#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "ad_internal.hpp"
#include "tgrad/error.hpp"

namespace tgrad::ad::detail {

using ir::BasicBlock;
using ir::BranchTarget;
using ir::Function;
using ir::FunctionBuilder;
using ir::Instruction;
using ir::NamedType;
using ir::Terminator;
using ir::Type;

DerivativeNames derivativeNames(const std::string& function, const std::vector<size_t>& wrt) {
  std::string s = wrtSuffix(wrt);
  return {function + "__vjp__" + s, function + "__pb__" + s, function + "__df__" + s};
}

std::vector<size_t> callWrt(const Instruction& call, const ActivityInfo& info) {
  std::vector<size_t> out;
  for (size_t i = 0; i < call.operands.size(); ++i) {
    if (info.isActive(call.operands[i])) out.push_back(i);
  }
  return out;
}

namespace {

struct Edge {
  size_t pred = 0;
  int side = 0;
  int64_t tag = 0;
};

const BranchTarget& targetOf(const Terminator& t, int side) { return side == 0 ? t.target : t.elseTarget; }

std::string ruleKey(const Instruction& inst) { return inst.opcode == "call" ? "@" + inst.callee : inst.opcode; }

/// Facts about the primal function shared by the three synthesized functions.
class Plan {
 public:
  explicit Plan(const SynthesisInput& in)
      : f(*in.function),
        info(*in.activity),
        registry(*in.registry),
        module(*in.module),
        wrt(in.wrt),
        names(in.names ? in.names : derivativeNames) {
    types = ir::typeEnvironment(f);
    for (const auto& [name, _] : types) used_.insert(name);
    collectDefinitions();
    collectReachable();
    collectEdges();
    collectCrossBlockValues();
    for (size_t b = 0; b < f.blocks.size(); ++b) {
      for (size_t i = 0; i < f.blocks[b].body.size(); ++i) {
        if (isDerivedCall(f.blocks[b].body[i])) {
          std::string name = fresh("crec");
          types[name] = Type::record();
          callRecords[{b, i}] = name;
        }
      }
    }
    collectCaptures();
  }

  bool active(const std::string& v) const { return info.isActive(v); }
  bool dynamic(const std::string& v) const { return !types.at(v).hasStaticShape(); }
  Type slotType(const std::string& v) const { return dynamic(v) ? Type::unrankedTensor() : types.at(v); }
  bool isDerivedCall(const Instruction& inst) const {
    return inst.opcode == "call" && active(inst.result) && !registry.contains(ruleKey(inst));
  }
  size_t fieldOffset(size_t b) const { return b == 0 ? 0 : 2; }

  std::string fresh(const std::string& prefix) {
    for (;; ++counter_) {
      std::string name = prefix + std::to_string(counter_);
      if (used_.insert(name).second) return name;
    }
  }

  const Function& f;
  const ActivityInfo& info;
  const DerivativeRegistry& registry;
  const ir::Module& module;
  std::vector<size_t> wrt;
  NameResolver names;

  std::unordered_map<std::string, Type> types;
  std::unordered_map<std::string, size_t> defBlock;
  /// Definition order, used to order state slots deterministically.
  std::vector<std::string> definitions;
  std::vector<bool> reachable;
  /// Incoming edges from reachable blocks, sorted by tag.
  std::vector<std::vector<Edge>> preds;
  /// Active values with an adjoint-carrying use outside their defining block.
  std::set<std::string> cross;
  std::vector<std::string> crossOrder;
  /// Per block: block-local active values used by the terminator.
  std::vector<std::vector<std::string>> termLocals;
  std::map<std::pair<size_t, size_t>, std::string> callRecords;
  std::vector<std::vector<std::string>> captures;

 private:
  void collectDefinitions() {
    for (const auto& p : f.params) {
      defBlock[p.name] = 0;
      definitions.push_back(p.name);
    }
    for (size_t b = 0; b < f.blocks.size(); ++b) {
      for (const auto& a : f.blocks[b].args) {
        if (defBlock.emplace(a.name, b).second) definitions.push_back(a.name);
      }
      for (const auto& inst : f.blocks[b].body) {
        defBlock[inst.result] = b;
        definitions.push_back(inst.result);
      }
    }
  }

  void collectReachable() {
    reachable.assign(f.blocks.size(), false);
    std::vector<size_t> work{0};
    reachable[0] = true;
    while (!work.empty()) {
      size_t b = work.back();
      work.pop_back();
      for (const BranchTarget* t : f.blocks[b].term.successors()) {
        size_t dest = static_cast<size_t>(f.blockIndex(t->label));
        if (!reachable[dest]) {
          reachable[dest] = true;
          work.push_back(dest);
        }
      }
    }
  }

  void collectEdges() {
    preds.resize(f.blocks.size());
    for (size_t p = 0; p < f.blocks.size(); ++p) {
      const Terminator& t = f.blocks[p].term;
      if (t.kind == Terminator::Kind::Return || !reachable[p]) continue;
      int sides = t.kind == Terminator::Kind::CondBr ? 2 : 1;
      for (int side = 0; side < sides; ++side) {
        int dest = f.blockIndex(targetOf(t, side).label);
        if (dest == 0) {
          throw Error(ErrorKind::NonDifferentiable, "@" + f.name + ": branches into the entry block are not supported");
        }
        preds[static_cast<size_t>(dest)].push_back({p, side, static_cast<int64_t>(p) * 2 + side});
      }
    }
    for (auto& e : preds) std::sort(e.begin(), e.end(), [](const Edge& a, const Edge& b) { return a.tag < b.tag; });
  }

  void collectCrossBlockValues() {
    std::unordered_map<std::string, std::set<size_t>> useBlocks;
    termLocals.resize(f.blocks.size());
    std::vector<std::vector<std::string>> termUses(f.blocks.size());
    auto termUse = [&](size_t b, const std::string& v) {
      useBlocks[v].insert(b);
      if (std::find(termUses[b].begin(), termUses[b].end(), v) == termUses[b].end()) termUses[b].push_back(v);
    };
    for (size_t b = 0; b < f.blocks.size(); ++b) {
      const BasicBlock& block = f.blocks[b];
      for (const auto& inst : block.body) {
        if (!active(inst.result)) continue;
        for (const auto& o : inst.operands) {
          if (active(o)) useBlocks[o].insert(b);
        }
      }
      if (block.term.kind == Terminator::Kind::Return) {
        if (active(block.term.value)) termUse(b, block.term.value);
        continue;
      }
      for (const BranchTarget* t : block.term.successors()) {
        const BasicBlock& dest = f.blocks[static_cast<size_t>(f.blockIndex(t->label))];
        for (size_t k = 0; k < t->args.size(); ++k) {
          if (active(dest.args[k].name) && active(t->args[k])) termUse(b, t->args[k]);
        }
      }
    }
    for (const auto& v : definitions) {
      auto it = useBlocks.find(v);
      if (it == useBlocks.end()) continue;
      for (size_t b : it->second) {
        if (b != defBlock.at(v)) {
          cross.insert(v);
          crossOrder.push_back(v);
          break;
        }
      }
    }
    for (size_t b = 0; b < f.blocks.size(); ++b) {
      for (const auto& v : termUses[b]) {
        if (defBlock.at(v) == b && !cross.count(v)) termLocals[b].push_back(v);
      }
    }
  }

  void collectCaptures() {
    captures.resize(f.blocks.size());
    for (size_t b = 0; b < f.blocks.size(); ++b) {
      auto& caps = captures[b];
      auto add = [&](const std::string& v) {
        if (std::find(caps.begin(), caps.end(), v) == caps.end()) caps.push_back(v);
      };
      const BasicBlock& block = f.blocks[b];
      for (size_t i = 0; i < block.body.size(); ++i) {
        const Instruction& inst = block.body[i];
        if (!active(inst.result)) continue;
        for (const auto& o : inst.operands) add(o);
        add(inst.result);
        if (isDerivedCall(inst)) add(callRecords.at({b, i}));
      }
      for (const auto& v : crossOrder) {
        if (defBlock.at(v) == b && dynamic(v)) add(v);
      }
      for (const auto& v : termLocals[b]) {
        if (dynamic(v)) add(v);
      }
      if (b == 0) {
        for (size_t w : wrt) {
          if (dynamic(f.params[w].name)) add(f.params[w].name);
        }
      }
      if (block.term.kind == Terminator::Kind::Return) {
        if (!active(block.term.value) && dynamic(block.term.value)) add(block.term.value);
        continue;
      }
      for (const BranchTarget* t : block.term.successors()) {
        const BasicBlock& dest = f.blocks[static_cast<size_t>(f.blockIndex(t->label))];
        for (size_t k = 0; k < t->args.size(); ++k) {
          if (active(dest.args[k].name) && !active(t->args[k]) && dynamic(t->args[k])) add(t->args[k]);
        }
      }
    }
  }

  std::unordered_set<std::string> used_;
  size_t counter_ = 0;
};

// ---------------------------------------------------------------------------

Function buildAugmented(Plan& plan, const std::string& name) {
  const Function& f = plan.f;
  Function aug;
  aug.name = name;
  aug.params = f.params;
  aug.resultType = Type::tuple({f.resultType, Type::record()});
  for (size_t b = 0; b < f.blocks.size(); ++b) {
    const BasicBlock& block = f.blocks[b];
    BasicBlock nb;
    nb.label = block.label;
    nb.args = block.args;
    std::vector<std::string> fields;
    if (b > 0) {
      fields.push_back(plan.fresh("tag"));
      fields.push_back(plan.fresh("prev"));
      nb.args.push_back({fields[0], Type::i64()});
      nb.args.push_back({fields[1], Type::record()});
    }
    for (size_t i = 0; i < block.body.size(); ++i) {
      const Instruction& inst = block.body[i];
      if (!plan.isDerivedCall(inst)) {
        nb.body.push_back(inst);
        continue;
      }
      DerivativeNames callee = plan.names(inst.callee, callWrt(inst, plan.info));
      const Function& calleeFn = plan.module.get(inst.callee);
      std::string pair = plan.fresh("aug");
      Instruction call = inst;
      call.callee = callee.augmented;
      call.result = pair;
      call.type = Type::tuple({calleeFn.resultType, Type::record()});
      nb.body.push_back(call);
      nb.body.push_back({inst.result, "tuple_get", "", {pair}, {{"index", int64_t{0}}}, inst.type});
      nb.body.push_back({plan.callRecords.at({b, i}), "tuple_get", "", {pair}, {{"index", int64_t{1}}}, Type::record()});
    }
    for (const auto& c : plan.captures[b]) fields.push_back(c);
    std::string rec = plan.fresh("rec");
    nb.body.push_back({rec, "record", "", fields, {{"block", static_cast<int64_t>(b)}}, Type::record()});
    nb.term = block.term;
    if (block.term.kind == Terminator::Kind::Return) {
      std::string out = plan.fresh("out");
      nb.body.push_back({out, "tuple", "", {block.term.value, rec}, {}, aug.resultType});
      nb.term.value = out;
    } else {
      int sides = block.term.kind == Terminator::Kind::CondBr ? 2 : 1;
      for (int side = 0; side < sides; ++side) {
        std::string tag = plan.fresh("tag");
        nb.body.push_back({tag, "const", "", {}, {{"value", static_cast<int64_t>(b) * 2 + side}}, Type::i64()});
        BranchTarget& t = side == 0 ? nb.term.target : nb.term.elseTarget;
        t.args.push_back(tag);
        t.args.push_back(rec);
      }
    }
    aug.blocks.push_back(std::move(nb));
  }
  return aug;
}

/// Emits a compare chain on an i64 `key` that jumps to one new block per
/// entry of `keys` (sorted ascending, and `key` is known to be one of them).
std::vector<std::string> dispatch(FunctionBuilder& b, const std::string& key, const std::vector<int64_t>& keys,
                                  const std::string& prefix, int& counter) {
  std::vector<std::string> targets;
  for (size_t i = 0; i < keys.size(); ++i) targets.push_back(b.addBlock(prefix + "case" + std::to_string(counter++)));
  if (keys.size() == 1) {
    b.br(targets[0]);
    return targets;
  }
  for (size_t i = 0; i + 1 < keys.size(); ++i) {
    std::string bound = b.constant(static_cast<double>(keys[i] + 1), Type::i64());
    std::string below = b.emit("lt", {key, bound});
    bool last = i + 2 == keys.size();
    std::string next = last ? targets.back() : b.addBlock(prefix + "sel" + std::to_string(counter++));
    b.condBr(below, targets[i], {}, next, {});
    if (!last) b.setInsertionBlock(next);
  }
  return targets;
}

/// Zero constants live in the entry block so they dominate every use.
class Zeros {
 public:
  Zeros(FunctionBuilder& b, const Plan& plan) : b_(b), plan_(plan) {}

  std::string of(const std::string& primal) { return ofType(plan_.slotType(primal)); }

  std::string ofType(const Type& t) {
    const bool scalar = !t.hasStaticShape();
    std::string key = scalar ? "scalar" : t.str();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    std::string here = b_.currentBlock();
    b_.setInsertionBlock("entry");
    std::string z = scalar ? b_.constant(0.0) : b_.constant(0.0, t);
    b_.setInsertionBlock(here);
    cache_[key] = z;
    return z;
  }

 private:
  FunctionBuilder& b_;
  const Plan& plan_;
  std::map<std::string, std::string> cache_;
};

std::string recordField(FunctionBuilder& b, const std::string& rec, size_t index, const Type& t) {
  return b.emit("record_get", {rec}, {{"index", static_cast<int64_t>(index)}}, t);
}

std::unordered_map<std::string, std::string> loadCaptures(FunctionBuilder& b, const Plan& plan, size_t block,
                                                          const std::string& rec) {
  std::unordered_map<std::string, std::string> val;
  const auto& caps = plan.captures[block];
  for (size_t k = 0; k < caps.size(); ++k) {
    val[caps[k]] = recordField(b, rec, plan.fieldOffset(block) + k, plan.types.at(caps[k]));
  }
  return val;
}

std::vector<std::string> mapped(const std::vector<std::string>& names,
                                const std::unordered_map<std::string, std::string>& val) {
  std::vector<std::string> out;
  for (const auto& n : names) out.push_back(val.at(n));
  return out;
}

// ---------------------------------------------------------------------------

Function buildPullback(Plan& plan, const std::string& name) {
  const Function& f = plan.f;
  std::vector<Type> gradTypes;
  for (size_t w : plan.wrt) gradTypes.push_back(*ir::tangentType(f.params[w].type));
  FunctionBuilder b(name, {{"seed", *ir::tangentType(f.resultType)}, {"rec", Type::record()}}, Type::tuple(gradTypes),
                    &plan.module);
  Zeros zeros(b, plan);
  int counter = 0;

  std::vector<std::string> labels(f.blocks.size());
  for (size_t i = 0; i < f.blocks.size(); ++i) {
    if (!plan.reachable[i]) continue;
    std::vector<NamedType> args{{"", Type::record()}};
    for (const auto& v : plan.crossOrder) args.push_back({"", plan.slotType(v)});
    for (const auto& v : plan.termLocals[i]) args.push_back({"", plan.slotType(v)});
    labels[i] = b.addBlock("pb_" + f.blocks[i].label, std::move(args));
  }
  auto crossZeros = [&] {
    std::vector<std::string> s;
    for (const auto& v : plan.crossOrder) s.push_back(zeros.of(v));
    return s;
  };

  // Entry: find the returning block from the final record.
  b.setInsertionBlock("entry");
  std::vector<int64_t> returning;
  for (size_t i = 0; i < f.blocks.size(); ++i) {
    if (plan.reachable[i] && f.blocks[i].term.kind == Terminator::Kind::Return) returning.push_back(static_cast<int64_t>(i));
  }
  std::string which = returning.size() > 1 ? b.emit("record_block", {b.param(1)}) : "";
  auto cases = dispatch(b, which, returning, "pb", counter);
  for (size_t c = 0; c < returning.size(); ++c) {
    size_t r = static_cast<size_t>(returning[c]);
    b.setInsertionBlock(cases[c]);
    const std::string& ret = f.blocks[r].term.value;
    std::vector<std::string> args{b.param(1)};
    std::vector<std::string> s = crossZeros();
    for (size_t i = 0; i < plan.crossOrder.size(); ++i) {
      if (plan.crossOrder[i] == ret) s[i] = b.param(0);
    }
    args.insert(args.end(), s.begin(), s.end());
    for (const auto& v : plan.termLocals[r]) args.push_back(v == ret ? b.param(0) : zeros.of(v));
    b.br(labels[r], args);
  }

  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    if (!plan.reachable[bi]) continue;
    const BasicBlock& block = f.blocks[bi];
    b.setInsertionBlock(labels[bi]);
    const std::string rec = b.blockArg(labels[bi], 0);
    auto val = loadCaptures(b, plan, bi, rec);
    std::unordered_map<std::string, std::string> adj;
    for (size_t i = 0; i < plan.crossOrder.size(); ++i) adj[plan.crossOrder[i]] = b.blockArg(labels[bi], 1 + i);
    for (size_t i = 0; i < plan.termLocals[bi].size(); ++i) {
      adj[plan.termLocals[bi][i]] = b.blockArg(labels[bi], 1 + plan.crossOrder.size() + i);
    }

    auto consume = [&](const std::string& v) -> std::optional<std::string> {
      auto it = adj.find(v);
      if (it == adj.end()) return std::nullopt;
      std::string g = it->second;
      if (plan.cross.count(v)) {
        if (plan.dynamic(v)) g = b.emit("broadcast_like", {g, val.at(v)});
        it->second = zeros.of(v);
      } else {
        adj.erase(it);
      }
      return g;
    };
    auto accumulate = [&](const std::string& v, const std::string& contribution) {
      auto it = adj.find(v);
      if (it == adj.end()) {
        adj[v] = contribution;
      } else {
        it->second = b.emit("add", {it->second, contribution});
      }
    };

    for (size_t i = block.body.size(); i-- > 0;) {
      const Instruction& inst = block.body[i];
      if (!plan.active(inst.result)) continue;
      std::optional<std::string> g = consume(inst.result);
      if (!g) continue;
      if (plan.isDerivedCall(inst)) {
        auto cw = callWrt(inst, plan.info);
        DerivativeNames callee = plan.names(inst.callee, cw);
        std::string grads = b.call(callee.pullback, {*g, val.at(plan.callRecords.at({bi, i}))});
        for (size_t k = 0; k < cw.size(); ++k) {
          accumulate(inst.operands[cw[k]], b.emit("tuple_get", {grads}, {{"index", static_cast<int64_t>(k)}}));
        }
        continue;
      }
      std::vector<bool> wanted;
      for (const auto& o : inst.operands) wanted.push_back(plan.active(o));
      auto sink = [&](size_t k, const VjpContext::Update& update) {
        const std::string& o = inst.operands.at(k);
        auto it = adj.find(o);
        std::optional<std::string> current;
        if (it != adj.end()) current = it->second;
        adj[o] = update(current);
      };
      VjpContext ctx(b, inst, mapped(inst.operands, val), val.at(inst.result), *g, std::move(wanted), sink);
      plan.registry.find(ruleKey(inst))->vjp(ctx);
    }

    if (bi == 0) {
      std::vector<std::string> grads;
      for (size_t w : plan.wrt) {
        const std::string& p = f.params[w].name;
        std::optional<std::string> g = plan.active(p) ? consume(p) : std::nullopt;
        if (!g) g = plan.dynamic(p) ? b.emit("zeros_like", {val.at(p)}) : zeros.of(p);
        grads.push_back(*g);
      }
      b.ret(b.emit("tuple", grads));
      continue;
    }

    std::vector<std::optional<std::string>> argAdj;
    for (const auto& a : block.args) argAdj.push_back(plan.active(a.name) ? consume(a.name) : std::nullopt);
    const std::string tag = recordField(b, rec, 0, Type::i64());
    const std::string prev = recordField(b, rec, 1, Type::record());
    std::vector<int64_t> tags;
    for (const Edge& e : plan.preds[bi]) tags.push_back(e.tag);
    auto edgeBlocks = dispatch(b, tags.size() > 1 ? tag : "", tags, "pb", counter);
    for (size_t e = 0; e < tags.size(); ++e) {
      const Edge& edge = plan.preds[bi][e];
      b.setInsertionBlock(edgeBlocks[e]);
      const BranchTarget& t = targetOf(f.blocks[edge.pred].term, edge.side);
      std::unordered_map<std::string, std::string> state;
      for (const auto& v : plan.crossOrder) state[v] = adj.at(v);
      std::unordered_map<std::string, std::string> locals;
      for (size_t k = 0; k < t.args.size(); ++k) {
        if (!argAdj[k] || !plan.active(t.args[k])) continue;
        const std::string& u = t.args[k];
        auto& slot = plan.cross.count(u) ? state : locals;
        auto it = slot.find(u);
        if (it == slot.end()) {
          slot[u] = *argAdj[k];
        } else {
          it->second = b.emit("add", {it->second, *argAdj[k]});
        }
      }
      std::vector<std::string> args{prev};
      for (const auto& v : plan.crossOrder) args.push_back(state.at(v));
      for (const auto& v : plan.termLocals[edge.pred]) {
        auto it = locals.find(v);
        args.push_back(it != locals.end() ? it->second : zeros.of(v));
      }
      b.br(labels[edge.pred], args);
    }
  }
  return b.finish();
}

// ---------------------------------------------------------------------------

Function buildDifferential(Plan& plan, const std::string& name) {
  const Function& f = plan.f;
  std::vector<NamedType> params;
  for (size_t i = 0; i < plan.wrt.size(); ++i) {
    params.push_back({"t" + std::to_string(i), *ir::tangentType(f.params[plan.wrt[i]].type)});
  }
  params.push_back({"rec", Type::record()});
  FunctionBuilder b(name, params, *ir::tangentType(f.resultType), &plan.module);
  Zeros zeros(b, plan);
  int counter = 0;

  std::set<std::string> paramNames;
  for (const auto& p : f.params) paramNames.insert(p.name);
  std::vector<std::string> state;
  for (const auto& v : plan.crossOrder) {
    if (!paramNames.count(v)) state.push_back(v);
  }

  std::vector<std::string> labels(f.blocks.size());
  std::vector<std::vector<std::string>> activeArgs(f.blocks.size());
  for (size_t i = 0; i < f.blocks.size(); ++i) {
    if (!plan.reachable[i]) continue;
    std::vector<NamedType> args{{"", Type::record()}, {"", Type::record()}};
    for (const auto& v : state) args.push_back({"", plan.slotType(v)});
    for (const auto& a : f.blocks[i].args) {
      if (i > 0 && plan.active(a.name)) {
        activeArgs[i].push_back(a.name);
        args.push_back({"", plan.slotType(a.name)});
      }
    }
    labels[i] = b.addBlock("df_" + f.blocks[i].label, std::move(args));
  }

  // Reverse the record chain so the blocks can be replayed in execution order.
  const std::string rev = b.addBlock("dfrev", {{"", Type::record()}, {"", Type::record()}});
  const std::string revNext = b.addBlock("dfrevnext");
  const std::string start = b.addBlock("dfstart", {{"", Type::record()}});
  b.setInsertionBlock("entry");
  std::string sentinel = b.emit("record", {}, {{"block", int64_t{-1}}});
  b.br(rev, {b.param(plan.wrt.size()), sentinel});

  b.setInsertionBlock(rev);
  const std::string cur = b.blockArg(rev, 0);
  std::string node = b.emit("record", {cur, b.blockArg(rev, 1)}, {{"block", int64_t{-2}}});
  std::string isEntry = b.emit("lt", {b.emit("record_block", {cur}), b.constant(1, Type::i64())});
  b.condBr(isEntry, start, {node}, revNext, {});
  b.setInsertionBlock(revNext);
  b.br(rev, {recordField(b, cur, 1, Type::record()), node});

  b.setInsertionBlock(start);
  {
    const std::string list = b.blockArg(start, 0);
    std::vector<std::string> args{recordField(b, list, 0, Type::record()), recordField(b, list, 1, Type::record())};
    for (const auto& v : state) args.push_back(zeros.of(v));
    b.br(labels[0], args);
  }

  for (size_t bi = 0; bi < f.blocks.size(); ++bi) {
    if (!plan.reachable[bi]) continue;
    const BasicBlock& block = f.blocks[bi];
    const std::string& label = labels[bi];
    b.setInsertionBlock(label);
    const std::string brec = b.blockArg(label, 0);
    const std::string next = b.blockArg(label, 1);
    auto val = loadCaptures(b, plan, bi, brec);
    std::unordered_map<std::string, std::string> tan;
    for (size_t i = 0; i < plan.wrt.size(); ++i) tan[f.params[plan.wrt[i]].name] = b.param(i);
    std::unordered_map<std::string, std::string> slots;
    for (size_t i = 0; i < state.size(); ++i) {
      slots[state[i]] = b.blockArg(label, 2 + i);
      tan[state[i]] = slots[state[i]];
    }
    for (size_t i = 0; i < activeArgs[bi].size(); ++i) {
      const std::string& a = activeArgs[bi][i];
      tan[a] = b.blockArg(label, 2 + state.size() + i);
      if (slots.count(a)) slots[a] = tan[a];
    }

    for (size_t i = 0; i < block.body.size(); ++i) {
      const Instruction& inst = block.body[i];
      if (!plan.active(inst.result)) continue;
      std::string t;
      if (plan.isDerivedCall(inst)) {
        auto cw = callWrt(inst, plan.info);
        std::vector<std::string> args;
        for (size_t k : cw) args.push_back(tan.at(inst.operands[k]));
        args.push_back(val.at(plan.callRecords.at({bi, i})));
        t = b.call(plan.names(inst.callee, cw).differential, args);
      } else {
        std::vector<std::optional<std::string>> tangents;
        for (const auto& o : inst.operands) {
          auto it = tan.find(o);
          tangents.push_back(plan.active(o) && it != tan.end() ? std::optional(it->second) : std::nullopt);
        }
        JvpContext ctx(b, inst, mapped(inst.operands, val), val.at(inst.result), std::move(tangents));
        t = plan.registry.find(ruleKey(inst))->jvp(ctx);
      }
      tan[inst.result] = t;
      if (slots.count(inst.result)) slots[inst.result] = t;
    }

    auto tangentOrZero = [&](const std::string& v) {
      if (plan.active(v)) return tan.at(v);
      return plan.dynamic(v) ? b.emit("zeros_like", {val.at(v)}) : zeros.of(v);
    };

    if (block.term.kind == Terminator::Kind::Return) {
      b.ret(tangentOrZero(block.term.value));
      continue;
    }
    const std::string succ = recordField(b, next, 0, Type::record());
    const std::string rest = recordField(b, next, 1, Type::record());
    std::vector<int64_t> tags{static_cast<int64_t>(bi) * 2};
    if (block.term.kind == Terminator::Kind::CondBr) tags.push_back(static_cast<int64_t>(bi) * 2 + 1);
    std::string tag = tags.size() > 1 ? recordField(b, succ, 0, Type::i64()) : "";
    auto edgeBlocks = dispatch(b, tag, tags, "df", counter);
    for (size_t side = 0; side < tags.size(); ++side) {
      b.setInsertionBlock(edgeBlocks[side]);
      const BranchTarget& t = targetOf(block.term, static_cast<int>(side));
      size_t dest = static_cast<size_t>(f.blockIndex(t.label));
      std::vector<std::string> args{succ, rest};
      for (const auto& v : state) args.push_back(slots.at(v));
      for (size_t k = 0; k < t.args.size(); ++k) {
        if (plan.active(f.blocks[dest].args[k].name)) args.push_back(tangentOrZero(t.args[k]));
      }
      b.br(labels[dest], args);
    }
  }
  return b.finish();
}

}  // namespace

SynthesisOutput synthesize(const SynthesisInput& in) {
  Plan plan(in);
  DerivativeNames names = plan.names(plan.f.name, plan.wrt);
  SynthesisOutput out;
  out.augmented = buildAugmented(plan, names.augmented);
  out.pullback = buildPullback(plan, names.pullback);
  out.differential = buildDifferential(plan, names.differential);
  for (size_t b = 0; b < plan.f.blocks.size(); ++b) {
    RecordLayout layout;
    layout.block = plan.f.blocks[b].label;
    layout.blockIndex = static_cast<int64_t>(b);
    layout.captures = plan.captures[b];
    for (const Edge& e : plan.preds[b]) layout.predecessors.push_back({e.tag, plan.f.blocks[e.pred].label, e.side});
    out.records.push_back(std::move(layout));
  }
  return out;
}

}  // namespace tgrad::ad::detail
