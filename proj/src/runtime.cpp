#include "tgrad/runtime.hpp"

#include <unordered_map>

#include "tgrad/error.hpp"
#include "tgrad/kernels.hpp"

namespace tgrad::rt {

RuntimeValue makeTuple(std::vector<RuntimeValue> items) {
  return std::make_shared<const Tuple>(Tuple{std::move(items)});
}

bool isTensorValue(const RuntimeValue& v) {
  return std::holds_alternative<Tensor>(v) || std::holds_alternative<DeferredRef>(v);
}

const Tuple& asTuple(const RuntimeValue& v) {
  if (auto* t = std::get_if<std::shared_ptr<const Tuple>>(&v)) return **t;
  throw Error(ErrorKind::TypeMismatch, "expected a tuple, got " + describe(v));
}

const Record& asRecord(const RuntimeValue& v) {
  if (auto* r = std::get_if<std::shared_ptr<const Record>>(&v)) return **r;
  throw Error(ErrorKind::MalformedRecord, "expected a record, got " + describe(v));
}

std::string describe(const RuntimeValue& v) {
  switch (v.index()) {
    case 0: return std::get<Tensor>(v).str();
    case 1: return "deferred" + std::get<DeferredRef>(v)->shape().str();
    case 2: return "i64 " + std::to_string(std::get<int64_t>(v));
    case 3: return std::get<bool>(v) ? "true" : "false";
    case 4: return "tuple of " + std::to_string(std::get<4>(v)->items.size());
    default: return "record for block " + std::to_string(std::get<5>(v)->block);
  }
}

RuntimeValue EagerDevice::dispatch(const std::string& opcode, const Attributes& attrs,
                                   std::vector<RuntimeValue> operands) {
  std::vector<kernels::KernelArg> args;
  args.reserve(operands.size());
  for (auto& v : operands) {
    if (auto* t = std::get_if<Tensor>(&v)) {
      args.emplace_back(std::move(*t));
    } else if (auto* i = std::get_if<int64_t>(&v)) {
      args.emplace_back(*i);
    } else {
      throw Error(ErrorKind::TypeMismatch, opcode + ": eager device cannot take " + describe(v));
    }
  }
  operands.clear();
  ++stats_.opsDispatched;
  Tensor out = kernels::runKernel(opcode, attrs, std::move(args));
  if (opcode != "const") ++stats_.kernelsExecuted;
  return out;
}

Tensor EagerDevice::materialize(const RuntimeValue& v) {
  if (auto* t = std::get_if<Tensor>(&v)) return *t;
  throw Error(ErrorKind::TypeMismatch, "eager device cannot materialize " + describe(v));
}

bool matchesType(const RuntimeValue& v, const ir::Type& t) {
  using K = ir::Type::Kind;
  switch (t.kind()) {
    case K::I64: return std::holds_alternative<int64_t>(v);
    case K::Bool: return std::holds_alternative<bool>(v) || isTensorValue(v);
    case K::Record: return std::holds_alternative<std::shared_ptr<const Record>>(v);
    case K::F32:
    case K::Tensor: {
      const Shape* shape = nullptr;
      if (auto* x = std::get_if<Tensor>(&v)) shape = &x->shape();
      else if (auto* d = std::get_if<DeferredRef>(&v)) shape = &(*d)->shape();
      else return false;
      std::vector<int64_t> dims = shape->dims();
      return ir::compatible(t, ir::Type::tensor(dims));
    }
    case K::Tuple: {
      auto* tup = std::get_if<std::shared_ptr<const Tuple>>(&v);
      if (!tup || (*tup)->items.size() != t.elements().size()) return false;
      for (size_t i = 0; i < t.elements().size(); ++i) {
        if (!matchesType((*tup)->items[i], t.elements()[i])) return false;
      }
      return true;
    }
  }
  return false;
}

RuntimeValue materializeAll(const RuntimeValue& v, Device& device) {
  if (std::holds_alternative<DeferredRef>(v)) return device.materialize(v);
  if (auto* tup = std::get_if<std::shared_ptr<const Tuple>>(&v)) {
    std::vector<RuntimeValue> items;
    for (const auto& item : (*tup)->items) items.push_back(materializeAll(item, device));
    return makeTuple(std::move(items));
  }
  return v;
}

namespace {

/// Slot-indexed form of a function, built once per interpreter.
struct Prepared {
  struct Inst {
    const ir::Instruction* source;
    std::vector<int> operands;
    int result;
    /// Operand 0 is used only here and defined in this block, so it may be
    /// moved out of its slot (lets in-place accumulation see a unique buffer).
    bool consumeFirst = false;
  };
  struct Target {
    int block = -1;
    std::vector<int> args;
  };
  struct Block {
    std::vector<int> args;
    std::vector<Inst> body;
    ir::Terminator::Kind kind;
    int value = -1;
    Target target, elseTarget;
  };
  std::vector<Block> blocks;
  std::vector<int> params;
  size_t slotCount = 0;
};

std::shared_ptr<Prepared> prepare(const ir::Function& f) {
  auto p = std::make_shared<Prepared>();
  std::unordered_map<std::string, int> slots;
  std::unordered_map<std::string, size_t> defBlock;
  std::unordered_map<std::string, int> useCount;
  auto slot = [&](const std::string& name) {
    auto [it, inserted] = slots.emplace(name, static_cast<int>(slots.size()));
    return it->second;
  };
  for (const auto& prm : f.params) slot(prm.name);
  for (size_t b = 0; b < f.blocks.size(); ++b) {
    for (const auto& a : f.blocks[b].args) {
      slot(a.name);
      defBlock[a.name] = b;
    }
    for (const auto& inst : f.blocks[b].body) {
      slot(inst.result);
      defBlock[inst.result] = b;
      for (const auto& o : inst.operands) ++useCount[o];
    }
    const auto& t = f.blocks[b].term;
    if (t.kind != ir::Terminator::Kind::Br) ++useCount[t.value];
    for (const auto* tgt : t.successors()) {
      for (const auto& a : tgt->args) ++useCount[a];
    }
  }
  auto lookup = [&](const std::string& name) {
    auto it = slots.find(name);
    if (it == slots.end()) throw Error(ErrorKind::UnresolvedReference, "@" + f.name + ": undefined %" + name);
    return it->second;
  };
  for (const auto& prm : f.params) p->params.push_back(lookup(prm.name));
  for (size_t b = 0; b < f.blocks.size(); ++b) {
    const auto& src = f.blocks[b];
    Prepared::Block blk;
    for (const auto& a : src.args) blk.args.push_back(lookup(a.name));
    for (const auto& inst : src.body) {
      Prepared::Inst pi{&inst, {}, lookup(inst.result)};
      for (const auto& o : inst.operands) pi.operands.push_back(lookup(o));
      if (inst.opcode == "subscript_accum" && !inst.operands.empty()) {
        const auto& first = inst.operands[0];
        pi.consumeFirst = useCount[first] == 1 && defBlock[first] == b;
      }
      blk.body.push_back(std::move(pi));
    }
    blk.kind = src.term.kind;
    if (blk.kind != ir::Terminator::Kind::Br) blk.value = lookup(src.term.value);
    auto resolve = [&](const ir::BranchTarget& t) {
      Prepared::Target out;
      out.block = f.blockIndex(t.label);
      if (out.block < 0) throw Error(ErrorKind::UnresolvedReference, "@" + f.name + ": no block ^" + t.label);
      for (const auto& a : t.args) out.args.push_back(lookup(a));
      return out;
    };
    if (blk.kind != ir::Terminator::Kind::Return) blk.target = resolve(src.term.target);
    if (blk.kind == ir::Terminator::Kind::CondBr) blk.elseTarget = resolve(src.term.elseTarget);
    p->blocks.push_back(std::move(blk));
  }
  p->slotCount = slots.size();
  return p;
}

class Interpreter {
 public:
  Interpreter(const ir::Module& m, Device& device) : module_(m), device_(device) {}

  RuntimeValue call(const ir::Function& f, std::vector<RuntimeValue> args) {
    if (args.size() != f.params.size()) {
      throw Error(ErrorKind::TypeMismatch, "@" + f.name + " takes " + std::to_string(f.params.size()) +
                                               " arguments, got " + std::to_string(args.size()));
    }
    for (size_t i = 0; i < args.size(); ++i) {
      if (!matchesType(args[i], f.params[i].type)) {
        throw Error(ErrorKind::TypeMismatch, "@" + f.name + " argument " + std::to_string(i) + " expects " +
                                                 f.params[i].type.str() + ", got " + describe(args[i]));
      }
    }
    const Prepared& p = prepared(f);
    std::vector<RuntimeValue> slots(p.slotCount);
    for (size_t i = 0; i < args.size(); ++i) slots[static_cast<size_t>(p.params[i])] = std::move(args[i]);

    size_t current = 0;
    while (true) {
      const Prepared::Block& blk = p.blocks[current];
      for (const auto& inst : blk.body) {
        slots[static_cast<size_t>(inst.result)] = execute(inst, slots);
      }
      if (blk.kind == ir::Terminator::Kind::Return) {
        return std::move(slots[static_cast<size_t>(blk.value)]);
      }
      const Prepared::Target* target = &blk.target;
      if (blk.kind == ir::Terminator::Kind::CondBr) {
        if (!truth(slots[static_cast<size_t>(blk.value)])) target = &blk.elseTarget;
      }
      // Read all arguments before writing any: a block may pass its own
      // arguments to itself in permuted order.
      std::vector<RuntimeValue> passed;
      passed.reserve(target->args.size());
      for (int a : target->args) passed.push_back(slots[static_cast<size_t>(a)]);
      const Prepared::Block& dest = p.blocks[static_cast<size_t>(target->block)];
      for (size_t i = 0; i < passed.size(); ++i) slots[static_cast<size_t>(dest.args[i])] = std::move(passed[i]);
      current = static_cast<size_t>(target->block);
    }
  }

 private:
  const Prepared& prepared(const ir::Function& f) {
    auto it = cache_.find(&f);
    if (it != cache_.end()) return *it->second;
    return *cache_.emplace(&f, prepare(f)).first->second;
  }

  bool truth(const RuntimeValue& v) {
    if (auto* b = std::get_if<bool>(&v)) return *b;
    if (isTensorValue(v)) return device_.materialize(v).item() != 0.0f;
    throw Error(ErrorKind::TypeMismatch, "branch condition is " + describe(v));
  }

  RuntimeValue execute(const Prepared::Inst& pi, std::vector<RuntimeValue>& slots) {
    const ir::Instruction& inst = *pi.source;
    const std::string& op = inst.opcode;
    auto arg = [&](size_t i) -> const RuntimeValue& { return slots[static_cast<size_t>(pi.operands[i])]; };
    auto gather = [&]() {
      std::vector<RuntimeValue> out;
      out.reserve(pi.operands.size());
      for (size_t i = 0; i < pi.operands.size(); ++i) {
        if (i == 0 && pi.consumeFirst) out.push_back(std::move(slots[static_cast<size_t>(pi.operands[0])]));
        else out.push_back(arg(i));
      }
      return out;
    };

    if (op == "call") return call(module_.get(inst.callee), gather());
    if (op == "tuple") return makeTuple(gather());
    if (op == "tuple_get") return asTuple(arg(0)).items.at(static_cast<size_t>(attrInt(inst.attrs, "index")));
    if (op == "record") {
      return std::make_shared<const Record>(Record{attrInt(inst.attrs, "block"), gather()});
    }
    if (op == "record_get") {
      const Record& r = asRecord(arg(0));
      auto index = static_cast<size_t>(attrInt(inst.attrs, "index"));
      if (index >= r.fields.size()) {
        throw Error(ErrorKind::MalformedRecord, "record for block " + std::to_string(r.block) + " has no field " +
                                                    std::to_string(index));
      }
      return r.fields[index];
    }
    if (op == "record_block") return asRecord(arg(0)).block;
    if (op == "const" && (inst.type.kind() == ir::Type::Kind::I64 || inst.type.kind() == ir::Type::Kind::Bool)) {
      int64_t v = attrInt(inst.attrs, "value");
      if (inst.type.kind() == ir::Type::Kind::Bool) return v != 0;
      return v;
    }
    if (!pi.operands.empty() && std::holds_alternative<int64_t>(arg(0)) &&
        (pi.operands.size() < 2 || std::holds_alternative<int64_t>(arg(1)))) {
      int64_t a = std::get<int64_t>(arg(0));
      if (op == "neg") return -a;
      int64_t b = pi.operands.size() > 1 ? std::get<int64_t>(arg(1)) : 0;
      if (op == "add") return a + b;
      if (op == "sub") return a - b;
      if (op == "mul") return a * b;
      if (op == "lt") return a < b;
      if (op == "gt") return a > b;
    }
    if (op == "select") {
      const RuntimeValue& cond = arg(0);
      if (auto* b = std::get_if<bool>(&cond)) return *b ? arg(1) : arg(2);
      if (isTensorValue(arg(1)) && isTensorValue(arg(2))) {
        return device_.dispatch(op, inst.attrs, gather());
      }
      return truth(cond) ? arg(1) : arg(2);
    }
    return device_.dispatch(op, inst.attrs, gather());
  }

  const ir::Module& module_;
  Device& device_;
  std::unordered_map<const ir::Function*, std::shared_ptr<Prepared>> cache_;
};

}  // namespace

RuntimeValue evaluate(const ir::Module& m, std::string_view function, std::vector<RuntimeValue> args,
                      Device& device, EvalOptions options) {
  const ir::Function& f = m.get(function);
  RuntimeValue result;
  {
    Interpreter interp(m, device);
    result = interp.call(f, std::move(args));
  }
  if (!options.syncResult) return result;
  device.sync();
  return materializeAll(result, device);
}

std::pair<RuntimeValue, DeviceStats> evaluateWithCounters(const ir::Module& m, std::string_view function,
                                                          std::vector<RuntimeValue> args, Device& device) {
  device.resetStats();
  RuntimeValue v = evaluate(m, function, std::move(args), device);
  return {std::move(v), device.stats()};
}

}  // namespace tgrad::rt
