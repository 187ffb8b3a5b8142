#include <algorithm>
#include <unordered_set>

#include "tgrad/error.hpp"
#include "tgrad/ir.hpp"
#include "tgrad/kernels.hpp"

namespace tgrad::ir {

namespace {

const std::unordered_set<std::string_view>& primalOpcodes() {
  static const std::unordered_set<std::string_view> ops = {
      "const",       "add",        "sub",         "mul",          "div",           "neg",
      "relu",        "exp",        "log",         "matmul",       "conv2d",        "avgpool2d",
      "reshape",     "transpose2d", "reduce_sum", "reduce_mean",  "softmax_xent",  "subscript_get",
      "subscript_set", "lt",       "gt",          "select",       "call"};
  return ops;
}

const std::unordered_set<std::string_view>& supportOpcodes() {
  static const std::unordered_set<std::string_view> ops = {
      "tuple",           "tuple_get",         "record",           "record_get",
      "record_block",    "broadcast_like",    "zeros_like",       "sum_to",
      "reshape_like",    "relu_grad",         "reduce_sum_grad",  "reduce_mean_grad",
      "conv2d_input_grad", "conv2d_filter_grad", "avgpool2d_grad", "softmax_xent_grad",
      "subscript_accum"};
  return ops;
}

[[noreturn]] void bad(const Instruction& inst, const std::string& message) {
  throw Error(ErrorKind::TypeMismatch, inst.opcode + ": " + message);
}

void arity(const Instruction& inst, const std::vector<Type>& ops, size_t n) {
  if (ops.size() != n) {
    bad(inst, "expects " + std::to_string(n) + " operands, got " + std::to_string(ops.size()));
  }
}

void needFloat(const Instruction& inst, const Type& t, size_t i) {
  if (!t.isFloat()) bad(inst, "operand " + std::to_string(i) + " must be f32 or tensor, got " + t.str());
}

void needTensor(const Instruction& inst, const Type& t, size_t i) {
  if (!t.isTensor()) bad(inst, "operand " + std::to_string(i) + " must be a tensor, got " + t.str());
}

/// Dims of a float-typed value; nullopt when unranked.
std::optional<std::vector<int64_t>> dimsOf(const Type& t) {
  if (t.isF32()) return std::vector<int64_t>{};
  if (t.isTensor() && t.isRanked()) return t.dims();
  return std::nullopt;
}

bool allKnown(const std::vector<int64_t>& d) {
  return std::none_of(d.begin(), d.end(), [](int64_t x) { return x < 0; });
}

Type fromDims(std::optional<std::vector<int64_t>> dims, bool scalarAsF32) {
  if (!dims) return Type::unrankedTensor();
  if (dims->empty() && scalarAsF32) return Type::f32();
  return Type::tensor(std::move(*dims));
}

std::optional<std::vector<int64_t>> broadcastDims(const Instruction& inst,
                                                  const std::optional<std::vector<int64_t>>& a,
                                                  const std::optional<std::vector<int64_t>>& b) {
  if (!a || !b) return std::nullopt;
  const size_t rank = std::max(a->size(), b->size());
  std::vector<int64_t> out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a->size() ? 1 : (*a)[i - (rank - a->size())];
    int64_t db = i < rank - b->size() ? 1 : (*b)[i - (rank - b->size())];
    if (da == db) out[i] = da;
    else if (da == 1) out[i] = db;
    else if (db == 1) out[i] = da;
    else if (da == -1) out[i] = db;
    else if (db == -1) out[i] = da;
    else bad(inst, "shapes are not broadcast-compatible");
  }
  return out;
}

/// Kernel shape inference with an unknown leading batch extent tolerated:
/// the batch is pinned to 1 for the computation and restored afterwards.
std::optional<std::vector<int64_t>> kernelDims(const Instruction& inst,
                                               const std::vector<std::optional<std::vector<int64_t>>>& dims,
                                               bool batchPassthrough) {
  std::vector<kernels::ArgShape> shapes;
  bool unknownBatch = false;
  for (const auto& d : dims) {
    if (!d) return std::nullopt;
    std::vector<int64_t> v = *d;
    if (batchPassthrough && &d == &dims.front() && !v.empty() && v[0] == -1) {
      unknownBatch = true;
      v[0] = 1;
    }
    if (!allKnown(v)) return std::nullopt;
    shapes.emplace_back(Shape(v));
  }
  try {
    Shape out = kernels::inferShape(inst.opcode, inst.attrs, shapes);
    std::vector<int64_t> result = out.dims();
    if (unknownBatch && !result.empty()) result[0] = -1;
    return result;
  } catch (const Error& e) {
    bad(inst, e.what());
  }
}

Type inferConst(const Instruction& inst, const Type* annotated) {
  if (!inst.attrs.count("value")) bad(inst, "missing value attribute");
  const AttrValue& v = inst.attrs.at("value");
  const bool isInt = std::holds_alternative<int64_t>(v);
  const bool isScalar = isInt || std::holds_alternative<double>(v);
  if (annotated && (annotated->kind() == Type::Kind::I64 || annotated->kind() == Type::Kind::Bool)) {
    if (!isInt) bad(inst, annotated->str() + " constant needs an integer value");
    return *annotated;
  }
  Shape shape;
  try {
    shape = kernels::inferShape("const", inst.attrs, {});
  } catch (const Error& e) {
    bad(inst, e.what());
  }
  if (!isScalar) {
    auto values = attrNumbers(inst.attrs, "value");
    if (static_cast<int64_t>(values.size()) != shape.numel()) bad(inst, "payload does not match shape");
  }
  if (shape.rank() == 0 && (!annotated || annotated->isF32())) return Type::f32();
  return Type::tensor(shape.dims());
}

}  // namespace

bool isPrimalOpcode(std::string_view opcode) { return primalOpcodes().count(opcode) > 0; }

bool isKnownOpcode(std::string_view opcode) {
  return primalOpcodes().count(opcode) > 0 || supportOpcodes().count(opcode) > 0;
}

Type inferResultType(const Instruction& inst, const std::vector<Type>& ops, const Module* module,
                     const Type* annotated) {
  const std::string& op = inst.opcode;
  if (!isKnownOpcode(op)) throw Error(ErrorKind::UnknownOpcode, "unknown opcode '" + op + "'");

  if (op == "const") {
    if (!ops.empty()) bad(inst, "takes no operands");
    return inferConst(inst, annotated);
  }
  if (op == "add" || op == "sub" || op == "mul" || op == "div") {
    arity(inst, ops, 2);
    if (ops[0].kind() == Type::Kind::I64 && ops[1].kind() == Type::Kind::I64 && op != "div") return Type::i64();
    needFloat(inst, ops[0], 0);
    needFloat(inst, ops[1], 1);
    if (ops[0].isF32() && ops[1].isF32()) return Type::f32();
    return fromDims(broadcastDims(inst, dimsOf(ops[0]), dimsOf(ops[1])), false);
  }
  if (op == "neg" || op == "relu" || op == "exp" || op == "log") {
    arity(inst, ops, 1);
    if (op == "neg" && ops[0].kind() == Type::Kind::I64) return Type::i64();
    needFloat(inst, ops[0], 0);
    return ops[0];
  }
  if (op == "relu_grad") {
    arity(inst, ops, 2);
    needFloat(inst, ops[0], 0);
    needFloat(inst, ops[1], 1);
    if (ops[0].isF32() && ops[1].isF32()) return Type::f32();
    return fromDims(broadcastDims(inst, dimsOf(ops[0]), dimsOf(ops[1])), false);
  }
  if (op == "lt" || op == "gt") {
    arity(inst, ops, 2);
    bool ints = ops[0].kind() == Type::Kind::I64 && ops[1].kind() == Type::Kind::I64;
    auto scalarFloat = [](const Type& t) {
      return t.isF32() || (t.isTensor() && (!t.isRanked() || t.dims().empty()));
    };
    if (!ints && !(scalarFloat(ops[0]) && scalarFloat(ops[1]))) bad(inst, "compares two f32 or two i64 values");
    return Type::boolean();
  }
  if (op == "select") {
    arity(inst, ops, 3);
    if (ops[0].kind() != Type::Kind::Bool) bad(inst, "condition must be bool, got " + ops[0].str());
    if (!compatible(ops[1], ops[2])) bad(inst, "branches have different types " + ops[1].str() + " and " + ops[2].str());
    return ops[1];
  }
  if (op == "matmul") {
    arity(inst, ops, 2);
    needTensor(inst, ops[0], 0);
    needTensor(inst, ops[1], 1);
    auto a = dimsOf(ops[0]);
    auto b = dimsOf(ops[1]);
    if (a && a->size() != 2) bad(inst, "operand 0 must be rank 2");
    if (b && b->size() != 2) bad(inst, "operand 1 must be rank 2");
    if (a && b && (*a)[1] >= 0 && (*b)[0] >= 0 && (*a)[1] != (*b)[0]) bad(inst, "inner extents differ");
    return Type::tensor({a ? (*a)[0] : -1, b ? (*b)[1] : -1});
  }
  if (op == "conv2d") {
    arity(inst, ops, 2);
    needTensor(inst, ops[0], 0);
    needTensor(inst, ops[1], 1);
    auto out = kernelDims(inst, {dimsOf(ops[0]), dimsOf(ops[1])}, true);
    if (!out) {
      auto f = dimsOf(ops[1]);
      return Type::tensor({-1, -1, -1, f && f->size() == 4 ? (*f)[3] : -1});
    }
    return Type::tensor(*out);
  }
  if (op == "avgpool2d") {
    arity(inst, ops, 1);
    needTensor(inst, ops[0], 0);
    auto out = kernelDims(inst, {dimsOf(ops[0])}, true);
    return out ? Type::tensor(*out) : Type::tensor({-1, -1, -1, -1});
  }
  if (op == "reshape") {
    arity(inst, ops, 1);
    needFloat(inst, ops[0], 0);
    auto target = attrInts(inst.attrs, "shape", {});
    auto in = dimsOf(ops[0]);
    if (in && allKnown(*in)) {
      try {
        return Type::tensor(kernels::reshapeTarget(Shape(*in).numel(), target).dims());
      } catch (const Error& e) {
        bad(inst, e.what());
      }
    }
    return Type::tensor(target);
  }
  if (op == "transpose2d") {
    arity(inst, ops, 1);
    needTensor(inst, ops[0], 0);
    auto in = dimsOf(ops[0]);
    if (!in) return Type::tensor({-1, -1});
    if (in->size() != 2) bad(inst, "operand must be rank 2");
    return Type::tensor({(*in)[1], (*in)[0]});
  }
  if (op == "reduce_sum" || op == "reduce_mean") {
    arity(inst, ops, 1);
    needFloat(inst, ops[0], 0);
    auto axes = attrInts(inst.attrs, "axes", {});
    auto in = dimsOf(ops[0]);
    if (!in) return axes.empty() ? Type::f32() : Type::unrankedTensor();
    std::vector<int64_t> norm;
    try {
      norm = kernels::normalizeAxes(axes, in->size());
    } catch (const Error& e) {
      bad(inst, e.what());
    }
    std::vector<int64_t> out;
    for (size_t i = 0; i < in->size(); ++i) {
      if (!std::binary_search(norm.begin(), norm.end(), static_cast<int64_t>(i))) out.push_back((*in)[i]);
    }
    return fromDims(out, true);
  }
  if (op == "softmax_xent") {
    arity(inst, ops, 2);
    needTensor(inst, ops[0], 0);
    needTensor(inst, ops[1], 1);
    auto l = dimsOf(ops[0]);
    auto y = dimsOf(ops[1]);
    if (l && l->size() != 2) bad(inst, "logits must be rank 2");
    if (y && y->size() != 1) bad(inst, "labels must be rank 1");
    if (l && y && (*l)[0] >= 0 && (*y)[0] >= 0 && (*l)[0] != (*y)[0]) bad(inst, "batch extents differ");
    return Type::f32();
  }
  if (op == "subscript_get") {
    arity(inst, ops, 2);
    needTensor(inst, ops[0], 0);
    if (ops[1].kind() != Type::Kind::I64) bad(inst, "index must be i64");
    return Type::f32();
  }
  if (op == "subscript_set") {
    arity(inst, ops, 3);
    needTensor(inst, ops[0], 0);
    if (ops[1].kind() != Type::Kind::I64) bad(inst, "index must be i64");
    if (!compatible(Type::f32(), ops[2])) bad(inst, "stored value must be f32");
    return ops[0];
  }
  if (op == "call") {
    if (!module) throw Error(ErrorKind::UnresolvedReference, "call @" + inst.callee + " outside a module");
    const Function* callee = module->find(inst.callee);
    if (!callee) throw Error(ErrorKind::UnresolvedReference, "unknown function @" + inst.callee);
    arity(inst, ops, callee->params.size());
    for (size_t i = 0; i < ops.size(); ++i) {
      if (!compatible(callee->params[i].type, ops[i])) {
        bad(inst, "argument " + std::to_string(i) + " of @" + inst.callee + " expects " +
                      callee->params[i].type.str() + ", got " + ops[i].str());
      }
    }
    return callee->resultType;
  }
  if (op == "tuple") return Type::tuple(ops);
  if (op == "tuple_get") {
    arity(inst, ops, 1);
    if (ops[0].kind() != Type::Kind::Tuple) bad(inst, "operand must be a tuple");
    int64_t index = attrInt(inst.attrs, "index");
    if (index < 0 || index >= static_cast<int64_t>(ops[0].elements().size())) bad(inst, "index out of range");
    return ops[0].elements()[static_cast<size_t>(index)];
  }
  if (op == "record") {
    attrInt(inst.attrs, "block");
    return Type::record();
  }
  if (op == "record_get") {
    arity(inst, ops, 1);
    if (ops[0].kind() != Type::Kind::Record) bad(inst, "operand must be a record");
    attrInt(inst.attrs, "index");
    if (!annotated) bad(inst, "needs an explicit result type");
    return *annotated;
  }
  if (op == "record_block") {
    arity(inst, ops, 1);
    if (ops[0].kind() != Type::Kind::Record) bad(inst, "operand must be a record");
    return Type::i64();
  }
  if (op == "broadcast_like" || op == "sum_to" || op == "reshape_like") {
    arity(inst, ops, 2);
    needFloat(inst, ops[0], 0);
    needFloat(inst, ops[1], 1);
    return ops[1];
  }
  if (op == "zeros_like") {
    arity(inst, ops, 1);
    needFloat(inst, ops[0], 0);
    return ops[0];
  }
  if (op == "reduce_sum_grad" || op == "reduce_mean_grad" || op == "avgpool2d_grad") {
    arity(inst, ops, 2);
    needFloat(inst, ops[0], 0);
    needFloat(inst, ops[1], 1);
    return ops[1];
  }
  if (op == "conv2d_input_grad" || op == "conv2d_filter_grad") {
    arity(inst, ops, 3);
    for (size_t i = 0; i < 3; ++i) needTensor(inst, ops[i], i);
    return ops[2];
  }
  if (op == "softmax_xent_grad") {
    arity(inst, ops, 3);
    needTensor(inst, ops[0], 0);
    needTensor(inst, ops[1], 1);
    needFloat(inst, ops[2], 2);
    return ops[0];
  }
  if (op == "subscript_accum") {
    arity(inst, ops, 4);
    needFloat(inst, ops[0], 0);
    needTensor(inst, ops[1], 1);
    if (ops[2].kind() != Type::Kind::I64) bad(inst, "index must be i64");
    needFloat(inst, ops[3], 3);
    return ops[1];
  }
  throw Error(ErrorKind::UnknownOpcode, "unknown opcode '" + op + "'");
}

std::unordered_map<std::string, Type> typeEnvironment(const Function& f) {
  std::unordered_map<std::string, Type> env;
  for (const auto& p : f.params) env[p.name] = p.type;
  for (const auto& b : f.blocks) {
    for (const auto& a : b.args) env[a.name] = a.type;
    for (const auto& inst : b.body) env[inst.result] = inst.type;
  }
  return env;
}

std::vector<Diagnostic> verify(const Function& f, const Module* module) {
  std::vector<Diagnostic> diags;
  auto report = [&](const std::string& where, const std::string& message) {
    diags.push_back({"@" + f.name + (where.empty() ? "" : ":" + where), message});
  };
  if (f.blocks.empty()) {
    report("", "function has no blocks");
    return diags;
  }

  const size_t nb = f.blocks.size();
  std::unordered_map<std::string, size_t> labels;
  for (size_t i = 0; i < nb; ++i) {
    if (!labels.emplace(f.blocks[i].label, i).second) report("^" + f.blocks[i].label, "duplicate block label");
  }

  const BasicBlock& entry = f.blocks.front();
  if (entry.args != f.params) report("^" + entry.label, "entry block arguments must equal the parameters");

  // Definition sites: block index and position (-1 for block arguments).
  struct Def {
    size_t block;
    int position;
    Type type;
  };
  std::unordered_map<std::string, Def> defs;
  auto define = [&](const std::string& name, size_t block, int position, const Type& type,
                    const std::string& where) {
    if (!defs.emplace(name, Def{block, position, type}).second) {
      report(where, "value %" + name + " is assigned more than once");
    }
  };
  for (size_t b = 0; b < nb; ++b) {
    const BasicBlock& blk = f.blocks[b];
    for (const auto& a : blk.args) define(a.name, b, -1, a.type, "^" + blk.label);
    for (size_t i = 0; i < blk.body.size(); ++i) {
      define(blk.body[i].result, b, static_cast<int>(i), blk.body[i].type, "^" + blk.label);
    }
  }

  // Successor lists; unknown labels are reported and skipped.
  std::vector<std::vector<size_t>> succ(nb), pred(nb);
  for (size_t b = 0; b < nb; ++b) {
    for (const BranchTarget* t : f.blocks[b].term.successors()) {
      auto it = labels.find(t->label);
      if (it == labels.end()) {
        report("^" + f.blocks[b].label, "branch to undefined block ^" + t->label);
        continue;
      }
      succ[b].push_back(it->second);
      pred[it->second].push_back(b);
    }
  }
  if (!pred[0].empty()) report("^" + entry.label, "entry block must not have predecessors");

  // Iterative dominator sets; unreachable blocks dominate nothing.
  std::vector<std::vector<bool>> dom(nb, std::vector<bool>(nb, true));
  dom[0] = std::vector<bool>(nb, false);
  dom[0][0] = true;
  for (bool changed = true; changed;) {
    changed = false;
    for (size_t b = 1; b < nb; ++b) {
      std::vector<bool> next(nb, true);
      if (pred[b].empty()) next = std::vector<bool>(nb, false);
      for (size_t p : pred[b]) {
        for (size_t k = 0; k < nb; ++k) next[k] = next[k] && dom[p][k];
      }
      next[b] = true;
      if (next != dom[b]) {
        dom[b] = std::move(next);
        changed = true;
      }
    }
  }

  auto checkUse = [&](const std::string& name, size_t block, int position, const std::string& where) -> const Type* {
    auto it = defs.find(name);
    if (it == defs.end()) {
      report(where, "use of undefined value %" + name);
      return nullptr;
    }
    const Def& d = it->second;
    bool ok = d.block == block ? d.position < position : dom[block][d.block];
    if (!ok) report(where, "use of %" + name + " is not dominated by its definition");
    return &d.type;
  };

  for (size_t b = 0; b < nb; ++b) {
    const BasicBlock& blk = f.blocks[b];
    for (size_t i = 0; i < blk.body.size(); ++i) {
      const Instruction& inst = blk.body[i];
      const std::string where = "^" + blk.label + ":%" + inst.result;
      std::vector<Type> opTypes;
      bool complete = true;
      for (const auto& o : inst.operands) {
        const Type* t = checkUse(o, b, static_cast<int>(i), where);
        if (t) opTypes.push_back(*t);
        else complete = false;
      }
      if (!isKnownOpcode(inst.opcode)) {
        report(where, "unknown opcode '" + inst.opcode + "'");
        continue;
      }
      if (!complete) continue;
      try {
        Type inferred = inferResultType(inst, opTypes, module, &inst.type);
        if (!compatible(inst.type, inferred)) {
          report(where, "declared type " + inst.type.str() + " but " + inst.opcode + " produces " + inferred.str());
        }
      } catch (const Error& e) {
        report(where, e.what());
      }
    }

    const Terminator& term = blk.term;
    const std::string where = "^" + blk.label + ":terminator";
    const int termPos = static_cast<int>(blk.body.size());
    if (term.kind == Terminator::Kind::Return) {
      const Type* t = checkUse(term.value, b, termPos, where);
      if (t && !compatible(f.resultType, *t)) {
        report(where, "returns " + t->str() + " from a function declared " + f.resultType.str());
      }
      continue;
    }
    if (term.kind == Terminator::Kind::CondBr) {
      const Type* t = checkUse(term.value, b, termPos, where);
      if (t && t->kind() != Type::Kind::Bool) report(where, "cond_br condition must be bool, got " + t->str());
    }
    for (const BranchTarget* target : term.successors()) {
      auto it = labels.find(target->label);
      if (it == labels.end()) continue;
      const BasicBlock& dest = f.blocks[it->second];
      if (dest.args.size() != target->args.size()) {
        report(where, "branch to ^" + dest.label + " passes " + std::to_string(target->args.size()) +
                          " arguments, block takes " + std::to_string(dest.args.size()));
        continue;
      }
      for (size_t k = 0; k < target->args.size(); ++k) {
        const Type* t = checkUse(target->args[k], b, termPos, where);
        if (t && !compatible(dest.args[k].type, *t)) {
          report(where, "argument " + std::to_string(k) + " to ^" + dest.label + " has type " + t->str() +
                            ", expected " + dest.args[k].type.str());
        }
      }
    }
  }
  return diags;
}

std::vector<Diagnostic> verify(const Module& m) {
  std::vector<Diagnostic> all;
  for (const auto& f : m.functions()) {
    auto d = verify(*f, &m);
    all.insert(all.end(), d.begin(), d.end());
  }
  return all;
}

void verifyOrThrow(const Function& f, const Module* module) {
  auto diags = verify(f, module);
  if (diags.empty()) return;
  std::string message;
  for (const auto& d : diags) message += (message.empty() ? "" : "; ") + d.str();
  throw Error(ErrorKind::VerifyFailed, message);
}

}  // namespace tgrad::ir
