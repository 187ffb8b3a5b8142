#include "tgrad/error.hpp"
#include "tgrad/ir.hpp"

namespace tgrad::ir {

FunctionBuilder::FunctionBuilder(std::string name, std::vector<NamedType> params, Type resultType,
                                 const Module* module)
    : module_(module) {
  fn_.name = std::move(name);
  fn_.params = std::move(params);
  fn_.resultType = std::move(resultType);
  for (const auto& p : fn_.params) types_[p.name] = p.type;
  fn_.blocks.push_back(BasicBlock{"entry", fn_.params, {}, {}});
  current_ = "entry";
}

std::string FunctionBuilder::addBlock(const std::string& label, std::vector<NamedType> args) {
  if (fn_.blockIndex(label) >= 0) throw Error(ErrorKind::InvalidArgument, "duplicate block ^" + label);
  for (auto& a : args) {
    if (a.name.empty()) a.name = freshName();
    types_[a.name] = a.type;
  }
  fn_.blocks.push_back(BasicBlock{label, std::move(args), {}, {}});
  return label;
}

void FunctionBuilder::setInsertionBlock(const std::string& label) {
  if (fn_.blockIndex(label) < 0) throw Error(ErrorKind::UnresolvedReference, "no block ^" + label);
  current_ = label;
}

const std::string& FunctionBuilder::blockArg(const std::string& label, size_t i) const {
  int idx = fn_.blockIndex(label);
  if (idx < 0) throw Error(ErrorKind::UnresolvedReference, "no block ^" + label);
  return fn_.blocks[static_cast<size_t>(idx)].args.at(i).name;
}

BasicBlock& FunctionBuilder::block() { return fn_.blocks[static_cast<size_t>(fn_.blockIndex(current_))]; }

std::string FunctionBuilder::freshName() {
  while (true) {
    std::string name = std::to_string(counter_++);
    if (!types_.count(name)) return name;
  }
}

const Type& FunctionBuilder::typeOf(const std::string& value) const {
  auto it = types_.find(value);
  if (it == types_.end()) throw Error(ErrorKind::UnresolvedReference, "undefined value %" + value);
  return it->second;
}

std::string FunctionBuilder::emit(const std::string& opcode, std::vector<std::string> operands, Attributes attrs,
                                  std::optional<Type> type) {
  Instruction inst;
  inst.opcode = opcode;
  inst.operands = std::move(operands);
  inst.attrs = std::move(attrs);
  if (opcode == "call") throw Error(ErrorKind::InvalidArgument, "use FunctionBuilder::call for calls");
  std::vector<Type> opTypes;
  for (const auto& o : inst.operands) opTypes.push_back(typeOf(o));
  Type inferred = inferResultType(inst, opTypes, module_, type ? &*type : nullptr);
  inst.type = type ? *type : inferred;
  inst.result = freshName();
  types_[inst.result] = inst.type;
  block().body.push_back(inst);
  return inst.result;
}

std::string FunctionBuilder::constant(double value, Type type) {
  AttrValue v = type.kind() == Type::Kind::I64 || type.kind() == Type::Kind::Bool
                    ? AttrValue(static_cast<int64_t>(value))
                    : AttrValue(value);
  Attributes attrs{{"value", v}};
  if (type.isTensor()) attrs["shape"] = type.dims();
  return emit("const", {}, std::move(attrs), type);
}

std::string FunctionBuilder::constantTensor(std::vector<double> values, std::vector<int64_t> shape) {
  Type t = Type::tensor(shape);
  return emit("const", {}, {{"value", std::move(values)}, {"shape", std::move(shape)}}, t);
}

std::string FunctionBuilder::call(const std::string& callee, std::vector<std::string> operands,
                                  std::optional<Type> type) {
  Instruction inst;
  inst.opcode = "call";
  inst.callee = callee;
  inst.operands = std::move(operands);
  if (module_ && module_->find(callee)) {
    std::vector<Type> opTypes;
    for (const auto& o : inst.operands) opTypes.push_back(typeOf(o));
    inst.type = inferResultType(inst, opTypes, module_, nullptr);
  } else if (callee == fn_.name) {
    inst.type = fn_.resultType;
  } else if (type) {
    inst.type = *type;
  } else {
    throw Error(ErrorKind::UnresolvedReference, "unknown function @" + callee);
  }
  if (type) inst.type = *type;
  inst.result = freshName();
  types_[inst.result] = inst.type;
  block().body.push_back(inst);
  return inst.result;
}

void FunctionBuilder::br(const std::string& label, std::vector<std::string> args) {
  Terminator& t = block().term;
  t = Terminator{};
  t.kind = Terminator::Kind::Br;
  t.target = {label, std::move(args)};
}

void FunctionBuilder::condBr(const std::string& cond, const std::string& thenLabel,
                             std::vector<std::string> thenArgs, const std::string& elseLabel,
                             std::vector<std::string> elseArgs) {
  Terminator& t = block().term;
  t = Terminator{};
  t.kind = Terminator::Kind::CondBr;
  t.value = cond;
  t.target = {thenLabel, std::move(thenArgs)};
  t.elseTarget = {elseLabel, std::move(elseArgs)};
}

void FunctionBuilder::ret(const std::string& value) {
  Terminator& t = block().term;
  t = Terminator{};
  t.kind = Terminator::Kind::Return;
  t.value = value;
}

Function FunctionBuilder::finish() {
  for (const auto& b : fn_.blocks) {
    if (b.term.kind == Terminator::Kind::Return && b.term.value.empty()) {
      throw Error(ErrorKind::VerifyFailed, "@" + fn_.name + ":^" + b.label + ": block has no terminator");
    }
  }
  if (module_ && !module_->find(fn_.name)) {
    // Self-recursive calls resolve against a scratch module holding this function.
    bool selfCall = false;
    for (const auto& b : fn_.blocks) {
      for (const auto& inst : b.body) selfCall = selfCall || (inst.opcode == "call" && inst.callee == fn_.name);
    }
    if (selfCall) {
      Module scratch = *module_;
      scratch.add(fn_);
      verifyOrThrow(fn_, &scratch);
      return fn_;
    }
  }
  verifyOrThrow(fn_, module_);
  return fn_;
}

Function buildFunction(std::string name, std::vector<NamedType> params, Type resultType,
                       const std::function<void(FunctionBuilder&)>& body, const Module* module) {
  FunctionBuilder b(std::move(name), std::move(params), std::move(resultType), module);
  body(b);
  return b.finish();
}

}  // namespace tgrad::ir
