#include "tgrad/ir.hpp"

#include <sstream>

#include "tgrad/error.hpp"

namespace tgrad::ir {

Type Type::tensor(std::vector<int64_t> dims) {
  for (int64_t d : dims) {
    if (d < -1) throw Error(ErrorKind::TypeMismatch, "negative tensor extent in type");
  }
  Type t(Kind::Tensor);
  t.dims_ = std::move(dims);
  return t;
}

Type Type::tuple(std::vector<Type> elements) {
  Type t(Kind::Tuple);
  t.elements_ = std::move(elements);
  return t;
}

bool Type::hasStaticShape() const {
  if (kind_ == Kind::F32) return true;
  if (kind_ != Kind::Tensor || !dims_) return false;
  for (int64_t d : *dims_) {
    if (d < 0) return false;
  }
  return true;
}

std::string Type::str() const {
  switch (kind_) {
    case Kind::F32: return "f32";
    case Kind::I64: return "i64";
    case Kind::Bool: return "bool";
    case Kind::Record: return "record";
    case Kind::Tensor: {
      if (!dims_) return "tensor<*xf32>";
      std::string s = "tensor<";
      for (int64_t d : *dims_) s += (d < 0 ? std::string("?") : std::to_string(d)) + "x";
      return s + "f32>";
    }
    case Kind::Tuple: {
      std::string s = "(";
      for (size_t i = 0; i < elements_.size(); ++i) {
        if (i) s += ", ";
        s += elements_[i].str();
      }
      return s + ")";
    }
  }
  return "?";
}

bool compatible(const Type& expected, const Type& actual) {
  using K = Type::Kind;
  auto scalarLike = [](const Type& t) {
    return t.kind() == K::F32 || (t.kind() == K::Tensor && (!t.isRanked() || t.dims().empty()));
  };
  if (expected.kind() == K::F32 || actual.kind() == K::F32) {
    return scalarLike(expected) && scalarLike(actual);
  }
  if (expected.kind() != actual.kind()) return false;
  if (expected.kind() == K::Tensor) {
    if (!expected.isRanked() || !actual.isRanked()) return true;
    const auto& a = expected.dims();
    const auto& b = actual.dims();
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i] && a[i] != -1 && b[i] != -1) return false;
    }
    return true;
  }
  if (expected.kind() == K::Tuple) {
    if (expected.elements().size() != actual.elements().size()) return false;
    for (size_t i = 0; i < expected.elements().size(); ++i) {
      if (!compatible(expected.elements()[i], actual.elements()[i])) return false;
    }
  }
  return true;
}

std::optional<Type> tangentType(const Type& t) {
  switch (t.kind()) {
    case Type::Kind::F32:
    case Type::Kind::Tensor: return t;
    case Type::Kind::Tuple: {
      std::vector<Type> members;
      for (const Type& e : t.elements()) {
        if (auto tan = tangentType(e)) members.push_back(*tan);
      }
      return Type::tuple(std::move(members));
    }
    default: return std::nullopt;
  }
}

std::vector<const BranchTarget*> Terminator::successors() const {
  switch (kind) {
    case Kind::Br: return {&target};
    case Kind::CondBr: return {&target, &elseTarget};
    case Kind::Return: return {};
  }
  return {};
}

int Function::blockIndex(std::string_view label) const {
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].label == label) return static_cast<int>(i);
  }
  return -1;
}

size_t Function::instructionCount() const {
  size_t n = 0;
  for (const auto& b : blocks) n += b.body.size();
  return n;
}

void Module::add(Function f) {
  if (index_.count(f.name)) {
    throw Error(ErrorKind::InvalidArgument, "duplicate function @" + f.name);
  }
  index_[f.name] = functions_.size();
  functions_.push_back(std::make_shared<const Function>(std::move(f)));
}

const Function* Module::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : functions_[it->second].get();
}

const Function& Module::get(std::string_view name) const {
  const Function* f = find(name);
  if (!f) throw Error(ErrorKind::MissingFunction, "no function @" + std::string(name));
  return *f;
}

std::shared_ptr<const Function> Module::share(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error(ErrorKind::MissingFunction, "no function @" + std::string(name));
  return functions_[it->second];
}

bool operator==(const Module& a, const Module& b) {
  if (a.functions_.size() != b.functions_.size()) return false;
  for (size_t i = 0; i < a.functions_.size(); ++i) {
    if (!(*a.functions_[i] == *b.functions_[i])) return false;
  }
  return true;
}

namespace {

void printArgs(std::ostream& os, const std::vector<std::string>& args) {
  for (size_t i = 0; i < args.size(); ++i) os << (i ? ", %" : "%") << args[i];
}

void printTarget(std::ostream& os, const BranchTarget& t) {
  os << "^" << t.label << "(";
  printArgs(os, t.args);
  os << ")";
}

void printNamed(std::ostream& os, const std::vector<NamedType>& vs) {
  for (size_t i = 0; i < vs.size(); ++i) os << (i ? ", %" : "%") << vs[i].name << ": " << vs[i].type.str();
}

void printFunction(std::ostream& os, const Function& f) {
  os << "func @" << f.name << "(";
  printNamed(os, f.params);
  os << ") -> " << f.resultType.str() << " {\n";
  for (const BasicBlock& b : f.blocks) {
    os << "^" << b.label << "(";
    printNamed(os, b.args);
    os << "):\n";
    for (const Instruction& inst : b.body) {
      os << "  %" << inst.result << " = " << inst.opcode;
      if (inst.opcode == "call") os << " @" << inst.callee;
      if (!inst.operands.empty()) {
        os << " ";
        printArgs(os, inst.operands);
      }
      if (!inst.attrs.empty()) {
        os << " {";
        bool first = true;
        for (const auto& [key, value] : inst.attrs) {
          os << (first ? "" : ", ") << key << " = " << formatAttrValue(value);
          first = false;
        }
        os << "}";
      }
      os << " : " << inst.type.str() << "\n";
    }
    switch (b.term.kind) {
      case Terminator::Kind::Return: os << "  return %" << b.term.value << "\n"; break;
      case Terminator::Kind::Br:
        os << "  br ";
        printTarget(os, b.term.target);
        os << "\n";
        break;
      case Terminator::Kind::CondBr:
        os << "  cond_br %" << b.term.value << ", ";
        printTarget(os, b.term.target);
        os << ", ";
        printTarget(os, b.term.elseTarget);
        os << "\n";
        break;
    }
  }
  os << "}\n";
}

}  // namespace

std::string print(const Function& f) {
  std::ostringstream os;
  printFunction(os, f);
  return os.str();
}

std::string print(const Module& m) {
  std::ostringstream os;
  bool first = true;
  for (const auto& f : m.functions()) {
    if (!first) os << "\n";
    printFunction(os, *f);
    first = false;
  }
  return os.str();
}

}  // namespace tgrad::ir
