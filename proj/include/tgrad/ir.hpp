#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tgrad/attributes.hpp"

namespace tgrad::ir {

/// Static type of an SSA value. Tensor extents of -1 are unknown (printed
/// `?`); a tensor without dims is unranked (`tensor<*xf32>`). Records are
/// opaque pullback-record payloads produced by derivative code.
class Type {
 public:
  enum class Kind { F32, I64, Bool, Tensor, Tuple, Record };

  Type() = default;
  static Type f32() { return Type(Kind::F32); }
  static Type i64() { return Type(Kind::I64); }
  static Type boolean() { return Type(Kind::Bool); }
  static Type record() { return Type(Kind::Record); }
  static Type tensor(std::vector<int64_t> dims);
  static Type unrankedTensor() { return Type(Kind::Tensor); }
  static Type tuple(std::vector<Type> elements);

  Kind kind() const noexcept { return kind_; }
  bool isF32() const noexcept { return kind_ == Kind::F32; }
  bool isTensor() const noexcept { return kind_ == Kind::Tensor; }
  /// f32 or tensor: values carried as tensors at run time.
  bool isFloat() const noexcept { return kind_ == Kind::F32 || kind_ == Kind::Tensor; }
  bool isRanked() const noexcept { return dims_.has_value(); }
  const std::vector<int64_t>& dims() const { return *dims_; }
  bool hasStaticShape() const;
  const std::vector<Type>& elements() const noexcept { return elements_; }

  std::string str() const;
  friend bool operator==(const Type&, const Type&) = default;

 private:
  explicit Type(Kind k) : kind_(k) {}
  Kind kind_ = Kind::F32;
  std::optional<std::vector<int64_t>> dims_;
  std::vector<Type> elements_;
};

/// True when a value of type `actual` may flow where `expected` is
/// declared: unknown extents and unranked tensors match any tensor, and f32
/// matches a rank-0 tensor.
bool compatible(const Type& expected, const Type& actual);

/// Tangent type, or nullopt for non-differentiable types (i64, bool, record).
std::optional<Type> tangentType(const Type& t);

struct Instruction {
  std::string result;
  std::string opcode;
  /// Target function for `call`.
  std::string callee;
  std::vector<std::string> operands;
  Attributes attrs;
  Type type;

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct BranchTarget {
  std::string label;
  std::vector<std::string> args;
  friend bool operator==(const BranchTarget&, const BranchTarget&) = default;
};

struct Terminator {
  enum class Kind { Br, CondBr, Return };
  Kind kind = Kind::Return;
  /// Return value or branch condition.
  std::string value;
  BranchTarget target;
  BranchTarget elseTarget;

  std::vector<const BranchTarget*> successors() const;
  friend bool operator==(const Terminator&, const Terminator&) = default;
};

struct NamedType {
  std::string name;
  Type type;
  friend bool operator==(const NamedType&, const NamedType&) = default;
};

struct BasicBlock {
  std::string label;
  std::vector<NamedType> args;
  std::vector<Instruction> body;
  Terminator term;
  friend bool operator==(const BasicBlock&, const BasicBlock&) = default;
};

struct Function {
  std::string name;
  std::vector<NamedType> params;
  Type resultType;
  std::vector<BasicBlock> blocks;

  const BasicBlock& entry() const { return blocks.front(); }
  /// Index of the block with this label, or -1.
  int blockIndex(std::string_view label) const;
  size_t instructionCount() const;
  friend bool operator==(const Function&, const Function&) = default;
};

/// Functions in insertion order. Stored behind shared pointers so modules
/// copy cheaply and function addresses stay stable.
class Module {
 public:
  void add(Function f);
  const Function* find(std::string_view name) const;
  const Function& get(std::string_view name) const;
  std::shared_ptr<const Function> share(std::string_view name) const;
  const std::vector<std::shared_ptr<const Function>>& functions() const noexcept { return functions_; }
  bool empty() const noexcept { return functions_.empty(); }
  size_t size() const noexcept { return functions_.size(); }

  friend bool operator==(const Module& a, const Module& b);

 private:
  std::vector<std::shared_ptr<const Function>> functions_;
  std::unordered_map<std::string, size_t> index_;
};

/// Accepted opcodes: the primal set, derivative-support ops emitted by the
/// differentiator, and `call`.
bool isKnownOpcode(std::string_view opcode);
bool isPrimalOpcode(std::string_view opcode);

/// Result type of an instruction given its operand types. `annotated` is the
/// written type; opcodes whose type is not determined by their operands
/// (const, record_get) take it from there. Throws Error on signature
/// violations.
Type inferResultType(const Instruction& inst, const std::vector<Type>& operandTypes,
                     const Module* module, const Type* annotated);

struct Diagnostic {
  std::string location;
  std::string message;
  std::string str() const { return location + ": " + message; }
};

std::vector<Diagnostic> verify(const Function& f, const Module* module = nullptr);
std::vector<Diagnostic> verify(const Module& m);
/// Throws Error(VerifyFailed) listing every diagnostic.
void verifyOrThrow(const Function& f, const Module* module = nullptr);

/// Value name -> type for params, block args and instruction results.
std::unordered_map<std::string, Type> typeEnvironment(const Function& f);

Module parse(std::string_view text);
std::string print(const Module& m);
std::string print(const Function& f);

/// Structured construction with automatic SSA naming (%0, %1, ...).
/// Value handles are plain names without the sigil.
class FunctionBuilder {
 public:
  FunctionBuilder(std::string name, std::vector<NamedType> params, Type resultType,
                  const Module* module = nullptr);

  const std::string& param(size_t i) const { return fn_.params.at(i).name; }
  /// Creates a block and returns its label. The first block is created by
  /// the constructor as `entry`.
  std::string addBlock(const std::string& label, std::vector<NamedType> args = {});
  void setInsertionBlock(const std::string& label);
  const std::string& currentBlock() const { return current_; }
  const std::string& blockArg(const std::string& label, size_t i) const;

  std::string emit(const std::string& opcode, std::vector<std::string> operands, Attributes attrs = {},
                   std::optional<Type> type = std::nullopt);
  std::string constant(double value, Type type = Type::f32());
  std::string constantTensor(std::vector<double> values, std::vector<int64_t> shape);
  std::string call(const std::string& callee, std::vector<std::string> operands,
                   std::optional<Type> type = std::nullopt);

  void br(const std::string& label, std::vector<std::string> args = {});
  void condBr(const std::string& cond, const std::string& thenLabel, std::vector<std::string> thenArgs,
              const std::string& elseLabel, std::vector<std::string> elseArgs);
  void ret(const std::string& value);

  const Type& typeOf(const std::string& value) const;
  std::string freshName();

  /// Verifies and returns the function; throws Error(VerifyFailed).
  Function finish();

 private:
  BasicBlock& block();

  Function fn_;
  const Module* module_;
  std::string current_;
  std::unordered_map<std::string, Type> types_;
  size_t counter_ = 0;
};

Function buildFunction(std::string name, std::vector<NamedType> params, Type resultType,
                       const std::function<void(FunctionBuilder&)>& body, const Module* module = nullptr);

}  // namespace tgrad::ir
