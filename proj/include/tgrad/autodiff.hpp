#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "tgrad/ir.hpp"
#include "tgrad/runtime.hpp"

namespace tgrad::ad {

namespace detail {
struct DerivativeNames;
}

// ---------------------------------------------------------------------------
// Activity analysis and differentiability checking

struct ActivityInfo {
  std::set<std::string> varied;
  std::set<std::string> useful;
  std::set<std::string> active;

  bool isActive(const std::string& value) const { return active.count(value) > 0; }
};

/// Varied: forward closure from the wrt parameters. Useful: backward closure
/// from returned values. Both are fixed points over the CFG.
ActivityInfo activityAnalysis(const ir::Function& f, const std::vector<size_t>& wrt);

enum class Severity { Error, Warning };

struct DiffDiagnostic {
  Severity severity = Severity::Error;
  std::string location;
  std::string message;
  std::string str() const;
};

class DerivativeRegistry;

std::vector<DiffDiagnostic> checkDifferentiability(const ir::Function& f, const std::vector<size_t>& wrt,
                                                   const ActivityInfo& info, const DerivativeRegistry& registry);

bool hasErrors(const std::vector<DiffDiagnostic>& diags);

// ---------------------------------------------------------------------------
// Derivative rules

/// What a rule sees while emitting derivative code. Value names refer to the
/// function under construction; `operands` and `result` are the primal
/// values, already available there.
class RuleContext {
 public:
  RuleContext(ir::FunctionBuilder& b, const ir::Instruction& primal, std::vector<std::string> operands,
              std::string result)
      : builder(b), primal(primal), operands(std::move(operands)), result(std::move(result)) {}
  virtual ~RuleContext() = default;

  ir::FunctionBuilder& builder;
  const ir::Instruction& primal;
  std::vector<std::string> operands;
  std::string result;

  std::string emit(const std::string& opcode, std::vector<std::string> args, Attributes attrs = {},
                   std::optional<ir::Type> type = std::nullopt) {
    return builder.emit(opcode, std::move(args), std::move(attrs), std::move(type));
  }
  const ir::Type& typeOf(const std::string& value) const { return builder.typeOf(value); }
  /// `value` summed down to the shape of `ref` (a no-op when shapes match).
  std::string unbroadcast(const std::string& value, const std::string& ref);
  /// `value` broadcast up to the shape of `ref` (a no-op when shapes match).
  std::string broadcast(const std::string& value, const std::string& ref);
  std::string zerosLike(const std::string& ref) { return emit("zeros_like", {ref}); }
};

class VjpContext : public RuleContext {
 public:
  using Update = std::function<std::string(const std::optional<std::string>& current)>;
  using Sink = std::function<void(size_t operand, const Update& update)>;

  VjpContext(ir::FunctionBuilder& b, const ir::Instruction& primal, std::vector<std::string> operands,
             std::string result, std::string seed, std::vector<bool> wanted, Sink sink)
      : RuleContext(b, primal, std::move(operands), std::move(result)),
        seed(std::move(seed)),
        wanted_(std::move(wanted)),
        sink_(std::move(sink)) {}

  /// Adjoint of the result.
  std::string seed;

  /// Operand `i` is active and takes an adjoint.
  bool wants(size_t i) const { return i < wanted_.size() && wanted_[i]; }
  /// adjoint[i] += value.
  void contribute(size_t i, const std::string& value);
  /// Replaces adjoint[i] with update(adjoint[i]); the accumulate-in-place
  /// form used by subscript reads.
  void accumulate(size_t i, const Update& update);

 private:
  std::vector<bool> wanted_;
  Sink sink_;
};

class JvpContext : public RuleContext {
 public:
  JvpContext(ir::FunctionBuilder& b, const ir::Instruction& primal, std::vector<std::string> operands,
             std::string result, std::vector<std::optional<std::string>> tangents)
      : RuleContext(b, primal, std::move(operands), std::move(result)), tangents(std::move(tangents)) {}

  /// Operand tangents; nullopt is a zero tangent.
  std::vector<std::optional<std::string>> tangents;
};

/// Emits adjoint contributions for the operands of one instruction.
using VjpRule = std::function<void(VjpContext&)>;
/// Emits the result tangent of one instruction. At least one operand
/// tangent is present when called.
using JvpRule = std::function<std::string(JvpContext&)>;

struct DerivativeRule {
  JvpRule jvp;
  VjpRule vjp;
};

/// Rules keyed by opcode, or by `@name` for user functions. A function with
/// a registered rule is treated as a primitive: the transform does not look
/// inside it.
class DerivativeRegistry {
 public:
  DerivativeRegistry() = default;
  DerivativeRegistry(const DerivativeRegistry& other);
  /// A registry preloaded with rules for every differentiable opcode.
  static std::shared_ptr<DerivativeRegistry> withBuiltins();

  /// Throws Error(DuplicateRegistration) if `key` already has rules.
  void registerDerivative(const std::string& key, JvpRule jvp, VjpRule vjp);
  std::optional<DerivativeRule> find(const std::string& key) const;
  bool contains(const std::string& key) const;
  std::vector<std::string> keys() const;
  /// Bumped on every registration; derivative caches compare against it.
  uint64_t generation() const;

 private:
  mutable std::shared_mutex mu_;
  std::map<std::string, DerivativeRule> rules_;
  uint64_t generation_ = 0;
};

// ---------------------------------------------------------------------------
// Synthesis

/// Layout of the record one primal block produces.
struct RecordLayout {
  struct Edge {
    int64_t tag = 0;
    std::string predecessor;
    /// 0 for `br` and the true side of `cond_br`, 1 for the false side.
    int side = 0;
  };
  std::string block;
  int64_t blockIndex = 0;
  /// Captured primal values, in field order after any tag/predecessor fields.
  std::vector<std::string> captures;
  std::vector<Edge> predecessors;
};

/// The original function plus its derivative functions, all living in the
/// differentiator's module.
///   augmented:    (A...) -> (B, record)       primal value plus record
///   pullback:     (B', record) -> (A'_w...)   reverse mode, one tangent per wrt
///   differential: (A'_w..., record) -> B'     forward mode
/// The record links the per-block records of the executed path. The JVP and
/// VJP share the augmented function; `jvp` and `vjp` both name it.
struct DifferentiableBundle {
  std::string original;
  std::vector<size_t> wrt;
  std::string jvp;
  std::string vjp;
  std::string pullback;
  std::string differential;
  ActivityInfo activity;
  std::vector<DiffDiagnostic> diagnostics;
  std::vector<RecordLayout> records;
  /// Functions synthesized for this bundle and, transitively, its callees.
  std::vector<std::string> synthesized;
};

/// Owns a module and the derivative functions synthesized into it.
/// Transformations are memoized per (function, wrt); registering a new rule
/// invalidates the memo. Thread-safe; each key is synthesized at most once.
class Differentiator {
 public:
  explicit Differentiator(ir::Module module,
                          std::shared_ptr<DerivativeRegistry> registry = DerivativeRegistry::withBuiltins());

  /// Throws Error(NonDifferentiable) when the checker reports errors.
  std::shared_ptr<const DifferentiableBundle> transform(const std::string& function, std::vector<size_t> wrt);

  /// The module with every function synthesized so far.
  std::shared_ptr<const ir::Module> module() const;
  DerivativeRegistry& registry() { return *registry_; }

  uint64_t synthesisCount() const;
  uint64_t memoHits() const;

 private:
  struct Key {
    std::string function;
    std::vector<size_t> wrt;
    auto operator<=>(const Key&) const = default;
  };
  std::shared_ptr<const DifferentiableBundle> transformLocked(const Key& key, std::set<Key>& inProgress);
  void refreshIfStale();
  detail::DerivativeNames freshNames(const Key& key) const;

  mutable std::mutex mu_;
  ir::Module original_;
  std::shared_ptr<const ir::Module> current_;
  std::shared_ptr<DerivativeRegistry> registry_;
  uint64_t seenGeneration_ = 0;
  std::map<Key, std::shared_ptr<const DifferentiableBundle>> memo_;
  uint64_t synthesized_ = 0;
  uint64_t hits_ = 0;
};

/// Name suffix for a wrt set, e.g. "0_2".
std::string wrtSuffix(const std::vector<size_t>& wrt);
/// All parameter indices of `f` with a tangent type.
std::vector<size_t> differentiableParams(const ir::Function& f);

// ---------------------------------------------------------------------------
// Differential operators

struct ValueWithGradient {
  rt::RuntimeValue value;
  /// One tangent per wrt parameter, in ascending parameter order.
  std::vector<rt::RuntimeValue> gradient;
  std::vector<DiffDiagnostic> warnings;
};

struct Pulled {
  rt::RuntimeValue value;
  std::vector<rt::RuntimeValue> cotangents;
};

struct Pushed {
  rt::RuntimeValue value;
  rt::RuntimeValue tangent;
};

/// Requires `function` to return f32; seeds the pullback with 1.
/// Throws Error(NonScalarResult) otherwise.
ValueWithGradient valueWithGradient(Differentiator& d, const std::string& function, std::vector<rt::RuntimeValue> args,
                                    const std::vector<size_t>& wrt, rt::Device& device);
std::vector<rt::RuntimeValue> gradient(Differentiator& d, const std::string& function,
                                       std::vector<rt::RuntimeValue> args, const std::vector<size_t>& wrt,
                                       rt::Device& device);
/// Reverse mode with an arbitrary seed of the result's tangent type.
Pulled vjp(Differentiator& d, const std::string& function, std::vector<rt::RuntimeValue> args,
           const rt::RuntimeValue& seed, const std::vector<size_t>& wrt, rt::Device& device);
/// Forward mode with one tangent per wrt parameter.
Pushed jvp(Differentiator& d, const std::string& function, std::vector<rt::RuntimeValue> args,
           std::vector<rt::RuntimeValue> tangents, const std::vector<size_t>& wrt, rt::Device& device);

/// value + tangent: elementwise for tensors, memberwise for tuples.
rt::RuntimeValue move(const rt::RuntimeValue& value, const rt::RuntimeValue& tangent);

}  // namespace tgrad::ad
