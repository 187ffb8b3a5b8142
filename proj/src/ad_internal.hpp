#pragma once

#include <functional>

#include "tgrad/autodiff.hpp"

namespace tgrad::ad::detail {

struct DerivativeNames {
  std::string augmented;
  std::string pullback;
  std::string differential;
};

/// Preferred names, e.g. f__vjp__0_2.
DerivativeNames derivativeNames(const std::string& function, const std::vector<size_t>& wrt);
using NameResolver = std::function<DerivativeNames(const std::string&, const std::vector<size_t>&)>;

struct SynthesisInput {
  const ir::Function* function = nullptr;
  std::vector<size_t> wrt;
  const ActivityInfo* activity = nullptr;
  const DerivativeRegistry* registry = nullptr;
  /// Contains every callee's derivative functions.
  const ir::Module* module = nullptr;
  /// Names for this function's derivatives and for those of its callees.
  NameResolver names;
};

struct SynthesisOutput {
  ir::Function augmented;
  ir::Function pullback;
  ir::Function differential;
  std::vector<RecordLayout> records;
};

/// Wrt indices for an active call: its active operands.
std::vector<size_t> callWrt(const ir::Instruction& call, const ActivityInfo& info);

SynthesisOutput synthesize(const SynthesisInput& in);

}  // namespace tgrad::ad::detail
