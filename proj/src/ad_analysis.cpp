#include <algorithm>

#include "tgrad/autodiff.hpp"
#include "tgrad/error.hpp"

namespace tgrad::ad {

using ir::Function;
using ir::Type;

ActivityInfo activityAnalysis(const Function& f, const std::vector<size_t>& wrt) {
  auto types = ir::typeEnvironment(f);
  auto isFloat = [&](const std::string& v) {
    auto it = types.find(v);
    return it != types.end() && it->second.isFloat();
  };

  ActivityInfo info;
  for (size_t w : wrt) {
    if (w < f.params.size() && f.params[w].type.isFloat()) info.varied.insert(f.params[w].name);
  }
  for (bool changed = true; changed;) {
    changed = false;
    auto mark = [&](std::set<std::string>& set, const std::string& v) {
      if (set.insert(v).second) changed = true;
    };
    for (const auto& b : f.blocks) {
      for (const auto& inst : b.body) {
        if (!inst.type.isFloat() || info.varied.count(inst.result)) continue;
        for (const auto& o : inst.operands) {
          if (info.varied.count(o)) {
            mark(info.varied, inst.result);
            break;
          }
        }
      }
      for (const ir::BranchTarget* t : b.term.successors()) {
        int dest = f.blockIndex(t->label);
        if (dest < 0) continue;
        const auto& args = f.blocks[static_cast<size_t>(dest)].args;
        for (size_t k = 0; k < t->args.size() && k < args.size(); ++k) {
          if (info.varied.count(t->args[k]) && args[k].type.isFloat()) mark(info.varied, args[k].name);
        }
      }
    }
  }

  for (const auto& b : f.blocks) {
    if (b.term.kind == ir::Terminator::Kind::Return && isFloat(b.term.value)) info.useful.insert(b.term.value);
  }
  for (bool changed = true; changed;) {
    changed = false;
    auto mark = [&](const std::string& v) {
      if (isFloat(v) && info.useful.insert(v).second) changed = true;
    };
    for (auto b = f.blocks.rbegin(); b != f.blocks.rend(); ++b) {
      for (const ir::BranchTarget* t : b->term.successors()) {
        int dest = f.blockIndex(t->label);
        if (dest < 0) continue;
        const auto& args = f.blocks[static_cast<size_t>(dest)].args;
        for (size_t k = 0; k < t->args.size() && k < args.size(); ++k) {
          if (info.useful.count(args[k].name)) mark(t->args[k]);
        }
      }
      for (auto inst = b->body.rbegin(); inst != b->body.rend(); ++inst) {
        if (!info.useful.count(inst->result)) continue;
        for (const auto& o : inst->operands) mark(o);
      }
    }
  }

  std::set_intersection(info.varied.begin(), info.varied.end(), info.useful.begin(), info.useful.end(),
                        std::inserter(info.active, info.active.end()));
  return info;
}

std::string DiffDiagnostic::str() const {
  return std::string(severity == Severity::Error ? "error" : "warning") + ": " + location + ": " + message;
}

bool hasErrors(const std::vector<DiffDiagnostic>& diags) {
  return std::any_of(diags.begin(), diags.end(), [](const DiffDiagnostic& d) { return d.severity == Severity::Error; });
}

std::vector<DiffDiagnostic> checkDifferentiability(const Function& f, const std::vector<size_t>& wrt,
                                                   const ActivityInfo& info, const DerivativeRegistry& registry) {
  std::vector<DiffDiagnostic> out;
  const std::string fn = "@" + f.name;
  for (size_t w : wrt) {
    if (w >= f.params.size()) {
      throw Error(ErrorKind::InvalidArgument,
                  fn + " has " + std::to_string(f.params.size()) + " parameters, wrt index " + std::to_string(w));
    }
    if (!f.params[w].type.isFloat()) {
      out.push_back({Severity::Error, fn + " %" + f.params[w].name,
                     "parameter of type " + f.params[w].type.str() + " is not differentiable"});
    }
  }
  if (!f.resultType.isFloat()) {
    out.push_back({Severity::Error, fn, "result type " + f.resultType.str() + " is not differentiable"});
  }
  for (const auto& b : f.blocks) {
    const std::string where = fn + " ^" + b.label;
    for (const auto& inst : b.body) {
      if (info.isActive(inst.result)) {
        if (inst.opcode == "call") continue;
        if (!registry.contains(inst.opcode)) {
          out.push_back({Severity::Error, where + " %" + inst.result,
                         "no derivative registered for active '" + inst.opcode + "'"});
        }
        continue;
      }
      if (inst.type.isFloat() || inst.opcode == "lt" || inst.opcode == "gt") continue;
      for (const auto& o : inst.operands) {
        if (info.isActive(o)) {
          out.push_back({Severity::Error, where + " %" + inst.result,
                         "active value %" + o + " flows into non-differentiable " + inst.type.str()});
          break;
        }
      }
    }
    if (b.term.kind == ir::Terminator::Kind::Return && !info.varied.count(b.term.value)) {
      out.push_back({Severity::Warning, where + " return",
                     "returned value does not depend on the differentiable arguments"});
    }
  }
  return out;
}

std::string RuleContext::unbroadcast(const std::string& value, const std::string& ref) {
  const Type& a = typeOf(value);
  const Type& b = typeOf(ref);
  if (a == b && a.hasStaticShape()) return value;
  return emit("sum_to", {value, ref});
}

std::string RuleContext::broadcast(const std::string& value, const std::string& ref) {
  const Type& a = typeOf(value);
  const Type& b = typeOf(ref);
  if (a == b && a.hasStaticShape()) return value;
  return emit("broadcast_like", {value, ref});
}

void VjpContext::contribute(size_t i, const std::string& value) {
  sink_(i, [&](const std::optional<std::string>& current) {
    return current ? emit("add", {*current, value}) : value;
  });
}

void VjpContext::accumulate(size_t i, const Update& update) { sink_(i, update); }

DerivativeRegistry::DerivativeRegistry(const DerivativeRegistry& other) {
  std::shared_lock lock(other.mu_);
  rules_ = other.rules_;
  generation_ = other.generation_;
}

void DerivativeRegistry::registerDerivative(const std::string& key, JvpRule jvp, VjpRule vjp) {
  std::unique_lock lock(mu_);
  if (rules_.count(key)) throw Error(ErrorKind::DuplicateRegistration, "derivative for '" + key + "' already registered");
  rules_[key] = DerivativeRule{std::move(jvp), std::move(vjp)};
  ++generation_;
}

std::optional<DerivativeRule> DerivativeRegistry::find(const std::string& key) const {
  std::shared_lock lock(mu_);
  auto it = rules_.find(key);
  if (it == rules_.end()) return std::nullopt;
  return it->second;
}

bool DerivativeRegistry::contains(const std::string& key) const {
  std::shared_lock lock(mu_);
  return rules_.count(key) > 0;
}

std::vector<std::string> DerivativeRegistry::keys() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, _] : rules_) out.push_back(k);
  return out;
}

uint64_t DerivativeRegistry::generation() const {
  std::shared_lock lock(mu_);
  return generation_;
}

}  // namespace tgrad::ad
