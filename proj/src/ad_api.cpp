#include <algorithm>

#include "ad_internal.hpp"
#include "tgrad/error.hpp"

namespace tgrad::ad {

std::string wrtSuffix(const std::vector<size_t>& wrt) {
  std::string s;
  for (size_t i = 0; i < wrt.size(); ++i) s += (i ? "_" : "") + std::to_string(wrt[i]);
  return s;
}

std::vector<size_t> differentiableParams(const ir::Function& f) {
  std::vector<size_t> out;
  for (size_t i = 0; i < f.params.size(); ++i) {
    if (f.params[i].type.isFloat()) out.push_back(i);
  }
  return out;
}

Differentiator::Differentiator(ir::Module module, std::shared_ptr<DerivativeRegistry> registry)
    : original_(std::move(module)),
      current_(std::make_shared<const ir::Module>(original_)),
      registry_(std::move(registry)),
      seenGeneration_(registry_->generation()) {}

std::shared_ptr<const ir::Module> Differentiator::module() const {
  std::lock_guard lock(mu_);
  return current_;
}

uint64_t Differentiator::synthesisCount() const {
  std::lock_guard lock(mu_);
  return synthesized_;
}

uint64_t Differentiator::memoHits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

void Differentiator::refreshIfStale() {
  uint64_t g = registry_->generation();
  if (g == seenGeneration_) return;
  seenGeneration_ = g;
  memo_.clear();
  current_ = std::make_shared<const ir::Module>(original_);
}

std::shared_ptr<const DifferentiableBundle> Differentiator::transform(const std::string& function,
                                                                      std::vector<size_t> wrt) {
  std::sort(wrt.begin(), wrt.end());
  wrt.erase(std::unique(wrt.begin(), wrt.end()), wrt.end());
  std::lock_guard lock(mu_);
  refreshIfStale();
  std::set<Key> inProgress;
  return transformLocked(Key{function, std::move(wrt)}, inProgress);
}

// Input modules may already hold functions with the preferred names, for
// example a re-parsed derivative dump; those get a ".k" suffix.
detail::DerivativeNames Differentiator::freshNames(const Key& key) const {
  const detail::DerivativeNames base = detail::derivativeNames(key.function, key.wrt);
  for (int k = 0;; ++k) {
    const std::string suffix = k == 0 ? "" : "." + std::to_string(k);
    detail::DerivativeNames n{base.augmented + suffix, base.pullback + suffix, base.differential + suffix};
    if (!current_->find(n.augmented) && !current_->find(n.pullback) && !current_->find(n.differential)) return n;
  }
}

std::shared_ptr<const DifferentiableBundle> Differentiator::transformLocked(const Key& key,
                                                                            std::set<Key>& inProgress) {
  if (auto it = memo_.find(key); it != memo_.end()) {
    ++hits_;
    return it->second;
  }
  const ir::Function* f = original_.find(key.function);
  if (!f) throw Error(ErrorKind::MissingFunction, "no function @" + key.function);
  if (!inProgress.insert(key).second) {
    throw Error(ErrorKind::NonDifferentiable, "@" + key.function + " is recursive; recursion is not differentiable");
  }

  auto bundle = std::make_shared<DifferentiableBundle>();
  bundle->original = key.function;
  bundle->wrt = key.wrt;
  bundle->activity = activityAnalysis(*f, key.wrt);
  bundle->diagnostics = checkDifferentiability(*f, key.wrt, bundle->activity, *registry_);
  if (hasErrors(bundle->diagnostics)) {
    std::string message = "@" + key.function + " is not differentiable";
    for (const auto& d : bundle->diagnostics) {
      if (d.severity == Severity::Error) message += "\n  " + d.str();
    }
    throw Error(ErrorKind::NonDifferentiable, message);
  }

  for (const auto& block : f->blocks) {
    for (const auto& inst : block.body) {
      if (inst.opcode != "call" || !bundle->activity.isActive(inst.result)) continue;
      if (registry_->contains("@" + inst.callee)) continue;
      auto callee = transformLocked(Key{inst.callee, detail::callWrt(inst, bundle->activity)}, inProgress);
      for (const auto& s : callee->synthesized) {
        if (std::find(bundle->synthesized.begin(), bundle->synthesized.end(), s) == bundle->synthesized.end()) {
          bundle->synthesized.push_back(s);
        }
      }
    }
  }

  detail::SynthesisInput in;
  in.function = f;
  in.wrt = key.wrt;
  in.activity = &bundle->activity;
  in.registry = registry_.get();
  in.module = current_.get();
  const detail::DerivativeNames own = freshNames(key);
  in.names = [&](const std::string& function, const std::vector<size_t>& wrt) {
    if (function == key.function && wrt == key.wrt) return own;
    const auto& callee = *memo_.at(Key{function, wrt});
    return detail::DerivativeNames{callee.vjp, callee.pullback, callee.differential};
  };
  detail::SynthesisOutput out = detail::synthesize(in);

  auto next = std::make_shared<ir::Module>(*current_);
  for (ir::Function* fn : {&out.augmented, &out.pullback, &out.differential}) {
    if (next->find(fn->name)) {
      throw Error(ErrorKind::DuplicateRegistration, "module already defines @" + fn->name);
    }
    next->add(*fn);
  }
  for (const ir::Function* fn : {&out.augmented, &out.pullback, &out.differential}) {
    ir::verifyOrThrow(next->get(fn->name), next.get());
  }
  current_ = std::move(next);

  bundle->jvp = out.augmented.name;
  bundle->vjp = out.augmented.name;
  bundle->pullback = out.pullback.name;
  bundle->differential = out.differential.name;
  bundle->records = std::move(out.records);
  bundle->synthesized.insert(bundle->synthesized.end(), {bundle->vjp, bundle->pullback, bundle->differential});
  ++synthesized_;
  inProgress.erase(key);
  memo_[key] = bundle;
  return bundle;
}

namespace {

std::vector<DiffDiagnostic> warningsOf(const DifferentiableBundle& b) {
  std::vector<DiffDiagnostic> out;
  for (const auto& d : b.diagnostics) {
    if (d.severity == Severity::Warning) out.push_back(d);
  }
  return out;
}

/// Runs the augmented primal and returns (value, record), possibly deferred.
std::pair<rt::RuntimeValue, rt::RuntimeValue> runAugmented(const ir::Module& m, const DifferentiableBundle& b,
                                                           std::vector<rt::RuntimeValue> args, rt::Device& device) {
  rt::RuntimeValue pair = rt::evaluate(m, b.vjp, std::move(args), device, {.syncResult = false});
  const rt::Tuple& t = rt::asTuple(pair);
  return {t.items.at(0), t.items.at(1)};
}

std::vector<rt::RuntimeValue> materializeEach(const rt::Tuple& t, rt::Device& device) {
  std::vector<rt::RuntimeValue> out;
  for (const auto& item : t.items) out.push_back(rt::materializeAll(item, device));
  return out;
}

Pulled pull(Differentiator& d, const DifferentiableBundle& b, std::vector<rt::RuntimeValue> args,
            const rt::RuntimeValue& seed, rt::Device& device) {
  auto m = d.module();
  const DifferentiableBundle* bundle = &b;
  auto [value, record] = runAugmented(*m, *bundle, std::move(args), device);
  rt::RuntimeValue grads = rt::evaluate(*m, bundle->pullback, {seed, std::move(record)}, device, {.syncResult = false});
  record = {};
  Pulled out;
  // Everything still deferred is computed by the first materialization.
  out.value = rt::materializeAll(value, device);
  out.cotangents = materializeEach(rt::asTuple(grads), device);
  return out;
}

}  // namespace

Pulled vjp(Differentiator& d, const std::string& function, std::vector<rt::RuntimeValue> args,
           const rt::RuntimeValue& seed, const std::vector<size_t>& wrt, rt::Device& device) {
  return pull(d, *d.transform(function, wrt), std::move(args), seed, device);
}

ValueWithGradient valueWithGradient(Differentiator& d, const std::string& function, std::vector<rt::RuntimeValue> args,
                                    const std::vector<size_t>& wrt, rt::Device& device) {
  const ir::Function& f = d.module()->get(function);
  const ir::Type& r = f.resultType;
  if (!(r.isF32() || (r.isTensor() && r.isRanked() && r.dims().empty()))) {
    throw Error(ErrorKind::NonScalarResult, "@" + function + " returns " + r.str() + ", gradient needs f32");
  }
  auto bundle = d.transform(function, wrt);
  Pulled p = pull(d, *bundle, std::move(args), Tensor::scalar(1.0f), device);
  return {std::move(p.value), std::move(p.cotangents), warningsOf(*bundle)};
}

std::vector<rt::RuntimeValue> gradient(Differentiator& d, const std::string& function,
                                       std::vector<rt::RuntimeValue> args, const std::vector<size_t>& wrt,
                                       rt::Device& device) {
  return valueWithGradient(d, function, std::move(args), wrt, device).gradient;
}

Pushed jvp(Differentiator& d, const std::string& function, std::vector<rt::RuntimeValue> args,
           std::vector<rt::RuntimeValue> tangents, const std::vector<size_t>& wrt, rt::Device& device) {
  auto bundle = d.transform(function, wrt);
  if (tangents.size() != bundle->wrt.size()) {
    throw Error(ErrorKind::CountMismatch, "jvp of @" + function + " needs " + std::to_string(bundle->wrt.size()) +
                                              " tangents, got " + std::to_string(tangents.size()));
  }
  auto m = d.module();
  auto [value, record] = runAugmented(*m, *bundle, std::move(args), device);
  tangents.push_back(std::move(record));
  rt::RuntimeValue t = rt::evaluate(*m, bundle->differential, std::move(tangents), device, {.syncResult = false});
  Pushed out;
  out.value = rt::materializeAll(value, device);
  out.tangent = rt::materializeAll(t, device);
  return out;
}

rt::RuntimeValue move(const rt::RuntimeValue& value, const rt::RuntimeValue& tangent) {
  if (const auto* v = std::get_if<Tensor>(&value)) {
    const auto* t = std::get_if<Tensor>(&tangent);
    if (!t) throw Error(ErrorKind::TypeMismatch, "tangent for a tensor must be a tensor, got " + rt::describe(tangent));
    if (v->shape() != t->shape()) {
      throw Error(ErrorKind::ShapeMismatch,
                  "tangent shape " + t->shape().str() + " does not match value shape " + v->shape().str());
    }
    Tensor out = *v;
    auto o = out.mutableData();
    auto d = t->data();
    for (size_t i = 0; i < o.size(); ++i) o[i] += d[i];
    return out;
  }
  if (std::holds_alternative<std::shared_ptr<const rt::Tuple>>(value)) {
    const rt::Tuple& v = rt::asTuple(value);
    const rt::Tuple& t = rt::asTuple(tangent);
    std::vector<rt::RuntimeValue> items;
    size_t k = 0;
    for (const auto& item : v.items) {
      const bool differentiable =
          std::holds_alternative<Tensor>(item) || std::holds_alternative<std::shared_ptr<const rt::Tuple>>(item);
      if (!differentiable) {
        items.push_back(item);
        continue;
      }
      if (k >= t.items.size()) throw Error(ErrorKind::MismatchedStructure, "tangent tuple has too few members");
      items.push_back(move(item, t.items[k++]));
    }
    if (k != t.items.size()) throw Error(ErrorKind::MismatchedStructure, "tangent tuple has too many members");
    return rt::makeTuple(std::move(items));
  }
  throw Error(ErrorKind::TypeMismatch, "cannot move " + rt::describe(value));
}

}  // namespace tgrad::ad
