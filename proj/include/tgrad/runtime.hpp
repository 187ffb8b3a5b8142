#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "tgrad/attributes.hpp"
#include "tgrad/ir.hpp"
#include "tgrad/tensor.hpp"

namespace tgrad::rt {

/// A tensor owned by a device that has not necessarily been computed yet.
class DeferredTensor {
 public:
  virtual ~DeferredTensor() = default;
  virtual const Shape& shape() const = 0;
};
using DeferredRef = std::shared_ptr<DeferredTensor>;

struct Tuple;
struct Record;

/// Interpreter value. f32 scalars travel as rank-0 tensors so scalar
/// arithmetic goes through the device like any other tensor op.
using RuntimeValue = std::variant<Tensor, DeferredRef, int64_t, bool, std::shared_ptr<const Tuple>,
                                  std::shared_ptr<const Record>>;

struct Tuple {
  std::vector<RuntimeValue> items;
};

/// Pullback record payload: the block that produced it and its fields.
struct Record {
  int64_t block = 0;
  std::vector<RuntimeValue> fields;
};

RuntimeValue makeTuple(std::vector<RuntimeValue> items);
bool isTensorValue(const RuntimeValue& v);
const Tuple& asTuple(const RuntimeValue& v);
const Record& asRecord(const RuntimeValue& v);
std::string describe(const RuntimeValue& v);

struct DeviceStats {
  uint64_t opsDispatched = 0;
  uint64_t kernelsExecuted = 0;
  uint64_t compilations = 0;
  uint64_t cacheHits = 0;
};

/// Execution backend for tensor opcodes.
class Device {
 public:
  virtual ~Device() = default;
  virtual std::string name() const = 0;
  /// Operands are tensor values (Tensor or DeferredRef) or i64 scalars.
  /// Returns a Tensor or a DeferredRef.
  virtual RuntimeValue dispatch(const std::string& opcode, const Attributes& attrs,
                                std::vector<RuntimeValue> operands) = 0;
  /// Concrete value of a tensor-valued runtime value.
  virtual Tensor materialize(const RuntimeValue& v) = 0;
  /// Completes all outstanding work.
  virtual void sync() = 0;
  virtual DeviceStats stats() const = 0;
  virtual void resetStats() = 0;
};

/// Runs each opcode immediately.
class EagerDevice final : public Device {
 public:
  std::string name() const override { return "eager"; }
  RuntimeValue dispatch(const std::string& opcode, const Attributes& attrs,
                        std::vector<RuntimeValue> operands) override;
  Tensor materialize(const RuntimeValue& v) override;
  void sync() override {}
  DeviceStats stats() const override { return stats_; }
  void resetStats() override { stats_ = {}; }

 private:
  DeviceStats stats_;
};

struct EvalOptions {
  /// Synchronize the device and hand back concrete tensors. When false the
  /// result may hold deferred tensors.
  bool syncResult = true;
};

RuntimeValue evaluate(const ir::Module& m, std::string_view function, std::vector<RuntimeValue> args,
                      Device& device, EvalOptions options = {});

/// Resets the device counters, evaluates, and reports the counters.
std::pair<RuntimeValue, DeviceStats> evaluateWithCounters(const ir::Module& m, std::string_view function,
                                                          std::vector<RuntimeValue> args, Device& device);

/// Replaces deferred tensors (also inside tuples) with concrete ones.
RuntimeValue materializeAll(const RuntimeValue& v, Device& device);

/// Checks a runtime value against a static type.
bool matchesType(const RuntimeValue& v, const ir::Type& t);

}  // namespace tgrad::rt
