#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "tgrad/autodiff.hpp"
#include "tgrad/ir.hpp"
#include "tgrad/runtime.hpp"
#include "tgrad/tensor.hpp"

namespace tgrad::nn {

/// Named tensors in declaration order. Paths are unique.
class ParamRecord {
 public:
  using Entry = std::pair<std::string, Tensor>;

  ParamRecord() = default;
  explicit ParamRecord(std::vector<Entry> entries);

  void add(std::string path, Tensor value);

  size_t size() const noexcept { return entries_.size(); }
  bool contains(const std::string& path) const noexcept { return indexOf(path) >= 0; }
  std::vector<std::string> paths() const;

  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  const Entry& operator[](size_t i) const { return entries_.at(i); }
  Entry& operator[](size_t i) { return entries_.at(i); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  int64_t parameterCount() const;
  bool bitwiseEqual(const ParamRecord& other) const;

 private:
  int64_t indexOf(const std::string& path) const noexcept;

  std::vector<Entry> entries_;
};

/// Throws MismatchedStructure unless both records have the same paths, in
/// the same order, with the same shapes.
void requireSameStructure(const ParamRecord& a, const ParamRecord& b, const std::string& what);

/// A gradient or update direction for a model: one tensor per parameter path.
class ModelTangent {
 public:
  ModelTangent() = default;
  explicit ModelTangent(ParamRecord components) : components_(std::move(components)) {}

  static ModelTangent zerosLike(const ParamRecord& params);

  const ParamRecord& components() const noexcept { return components_; }
  const Tensor& at(const std::string& path) const { return components_.at(path); }
  size_t size() const noexcept { return components_.size(); }

  ModelTangent operator+(const ModelTangent& other) const;
  ModelTangent& operator+=(const ModelTangent& other);
  ModelTangent scaled(float factor) const;

  /// params + this, componentwise.
  ParamRecord moved(const ParamRecord& params) const;

 private:
  ParamRecord components_;
};

/// Building block of a model. Shapes use -1 for the batch dimension.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  /// Parameter names (relative to the layer) and initial values.
  virtual std::vector<ParamRecord::Entry> initialParams(uint64_t seed) const = 0;
  virtual std::vector<int64_t> outputShape(const std::vector<int64_t>& input) const = 0;
  /// Appends the forward computation; `params` are the layer's parameter
  /// values in `initialParams` order.
  virtual std::string emitForward(ir::FunctionBuilder& b, const std::string& input,
                                  const std::vector<std::string>& params) const = 0;
};

enum class Activation { None, Relu };

class Conv2D final : public Layer {
 public:
  Conv2D(int64_t kh, int64_t kw, int64_t in, int64_t out, Padding padding, Activation activation);
  std::string kind() const override { return "conv2d"; }
  std::vector<ParamRecord::Entry> initialParams(uint64_t seed) const override;
  std::vector<int64_t> outputShape(const std::vector<int64_t>& input) const override;
  std::string emitForward(ir::FunctionBuilder& b, const std::string& input,
                          const std::vector<std::string>& params) const override;

 private:
  int64_t kh_, kw_, in_, out_;
  Padding padding_;
  Activation activation_;
};

class AvgPool2D final : public Layer {
 public:
  AvgPool2D(int64_t pool, int64_t stride) : pool_(pool), stride_(stride) {}
  std::string kind() const override { return "avgpool2d"; }
  std::vector<ParamRecord::Entry> initialParams(uint64_t) const override { return {}; }
  std::vector<int64_t> outputShape(const std::vector<int64_t>& input) const override;
  std::string emitForward(ir::FunctionBuilder& b, const std::string& input,
                          const std::vector<std::string>& params) const override;

 private:
  int64_t pool_, stride_;
};

class Flatten final : public Layer {
 public:
  std::string kind() const override { return "flatten"; }
  std::vector<ParamRecord::Entry> initialParams(uint64_t) const override { return {}; }
  std::vector<int64_t> outputShape(const std::vector<int64_t>& input) const override;
  std::string emitForward(ir::FunctionBuilder& b, const std::string& input,
                          const std::vector<std::string>& params) const override;
};

class Dense final : public Layer {
 public:
  Dense(int64_t in, int64_t out, Activation activation) : in_(in), out_(out), activation_(activation) {}
  std::string kind() const override { return "dense"; }
  std::vector<ParamRecord::Entry> initialParams(uint64_t seed) const override;
  std::vector<int64_t> outputShape(const std::vector<int64_t>& input) const override;
  std::string emitForward(ir::FunctionBuilder& b, const std::string& input,
                          const std::vector<std::string>& params) const override;

 private:
  int64_t in_, out_;
  Activation activation_;
};

/// A chain of named layers applied in order, plus its parameters.
/// Copies share the compiled loss program but not the parameters.
class Model {
 public:
  struct NamedLayer {
    std::string name;
    std::shared_ptr<const Layer> layer;
  };

  /// `inputShape` is one example's shape (H, W, C).
  Model(std::vector<int64_t> inputShape, std::vector<NamedLayer> layers, uint64_t seed);

  const std::vector<int64_t>& inputShape() const noexcept { return inputShape_; }
  const std::vector<NamedLayer>& layers() const noexcept { return layers_; }
  int64_t classes() const noexcept { return classes_; }

  ParamRecord& params() noexcept { return params_; }
  const ParamRecord& params() const noexcept { return params_; }

  /// Per-layer output shapes with a -1 batch dimension, starting with the input.
  std::vector<std::vector<int64_t>> shapeChain() const;

  /// Module with `@logits(params..., images) -> tensor<?xK>` and
  /// `@loss(params..., images, labels) -> f32`.
  const ir::Module& module() const;
  /// Differentiation context for `module()`, created on first use.
  ad::Differentiator& differentiator() const;

  /// Params followed by extra values, as evaluation arguments.
  std::vector<rt::RuntimeValue> arguments(std::vector<rt::RuntimeValue> extra) const;

 private:
  struct Program {
    ir::Module module;
    std::once_flag diffOnce;
    std::unique_ptr<ad::Differentiator> differentiator;
  };

  std::vector<int64_t> inputShape_;
  std::vector<NamedLayer> layers_;
  int64_t classes_ = 0;
  ParamRecord params_;
  std::shared_ptr<Program> program_;
};

/// Conv-pool-conv-pool-dense×3 classifier for 28×28×1 images, 10 classes.
Model makeLeNet(uint64_t seed);

/// Emits `@loss`: the layer chain followed by softmax cross-entropy
/// against f32 class labels.
ir::Function buildLossFunction(const Model& model);
ir::Function buildLogitsFunction(const Model& model);

Tensor logits(const Model& model, const Tensor& images, rt::Device& device);

struct BatchGradient {
  float loss = 0.0f;
  ModelTangent gradient;
};

BatchGradient gradientsForBatch(const Model& model, const Tensor& images, const Tensor& labels, rt::Device& device);

/// params[p] -= lr * g[p] in place.
void sgdUpdate(ParamRecord& params, const ModelTangent& g, float learningRate);
/// Same arithmetic into a fresh record.
ParamRecord sgdUpdated(const ParamRecord& params, const ModelTangent& g, float learningRate);

struct SGDOptimizer {
  float learningRate = 0.01f;
  void update(Model& model, const ModelTangent& g) const { sgdUpdate(model.params(), g, learningRate); }
};

/// Images N×H×W×C and f32 class labels of length N.
struct Dataset {
  Tensor images;
  Tensor labels;
  int64_t size() const { return images.rank() ? images.shape()[0] : 0; }
  /// Rows [begin, end) in the order given by `order`.
  std::pair<Tensor, Tensor> batch(const std::vector<int64_t>& order, int64_t begin, int64_t end) const;
};

/// Argmax per row; ties go to the lower index.
std::vector<int64_t> argmaxRows(const Tensor& logits);
float accuracy(const Model& model, const Dataset& data, rt::Device& device, int64_t batchSize = 256);

struct TrainConfig {
  int64_t epochs = 1;
  int64_t batchSize = 32;
  float learningRate = 0.1f;
  bool shuffle = false;
  uint64_t shuffleSeed = 0;
  /// Evaluate accuracy over the dataset after each epoch.
  bool trackAccuracy = true;
};

struct EpochMetrics {
  int64_t epoch = 0;
  /// Example-weighted mean of the batch losses seen during the epoch.
  float loss = 0.0f;
  /// Accuracy over the dataset after the epoch; NaN when not tracked.
  float accuracy = 0.0f;
  int64_t steps = 0;
};

struct StepInfo {
  int64_t epoch = 0;
  int64_t step = 0;
  float loss = 0.0f;
};

/// Minibatch SGD. On a lazy device a barrier follows every update.
std::vector<EpochMetrics> trainEpochs(Model& model, const Dataset& data, const TrainConfig& config, rt::Device& device,
                                      const std::function<void(const StepInfo&)>& onStep = {});

/// Little-endian "TGRD" v1 container.
void saveCheckpoint(const ParamRecord& params, const std::filesystem::path& path);
ParamRecord loadCheckpoint(const std::filesystem::path& path);
/// Loads into an existing model; paths and shapes must match.
void loadCheckpointInto(Model& model, const std::filesystem::path& path);

}  // namespace tgrad::nn
