#include "tgrad/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "tgrad/error.hpp"
#include "tgrad/random.hpp"

namespace tgrad::nn {

ParamRecord::ParamRecord(std::vector<Entry> entries) {
  for (auto& [path, value] : entries) add(std::move(path), std::move(value));
}

void ParamRecord::add(std::string path, Tensor value) {
  if (contains(path)) throw Error(ErrorKind::InvalidArgument, "duplicate parameter path " + path);
  entries_.emplace_back(std::move(path), std::move(value));
}

std::vector<std::string> ParamRecord::paths() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

int64_t ParamRecord::indexOf(const std::string& path) const noexcept {
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == path) return static_cast<int64_t>(i);
  }
  return -1;
}

const Tensor& ParamRecord::at(const std::string& path) const {
  int64_t i = indexOf(path);
  if (i < 0) throw Error(ErrorKind::MismatchedStructure, "no parameter " + path);
  return entries_[static_cast<size_t>(i)].second;
}

Tensor& ParamRecord::at(const std::string& path) {
  int64_t i = indexOf(path);
  if (i < 0) throw Error(ErrorKind::MismatchedStructure, "no parameter " + path);
  return entries_[static_cast<size_t>(i)].second;
}

int64_t ParamRecord::parameterCount() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

bool ParamRecord::bitwiseEqual(const ParamRecord& other) const {
  if (size() != other.size()) return false;
  for (size_t i = 0; i < size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (!entries_[i].second.bitwiseEqual(other.entries_[i].second)) return false;
  }
  return true;
}

void requireSameStructure(const ParamRecord& a, const ParamRecord& b, const std::string& what) {
  for (size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
    if (i >= a.size()) throw Error(ErrorKind::MismatchedStructure, what + " has extra path " + b[i].first);
    if (i >= b.size()) throw Error(ErrorKind::MismatchedStructure, what + " is missing path " + a[i].first);
    if (a[i].first != b[i].first) {
      throw Error(ErrorKind::MismatchedStructure, what + " has path " + b[i].first + " where " + a[i].first +
                                                      " is expected");
    }
    if (a[i].second.shape() != b[i].second.shape()) {
      throw Error(ErrorKind::MismatchedStructure, what + " path " + a[i].first + " has shape " +
                                                      b[i].second.shape().str() + ", expected " +
                                                      a[i].second.shape().str());
    }
  }
}

ModelTangent ModelTangent::zerosLike(const ParamRecord& params) {
  ParamRecord out;
  for (const auto& [path, value] : params) out.add(path, Tensor::zeros(value.shape()));
  return ModelTangent(std::move(out));
}

ModelTangent ModelTangent::operator+(const ModelTangent& other) const {
  ModelTangent out = *this;
  out += other;
  return out;
}

ModelTangent& ModelTangent::operator+=(const ModelTangent& other) {
  requireSameStructure(components_, other.components_, "tangent");
  for (size_t i = 0; i < size(); ++i) {
    auto dst = components_[i].second.mutableData();
    auto src = other.components_[i].second.data();
    for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
  return *this;
}

ModelTangent ModelTangent::scaled(float factor) const {
  ModelTangent out = *this;
  for (size_t i = 0; i < size(); ++i) {
    for (float& v : out.components_[i].second.mutableData()) v *= factor;
  }
  return out;
}

ParamRecord ModelTangent::moved(const ParamRecord& params) const {
  requireSameStructure(params, components_, "tangent");
  ParamRecord out;
  for (size_t i = 0; i < params.size(); ++i) {
    out.add(params[i].first, std::get<Tensor>(ad::move(params[i].second, components_[i].second)));
  }
  return out;
}

namespace {

Tensor glorot(const Shape& shape, int64_t fanIn, int64_t fanOut, uint64_t seed) {
  float limit = std::sqrt(6.0f / static_cast<float>(fanIn + fanOut));
  return randomUniform(shape, seed, -limit, limit);
}

std::string activate(ir::FunctionBuilder& b, const std::string& v, Activation a) {
  return a == Activation::Relu ? b.emit("relu", {v}) : v;
}

void requireRank(const std::vector<int64_t>& shape, size_t rank, const std::string& layer) {
  if (shape.size() != rank) {
    throw Error(ErrorKind::ShapeMismatch, layer + " expects rank " + std::to_string(rank) + " input, got rank " +
                                              std::to_string(shape.size()));
  }
}

}  // namespace

Conv2D::Conv2D(int64_t kh, int64_t kw, int64_t in, int64_t out, Padding padding, Activation activation)
    : kh_(kh), kw_(kw), in_(in), out_(out), padding_(padding), activation_(activation) {}

std::vector<ParamRecord::Entry> Conv2D::initialParams(uint64_t seed) const {
  CounterRng rng(seed);
  return {{"filter", glorot(Shape{kh_, kw_, in_, out_}, kh_ * kw_ * in_, kh_ * kw_ * out_, rng.split(0).key())},
          {"bias", Tensor::zeros(Shape{out_})}};
}

std::vector<int64_t> Conv2D::outputShape(const std::vector<int64_t>& input) const {
  requireRank(input, 4, "conv2d");
  if (input[3] != in_) {
    throw Error(ErrorKind::ShapeMismatch,
                "conv2d expects " + std::to_string(in_) + " channels, got " + std::to_string(input[3]));
  }
  int64_t h = padding_ == Padding::Same ? input[1] : input[1] - kh_ + 1;
  int64_t w = padding_ == Padding::Same ? input[2] : input[2] - kw_ + 1;
  if (h <= 0 || w <= 0) throw Error(ErrorKind::ZeroSizeOutput, "conv2d window larger than input");
  return {input[0], h, w, out_};
}

std::string Conv2D::emitForward(ir::FunctionBuilder& b, const std::string& input,
                                const std::vector<std::string>& params) const {
  Attributes attrs{{"padding", std::string(padding_ == Padding::Same ? "same" : "valid")},
                   {"strides", std::vector<int64_t>{1, 1}}};
  std::string y = b.emit("conv2d", {input, params.at(0)}, attrs);
  return activate(b, b.emit("add", {y, params.at(1)}), activation_);
}

std::vector<int64_t> AvgPool2D::outputShape(const std::vector<int64_t>& input) const {
  requireRank(input, 4, "avgpool2d");
  int64_t h = (input[1] - pool_) / stride_ + 1;
  int64_t w = (input[2] - pool_) / stride_ + 1;
  if (input[1] < pool_ || input[2] < pool_) throw Error(ErrorKind::ZeroSizeOutput, "pool window larger than input");
  return {input[0], h, w, input[3]};
}

std::string AvgPool2D::emitForward(ir::FunctionBuilder& b, const std::string& input,
                                   const std::vector<std::string>&) const {
  return b.emit("avgpool2d", {input},
                {{"pool", std::vector<int64_t>{pool_, pool_}}, {"strides", std::vector<int64_t>{stride_, stride_}}});
}

std::vector<int64_t> Flatten::outputShape(const std::vector<int64_t>& input) const {
  if (input.empty()) throw Error(ErrorKind::ShapeMismatch, "flatten needs a batch dimension");
  int64_t n = 1;
  for (size_t i = 1; i < input.size(); ++i) n *= input[i];
  return {input[0], n};
}

std::string Flatten::emitForward(ir::FunctionBuilder& b, const std::string& input,
                                 const std::vector<std::string>&) const {
  auto shape = b.typeOf(input).dims();
  int64_t n = 1;
  for (size_t i = 1; i < shape.size(); ++i) n *= shape[i];
  return b.emit("reshape", {input}, {{"shape", std::vector<int64_t>{-1, n}}});
}

std::vector<ParamRecord::Entry> Dense::initialParams(uint64_t seed) const {
  CounterRng rng(seed);
  return {{"weight", glorot(Shape{in_, out_}, in_, out_, rng.split(0).key())}, {"bias", Tensor::zeros(Shape{out_})}};
}

std::vector<int64_t> Dense::outputShape(const std::vector<int64_t>& input) const {
  requireRank(input, 2, "dense");
  if (input[1] != in_) {
    throw Error(ErrorKind::ShapeMismatch,
                "dense expects " + std::to_string(in_) + " features, got " + std::to_string(input[1]));
  }
  return {input[0], out_};
}

std::string Dense::emitForward(ir::FunctionBuilder& b, const std::string& input,
                               const std::vector<std::string>& params) const {
  std::string y = b.emit("matmul", {input, params.at(0)});
  return activate(b, b.emit("add", {y, params.at(1)}), activation_);
}

Model::Model(std::vector<int64_t> inputShape, std::vector<NamedLayer> layers, uint64_t seed)
    : inputShape_(std::move(inputShape)), layers_(std::move(layers)) {
  CounterRng rng(seed);
  for (size_t i = 0; i < layers_.size(); ++i) {
    for (auto& [name, value] : layers_[i].layer->initialParams(rng.split(i).key())) {
      params_.add(layers_[i].name + "." + name, std::move(value));
    }
  }
  auto chain = shapeChain();
  const auto& out = chain.back();
  if (out.size() != 2) throw Error(ErrorKind::ShapeMismatch, "model output must be [N, classes]");
  classes_ = out[1];
  program_ = std::make_shared<Program>();
  program_->module.add(buildLogitsFunction(*this));
  program_->module.add(buildLossFunction(*this));
}

std::vector<std::vector<int64_t>> Model::shapeChain() const {
  std::vector<int64_t> shape{-1};
  shape.insert(shape.end(), inputShape_.begin(), inputShape_.end());
  std::vector<std::vector<int64_t>> chain{shape};
  for (const auto& l : layers_) chain.push_back(l.layer->outputShape(chain.back()));
  return chain;
}

const ir::Module& Model::module() const { return program_->module; }

ad::Differentiator& Model::differentiator() const {
  std::call_once(program_->diffOnce,
                 [&] { program_->differentiator = std::make_unique<ad::Differentiator>(program_->module); });
  return *program_->differentiator;
}

std::vector<rt::RuntimeValue> Model::arguments(std::vector<rt::RuntimeValue> extra) const {
  std::vector<rt::RuntimeValue> args;
  args.reserve(params_.size() + extra.size());
  for (const auto& [path, value] : params_) args.emplace_back(value);
  for (auto& e : extra) args.push_back(std::move(e));
  return args;
}

Model makeLeNet(uint64_t seed) {
  auto relu = Activation::Relu;
  std::vector<Model::NamedLayer> layers{
      {"conv1", std::make_shared<Conv2D>(5, 5, 1, 6, Padding::Same, relu)},
      {"pool1", std::make_shared<AvgPool2D>(2, 2)},
      {"conv2", std::make_shared<Conv2D>(5, 5, 6, 16, Padding::Valid, relu)},
      {"pool2", std::make_shared<AvgPool2D>(2, 2)},
      {"flatten", std::make_shared<Flatten>()},
      {"fc1", std::make_shared<Dense>(400, 120, relu)},
      {"fc2", std::make_shared<Dense>(120, 84, relu)},
      {"fc3", std::make_shared<Dense>(84, 10, Activation::None)},
  };
  return Model({28, 28, 1}, std::move(layers), seed);
}

namespace {

std::vector<ir::NamedType> paramTypes(const Model& model) {
  std::vector<ir::NamedType> out;
  for (const auto& [path, value] : model.params()) out.push_back({path, ir::Type::tensor(value.shape().dims())});
  return out;
}

ir::Type imagesType(const Model& model) {
  std::vector<int64_t> dims{-1};
  dims.insert(dims.end(), model.inputShape().begin(), model.inputShape().end());
  return ir::Type::tensor(dims);
}

std::string emitChain(const Model& model, ir::FunctionBuilder& b, const std::string& images) {
  std::string x = images;
  size_t p = 0;
  for (const auto& l : model.layers()) {
    size_t count = l.layer->initialParams(0).size();
    std::vector<std::string> params;
    for (size_t i = 0; i < count; ++i) params.push_back(b.param(p++));
    x = l.layer->emitForward(b, x, params);
  }
  return x;
}

}  // namespace

ir::Function buildLogitsFunction(const Model& model) {
  auto params = paramTypes(model);
  params.push_back({"images", imagesType(model)});
  ir::FunctionBuilder b("logits", params, ir::Type::tensor({-1, model.classes()}));
  b.ret(emitChain(model, b, "images"));
  return b.finish();
}

ir::Function buildLossFunction(const Model& model) {
  auto params = paramTypes(model);
  params.push_back({"images", imagesType(model)});
  params.push_back({"labels", ir::Type::tensor({-1})});
  ir::FunctionBuilder b("loss", params, ir::Type::f32());
  std::string logits = emitChain(model, b, "images");
  b.ret(b.emit("softmax_xent", {logits, "labels"}, {}, ir::Type::f32()));
  return b.finish();
}

Tensor logits(const Model& model, const Tensor& images, rt::Device& device) {
  return std::get<Tensor>(rt::evaluate(model.module(), "logits", model.arguments({images}), device));
}

BatchGradient gradientsForBatch(const Model& model, const Tensor& images, const Tensor& labels, rt::Device& device) {
  if (images.rank() == 0 || labels.rank() != 1 || images.shape()[0] != labels.shape()[0]) {
    throw Error(ErrorKind::ShapeMismatch,
                "batch has images " + images.shape().str() + " and labels " + labels.shape().str());
  }
  std::vector<size_t> wrt(model.params().size());
  std::iota(wrt.begin(), wrt.end(), size_t{0});
  auto r = ad::valueWithGradient(model.differentiator(), "loss", model.arguments({images, labels}), wrt, device);
  ParamRecord g;
  for (size_t i = 0; i < wrt.size(); ++i) g.add(model.params()[i].first, std::get<Tensor>(r.gradient[i]));
  return {std::get<Tensor>(r.value).item(), ModelTangent(std::move(g))};
}

void sgdUpdate(ParamRecord& params, const ModelTangent& g, float learningRate) {
  requireSameStructure(params, g.components(), "gradient");
  for (size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second.mutableData();
    auto d = g.components()[i].second.data();
    for (size_t k = 0; k < p.size(); ++k) p[k] = p[k] - learningRate * d[k];
  }
}

ParamRecord sgdUpdated(const ParamRecord& params, const ModelTangent& g, float learningRate) {
  requireSameStructure(params, g.components(), "gradient");
  ParamRecord out;
  for (size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second.data();
    auto d = g.components()[i].second.data();
    std::vector<float> next(p.size());
    for (size_t k = 0; k < p.size(); ++k) next[k] = p[k] - learningRate * d[k];
    out.add(params[i].first, Tensor(params[i].second.shape(), std::move(next)));
  }
  return out;
}

std::pair<Tensor, Tensor> Dataset::batch(const std::vector<int64_t>& order, int64_t begin, int64_t end) const {
  const int64_t n = end - begin;
  const int64_t row = size() ? images.numel() / size() : 0;
  std::vector<int64_t> dims = images.shape().dims();
  dims[0] = n;
  std::vector<float> x(static_cast<size_t>(n * row));
  std::vector<float> y(static_cast<size_t>(n));
  auto src = images.data();
  for (int64_t i = 0; i < n; ++i) {
    int64_t r = order[static_cast<size_t>(begin + i)];
    std::memcpy(&x[static_cast<size_t>(i * row)], &src[static_cast<size_t>(r * row)], sizeof(float) * row);
    y[static_cast<size_t>(i)] = labels.at(r);
  }
  return {Tensor(Shape(dims), std::move(x)), Tensor(Shape{n}, std::move(y))};
}

std::vector<int64_t> argmaxRows(const Tensor& logits) {
  if (logits.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "argmax expects [N, C], got " + logits.shape().str());
  const int64_t n = logits.shape()[0], c = logits.shape()[1];
  auto d = logits.data();
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j) {
      if (d[static_cast<size_t>(i * c + j)] > d[static_cast<size_t>(i * c + best)]) best = j;
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

float accuracy(const Model& model, const Dataset& data, rt::Device& device, int64_t batchSize) {
  if (data.size() == 0) throw Error(ErrorKind::EmptyData, "accuracy of an empty dataset");
  std::vector<int64_t> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), int64_t{0});
  int64_t correct = 0;
  for (int64_t begin = 0; begin < data.size(); begin += batchSize) {
    int64_t end = std::min(data.size(), begin + batchSize);
    auto [x, y] = data.batch(order, begin, end);
    auto predicted = argmaxRows(logits(model, x, device));
    for (size_t i = 0; i < predicted.size(); ++i) {
      if (static_cast<float>(predicted[i]) == y.at(static_cast<int64_t>(i))) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(data.size());
}

std::vector<EpochMetrics> trainEpochs(Model& model, const Dataset& data, const TrainConfig& config, rt::Device& device,
                                      const std::function<void(const StepInfo&)>& onStep) {
  if (data.size() == 0) throw Error(ErrorKind::EmptyData, "training on an empty dataset");
  if (config.batchSize <= 0) throw Error(ErrorKind::InvalidArgument, "batch size must be positive");
  std::vector<int64_t> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), int64_t{0});
  SGDOptimizer optimizer{config.learningRate};
  std::vector<EpochMetrics> metrics;
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.shuffle) {
      CounterRng rng = CounterRng(config.shuffleSeed).split(static_cast<uint64_t>(epoch));
      for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    double lossSum = 0.0;
    int64_t steps = 0;
    for (int64_t begin = 0; begin < data.size(); begin += config.batchSize) {
      int64_t end = std::min(data.size(), begin + config.batchSize);
      auto [x, y] = data.batch(order, begin, end);
      BatchGradient g = gradientsForBatch(model, x, y, device);
      optimizer.update(model, g.gradient);
      device.sync();
      lossSum += static_cast<double>(g.loss) * static_cast<double>(end - begin);
      if (onStep) onStep({epoch, steps, g.loss});
      ++steps;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = static_cast<float>(lossSum / static_cast<double>(data.size()));
    m.accuracy = config.trackAccuracy ? accuracy(model, data, device) : std::nanf("");
    m.steps = steps;
    metrics.push_back(m);
  }
  return metrics;
}

}  // namespace tgrad::nn
