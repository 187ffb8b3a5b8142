#include "tgrad/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#include "tgrad/error.hpp"
#include "tgrad/kernels.hpp"
#include "tgrad/random.hpp"

namespace tgrad {

namespace {

std::atomic<uint64_t> gBuffersAllocated{0};
std::atomic<uint64_t> gBuffersCopied{0};
std::atomic<uint64_t> gElementsAllocated{0};

void checkDims(const std::vector<int64_t>& dims) {
  for (int64_t d : dims) {
    if (d < 0) throw Error(ErrorKind::ShapeMismatch, "negative extent in shape");
  }
}

std::shared_ptr<std::vector<float>> newBuffer(std::vector<float> values) {
  gBuffersAllocated.fetch_add(1, std::memory_order_relaxed);
  gElementsAllocated.fetch_add(values.size(), std::memory_order_relaxed);
  return std::make_shared<std::vector<float>>(std::move(values));
}

}  // namespace

Shape::Shape(std::initializer_list<int64_t> dims) : dims_(dims) { checkDims(dims_); }

Shape::Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) { checkDims(dims_); }

int64_t Shape::numel() const noexcept {
  int64_t n = 1;
  for (int64_t d : dims_) n *= d;
  return n;
}

std::string Shape::str() const {
  std::string s = "[";
  for (size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

AllocStats AllocCounter::snapshot() noexcept {
  return {gBuffersAllocated.load(std::memory_order_relaxed),
          gBuffersCopied.load(std::memory_order_relaxed),
          gElementsAllocated.load(std::memory_order_relaxed)};
}

void AllocCounter::reset() noexcept {
  gBuffersAllocated.store(0);
  gBuffersCopied.store(0);
  gElementsAllocated.store(0);
}

Tensor::Tensor() : Tensor(Shape{}, std::vector<float>{0.0f}) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
  if (static_cast<int64_t>(values.size()) != shape_.numel()) {
    throw Error(ErrorKind::CountMismatch, "tensor of shape " + shape_.str() + " needs " +
                                              std::to_string(shape_.numel()) + " values, got " +
                                              std::to_string(values.size()));
  }
  storage_ = newBuffer(std::move(values));
}

Tensor::Tensor(Shape shape, std::shared_ptr<std::vector<float>> storage)
    : shape_(std::move(shape)), storage_(std::move(storage)) {}

Tensor Tensor::scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

Tensor Tensor::zeros(const Shape& shape) { return fill(shape, 0.0f); }

Tensor Tensor::fill(const Shape& shape, float value) {
  return Tensor(shape, std::vector<float>(static_cast<size_t>(shape.numel()), value));
}

Tensor Tensor::fromVector(std::vector<float> values) {
  Shape shape{static_cast<int64_t>(values.size())};
  return Tensor(std::move(shape), std::move(values));
}

std::span<float> Tensor::mutableData() {
  if (storage_.use_count() > 1) {
    gBuffersCopied.fetch_add(1, std::memory_order_relaxed);
    gElementsAllocated.fetch_add(storage_->size(), std::memory_order_relaxed);
    storage_ = std::make_shared<std::vector<float>>(*storage_);
  }
  return {storage_->data(), storage_->size()};
}

float Tensor::at(int64_t flatIndex) const {
  if (flatIndex < 0 || flatIndex >= numel()) {
    throw Error(ErrorKind::IndexOutOfBounds,
                "index " + std::to_string(flatIndex) + " outside tensor of " + std::to_string(numel()));
  }
  return (*storage_)[static_cast<size_t>(flatIndex)];
}

void Tensor::set(int64_t flatIndex, float value) {
  if (flatIndex < 0 || flatIndex >= numel()) {
    throw Error(ErrorKind::IndexOutOfBounds,
                "index " + std::to_string(flatIndex) + " outside tensor of " + std::to_string(numel()));
  }
  mutableData()[static_cast<size_t>(flatIndex)] = value;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_.str());
  }
  return (*storage_)[0];
}

Tensor Tensor::reshaped(const Shape& shape) const {
  if (shape.numel() != numel()) {
    throw Error(ErrorKind::CountMismatch,
                "cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor(shape, storage_);
}

bool Tensor::bitwiseEqual(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::memcmp(storage_->data(), other.storage_->data(), storage_->size() * sizeof(float)) == 0;
}

std::string Tensor::str() const {
  std::ostringstream os;
  os << "tensor" << shape_.str() << "{";
  const size_t limit = 16;
  for (size_t i = 0; i < storage_->size() && i < limit; ++i) {
    if (i) os << ", ";
    os << (*storage_)[i];
  }
  if (storage_->size() > limit) os << ", ...";
  os << "}";
  return os.str();
}

float CounterRng::uniform(float lo, float hi) noexcept {
  float v = lo + (hi - lo) * nextUnit();
  return v < hi ? v : std::nextafter(hi, lo);
}

Tensor fill(const Shape& shape, float value) { return Tensor::fill(shape, value); }

Tensor randomUniform(const Shape& shape, uint64_t seed, float lo, float hi) {
  if (!(lo < hi)) throw Error(ErrorKind::InvalidRange, "randomUniform requires lo < hi");
  CounterRng rng(seed);
  std::vector<float> values(static_cast<size_t>(shape.numel()));
  for (auto& v : values) v = rng.uniform(lo, hi);
  return Tensor(shape, std::move(values));
}

Shape broadcastShapes(const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.rank(), b.rank());
  std::vector<int64_t> out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.rank() ? 1 : a[i - (rank - a.rank())];
    int64_t db = i < rank - b.rank() ? 1 : b[i - (rank - b.rank())];
    if (da != db && da != 1 && db != 1) {
      throw Error(ErrorKind::ShapeMismatch,
                  "shapes " + a.str() + " and " + b.str() + " are not broadcast-compatible");
    }
    out[i] = da == 1 ? db : da;
  }
  return Shape(std::move(out));
}

namespace {

const char* elementwiseOpcode(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::Add: return "add";
    case ElementwiseOp::Sub: return "sub";
    case ElementwiseOp::Mul: return "mul";
    case ElementwiseOp::Div: return "div";
    case ElementwiseOp::Neg: return "neg";
    case ElementwiseOp::Relu: return "relu";
    case ElementwiseOp::Exp: return "exp";
    case ElementwiseOp::Log: return "log";
  }
  return "add";
}

bool isBinary(ElementwiseOp op) {
  return op == ElementwiseOp::Add || op == ElementwiseOp::Sub || op == ElementwiseOp::Mul ||
         op == ElementwiseOp::Div;
}

}  // namespace

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b) {
  if (isBinary(op)) {
    if (!b) throw Error(ErrorKind::InvalidArgument, "binary elementwise op needs two operands");
    return kernels::runKernel(elementwiseOpcode(op), {}, {a, *b});
  }
  return kernels::runKernel(elementwiseOpcode(op), {}, {a});
}

Tensor matmul(const Tensor& a, const Tensor& b) { return kernels::runKernel("matmul", {}, {a, b}); }

namespace {

Attributes convAttrs(const Conv2dOptions& o) {
  return {{"strides", std::vector<int64_t>{o.strideH, o.strideW}},
          {"padding", std::string(o.padding == Padding::Same ? "same" : "valid")}};
}

Attributes poolAttrs(const Pool2dOptions& o) {
  return {{"pool", std::vector<int64_t>{o.poolH, o.poolW}},
          {"strides", std::vector<int64_t>{o.strideH, o.strideW}}};
}

Attributes axesAttrs(std::span<const int64_t> axes) {
  if (axes.empty()) return {};
  return {{"axes", std::vector<int64_t>(axes.begin(), axes.end())}};
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& filter, const Conv2dOptions& options) {
  return kernels::runKernel("conv2d", convAttrs(options), {input, filter});
}

Tensor avgPool2d(const Tensor& input, const Pool2dOptions& options) {
  return kernels::runKernel("avgpool2d", poolAttrs(options), {input});
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  return kernels::runKernel("reshape", {{"shape", shape.dims()}}, {a});
}

Tensor reduceSum(const Tensor& a, std::span<const int64_t> axes) {
  return kernels::runKernel("reduce_sum", axesAttrs(axes), {a});
}

Tensor reduceMean(const Tensor& a, std::span<const int64_t> axes) {
  return kernels::runKernel("reduce_mean", axesAttrs(axes), {a});
}

Tensor transpose2d(const Tensor& a) { return kernels::runKernel("transpose2d", {}, {a}); }

Tensor softmaxCrossEntropy(const Tensor& logits, std::span<const int64_t> labels) {
  std::vector<float> asFloat(labels.begin(), labels.end());
  if (logits.rank() == 2) {
    for (int64_t label : labels) {
      if (label < 0 || label >= logits.shape()[1]) {
        throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(label) +
                                                    " outside [0, " +
                                                    std::to_string(logits.shape()[1]) + ")");
      }
    }
  }
  return kernels::runKernel("softmax_xent", {}, {logits, Tensor::fromVector(std::move(asFloat))});
}

bool approxEqual(const Tensor& a, const Tensor& b, float atol, float rtol) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  for (size_t i = 0; i < x.size(); ++i) {
    if (!(std::fabs(x[i] - y[i]) <= atol + rtol * std::fabs(y[i]))) return false;
  }
  return true;
}

}  // namespace tgrad
