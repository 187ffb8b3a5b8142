#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tgrad {

/// Ordered list of extents. Rank 0 is a scalar.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims);
  explicit Shape(std::vector<int64_t> dims);

  const std::vector<int64_t>& dims() const noexcept { return dims_; }
  size_t rank() const noexcept { return dims_.size(); }
  int64_t operator[](size_t i) const { return dims_[i]; }
  int64_t numel() const noexcept;
  bool isScalar() const noexcept { return dims_.empty(); }

  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<int64_t> dims_;
};

/// Buffer instrumentation. Counts are process-wide and monotonic; tests
/// snapshot before and after a region and compare deltas.
struct AllocStats {
  uint64_t buffersAllocated = 0;
  uint64_t buffersCopied = 0;
  uint64_t elementsAllocated = 0;
};

class AllocCounter {
 public:
  static AllocStats snapshot() noexcept;
  static void reset() noexcept;
};

/// Row-major f32 array with value semantics. Copies share storage until one
/// side mutates (copy-on-write); sharing is only observable via AllocCounter.
class Tensor {
 public:
  /// Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);
  static Tensor zeros(const Shape& shape);
  static Tensor fill(const Shape& shape, float value);
  static Tensor fromVector(std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  size_t rank() const noexcept { return shape_.rank(); }
  int64_t numel() const noexcept { return shape_.numel(); }

  std::span<const float> data() const noexcept { return {storage_->data(), storage_->size()}; }
  /// Unique-borrow access; detaches shared storage first.
  std::span<float> mutableData();

  float at(int64_t flatIndex) const;
  void set(int64_t flatIndex, float value);
  /// Value of a one-element tensor.
  float item() const;

  /// Same storage, new extents. Element count must match.
  Tensor reshaped(const Shape& shape) const;

  bool sharesStorageWith(const Tensor& other) const noexcept { return storage_ == other.storage_; }
  const void* storageId() const noexcept { return storage_.get(); }

  std::vector<float> toVector() const { return {storage_->begin(), storage_->end()}; }
  bool bitwiseEqual(const Tensor& other) const;
  std::string str() const;

 private:
  Tensor(Shape shape, std::shared_ptr<std::vector<float>> storage);

  Shape shape_;
  std::shared_ptr<std::vector<float>> storage_;
};

enum class ElementwiseOp { Add, Sub, Mul, Div, Neg, Relu, Exp, Log };

enum class Padding { Same, Valid };

struct Conv2dOptions {
  int64_t strideH = 1;
  int64_t strideW = 1;
  Padding padding = Padding::Valid;
};

struct Pool2dOptions {
  int64_t poolH = 2;
  int64_t poolW = 2;
  int64_t strideH = 2;
  int64_t strideW = 2;
};

Tensor fill(const Shape& shape, float value);
/// Counter-based: element i depends only on (seed, i). Requires lo < hi.
Tensor randomUniform(const Shape& shape, uint64_t seed, float lo, float hi);

Shape broadcastShapes(const Shape& a, const Shape& b);
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b = nullptr);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& input, const Tensor& filter, const Conv2dOptions& options = {});
Tensor avgPool2d(const Tensor& input, const Pool2dOptions& options = {});
Tensor reshape(const Tensor& a, const Shape& shape);
/// Empty `axes` reduces over every axis.
Tensor reduceSum(const Tensor& a, std::span<const int64_t> axes = {});
Tensor reduceMean(const Tensor& a, std::span<const int64_t> axes = {});
Tensor transpose2d(const Tensor& a);
/// Mean over the batch of -log softmax(logits)[label].
Tensor softmaxCrossEntropy(const Tensor& logits, std::span<const int64_t> labels);
bool approxEqual(const Tensor& a, const Tensor& b, float atol, float rtol);

}  // namespace tgrad
