#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "tgrad/attributes.hpp"
#include "tgrad/tensor.hpp"

// Opcode-level tensor kernels. Both devices and the trace compiler's
// constant folder run through `runKernel`, so every execution path shares
// the same arithmetic.
namespace tgrad::kernels {

/// A kernel operand: a tensor, or an integer scalar (subscript indices).
using KernelArg = std::variant<Tensor, int64_t>;
/// Shape-only view of a kernel operand, used for shape inference.
using ArgShape = std::variant<Shape, int64_t>;

/// Runs one tensor opcode. Arguments are taken by value so in-place
/// capable kernels (subscript_accum) can reuse a uniquely held buffer.
Tensor runKernel(std::string_view opcode, const Attributes& attrs, std::vector<KernelArg> args);

/// Output shape of `runKernel` without computing anything. Throws the same
/// shape errors the kernel would.
Shape inferShape(std::string_view opcode, const Attributes& attrs, std::span<const ArgShape> args);

bool isTensorOpcode(std::string_view opcode);
/// Pointwise opcodes eligible for fusion.
bool isElementwiseOpcode(std::string_view opcode);
/// Applies a pointwise opcode over `n` elements. Inputs flagged scalar are
/// read at index 0 for every element.
void applyElementwise(std::string_view opcode, std::span<float> out,
                      std::span<const float* const> inputs, std::span<const bool> isScalar);
/// Pre-resolved form of applyElementwise for hot loops.
int elementwiseCode(std::string_view opcode);
size_t elementwiseArity(int code);
void applyElementwise(int code, std::span<float> out, std::span<const float* const> inputs,
                      std::span<const bool> isScalar);

Conv2dOptions convOptions(const Attributes& attrs);
Pool2dOptions poolOptions(const Attributes& attrs);
Shape conv2dOutputShape(const Shape& input, const Shape& filter, const Conv2dOptions& options);
Shape pool2dOutputShape(const Shape& input, const Pool2dOptions& options);
Shape reshapeTarget(int64_t numel, std::span<const int64_t> dims);
std::vector<int64_t> normalizeAxes(std::span<const int64_t> axes, size_t rank);
Shape reducedShape(const Shape& input, std::span<const int64_t> axes);

Tensor broadcastTo(const Tensor& a, const Shape& shape);
/// Sums `g` down to `shape`, the inverse of broadcasting.
Tensor sumTo(const Tensor& g, const Shape& shape);
Tensor reluGrad(const Tensor& g, const Tensor& x);
Tensor select(const Tensor& cond, const Tensor& a, const Tensor& b);
Tensor conv2dInputGrad(const Tensor& g, const Tensor& filter, const Shape& inputShape,
                       const Conv2dOptions& options);
Tensor conv2dFilterGrad(const Tensor& input, const Tensor& g, const Shape& filterShape,
                        const Conv2dOptions& options);
Tensor avgPool2dGrad(const Tensor& g, const Shape& inputShape, const Pool2dOptions& options);
Tensor reduceSumGrad(const Tensor& g, const Shape& inputShape, std::span<const int64_t> axes);
Tensor reduceMeanGrad(const Tensor& g, const Shape& inputShape, std::span<const int64_t> axes);
/// (softmax(logits) - onehot(labels)) / N, scaled by the scalar `seed`.
Tensor softmaxCrossEntropyGrad(const Tensor& logits, const Tensor& labels, const Tensor& seed);
std::vector<int64_t> labelsFromTensor(const Tensor& labels, int64_t classes);
Tensor subscriptSet(const Tensor& t, int64_t index, float value);
/// acc[index] += dx, broadcasting a rank-0 `acc` to `shape` first. Mutates
/// in place when `acc` holds the only reference to its buffer.
Tensor subscriptAccumulate(Tensor acc, const Shape& shape, int64_t index, float dx);

}  // namespace tgrad::kernels
