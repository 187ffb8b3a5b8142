#include "tgrad/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_map>

#include "tgrad/error.hpp"

namespace tgrad::kernels {

namespace {

enum class Pw { Add, Sub, Mul, Div, Neg, Relu, Exp, Log, ReluGrad, Select };

const std::unordered_map<std::string_view, Pw>& pointwiseTable() {
  static const std::unordered_map<std::string_view, Pw> table = {
      {"add", Pw::Add},   {"sub", Pw::Sub},           {"mul", Pw::Mul},
      {"div", Pw::Div},   {"neg", Pw::Neg},           {"relu", Pw::Relu},
      {"exp", Pw::Exp},   {"log", Pw::Log},           {"relu_grad", Pw::ReluGrad},
      {"select", Pw::Select},
  };
  return table;
}

size_t pointwiseArity(Pw op) {
  switch (op) {
    case Pw::Neg:
    case Pw::Relu:
    case Pw::Exp:
    case Pw::Log: return 1;
    case Pw::Select: return 3;
    default: return 2;
  }
}

template <bool AS, class F>
void unaryLoop(float* out, size_t n, const float* a, F f) {
  for (size_t i = 0; i < n; ++i) out[i] = f(AS ? a[0] : a[i]);
}

template <bool AS, bool BS, class F>
void binaryLoop(float* out, size_t n, const float* a, const float* b, F f) {
  for (size_t i = 0; i < n; ++i) out[i] = f(AS ? a[0] : a[i], BS ? b[0] : b[i]);
}

template <class F>
void binaryDispatch(float* out, size_t n, const float* a, bool as, const float* b, bool bs, F f) {
  if (as && bs) binaryLoop<true, true>(out, n, a, b, f);
  else if (as) binaryLoop<true, false>(out, n, a, b, f);
  else if (bs) binaryLoop<false, true>(out, n, a, b, f);
  else binaryLoop<false, false>(out, n, a, b, f);
}

template <class F>
void unaryDispatch(float* out, size_t n, const float* a, bool as, F f) {
  if (as) unaryLoop<true>(out, n, a, f);
  else unaryLoop<false>(out, n, a, f);
}

void applyPointwise(Pw op, std::span<float> out, std::span<const float* const> in,
                    std::span<const bool> sc) {
  float* o = out.data();
  const size_t n = out.size();
  switch (op) {
    case Pw::Add: binaryDispatch(o, n, in[0], sc[0], in[1], sc[1], [](float a, float b) { return a + b; }); break;
    case Pw::Sub: binaryDispatch(o, n, in[0], sc[0], in[1], sc[1], [](float a, float b) { return a - b; }); break;
    case Pw::Mul: binaryDispatch(o, n, in[0], sc[0], in[1], sc[1], [](float a, float b) { return a * b; }); break;
    case Pw::Div: binaryDispatch(o, n, in[0], sc[0], in[1], sc[1], [](float a, float b) { return a / b; }); break;
    case Pw::ReluGrad:
      binaryDispatch(o, n, in[0], sc[0], in[1], sc[1], [](float g, float x) { return x > 0.0f ? g : 0.0f; });
      break;
    case Pw::Neg: unaryDispatch(o, n, in[0], sc[0], [](float a) { return -a; }); break;
    case Pw::Relu: unaryDispatch(o, n, in[0], sc[0], [](float a) { return a > 0.0f ? a : 0.0f; }); break;
    case Pw::Exp: unaryDispatch(o, n, in[0], sc[0], [](float a) { return std::exp(a); }); break;
    case Pw::Log: unaryDispatch(o, n, in[0], sc[0], [](float a) { return std::log(a); }); break;
    case Pw::Select:
      for (size_t i = 0; i < n; ++i) {
        float c = sc[0] ? in[0][0] : in[0][i];
        float a = sc[1] ? in[1][0] : in[1][i];
        float b = sc[2] ? in[2][0] : in[2][i];
        o[i] = c != 0.0f ? a : b;
      }
      break;
  }
}

const Tensor& tensorArg(const std::vector<KernelArg>& args, size_t i, std::string_view op) {
  if (i >= args.size()) {
    throw Error(ErrorKind::InvalidArgument, std::string(op) + ": missing operand " + std::to_string(i));
  }
  if (auto* t = std::get_if<Tensor>(&args[i])) return *t;
  throw Error(ErrorKind::TypeMismatch, std::string(op) + ": operand " + std::to_string(i) + " must be a tensor");
}

int64_t intArg(const std::vector<KernelArg>& args, size_t i, std::string_view op) {
  if (i >= args.size()) {
    throw Error(ErrorKind::InvalidArgument, std::string(op) + ": missing operand " + std::to_string(i));
  }
  if (auto* v = std::get_if<int64_t>(&args[i])) return *v;
  throw Error(ErrorKind::TypeMismatch, std::string(op) + ": operand " + std::to_string(i) + " must be i64");
}

const Shape& shapeArg(std::span<const ArgShape> args, size_t i, std::string_view op) {
  if (i >= args.size()) {
    throw Error(ErrorKind::InvalidArgument, std::string(op) + ": missing operand " + std::to_string(i));
  }
  if (auto* s = std::get_if<Shape>(&args[i])) return *s;
  throw Error(ErrorKind::TypeMismatch, std::string(op) + ": operand " + std::to_string(i) + " must be a tensor");
}

void expectArity(std::string_view op, size_t got, size_t want) {
  if (got != want) {
    throw Error(ErrorKind::InvalidArgument, std::string(op) + " expects " + std::to_string(want) +
                                                " operands, got " + std::to_string(got));
  }
}

/// Calls f(outFlat, inOffset) for every element of `out`, where `in` is
/// broadcast against `out` (trailing alignment, size-1 dims repeat).
template <class F>
void forEachBroadcastOffset(const Shape& out, const Shape& in, F f) {
  const size_t rank = out.rank();
  const size_t lead = rank - in.rank();
  std::vector<int64_t> inStride(rank, 0);
  int64_t stride = 1;
  for (size_t k = in.rank(); k-- > 0;) {
    inStride[lead + k] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  const int64_t total = out.numel();
  if (total == 0) return;
  std::vector<int64_t> idx(rank, 0);
  int64_t offset = 0;
  for (int64_t flat = 0; flat < total; ++flat) {
    f(flat, offset);
    for (size_t k = rank; k-- > 0;) {
      ++idx[k];
      offset += inStride[k];
      if (idx[k] < out[k]) break;
      offset -= inStride[k] * idx[k];
      idx[k] = 0;
    }
  }
}

Tensor pointwise(Pw op, std::string_view name, std::span<const Tensor* const> inputs) {
  if (inputs.size() != pointwiseArity(op)) {
    throw Error(ErrorKind::InvalidArgument, std::string(name) + " arity mismatch");
  }
  Shape out = inputs[0]->shape();
  for (size_t i = 1; i < inputs.size(); ++i) out = broadcastShapes(out, inputs[i]->shape());
  std::vector<Tensor> expanded;
  expanded.reserve(inputs.size());
  std::vector<const float*> ptrs;
  std::vector<char> scalar;
  for (const Tensor* t : inputs) {
    if (t->shape() == out || t->numel() == 1) {
      expanded.push_back(*t);
    } else {
      expanded.push_back(broadcastTo(*t, out));
    }
  }
  bool flags[3] = {false, false, false};
  for (size_t i = 0; i < expanded.size(); ++i) {
    ptrs.push_back(expanded[i].data().data());
    flags[i] = expanded[i].shape() != out;
  }
  std::vector<float> result(static_cast<size_t>(out.numel()));
  applyPointwise(op, result, ptrs, std::span<const bool>(flags, expanded.size()));
  return Tensor(out, std::move(result));
}

struct ConvGeometry {
  int64_t n, h, w, c, kh, kw, cout, sh, sw, outH, outW, padTop, padLeft;
};

ConvGeometry convGeometry(const Shape& input, const Shape& filter, const Conv2dOptions& o) {
  if (input.rank() != 4 || filter.rank() != 4) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d expects NHWC input and HWIO filter, got " +
                                              input.str() + " and " + filter.str());
  }
  if (input[3] != filter[2]) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d channel mismatch: input " + input.str() +
                                              ", filter " + filter.str());
  }
  if (o.strideH < 1 || o.strideW < 1) throw Error(ErrorKind::InvalidArgument, "conv2d strides must be >= 1");
  ConvGeometry g{input[0], input[1], input[2], input[3], filter[0], filter[1], filter[3],
                 o.strideH, o.strideW, 0, 0, 0, 0};
  if (o.padding == Padding::Same) {
    g.outH = (g.h + g.sh - 1) / g.sh;
    g.outW = (g.w + g.sw - 1) / g.sw;
    int64_t padH = std::max<int64_t>((g.outH - 1) * g.sh + g.kh - g.h, 0);
    int64_t padW = std::max<int64_t>((g.outW - 1) * g.sw + g.kw - g.w, 0);
    // Odd totals put the extra row/column on the high side.
    g.padTop = padH / 2;
    g.padLeft = padW / 2;
  } else {
    g.outH = g.h >= g.kh ? (g.h - g.kh) / g.sh + 1 : 0;
    g.outW = g.w >= g.kw ? (g.w - g.kw) / g.sw + 1 : 0;
  }
  if (g.outH <= 0 || g.outW <= 0) {
    throw Error(ErrorKind::ZeroSizeOutput, "conv2d of " + input.str() + " with filter " +
                                               filter.str() + " has empty output");
  }
  return g;
}

struct PoolGeometry {
  int64_t n, h, w, c, ph, pw, sh, sw, outH, outW;
};

PoolGeometry poolGeometry(const Shape& input, const Pool2dOptions& o) {
  if (input.rank() != 4) throw Error(ErrorKind::ShapeMismatch, "avgpool2d expects NHWC input, got " + input.str());
  if (o.poolH < 1 || o.poolW < 1 || o.strideH < 1 || o.strideW < 1) {
    throw Error(ErrorKind::InvalidArgument, "avgpool2d pool and strides must be >= 1");
  }
  if (input[1] < o.poolH || input[2] < o.poolW) {
    throw Error(ErrorKind::ShapeMismatch, "pool window larger than input " + input.str());
  }
  return {input[0], input[1], input[2], input[3], o.poolH, o.poolW, o.strideH, o.strideW,
          (input[1] - o.poolH) / o.strideH + 1, (input[2] - o.poolW) / o.strideW + 1};
}

Shape keepDimsShape(const Shape& input, std::span<const int64_t> axes) {
  std::vector<int64_t> dims = input.dims();
  for (int64_t a : normalizeAxes(axes, input.rank())) dims[static_cast<size_t>(a)] = 1;
  return Shape(std::move(dims));
}

Tensor makeConst(const Attributes& attrs) {
  std::vector<double> values = attrNumbers(attrs, "value");
  auto shapeAttr = attrIntsOpt(attrs, "shape");
  const bool isList = !std::holds_alternative<int64_t>(attrs.at("value")) &&
                      !std::holds_alternative<double>(attrs.at("value"));
  Shape shape = shapeAttr ? Shape(*shapeAttr)
                          : (isList ? Shape{static_cast<int64_t>(values.size())} : Shape{});
  if (!isList) return Tensor::fill(shape, static_cast<float>(values[0]));
  if (static_cast<int64_t>(values.size()) != shape.numel()) {
    throw Error(ErrorKind::CountMismatch, "const payload has " + std::to_string(values.size()) +
                                              " values for shape " + shape.str());
  }
  std::vector<float> data(values.begin(), values.end());
  return Tensor(shape, std::move(data));
}

Shape constShape(const Attributes& attrs) {
  auto shapeAttr = attrIntsOpt(attrs, "shape");
  if (shapeAttr) return Shape(*shapeAttr);
  const AttrValue& v = attrs.at("value");
  if (auto* l = std::get_if<std::vector<double>>(&v)) return Shape{static_cast<int64_t>(l->size())};
  if (auto* l = std::get_if<std::vector<int64_t>>(&v)) return Shape{static_cast<int64_t>(l->size())};
  return Shape{};
}

Tensor compare(bool less, const Tensor& a, const Tensor& b) {
  if (a.numel() != 1 || b.numel() != 1) {
    throw Error(ErrorKind::ShapeMismatch, "comparisons take scalar operands");
  }
  float x = a.item(), y = b.item();
  return Tensor::scalar((less ? x < y : x > y) ? 1.0f : 0.0f);
}

}  // namespace

bool isElementwiseOpcode(std::string_view opcode) { return pointwiseTable().count(opcode) > 0; }

void applyElementwise(std::string_view opcode, std::span<float> out,
                      std::span<const float* const> inputs, std::span<const bool> isScalar) {
  auto it = pointwiseTable().find(opcode);
  if (it == pointwiseTable().end()) {
    throw Error(ErrorKind::UnknownOpcode, std::string(opcode) + " is not pointwise");
  }
  applyPointwise(it->second, out, inputs, isScalar);
}

int elementwiseCode(std::string_view opcode) {
  auto it = pointwiseTable().find(opcode);
  if (it == pointwiseTable().end()) {
    throw Error(ErrorKind::UnknownOpcode, std::string(opcode) + " is not pointwise");
  }
  return static_cast<int>(it->second);
}

size_t elementwiseArity(int code) { return pointwiseArity(static_cast<Pw>(code)); }

void applyElementwise(int code, std::span<float> out, std::span<const float* const> inputs,
                      std::span<const bool> isScalar) {
  applyPointwise(static_cast<Pw>(code), out, inputs, isScalar);
}

bool isTensorOpcode(std::string_view opcode) {
  static const std::unordered_map<std::string_view, int> ops = {
      {"const", 0}, {"add", 0}, {"sub", 0}, {"mul", 0}, {"div", 0}, {"neg", 0}, {"relu", 0},
      {"exp", 0}, {"log", 0}, {"matmul", 0}, {"conv2d", 0}, {"avgpool2d", 0}, {"reshape", 0},
      {"transpose2d", 0}, {"reduce_sum", 0}, {"reduce_mean", 0}, {"softmax_xent", 0},
      {"subscript_get", 0}, {"subscript_set", 0}, {"lt", 0}, {"gt", 0}, {"select", 0},
      {"broadcast_like", 0}, {"zeros_like", 0}, {"sum_to", 0}, {"reshape_like", 0},
      {"relu_grad", 0}, {"reduce_sum_grad", 0}, {"reduce_mean_grad", 0},
      {"conv2d_input_grad", 0}, {"conv2d_filter_grad", 0}, {"avgpool2d_grad", 0},
      {"softmax_xent_grad", 0}, {"subscript_accum", 0},
  };
  return ops.count(opcode) > 0;
}

Conv2dOptions convOptions(const Attributes& attrs) {
  auto strides = attrInts(attrs, "strides", {1, 1});
  if (strides.size() != 2) throw Error(ErrorKind::InvalidArgument, "strides must have two entries");
  std::string padding = attrString(attrs, "padding", "valid");
  if (padding != "same" && padding != "valid") {
    throw Error(ErrorKind::InvalidArgument, "padding must be same or valid, got " + padding);
  }
  return {strides[0], strides[1], padding == "same" ? Padding::Same : Padding::Valid};
}

Pool2dOptions poolOptions(const Attributes& attrs) {
  auto pool = attrInts(attrs, "pool", {2, 2});
  auto strides = attrInts(attrs, "strides", pool);
  if (pool.size() != 2 || strides.size() != 2) {
    throw Error(ErrorKind::InvalidArgument, "pool and strides must have two entries");
  }
  return {pool[0], pool[1], strides[0], strides[1]};
}

Shape conv2dOutputShape(const Shape& input, const Shape& filter, const Conv2dOptions& options) {
  ConvGeometry g = convGeometry(input, filter, options);
  return Shape{g.n, g.outH, g.outW, g.cout};
}

Shape pool2dOutputShape(const Shape& input, const Pool2dOptions& options) {
  PoolGeometry g = poolGeometry(input, options);
  return Shape{g.n, g.outH, g.outW, g.c};
}

Shape reshapeTarget(int64_t numel, std::span<const int64_t> dims) {
  std::vector<int64_t> out(dims.begin(), dims.end());
  int64_t known = 1;
  int inferred = -1;
  for (size_t i = 0; i < out.size(); ++i) {
    if (out[i] == -1) {
      if (inferred >= 0) throw Error(ErrorKind::CountMismatch, "reshape allows one inferred extent");
      inferred = static_cast<int>(i);
    } else if (out[i] < 0) {
      throw Error(ErrorKind::CountMismatch, "negative extent in reshape target");
    } else {
      known *= out[i];
    }
  }
  if (inferred >= 0) {
    if (known == 0 || numel % known != 0) {
      throw Error(ErrorKind::CountMismatch, "cannot infer reshape extent for " + std::to_string(numel) + " elements");
    }
    out[static_cast<size_t>(inferred)] = numel / known;
  } else if (known != numel) {
    throw Error(ErrorKind::CountMismatch, "reshape of " + std::to_string(numel) + " elements to " +
                                              Shape(out).str());
  }
  return Shape(std::move(out));
}

std::vector<int64_t> normalizeAxes(std::span<const int64_t> axes, size_t rank) {
  std::vector<int64_t> out;
  if (axes.empty()) {
    for (size_t i = 0; i < rank; ++i) out.push_back(static_cast<int64_t>(i));
    return out;
  }
  std::vector<bool> seen(rank, false);
  for (int64_t a : axes) {
    int64_t n = a < 0 ? a + static_cast<int64_t>(rank) : a;
    if (n < 0 || n >= static_cast<int64_t>(rank) || seen[static_cast<size_t>(n)]) {
      throw Error(ErrorKind::InvalidAxis, "axis " + std::to_string(a) + " invalid for rank " + std::to_string(rank));
    }
    seen[static_cast<size_t>(n)] = true;
    out.push_back(n);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Shape reducedShape(const Shape& input, std::span<const int64_t> axes) {
  auto norm = normalizeAxes(axes, input.rank());
  std::vector<int64_t> dims;
  for (size_t i = 0; i < input.rank(); ++i) {
    if (!std::binary_search(norm.begin(), norm.end(), static_cast<int64_t>(i))) dims.push_back(input[i]);
  }
  return Shape(std::move(dims));
}

Tensor broadcastTo(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (a.rank() > shape.rank() || broadcastShapes(a.shape(), shape) != shape) {
    throw Error(ErrorKind::ShapeMismatch, "cannot broadcast " + a.shape().str() + " to " + shape.str());
  }
  std::vector<float> out(static_cast<size_t>(shape.numel()));
  auto src = a.data();
  forEachBroadcastOffset(shape, a.shape(), [&](int64_t flat, int64_t off) {
    out[static_cast<size_t>(flat)] = src[static_cast<size_t>(off)];
  });
  return Tensor(shape, std::move(out));
}

Tensor sumTo(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  if (shape.rank() > g.rank() || broadcastShapes(shape, g.shape()) != g.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "cannot sum " + g.shape().str() + " down to " + shape.str());
  }
  std::vector<double> acc(static_cast<size_t>(shape.numel()), 0.0);
  auto src = g.data();
  forEachBroadcastOffset(g.shape(), shape, [&](int64_t flat, int64_t off) {
    acc[static_cast<size_t>(off)] += src[static_cast<size_t>(flat)];
  });
  return Tensor(shape, std::vector<float>(acc.begin(), acc.end()));
}

Tensor reluGrad(const Tensor& g, const Tensor& x) {
  const Tensor* in[] = {&g, &x};
  return pointwise(Pw::ReluGrad, "relu_grad", in);
}

Tensor select(const Tensor& cond, const Tensor& a, const Tensor& b) {
  const Tensor* in[] = {&cond, &a, &b};
  return pointwise(Pw::Select, "select", in);
}

Tensor conv2dForward(const Tensor& input, const Tensor& filter, const Conv2dOptions& options) {
  const ConvGeometry g = convGeometry(input.shape(), filter.shape(), options);
  std::vector<float> out(static_cast<size_t>(g.n * g.outH * g.outW * g.cout), 0.0f);
  auto in = input.data();
  auto f = filter.data();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oh = 0; oh < g.outH; ++oh) {
      for (int64_t ow = 0; ow < g.outW; ++ow) {
        float* o = &out[static_cast<size_t>(((n * g.outH + oh) * g.outW + ow) * g.cout)];
        for (int64_t i = 0; i < g.kh; ++i) {
          const int64_t ih = oh * g.sh + i - g.padTop;
          if (ih < 0 || ih >= g.h) continue;
          for (int64_t j = 0; j < g.kw; ++j) {
            const int64_t iw = ow * g.sw + j - g.padLeft;
            if (iw < 0 || iw >= g.w) continue;
            const float* x = &in[static_cast<size_t>(((n * g.h + ih) * g.w + iw) * g.c)];
            const float* fr = &f[static_cast<size_t>((i * g.kw + j) * g.c * g.cout)];
            for (int64_t c = 0; c < g.c; ++c) {
              const float v = x[c];
              const float* fc = fr + c * g.cout;
              for (int64_t co = 0; co < g.cout; ++co) o[co] += v * fc[co];
            }
          }
        }
      }
    }
  }
  return Tensor(Shape{g.n, g.outH, g.outW, g.cout}, std::move(out));
}

Tensor conv2dInputGrad(const Tensor& grad, const Tensor& filter, const Shape& inputShape,
                       const Conv2dOptions& options) {
  const ConvGeometry g = convGeometry(inputShape, filter.shape(), options);
  if (grad.shape() != Shape{g.n, g.outH, g.outW, g.cout}) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d input gradient: cotangent shape " + grad.shape().str());
  }
  std::vector<float> dx(static_cast<size_t>(inputShape.numel()), 0.0f);
  auto gd = grad.data();
  auto f = filter.data();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oh = 0; oh < g.outH; ++oh) {
      for (int64_t ow = 0; ow < g.outW; ++ow) {
        const float* go = &gd[static_cast<size_t>(((n * g.outH + oh) * g.outW + ow) * g.cout)];
        for (int64_t i = 0; i < g.kh; ++i) {
          const int64_t ih = oh * g.sh + i - g.padTop;
          if (ih < 0 || ih >= g.h) continue;
          for (int64_t j = 0; j < g.kw; ++j) {
            const int64_t iw = ow * g.sw + j - g.padLeft;
            if (iw < 0 || iw >= g.w) continue;
            float* d = &dx[static_cast<size_t>(((n * g.h + ih) * g.w + iw) * g.c)];
            const float* fr = &f[static_cast<size_t>((i * g.kw + j) * g.c * g.cout)];
            for (int64_t c = 0; c < g.c; ++c) {
              const float* fc = fr + c * g.cout;
              float s = 0.0f;
              for (int64_t co = 0; co < g.cout; ++co) s += go[co] * fc[co];
              d[c] += s;
            }
          }
        }
      }
    }
  }
  return Tensor(inputShape, std::move(dx));
}

Tensor conv2dFilterGrad(const Tensor& input, const Tensor& grad, const Shape& filterShape,
                        const Conv2dOptions& options) {
  const ConvGeometry g = convGeometry(input.shape(), filterShape, options);
  if (grad.shape() != Shape{g.n, g.outH, g.outW, g.cout}) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d filter gradient: cotangent shape " + grad.shape().str());
  }
  std::vector<float> df(static_cast<size_t>(filterShape.numel()), 0.0f);
  auto gd = grad.data();
  auto in = input.data();
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oh = 0; oh < g.outH; ++oh) {
      for (int64_t ow = 0; ow < g.outW; ++ow) {
        const float* go = &gd[static_cast<size_t>(((n * g.outH + oh) * g.outW + ow) * g.cout)];
        for (int64_t i = 0; i < g.kh; ++i) {
          const int64_t ih = oh * g.sh + i - g.padTop;
          if (ih < 0 || ih >= g.h) continue;
          for (int64_t j = 0; j < g.kw; ++j) {
            const int64_t iw = ow * g.sw + j - g.padLeft;
            if (iw < 0 || iw >= g.w) continue;
            const float* x = &in[static_cast<size_t>(((n * g.h + ih) * g.w + iw) * g.c)];
            float* dr = &df[static_cast<size_t>((i * g.kw + j) * g.c * g.cout)];
            for (int64_t c = 0; c < g.c; ++c) {
              const float v = x[c];
              float* dc = dr + c * g.cout;
              for (int64_t co = 0; co < g.cout; ++co) dc[co] += v * go[co];
            }
          }
        }
      }
    }
  }
  return Tensor(filterShape, std::move(df));
}

Tensor avgPool2dForward(const Tensor& input, const Pool2dOptions& options) {
  const PoolGeometry g = poolGeometry(input.shape(), options);
  std::vector<float> out(static_cast<size_t>(g.n * g.outH * g.outW * g.c), 0.0f);
  auto in = input.data();
  const float count = static_cast<float>(g.ph * g.pw);
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oh = 0; oh < g.outH; ++oh) {
      for (int64_t ow = 0; ow < g.outW; ++ow) {
        float* o = &out[static_cast<size_t>(((n * g.outH + oh) * g.outW + ow) * g.c)];
        for (int64_t i = 0; i < g.ph; ++i) {
          for (int64_t j = 0; j < g.pw; ++j) {
            const float* x =
                &in[static_cast<size_t>(((n * g.h + oh * g.sh + i) * g.w + ow * g.sw + j) * g.c)];
            for (int64_t c = 0; c < g.c; ++c) o[c] += x[c];
          }
        }
        for (int64_t c = 0; c < g.c; ++c) o[c] /= count;
      }
    }
  }
  return Tensor(Shape{g.n, g.outH, g.outW, g.c}, std::move(out));
}

Tensor avgPool2dGrad(const Tensor& grad, const Shape& inputShape, const Pool2dOptions& options) {
  const PoolGeometry g = poolGeometry(inputShape, options);
  if (grad.shape() != Shape{g.n, g.outH, g.outW, g.c}) {
    throw Error(ErrorKind::ShapeMismatch, "avgpool2d gradient: cotangent shape " + grad.shape().str());
  }
  std::vector<float> dx(static_cast<size_t>(inputShape.numel()), 0.0f);
  auto gd = grad.data();
  const float count = static_cast<float>(g.ph * g.pw);
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t oh = 0; oh < g.outH; ++oh) {
      for (int64_t ow = 0; ow < g.outW; ++ow) {
        const float* go = &gd[static_cast<size_t>(((n * g.outH + oh) * g.outW + ow) * g.c)];
        for (int64_t i = 0; i < g.ph; ++i) {
          for (int64_t j = 0; j < g.pw; ++j) {
            float* d = &dx[static_cast<size_t>(((n * g.h + oh * g.sh + i) * g.w + ow * g.sw + j) * g.c)];
            for (int64_t c = 0; c < g.c; ++c) d[c] += go[c] / count;
          }
        }
      }
    }
  }
  return Tensor(inputShape, std::move(dx));
}

Tensor matmulForward(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw Error(ErrorKind::ShapeMismatch, "matmul of " + a.shape().str() + " and " + b.shape().str());
  }
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<float> out(static_cast<size_t>(m * n), 0.0f);
  auto x = a.data();
  auto y = b.data();
  for (int64_t i = 0; i < m; ++i) {
    float* o = &out[static_cast<size_t>(i * n)];
    for (int64_t p = 0; p < k; ++p) {
      const float v = x[static_cast<size_t>(i * k + p)];
      const float* row = &y[static_cast<size_t>(p * n)];
      for (int64_t j = 0; j < n; ++j) o[j] += v * row[j];
    }
  }
  return Tensor(Shape{m, n}, std::move(out));
}

Tensor transposeForward(const Tensor& a) {
  if (a.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "transpose2d of " + a.shape().str());
  const int64_t r = a.shape()[0], c = a.shape()[1];
  std::vector<float> out(static_cast<size_t>(r * c));
  auto x = a.data();
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = x[static_cast<size_t>(i * c + j)];
  }
  return Tensor(Shape{c, r}, std::move(out));
}

Tensor reduceSumForward(const Tensor& a, std::span<const int64_t> axes) {
  Shape keep = keepDimsShape(a.shape(), axes);
  Shape out = reducedShape(a.shape(), axes);
  if (keep == a.shape()) return a.reshaped(out);
  return sumTo(a, keep).reshaped(out);
}

int64_t reductionCount(const Shape& input, std::span<const int64_t> axes) {
  int64_t count = 1;
  for (int64_t ax : normalizeAxes(axes, input.rank())) count *= input[static_cast<size_t>(ax)];
  return count;
}

Tensor reduceMeanForward(const Tensor& a, std::span<const int64_t> axes) {
  Shape keep = keepDimsShape(a.shape(), axes);
  Shape out = reducedShape(a.shape(), axes);
  const double count = static_cast<double>(reductionCount(a.shape(), axes));
  std::vector<double> acc(static_cast<size_t>(keep.numel()), 0.0);
  auto src = a.data();
  forEachBroadcastOffset(a.shape(), keep, [&](int64_t flat, int64_t off) {
    acc[static_cast<size_t>(off)] += src[static_cast<size_t>(flat)];
  });
  std::vector<float> result(acc.size());
  for (size_t i = 0; i < acc.size(); ++i) result[i] = static_cast<float>(acc[i] / count);
  return Tensor(out, std::move(result));
}

Tensor reduceSumGrad(const Tensor& g, const Shape& inputShape, std::span<const int64_t> axes) {
  Shape keep = keepDimsShape(inputShape, axes);
  if (g.numel() != keep.numel()) {
    throw Error(ErrorKind::ShapeMismatch, "reduce gradient: cotangent " + g.shape().str() +
                                              " does not match reduced " + inputShape.str());
  }
  return broadcastTo(g.reshaped(keep), inputShape);
}

Tensor reduceMeanGrad(const Tensor& g, const Shape& inputShape, std::span<const int64_t> axes) {
  Tensor spread = reduceSumGrad(g, inputShape, axes);
  const float count = static_cast<float>(reductionCount(inputShape, axes));
  std::vector<float> out = spread.toVector();
  for (float& v : out) v /= count;
  return Tensor(inputShape, std::move(out));
}

std::vector<int64_t> labelsFromTensor(const Tensor& labels, int64_t classes) {
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(labels.numel()));
  for (float v : labels.data()) {
    auto label = static_cast<int64_t>(v);
    if (static_cast<float>(label) != v || label < 0 || label >= classes) {
      throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(v) + " outside [0, " +
                                                  std::to_string(classes) + ")");
    }
    out.push_back(label);
  }
  return out;
}

void checkXentShapes(const Shape& logits, const Shape& labels) {
  if (logits.rank() != 2 || labels.rank() != 1 || labels[0] != logits[0]) {
    throw Error(ErrorKind::ShapeMismatch, "softmax_xent expects [N,C] logits and [N] labels, got " +
                                              logits.str() + " and " + labels.str());
  }
  if (logits[0] == 0) throw Error(ErrorKind::ShapeMismatch, "softmax_xent on an empty batch");
}

Tensor softmaxXentForward(const Tensor& logits, const Tensor& labelTensor) {
  checkXentShapes(logits.shape(), labelTensor.shape());
  const int64_t n = logits.shape()[0], c = logits.shape()[1];
  auto labels = labelsFromTensor(labelTensor, c);
  auto l = logits.data();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = &l[static_cast<size_t>(i * c)];
    double m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max<double>(m, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j]) - m);
    total += (m + std::log(s)) - row[labels[static_cast<size_t>(i)]];
  }
  return Tensor::scalar(static_cast<float>(total / static_cast<double>(n)));
}

Tensor softmaxCrossEntropyGrad(const Tensor& logits, const Tensor& labelTensor, const Tensor& seed) {
  checkXentShapes(logits.shape(), labelTensor.shape());
  const int64_t n = logits.shape()[0], c = logits.shape()[1];
  auto labels = labelsFromTensor(labelTensor, c);
  const double scale = static_cast<double>(seed.item()) / static_cast<double>(n);
  auto l = logits.data();
  std::vector<float> out(static_cast<size_t>(n * c));
  for (int64_t i = 0; i < n; ++i) {
    const float* row = &l[static_cast<size_t>(i * c)];
    double m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max<double>(m, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j]) - m);
    for (int64_t j = 0; j < c; ++j) {
      double p = std::exp(static_cast<double>(row[j]) - m) / s;
      if (j == labels[static_cast<size_t>(i)]) p -= 1.0;
      out[static_cast<size_t>(i * c + j)] = static_cast<float>(p * scale);
    }
  }
  return Tensor(logits.shape(), std::move(out));
}

Tensor subscriptSet(const Tensor& t, int64_t index, float value) {
  Tensor out = t;
  out.set(index, value);
  return out;
}

Tensor subscriptAccumulate(Tensor acc, const Shape& shape, int64_t index, float dx) {
  if (acc.shape() != shape) acc = broadcastTo(acc, shape);
  if (index < 0 || index >= acc.numel()) {
    throw Error(ErrorKind::IndexOutOfBounds, "subscript_accum index " + std::to_string(index));
  }
  acc.mutableData()[static_cast<size_t>(index)] += dx;
  return acc;
}

namespace {

using Runner = std::function<Tensor(const Attributes&, std::vector<KernelArg>&)>;

Tensor runPointwise(std::string_view name, std::vector<KernelArg>& args) {
  Pw op = pointwiseTable().at(name);
  expectArity(name, args.size(), pointwiseArity(op));
  std::vector<const Tensor*> ptrs;
  for (size_t i = 0; i < args.size(); ++i) ptrs.push_back(&tensorArg(args, i, name));
  return pointwise(op, name, ptrs);
}

const std::unordered_map<std::string_view, Runner>& runners() {
  static const std::unordered_map<std::string_view, Runner> table = [] {
    std::unordered_map<std::string_view, Runner> t;
    for (const auto& [name, op] : pointwiseTable()) {
      std::string_view n = name;
      t[n] = [n](const Attributes&, std::vector<KernelArg>& a) { return runPointwise(n, a); };
    }
    t["const"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("const", a.size(), 0);
      return makeConst(at);
    };
    t["matmul"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("matmul", a.size(), 2);
      return matmulForward(tensorArg(a, 0, "matmul"), tensorArg(a, 1, "matmul"));
    };
    t["conv2d"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("conv2d", a.size(), 2);
      return conv2dForward(tensorArg(a, 0, "conv2d"), tensorArg(a, 1, "conv2d"), convOptions(at));
    };
    t["avgpool2d"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("avgpool2d", a.size(), 1);
      return avgPool2dForward(tensorArg(a, 0, "avgpool2d"), poolOptions(at));
    };
    t["reshape"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("reshape", a.size(), 1);
      const Tensor& x = tensorArg(a, 0, "reshape");
      return x.reshaped(reshapeTarget(x.numel(), attrInts(at, "shape", {})));
    };
    t["transpose2d"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("transpose2d", a.size(), 1);
      return transposeForward(tensorArg(a, 0, "transpose2d"));
    };
    t["reduce_sum"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("reduce_sum", a.size(), 1);
      return reduceSumForward(tensorArg(a, 0, "reduce_sum"), attrInts(at, "axes", {}));
    };
    t["reduce_mean"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("reduce_mean", a.size(), 1);
      return reduceMeanForward(tensorArg(a, 0, "reduce_mean"), attrInts(at, "axes", {}));
    };
    t["softmax_xent"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("softmax_xent", a.size(), 2);
      return softmaxXentForward(tensorArg(a, 0, "softmax_xent"), tensorArg(a, 1, "softmax_xent"));
    };
    t["subscript_get"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("subscript_get", a.size(), 2);
      return Tensor::scalar(tensorArg(a, 0, "subscript_get").at(intArg(a, 1, "subscript_get")));
    };
    t["subscript_set"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("subscript_set", a.size(), 3);
      return subscriptSet(tensorArg(a, 0, "subscript_set"), intArg(a, 1, "subscript_set"),
                          tensorArg(a, 2, "subscript_set").item());
    };
    t["lt"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("lt", a.size(), 2);
      return compare(true, tensorArg(a, 0, "lt"), tensorArg(a, 1, "lt"));
    };
    t["gt"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("gt", a.size(), 2);
      return compare(false, tensorArg(a, 0, "gt"), tensorArg(a, 1, "gt"));
    };
    t["broadcast_like"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("broadcast_like", a.size(), 2);
      return broadcastTo(tensorArg(a, 0, "broadcast_like"), tensorArg(a, 1, "broadcast_like").shape());
    };
    t["zeros_like"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("zeros_like", a.size(), 1);
      return Tensor::zeros(tensorArg(a, 0, "zeros_like").shape());
    };
    t["sum_to"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("sum_to", a.size(), 2);
      return sumTo(tensorArg(a, 0, "sum_to"), tensorArg(a, 1, "sum_to").shape());
    };
    t["reshape_like"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("reshape_like", a.size(), 2);
      return tensorArg(a, 0, "reshape_like").reshaped(tensorArg(a, 1, "reshape_like").shape());
    };
    t["reduce_sum_grad"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("reduce_sum_grad", a.size(), 2);
      return reduceSumGrad(tensorArg(a, 0, "reduce_sum_grad"), tensorArg(a, 1, "reduce_sum_grad").shape(),
                           attrInts(at, "axes", {}));
    };
    t["reduce_mean_grad"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("reduce_mean_grad", a.size(), 2);
      return reduceMeanGrad(tensorArg(a, 0, "reduce_mean_grad"),
                            tensorArg(a, 1, "reduce_mean_grad").shape(), attrInts(at, "axes", {}));
    };
    t["conv2d_input_grad"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("conv2d_input_grad", a.size(), 3);
      return conv2dInputGrad(tensorArg(a, 0, "conv2d_input_grad"), tensorArg(a, 1, "conv2d_input_grad"),
                             tensorArg(a, 2, "conv2d_input_grad").shape(), convOptions(at));
    };
    t["conv2d_filter_grad"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("conv2d_filter_grad", a.size(), 3);
      return conv2dFilterGrad(tensorArg(a, 0, "conv2d_filter_grad"),
                              tensorArg(a, 1, "conv2d_filter_grad"),
                              tensorArg(a, 2, "conv2d_filter_grad").shape(), convOptions(at));
    };
    t["avgpool2d_grad"] = [](const Attributes& at, std::vector<KernelArg>& a) {
      expectArity("avgpool2d_grad", a.size(), 2);
      return avgPool2dGrad(tensorArg(a, 0, "avgpool2d_grad"), tensorArg(a, 1, "avgpool2d_grad").shape(),
                           poolOptions(at));
    };
    t["softmax_xent_grad"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("softmax_xent_grad", a.size(), 3);
      return softmaxCrossEntropyGrad(tensorArg(a, 0, "softmax_xent_grad"),
                                     tensorArg(a, 1, "softmax_xent_grad"),
                                     tensorArg(a, 2, "softmax_xent_grad"));
    };
    t["subscript_accum"] = [](const Attributes&, std::vector<KernelArg>& a) {
      expectArity("subscript_accum", a.size(), 4);
      Tensor acc = std::move(std::get<Tensor>(a[0]));
      return subscriptAccumulate(std::move(acc), tensorArg(a, 1, "subscript_accum").shape(),
                                 intArg(a, 2, "subscript_accum"), tensorArg(a, 3, "subscript_accum").item());
    };
    return t;
  }();
  return table;
}

}  // namespace

Tensor runKernel(std::string_view opcode, const Attributes& attrs, std::vector<KernelArg> args) {
  auto it = runners().find(opcode);
  if (it == runners().end()) throw Error(ErrorKind::UnknownOpcode, "no kernel for '" + std::string(opcode) + "'");
  return it->second(attrs, args);
}

Shape inferShape(std::string_view op, const Attributes& attrs, std::span<const ArgShape> args) {
  auto S = [&](size_t i) -> const Shape& { return shapeArg(args, i, op); };
  if (isElementwiseOpcode(op)) {
    expectArity(op, args.size(), pointwiseArity(pointwiseTable().at(op)));
    Shape out = S(0);
    for (size_t i = 1; i < args.size(); ++i) out = broadcastShapes(out, S(i));
    return out;
  }
  if (op == "const") return constShape(attrs);
  if (op == "matmul") {
    expectArity(op, args.size(), 2);
    const Shape &a = S(0), &b = S(1);
    if (a.rank() != 2 || b.rank() != 2 || a[1] != b[0]) {
      throw Error(ErrorKind::ShapeMismatch, "matmul of " + a.str() + " and " + b.str());
    }
    return Shape{a[0], b[1]};
  }
  if (op == "conv2d") return conv2dOutputShape(S(0), S(1), convOptions(attrs));
  if (op == "avgpool2d") return pool2dOutputShape(S(0), poolOptions(attrs));
  if (op == "reshape") return reshapeTarget(S(0).numel(), attrInts(attrs, "shape", {}));
  if (op == "transpose2d") {
    if (S(0).rank() != 2) throw Error(ErrorKind::ShapeMismatch, "transpose2d of " + S(0).str());
    return Shape{S(0)[1], S(0)[0]};
  }
  if (op == "reduce_sum" || op == "reduce_mean") return reducedShape(S(0), attrInts(attrs, "axes", {}));
  if (op == "softmax_xent") {
    checkXentShapes(S(0), S(1));
    return Shape{};
  }
  if (op == "subscript_get" || op == "lt" || op == "gt") return Shape{};
  if (op == "subscript_set") return S(0);
  if (op == "broadcast_like") {
    if (S(0).rank() > S(1).rank() || broadcastShapes(S(0), S(1)) != S(1)) {
      throw Error(ErrorKind::ShapeMismatch, "cannot broadcast " + S(0).str() + " to " + S(1).str());
    }
    return S(1);
  }
  if (op == "sum_to") {
    if (S(1).rank() > S(0).rank() || broadcastShapes(S(1), S(0)) != S(0)) {
      throw Error(ErrorKind::ShapeMismatch, "cannot sum " + S(0).str() + " down to " + S(1).str());
    }
    return S(1);
  }
  if (op == "reshape_like") {
    if (S(0).numel() != S(1).numel()) throw Error(ErrorKind::CountMismatch, "reshape_like element counts differ");
    return S(1);
  }
  if (op == "zeros_like") return S(0);
  if (op == "reduce_sum_grad" || op == "reduce_mean_grad" || op == "avgpool2d_grad") return S(1);
  if (op == "conv2d_input_grad" || op == "conv2d_filter_grad" || op == "subscript_accum") return S(2 - (op == "subscript_accum"));
  if (op == "softmax_xent_grad") return S(0);
  throw Error(ErrorKind::UnknownOpcode, "no shape rule for '" + std::string(op) + "'");
}

}  // namespace tgrad::kernels
