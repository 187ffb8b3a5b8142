#include "random_programs.hpp"

#include <algorithm>
#include <cmath>

#include "tgrad/random.hpp"

namespace tgrad::testing {

namespace {

using ir::Type;

Type typeFor(const Shape& s) { return s.rank() == 0 ? Type::f32() : Type::tensor(s.dims()); }

struct Val {
  std::string name;
  Shape shape;
  /// Rough magnitude bound, used to keep exp and products in range.
  double bound = 1.0;
};

bool broadcastsInto(const Shape& small, const Shape& big) {
  if (small.rank() > big.rank()) return false;
  const size_t off = big.rank() - small.rank();
  for (size_t i = 0; i < small.rank(); ++i) {
    if (small[i] != 1 && small[i] != big[off + i]) return false;
  }
  return true;
}

class Generator {
 public:
  Generator(uint64_t seed, const ProgramOptions& o) : rng_(seed), o_(o) {}

  ir::Module run() {
    std::vector<ir::NamedType> params;
    std::vector<Shape> shapes;
    for (int i = 0; i < o_.params; ++i) shapes.push_back(randomShape());
    if (o_.conv) {
      int64_t h = 3 + static_cast<int64_t>(rng_.below(3)), w = 3 + static_cast<int64_t>(rng_.below(3));
      int64_t c = 1 + static_cast<int64_t>(rng_.below(2)), k = 1 + static_cast<int64_t>(rng_.below(3));
      shapes.push_back(Shape{1, h, w, c});
      shapes.push_back(Shape{k, k, c, 1 + static_cast<int64_t>(rng_.below(2))});
    }
    for (size_t i = 0; i < shapes.size(); ++i) params.push_back({"p" + std::to_string(i), typeFor(shapes[i])});

    ir::FunctionBuilder b("f", params, Type::f32());
    b_ = &b;
    std::vector<Val> pool;
    const size_t plain = static_cast<size_t>(o_.params);
    for (size_t i = 0; i < plain; ++i) pool.push_back({b.param(i), shapes[i], 1.0});
    if (o_.conv) convStage(pool, {b.param(plain), shapes[plain], 1.0}, {b.param(plain + 1), shapes[plain + 1], 1.0});

    switch (o_.form) {
      case ProgramForm::StraightLine: {
        steps(pool, o_.operations);
        b.ret(toScalar(combineTail(pool)).name);
        break;
      }
      case ProgramForm::Branching: branching(pool); break;
      case ProgramForm::Loop: loop(pool); break;
    }
    ir::Module m;
    m.add(b.finish());
    return m;
  }

 private:
  Shape randomShape() {
    switch (rng_.below(4)) {
      case 0: return Shape{};
      case 1: return Shape{extent()};
      default: return Shape{extent(), extent()};
    }
  }
  int64_t extent() { return 1 + static_cast<int64_t>(rng_.below(static_cast<uint64_t>(o_.maxExtent))); }
  float uniform(float lo, float hi) { return rng_.uniform(lo, hi); }

  const Val& pick(const std::vector<Val>& pool) {
    // Favor recent values so programs form chains rather than flat fans.
    if (pool.size() > 2 && rng_.below(2) == 0) return pool[pool.size() - 1 - rng_.below(2)];
    return pool[rng_.below(pool.size())];
  }

  Val constant(const Shape& shape, float lo, float hi) {
    if (shape.rank() == 0) return {b_->constant(uniform(lo, hi)), shape, std::max(std::abs(lo), std::abs(hi))};
    std::vector<double> values;
    for (int64_t i = 0; i < shape.numel(); ++i) values.push_back(uniform(lo, hi));
    return {b_->constantTensor(values, shape.dims()), shape, std::max(std::abs(lo), std::abs(hi))};
  }

  Val emit(const std::string& op, std::vector<std::string> operands, double bound, Attributes attrs = {}) {
    std::string name = b_->emit(op, std::move(operands), std::move(attrs));
    const Type& t = b_->typeOf(name);
    return {name, t.isF32() ? Shape{} : Shape(t.dims()), bound};
  }

  /// A partner for `a` whose broadcast with `a` keeps `a`'s shape when
  /// `keepShape` is set.
  Val partner(const std::vector<Val>& pool, const Val& a, bool keepShape) {
    std::vector<const Val*> ok;
    for (const auto& v : pool) {
      if (broadcastsInto(v.shape, a.shape) || (!keepShape && broadcastsInto(a.shape, v.shape))) ok.push_back(&v);
    }
    if (ok.empty() || rng_.below(5) == 0) return constant(rng_.below(2) ? Shape{} : a.shape, -1.0f, 1.0f);
    return *ok[rng_.below(ok.size())];
  }

  Val one() { return {b_->constant(1.0), Shape{}, 1.0}; }

  Val squashed(const Val& a, const Val& d) {
    // a / (d*d + 1): bounded by |a|, smooth everywhere.
    Val sq = emit("mul", {d.name, d.name}, d.bound * d.bound);
    Val den = emit("add", {sq.name, one().name}, sq.bound + 1);
    return emit("div", {a.name, den.name}, a.bound);
  }

  /// One random operation whose result has the shape of `a` when
  /// `keepShape` is set. Returns the new value.
  Val unit(std::vector<Val>& pool, const Val& a, bool keepShape) {
    for (int attempt = 0; attempt < 8; ++attempt) {
      switch (rng_.below(keepShape ? 7 : 14)) {
        case 0:
        case 1: {
          Val p = partner(pool, a, keepShape);
          const char* op = rng_.below(2) ? "add" : "sub";
          return emit(op, {a.name, p.name}, a.bound + p.bound);
        }
        case 2: {
          Val p = partner(pool, a, keepShape);
          if (a.bound * p.bound > 20) break;
          return emit("mul", {a.name, p.name}, a.bound * p.bound);
        }
        case 3: return emit("neg", {a.name}, a.bound);
        case 4:
          if (a.bound > 2) break;
          return emit("exp", {a.name}, std::exp(a.bound));
        case 5: {
          Val p = partner(pool, a, true);
          return squashed(a, p);
        }
        case 6: {
          if (o_.smooth) {
            Val sq = emit("mul", {a.name, a.name}, a.bound * a.bound);
            Val arg = emit("add", {sq.name, one().name}, sq.bound + 1);
            return emit("log", {arg.name}, std::log(arg.bound) + 1);
          }
          return emit("relu", {a.name}, a.bound);
        }
        case 7: {
          if (a.shape.rank() != 2) break;
          Val rhs = a;
          const Val* found = nullptr;
          for (const auto& v : pool) {
            if (v.shape.rank() == 2 && v.shape[0] == a.shape[1]) found = &v;
          }
          if (found && rng_.below(2)) rhs = *found;
          else rhs = emit("transpose2d", {a.name}, a.bound);
          double bound = a.bound * rhs.bound * static_cast<double>(a.shape[1]);
          if (bound > 30) break;
          return emit("matmul", {a.name, rhs.name}, bound);
        }
        case 8: {
          if (a.shape.rank() != 2) break;
          return emit("transpose2d", {a.name}, a.bound);
        }
        case 9: {
          if (a.shape.rank() == 0) break;
          std::vector<int64_t> axes;
          if (rng_.below(2)) axes.push_back(static_cast<int64_t>(rng_.below(a.shape.rank())));
          bool mean = rng_.below(2);
          double bound = mean ? a.bound : a.bound * static_cast<double>(a.shape.numel());
          return emit(mean ? "reduce_mean" : "reduce_sum", {a.name}, bound, {{"axes", axes}});
        }
        case 10: {
          if (a.shape.rank() == 0) break;
          std::vector<int64_t> target = rng_.below(2) ? std::vector<int64_t>{a.shape.numel()}
                                                      : std::vector<int64_t>{1, a.shape.numel()};
          return emit("reshape", {a.name}, a.bound, {{"shape", target}});
        }
        case 11: {
          if (a.shape.rank() == 0) break;
          int64_t index = static_cast<int64_t>(rng_.below(static_cast<uint64_t>(a.shape.numel())));
          std::string i = b_->constant(static_cast<double>(index), Type::i64());
          if (o_.nondifferentiable && rng_.below(2)) {
            Val v = partner(pool, Val{"", Shape{}, 1}, true);
            if (v.shape.rank() != 0) break;
            return emit("subscript_set", {a.name, i, v.name}, std::max(a.bound, v.bound));
          }
          return emit("subscript_get", {a.name, i}, a.bound);
        }
        case 12: {
          if (a.shape.rank() != 2 || a.bound > 10) break;
          std::vector<double> labels;
          for (int64_t r = 0; r < a.shape[0]; ++r) labels.push_back(static_cast<double>(rng_.below(static_cast<uint64_t>(a.shape[1]))));
          std::string y = b_->constantTensor(labels, {a.shape[0]});
          return emit("softmax_xent", {a.name, y}, a.bound * 2 + 3);
        }
        case 13: {
          if (o_.smooth || a.shape.rank() != 0) break;
          Val p = partner(pool, a, true);
          if (p.shape.rank() != 0) break;
          std::string c = b_->emit(rng_.below(2) ? "lt" : "gt", {a.name, p.name});
          Val r = pick(pool);
          Val s = partner(pool, r, true);
          if (!(s.shape == r.shape)) break;
          return emit("select", {c, r.name, s.name}, std::max(r.bound, s.bound));
        }
      }
    }
    return emit("neg", {a.name}, a.bound);
  }

  void steps(std::vector<Val>& pool, int n) {
    for (int i = 0; i < n; ++i) pool.push_back(unit(pool, pick(pool), false));
  }

  Val toScalar(const Val& v) {
    if (v.shape.rank() == 0) return v;
    return emit("reduce_mean", {v.name}, v.bound);
  }

  /// Sums the last few values so most of the program is live.
  Val combineTail(const std::vector<Val>& pool) {
    Val acc = toScalar(pool.back());
    const size_t extra = std::min<size_t>(pool.size() - 1, 2);
    for (size_t i = 0; i < extra; ++i) {
      Val s = toScalar(pool[pool.size() - 2 - i]);
      acc = emit("add", {acc.name, s.name}, acc.bound + s.bound);
    }
    return acc;
  }

  void convStage(std::vector<Val>& pool, const Val& image, const Val& filter) {
    const int64_t k = filter.shape[0];
    bool same = rng_.below(2) || k > image.shape[1] || k > image.shape[2];
    int64_t stride = 1 + static_cast<int64_t>(rng_.below(2));
    Attributes attrs{{"strides", std::vector<int64_t>{stride, stride}},
                     {"padding", std::string(same ? "same" : "valid")}};
    Val c = emit("conv2d", {image.name, filter.name}, static_cast<double>(k * k * image.shape[3]), attrs);
    if (c.shape[1] >= 2 && c.shape[2] >= 2 && rng_.below(2)) {
      c = emit("avgpool2d", {c.name}, c.bound,
               {{"pool", std::vector<int64_t>{2, 2}}, {"strides", std::vector<int64_t>{1, 1}}});
    }
    if (!o_.smooth && rng_.below(2)) c = emit("relu", {c.name}, c.bound);
    pool.push_back(emit("reshape", {c.name}, c.bound, {{"shape", std::vector<int64_t>{1, c.shape.numel()}}}));
  }

  void branching(std::vector<Val>& pool) {
    steps(pool, std::max(1, o_.operations / 3));
    Val s = toScalar(pick(pool));
    Val threshold = constant(Shape{}, -0.2f, 0.2f);
    std::string cond = b_->emit("gt", {s.name, threshold.name});
    Val v = pick(pool);
    std::string thenLabel = b_->addBlock("then", {{"", typeFor(v.shape)}});
    std::string elseLabel = b_->addBlock("else", {{"", typeFor(v.shape)}});
    std::string join = b_->addBlock("join", {{"", Type::f32()}});
    b_->condBr(cond, thenLabel, {v.name}, elseLabel, {v.name});
    for (const auto& label : {thenLabel, elseLabel}) {
      b_->setInsertionBlock(label);
      std::vector<Val> local = pool;
      local.push_back({b_->blockArg(label, 0), v.shape, v.bound});
      const int n = std::max(1, o_.operations / 3);
      for (int i = 0; i < n; ++i) local.push_back(unit(local, rng_.below(2) ? local.back() : pick(local), false));
      b_->br(join, {toScalar(local.back()).name});
    }
    b_->setInsertionBlock(join);
    Val r{b_->blockArg(join, 0), Shape{}, 10};
    Val out = rng_.below(2) ? emit("mul", {r.name, r.name}, 100) : r;
    b_->ret(out.name);
  }

  void loop(std::vector<Val>& pool) {
    steps(pool, std::max(1, o_.operations / 3));
    Val acc0 = pick(pool);
    std::string zero = b_->constant(0, Type::i64());
    std::string body = b_->addBlock("loop", {{"", Type::i64()}, {"", typeFor(acc0.shape)}});
    std::string exit = b_->addBlock("exit", {{"", typeFor(acc0.shape)}});
    b_->br(body, {zero, acc0.name});

    b_->setInsertionBlock(body);
    std::vector<Val> local = pool;
    Val acc{b_->blockArg(body, 1), acc0.shape, 2.0};
    local.push_back(acc);
    const int n = std::max(1, o_.operations / 3);
    for (int i = 0; i < n; ++i) {
      acc = unit(local, acc, true);
      local.push_back(acc);
    }
    // Keeps the carried value bounded across iterations.
    acc = squashed(acc, partner(local, acc, true));
    std::string step = b_->constant(1, Type::i64());
    std::string next = b_->emit("add", {b_->blockArg(body, 0), step});
    std::string limit = b_->constant(3, Type::i64());
    std::string more = b_->emit("lt", {next, limit});
    b_->condBr(more, body, {next, acc.name}, exit, {acc.name});

    b_->setInsertionBlock(exit);
    b_->ret(toScalar({b_->blockArg(exit, 0), acc0.shape, 2.0}).name);
  }

  CounterRng rng_;
  const ProgramOptions& o_;
  ir::FunctionBuilder* b_ = nullptr;
};

}  // namespace

ir::Module randomProgram(uint64_t seed, const ProgramOptions& options) { return Generator(seed, options).run(); }

Shape shapeOf(const ir::Type& t) { return t.isF32() ? Shape{} : Shape(t.dims()); }

std::vector<Tensor> randomArguments(const ir::Function& f, uint64_t seed, float lo, float hi) {
  std::vector<Tensor> out;
  for (size_t i = 0; i < f.params.size(); ++i) {
    out.push_back(randomUniform(shapeOf(f.params[i].type), seed * 131 + i, lo, hi));
  }
  return out;
}

std::vector<rt::RuntimeValue> asValues(const std::vector<Tensor>& ts) { return {ts.begin(), ts.end()}; }

}  // namespace tgrad::testing
