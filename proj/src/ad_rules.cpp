#include "tgrad/autodiff.hpp"

namespace tgrad::ad {

namespace {

using Opt = std::optional<std::string>;

std::string sum(RuleContext& c, const Opt& a, const Opt& b) {
  if (a && b) return c.emit("add", {*a, *b});
  return a ? *a : *b;
}

void linearBinary(DerivativeRegistry& r, const std::string& op) {
  const bool isSub = op == "sub";
  r.registerDerivative(
      op,
      [isSub](JvpContext& c) {
        const Opt& ta = c.tangents[0];
        Opt tb = c.tangents[1];
        std::string out;
        if (ta && tb) {
          out = c.emit(isSub ? "sub" : "add", {*ta, *tb});
        } else if (ta) {
          out = *ta;
        } else {
          out = isSub ? c.emit("neg", {*tb}) : *tb;
        }
        return c.broadcast(out, c.result);
      },
      [isSub](VjpContext& c) {
        if (c.wants(0)) c.contribute(0, c.unbroadcast(c.seed, c.operands[0]));
        if (c.wants(1)) {
          std::string g = isSub ? c.emit("neg", {c.seed}) : c.seed;
          c.contribute(1, c.unbroadcast(g, c.operands[1]));
        }
      });
}

void registerBuiltins(DerivativeRegistry& r) {
  linearBinary(r, "add");
  linearBinary(r, "sub");

  r.registerDerivative(
      "mul",
      [](JvpContext& c) {
        Opt a, b;
        if (c.tangents[0]) a = c.emit("mul", {*c.tangents[0], c.operands[1]});
        if (c.tangents[1]) b = c.emit("mul", {c.operands[0], *c.tangents[1]});
        return c.broadcast(sum(c, a, b), c.result);
      },
      [](VjpContext& c) {
        if (c.wants(0)) c.contribute(0, c.unbroadcast(c.emit("mul", {c.seed, c.operands[1]}), c.operands[0]));
        if (c.wants(1)) c.contribute(1, c.unbroadcast(c.emit("mul", {c.seed, c.operands[0]}), c.operands[1]));
      });

  r.registerDerivative(
      "div",
      [](JvpContext& c) {
        Opt a, b;
        if (c.tangents[0]) a = c.emit("div", {*c.tangents[0], c.operands[1]});
        if (c.tangents[1]) {
          b = c.emit("neg", {c.emit("div", {c.emit("mul", {*c.tangents[1], c.result}), c.operands[1]})});
        }
        return c.broadcast(sum(c, a, b), c.result);
      },
      [](VjpContext& c) {
        if (c.wants(0)) c.contribute(0, c.unbroadcast(c.emit("div", {c.seed, c.operands[1]}), c.operands[0]));
        if (c.wants(1)) {
          std::string q = c.emit("div", {c.emit("mul", {c.seed, c.result}), c.operands[1]});
          c.contribute(1, c.unbroadcast(c.emit("neg", {q}), c.operands[1]));
        }
      });

  r.registerDerivative(
      "neg", [](JvpContext& c) { return c.emit("neg", {*c.tangents[0]}); },
      [](VjpContext& c) { c.contribute(0, c.emit("neg", {c.seed})); });

  r.registerDerivative(
      "relu", [](JvpContext& c) { return c.emit("relu_grad", {*c.tangents[0], c.operands[0]}); },
      [](VjpContext& c) { c.contribute(0, c.emit("relu_grad", {c.seed, c.operands[0]})); });

  r.registerDerivative(
      "exp", [](JvpContext& c) { return c.emit("mul", {*c.tangents[0], c.result}); },
      [](VjpContext& c) { c.contribute(0, c.emit("mul", {c.seed, c.result})); });

  r.registerDerivative(
      "log", [](JvpContext& c) { return c.emit("div", {*c.tangents[0], c.operands[0]}); },
      [](VjpContext& c) { c.contribute(0, c.emit("div", {c.seed, c.operands[0]})); });

  r.registerDerivative(
      "matmul",
      [](JvpContext& c) {
        Opt a, b;
        if (c.tangents[0]) a = c.emit("matmul", {*c.tangents[0], c.operands[1]});
        if (c.tangents[1]) b = c.emit("matmul", {c.operands[0], *c.tangents[1]});
        return sum(c, a, b);
      },
      [](VjpContext& c) {
        if (c.wants(0)) c.contribute(0, c.emit("matmul", {c.seed, c.emit("transpose2d", {c.operands[1]})}));
        if (c.wants(1)) c.contribute(1, c.emit("matmul", {c.emit("transpose2d", {c.operands[0]}), c.seed}));
      });

  r.registerDerivative(
      "conv2d",
      [](JvpContext& c) {
        Opt a, b;
        if (c.tangents[0]) a = c.emit("conv2d", {*c.tangents[0], c.operands[1]}, c.primal.attrs);
        if (c.tangents[1]) b = c.emit("conv2d", {c.operands[0], *c.tangents[1]}, c.primal.attrs);
        return sum(c, a, b);
      },
      [](VjpContext& c) {
        if (c.wants(0)) {
          c.contribute(0, c.emit("conv2d_input_grad", {c.seed, c.operands[1], c.operands[0]}, c.primal.attrs));
        }
        if (c.wants(1)) {
          c.contribute(1, c.emit("conv2d_filter_grad", {c.operands[0], c.seed, c.operands[1]}, c.primal.attrs));
        }
      });

  r.registerDerivative(
      "avgpool2d", [](JvpContext& c) { return c.emit("avgpool2d", {*c.tangents[0]}, c.primal.attrs); },
      [](VjpContext& c) { c.contribute(0, c.emit("avgpool2d_grad", {c.seed, c.operands[0]}, c.primal.attrs)); });

  r.registerDerivative(
      "reshape", [](JvpContext& c) { return c.emit("reshape_like", {*c.tangents[0], c.result}); },
      [](VjpContext& c) { c.contribute(0, c.emit("reshape_like", {c.seed, c.operands[0]})); });

  r.registerDerivative(
      "transpose2d", [](JvpContext& c) { return c.emit("transpose2d", {*c.tangents[0]}); },
      [](VjpContext& c) { c.contribute(0, c.emit("transpose2d", {c.seed})); });

  for (std::string op : {"reduce_sum", "reduce_mean"}) {
    r.registerDerivative(
        op, [op](JvpContext& c) { return c.emit(op, {*c.tangents[0]}, c.primal.attrs); },
        [op](VjpContext& c) { c.contribute(0, c.emit(op + "_grad", {c.seed, c.operands[0]}, c.primal.attrs)); });
  }

  r.registerDerivative(
      "softmax_xent",
      [](JvpContext& c) {
        std::string one = c.builder.constant(1.0);
        std::string g = c.emit("softmax_xent_grad", {c.operands[0], c.operands[1], one});
        return c.emit("reduce_sum", {c.emit("mul", {g, *c.tangents[0]})});
      },
      [](VjpContext& c) {
        if (c.wants(0)) c.contribute(0, c.emit("softmax_xent_grad", {c.operands[0], c.operands[1], c.seed}));
      });

  r.registerDerivative(
      "subscript_get", [](JvpContext& c) { return c.emit("subscript_get", {*c.tangents[0], c.operands[1]}); },
      [](VjpContext& c) {
        c.accumulate(0, [&](const Opt& current) {
          std::string acc = current ? *current : c.builder.constant(0.0);
          return c.emit("subscript_accum", {acc, c.operands[0], c.operands[1], c.seed});
        });
      });

  r.registerDerivative(
      "select",
      [](JvpContext& c) {
        std::string a = c.tangents[1] ? *c.tangents[1] : c.zerosLike(c.operands[1]);
        std::string b = c.tangents[2] ? *c.tangents[2] : c.zerosLike(c.operands[2]);
        return c.emit("select", {c.operands[0], a, b});
      },
      [](VjpContext& c) {
        std::string z = c.zerosLike(c.seed);
        if (c.wants(1)) c.contribute(1, c.emit("select", {c.operands[0], c.seed, z}));
        if (c.wants(2)) c.contribute(2, c.emit("select", {c.operands[0], z, c.seed}));
      });
}

}  // namespace

std::shared_ptr<DerivativeRegistry> DerivativeRegistry::withBuiltins() {
  auto r = std::make_shared<DerivativeRegistry>();
  registerBuiltins(*r);
  return r;
}

}  // namespace tgrad::ad
