#include <algorithm>
#include <functional>
#include <numeric>

#include "tgrad/error.hpp"
#include "tgrad/ir.hpp"
#include "tgrad/kernels.hpp"
#include "tgrad/lazy.hpp"

namespace tgrad::lazy {

uint64_t fnv1a(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string attrText(const Attributes& attrs) {
  std::string s = "{";
  for (const auto& [k, v] : attrs) s += k + "=" + formatAttrValue(v) + ";";
  return s + "}";
}

}  // namespace

CanonicalTrace canonicalize(const TraceGraph& g) {
  const size_t n = g.nodes.size();
  std::vector<uint64_t> hash(n, 0);
  for (size_t i = 0; i < n; ++i) {
    const auto& node = g.nodes[i];
    std::string s = node.opcode + attrText(node.attrs) + node.shape.str() + "(";
    for (const auto& in : node.inputs) {
      switch (in.kind) {
        case TraceGraph::Operand::Kind::Node:
          if (in.value < 0 || static_cast<size_t>(in.value) >= i) {
            throw Error(ErrorKind::InvalidArgument, "trace is not in topological order");
          }
          s += "N" + std::to_string(hash[static_cast<size_t>(in.value)]) + ",";
          break;
        case TraceGraph::Operand::Kind::Placeholder:
          s += "P" + g.placeholders.at(static_cast<size_t>(in.value)).str() + ",";
          break;
        case TraceGraph::Operand::Kind::Int: s += "I" + std::to_string(in.value) + ","; break;
      }
    }
    hash[i] = fnv1a(s + ")");
  }

  CanonicalTrace out;
  std::vector<int> order(g.outputs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return hash[static_cast<size_t>(g.outputs[static_cast<size_t>(a)])] <
           hash[static_cast<size_t>(g.outputs[static_cast<size_t>(b)])];
  });

  std::vector<int> newIndex(n, -1);
  std::vector<int> newPlaceholder(g.placeholders.size(), -1);
  std::function<void(int)> visit = [&](int id) {
    if (newIndex[static_cast<size_t>(id)] >= 0) return;
    const auto& node = g.nodes[static_cast<size_t>(id)];
    TraceGraph::Node copy{node.opcode, node.attrs, {}, node.shape};
    for (const auto& in : node.inputs) {
      TraceGraph::Operand op = in;
      if (in.kind == TraceGraph::Operand::Kind::Node) {
        visit(static_cast<int>(in.value));
        op.value = newIndex[static_cast<size_t>(in.value)];
      } else if (in.kind == TraceGraph::Operand::Kind::Placeholder) {
        int& slot = newPlaceholder[static_cast<size_t>(in.value)];
        if (slot < 0) {
          slot = static_cast<int>(out.graph.placeholders.size());
          out.graph.placeholders.push_back(g.placeholders[static_cast<size_t>(in.value)]);
          out.placeholderOrigin.push_back(static_cast<int>(in.value));
        }
        op.value = slot;
      }
      copy.inputs.push_back(op);
    }
    newIndex[static_cast<size_t>(id)] = static_cast<int>(out.graph.nodes.size());
    out.graph.nodes.push_back(std::move(copy));
  };
  for (int pos : order) {
    int id = g.outputs[static_cast<size_t>(pos)];
    visit(id);
    out.graph.outputs.push_back(newIndex[static_cast<size_t>(id)]);
    out.outputOrigin.push_back(pos);
  }
  return out;
}

std::string canonicalText(const TraceGraph& g) {
  std::string s;
  for (size_t i = 0; i < g.placeholders.size(); ++i) s += "P" + std::to_string(i) + " " + g.placeholders[i].str() + "\n";
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& node = g.nodes[i];
    s += "N" + std::to_string(i) + " " + node.opcode + " " + attrText(node.attrs) + " (";
    for (const auto& in : node.inputs) {
      char tag = in.kind == TraceGraph::Operand::Kind::Node ? 'N'
                 : in.kind == TraceGraph::Operand::Kind::Placeholder ? 'P' : 'I';
      s += tag + std::to_string(in.value) + " ";
    }
    s += ") f32 " + node.shape.str() + "\n";
  }
  s += "O";
  for (int o : g.outputs) s += " " + std::to_string(o);
  return s + "\n";
}

uint64_t traceKey(const TraceGraph& g) { return fnv1a(canonicalText(canonicalize(g).graph)); }

std::vector<Tensor> executeUnoptimized(const TraceGraph& g, const std::vector<Tensor>& placeholders) {
  if (placeholders.size() != g.placeholders.size()) {
    throw Error(ErrorKind::CountMismatch, "trace expects " + std::to_string(g.placeholders.size()) + " inputs");
  }
  std::vector<Tensor> values;
  values.reserve(g.nodes.size());
  for (const auto& node : g.nodes) {
    std::vector<kernels::KernelArg> args;
    for (const auto& in : node.inputs) {
      switch (in.kind) {
        case TraceGraph::Operand::Kind::Node: args.emplace_back(values[static_cast<size_t>(in.value)]); break;
        case TraceGraph::Operand::Kind::Placeholder:
          args.emplace_back(placeholders[static_cast<size_t>(in.value)]);
          break;
        case TraceGraph::Operand::Kind::Int: args.emplace_back(in.value); break;
      }
    }
    values.push_back(kernels::runKernel(node.opcode, node.attrs, std::move(args)));
  }
  std::vector<Tensor> out;
  for (int o : g.outputs) out.push_back(values[static_cast<size_t>(o)]);
  return out;
}

std::string traceToIr(const TraceGraph& g, const std::string& name) {
  auto typeFor = [](const Shape& s) { return s.rank() == 0 ? ir::Type::f32() : ir::Type::tensor(s.dims()); };
  ir::Function f;
  f.name = name;
  for (size_t i = 0; i < g.placeholders.size(); ++i) f.params.push_back({"p" + std::to_string(i), typeFor(g.placeholders[i])});
  ir::BasicBlock entry;
  entry.label = "entry";
  entry.args = f.params;
  int ints = 0;
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& node = g.nodes[i];
    ir::Instruction inst;
    inst.result = std::to_string(i);
    inst.opcode = node.opcode;
    inst.attrs = node.attrs;
    inst.type = typeFor(node.shape);
    for (const auto& in : node.inputs) {
      switch (in.kind) {
        case TraceGraph::Operand::Kind::Node: inst.operands.push_back(std::to_string(in.value)); break;
        case TraceGraph::Operand::Kind::Placeholder: inst.operands.push_back("p" + std::to_string(in.value)); break;
        case TraceGraph::Operand::Kind::Int: {
          std::string c = "i" + std::to_string(ints++);
          entry.body.push_back(ir::Instruction{c, "const", "", {}, {{"value", in.value}}, ir::Type::i64()});
          inst.operands.push_back(c);
          break;
        }
      }
    }
    entry.body.push_back(std::move(inst));
  }
  std::vector<ir::Type> resultTypes;
  ir::Instruction tuple{"out", "tuple", "", {}, {}, {}};
  for (int o : g.outputs) {
    tuple.operands.push_back(std::to_string(o));
    resultTypes.push_back(typeFor(g.nodes[static_cast<size_t>(o)].shape));
  }
  tuple.type = ir::Type::tuple(resultTypes);
  entry.body.push_back(tuple);
  entry.term.kind = ir::Terminator::Kind::Return;
  entry.term.value = "out";
  f.resultType = tuple.type;
  f.blocks.push_back(std::move(entry));
  return ir::print(f);
}

}  // namespace tgrad::lazy
