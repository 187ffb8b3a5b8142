#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tgrad/autodiff.hpp"
#include "tgrad/error.hpp"
#include "tgrad/runtime.hpp"

namespace tgrad::testing {

namespace {

double scalarOf(const ir::Module& m, const std::string& function, const std::vector<Tensor>& args) {
  rt::EagerDevice device;
  std::vector<rt::RuntimeValue> values(args.begin(), args.end());
  return std::get<Tensor>(rt::evaluate(m, function, std::move(values), device)).item();
}

}  // namespace

std::vector<Tensor> finiteDifference(const ir::Module& m, const std::string& function, const std::vector<Tensor>& args,
                                     const std::vector<size_t>& wrt) {
  std::vector<Tensor> out;
  for (size_t w : wrt) {
    Tensor g = Tensor::zeros(args.at(w).shape());
    for (int64_t i = 0; i < g.numel(); ++i) {
      std::vector<Tensor> plus = args, minus = args;
      const float x = args[w].at(i);
      const double h = 1e-3 * std::max(1.0, std::fabs(static_cast<double>(x)));
      const float up = static_cast<float>(x + h);
      const float down = static_cast<float>(x - h);
      plus[w].set(i, up);
      minus[w].set(i, down);
      const double diff = scalarOf(m, function, plus) - scalarOf(m, function, minus);
      g.set(i, static_cast<float>(diff / (static_cast<double>(up) - static_cast<double>(down))));
    }
    out.push_back(std::move(g));
  }
  return out;
}

double gradientError(const Tensor& analytic, const Tensor& reference) {
  if (analytic.shape() != reference.shape()) {
    throw Error(ErrorKind::ShapeMismatch,
                "gradient shape " + analytic.shape().str() + " vs reference " + reference.shape().str());
  }
  double worst = 0;
  for (int64_t i = 0; i < analytic.numel(); ++i) {
    const double r = reference.at(i);
    worst = std::max(worst, std::fabs(analytic.at(i) - r) / std::max(1.0, std::fabs(r)));
  }
  return worst;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error(ErrorKind::ShapeMismatch, "dot of " + a.shape().str() + " and " + b.shape().str());
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.at(i)) * b.at(i);
  return s;
}

GradientReport gradientReport(const ir::Module& m, const std::string& function, const std::vector<Tensor>& args,
                              const std::vector<size_t>& wrt, uint64_t seed) {
  ad::Differentiator d(m);
  rt::EagerDevice eager;
  std::vector<rt::RuntimeValue> values(args.begin(), args.end());
  auto vg = ad::valueWithGradient(d, function, values, wrt, eager);
  auto fd = finiteDifference(m, function, args, wrt);
  if (vg.gradient.size() != wrt.size()) throw Error(ErrorKind::InvalidArgument, "gradient count mismatch");

  GradientReport r;
  std::vector<rt::RuntimeValue> dirs;
  double expected = 0;
  for (size_t k = 0; k < wrt.size(); ++k) {
    const Tensor& g = std::get<Tensor>(vg.gradient[k]);
    r.finiteDifferenceError = std::max(r.finiteDifferenceError, gradientError(g, fd[k]));
    Tensor v = randomUniform(args[wrt[k]].shape(), seed * 31 + k, -1, 1);
    expected += dot(g, v);
    dirs.push_back(v);
  }
  auto pushed = ad::jvp(d, function, values, dirs, wrt, eager);
  const float value = std::get<Tensor>(vg.value).item();
  r.adjointError = std::fabs(std::get<Tensor>(pushed.tangent).item() - expected) / std::max(1.0, std::fabs(expected));
  r.valuesAgree = std::get<Tensor>(pushed.value).item() == value &&
                  std::get<Tensor>(rt::evaluate(m, function, values, eager)).item() == value;
  return r;
}

}  // namespace tgrad::testing
