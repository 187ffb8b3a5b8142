#pragma once

#include <string>
#include <vector>

#include "tgrad/ir.hpp"
#include "tgrad/tensor.hpp"

namespace tgrad::testing {

/// Central differences of an f32-returning function, step 1e-3·max(1,|x|),
/// evaluated on the eager device.
std::vector<Tensor> finiteDifference(const ir::Module& m, const std::string& function, const std::vector<Tensor>& args,
                                     const std::vector<size_t>& wrt);

/// max |a - b| / max(1, |b|) over elements.
double gradientError(const Tensor& analytic, const Tensor& reference);

/// Sum of elementwise products, accumulated in double.
double dot(const Tensor& a, const Tensor& b);

struct GradientReport {
  /// Worst gradientError of reverse mode against central differences.
  double finiteDifferenceError = 0;
  /// |<J v, 1> - <v, J^T 1>| / max(1, |<v, J^T 1>|) for a seeded random v.
  double adjointError = 0;
  /// Primal, vjp and jvp values are identical.
  bool valuesAgree = true;
};

GradientReport gradientReport(const ir::Module& m, const std::string& function, const std::vector<Tensor>& args,
                              const std::vector<size_t>& wrt, uint64_t seed);

}  // namespace tgrad::testing
