#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tgrad/autodiff.hpp"
#include "tgrad/runtime.hpp"

namespace tgrad::spline {

/// Natural cubic spline through (knots[i], values[i]). Outside the knot
/// range the end segment's cubic is extended.
struct SplineModel {
  std::vector<float> knots;
  std::vector<float> values;

  /// Throws InvalidArgument unless there are >= 2 strictly increasing knots
  /// and one value per knot.
  void validate() const;
};

struct SplineData {
  std::vector<float> x;
  std::vector<float> y;
  size_t size() const noexcept { return x.size(); }
};

float evalSpline(const SplineModel& m, float x);

/// Weights w with evalSpline(m, x) == sum_j w[j] * m.values[j] for any values.
std::vector<double> splineBasis(std::span<const float> knots, float x);

/// Mean squared error; throws EmptyData for no samples.
float mseLoss(const SplineModel& m, const SplineData& data);

/// MSE as a function of the control values for fixed knots and data,
/// differentiated through the autodiff engine.
class SplineObjective {
 public:
  SplineObjective(std::vector<float> knots, const SplineData& data);

  float loss(std::span<const float> values) const;
  float lossAndGradient(std::span<const float> values, std::vector<float>& gradient) const;

  /// The objective plus any derivative functions synthesized so far.
  std::shared_ptr<const ir::Module> module() const;

 private:
  std::vector<float> knots_;
  Tensor basis_;
  Tensor targets_;
  std::shared_ptr<ad::Differentiator> differentiator_;
  std::shared_ptr<rt::Device> device_;
};

/// Gradient of mseLoss with respect to the control values.
std::vector<float> mseGradient(const SplineModel& m, const SplineData& data);

struct LineSearchConfig {
  float alpha0 = 1.0f;
  float rho = 0.5f;
  float c = 1e-4f;
  int maxHalvings = 30;

  void validate() const;
};

/// First alpha in alpha0 * rho^k (k <= maxHalvings) with
/// f(x + alpha d) <= f(x) + c alpha <grad, d>.
float backtrackingLineSearch(const std::function<float(std::span<const float>)>& loss, std::span<const float> gradAtX,
                             std::span<const float> x, std::span<const float> direction, const LineSearchConfig& cfg);

struct FitOptions {
  LineSearchConfig lineSearch;
  int maxIters = 500;
  /// Stop once an iteration lowers the loss by less than this.
  float tol = 1e-9f;
};

struct FitResult {
  SplineModel model;
  /// Loss before the first step and after each step.
  std::vector<float> lossHistory;
  int iterations = 0;
};

/// Gradient descent from `initial` with knots held fixed.
FitResult fitSplineFrom(const SplineModel& initial, const SplineData& data, const FitOptions& options);
/// Uniform knots over the data's x range, values started at the mean of y.
FitResult fitSpline(const SplineData& data, int64_t knotCount, const FitOptions& options);

/// `x,y` rows with an optional header line.
SplineData readCsv(const std::filesystem::path& path);
SplineData parseCsv(const std::string& text, const std::string& source = "<csv>");

}  // namespace tgrad::spline
