#include <cstdio>
#include <fstream>
#include <iostream>

#include <spdlog/spdlog.h>

#include "commands.hpp"
#include "json.hpp"
#include "tgrad/error.hpp"
#include "tgrad/spline.hpp"

namespace tgrad::cli {

CLI::App* addFitSpline(CLI::App& app, FitSplineOptions& o) {
  CLI::App* cmd = app.add_subcommand("fit-spline", "Fit a natural cubic spline to x,y data");
  cmd->add_option("--input", o.input, "CSV with x,y rows")->required()->check(CLI::ExistingFile);
  cmd->add_option("--knots", o.knots, "Number of uniformly spaced knots")
      ->check(CLI::Range(int64_t{2}, int64_t{100000}))
      ->capture_default_str();
  cmd->add_option("--alpha0", o.alpha0, "Initial line-search step")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--rho", o.rho, "Step shrink factor")->check(CLI::Range(0.0f, 1.0f))->capture_default_str();
  cmd->add_option("--c", o.c, "Sufficient-decrease constant")->check(CLI::Range(0.0f, 1.0f))->capture_default_str();
  cmd->add_option("--max-iters", o.maxIters)->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--tol", o.tol, "Stop when an iteration improves the loss by less")->capture_default_str();
  cmd->add_option("--out", o.out, "Write the fitted model as JSON");
  return cmd;
}

int runFitSpline(const FitSplineOptions& o) {
  spline::SplineData data = spline::readCsv(o.input);
  spline::FitOptions options;
  options.lineSearch = {o.alpha0, o.rho, o.c, options.lineSearch.maxHalvings};
  options.maxIters = o.maxIters;
  options.tol = o.tol;
  spline::FitResult r = spline::fitSpline(data, o.knots, options);
  const float mse = spline::mseLoss(r.model, data);
  spdlog::info("{} iterations, loss {} -> {}", r.iterations, r.lossHistory.front(), r.lossHistory.back());

  if (!o.out.empty()) {
    nlohmann::json j;
    j["knots"] = r.model.knots;
    j["values"] = r.model.values;
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) throw Error(ErrorKind::Io, "cannot open " + o.out + " for writing");
    f << j.dump(2) << "\n";
    if (!f) throw Error(ErrorKind::Io, "write to " + o.out + " failed");
  }
  char line[64];
  std::snprintf(line, sizeof line, "mse=%.9g", mse);
  std::cout << line << "\niterations=" << r.iterations << "\n";
  return 0;
}

}  // namespace tgrad::cli
