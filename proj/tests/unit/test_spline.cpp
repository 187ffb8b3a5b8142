#include <cmath>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tgrad/random.hpp"
#include "tgrad/spline.hpp"

using namespace tgrad;
using namespace tgrad::spline;
using tgrad::testing::errorOf;

namespace {

SplineModel randomModel(uint64_t seed, size_t k) {
  CounterRng rng(seed);
  SplineModel m;
  float x = rng.uniform(-2, 0);
  for (size_t i = 0; i < k; ++i) {
    m.knots.push_back(x);
    m.values.push_back(rng.uniform(-2, 2));
    x += rng.uniform(0.3f, 1.5f);
  }
  return m;
}

SplineData sample(const SplineModel& m, size_t n, float lo, float hi, uint64_t seed, float shift = 0.0f) {
  CounterRng rng(seed);
  SplineData d;
  for (size_t i = 0; i < n; ++i) {
    float x = i == 0 ? lo : i == 1 ? hi : rng.uniform(lo, hi);
    d.x.push_back(x);
    d.y.push_back(evalSpline(m, x) + shift);
  }
  return d;
}

bool nonIncreasing(const std::vector<float>& v) {
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[i - 1]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("natural cubic spline matches the reference values") {
  std::istringstream in(testing::readFile(testing::sourcePath("tests/golden/spline/natural_cubic.txt")));
  SplineModel m;
  std::string tag;
  size_t points = 0;
  for (std::string line; std::getline(in, line);) {
    std::istringstream row(line);
    row >> tag;
    if (tag == "knots" || tag == "values") {
      auto& dst = tag == "knots" ? m.knots : m.values;
      for (float v; row >> v;) dst.push_back(v);
      continue;
    }
    float x;
    double expected;
    row >> x >> expected;
    CAPTURE(x);
    CHECK(evalSpline(m, x) == doctest::Approx(expected).epsilon(1e-5));
    ++points;
  }
  CHECK(points == 11);
}

TEST_CASE("spline interpolation properties") {
  SplineModel m = randomModel(3, 6);
  for (size_t i = 0; i < m.knots.size(); ++i) CHECK(evalSpline(m, m.knots[i]) == m.values[i]);

  SplineModel flat{m.knots, std::vector<float>(6, 2.5f)};
  for (float x : {-3.0f, -1.0f, 0.3f, 1.7f, 9.0f}) CHECK(evalSpline(flat, x) == 2.5f);

  SplineModel line{m.knots, {}};
  for (float k : m.knots) line.values.push_back(3.0f * k - 1.0f);
  for (size_t i = 0; i + 1 < m.knots.size(); ++i) {
    float mid = 0.5f * (m.knots[i] + m.knots[i + 1]);
    CHECK(std::fabs(evalSpline(line, mid) - (3.0f * mid - 1.0f)) <= 1e-5f);
  }

  for (float x : {-4.0f, -0.2f, 0.9f, 2.2f, 8.0f}) {
    auto w = splineBasis(m.knots, x);
    double s = 0;
    for (size_t j = 0; j < w.size(); ++j) s += w[j] * m.values[j];
    CHECK(s == doctest::Approx(evalSpline(m, x)).epsilon(1e-6));
  }

  CHECK(errorOf([] { (void)evalSpline({{0.0f}, {1.0f}}, 0.0f); }) == ErrorKind::InvalidArgument);
  CHECK(errorOf([] { (void)evalSpline({{0.0f, 0.0f}, {1.0f, 2.0f}}, 0.0f); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("mean squared error") {
  SplineModel m = randomModel(4, 5);
  SplineData exact = sample(m, 40, m.knots.front(), m.knots.back(), 1);
  CHECK(mseLoss(m, exact) <= 1e-12f);

  SplineModel constant{m.knots, std::vector<float>(5, 1.0f)};
  SplineData offset{{0.1f, 0.5f, 2.0f}, {1.25f, 1.25f, 1.25f}};
  CHECK(mseLoss(constant, offset) == doctest::Approx(0.0625f));

  CHECK(errorOf([&] { (void)mseLoss(m, SplineData{}); }) == ErrorKind::EmptyData);
}

TEST_CASE("spline gradients match finite differences") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    SplineModel truth = randomModel(seed, 3 + seed % 5);
    SplineModel m = randomModel(seed + 100, truth.knots.size());
    m.knots = truth.knots;
    SplineData data = sample(truth, 30, truth.knots.front() - 0.5f, truth.knots.back() + 0.5f, seed);
    auto g = mseGradient(m, data);

    // The loss is quadratic in the values, so central differences only see rounding.
    double worst = 0;
    for (size_t j = 0; j < m.values.size(); ++j) {
      const float h = 0.05f;
      SplineModel up = m, down = m;
      up.values[j] += h;
      down.values[j] -= h;
      double fd = (double(mseLoss(up, data)) - mseLoss(down, data)) / (double(up.values[j]) - down.values[j]);
      worst = std::max(worst, std::fabs(g[j] - fd) / std::max(1.0, std::fabs(fd)));

      // Closed form: 2/N sum_i r_i w_j(x_i).
      double analytic = 0;
      for (size_t i = 0; i < data.size(); ++i) {
        double r = double(evalSpline(m, data.x[i])) - data.y[i];
        analytic += 2.0 * r * splineBasis(m.knots, data.x[i])[j];
      }
      analytic /= double(data.size());
      CHECK(g[j] == doctest::Approx(analytic).epsilon(1e-4));
    }
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("backtracking line search") {
  auto square = [](std::span<const float> x) { return x[0] * x[0]; };
  std::vector<float> x{1.0f}, g{2.0f}, d{-2.0f};
  LineSearchConfig cfg{.alpha0 = 1.0f, .rho = 0.5f, .c = 1e-4f, .maxHalvings = 30};
  CHECK(backtrackingLineSearch(square, g, x, d, cfg) == 0.5f);

  std::vector<float> zero{0.0f};
  CHECK(errorOf([&] { (void)backtrackingLineSearch(square, g, x, zero, cfg); }) == ErrorKind::NotDescentDirection);
  std::vector<float> uphill{1.0f};
  CHECK(errorOf([&] { (void)backtrackingLineSearch(square, g, x, uphill, cfg); }) == ErrorKind::NotDescentDirection);

  LineSearchConfig small = cfg;
  small.alpha0 = 0.1f;
  CHECK(backtrackingLineSearch(square, g, x, d, small) == 0.1f);

  LineSearchConfig none = cfg;
  none.maxHalvings = 0;
  CHECK(errorOf([&] { (void)backtrackingLineSearch(square, g, x, d, none); }) == ErrorKind::MaxHalvingsExceeded);

  LineSearchConfig bad = cfg;
  bad.rho = 1.0f;
  CHECK(errorOf([&] { (void)backtrackingLineSearch(square, g, x, d, bad); }) == ErrorKind::InvalidArgument);

  // Accepted steps satisfy sufficient decrease; the previous trial did not.
  for (uint64_t seed = 0; seed < 50; ++seed) {
    CounterRng rng(seed);
    const float a = rng.uniform(0.5f, 20.0f), b = rng.uniform(0.1f, 5.0f);
    auto f = [a, b](std::span<const float> v) { return a * v[0] * v[0] + b * v[1] * v[1]; };
    std::vector<float> p{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    std::vector<float> grad{2 * a * p[0], 2 * b * p[1]};
    std::vector<float> dir{-grad[0], -grad[1]};
    LineSearchConfig c{.alpha0 = 1.0f, .rho = rng.uniform(0.2f, 0.8f), .c = 1e-4f, .maxHalvings = 60};
    float alpha = backtrackingLineSearch(f, grad, p, dir, c);
    double slope = double(grad[0]) * dir[0] + double(grad[1]) * dir[1];
    auto at = [&](float s) { return double(f(std::vector<float>{p[0] + s * dir[0], p[1] + s * dir[1]})); };
    CHECK(at(alpha) <= f(p) + c.c * alpha * slope);
    if (alpha < c.alpha0) CHECK(at(alpha / c.rho) > f(p) + c.c * (alpha / c.rho) * slope);
  }
}

TEST_CASE("fitting recovers a spline with the same knots") {
  SplineModel truth;
  for (int i = 0; i < 6; ++i) truth.knots.push_back(0.8f * float(i));
  truth.values = {0.5f, -1.0f, 1.5f, 0.2f, -0.7f, 1.0f};
  SplineData data = sample(truth, 200, 0.0f, 4.0f, 7);
  FitResult r = fitSpline(data, 6, {});
  CHECK(r.model.knots.size() == 6);
  CHECK(r.model.knots.back() == 4.0f);
  CHECK(mseLoss(r.model, data) <= 1e-3f);
  CHECK(nonIncreasing(r.lossHistory));
  CHECK(r.lossHistory.back() < r.lossHistory.front());

  CHECK(errorOf([&] { (void)fitSpline(data, 1, {}); }) == ErrorKind::InvalidArgument);
  CHECK(errorOf([&] { (void)fitSpline(SplineData{}, 4, {}); }) == ErrorKind::EmptyData);
}

TEST_CASE("fine-tuning on local data") {
  SplineModel truth;
  for (int i = 0; i < 8; ++i) truth.knots.push_back(float(i));
  truth.values = {0.0f, 1.0f, 0.5f, -0.5f, 0.3f, 1.2f, 0.8f, 0.1f};
  SplineData bulk = sample(truth, 300, 0.0f, 7.0f, 11);
  FitResult global = fitSpline(bulk, 8, {});

  SplineData local = sample(truth, 25, 2.0f, 4.0f, 12, 0.4f);
  const float before = mseLoss(global.model, local);
  FitResult tuned = fitSplineFrom(global.model, local, {});
  const float after = mseLoss(tuned.model, local);
  CHECK(after < before);
  CHECK(after < 0.1f * before);
  CHECK(nonIncreasing(tuned.lossHistory));
}

TEST_CASE("csv input") {
  SplineData a = parseCsv("x,y\n0,1\n1.5,-2\n\n2,3e-1\n");
  CHECK(a.x == std::vector<float>{0.0f, 1.5f, 2.0f});
  CHECK(a.y == std::vector<float>{1.0f, -2.0f, 0.3f});

  SplineData b = parseCsv("0, 1\r\n 2 ,4\r\n");
  CHECK(b.x == std::vector<float>{0.0f, 2.0f});
  CHECK(b.y == std::vector<float>{1.0f, 4.0f});

  CHECK(errorOf([] { (void)parseCsv("x\n1\n2\n"); }) == ErrorKind::CsvParse);
  CHECK(errorOf([] { (void)parseCsv("1,2\n3,abc\n"); }) == ErrorKind::CsvParse);
  CHECK(errorOf([] { (void)parseCsv("x,y\nu,v\n"); }) == ErrorKind::CsvParse);
  CHECK(errorOf([] { (void)parseCsv("1,2,3\n"); }) == ErrorKind::CsvParse);
  CHECK(errorOf([] { (void)readCsv("/nonexistent/data.csv"); }) == ErrorKind::Io);
  try {
    (void)parseCsv("x,y\n1,2\n3;4\n", "in.csv");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("in.csv:3") != std::string::npos);
  }
}
