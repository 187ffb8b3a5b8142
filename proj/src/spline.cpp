#include "tgrad/spline.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tgrad/error.hpp"

namespace tgrad::spline {

namespace {

struct Segment {
  size_t i = 0;
  double a = 0, b = 0;    // linear weights of knots i and i+1
  double ca = 0, cb = 0;  // weights of the second derivatives
};

Segment locate(std::span<const float> knots, float x) {
  auto it = std::upper_bound(knots.begin(), knots.end(), x);
  size_t i = it == knots.begin() ? 0 : static_cast<size_t>(it - knots.begin()) - 1;
  i = std::min(i, knots.size() - 2);
  const double x0 = knots[i], x1 = knots[i + 1], h = x1 - x0;
  Segment s;
  s.i = i;
  s.a = (x1 - x) / h;
  s.b = (x - x0) / h;
  s.ca = (s.a * s.a * s.a - s.a) * h * h / 6.0;
  s.cb = (s.b * s.b * s.b - s.b) * h * h / 6.0;
  return s;
}

/// Second derivatives at the knots with zero curvature at both ends.
std::vector<double> secondDerivatives(std::span<const float> knots, std::span<const double> values) {
  const size_t k = knots.size();
  std::vector<double> m(k, 0.0);
  if (k < 3) return m;
  const size_t n = k - 2;
  std::vector<double> diag(n), upper(n), rhs(n);
  for (size_t r = 0; r < n; ++r) {
    const size_t i = r + 1;
    const double h0 = double(knots[i]) - knots[i - 1], h1 = double(knots[i + 1]) - knots[i];
    diag[r] = 2.0 * (h0 + h1);
    upper[r] = h1;
    rhs[r] = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
  }
  // Thomas algorithm; the sub-diagonal entry of row r is h_{r}, the upper
  // entry of row r-1.
  for (size_t r = 1; r < n; ++r) {
    const double lower = double(knots[r + 1]) - knots[r];
    const double f = lower / diag[r - 1];
    diag[r] -= f * upper[r - 1];
    rhs[r] -= f * rhs[r - 1];
  }
  for (size_t r = n; r-- > 0;) {
    double v = rhs[r];
    if (r + 1 < n) v -= upper[r] * m[r + 2];
    m[r + 1] = v / diag[r];
  }
  return m;
}

void requireData(const SplineData& data) {
  if (data.x.size() != data.y.size()) {
    throw Error(ErrorKind::CountMismatch, "spline data has " + std::to_string(data.x.size()) + " x values and " +
                                              std::to_string(data.y.size()) + " y values");
  }
  if (data.size() == 0) throw Error(ErrorKind::EmptyData, "spline loss needs at least one sample");
}

void requireKnots(std::span<const float> knots) {
  if (knots.size() < 2) throw Error(ErrorKind::InvalidArgument, "a spline needs at least 2 knots");
  for (size_t i = 1; i < knots.size(); ++i) {
    if (!(knots[i] > knots[i - 1])) {
      throw Error(ErrorKind::InvalidArgument, "knots must be strictly increasing (knot " + std::to_string(i) + ")");
    }
  }
}

ir::Module objectiveModule(int64_t k) {
  ir::FunctionBuilder b("spline_mse",
                        {{"values", ir::Type::tensor({k})},
                         {"basis", ir::Type::tensor({-1, k})},
                         {"targets", ir::Type::tensor({-1})}},
                        ir::Type::f32());
  std::string column = b.emit("reshape", {"values"}, {{"shape", std::vector<int64_t>{k, 1}}});
  std::string predicted = b.emit("matmul", {"basis", column});
  std::string flat = b.emit("reshape", {predicted}, {{"shape", std::vector<int64_t>{-1}}});
  std::string residual = b.emit("sub", {flat, "targets"});
  std::string squared = b.emit("mul", {residual, residual});
  b.ret(b.emit("reduce_mean", {squared}, {}, ir::Type::f32()));
  ir::Module m;
  m.add(b.finish());
  return m;
}

}  // namespace

void SplineModel::validate() const {
  requireKnots(knots);
  if (values.size() != knots.size()) {
    throw Error(ErrorKind::InvalidArgument, "spline has " + std::to_string(knots.size()) + " knots but " +
                                                std::to_string(values.size()) + " values");
  }
}

float evalSpline(const SplineModel& m, float x) {
  m.validate();
  std::vector<double> v(m.values.begin(), m.values.end());
  std::vector<double> d2 = secondDerivatives(m.knots, v);
  Segment s = locate(m.knots, x);
  return static_cast<float>(s.a * v[s.i] + s.b * v[s.i + 1] + s.ca * d2[s.i] + s.cb * d2[s.i + 1]);
}

std::vector<double> splineBasis(std::span<const float> knots, float x) {
  requireKnots(knots);
  const size_t k = knots.size();
  Segment s = locate(knots, x);
  std::vector<double> w(k, 0.0);
  w[s.i] += s.a;
  w[s.i + 1] += s.b;
  std::vector<double> unit(k, 0.0);
  for (size_t j = 0; j < k; ++j) {
    unit[j] = 1.0;
    std::vector<double> d2 = secondDerivatives(knots, unit);
    w[j] += s.ca * d2[s.i] + s.cb * d2[s.i + 1];
    unit[j] = 0.0;
  }
  return w;
}

float mseLoss(const SplineModel& m, const SplineData& data) {
  m.validate();
  requireData(data);
  double total = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    double r = double(evalSpline(m, data.x[i])) - data.y[i];
    total += r * r;
  }
  return static_cast<float>(total / static_cast<double>(data.size()));
}

SplineObjective::SplineObjective(std::vector<float> knots, const SplineData& data)
    : knots_(std::move(knots)), device_(std::make_shared<rt::EagerDevice>()) {
  requireKnots(knots_);
  requireData(data);
  const auto k = static_cast<int64_t>(knots_.size());
  const auto n = static_cast<int64_t>(data.size());
  // Row j of `influence` holds the second derivatives produced by unit value j.
  std::vector<std::vector<double>> influence;
  std::vector<double> unit(knots_.size(), 0.0);
  for (size_t j = 0; j < knots_.size(); ++j) {
    unit[j] = 1.0;
    influence.push_back(secondDerivatives(knots_, unit));
    unit[j] = 0.0;
  }
  std::vector<float> basis(static_cast<size_t>(n * k), 0.0f);
  for (int64_t r = 0; r < n; ++r) {
    Segment s = locate(knots_, data.x[static_cast<size_t>(r)]);
    float* row = &basis[static_cast<size_t>(r * k)];
    for (int64_t j = 0; j < k; ++j) {
      double w = s.ca * influence[static_cast<size_t>(j)][s.i] + s.cb * influence[static_cast<size_t>(j)][s.i + 1];
      if (static_cast<size_t>(j) == s.i) w += s.a;
      if (static_cast<size_t>(j) == s.i + 1) w += s.b;
      row[j] = static_cast<float>(w);
    }
  }
  basis_ = Tensor(Shape{n, k}, std::move(basis));
  targets_ = Tensor(Shape{n}, data.y);
  differentiator_ = std::make_shared<ad::Differentiator>(objectiveModule(k));
}

std::shared_ptr<const ir::Module> SplineObjective::module() const { return differentiator_->module(); }

float SplineObjective::loss(std::span<const float> values) const {
  Tensor v(Shape{static_cast<int64_t>(values.size())}, std::vector<float>(values.begin(), values.end()));
  auto r = rt::evaluate(*differentiator_->module(), "spline_mse", {v, basis_, targets_}, *device_);
  return std::get<Tensor>(r).item();
}

float SplineObjective::lossAndGradient(std::span<const float> values, std::vector<float>& gradient) const {
  if (values.size() != knots_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "expected " + std::to_string(knots_.size()) + " control values, got " +
                                              std::to_string(values.size()));
  }
  Tensor v(Shape{static_cast<int64_t>(values.size())}, std::vector<float>(values.begin(), values.end()));
  auto r = ad::valueWithGradient(*differentiator_, "spline_mse", {v, basis_, targets_}, {0}, *device_);
  gradient = std::get<Tensor>(r.gradient.at(0)).toVector();
  return std::get<Tensor>(r.value).item();
}

std::vector<float> mseGradient(const SplineModel& m, const SplineData& data) {
  m.validate();
  std::vector<float> g;
  SplineObjective(m.knots, data).lossAndGradient(m.values, g);
  return g;
}

void LineSearchConfig::validate() const {
  if (!(alpha0 > 0.0f)) throw Error(ErrorKind::InvalidArgument, "alpha0 must be positive");
  if (!(rho > 0.0f && rho < 1.0f)) throw Error(ErrorKind::InvalidArgument, "rho must lie in (0, 1)");
  if (!(c > 0.0f && c < 1.0f)) throw Error(ErrorKind::InvalidArgument, "c must lie in (0, 1)");
  if (maxHalvings < 0) throw Error(ErrorKind::InvalidArgument, "maxHalvings must be non-negative");
}

float backtrackingLineSearch(const std::function<float(std::span<const float>)>& loss, std::span<const float> gradAtX,
                             std::span<const float> x, std::span<const float> direction, const LineSearchConfig& cfg) {
  cfg.validate();
  if (gradAtX.size() != x.size() || direction.size() != x.size()) {
    throw Error(ErrorKind::ShapeMismatch, "line search needs gradient, point and direction of equal length");
  }
  double slope = 0.0;
  for (size_t i = 0; i < x.size(); ++i) slope += double(gradAtX[i]) * direction[i];
  if (!(slope < 0.0)) {
    throw Error(ErrorKind::NotDescentDirection, "<grad, direction> = " + std::to_string(slope) + " is not negative");
  }
  const double fx = loss(x);
  std::vector<float> trial(x.size());
  float alpha = cfg.alpha0;
  for (int k = 0; k <= cfg.maxHalvings; ++k) {
    for (size_t i = 0; i < x.size(); ++i) trial[i] = x[i] + alpha * direction[i];
    if (double(loss(trial)) <= fx + double(cfg.c) * alpha * slope) return alpha;
    alpha *= cfg.rho;
  }
  throw Error(ErrorKind::MaxHalvingsExceeded,
              "no step satisfied sufficient decrease after " + std::to_string(cfg.maxHalvings) + " reductions");
}

FitResult fitSplineFrom(const SplineModel& initial, const SplineData& data, const FitOptions& options) {
  initial.validate();
  options.lineSearch.validate();
  SplineObjective objective(initial.knots, data);
  FitResult result;
  result.model = initial;
  std::vector<float>& x = result.model.values;
  std::vector<float> g;
  float fx = objective.lossAndGradient(x, g);
  result.lossHistory.push_back(fx);
  auto lossAt = [&](std::span<const float> v) { return objective.loss(v); };
  for (int it = 0; it < options.maxIters; ++it) {
    std::vector<float> d(g.size());
    for (size_t i = 0; i < g.size(); ++i) d[i] = -g[i];
    float alpha = 0.0f;
    try {
      alpha = backtrackingLineSearch(lossAt, g, x, d, options.lineSearch);
    } catch (const Error& e) {
      // A zero gradient or a step below float resolution: nothing left to gain.
      if (e.kind() == ErrorKind::NotDescentDirection || e.kind() == ErrorKind::MaxHalvingsExceeded) break;
      throw;
    }
    for (size_t i = 0; i < x.size(); ++i) x[i] += alpha * d[i];
    float next = objective.lossAndGradient(x, g);
    result.lossHistory.push_back(next);
    result.iterations = it + 1;
    const bool converged = fx - next < options.tol;
    fx = next;
    if (converged) break;
  }
  return result;
}

FitResult fitSpline(const SplineData& data, int64_t knotCount, const FitOptions& options) {
  if (knotCount < 2) throw Error(ErrorKind::InvalidArgument, "knot count must be at least 2");
  requireData(data);
  auto [lo, hi] = std::minmax_element(data.x.begin(), data.x.end());
  if (!(*hi > *lo)) throw Error(ErrorKind::InvalidArgument, "spline data needs at least two distinct x values");
  SplineModel m;
  for (int64_t i = 0; i < knotCount; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(knotCount - 1);
    m.knots.push_back(static_cast<float>(*lo + t * (double(*hi) - *lo)));
  }
  m.knots.back() = *hi;
  double mean = std::accumulate(data.y.begin(), data.y.end(), 0.0) / static_cast<double>(data.size());
  m.values.assign(static_cast<size_t>(knotCount), static_cast<float>(mean));
  return fitSplineFrom(m, data, options);
}

namespace {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

bool parseFloat(const std::string& s, float& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

SplineData parseCsv(const std::string& text, const std::string& source) {
  SplineData data;
  std::istringstream in(text);
  std::string line;
  size_t lineNo = 0;
  bool sawRow = false;
  while (std::getline(in, line)) {
    ++lineNo;
    std::string t = trim(line);
    if (t.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    for (size_t comma; (comma = t.find(',', start)) != std::string::npos; start = comma + 1) {
      fields.push_back(trim(std::string_view(t).substr(start, comma - start)));
    }
    fields.push_back(trim(std::string_view(t).substr(start)));
    const std::string where = source + ":" + std::to_string(lineNo);
    if (fields.size() != 2) {
      throw Error(ErrorKind::CsvParse, where + ": expected 2 columns, found " + std::to_string(fields.size()));
    }
    float x = 0, y = 0;
    if (!parseFloat(fields[0], x) || !parseFloat(fields[1], y)) {
      if (!sawRow && data.size() == 0) {
        sawRow = true;  // header
        continue;
      }
      throw Error(ErrorKind::CsvParse, where + ": '" + t + "' is not a pair of numbers");
    }
    sawRow = true;
    data.x.push_back(x);
    data.y.push_back(y);
  }
  return data;
}

SplineData readCsv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::stringstream s;
  s << f.rdbuf();
  return parseCsv(s.str(), path.string());
}

}  // namespace tgrad::spline
