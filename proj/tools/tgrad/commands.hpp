#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tgrad/runtime.hpp"

namespace tgrad::cli {

struct DiffOptions {
  std::string input;
  std::string function;
  std::string wrt;
  std::string mode = "vjp";
  std::string emit = "ir";
};

struct TrainOptions {
  std::string dataDir;
  int64_t synthetic = 0;
  int64_t epochs = 1;
  int64_t batchSize = 32;
  float learningRate = 0.1f;
  std::string device = "eager";
  std::string checkpointOut;
  std::string metricsOut;
  uint64_t seed = 0;
  bool shuffle = false;
  int64_t trainLimit = 0;
  int64_t testLimit = 0;
  std::string dumpTrace;
};

struct FitSplineOptions {
  std::string input;
  int64_t knots = 8;
  float alpha0 = 1.0f;
  float rho = 0.5f;
  float c = 1e-4f;
  int maxIters = 500;
  float tol = 1e-9f;
  std::string out;
};

struct BenchOptions {
  std::string workload;
  std::string device = "eager";
  /// 0 picks the workload default: 10^6 elements or a batch of 32.
  int64_t size = 0;
  int64_t iters = 10;
  std::string dumpTrace;
};

CLI::App* addDiff(CLI::App& app, DiffOptions& o);
CLI::App* addTrain(CLI::App& app, TrainOptions& o);
CLI::App* addFitSpline(CLI::App& app, FitSplineOptions& o);
CLI::App* addBench(CLI::App& app, BenchOptions& o);

int runDiff(const DiffOptions& o);
int runTrain(const TrainOptions& o);
int runFitSpline(const FitSplineOptions& o);
int runBench(const BenchOptions& o);

std::unique_ptr<rt::Device> makeDevice(const std::string& name);
const std::vector<std::string>& deviceNames();

/// Collects every distinct trace a lazy device compiles and writes them as
/// IR functions named @trace_<key>. Does nothing for an empty path.
class TraceDump {
 public:
  TraceDump(rt::Device& device, std::string path);
  TraceDump(const TraceDump&) = delete;
  TraceDump& operator=(const TraceDump&) = delete;
  ~TraceDump();

  void write() const;

 private:
  rt::Device& device_;
  std::string path_;
  std::map<uint64_t, std::string> traces_;
};

void addDumpTraceOption(CLI::App* cmd, std::string& path);

}  // namespace tgrad::cli
