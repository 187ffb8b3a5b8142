#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "commands.hpp"
#include "tgrad/error.hpp"
#include "tgrad/lazy.hpp"

namespace tgrad::cli {

const std::vector<std::string>& deviceNames() {
  static const std::vector<std::string> names{"eager", "lazy"};
  return names;
}

std::unique_ptr<rt::Device> makeDevice(const std::string& name) {
  if (name == "lazy") return std::make_unique<lazy::LazyDevice>();
  return std::make_unique<rt::EagerDevice>();
}

void addDumpTraceOption(CLI::App* cmd, std::string& path) {
  cmd->add_option("--dump-trace", path, "Write each compiled lazy trace as IR (requires --device lazy)");
}

TraceDump::TraceDump(rt::Device& device, std::string path) : device_(device), path_(std::move(path)) {
  if (path_.empty()) return;
  auto* lazyDevice = dynamic_cast<lazy::LazyDevice*>(&device_);
  if (!lazyDevice) throw CLI::ValidationError("--dump-trace", "requires --device lazy");
  lazyDevice->setTraceListener([this](const lazy::TraceGraph& g, uint64_t key) {
    if (traces_.contains(key)) return;
    char name[32];
    std::snprintf(name, sizeof name, "trace_%016llx", static_cast<unsigned long long>(key));
    traces_.emplace(key, lazy::traceToIr(g, name));
  });
}

TraceDump::~TraceDump() {
  if (auto* lazyDevice = dynamic_cast<lazy::LazyDevice*>(&device_); lazyDevice && !path_.empty()) {
    lazyDevice->setTraceListener({});
  }
}

void TraceDump::write() const {
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path_ + " for writing");
  bool first = true;
  for (const auto& [key, text] : traces_) {
    out << (first ? "" : "\n") << text;
    first = false;
  }
  if (!out.flush()) throw Error(ErrorKind::Io, "write to " + path_ + " failed");
  spdlog::info("wrote {} trace(s) to {}", traces_.size(), path_);
}

}  // namespace tgrad::cli

namespace {

void configureLogging() {
  auto logger = spdlog::stderr_color_mt("tgrad");
  logger->set_pattern("%^%l%$: %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* level = std::getenv("TF_LOG")) {
    std::string l = level;
    if (l == "error") spdlog::set_level(spdlog::level::err);
    else if (l == "warn") spdlog::set_level(spdlog::level::warn);
    else if (l == "info") spdlog::set_level(spdlog::level::info);
    else if (l == "debug") spdlog::set_level(spdlog::level::debug);
    else spdlog::warn("ignoring TF_LOG={}; expected error, warn, info or debug", l);
  }
}

/// Malformed input files count as usage errors; everything else the
/// library reports is a domain failure.
int exitCodeFor(tgrad::ErrorKind kind) { return kind == tgrad::ErrorKind::CsvParse ? 2 : 1; }

}  // namespace

int main(int argc, char** argv) {
  configureLogging();
  CLI::App app{"tgrad: differentiable IR, LeNet training, spline fitting and device benchmarks"};
  app.require_subcommand(1);

  tgrad::cli::DiffOptions diff;
  tgrad::cli::TrainOptions train;
  tgrad::cli::FitSplineOptions fit;
  tgrad::cli::BenchOptions bench;
  CLI::App* diffCmd = tgrad::cli::addDiff(app, diff);
  CLI::App* trainCmd = tgrad::cli::addTrain(app, train);
  CLI::App* fitCmd = tgrad::cli::addFitSpline(app, fit);
  CLI::App* benchCmd = tgrad::cli::addBench(app, bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, std::cout, std::cerr);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*diffCmd) return tgrad::cli::runDiff(diff);
    if (*trainCmd) return tgrad::cli::runTrain(train);
    if (*fitCmd) return tgrad::cli::runFitSpline(fit);
    if (*benchCmd) return tgrad::cli::runBench(bench);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cout, std::cerr);
    return 2;
  } catch (const tgrad::Error& e) {
    spdlog::error("{}", e.what());
    return exitCodeFor(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 2;
}
