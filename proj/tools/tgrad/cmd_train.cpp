#include <cstdio>
#include <fstream>
#include <iostream>

#include <spdlog/spdlog.h>

#include "commands.hpp"
#include "tgrad/data.hpp"
#include "tgrad/error.hpp"
#include "tgrad/nn.hpp"

namespace tgrad::cli {

CLI::App* addTrain(CLI::App& app, TrainOptions& o) {
  CLI::App* cmd = app.add_subcommand("train-lenet", "Train LeNet on IDX files or a synthetic dataset");
  auto* dir = cmd->add_option("--data-dir", o.dataDir, "Directory with train-images-idx3-ubyte and train-labels-idx1-ubyte")
                  ->check(CLI::ExistingDirectory);
  auto* synthetic = cmd->add_option("--synthetic", o.synthetic, "Generate N synthetic examples")
                        ->check(CLI::Range(int64_t{10}, int64_t{1} << 40));
  dir->excludes(synthetic);
  synthetic->excludes(dir);
  cmd->add_option("--epochs", o.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--batch-size", o.batchSize)->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--lr", o.learningRate, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--device", o.device)->check(CLI::IsMember(deviceNames()))->capture_default_str();
  cmd->add_option("--checkpoint-out", o.checkpointOut, "Write final parameters (TGRD)");
  cmd->add_option("--metrics-out", o.metricsOut, "Write epoch,loss,accuracy lines");
  cmd->add_option("--seed", o.seed, "Initialization and synthetic-data seed")->capture_default_str();
  cmd->add_flag("--shuffle", o.shuffle, "Shuffle examples each epoch (seeded)");
  cmd->add_option("--train-limit", o.trainLimit, "Use only the first N training examples of --data-dir")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--test-limit", o.testLimit, "Evaluate only the first N t10k examples of --data-dir")
      ->check(CLI::NonNegativeNumber);
  addDumpTraceOption(cmd, o.dumpTrace);
  return cmd;
}

int runTrain(const TrainOptions& o) {
  if (o.dataDir.empty() && o.synthetic == 0) {
    throw CLI::RequiredError("one of --data-dir or --synthetic");
  }
  nn::Dataset data = o.dataDir.empty() ? data::makeSyntheticDataset(o.synthetic, o.seed)
                                       : data::takeFirst(data::loadMnistDirectory(o.dataDir), o.trainLimit);
  spdlog::info("training on {} examples, {} epochs, batch {}, lr {}, device {}", data.size(), o.epochs, o.batchSize,
               o.learningRate, o.device);

  std::ofstream metrics;
  if (!o.metricsOut.empty()) {
    metrics.open(o.metricsOut, std::ios::trunc);
    if (!metrics) throw Error(ErrorKind::Io, "cannot open " + o.metricsOut + " for writing");
  }

  nn::Model model = nn::makeLeNet(o.seed);
  auto device = makeDevice(o.device);
  TraceDump dump(*device, o.dumpTrace);
  nn::TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.batchSize = o.batchSize;
  cfg.learningRate = o.learningRate;
  cfg.shuffle = o.shuffle;
  cfg.shuffleSeed = o.seed;
  int64_t steps = 0;
  auto history = nn::trainEpochs(model, data, cfg, *device, [&](const nn::StepInfo& s) {
    ++steps;
    spdlog::debug("epoch {} step {} loss {}", s.epoch, s.step, s.loss);
  });

  for (const auto& m : history) {
    char line[96];
    std::snprintf(line, sizeof line, "%lld,%.6f,%.4f", static_cast<long long>(m.epoch + 1), m.loss, m.accuracy);
    std::cout << line << "\n";
    if (metrics) metrics << line << "\n";
  }
  if (metrics && !metrics.flush()) throw Error(ErrorKind::Io, "write to " + o.metricsOut + " failed");

  if (!o.dataDir.empty() && data::hasMnistSplit(o.dataDir, data::MnistSplit::Test)) {
    nn::Dataset test = data::takeFirst(data::loadMnistDirectory(o.dataDir, data::MnistSplit::Test), o.testLimit);
    char line[64];
    std::snprintf(line, sizeof line, "test_accuracy=%.4f", nn::accuracy(model, test, *device));
    std::cout << line << "\n";
  }
  if (o.device == "lazy") {
    rt::DeviceStats s = device->stats();
    std::cout << "steps=" << steps << " compilations=" << s.compilations << " cache_hits=" << s.cacheHits
              << " kernels=" << s.kernelsExecuted << " ops=" << s.opsDispatched << "\n";
  }
  dump.write();
  if (!o.checkpointOut.empty()) {
    nn::saveCheckpoint(model.params(), o.checkpointOut);
    spdlog::info("wrote {}", o.checkpointOut);
  }
  return 0;
}

}  // namespace tgrad::cli
