#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "tgrad/autodiff.hpp"
#include "tgrad/data.hpp"
#include "tgrad/nn.hpp"
#include "tgrad/spline.hpp"

using namespace tgrad;
using tgrad::testing::runTool;
using tgrad::testing::scratchDir;
using tgrad::testing::sourcePath;
using tgrad::testing::writeFile;

namespace {

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

/// key=value pairs from a space-separated counter line.
std::map<std::string, int64_t> counters(const std::string& line) {
  std::map<std::string, int64_t> out;
  std::istringstream in(line);
  for (std::string kv; in >> kv;) {
    auto eq = kv.find('=');
    if (eq != std::string::npos) out[kv.substr(0, eq)] = std::stoll(kv.substr(eq + 1));
  }
  return out;
}

std::string bigEndian(uint32_t v) {
  return {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
}

/// Writes the dataset as an MNIST-style IDX pair with the given prefix.
void writeIdx(const std::filesystem::path& dir, const std::string& prefix, const nn::Dataset& d) {
  const auto n = static_cast<uint32_t>(d.size());
  std::string images = bigEndian(0x803) + bigEndian(n) + bigEndian(28) + bigEndian(28);
  for (float v : d.images.data()) images += char(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255)));
  std::string labels = bigEndian(0x801) + bigEndian(n);
  for (float v : d.labels.data()) labels += char(static_cast<uint8_t>(v));
  writeFile(dir / (prefix + "-images-idx3-ubyte"), images);
  writeFile(dir / (prefix + "-labels-idx1-ubyte"), labels);
}

std::string splineCsv(const spline::SplineModel& truth, int n, bool header) {
  std::string text = header ? "x,y\n" : "";
  for (int i = 0; i < n; ++i) {
    float x = truth.knots.front() + (truth.knots.back() - truth.knots.front()) * float(i) / float(n - 1);
    char row[64];
    std::snprintf(row, sizeof row, "%.9g,%.9g\n", x, spline::evalSpline(truth, x));
    text += row;
  }
  return text;
}

}  // namespace

TEST_CASE("help and argument errors") {
  CHECK(runTool({"--help"}).exitCode == 0);
  for (const char* sub : {"diff", "train-lenet", "fit-spline", "bench"}) {
    CAPTURE(std::string(sub));
    auto help = runTool({sub, "--help"});
    CHECK(help.exitCode == 0);
    CHECK(contains(help.out, "--"));
    CHECK(runTool({sub, "--no-such-flag"}).exitCode == 2);
  }
  CHECK(runTool({}).exitCode == 2);
  CHECK(runTool({"frobnicate"}).exitCode == 2);
  CHECK(runTool({"diff", "--input", sourcePath("samples/square.ir")}).exitCode == 2);
  CHECK(runTool({"diff", "--input", sourcePath("samples/square.ir"), "--func", "square", "--mode", "sideways"})
            .exitCode == 2);
}

TEST_CASE("diff output re-parses, re-verifies and re-differentiates") {
  const std::pair<const char*, const char*> cases[] = {
      {"samples/square.ir", "square"}, {"samples/branch.ir", "branch"}, {"samples/cube_loop.ir", "cube"}};
  for (auto [file, func] : cases) {
    for (const char* mode : {"vjp", "jvp"}) {
      CAPTURE(std::string(file));
      CAPTURE(std::string(mode));
      auto r = runTool({"diff", "--input", sourcePath(file), "--func", func, "--mode", mode});
      REQUIRE(r.exitCode == 0);
      ir::Module m = ir::parse(r.out);
      CHECK(ir::verify(m).empty());
      CHECK(m.find(func) != nullptr);
      CHECK(m.functions().size() >= 3);
      for (const auto& f : m.functions()) {
        CHECK_FALSE(contains(f->name, std::string(mode) == "vjp" ? "__df__" : "__pb__"));
      }
      CHECK(ir::print(ir::parse(ir::print(m))) == ir::print(m));

      ad::Differentiator again(m);
      auto bundle = again.transform(func, ad::differentiableParams(*m.find(func)));
      CHECK(bundle->vjp == std::string(func) + "__vjp__0.1");
      for (const auto& s : bundle->synthesized) CHECK(ir::verify(again.module()->get(s), again.module().get()).empty());
    }
  }
}

TEST_CASE("diff summary lists block records") {
  auto r = runTool({"diff", "--input", sourcePath("samples/branch.ir"), "--func", "branch", "--emit", "summary"});
  REQUIRE(r.exitCode == 0);
  auto out = lines(r.out);
  REQUIRE(out.size() == 11);
  CHECK(out[0] == "function @branch");
  CHECK(out[2] == "mode vjp");
  CHECK(out[4] == "warnings 0");
  CHECK(out[5] == "augmented @branch__vjp__0");
  CHECK(out[6] == "pullback @branch__pb__0");
  CHECK(out[7] == "record ^entry block 0 captures 0 predecessors -");
  CHECK(out[10] == "record ^join block 3 captures 0 predecessors ^then:2 ^else:4");

  auto jvp = runTool({"diff", "--input", sourcePath("samples/square.ir"), "--func", "square", "--mode", "jvp",
                      "--emit", "summary"});
  CHECK(contains(jvp.out, "differential @square__df__0"));
}

TEST_CASE("diff diagnostics") {
  auto constant = runTool({"diff", "--input", sourcePath("samples/constant.ir"), "--func", "seven"});
  CHECK(constant.exitCode == 0);
  CHECK(contains(constant.err, "warning"));
  CHECK(contains(constant.err, "does not depend on the differentiable arguments"));

  auto dir = scratchDir("cli_diff");
  writeFile(dir / "bad.ir", "func @f(%x: f32) -> f32 {\n^entry(%x: f32):\n  return %y\n}\n");
  CHECK(runTool({"diff", "--input", (dir / "bad.ir").string(), "--func", "f"}).exitCode == 1);
  CHECK(runTool({"diff", "--input", sourcePath("samples/square.ir"), "--func", "missing"}).exitCode == 1);
  CHECK(runTool({"diff", "--input", sourcePath("samples/square.ir"), "--func", "square", "--wrt", "x"}).exitCode == 2);
}

TEST_CASE("train-lenet on synthetic data") {
  auto dir = scratchDir("cli_train");
  const auto metrics = dir / "metrics.csv", ckpt = dir / "model.tgrd";
  auto r = runTool({"train-lenet", "--synthetic", "40", "--epochs", "2", "--batch-size", "16", "--device", "lazy",
                    "--seed", "5", "--metrics-out", metrics.string(), "--checkpoint-out", ckpt.string()});
  REQUIRE(r.exitCode == 0);
  auto out = lines(r.out);
  REQUIRE(out.size() == 3);
  const std::regex row(R"(\d+,\d+\.\d{6},\d\.\d{4})");
  CHECK(std::regex_match(out[0], row));
  CHECK(std::regex_match(out[1], row));
  CHECK(out[0].starts_with("1,"));
  CHECK(testing::readFile(metrics.string()) == out[0] + "\n" + out[1] + "\n");

  auto c = counters(out[2]);
  CHECK(c.at("steps") == 6);
  CHECK(c.at("compilations") >= 1);
  CHECK(c.at("cache_hits") >= c.at("steps") - c.at("compilations"));
  CHECK(c.at("kernels") > 0);

  // The reloaded checkpoint reproduces the last reported accuracy.
  nn::Model model = nn::makeLeNet(5);
  nn::loadCheckpointInto(model, ckpt);
  rt::EagerDevice eager;
  char acc[16];
  std::snprintf(acc, sizeof acc, "%.4f", nn::accuracy(model, data::makeSyntheticDataset(40, 5), eager));
  CHECK(out[1].substr(out[1].rfind(',') + 1) == acc);

  auto eagerRun = runTool({"train-lenet", "--synthetic", "40", "--epochs", "1", "--batch-size", "16"});
  CHECK(eagerRun.exitCode == 0);
  CHECK(lines(eagerRun.out).size() == 1);

  CHECK(runTool({"train-lenet", "--epochs", "1"}).exitCode == 2);
  CHECK(runTool({"train-lenet", "--synthetic", "40", "--data-dir", dir.string()}).exitCode == 2);
  CHECK(runTool({"train-lenet", "--synthetic", "40", "--device", "tpu"}).exitCode == 2);
}

TEST_CASE("train-lenet on IDX files") {
  auto dir = scratchDir("cli_idx");
  writeIdx(dir, "train", data::makeSyntheticDataset(60, 1));
  writeIdx(dir, "t10k", data::makeSyntheticDataset(30, 1));
  auto r = runTool({"train-lenet", "--data-dir", dir.string(), "--epochs", "1", "--batch-size", "20",
                    "--train-limit", "40", "--test-limit", "20"});
  REQUIRE(r.exitCode == 0);
  auto out = lines(r.out);
  REQUIRE(out.size() == 2);
  CHECK(std::regex_match(out[1], std::regex(R"(test_accuracy=\d\.\d{4})")));

  writeFile(dir / "train-labels-idx1-ubyte", bigEndian(0x801) + bigEndian(60) + "\x01\x02");
  auto truncated = runTool({"train-lenet", "--data-dir", dir.string()});
  CHECK(truncated.exitCode == 1);
  CHECK(contains(truncated.err, "train-labels-idx1-ubyte"));

  auto empty = scratchDir("cli_idx_empty");
  CHECK(runTool({"train-lenet", "--data-dir", empty.string()}).exitCode == 1);
}

TEST_CASE("fit-spline") {
  auto dir = scratchDir("cli_spline");
  spline::SplineModel truth{{0.0f, 1.0f, 2.0f, 3.0f, 4.0f, 5.0f}, {0.2f, 1.1f, -0.4f, 0.8f, 0.0f, 0.5f}};
  writeFile(dir / "data.csv", splineCsv(truth, 120, true));
  const auto model = dir / "model.json";
  auto r = runTool({"fit-spline", "--input", (dir / "data.csv").string(), "--knots", "6", "--out", model.string()});
  REQUIRE(r.exitCode == 0);
  auto out = lines(r.out);
  REQUIRE(out.size() == 2);
  REQUIRE(out[0].starts_with("mse="));
  CHECK(out[1].starts_with("iterations="));
  const double reported = std::stod(out[0].substr(4));
  CHECK(reported <= 1e-3);

  auto j = nlohmann::json::parse(testing::readFile(model.string()));
  spline::SplineModel fitted{j.at("knots").get<std::vector<float>>(), j.at("values").get<std::vector<float>>()};
  CHECK(fitted.knots.size() == 6);
  CHECK(std::fabs(spline::mseLoss(fitted, spline::readCsv(dir / "data.csv")) - reported) <= 1e-6);

  writeFile(dir / "one.csv", "x\n1\n2\n3\n");
  auto bad = runTool({"fit-spline", "--input", (dir / "one.csv").string()});
  CHECK(bad.exitCode == 2);
  CHECK(contains(bad.err, "one.csv:"));

  writeFile(dir / "flat.csv", splineCsv(truth, 30, false));
  CHECK(runTool({"fit-spline", "--input", (dir / "flat.csv").string(), "--rho", "1.5"}).exitCode == 2);
  CHECK(runTool({"fit-spline", "--input", (dir / "missing.csv").string()}).exitCode == 2);
}

TEST_CASE("bench") {
  const std::regex row(R"(([a-z-]+),(eager|lazy),(\d+),(\d+\.\d{3}),(\d+),(\d+),(\d+))");
  std::map<std::string, std::smatch> chain;
  std::map<std::string, std::string> text;
  for (const char* device : {"eager", "lazy"}) {
    auto r = runTool({"bench", "--workload", "elementwise-chain", "--device", device, "--size", "4096", "--iters", "4"});
    REQUIRE(r.exitCode == 0);
    text[device] = lines(r.out).at(0);
    std::smatch m;
    REQUIRE(std::regex_match(text[device], m, row));
    chain[device] = m;
  }
  CHECK(chain["eager"][5] == "40");
  CHECK(chain["eager"][6] == "0");
  CHECK(chain["lazy"][5] == "4");
  CHECK(chain["lazy"][6] == "1");
  CHECK(chain["lazy"][7] == "3");

  auto lenet = runTool({"bench", "--workload", "lenet-step", "--device", "lazy", "--size", "8", "--iters", "3"});
  REQUIRE(lenet.exitCode == 0);
  std::smatch m;
  std::string line = lines(lenet.out).at(0);
  REQUIRE(std::regex_match(line, m, row));
  CHECK(m[1] == "lenet-step");
  CHECK(m[6] == "1");
  CHECK(m[7] == "2");

  CHECK(runTool({"bench", "--workload", "matmul-storm"}).exitCode == 2);
  CHECK(runTool({"bench", "--workload", "elementwise-chain", "--iters", "0"}).exitCode == 2);
}

namespace {

void checkGolden(const std::string& text, const std::string& relative) {
  const std::string golden = sourcePath(relative);
  if (std::getenv("TGRAD_UPDATE_GOLDEN")) writeFile(golden, text);
  CHECK(text == testing::readFile(golden));
}

}  // namespace

TEST_CASE("metrics output matches the golden file") {
  auto dir = scratchDir("cli_golden_metrics");
  auto r = runTool({"train-lenet", "--synthetic", "20", "--epochs", "2", "--batch-size", "8", "--device", "lazy",
                    "--seed", "3", "--metrics-out", (dir / "m.csv").string()});
  REQUIRE(r.exitCode == 0);
  checkGolden(r.out, "tests/golden/cli/train_lenet.txt");
  checkGolden(testing::readFile((dir / "m.csv").string()), "tests/golden/cli/train_lenet_metrics.csv");
}

TEST_CASE("bench lines match the golden file apart from wall time") {
  const std::vector<std::vector<std::string>> runs = {
      {"--workload", "elementwise-chain", "--device", "eager", "--size", "4096", "--iters", "4"},
      {"--workload", "elementwise-chain", "--device", "lazy", "--size", "4096", "--iters", "4"},
      {"--workload", "lenet-step", "--device", "eager", "--size", "8", "--iters", "2"},
      {"--workload", "lenet-step", "--device", "lazy", "--size", "8", "--iters", "2"},
  };
  const std::regex wall(R"(^([^,]+,[^,]+,[^,]+),\d+\.\d{3},)");
  std::string text;
  for (auto args : runs) {
    args.insert(args.begin(), "bench");
    auto r = runTool(args);
    REQUIRE(r.exitCode == 0);
    text += std::regex_replace(r.out, wall, "$1,*,");
  }
  checkGolden(text, "tests/golden/cli/bench.txt");
}

TEST_CASE("dump-trace writes each compiled trace as IR") {
  auto dir = scratchDir("cli_dump");
  const auto path = dir / "traces.ir";
  auto r = runTool({"train-lenet", "--synthetic", "20", "--batch-size", "8", "--device", "lazy", "--dump-trace",
                    path.string()});
  REQUIRE(r.exitCode == 0);
  ir::Module m = ir::parse(testing::readFile(path.string()));
  CHECK(ir::verify(m).empty());
  // Full and partial training batches plus the accuracy pass.
  CHECK(m.functions().size() == 3);
  for (const auto& f : m.functions()) CHECK(f->name.starts_with("trace_"));

  auto bench = runTool({"bench", "--workload", "elementwise-chain", "--device", "lazy", "--size", "64", "--iters", "3",
                        "--dump-trace", path.string()});
  REQUIRE(bench.exitCode == 0);
  ir::Module chain = ir::parse(testing::readFile(path.string()));
  REQUIRE(chain.functions().size() == 1);
  // Ten ops plus the result tuple.
  CHECK(chain.functions()[0]->instructionCount() == 11);

  CHECK(runTool({"bench", "--workload", "elementwise-chain", "--size", "64", "--dump-trace", path.string()}).exitCode ==
        2);
}
