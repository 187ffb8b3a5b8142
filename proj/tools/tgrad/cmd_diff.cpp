#include <fstream>
#include <iostream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "commands.hpp"
#include "tgrad/autodiff.hpp"
#include "tgrad/error.hpp"

namespace tgrad::cli {

namespace {

std::vector<size_t> parseWrt(const std::string& text) {
  std::vector<size_t> out;
  std::stringstream s(text);
  for (std::string item; std::getline(s, item, ',');) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw CLI::ValidationError("--wrt", "expected comma-separated parameter indices, got '" + text + "'");
    }
    out.push_back(std::stoul(item));
  }
  return out;
}

std::string joinNames(const std::set<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "%" : " %") + n;
  return out.empty() ? "-" : out;
}

void printSummary(const ad::DifferentiableBundle& b, const std::string& mode) {
  std::cout << "function @" << b.original << "\n";
  std::cout << "wrt " << (b.wrt.empty() ? "-" : ad::wrtSuffix(b.wrt)) << "\n";
  std::cout << "mode " << mode << "\n";
  std::cout << "active " << joinNames(b.activity.active) << "\n";
  size_t warnings = 0;
  for (const auto& d : b.diagnostics) warnings += d.severity == ad::Severity::Warning;
  std::cout << "warnings " << warnings << "\n";
  std::cout << "augmented @" << b.vjp << "\n";
  if (mode == "vjp") {
    std::cout << "pullback @" << b.pullback << "\n";
  } else {
    std::cout << "differential @" << b.differential << "\n";
  }
  for (const auto& r : b.records) {
    std::cout << "record ^" << r.block << " block " << r.blockIndex << " captures " << r.captures.size()
              << " predecessors";
    if (r.predecessors.empty()) std::cout << " -";
    for (const auto& e : r.predecessors) std::cout << " ^" << e.predecessor << ":" << e.tag;
    std::cout << "\n";
  }
}

}  // namespace

CLI::App* addDiff(CLI::App& app, DiffOptions& o) {
  CLI::App* cmd = app.add_subcommand("diff", "Differentiate a function from an IR file");
  cmd->add_option("--input", o.input, "IR file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--func", o.function, "Function name, without '@'")->required();
  cmd->add_option("--wrt", o.wrt, "Comma-separated parameter indices (default: all float parameters)");
  cmd->add_option("--mode", o.mode, "vjp or jvp")->check(CLI::IsMember({"vjp", "jvp"}))->capture_default_str();
  cmd->add_option("--emit", o.emit, "ir or summary")->check(CLI::IsMember({"ir", "summary"}))->capture_default_str();
  return cmd;
}

int runDiff(const DiffOptions& o) {
  std::ifstream in(o.input);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + o.input);
  std::stringstream text;
  text << in.rdbuf();
  ir::Module m = ir::parse(text.str());
  for (const auto& f : m.functions()) ir::verifyOrThrow(*f, &m);

  std::string name = o.function.starts_with("@") ? o.function.substr(1) : o.function;
  const ir::Function* f = m.find(name);
  if (!f) throw Error(ErrorKind::MissingFunction, o.input + " has no function @" + name);
  std::vector<size_t> wrt = o.wrt.empty() ? ad::differentiableParams(*f) : parseWrt(o.wrt);
  spdlog::info("differentiating @{} wrt {}", name, ad::wrtSuffix(wrt));

  auto registry = ad::DerivativeRegistry::withBuiltins();
  auto diags = ad::checkDifferentiability(*f, wrt, ad::activityAnalysis(*f, wrt), *registry);
  for (const auto& d : diags) std::cerr << d.str() << "\n";
  if (ad::hasErrors(diags)) return 1;

  ad::Differentiator d(m, registry);
  auto bundle = d.transform(name, wrt);
  if (o.emit == "summary") {
    printSummary(*bundle, o.mode);
    return 0;
  }
  const std::string skip = o.mode == "vjp" ? "__df__" : "__pb__";
  ir::Module out;
  for (const auto& fn : m.functions()) out.add(*fn);
  for (const auto& s : bundle->synthesized) {
    if (s.find(skip) == std::string::npos) out.add(d.module()->get(s));
  }
  std::cout << ir::print(out);
  return 0;
}

}  // namespace tgrad::cli
