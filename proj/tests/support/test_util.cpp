#include "test_util.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace tgrad::testing {

std::string sourcePath(const std::string& relative) { return std::string(TGRAD_SOURCE_DIR) + "/" + relative; }

std::string readFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace {

std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

}  // namespace

std::filesystem::path scratchDir(const std::string& name) {
  std::filesystem::path dir = std::filesystem::path(TGRAD_SCRATCH_DIR) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void writeFile(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

CommandResult runTool(const std::vector<std::string>& args) {
  static int counter = 0;
  const std::filesystem::path errPath =
      std::filesystem::path(TGRAD_SCRATCH_DIR) / ("stderr_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::create_directories(errPath.parent_path());
  std::string cmd = quote(TGRAD_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>" + quote(errPath.string());

  CommandResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) throw Error(ErrorKind::Io, "cannot run " + cmd);
  char buf[4096];
  for (size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.exitCode = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = readFile(errPath.string());
  std::filesystem::remove(errPath);
  return r;
}

}  // namespace tgrad::testing
