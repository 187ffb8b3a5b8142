#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgrad/error.hpp"

namespace tgrad::testing {

std::string readFile(const std::string& path);
/// Path of a file under the source tree.
std::string sourcePath(const std::string& relative);

struct CommandResult {
  int exitCode = -1;
  std::string out;
  std::string err;
};

/// Runs the tgrad executable with `args` (shell-quoted) and captures both streams.
CommandResult runTool(const std::vector<std::string>& args);
/// A fresh empty directory under the build tree.
std::filesystem::path scratchDir(const std::string& name);
void writeFile(const std::filesystem::path& path, const std::string& text);

/// The kind of the tgrad::Error thrown by f; throws std::logic_error when f
/// returns normally.
template <class F>
ErrorKind errorOf(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  throw std::logic_error("expected an error");
}

}  // namespace tgrad::testing
