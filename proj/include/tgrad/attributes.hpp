#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace tgrad {

/// Literal attached to an instruction or trace node (strides, padding,
/// constant payloads, record indices, ...).
using AttrValue =
    std::variant<int64_t, double, std::string, std::vector<int64_t>, std::vector<double>>;

/// Ordered so printing and hashing are deterministic.
using Attributes = std::map<std::string, AttrValue>;

int64_t attrInt(const Attributes& attrs, const std::string& key);
int64_t attrInt(const Attributes& attrs, const std::string& key, int64_t fallback);
double attrDouble(const Attributes& attrs, const std::string& key);
std::string attrString(const Attributes& attrs, const std::string& key, const std::string& fallback);
std::vector<int64_t> attrInts(const Attributes& attrs, const std::string& key,
                              const std::vector<int64_t>& fallback);
std::optional<std::vector<int64_t>> attrIntsOpt(const Attributes& attrs, const std::string& key);
/// Accepts a scalar or a list of numbers (ints are widened).
std::vector<double> attrNumbers(const Attributes& attrs, const std::string& key);

/// Canonical literal text; floats always carry a '.', 'e', "nan" or "inf"
/// so they never re-read as integers.
std::string formatAttrValue(const AttrValue& value);
std::string formatDouble(double value);

}  // namespace tgrad
