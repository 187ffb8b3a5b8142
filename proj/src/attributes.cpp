#include "tgrad/attributes.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "tgrad/error.hpp"

namespace tgrad {

namespace {

const AttrValue& require(const Attributes& attrs, const std::string& key) {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw Error(ErrorKind::InvalidArgument, "missing attribute '" + key + "'");
  return it->second;
}

}  // namespace

int64_t attrInt(const Attributes& attrs, const std::string& key) {
  const AttrValue& v = require(attrs, key);
  if (auto* i = std::get_if<int64_t>(&v)) return *i;
  throw Error(ErrorKind::InvalidArgument, "attribute '" + key + "' is not an integer");
}

int64_t attrInt(const Attributes& attrs, const std::string& key, int64_t fallback) {
  return attrs.count(key) ? attrInt(attrs, key) : fallback;
}

double attrDouble(const Attributes& attrs, const std::string& key) {
  const AttrValue& v = require(attrs, key);
  if (auto* d = std::get_if<double>(&v)) return *d;
  if (auto* i = std::get_if<int64_t>(&v)) return static_cast<double>(*i);
  throw Error(ErrorKind::InvalidArgument, "attribute '" + key + "' is not a number");
}

std::string attrString(const Attributes& attrs, const std::string& key, const std::string& fallback) {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  if (auto* s = std::get_if<std::string>(&it->second)) return *s;
  throw Error(ErrorKind::InvalidArgument, "attribute '" + key + "' is not a string");
}

std::vector<int64_t> attrInts(const Attributes& attrs, const std::string& key,
                              const std::vector<int64_t>& fallback) {
  auto v = attrIntsOpt(attrs, key);
  return v ? *v : fallback;
}

std::optional<std::vector<int64_t>> attrIntsOpt(const Attributes& attrs, const std::string& key) {
  auto it = attrs.find(key);
  if (it == attrs.end()) return std::nullopt;
  if (auto* l = std::get_if<std::vector<int64_t>>(&it->second)) return *l;
  // An empty list parses as ints; a float list with no elements is the same thing.
  if (auto* d = std::get_if<std::vector<double>>(&it->second); d && d->empty()) {
    return std::vector<int64_t>{};
  }
  if (auto* i = std::get_if<int64_t>(&it->second)) return std::vector<int64_t>{*i};
  throw Error(ErrorKind::InvalidArgument, "attribute '" + key + "' is not an integer list");
}

std::vector<double> attrNumbers(const Attributes& attrs, const std::string& key) {
  const AttrValue& v = require(attrs, key);
  return std::visit(
      [&](const auto& x) -> std::vector<double> {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, int64_t> || std::is_same_v<T, double>) {
          return {static_cast<double>(x)};
        } else if constexpr (std::is_same_v<T, std::vector<int64_t>>) {
          return {x.begin(), x.end()};
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
          return x;
        } else {
          throw Error(ErrorKind::InvalidArgument, "attribute '" + key + "' is not numeric");
        }
      },
      v);
}

std::string formatDouble(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  // Prefer the shortest representation that round-trips.
  for (int precision = 1; precision <= 17; ++precision) {
    char tmp[40];
    std::snprintf(tmp, sizeof tmp, "%.*g", precision, value);
    if (std::strtod(tmp, nullptr) == value) {
      std::snprintf(buf, sizeof buf, "%s", tmp);
      break;
    }
  }
  std::string s(buf);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string formatAttrValue(const AttrValue& value) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, int64_t>) {
          return std::to_string(x);
        } else if constexpr (std::is_same_v<T, double>) {
          return formatDouble(x);
        } else if constexpr (std::is_same_v<T, std::string>) {
          std::string out = "\"";
          for (char c : x) {
            if (c == '"' || c == '\\') out += '\\';
            out += c;
          }
          return out + "\"";
        } else {
          std::string out = "[";
          for (size_t i = 0; i < x.size(); ++i) {
            if (i) out += ", ";
            if constexpr (std::is_same_v<T, std::vector<int64_t>>) {
              out += std::to_string(x[i]);
            } else {
              out += formatDouble(x[i]);
            }
          }
          return out + "]";
        }
      },
      value);
}

}  // namespace tgrad
