#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tgrad/error.hpp"
#include "tgrad/nn.hpp"

namespace tgrad::nn {

namespace {

constexpr char kMagic[4] = {'T', 'G', 'R', 'D'};
constexpr uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string string(size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<float> floats(size_t n, const char* what) {
    need(n * sizeof(float), what);
    std::vector<float> out(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return out;
  }

  bool atEnd() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorKind::Truncated, path_ + ": file ends inside " + what + " at byte " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void saveCheckpoint(const ParamRecord& params, const std::filesystem::path& path) {
  std::string out(kMagic, 4);
  put<uint16_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const auto& [name, value] : params) {
    put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out += name;
    put<uint8_t>(out, static_cast<uint8_t>(value.rank()));
    for (int64_t d : value.shape().dims()) put<uint32_t>(out, static_cast<uint32_t>(d));
    auto data = value.data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(ErrorKind::Io, "write to " + path.string() + " failed");
}

ParamRecord loadCheckpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());
  std::string magic = r.string(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw Error(ErrorKind::BadMagic, path.string() + " is not a TGRD checkpoint");
  }
  auto version = r.get<uint16_t>("version");
  if (version != kVersion) {
    throw Error(ErrorKind::BadMagic, path.string() + " has unsupported version " + std::to_string(version));
  }
  auto count = r.get<uint32_t>("tensor count");
  ParamRecord params;
  for (uint32_t i = 0; i < count; ++i) {
    auto nameLen = r.get<uint16_t>("name length");
    std::string name = r.string(nameLen, "name");
    auto rank = r.get<uint8_t>("rank");
    std::vector<int64_t> dims;
    for (uint8_t k = 0; k < rank; ++k) dims.push_back(r.get<uint32_t>("dims"));
    Shape shape(dims);
    params.add(std::move(name), Tensor(shape, r.floats(static_cast<size_t>(shape.numel()), "tensor data")));
  }
  if (!r.atEnd()) throw Error(ErrorKind::CountMismatch, path.string() + " has trailing bytes after the last tensor");
  return params;
}

void loadCheckpointInto(Model& model, const std::filesystem::path& path) {
  ParamRecord loaded = loadCheckpoint(path);
  for (const auto& [name, value] : model.params()) {
    if (!loaded.contains(name)) {
      throw Error(ErrorKind::MismatchedStructure, path.string() + " has no parameter " + name);
    }
    if (loaded.at(name).shape() != value.shape()) {
      throw Error(ErrorKind::MismatchedStructure, path.string() + " parameter " + name + " has shape " +
                                                      loaded.at(name).shape().str() + ", model expects " +
                                                      value.shape().str());
    }
  }
  requireSameStructure(model.params(), loaded, path.string());
  model.params() = std::move(loaded);
}

}  // namespace tgrad::nn
