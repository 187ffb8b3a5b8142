#include "tgrad/data.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "tgrad/error.hpp"
#include "tgrad/random.hpp"

namespace tgrad::data {

namespace {

constexpr uint32_t kImageMagic = 0x00000803;
constexpr uint32_t kLabelMagic = 0x00000801;

struct IdxFile {
  std::vector<uint32_t> dims;
  std::string bytes;
  size_t payload = 0;
};

uint32_t bigEndian32(const std::string& b, size_t at) {
  auto u = [&](size_t i) { return static_cast<uint32_t>(static_cast<unsigned char>(b[at + i])); };
  return (u(0) << 24) | (u(1) << 16) | (u(2) << 8) | u(3);
}

IdxFile readIdx(const std::filesystem::path& path, uint32_t magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot open " + path.string());
  IdxFile idx;
  idx.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  const std::string& b = idx.bytes;
  if (b.size() < 4) throw Error(ErrorKind::Truncated, path.string() + " is shorter than an IDX header");
  uint32_t found = bigEndian32(b, 0);
  if (found != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "magic 0x%08X, expected 0x%08X", found, magic);
    throw Error(ErrorKind::BadMagic, path.string() + " has " + buf);
  }
  const size_t rank = magic & 0xFF;
  if (b.size() < 4 + 4 * rank) throw Error(ErrorKind::Truncated, path.string() + " ends inside the dimension list");
  uint64_t count = 1;
  for (size_t i = 0; i < rank; ++i) {
    idx.dims.push_back(bigEndian32(b, 4 + 4 * i));
    count *= idx.dims.back();
  }
  idx.payload = 4 + 4 * rank;
  if (b.size() - idx.payload < count) {
    throw Error(ErrorKind::Truncated, path.string() + " holds " + std::to_string(b.size() - idx.payload) +
                                          " data bytes, header promises " + std::to_string(count));
  }
  return idx;
}

}  // namespace

Tensor loadIdxImages(const std::filesystem::path& path) {
  IdxFile idx = readIdx(path, kImageMagic);
  const int64_t n = idx.dims[0], h = idx.dims[1], w = idx.dims[2];
  std::vector<float> values(static_cast<size_t>(n * h * w));
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<float>(static_cast<unsigned char>(idx.bytes[idx.payload + i])) / 255.0f;
  }
  return Tensor(Shape{n, h, w, 1}, std::move(values));
}

Tensor loadIdxLabels(const std::filesystem::path& path) {
  IdxFile idx = readIdx(path, kLabelMagic);
  const int64_t n = idx.dims[0];
  std::vector<float> values(static_cast<size_t>(n));
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<float>(static_cast<unsigned char>(idx.bytes[idx.payload + i]));
  }
  return Tensor(Shape{n}, std::move(values));
}

nn::Dataset loadIdxDataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
  nn::Dataset d{loadIdxImages(images), loadIdxLabels(labels)};
  if (d.images.shape()[0] != d.labels.shape()[0]) {
    throw Error(ErrorKind::CountMismatch, images.string() + " has " + std::to_string(d.images.shape()[0]) +
                                              " images but " + labels.string() + " has " +
                                              std::to_string(d.labels.shape()[0]) + " labels");
  }
  return d;
}

namespace {

std::string mnistPrefix(MnistSplit split) { return split == MnistSplit::Train ? "train" : "t10k"; }

}  // namespace

nn::Dataset loadMnistDirectory(const std::filesystem::path& dir, MnistSplit split) {
  const std::string p = mnistPrefix(split);
  return loadIdxDataset(dir / (p + "-images-idx3-ubyte"), dir / (p + "-labels-idx1-ubyte"));
}

bool hasMnistSplit(const std::filesystem::path& dir, MnistSplit split) {
  const std::string p = mnistPrefix(split);
  return std::filesystem::is_regular_file(dir / (p + "-images-idx3-ubyte")) &&
         std::filesystem::is_regular_file(dir / (p + "-labels-idx1-ubyte"));
}

nn::Dataset takeFirst(const nn::Dataset& data, int64_t n) {
  if (n <= 0 || n >= data.size()) return data;
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t{0});
  auto [images, labels] = data.batch(order, 0, n);
  return {std::move(images), std::move(labels)};
}

Tensor syntheticTemplates(uint64_t seed) {
  CounterRng rng(seed);
  std::vector<float> values;
  values.reserve(10 * 28 * 28);
  for (uint64_t k = 0; k < 10; ++k) {
    Tensor t = randomUniform(Shape{28, 28}, rng.split(k).key(), 0.0f, 1.0f);
    values.insert(values.end(), t.data().begin(), t.data().end());
  }
  return Tensor(Shape{10, 28, 28, 1}, std::move(values));
}

nn::Dataset makeSyntheticDataset(int64_t n, uint64_t seed) {
  if (n < 10) throw Error(ErrorKind::InvalidArgument, "synthetic dataset needs at least 10 examples");
  Tensor templates = syntheticTemplates(seed);
  auto t = templates.data();
  constexpr int64_t kPixels = 28 * 28;
  Tensor noise = randomUniform(Shape{n, kPixels}, CounterRng(seed).split(10).key(), -0.1f, 0.1f);
  auto z = noise.data();
  std::vector<float> images(static_cast<size_t>(n * kPixels));
  std::vector<float> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t k = i % 10;
    labels[static_cast<size_t>(i)] = static_cast<float>(k);
    for (int64_t p = 0; p < kPixels; ++p) {
      images[static_cast<size_t>(i * kPixels + p)] =
          t[static_cast<size_t>(k * kPixels + p)] + z[static_cast<size_t>(i * kPixels + p)];
    }
  }
  return {Tensor(Shape{n, 28, 28, 1}, std::move(images)), Tensor(Shape{n}, std::move(labels))};
}

}  // namespace tgrad::data
