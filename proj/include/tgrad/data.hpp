#pragma once

#include <cstdint>
#include <filesystem>

#include "tgrad/nn.hpp"

namespace tgrad::data {

/// IDX image file (magic 0x00000803, u8 N×H×W) as f32 N×H×W×1 in [0, 1].
Tensor loadIdxImages(const std::filesystem::path& path);
/// IDX label file (magic 0x00000801, u8 N) as f32 class indices.
Tensor loadIdxLabels(const std::filesystem::path& path);
/// Pairs the two files; counts must agree.
nn::Dataset loadIdxDataset(const std::filesystem::path& images, const std::filesystem::path& labels);
enum class MnistSplit { Train, Test };

/// Reads train-{images-idx3,labels-idx1}-ubyte from `dir`, or the t10k-*
/// pair for the test split.
nn::Dataset loadMnistDirectory(const std::filesystem::path& dir, MnistSplit split = MnistSplit::Train);
bool hasMnistSplit(const std::filesystem::path& dir, MnistSplit split);

/// The first n examples (all of them when n <= 0 or n >= size).
nn::Dataset takeFirst(const nn::Dataset& data, int64_t n);

/// Ten seeded 28×28 templates in [0, 1); example i has label i mod 10 and is
/// its template plus uniform noise in [-0.1, 0.1]. Requires n >= 10.
nn::Dataset makeSyntheticDataset(int64_t n, uint64_t seed);
/// The noise-free class templates used by makeSyntheticDataset.
Tensor syntheticTemplates(uint64_t seed);

}  // namespace tgrad::data
