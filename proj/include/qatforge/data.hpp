#pragma once

#include "qatforge/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace qatforge {

/// Input images are unsigned 8-bit codes; the real input is code * kInputScale.
inline constexpr double kInputScale = 1.0 / 255.0;
inline constexpr int kInputBits = 8;

/// Labelled 8-bit images stored as raw codes, NCHW.
struct ImageSet {
  Index channels = 1;
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  Index count() const { return static_cast<Index>(labels.size()); }
  Index image_size() const { return channels * height * width; }
  Shape image_shape() const { return {channels, height, width}; }

  /// Real-valued batch (code * scale) for the given sample indices.
  TensorD batch(std::span<const Index> indices, double scale = kInputScale) const {
    TensorD x({static_cast<Index>(indices.size()), channels, height, width});
    const Index sz = image_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::uint8_t* src = pixels.data() + indices[i] * sz;
      double* dst = x.data().data() + static_cast<Index>(i) * sz;
      for (Index j = 0; j < sz; ++j) dst[j] = static_cast<double>(src[j]) * scale;
    }
    return x;
  }

  /// Raw codes for the given sample indices.
  IntTensor codes(std::span<const Index> indices) const {
    IntTensor x({static_cast<Index>(indices.size()), channels, height, width});
    const Index sz = image_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      for (Index j = 0; j < sz; ++j) x[static_cast<Index>(i) * sz + j] = pixels[indices[i] * sz + j];
    }
    return x;
  }

  std::vector<int> batch_labels(std::span<const Index> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (Index i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
  }

  /// First n samples (or all, if fewer).
  ImageSet head(Index n) const {
    ImageSet out{channels, height, width, {}, {}};
    n = std::min(n, count());
    out.pixels.assign(pixels.begin(), pixels.begin() + n * image_size());
    out.labels.assign(labels.begin(), labels.begin() + n);
    return out;
  }
};

}  // namespace qatforge
