#pragma once

#include "qatforge/data.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace qatforge {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Malformed IDX input; the message names the file and byte offset.
class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MnistSet {
  ImageSet train;
  ImageSet test;
};

/// Parse an IDX image file and its label file into one set.
ImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Standard file names under `root`: train-images-idx3-ubyte and friends.
MnistSet load_mnist(const std::filesystem::path& root);

/// Dataset root from QATFORGE_DATA, or empty when unset.
std::filesystem::path data_root_from_env();

}  // namespace qatforge
