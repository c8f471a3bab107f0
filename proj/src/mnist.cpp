#include "qatforge/mnist.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

namespace qatforge {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    std::ostringstream os;
    os << path.string() << ": header truncated at offset " << offset << " (file has " << bytes.size() << " bytes)";
    throw IdxError(os.str());
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) {
    std::ostringstream os;
    os << path.string() << ": bad magic at offset 0: expected 0x" << std::hex << want << ", got 0x" << got;
    throw IdxError(os.str());
  }
}

void check_length(std::size_t expected, std::size_t actual, const std::filesystem::path& path) {
  if (actual != expected) {
    std::ostringstream os;
    os << path.string() << ": expected " << expected << " bytes, got " << actual;
    throw IdxError(os.str());
  }
}

}  // namespace

ImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  check_magic(be32(img, 0, images), kIdxImagesMagic, images);
  const std::size_t count = be32(img, 4, images);
  const std::size_t rows = be32(img, 8, images);
  const std::size_t cols = be32(img, 12, images);
  check_length(16 + count * rows * cols, img.size(), images);

  check_magic(be32(lab, 0, labels), kIdxLabelsMagic, labels);
  const std::size_t label_count = be32(lab, 4, labels);
  check_length(8 + label_count, lab.size(), labels);
  if (label_count != count) {
    std::ostringstream os;
    os << labels.string() << ": " << label_count << " labels for " << count << " images";
    throw IdxError(os.str());
  }

  ImageSet set;
  set.channels = 1;
  set.height = static_cast<Index>(rows);
  set.width = static_cast<Index>(cols);
  set.pixels.assign(img.begin() + 16, img.end());
  set.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int y = lab[8 + i];
    if (y > 9) {
      std::ostringstream os;
      os << labels.string() << ": label " << y << " out of range at offset " << 8 + i;
      throw IdxError(os.str());
    }
    set.labels.push_back(y);
  }
  return set;
}

MnistSet load_mnist(const std::filesystem::path& root) {
  return {load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte"),
          load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")};
}

std::filesystem::path data_root_from_env() {
  const char* v = std::getenv("QATFORGE_DATA");
  return v != nullptr ? std::filesystem::path(v) : std::filesystem::path();
}

}  // namespace qatforge
