#pragma once

#include "qatforge/huffman.hpp"
#include "qatforge/network.hpp"
#include "qatforge/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace qatforge {

inline constexpr std::uint16_t kQzipVersion = 1;
/// Gap buckets: bucket b holds gaps in [2^b, 2^(b+1)), followed by b raw bits.
inline constexpr std::size_t kGapBuckets = 32;

/// Signed weight codes of one layer with their scale.
struct CodeLayer {
  int bits = 0;
  double delta = 0.0;
  std::vector<std::int32_t> codes;
  friend bool operator==(const CodeLayer&, const CodeLayer&) = default;
};

/// Weight codes from a pruned, quantized network. Rejects weights farther
/// than kConvertTolerance * delta from a level and masked weights that are
/// not zero.
std::vector<CodeLayer> extract_codes(const Network& net, const ScaleState& scales, const LayerBits& bits,
                                     const PruneMask* mask = nullptr);

/// QZIP archive of the nonzero codes: one shared code table, one shared gap
/// table, per-layer bit offsets into a single bitstream.
std::vector<std::uint8_t> encode_codes(const std::vector<CodeLayer>& layers);
std::vector<CodeLayer> decode_codes(const std::vector<std::uint8_t>& archive);

std::vector<std::uint8_t> encode_model(const Network& net, const ScaleState& scales, const LayerBits& bits,
                                       const PruneMask* mask = nullptr);

struct CompressionReport {
  std::uint64_t weights = 0;
  std::uint64_t nonzero = 0;
  std::uint64_t original_bits = 0;  // weights * 32
  std::uint64_t compressed_bits = 0;  // archive bytes * 8
  std::uint64_t header_bits = 0;
  std::uint64_t table_bits = 0;
  std::uint64_t code_bits = 0;
  std::uint64_t index_bits = 0;  // gap buckets plus raw extra bits
  std::uint64_t padding_bits = 0;
  double ratio = 0.0;
  double zero_fraction_before = 0.0;  // exact zeros among the float weights
  double zero_fraction_after = 0.0;   // zero codes
  double code_entropy = 0.0;
  double code_average_length = 0.0;
  double gap_entropy = 0.0;
  double gap_average_length = 0.0;
};

/// weights * 32 / compressed_bits.
double compression_ratio(std::uint64_t weights, std::uint64_t compressed_bits);

/// Bit accounting of an archive. zero_fraction_before comes from `original`
/// when given, otherwise it equals zero_fraction_after.
CompressionReport report(const std::vector<std::uint8_t>& archive, const Network* original = nullptr);

void save_archive(const std::vector<std::uint8_t>& archive, const std::filesystem::path& path);
std::vector<std::uint8_t> load_archive(const std::filesystem::path& path);

}  // namespace qatforge
