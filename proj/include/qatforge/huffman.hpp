#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qatforge {

inline constexpr int kMaxCodeLength = 57;

/// Canonical prefix code over symbols 0..size-1. A length of 0 marks a
/// symbol that does not occur.
struct HuffmanTable {
  std::vector<std::uint8_t> lengths;
  std::vector<std::uint64_t> codes;

  std::size_t alphabet_size() const { return lengths.size(); }
  bool contains(std::size_t symbol) const { return symbol < lengths.size() && lengths[symbol] > 0; }
  /// Codeword as a string of '0'/'1', most significant bit first.
  std::string codeword(std::size_t symbol) const;

  /// Canonical codes for the given lengths: shorter codes first, ties by symbol.
  static HuffmanTable from_lengths(std::vector<std::uint8_t> lengths);
};

/// Optimal prefix code for the counts (indexed by symbol). Ties are broken
/// by the smallest symbol in each subtree, so the result is deterministic.
/// A single occurring symbol gets a 1-bit code.
HuffmanTable huffman_build(std::span<const std::uint64_t> counts);

/// Count-weighted mean code length in bits.
double average_length(const HuffmanTable& table, std::span<const std::uint64_t> counts);
/// Empirical entropy of the counts in bits per symbol.
double entropy(std::span<const std::uint64_t> counts);

/// MSB-first bit packer.
class BitWriter {
 public:
  void put(std::uint64_t value, int bits);
  void put(const HuffmanTable& table, std::size_t symbol);
  std::uint64_t bit_count() const { return bits_; }
  /// Bytes with the final byte zero-padded.
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint64_t bits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_offset = 0)
      : bytes_(bytes), pos_(bit_offset) {}
  std::uint64_t get(int bits);
  int bit();
  std::uint64_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_;
};

/// Canonical decoder: walks code lengths one bit at a time.
class HuffmanDecoder {
 public:
  explicit HuffmanDecoder(const HuffmanTable& table);
  std::size_t decode(BitReader& in) const;

 private:
  std::vector<std::uint64_t> count_;   // codes per length
  std::vector<std::uint64_t> first_;   // first code of each length
  std::vector<std::uint64_t> offset_;  // index into sorted_ of each length's first symbol
  std::vector<std::size_t> sorted_;
  int max_length_ = 0;
};

}  // namespace qatforge
