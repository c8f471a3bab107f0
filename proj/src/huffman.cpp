#include "qatforge/huffman.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <stdexcept>
#include <tuple>

namespace qatforge {

std::string HuffmanTable::codeword(std::size_t symbol) const {
  if (!contains(symbol)) throw std::out_of_range("symbol " + std::to_string(symbol) + " has no code");
  std::string out;
  for (int i = lengths[symbol] - 1; i >= 0; --i) out.push_back(((codes[symbol] >> i) & 1) ? '1' : '0');
  return out;
}

HuffmanTable HuffmanTable::from_lengths(std::vector<std::uint8_t> lengths) {
  HuffmanTable t;
  t.codes.assign(lengths.size(), 0);
  std::vector<std::size_t> order;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    if (lengths[s] > kMaxCodeLength) throw std::invalid_argument("code length exceeds the supported maximum");
    if (lengths[s] > 0) order.push_back(s);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
  std::uint64_t code = 0;
  int len = order.empty() ? 0 : lengths[order.front()];
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int l = lengths[order[i]];
    if (i > 0) {
      ++code;
      code <<= (l - len);
    }
    len = l;
    if (code >> l) throw std::invalid_argument("code lengths violate the Kraft inequality");
    t.codes[order[i]] = code;
  }
  t.lengths = std::move(lengths);
  return t;
}

HuffmanTable huffman_build(std::span<const std::uint64_t> counts) {
  const std::size_t n = counts.size();
  std::vector<std::size_t> present;
  for (std::size_t s = 0; s < n; ++s) {
    if (counts[s] > 0) present.push_back(s);
  }
  if (present.empty()) throw std::invalid_argument("huffman_build needs at least one symbol with a nonzero count");
  std::vector<std::uint8_t> lengths(n, 0);
  if (present.size() == 1) {
    lengths[present.front()] = 1;
    return HuffmanTable::from_lengths(std::move(lengths));
  }

  // Nodes: leaves first, then internal nodes; parent links give depths.
  using Entry = std::tuple<std::uint64_t, std::size_t, std::size_t>;  // weight, smallest symbol, node
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  std::vector<std::size_t> parent(present.size() * 2 - 1, 0);
  for (std::size_t i = 0; i < present.size(); ++i) heap.emplace(counts[present[i]], present[i], i);
  std::size_t next = present.size();
  while (heap.size() > 1) {
    const auto [wa, sa, a] = heap.top();
    heap.pop();
    const auto [wb, sb, b] = heap.top();
    heap.pop();
    parent[a] = parent[b] = next;
    heap.emplace(wa + wb, std::min(sa, sb), next);
    ++next;
  }
  const std::size_t root = next - 1;
  std::vector<int> depth(parent.size(), 0);
  for (std::size_t v = root; v-- > 0;) depth[v] = depth[parent[v]] + 1;
  for (std::size_t i = 0; i < present.size(); ++i) {
    if (depth[i] > kMaxCodeLength) throw std::overflow_error("huffman code length exceeds the supported maximum");
    lengths[present[i]] = static_cast<std::uint8_t>(depth[i]);
  }
  return HuffmanTable::from_lengths(std::move(lengths));
}

double average_length(const HuffmanTable& table, std::span<const std::uint64_t> counts) {
  double bits = 0.0, total = 0.0;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    if (counts[s] == 0) continue;
    if (!table.contains(s)) throw std::invalid_argument("counted symbol missing from the table");
    bits += static_cast<double>(counts[s]) * table.lengths[s];
    total += static_cast<double>(counts[s]);
  }
  return total > 0 ? bits / total : 0.0;
}

double entropy(std::span<const std::uint64_t> counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}));
  double h = 0.0;
  for (std::uint64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

void BitWriter::put(std::uint64_t value, int bits) {
  for (int i = bits - 1; i >= 0; --i) {
    if (bits_ % 8 == 0) bytes_.push_back(0);
    if ((value >> i) & 1) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
    ++bits_;
  }
}

void BitWriter::put(const HuffmanTable& table, std::size_t symbol) {
  if (!table.contains(symbol)) throw std::invalid_argument("symbol " + std::to_string(symbol) + " has no code");
  put(table.codes[symbol], table.lengths[symbol]);
}

int BitReader::bit() {
  if (pos_ >= bytes_.size() * 8) throw std::out_of_range("bitstream exhausted at bit " + std::to_string(pos_));
  const int b = (bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1;
  ++pos_;
  return b;
}

std::uint64_t BitReader::get(int bits) {
  std::uint64_t v = 0;
  for (int i = 0; i < bits; ++i) v = (v << 1) | static_cast<std::uint64_t>(bit());
  return v;
}

HuffmanDecoder::HuffmanDecoder(const HuffmanTable& table) {
  for (std::uint8_t l : table.lengths) max_length_ = std::max<int>(max_length_, l);
  count_.assign(static_cast<std::size_t>(max_length_) + 1, 0);
  for (std::uint8_t l : table.lengths) {
    if (l > 0) ++count_[l];
  }
  for (std::size_t s = 0; s < table.lengths.size(); ++s) {
    if (table.lengths[s] > 0) sorted_.push_back(s);
  }
  std::stable_sort(sorted_.begin(), sorted_.end(),
                   [&](std::size_t a, std::size_t b) { return table.lengths[a] < table.lengths[b]; });
  first_.assign(count_.size(), 0);
  offset_.assign(count_.size(), 0);
  std::uint64_t code = 0, index = 0;
  for (std::size_t l = 1; l < count_.size(); ++l) {
    code = (code + count_[l - 1]) << 1;
    first_[l] = code;
    offset_[l] = index;
    index += count_[l];
  }
}

std::size_t HuffmanDecoder::decode(BitReader& in) const {
  std::uint64_t code = 0;
  for (int l = 1; l <= max_length_; ++l) {
    code = (code << 1) | static_cast<std::uint64_t>(in.bit());
    if (code >= first_[l] && code - first_[l] < count_[l]) return sorted_[offset_[l] + (code - first_[l])];
  }
  throw std::runtime_error("invalid huffman code at bit " + std::to_string(in.position()));
}

}  // namespace qatforge
