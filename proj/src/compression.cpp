#include "qatforge/compression.hpp"

#include "qatforge/bytes.hpp"
#include "qatforge/fixed_point.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <optional>
#include <sstream>

namespace qatforge {

namespace {

struct LayerHeader {
  int bits = 0;
  double delta = 0.0;
  std::uint32_t count = 0;
  std::uint32_t nonzero = 0;
  std::uint32_t bit_offset = 0;
};

struct Parsed {
  int max_bits = 0;
  std::vector<LayerHeader> layers;
  HuffmanTable code_table;
  HuffmanTable gap_table;
  std::vector<std::uint8_t> stream;
  std::size_t table_bytes = 0;
  std::size_t stream_bytes = 0;
};

std::size_t symbol_of(std::int32_t code, int max_bits) {
  if (max_bits == 1) return code < 0 ? 0 : 1;
  return static_cast<std::size_t>(code + (1 << (max_bits - 1)));
}

std::int32_t code_of(std::size_t symbol, int max_bits) {
  if (max_bits == 1) return symbol == 0 ? -1 : 1;
  return static_cast<std::int32_t>(symbol) - (1 << (max_bits - 1));
}

std::size_t alphabet(int max_bits) { return max_bits == 1 ? 2 : std::size_t{1} << max_bits; }

int bucket_of(std::uint64_t gap) { return static_cast<int>(std::bit_width(gap)) - 1; }

void check_layer(const CodeLayer& l, std::size_t index) {
  const std::string name = "layer " + std::to_string(index + 1);
  if (l.bits < 1 || l.bits > 16) throw std::invalid_argument(name + ": bit-width out of range");
  if (!(l.delta > 0.0)) throw std::invalid_argument(name + ": scale must be positive");
  const auto lo = static_cast<std::int32_t>(signed_code_min(l.bits));
  const auto hi = static_cast<std::int32_t>(signed_code_max(l.bits));
  for (std::int32_t c : l.codes) {
    if (c < lo || c > hi) throw std::invalid_argument(name + ": code " + std::to_string(c) + " out of range");
  }
}

Parsed parse(const std::vector<std::uint8_t>& archive) {
  ByteReader r(archive, "QZIP");
  r.expect_magic("QZIP");
  const auto version = r.get<std::uint16_t>();
  if (version != kQzipVersion) r.fail("unsupported version " + std::to_string(version));
  Parsed p;
  const auto count = r.get<std::uint16_t>();
  p.max_bits = r.get<std::uint8_t>();
  if (count > 0 && (p.max_bits < 1 || p.max_bits > 16)) r.fail("bad code width");
  for (std::uint16_t i = 0; i < count; ++i) {
    LayerHeader h;
    h.bits = r.get<std::uint8_t>();
    h.delta = r.get<double>();
    h.count = r.get<std::uint32_t>();
    h.nonzero = r.get<std::uint32_t>();
    h.bit_offset = r.get<std::uint32_t>();
    if (h.nonzero > h.count) r.fail("nonzero count exceeds layer size");
    p.layers.push_back(h);
  }
  const std::size_t table_start = r.offset();
  const auto code_alphabet = r.get<std::uint32_t>();
  if (code_alphabet != 0 && code_alphabet != alphabet(p.max_bits)) r.fail("code table size mismatch");
  std::vector<std::uint8_t> lengths(code_alphabet);
  for (auto& l : lengths) l = r.get<std::uint8_t>();
  p.code_table = HuffmanTable::from_lengths(std::move(lengths));
  const auto gap_alphabet = r.get<std::uint8_t>();
  if (gap_alphabet != 0 && gap_alphabet != kGapBuckets) r.fail("gap table size mismatch");
  lengths.assign(gap_alphabet, 0);
  for (auto& l : lengths) l = r.get<std::uint8_t>();
  p.gap_table = HuffmanTable::from_lengths(std::move(lengths));
  p.table_bytes = r.offset() - table_start;
  const auto stream_bytes = r.get<std::uint32_t>();
  p.stream = r.get_bytes(stream_bytes);
  p.stream_bytes = stream_bytes;
  r.expect_end();
  return p;
}

}  // namespace

std::vector<CodeLayer> extract_codes(const Network& net, const ScaleState& scales, const LayerBits& bits,
                                     const PruneMask* mask) {
  std::vector<CodeLayer> out;
  for (std::size_t l = 0; l < net.parameterized_count(); ++l) {
    const std::string name = "layer " + std::to_string(l + 1);
    if (!bits.quantized_weights(l)) {
      throw std::invalid_argument(name + " has full-precision weights; quantize every layer before compressing");
    }
    const auto w = net.parameter(l).weight.array();
    const double delta = scales.weight.at(l);
    const int n = bits.weight[l];
    CodeLayer cl{n, delta, {}};
    cl.codes.reserve(static_cast<std::size_t>(w.size()));
    for (Index i = 0; i < w.size(); ++i) {
      const bool pruned = mask != nullptr && (*mask).at(l).at(static_cast<std::size_t>(i));
      if (pruned) {
        if (w[i] != 0.0) throw std::invalid_argument(name + ": pruned weight is not zero");
        cl.codes.push_back(0);
        continue;
      }
      const double err = std::abs(w[i] - quantize_signed(w[i], delta, n));
      if (err > kConvertTolerance * delta) {
        std::ostringstream os;
        os << name << ": weight " << i << " is " << err / delta
           << " delta from the nearest level; continue quantization training before compressing";
        throw std::invalid_argument(os.str());
      }
      cl.codes.push_back(static_cast<std::int32_t>(signed_code(w[i], delta, n)));
    }
    out.push_back(std::move(cl));
  }
  return out;
}

std::vector<std::uint8_t> encode_codes(const std::vector<CodeLayer>& layers) {
  if (layers.size() > 0xffff) throw std::invalid_argument("too many layers");
  int max_bits = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    check_layer(layers[i], i);
    max_bits = std::max(max_bits, layers[i].bits);
  }
  std::vector<std::uint64_t> code_counts(layers.empty() ? 0 : alphabet(max_bits), 0);
  std::vector<std::uint64_t> gap_counts(kGapBuckets, 0);
  std::uint64_t nonzero_total = 0;
  for (const auto& l : layers) {
    if (l.codes.size() > 0xffffffffu) throw std::invalid_argument("layer too large");
    std::int64_t prev = -1;
    for (std::size_t i = 0; i < l.codes.size(); ++i) {
      if (l.codes[i] == 0) continue;
      ++code_counts[symbol_of(l.codes[i], max_bits)];
      ++gap_counts[static_cast<std::size_t>(bucket_of(static_cast<std::uint64_t>(static_cast<std::int64_t>(i) - prev)))];
      prev = static_cast<std::int64_t>(i);
      ++nonzero_total;
    }
  }
  HuffmanTable codes, gaps;
  if (nonzero_total > 0) {
    codes = huffman_build(code_counts);
    gaps = huffman_build(gap_counts);
  }

  BitWriter stream;
  std::vector<std::uint32_t> offsets, nonzero;
  for (const auto& l : layers) {
    if (stream.bit_count() > 0xffffffffu) throw std::overflow_error("bitstream too long");
    offsets.push_back(static_cast<std::uint32_t>(stream.bit_count()));
    std::int64_t prev = -1;
    std::uint32_t nz = 0;
    for (std::size_t i = 0; i < l.codes.size(); ++i) {
      if (l.codes[i] == 0) continue;
      const auto gap = static_cast<std::uint64_t>(static_cast<std::int64_t>(i) - prev);
      const int b = bucket_of(gap);
      stream.put(gaps, static_cast<std::size_t>(b));
      stream.put(gap - (std::uint64_t{1} << b), b);
      stream.put(codes, symbol_of(l.codes[i], max_bits));
      prev = static_cast<std::int64_t>(i);
      ++nz;
    }
    nonzero.push_back(nz);
  }

  ByteWriter w;
  w.put_magic("QZIP");
  w.put(kQzipVersion);
  w.put(static_cast<std::uint16_t>(layers.size()));
  w.put(static_cast<std::uint8_t>(max_bits));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    w.put(static_cast<std::uint8_t>(layers[i].bits));
    w.put(layers[i].delta);
    w.put(static_cast<std::uint32_t>(layers[i].codes.size()));
    w.put(nonzero[i]);
    w.put(offsets[i]);
  }
  w.put(static_cast<std::uint32_t>(codes.alphabet_size()));
  for (auto l : codes.lengths) w.put(l);
  w.put(static_cast<std::uint8_t>(gaps.alphabet_size()));
  for (auto l : gaps.lengths) w.put(l);
  w.put(static_cast<std::uint32_t>(stream.bytes().size()));
  w.put_bytes(stream.bytes());
  return std::move(w.bytes());
}

std::vector<CodeLayer> decode_codes(const std::vector<std::uint8_t>& archive) {
  const Parsed p = parse(archive);
  std::vector<CodeLayer> out;
  const bool any = std::any_of(p.layers.begin(), p.layers.end(), [](const LayerHeader& h) { return h.nonzero > 0; });
  if (any && (p.code_table.alphabet_size() == 0 || p.gap_table.alphabet_size() == 0)) {
    throw FormatError("QZIP: missing huffman tables");
  }
  std::optional<HuffmanDecoder> codes, gaps;
  if (any) {
    codes.emplace(p.code_table);
    gaps.emplace(p.gap_table);
  }
  for (const LayerHeader& h : p.layers) {
    CodeLayer cl{h.bits, h.delta, std::vector<std::int32_t>(h.count, 0)};
    BitReader in(p.stream, h.bit_offset);
    std::int64_t pos = -1;
    for (std::uint32_t k = 0; k < h.nonzero; ++k) {
      const auto b = static_cast<int>(gaps->decode(in));
      pos += static_cast<std::int64_t>((std::uint64_t{1} << b) + in.get(b));
      if (pos >= static_cast<std::int64_t>(h.count)) throw FormatError("QZIP: position beyond the layer size");
      cl.codes[static_cast<std::size_t>(pos)] = code_of(codes->decode(in), p.max_bits);
    }
    check_layer(cl, out.size());
    out.push_back(std::move(cl));
  }
  return out;
}

std::vector<std::uint8_t> encode_model(const Network& net, const ScaleState& scales, const LayerBits& bits,
                                       const PruneMask* mask) {
  return encode_codes(extract_codes(net, scales, bits, mask));
}

double compression_ratio(std::uint64_t weights, std::uint64_t compressed_bits) {
  if (compressed_bits == 0) throw std::invalid_argument("compressed size is zero");
  return static_cast<double>(weights * 32) / static_cast<double>(compressed_bits);
}

CompressionReport report(const std::vector<std::uint8_t>& archive, const Network* original) {
  const Parsed p = parse(archive);
  const std::vector<CodeLayer> layers = decode_codes(archive);
  CompressionReport r;
  std::vector<std::uint64_t> code_counts(p.code_table.alphabet_size(), 0), gap_counts(kGapBuckets, 0);
  std::uint64_t extra_bits = 0;
  for (const auto& l : layers) {
    r.weights += l.codes.size();
    std::int64_t prev = -1;
    for (std::size_t i = 0; i < l.codes.size(); ++i) {
      if (l.codes[i] == 0) continue;
      ++r.nonzero;
      ++code_counts[symbol_of(l.codes[i], p.max_bits)];
      const int b = bucket_of(static_cast<std::uint64_t>(static_cast<std::int64_t>(i) - prev));
      ++gap_counts[static_cast<std::size_t>(b)];
      extra_bits += static_cast<std::uint64_t>(b);
      prev = static_cast<std::int64_t>(i);
    }
  }
  for (std::size_t s = 0; s < code_counts.size(); ++s) r.code_bits += code_counts[s] * p.code_table.lengths[s];
  for (std::size_t s = 0; s < gap_counts.size(); ++s) {
    if (gap_counts[s] > 0) r.index_bits += gap_counts[s] * p.gap_table.lengths[s];
  }
  r.index_bits += extra_bits;
  r.original_bits = r.weights * 32;
  r.compressed_bits = archive.size() * 8;
  r.table_bits = p.table_bytes * 8;
  r.padding_bits = p.stream_bytes * 8 - r.code_bits - r.index_bits;
  r.header_bits = r.compressed_bits - r.table_bits - p.stream_bytes * 8;
  r.ratio = compression_ratio(r.weights, r.compressed_bits);
  r.zero_fraction_after = r.weights > 0 ? 1.0 - static_cast<double>(r.nonzero) / static_cast<double>(r.weights) : 0.0;
  r.zero_fraction_before = r.zero_fraction_after;
  if (original != nullptr) {
    std::uint64_t zeros = 0, total = 0;
    for (const auto& param : original->parameters()) {
      total += static_cast<std::uint64_t>(param.weight.size());
      zeros += static_cast<std::uint64_t>((param.weight.array() == 0.0).count());
    }
    if (total != r.weights) throw std::invalid_argument("archive and network weight counts differ");
    r.zero_fraction_before = total > 0 ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
  }
  if (r.nonzero > 0) {
    r.code_entropy = entropy(code_counts);
    r.code_average_length = average_length(p.code_table, code_counts);
    r.gap_entropy = entropy(gap_counts);
    r.gap_average_length = average_length(p.gap_table, gap_counts);
  }
  return r;
}

void save_archive(const std::vector<std::uint8_t>& archive, const std::filesystem::path& path) {
  write_bytes(path, archive);
}

std::vector<std::uint8_t> load_archive(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  parse(bytes);
  return bytes;
}

}  // namespace qatforge
