#include "oracle_cases.hpp"
#include "synthetic.hpp"
#include "qatforge/bytes.hpp"
#include "qatforge/compression.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

using namespace qatforge;

namespace {

std::vector<CodeLayer> random_layers(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nl(1, 4), nb(1, 8), size(1, 3000);
  std::uniform_real_distribution<double> density(0.0, 1.0), scale(1e-4, 2.0);
  std::vector<CodeLayer> layers(static_cast<std::size_t>(nl(rng)));
  for (auto& l : layers) {
    l.bits = nb(rng);
    l.delta = scale(rng);
    const double p = std::pow(density(rng), 3.0);
    const int lo = static_cast<int>(signed_code_min(l.bits)), hi = static_cast<int>(signed_code_max(l.bits));
    std::uniform_int_distribution<int> code(lo, hi);
    std::bernoulli_distribution keep(p);
    l.codes.resize(static_cast<std::size_t>(size(rng)));
    for (auto& c : l.codes) {
      c = 0;
      if (keep(rng)) {
        do c = code(rng); while (c == 0);
      }
    }
  }
  return layers;
}

bool is_prefix(const std::string& a, const std::string& b) {
  return a.size() <= b.size() && b.compare(0, a.size(), a) == 0;
}

}  // namespace

TEST(HuffmanOracle, Lengths) {
  for (const auto& c : cases_for("huffman_lengths")) {
    const auto counts = c["args"][0].get<std::vector<std::uint64_t>>();
    const HuffmanTable t = huffman_build(counts);
    const auto expected = c["expected"]["lengths"].get<std::vector<int>>();
    ASSERT_EQ(t.lengths.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(t.lengths[i], expected[i]) << c.dump();
    EXPECT_NEAR(average_length(t, counts), c["expected"]["average"].get<double>(), 1e-15);
    EXPECT_NEAR(entropy(counts), c["expected"]["entropy"].get<double>(), 1e-12);
  }
}

TEST(CompressionOracle, Ratio) {
  for (const auto& c : cases_for("compression_ratio")) {
    const auto& a = c["args"];
    EXPECT_EQ(compression_ratio(a[0].get<std::uint64_t>(), a[1].get<std::uint64_t>() + a[2].get<std::uint64_t>()),
              c["expected"].get<double>());
  }
  EXPECT_THROW(compression_ratio(10, 0), std::invalid_argument);
}

TEST(Huffman, CodesArePrefixFreeAndOptimalWithinOneBit) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::uniform_int_distribution<int> size(1, 40);
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(size(rng)));
    std::geometric_distribution<int> g(0.05);
    std::bernoulli_distribution absent(0.3);
    for (auto& c : counts) c = absent(rng) ? 0 : static_cast<std::uint64_t>(g(rng)) + 1;
    if (std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}) == 0) counts[0] = 1;
    const HuffmanTable t = huffman_build(counts);
    std::vector<std::string> words;
    double kraft = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
      EXPECT_EQ(t.contains(s), counts[s] > 0);
      if (!t.contains(s)) continue;
      words.push_back(t.codeword(s));
      kraft += std::ldexp(1.0, -t.lengths[s]);
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
      for (std::size_t j = 0; j < words.size(); ++j) {
        if (i != j) {
          EXPECT_FALSE(is_prefix(words[i], words[j])) << words[i] << " " << words[j];
        }
      }
    }
    EXPECT_LE(kraft, 1.0);
    if (words.size() > 1) {
      EXPECT_EQ(kraft, 1.0);
    }
    const double h = entropy(counts), avg = average_length(t, counts);
    EXPECT_GE(avg + 1e-12, h);
    if (words.size() > 1) {
      EXPECT_LT(avg, h + 1.0);
    } else {
      EXPECT_EQ(avg, 1.0);
    }
    EXPECT_EQ(HuffmanTable::from_lengths(t.lengths).codes, t.codes);
  }
}

TEST(Huffman, TiesAreDeterministic) {
  const std::vector<std::uint64_t> counts = {3, 3, 3, 3, 1, 1};
  const HuffmanTable a = huffman_build(counts), b = huffman_build(counts);
  EXPECT_EQ(a.lengths, b.lengths);
  EXPECT_EQ(a.codes, b.codes);
}

TEST(Huffman, BitStreamRoundTrip) {
  std::mt19937_64 rng(2);
  std::vector<std::uint64_t> counts = {50, 20, 10, 5, 5, 1, 0, 9};
  const HuffmanTable t = huffman_build(counts);
  std::discrete_distribution<std::size_t> pick(counts.begin(), counts.end());
  std::vector<std::size_t> symbols(5000);
  for (auto& s : symbols) s = pick(rng);
  BitWriter w;
  for (std::size_t s : symbols) {
    w.put(t, s);
    w.put(s, 3);
  }
  BitReader r(w.bytes());
  const HuffmanDecoder dec(t);
  for (std::size_t s : symbols) {
    EXPECT_EQ(dec.decode(r), s);
    EXPECT_EQ(r.get(3), s);
  }
  EXPECT_EQ(r.position(), w.bit_count());
}

TEST(Qzip, RandomSparseRoundTrips) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto layers = random_layers(rng);
    const auto archive = encode_codes(layers);
    ASSERT_EQ(decode_codes(archive), layers) << "trial " << trial;
    const CompressionReport r = report(archive);
    EXPECT_EQ(r.compressed_bits, archive.size() * 8);
    EXPECT_EQ(r.header_bits + r.table_bits + r.code_bits + r.index_bits + r.padding_bits, r.compressed_bits);
    EXPECT_LT(r.padding_bits, 8u);
    std::uint64_t weights = 0, nonzero = 0;
    for (const auto& l : layers) {
      weights += l.codes.size();
      nonzero += static_cast<std::uint64_t>(std::count_if(l.codes.begin(), l.codes.end(), [](int c) { return c; }));
    }
    EXPECT_EQ(r.weights, weights);
    EXPECT_EQ(r.nonzero, nonzero);
    EXPECT_EQ(r.ratio, compression_ratio(weights, r.compressed_bits));
  }
}

TEST(Qzip, AllZeroLayers) {
  std::vector<CodeLayer> layers = {{3, 0.25, std::vector<std::int32_t>(1000, 0)}, {3, 0.5, {0, 0, 0}}};
  const auto archive = encode_codes(layers);
  EXPECT_EQ(decode_codes(archive), layers);
  const CompressionReport r = report(archive);
  EXPECT_EQ(r.nonzero, 0u);
  EXPECT_EQ(r.zero_fraction_after, 1.0);
  EXPECT_EQ(r.code_bits, 0u);
}

TEST(Qzip, SparserArchivesAreSmaller) {
  std::mt19937_64 rng(4);
  std::size_t prev = 0;
  for (double p : {0.001, 0.01, 0.1, 0.5}) {
    CodeLayer l{4, 0.1, std::vector<std::int32_t>(20000, 0)};
    std::bernoulli_distribution keep(p);
    for (auto& c : l.codes) c = keep(rng) ? 3 : 0;
    const auto size = encode_codes({l}).size();
    EXPECT_GT(size, prev);
    prev = size;
  }
}

TEST(Qzip, RejectsCorruptArchives) {
  std::mt19937_64 rng(5);
  const auto archive = encode_codes(random_layers(rng));
  auto bad = archive;
  bad[1] = 'X';
  EXPECT_THROW(decode_codes(bad), FormatError);
  bad = archive;
  bad.resize(archive.size() / 2);
  EXPECT_THROW(decode_codes(bad), FormatError);
  EXPECT_THROW(encode_codes({{3, 0.1, {5}}}), std::invalid_argument);
}

TEST(Qzip, ModelArchiveMatchesWeights) {
  Network net = small_network(3);
  LayerBits bits{{3, 3, 3}, {4, 4}};
  ScaleState scales{{0.05, 0.04, 0.1}, {0.1, 0.1}};
  PruneMask mask(3);
  std::mt19937_64 rng(6);
  std::bernoulli_distribution prune(0.8);
  for (std::size_t l = 0; l < 3; ++l) {
    auto& w = net.parameter(l).weight;
    mask[l].resize(static_cast<std::size_t>(w.size()));
    for (Index i = 0; i < w.size(); ++i) {
      mask[l][static_cast<std::size_t>(i)] = prune(rng);
      w[i] = mask[l][static_cast<std::size_t>(i)] ? 0.0 : quantize_signed(w[i], scales.weight[l], 3);
    }
  }
  const auto archive = encode_model(net, scales, bits, &mask);
  const auto layers = decode_codes(archive);
  ASSERT_EQ(layers.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(layers[l].delta, scales.weight[l]);
    const auto& w = net.parameter(l).weight;
    for (Index i = 0; i < w.size(); ++i) {
      EXPECT_EQ(layers[l].codes[static_cast<std::size_t>(i)] * scales.weight[l], w[i]);
    }
  }
  const CompressionReport r = report(archive, &net);
  EXPECT_EQ(r.weights, static_cast<std::uint64_t>(net.weight_count()));
  EXPECT_GE(r.zero_fraction_after, r.zero_fraction_before);

  const auto path = std::filesystem::temp_directory_path() / "qatforge_test.qzip";
  save_archive(archive, path);
  EXPECT_EQ(load_archive(path), archive);
  std::filesystem::remove(path);

  net.parameter(0).weight[0] = 0.3 * scales.weight[0] + net.parameter(0).weight[0];
  EXPECT_THROW(encode_model(net, scales, bits, &mask), std::invalid_argument);
}
