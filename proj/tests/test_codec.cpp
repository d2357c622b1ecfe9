#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cgs/codec.hpp"
#include "cgs/entropy_model.hpp"
#include "support.hpp"

using namespace cgs;

namespace {

CodedCDF uniform_cdf(std::size_t n) {
  std::vector<double> pmf(n, 1.0 / static_cast<double>(n));
  return make_coded_cdf(pmf);
}

double ideal_bits(const CodedCDF& cdf, std::size_t s) {
  return -std::log2(static_cast<double>(cdf.freq(s)) / kProbTotal);
}

}  // namespace

TEST(CodedCdf, StrictlyIncreasingAndComplete) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> pmf(1 + rng.index(300));
    double sum = 0.0;
    for (double& p : pmf) {
      p = std::pow(rng.uniform(), 4.0);
      sum += p;
    }
    for (double& p : pmf) p /= sum;
    const CodedCDF c = make_coded_cdf(pmf);
    ASSERT_EQ(c.cum.front(), 0u);
    ASSERT_EQ(c.cum.back(), kProbTotal);
    for (std::size_t i = 0; i + 1 < c.cum.size(); ++i) ASSERT_LT(c.cum[i], c.cum[i + 1]);
  }
}

TEST(RangeCoder, UniformByteAlphabetMeetsEntropyBound) {
  Rng rng(11);
  std::vector<std::size_t> symbols(1000);
  for (auto& s : symbols) s = rng.index(256);
  const CodedCDF cdf = uniform_cdf(256);
  const Bytes out = ac_encode(symbols, std::span(&cdf, 1));
  EXPECT_NEAR(static_cast<double>(out.size()), 1000.0, 8.0);
  EXPECT_EQ(ac_decode(out, std::span(&cdf, 1), symbols.size()), symbols);
}

TEST(RangeCoder, DegenerateAlphabetIsTiny) {
  const CodedCDF cdf = make_coded_cdf(std::vector<double>{1.0});
  std::vector<std::size_t> symbols(500, 0);
  const Bytes out = ac_encode(symbols, std::span(&cdf, 1));
  EXPECT_LE(out.size(), 8u);
  EXPECT_EQ(ac_decode(out, std::span(&cdf, 1), symbols.size()), symbols);
}

TEST(RangeCoder, RandomStreamsRoundTripWithinBound) {
  Rng rng(5);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t count = rng.index(40);
    std::vector<CodedCDF> cdfs;
    std::vector<std::size_t> symbols;
    double bits = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> pmf(1 + rng.index(20));
      double sum = 0.0;
      for (double& p : pmf) sum += (p = rng.uniform() + 1e-3);
      for (double& p : pmf) p /= sum;
      cdfs.push_back(make_coded_cdf(pmf));
      symbols.push_back(rng.index(pmf.size()));
      bits += ideal_bits(cdfs.back(), symbols.back());
    }
    if (count == 0) cdfs.push_back(uniform_cdf(2));
    const Bytes out = ac_encode(symbols, cdfs);
    ASSERT_LE(static_cast<double>(out.size()), bits / 8.0 + 32.0);
    ASSERT_EQ(ac_decode(out, cdfs, count), symbols);
  }
}

TEST(RangeCoder, TruncatedStreamThrows) {
  Rng rng(8);
  std::vector<std::size_t> symbols(300);
  for (auto& s : symbols) s = rng.index(64);
  const CodedCDF cdf = uniform_cdf(64);
  const Bytes out = ac_encode(symbols, std::span(&cdf, 1));
  for (std::size_t cut = 0; cut < out.size(); cut += 7) {
    const Bytes part(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(ac_decode(part, std::span(&cdf, 1), symbols.size()), DataError);
  }
}

TEST(RangeCoder, SymbolOutsideAlphabetThrows) {
  const CodedCDF cdf = uniform_cdf(4);
  std::vector<std::size_t> symbols{1, 4};
  EXPECT_THROW(ac_encode(symbols, std::span(&cdf, 1)), std::invalid_argument);
}

TEST(GaussianIndex, RoundTripIncludingEscapes) {
  Rng rng(21);
  RangeEncoder enc;
  struct Item {
    std::int64_t idx;
    double mean, scale, step;
  };
  std::vector<Item> items;
  for (int i = 0; i < 5000; ++i) {
    Item it{0, rng.normal(), std::exp(rng.uniform(-6.0, 1.0)), std::exp(rng.uniform(-7.0, 0.0))};
    const double v = it.mean + it.scale * rng.normal() * (i % 50 == 0 ? 40.0 : 1.0);
    it.idx = quantize(v, it.step).index;
    items.push_back(it);
    encode_gaussian_index(enc, it.idx, it.mean, it.scale, it.step);
  }
  const Bytes out = enc.finish();
  RangeDecoder dec(out);
  for (const auto& it : items) ASSERT_EQ(decode_gaussian_index(dec, it.mean, it.scale, it.step), it.idx);
}

TEST(GaussianIndex, WideWindowsRoundTrip) {
  Rng rng(22);
  RangeEncoder enc;
  std::vector<std::array<double, 4>> items;
  for (int i = 0; i < 2000; ++i) {
    const double mean = rng.normal(), scale = std::exp(rng.uniform(0.0, 3.0)), step = std::exp(rng.uniform(-9.0, -5.0));
    const double idx = static_cast<double>(quantize(mean + scale * rng.normal(), step).index);
    items.push_back({idx, mean, scale, step});
    encode_gaussian_index(enc, static_cast<std::int64_t>(idx), mean, scale, step);
  }
  const Bytes out = enc.finish();
  RangeDecoder dec(out);
  for (const auto& it : items)
    ASSERT_EQ(decode_gaussian_index(dec, it[1], it[2], it[3]), static_cast<std::int64_t>(it[0]));
}

TEST(GaussianIndex, CostTracksGaussianAndStream) {
  Rng rng(23);
  RangeEncoder enc;
  double total = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double mean = rng.normal(), scale = std::exp(rng.uniform(-4.0, 2.0)), step = std::exp(rng.uniform(-8.0, 0.0));
    const double v = i % 100 == 0 ? mean + 30.0 * scale + 5.0 * step : mean + scale * rng.normal();
    const std::int64_t idx = quantize(v, step).index;
    const double bits = gaussian_index_bits(idx, mean, scale, step);
    const double p = discrete_gaussian_mass(static_cast<double>(idx) * step, mean, scale, step);
    if (p >= 1e-3) ASSERT_NEAR(bits, -std::log2(p), 0.05) << "scale " << scale << " step " << step;
    if (i % 100 == 0) ASSERT_GE(bits, 23.0);  // escape
    total += bits;
    encode_gaussian_index(enc, idx, mean, scale, step);
  }
  const double actual = 8.0 * static_cast<double>(enc.finish().size());
  EXPECT_NEAR(actual, total, 0.001 * total + 64.0);
}

TEST(Locations, OriginRoundTrips) {
  const std::vector<Vec3> p{{0.0, 0.0, 0.0}};
  const auto out = decode_anchor_locations(encode_anchor_locations(p, 1e-3), 1e-3);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], (Vec3{0.0, 0.0, 0.0}));
}

TEST(Locations, DuplicatesGrowSublinearly) {
  std::vector<std::size_t> sizes;
  for (std::size_t n : {10u, 100u, 1000u}) {
    std::vector<Vec3> p(n, Vec3{0.25, -0.5, 0.75});
    const Bytes b = encode_anchor_locations(p, 1e-3);
    EXPECT_EQ(decode_anchor_locations(b, 1e-3).size(), n);
    sizes.push_back(b.size());
  }
  EXPECT_LT(static_cast<double>(sizes[1]) / sizes[0], 10.0);
  EXPECT_LT(static_cast<double>(sizes[2]) / sizes[1], 10.0);
}

TEST(Locations, RandomCloudWithinHalfStepInMortonOrder) {
  Rng rng(9);
  const double step = 1e-3;
  std::vector<Vec3> p(2000);
  for (auto& v : p)
    for (double& x : v) x = rng.uniform(-3.0, 3.0);
  const auto dec = decode_anchor_locations(encode_anchor_locations(p, step), step);
  const auto order = morton_order(p, step);
  ASSERT_EQ(dec.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int a = 0; a < 3; ++a) EXPECT_LE(std::abs(dec[i][a] - p[order[i]][a]), step / 2 + 1e-12);
}

TEST(Locations, ExcessiveExtentThrows) {
  const std::vector<Vec3> p{{0.0, 0.0, 0.0}, {2e6, 0.0, 0.0}};
  EXPECT_THROW(encode_anchor_locations(p, 1e-3), std::invalid_argument);
}

TEST(ModelCodec, DecodeReproducesQuantizedModelBitExactly) {
  Rng rng(1);
  for (int t = 0; t < 5; ++t) {
    const SceneModel m = test::random_model(rng, 1 + rng.index(30));
    const Bytes b = encode_model(m);
    const SceneModel d = decode_model(b);
    EXPECT_TRUE(test::bitwise_equal(d, quantize_model(m)));
    EXPECT_EQ(encode_model(d), b);
    EXPECT_EQ(encode_model(m), b);
  }
}

TEST(ModelCodec, QuantizationIsIdempotent) {
  Rng rng(2);
  const SceneModel q = quantize_model(test::random_model(rng, 20));
  EXPECT_TRUE(test::bitwise_equal(quantize_model(q), q));
}

TEST(ModelCodec, EmptyModelRoundTrips) {
  Rng rng(4);
  const SceneModel m = test::random_model(rng, 0);
  EXPECT_TRUE(test::bitwise_equal(decode_model(encode_model(m)), quantize_model(m)));
}

TEST(ModelCodec, TruncationsAndCorruptionFailCleanly) {
  Rng rng(6);
  const Bytes b = encode_model(test::random_model(rng, 8));
  for (std::size_t cut = 0; cut < b.size(); cut += 13) {
    const Bytes part(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_model(part), DataError) << "cut " << cut;
  }
  Bytes bad = b;
  bad[4] = 9;  // version
  EXPECT_THROW(decode_model(bad), DataError);
  bad = b;
  bad[0] = 'X';
  EXPECT_THROW(decode_model(bad), DataError);
  for (int t = 0; t < 200; ++t) {
    Bytes flip = b;
    flip[rng.index(flip.size())] ^= static_cast<std::uint8_t>(1 + rng.index(255));
    try {
      (void)decode_model(flip);
    } catch (const DataError&) {
    } catch (const std::invalid_argument&) {
    } catch (const NumericError&) {
    }
  }
}

TEST(ModelCodec, HeaderDescribesSections) {
  Rng rng(7);
  const Bytes b = encode_model(test::random_model(rng, 3));
  const Bitstream bs = Bitstream::parse(b);
  EXPECT_EQ(bs.header.anchor_count, 3u);
  std::size_t total = bs.header_bytes();
  for (const auto& s : bs.sections) total += s.payload.size();
  EXPECT_EQ(total, b.size());
  const std::string text = describe_bitstream(bs, b.size());
  EXPECT_NE(text.find("anchor_embeddings"), std::string::npos);
}

TEST(ModelCodec, PayloadTracksRateEstimate) {
  Rng rng(12);
  SceneModel m = test::random_model(rng, 100);
  // spread of the entropy model matched to the data
  for (std::size_t i = kRefDim; i < 2 * kRefDim; ++i) m.entropy.embedding_head.bias[i] = std::log(std::expm1(0.5));
  for (std::size_t i = kResDim; i < 2 * kResDim; ++i) m.entropy.coupled_head.bias[i] = std::log(std::expm1(0.5));
  for (std::size_t i = kCovParams; i < 2 * kCovParams; ++i)
    m.entropy.covariance_head.bias[i] = std::log(std::expm1(1.0));
  for (std::size_t i = 0; i < kCovParams; ++i) m.entropy.covariance_head.bias[i] = i < 3 ? -3.0 : 0.0;
  const SceneModel q = quantize_model(m);
  const double est = model_rate(q).total();
  const Bitstream bs = Bitstream::parse(encode_model(q));
  const double actual = 8.0 * static_cast<double>(primitive_payload_bytes(bs));
  EXPECT_LE(std::abs(actual - est), 0.005 * est + 128.0 * 8.0) << "est " << est << " actual " << actual;
}
