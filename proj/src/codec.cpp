#include "cgs/codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cgs/entropy_model.hpp"

namespace cgs {

// ---------------------------------------------------------------- range coder

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      out_.push_back(static_cast<std::uint8_t>(temp + carry));
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(std::uint32_t cum, std::uint32_t freq, std::uint32_t total) {
  if (freq == 0 || total == 0 || total > kProbTotal || cum + freq > total)
    throw std::invalid_argument("RangeEncoder: invalid interval");
  const std::uint32_t r = range_ / total;
  low_ += static_cast<std::uint64_t>(r) * cum;
  range_ = r * freq;
  while (range_ < (1u << 24)) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::encode_bits(std::uint32_t value, int nbits) {
  for (int i = nbits - 1; i >= 0; --i) encode((value >> i) & 1u, 1, 2);
}

Bytes RangeEncoder::finish() {
  for (int i = 0; i < 5; ++i) shift_low();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> data) : data_(data) {
  for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ >= data_.size()) throw DataError("range decoder: truncated stream");
  return data_[pos_++];
}

std::uint32_t RangeDecoder::peek(std::uint32_t total) {
  scale_ = range_ / total;
  const std::uint32_t v = code_ / scale_;
  if (v >= total) throw DataError("range decoder: corrupt stream");
  return v;
}

void RangeDecoder::consume(std::uint32_t cum, std::uint32_t freq) {
  code_ -= scale_ * cum;
  range_ = scale_ * freq;
  normalize();
}

void RangeDecoder::normalize() {
  while (range_ < (1u << 24)) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

std::uint32_t RangeDecoder::decode_bits(int nbits) {
  std::uint32_t v = 0;
  for (int i = 0; i < nbits; ++i) {
    const std::uint32_t b = peek(2);
    consume(b, 1);
    v = (v << 1) | b;
  }
  return v;
}

// ---------------------------------------------------------------- CDF tables

CodedCDF make_coded_cdf(std::span<const double> pmf) {
  const std::size_t n = pmf.size();
  if (n == 0 || n > kProbTotal / 2) throw std::invalid_argument("make_coded_cdf: bad alphabet size");
  const auto spare = static_cast<double>(kProbTotal - n);
  std::vector<std::uint32_t> freq(n);
  std::vector<double> remainder(n);
  std::uint64_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = static_cast<double>(static_cast<float>(std::clamp(pmf[i], 0.0, 1.0))) * spare;
    const double whole = std::floor(share);
    freq[i] = 1 + static_cast<std::uint32_t>(whole);
    remainder[i] = share - whole;
    used += freq[i];
  }
  if (used > kProbTotal) throw std::invalid_argument("make_coded_cdf: probabilities exceed one");
  // largest remainders first, ties by index
  const std::uint64_t left = kProbTotal - used;
  for (auto& f : freq) f += static_cast<std::uint32_t>(left / n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto extra = static_cast<std::ptrdiff_t>(left % n);
  std::nth_element(order.begin(), order.begin() + extra, order.end(), [&](std::size_t a, std::size_t b) {
    return remainder[a] != remainder[b] ? remainder[a] > remainder[b] : a < b;
  });
  for (std::ptrdiff_t i = 0; i < extra; ++i) ++freq[order[static_cast<std::size_t>(i)]];
  CodedCDF c;
  c.cum.resize(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) c.cum[i + 1] = c.cum[i] + freq[i];
  return c;
}

void encode_symbol(RangeEncoder& enc, const CodedCDF& cdf, std::size_t symbol) {
  if (symbol >= cdf.size()) throw std::invalid_argument("encode_symbol: symbol outside alphabet");
  enc.encode(cdf.cum[symbol], cdf.freq(symbol), kProbTotal);
}

std::size_t decode_symbol(RangeDecoder& dec, const CodedCDF& cdf) {
  const std::uint32_t v = dec.peek(kProbTotal);
  const auto it = std::upper_bound(cdf.cum.begin(), cdf.cum.end(), v);
  const auto s = static_cast<std::size_t>(it - cdf.cum.begin()) - 1;
  dec.consume(cdf.cum[s], cdf.freq(s));
  return s;
}

namespace {

const CodedCDF& pick(std::span<const CodedCDF> cdfs, std::size_t i) {
  return cdfs.size() == 1 ? cdfs[0] : cdfs[i];
}

}  // namespace

Bytes ac_encode(std::span<const std::size_t> symbols, std::span<const CodedCDF> cdfs) {
  if (cdfs.empty() || (cdfs.size() != 1 && cdfs.size() != symbols.size()))
    throw std::invalid_argument("ac_encode: need one CDF or one per symbol");
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) encode_symbol(enc, pick(cdfs, i), symbols[i]);
  return enc.finish();
}

std::vector<std::size_t> ac_decode(std::span<const std::uint8_t> bytes, std::span<const CodedCDF> cdfs,
                                   std::size_t count) {
  if (cdfs.empty() || (cdfs.size() != 1 && cdfs.size() != count))
    throw std::invalid_argument("ac_decode: need one CDF or one per symbol");
  RangeDecoder dec(bytes);
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = decode_symbol(dec, pick(cdfs, i));
  return out;
}

// ---------------------------------------------------------------- adaptive model

namespace {
constexpr std::uint32_t kAdaptInc = 32;
}

AdaptiveModel::AdaptiveModel(std::size_t symbols) : freq_(symbols, 1) {
  if (symbols == 0 || symbols > 4096) throw std::invalid_argument("AdaptiveModel: bad alphabet size");
  total_ = static_cast<std::uint32_t>(symbols);
}

void AdaptiveModel::update(std::size_t symbol) {
  freq_[symbol] += kAdaptInc;
  total_ += kAdaptInc;
  if (total_ > kProbTotal) {
    total_ = 0;
    for (auto& f : freq_) {
      f = (f + 1) / 2;
      total_ += f;
    }
  }
}

void AdaptiveModel::encode(RangeEncoder& enc, std::size_t symbol) {
  if (symbol >= freq_.size()) throw std::invalid_argument("AdaptiveModel: symbol outside alphabet");
  std::uint32_t cum = 0;
  for (std::size_t i = 0; i < symbol; ++i) cum += freq_[i];
  enc.encode(cum, freq_[symbol], total_);
  update(symbol);
}

std::size_t AdaptiveModel::decode(RangeDecoder& dec) {
  const std::uint32_t v = dec.peek(total_);
  std::uint32_t cum = 0;
  std::size_t s = 0;
  while (cum + freq_[s] <= v) cum += freq_[s++];
  dec.consume(cum, freq_[s]);
  update(s);
  return s;
}

void encode_uint(RangeEncoder& enc, AdaptiveModel& lengths, std::uint64_t v) {
  const int len = static_cast<int>(std::bit_width(v));
  lengths.encode(enc, static_cast<std::size_t>(len));
  int rest = len - 1;
  while (rest > 0) {
    const int chunk = std::min(rest, 16);
    rest -= chunk;
    enc.encode_bits(static_cast<std::uint32_t>((v >> rest) & ((1u << chunk) - 1)), chunk);
  }
}

std::uint64_t decode_uint(RangeDecoder& dec, AdaptiveModel& lengths) {
  const auto len = static_cast<int>(lengths.decode(dec));
  if (len == 0) return 0;
  if (len > 64) throw DataError("decode_uint: length out of range");
  std::uint64_t v = 1;
  int rest = len - 1;
  while (rest > 0) {
    const int chunk = std::min(rest, 16);
    rest -= chunk;
    v = (v << chunk) | dec.decode_bits(chunk);
  }
  return v;
}

namespace {

// Raw escape value: 7-bit length then mantissa.
void encode_raw_uint(RangeEncoder& enc, std::uint64_t v) {
  const int len = static_cast<int>(std::bit_width(v));
  enc.encode_bits(static_cast<std::uint32_t>(len), 7);
  int rest = len - 1;
  while (rest > 0) {
    const int chunk = std::min(rest, 16);
    rest -= chunk;
    enc.encode_bits(static_cast<std::uint32_t>((v >> rest) & ((1u << chunk) - 1)), chunk);
  }
}

std::uint64_t decode_raw_uint(RangeDecoder& dec) {
  const int len = static_cast<int>(dec.decode_bits(7));
  if (len == 0) return 0;
  if (len > 64) throw DataError("escape length out of range");
  std::uint64_t v = 1;
  int rest = len - 1;
  while (rest > 0) {
    const int chunk = std::min(rest, 16);
    rest -= chunk;
    v = (v << chunk) | dec.decode_bits(chunk);
  }
  return v;
}

constexpr std::int64_t kMaxDirect = 1024;  // half width coded with a single table
constexpr std::int64_t kMaxHalfWidth = (std::int64_t{1} << 21) - 1;
constexpr std::int64_t kBlocks = 2048;
constexpr double kMaxCenter = 1099511627776.0;  // 2^40

// Mass of N(0, 1) between standardized edges lo < hi, evaluated on the near
// tail to avoid cancellation.
double interval_mass(double lo, double hi) {
  if (lo > 0.0) return normal_cdf(-lo) - normal_cdf(-hi);
  return normal_cdf(hi) - normal_cdf(lo);
}

// Window bins plus an escape symbol. Wide windows are coded as a block index
// followed by the bin inside the block.
struct GaussianWindow {
  double mean = 0.0, scale = 0.0, step = 0.0;
  std::int64_t center = 0;
  std::int64_t half_width = 0;
  std::int64_t block = 1;  // bins per block
  CodedCDF cdf;            // bins (or blocks) then escape

  std::int64_t bins() const { return 2 * half_width + 1; }
  std::int64_t blocks() const { return (bins() + block - 1) / block; }
  // standardized edges of window bins [first, last]
  double lower_edge(std::int64_t first) const {
    return (static_cast<double>(center + first - half_width) * step - 0.5 * step - mean) / scale;
  }
  double upper_edge(std::int64_t last) const {
    return (static_cast<double>(center + last - half_width) * step + 0.5 * step - mean) / scale;
  }
  double mass(std::int64_t first, std::int64_t last) const { return interval_mass(lower_edge(first), upper_edge(last)); }

  CodedCDF inner_cdf(std::int64_t b) const {
    const std::int64_t first = b * block, last = std::min(bins(), first + block) - 1;
    std::vector<double> pmf(static_cast<std::size_t>(last - first + 1));
    double total = 0.0;
    for (std::int64_t i = first; i <= last; ++i) total += pmf[static_cast<std::size_t>(i - first)] = mass(i, i);
    for (double& p : pmf) p = total > 0.0 ? p / total : 1.0 / static_cast<double>(pmf.size());
    return make_coded_cdf(pmf);
  }
};

GaussianWindow gaussian_window(double mean, double scale, double step) {
  // parameters are rounded to float so encoder and decoder agree across platforms
  GaussianWindow w;
  w.mean = static_cast<float>(mean);
  w.scale = std::max(static_cast<double>(static_cast<float>(scale)), kMinScale);
  w.step = static_cast<float>(step);
  if (!(w.step > 0.0) || !std::isfinite(w.mean) || !std::isfinite(w.scale))
    throw NumericError("invalid coding distribution");
  w.center = static_cast<std::int64_t>(std::clamp(round_even(w.mean / w.step), -kMaxCenter, kMaxCenter));
  const double hw = std::ceil(6.0 * w.scale / w.step) + 1.0;
  w.half_width = hw > static_cast<double>(kMaxHalfWidth) ? kMaxHalfWidth : static_cast<std::int64_t>(hw);
  w.block = w.half_width <= kMaxDirect ? 1 : (w.bins() + kBlocks - 1) / kBlocks;
  const std::int64_t n = w.blocks();
  std::vector<double> pmf(static_cast<std::size_t>(n) + 1);
  double total = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    const double p = w.mass(j * w.block, std::min(w.bins(), (j + 1) * w.block) - 1);
    pmf[static_cast<std::size_t>(j)] = p;
    total += p;
  }
  pmf[static_cast<std::size_t>(n)] = std::max(1.0 - total, 0.0);
  w.cdf = make_coded_cdf(pmf);
  return w;
}

}  // namespace

void encode_gaussian_index(RangeEncoder& enc, std::int64_t index, double mean, double scale, double step) {
  const GaussianWindow w = gaussian_window(mean, scale, step);
  const std::int64_t off = index - w.center;
  if (off >= -w.half_width && off <= w.half_width) {
    const std::int64_t i = off + w.half_width;
    encode_symbol(enc, w.cdf, static_cast<std::size_t>(i / w.block));
    if (w.block > 1) encode_symbol(enc, w.inner_cdf(i / w.block), static_cast<std::size_t>(i % w.block));
  } else {
    encode_symbol(enc, w.cdf, static_cast<std::size_t>(w.blocks()));
    encode_raw_uint(enc, zigzag(off));
  }
}

double gaussian_index_bits(std::int64_t index, double mean, double scale, double step) {
  const GaussianWindow w = gaussian_window(mean, scale, step);
  const auto bits = [](const CodedCDF& cdf, std::int64_t s) {
    return -std::log2(static_cast<double>(cdf.freq(static_cast<std::size_t>(s))) / kProbTotal);
  };
  const std::int64_t off = index - w.center;
  if (off < -w.half_width || off > w.half_width) {
    const int len = static_cast<int>(std::bit_width(zigzag(off)));
    return bits(w.cdf, w.blocks()) + 7.0 + std::max(len - 1, 0);
  }
  const std::int64_t i = off + w.half_width;
  return bits(w.cdf, i / w.block) + (w.block > 1 ? bits(w.inner_cdf(i / w.block), i % w.block) : 0.0);
}

std::int64_t decode_gaussian_index(RangeDecoder& dec, double mean, double scale, double step) {
  const GaussianWindow w = gaussian_window(mean, scale, step);
  const auto s = static_cast<std::int64_t>(decode_symbol(dec, w.cdf));
  if (s < w.blocks()) {
    const std::int64_t inner = w.block > 1 ? static_cast<std::int64_t>(decode_symbol(dec, w.inner_cdf(s))) : 0;
    return w.center + s * w.block + inner - w.half_width;
  }
  return w.center + unzigzag(decode_raw_uint(dec));
}

// ---------------------------------------------------------------- locations

namespace {

using u128 = unsigned __int128;
constexpr std::int64_t kMaxExtent = std::int64_t{1} << 30;

std::array<std::int64_t, 3> lattice(const Vec3& p, double step) {
  std::array<std::int64_t, 3> q;
  for (int a = 0; a < 3; ++a) {
    const double v = round_even(p[a] / step);
    if (!std::isfinite(v) || std::abs(v) > 4.0e18) throw std::invalid_argument("anchor location out of range");
    q[a] = static_cast<std::int64_t>(v);
  }
  return q;
}

u128 morton(const std::array<std::uint32_t, 3>& c) {
  u128 m = 0;
  for (int b = 0; b < 30; ++b)
    for (int a = 0; a < 3; ++a) m |= static_cast<u128>((c[a] >> b) & 1u) << (3 * b + a);
  return m;
}

std::array<std::uint32_t, 3> unmorton(u128 m) {
  std::array<std::uint32_t, 3> c{0, 0, 0};
  for (int b = 0; b < 30; ++b)
    for (int a = 0; a < 3; ++a) c[a] |= static_cast<std::uint32_t>((m >> (3 * b + a)) & 1u) << b;
  return c;
}

struct LatticeCloud {
  std::array<std::int64_t, 3> min{0, 0, 0};
  std::vector<u128> codes;
};

LatticeCloud to_lattice(std::span<const Vec3> positions, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("location step must be positive");
  LatticeCloud c;
  std::vector<std::array<std::int64_t, 3>> q;
  q.reserve(positions.size());
  for (const auto& p : positions) q.push_back(lattice(p, step));
  if (q.empty()) return c;
  std::array<std::int64_t, 3> mx = q[0];
  c.min = q[0];
  for (const auto& v : q)
    for (int a = 0; a < 3; ++a) {
      c.min[a] = std::min(c.min[a], v[a]);
      mx[a] = std::max(mx[a], v[a]);
    }
  for (int a = 0; a < 3; ++a)
    if (mx[a] - c.min[a] >= kMaxExtent) throw std::invalid_argument("anchor lattice extent exceeds 2^30");
  for (const auto& v : q)
    c.codes.push_back(morton({static_cast<std::uint32_t>(v[0] - c.min[0]), static_cast<std::uint32_t>(v[1] - c.min[1]),
                              static_cast<std::uint32_t>(v[2] - c.min[2])}));
  return c;
}

void encode_u128(RangeEncoder& enc, AdaptiveModel& lengths, u128 v) {
  int len = 0;
  for (u128 t = v; t != 0; t >>= 1) ++len;
  lengths.encode(enc, static_cast<std::size_t>(len));
  int rest = len - 1;
  while (rest > 0) {
    const int chunk = std::min(rest, 16);
    rest -= chunk;
    enc.encode_bits(static_cast<std::uint32_t>((v >> rest) & ((1u << chunk) - 1)), chunk);
  }
}

u128 decode_u128(RangeDecoder& dec, AdaptiveModel& lengths) {
  const auto len = static_cast<int>(lengths.decode(dec));
  if (len == 0) return 0;
  u128 v = 1;
  int rest = len - 1;
  while (rest > 0) {
    const int chunk = std::min(rest, 16);
    rest -= chunk;
    v = (v << chunk) | dec.decode_bits(chunk);
  }
  return v;
}

}  // namespace

std::vector<std::size_t> morton_order(std::span<const Vec3> positions, double step) {
  const LatticeCloud c = to_lattice(positions, step);
  std::vector<std::size_t> order(positions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return c.codes[a] < c.codes[b]; });
  return order;
}

Bytes encode_anchor_locations(std::span<const Vec3> positions, double step) {
  const LatticeCloud c = to_lattice(positions, step);
  std::vector<u128> codes = c.codes;
  std::sort(codes.begin(), codes.end());
  RangeEncoder enc;
  AdaptiveModel header_len(65);
  encode_uint(enc, header_len, positions.size());
  for (int a = 0; a < 3; ++a) encode_uint(enc, header_len, zigzag(c.min[a]));
  AdaptiveModel delta_len(91);
  u128 prev = 0;
  for (const u128 code : codes) {
    encode_u128(enc, delta_len, code - prev);
    prev = code;
  }
  return enc.finish();
}

std::vector<Vec3> decode_anchor_locations(std::span<const std::uint8_t> bytes, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("location step must be positive");
  RangeDecoder dec(bytes);
  AdaptiveModel header_len(65);
  const std::uint64_t n = decode_uint(dec, header_len);
  if (n > (std::uint64_t{1} << 26)) throw DataError("anchor count out of range");
  std::array<std::int64_t, 3> mn;
  for (int a = 0; a < 3; ++a) mn[a] = unzigzag(decode_uint(dec, header_len));
  AdaptiveModel delta_len(91);
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(n));
  u128 code = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    code += decode_u128(dec, delta_len);
    if ((code >> 90) != 0) throw DataError("Morton code out of range");
    const auto c = unmorton(code);
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = static_cast<double>(mn[a] + static_cast<std::int64_t>(c[a])) * step;
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------- bytes

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}
void ByteWriter::u32(std::uint32_t v) {
  u16(static_cast<std::uint16_t>(v));
  u16(static_cast<std::uint16_t>(v >> 16));
}
void ByteWriter::u64(std::uint64_t v) {
  u32(static_cast<std::uint32_t>(v));
  u32(static_cast<std::uint32_t>(v >> 32));
}
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::varint(std::uint64_t v) {
  while (v >= 0x80) {
    u8(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  u8(static_cast<std::uint8_t>(v));
}

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) throw DataError("unexpected end of data");
}
std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}
std::uint16_t ByteReader::u16() {
  const std::uint16_t lo = u8();
  return static_cast<std::uint16_t>(lo | (u8() << 8));
}
std::uint32_t ByteReader::u32() {
  const std::uint32_t lo = u16();
  return lo | (static_cast<std::uint32_t>(u16()) << 16);
}
std::uint64_t ByteReader::u64() {
  const std::uint64_t lo = u32();
  return lo | (static_cast<std::uint64_t>(u32()) << 32);
}
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::uint64_t ByteReader::varint() {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    const std::uint8_t b = u8();
    v |= static_cast<std::uint64_t>(b & 0x7F) << shift;
    if (!(b & 0x80)) return v;
  }
  throw DataError("varint too long");
}
std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
  need(n);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

// ---------------------------------------------------------------- container

const char* section_name(SectionId id) {
  switch (id) {
    case SectionId::kNetworkWeights: return "network_weights";
    case SectionId::kGridTables: return "grid_tables";
    case SectionId::kAnchorLocations: return "anchor_locations";
    case SectionId::kAnchorCovariances: return "anchor_covariances";
    case SectionId::kHyperpriors: return "hyperpriors";
    case SectionId::kAnchorEmbeddings: return "anchor_embeddings";
    case SectionId::kCoupledEmbeddings: return "coupled_embeddings";
    case SectionId::kTemporalResidues: return "temporal_residues";
  }
  return "unknown";
}

namespace {

constexpr std::uint8_t kMagic[4] = {'C', 'G', 'S', '2'};

void write_grid_config(ByteWriter& w, const GridConfig& g) {
  w.u32(g.levels);
  w.u32(g.base_resolution);
  w.u32(g.growth);
  w.u32(g.log2_table_size);
  w.u32(g.feature_dim);
}

GridConfig read_grid_config(ByteReader& r) {
  GridConfig g;
  g.levels = r.u32();
  g.base_resolution = r.u32();
  g.growth = r.u32();
  g.log2_table_size = r.u32();
  g.feature_dim = r.u32();
  if (g.levels == 0 || g.levels > 16 || g.base_resolution < 2 || g.growth < 2 || g.log2_table_size > 24 ||
      g.feature_dim == 0 || g.feature_dim > 64)
    throw DataError("grid configuration out of range");
  std::uint64_t res = g.base_resolution;
  for (std::uint32_t l = 1; l < g.levels; ++l) {
    res *= g.growth;
    if (res > (1u << 30)) throw DataError("grid resolution out of range");
  }
  return g;
}

}  // namespace

std::size_t Bitstream::header_bytes() const { return 4 + 2 + 2 + 4 + 4 + 4 + 4 + 4 + 2 * 20 + 12 + 48 + 24 + 2 + 10 * sections.size(); }

Bytes Bitstream::serialize() const {
  ByteWriter w;
  w.bytes(kMagic);
  w.u16(kBitstreamVersion);
  w.u16(static_cast<std::uint16_t>(header.type));
  w.u32(header.frame_index);
  w.u32(header.anchor_count);
  const auto& c = header.config;
  w.u32(c.coupled_per_anchor);
  w.u32(c.hyper_dim);
  w.u32(static_cast<std::uint32_t>(c.bottleneck_support));
  write_grid_config(w, c.context_grid);
  write_grid_config(w, c.prior_grid);
  for (auto p : header.primes) w.u32(p);
  for (double v : header.lo) w.f64(v);
  for (double v : header.hi) w.f64(v);
  w.f64(c.location_step);
  w.f64(c.grid_step);
  w.f64(c.lambda);
  w.u16(static_cast<std::uint16_t>(sections.size()));
  std::size_t offset = header_bytes();
  for (const auto& s : sections) {
    w.u16(static_cast<std::uint16_t>(s.id));
    w.u32(static_cast<std::uint32_t>(offset));
    w.u32(static_cast<std::uint32_t>(s.payload.size()));
    offset += s.payload.size();
  }
  for (const auto& s : sections) w.bytes(s.payload);
  return std::move(w.out);
}

Bitstream Bitstream::parse(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw DataError("not a CGS2 bitstream (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kBitstreamVersion) throw DataError("unsupported bitstream version " + std::to_string(version));
  Bitstream b;
  const std::uint16_t type = r.u16();
  if (type > 2) throw DataError("unknown frame type");
  b.header.type = static_cast<FrameType>(type);
  b.header.frame_index = r.u32();
  b.header.anchor_count = r.u32();
  auto& c = b.header.config;
  c.coupled_per_anchor = r.u32();
  c.hyper_dim = r.u32();
  c.bottleneck_support = static_cast<int>(r.u32());
  if (c.coupled_per_anchor == 0 || c.coupled_per_anchor > 1024 || c.hyper_dim == 0 || c.hyper_dim > 64 ||
      c.bottleneck_support < 1 || c.bottleneck_support > 64)
    throw DataError("model configuration out of range");
  c.context_grid = read_grid_config(r);
  c.prior_grid = read_grid_config(r);
  for (auto& p : b.header.primes) p = r.u32();
  for (double& v : b.header.lo) v = r.f64();
  for (double& v : b.header.hi) v = r.f64();
  for (int a = 0; a < 3; ++a)
    if (!std::isfinite(b.header.lo[a]) || !std::isfinite(b.header.hi[a]) || !(b.header.hi[a] > b.header.lo[a]))
      throw DataError("invalid domain bounds");
  c.location_step = r.f64();
  c.grid_step = r.f64();
  c.lambda = r.f64();
  if (!(c.location_step > 0.0) || !(c.grid_step > 0.0) || !std::isfinite(c.lambda))
    throw DataError("invalid quantization configuration");
  const std::uint16_t count = r.u16();
  struct Entry {
    std::uint16_t id;
    std::uint32_t offset, length;
  };
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    e.id = r.u16();
    e.offset = r.u32();
    e.length = r.u32();
    if (e.id < 1 || e.id > 8) throw DataError("unknown section id " + std::to_string(e.id));
    if (static_cast<std::uint64_t>(e.offset) + e.length > bytes.size()) throw DataError("section exceeds stream");
  }
  for (const auto& e : entries)
    b.sections.push_back({static_cast<SectionId>(e.id),
                          Bytes(bytes.begin() + e.offset, bytes.begin() + e.offset + e.length)});
  return b;
}

const Section* Bitstream::find(SectionId id) const {
  for (const auto& s : sections)
    if (s.id == id) return &s;
  return nullptr;
}

std::string describe_bitstream(const Bitstream& b, std::size_t total_bytes) {
  std::ostringstream os;
  const auto& h = b.header;
  const auto& c = h.config;
  const char* type = h.type == FrameType::kStatic ? "static" : h.type == FrameType::kIntra ? "I" : "P";
  os << "magic CGS2 version " << kBitstreamVersion << " type " << type << " frame " << h.frame_index << "\n";
  os << "anchors " << h.anchor_count << " K " << c.coupled_per_anchor << " hyper_dim " << c.hyper_dim
     << " bottleneck_support " << c.bottleneck_support << "\n";
  auto grid = [&](const char* name, const GridConfig& g) {
    os << name << " levels " << g.levels << " base " << g.base_resolution << " growth " << g.growth
       << " log2_table " << g.log2_table_size << " feature_dim " << g.feature_dim << "\n";
  };
  grid("context_grid", c.context_grid);
  grid("prior_grid", c.prior_grid);
  os << "primes " << h.primes[0] << " " << h.primes[1] << " " << h.primes[2] << "\n";
  os << "domain [" << h.lo[0] << ", " << h.lo[1] << ", " << h.lo[2] << "] - [" << h.hi[0] << ", " << h.hi[1]
     << ", " << h.hi[2] << "]\n";
  os << "location_step " << c.location_step << " grid_step " << c.grid_step << " lambda " << c.lambda << "\n";
  os << "header " << b.header_bytes() << " bytes\n";
  std::size_t offset = b.header_bytes();
  for (const auto& s : b.sections) {
    os << "section " << section_name(s.id) << " offset " << offset << " length " << s.payload.size() << "\n";
    offset += s.payload.size();
  }
  os << "total " << total_bytes << " bytes\n";
  return os.str();
}

// ---------------------------------------------------------------- weights and grids

void write_affine(ByteWriter& w, const Affine& a) {
  for (double v : a.weight) w.u16(float_to_half(static_cast<float>(v)));
  for (double v : a.bias) w.u16(float_to_half(static_cast<float>(v)));
}

void read_affine(ByteReader& r, Affine& a) {
  for (double& v : a.weight) v = half_to_float(r.u16());
  for (double& v : a.bias) v = half_to_float(r.u16());
}

void round_affine_to_half(Affine& a) {
  for (double& v : a.weight) v = round_to_half(v);
  for (double& v : a.bias) v = round_to_half(v);
}

void quantize_grid(FeatureGrid& grid, double step) {
  for (auto& t : grid.tables)
    for (double& v : t) v = quantize_value(v, step);
}

namespace {

constexpr std::size_t kGridDirect = 32;  // zigzag values below this are coded directly

template <typename M>
auto network_list(M& m) {
  auto& p = m.prediction;
  auto& e = m.entropy;
  using Ptr = std::conditional_t<std::is_const_v<M>, const Affine*, Affine*>;
  return std::vector<Ptr>{&p.translation, &p.scaling, &p.rotation, &p.color, &p.opacity, &e.step_head, &e.embedding_head,
          &e.coupled_head, &e.covariance_head, &e.anchor_hyper, &e.coupled_hyper};
}

}  // namespace

Bytes encode_grid_tables(const FeatureGrid& grid, double step) {
  RangeEncoder enc;
  for (const auto& t : grid.tables) {
    AdaptiveModel sym(kGridDirect + 1);
    AdaptiveModel esc(65);
    for (double v : t) {
      const std::uint64_t z = zigzag(quantize(v, step).index);
      if (z < kGridDirect) {
        sym.encode(enc, static_cast<std::size_t>(z));
      } else {
        sym.encode(enc, kGridDirect);
        encode_uint(enc, esc, z - kGridDirect);
      }
    }
  }
  return enc.finish();
}

void decode_grid_tables(std::span<const std::uint8_t> bytes, FeatureGrid& grid, double step) {
  RangeDecoder dec(bytes);
  for (auto& t : grid.tables) {
    AdaptiveModel sym(kGridDirect + 1);
    AdaptiveModel esc(65);
    for (double& v : t) {
      std::uint64_t z = sym.decode(dec);
      if (z == kGridDirect) z += decode_uint(dec, esc);
      v = static_cast<double>(unzigzag(z)) * step;
    }
  }
}

// ---------------------------------------------------------------- model coding

namespace {

void permute_anchors(SceneModel& m, const std::vector<std::size_t>& order) {
  const std::size_t k = m.k();
  std::vector<AnchorPrimitive> anchors;
  std::vector<CoupledPrimitive> coupled;
  anchors.reserve(m.anchors.size());
  coupled.reserve(m.coupled.size());
  for (std::size_t n = 0; n < order.size(); ++n) {
    anchors.push_back(m.anchors[order[n]]);
    for (std::size_t c = 0; c < k; ++c) {
      CoupledPrimitive cp = m.coupled[order[n] * k + c];
      cp.anchor_index = static_cast<std::uint32_t>(n);
      coupled.push_back(cp);
    }
  }
  m.anchors = std::move(anchors);
  m.coupled = std::move(coupled);
}

std::vector<CodedCDF> bottleneck_cdfs(const FactorizedBottleneck& b) {
  std::vector<CodedCDF> out;
  for (std::size_t d = 0; d < b.dims; ++d) {
    std::vector<double> pmf;
    for (int q = -b.support; q <= b.support; ++q) pmf.push_back(bottleneck_pmf(b, d, q));
    out.push_back(make_coded_cdf(pmf));
  }
  return out;
}

std::int64_t index_of(double value, double step) { return quantize(value, step).index; }

}  // namespace

SceneModel quantize_model(const SceneModel& model) {
  model.validate();
  SceneModel q = model;
  for (Affine* a : network_list(q)) round_affine_to_half(*a);
  for (auto* b : {&q.entropy.anchor_bottleneck, &q.entropy.coupled_bottleneck})
    for (double& v : b->logits) v = round_to_half(v);
  quantize_grid(q.context_grid, q.config.grid_step);
  quantize_grid(q.prior_grid, q.config.grid_step);
  const double ls = q.config.location_step;
  for (auto& a : q.anchors) {
    const auto l = lattice(a.location, ls);
    for (int i = 0; i < 3; ++i) a.location[i] = static_cast<double>(l[i]) * ls;
  }
  std::vector<Vec3> locs;
  for (const auto& a : q.anchors) locs.push_back(a.location);
  permute_anchors(q, morton_order(locs, ls));
  const std::size_t k = q.k();
  for (std::size_t i = 0; i < q.anchors.size(); ++i) {
    auto& a = q.anchors[i];
    const AnchorContext ctx = anchor_context(q, a.location);
    for (double& v : a.ref_embedding) v = quantize_value(v, ctx.steps.ref);
    auto cov = a.cov_params();
    for (double& v : cov) v = quantize_value(v, ctx.steps.cov);
    a.set_cov_params(cov);
    for (std::size_t c = i * k; c < (i + 1) * k; ++c)
      for (double& v : q.coupled[c].res_embedding) v = quantize_value(v, ctx.steps.res);
  }
  return q;
}

std::vector<Section> encode_primitive_sections(const SceneModel& q) {
  std::vector<Section> out;
  {
    std::vector<Vec3> locs;
    for (const auto& a : q.anchors) locs.push_back(a.location);
    out.push_back({SectionId::kAnchorLocations, encode_anchor_locations(locs, q.config.location_step)});
  }

  const auto& e = q.entropy;
  const std::size_t k = q.k();
  std::vector<AnchorContext> ctx;
  for (const auto& a : q.anchors) ctx.push_back(anchor_context(q, a.location));

  RangeEncoder cov_enc, hyper_enc, emb_enc, res_enc;
  const auto anchor_cdfs = bottleneck_cdfs(e.anchor_bottleneck);
  const auto coupled_cdfs = bottleneck_cdfs(e.coupled_bottleneck);
  const int support = e.anchor_bottleneck.support;
  std::vector<std::vector<double>> coupled_eta(q.coupled.size());
  for (std::size_t i = 0; i < q.anchors.size(); ++i) {
    const auto& a = q.anchors[i];
    const auto cov = a.cov_params();
    const auto pc = predict_covariance_entropy_params(e, ctx[i].prior);
    for (std::size_t j = 0; j < kCovParams; ++j)
      encode_gaussian_index(cov_enc, index_of(cov[j], ctx[i].steps.cov), pc.mean[j], pc.scale[j], ctx[i].steps.cov);

    const auto eta = quantized_hyper(e.anchor_hyper, a.ref_embedding, support);
    for (std::size_t d = 0; d < eta.size(); ++d)
      encode_symbol(hyper_enc, anchor_cdfs[d], static_cast<std::size_t>(eta[d] + support));
    const auto pf = predict_embedding_entropy_params(e, eta, ctx[i].prior);
    for (std::size_t j = 0; j < kRefDim; ++j)
      encode_gaussian_index(emb_enc, index_of(a.ref_embedding[j], ctx[i].steps.ref), pf.mean[j], pf.scale[j],
                            ctx[i].steps.ref);
  }
  for (std::size_t c = 0; c < q.coupled.size(); ++c) {
    const auto& r = q.coupled[c].res_embedding;
    const int cs = e.coupled_bottleneck.support;
    coupled_eta[c] = quantized_hyper(e.coupled_hyper, r, cs);
    for (std::size_t d = 0; d < coupled_eta[c].size(); ++d)
      encode_symbol(hyper_enc, coupled_cdfs[d], static_cast<std::size_t>(coupled_eta[c][d] + cs));
    const AnchorContext& cx = ctx[c / k];
    const auto pr = predict_coupled_entropy_params(e, coupled_eta[c], cx.prior);
    for (std::size_t j = 0; j < kResDim; ++j)
      encode_gaussian_index(res_enc, index_of(r[j], cx.steps.res), pr.mean[j], pr.scale[j], cx.steps.res);
  }
  out.push_back({SectionId::kAnchorCovariances, cov_enc.finish()});
  out.push_back({SectionId::kHyperpriors, hyper_enc.finish()});
  out.push_back({SectionId::kAnchorEmbeddings, emb_enc.finish()});
  out.push_back({SectionId::kCoupledEmbeddings, res_enc.finish()});
  return out;
}

Bytes encode_model(const SceneModel& model, FrameType type, std::uint32_t frame_index) {
  if (model.prior_grid.lo != model.context_grid.lo || model.prior_grid.hi != model.context_grid.hi ||
      model.prior_grid.primes != model.context_grid.primes)
    throw std::invalid_argument("encode_model: grids must share bounds and hash primes");
  const SceneModel q = quantize_model(model);
  Bitstream b;
  b.header.type = type;
  b.header.frame_index = frame_index;
  b.header.anchor_count = static_cast<std::uint32_t>(q.anchors.size());
  b.header.config = q.config;
  b.header.primes = q.context_grid.primes;
  b.header.lo = q.context_grid.lo;
  b.header.hi = q.context_grid.hi;

  {
    ByteWriter w;
    for (const Affine* a : network_list(q)) write_affine(w, *a);
    for (const auto* bn : {&q.entropy.anchor_bottleneck, &q.entropy.coupled_bottleneck})
      for (double v : bn->logits) w.u16(float_to_half(static_cast<float>(v)));
    b.sections.push_back({SectionId::kNetworkWeights, std::move(w.out)});
  }
  {
    ByteWriter w;
    const Bytes ctx = encode_grid_tables(q.context_grid, q.config.grid_step);
    w.varint(ctx.size());
    w.bytes(ctx);
    w.bytes(encode_grid_tables(q.prior_grid, q.config.grid_step));
    b.sections.push_back({SectionId::kGridTables, std::move(w.out)});
  }
  for (auto& sec : encode_primitive_sections(q)) b.sections.push_back(std::move(sec));
  return b.serialize();
}

SceneModel decode_model(std::span<const std::uint8_t> bytes) { return decode_model(Bitstream::parse(bytes)); }

namespace {

const Section& require(const Bitstream& b, SectionId id) {
  const Section* s = b.find(id);
  if (!s) throw DataError(std::string("missing section ") + section_name(id));
  return *s;
}

}  // namespace

void decode_primitive_sections(const Bitstream& b, std::size_t count, SceneModel& m) {
  const auto locs = decode_anchor_locations(require(b, SectionId::kAnchorLocations).payload, m.config.location_step);
  if (locs.size() != count) throw DataError("anchor_locations: count mismatch with header");
  const std::size_t k = m.k();
  const std::size_t first = m.anchors.size();
  for (std::size_t i = 0; i < locs.size(); ++i) {
    AnchorPrimitive a;
    a.location = locs[i];
    m.anchors.push_back(a);
    for (std::size_t c = 0; c < k; ++c) m.coupled.push_back({ResEmbedding{}, static_cast<std::uint32_t>(first + i)});
  }

  const auto& e = m.entropy;
  std::vector<AnchorContext> ctx;
  for (std::size_t i = first; i < m.anchors.size(); ++i) ctx.push_back(anchor_context(m, m.anchors[i].location));
  RangeDecoder cov_dec(require(b, SectionId::kAnchorCovariances).payload);
  RangeDecoder hyper_dec(require(b, SectionId::kHyperpriors).payload);
  RangeDecoder emb_dec(require(b, SectionId::kAnchorEmbeddings).payload);
  RangeDecoder res_dec(require(b, SectionId::kCoupledEmbeddings).payload);
  const auto anchor_cdfs = bottleneck_cdfs(e.anchor_bottleneck);
  const auto coupled_cdfs = bottleneck_cdfs(e.coupled_bottleneck);
  for (std::size_t i = 0; i < count; ++i) {
    auto& a = m.anchors[first + i];
    const auto pc = predict_covariance_entropy_params(e, ctx[i].prior);
    std::array<double, kCovParams> cov;
    for (std::size_t j = 0; j < kCovParams; ++j)
      cov[j] = static_cast<double>(decode_gaussian_index(cov_dec, pc.mean[j], pc.scale[j], ctx[i].steps.cov)) *
               ctx[i].steps.cov;
    a.set_cov_params(cov);

    const int support = e.anchor_bottleneck.support;
    std::vector<double> eta(e.anchor_bottleneck.dims);
    for (std::size_t d = 0; d < eta.size(); ++d)
      eta[d] = static_cast<double>(decode_symbol(hyper_dec, anchor_cdfs[d])) - support;
    const auto pf = predict_embedding_entropy_params(e, eta, ctx[i].prior);
    for (std::size_t j = 0; j < kRefDim; ++j)
      a.ref_embedding[j] =
          static_cast<double>(decode_gaussian_index(emb_dec, pf.mean[j], pf.scale[j], ctx[i].steps.ref)) *
          ctx[i].steps.ref;
  }
  for (std::size_t c = 0; c < count * k; ++c) {
    const int cs = e.coupled_bottleneck.support;
    std::vector<double> eta(e.coupled_bottleneck.dims);
    for (std::size_t d = 0; d < eta.size(); ++d)
      eta[d] = static_cast<double>(decode_symbol(hyper_dec, coupled_cdfs[d])) - cs;
    const AnchorContext& cx = ctx[c / k];
    const auto pr = predict_coupled_entropy_params(e, eta, cx.prior);
    auto& r = m.coupled[first * k + c].res_embedding;
    for (std::size_t j = 0; j < kResDim; ++j)
      r[j] = static_cast<double>(decode_gaussian_index(res_dec, pr.mean[j], pr.scale[j], cx.steps.res)) * cx.steps.res;
  }
}

SceneModel decode_model(const Bitstream& b) {
  const auto& h = b.header;
  SceneModel m = make_model(h.config, h.lo, h.hi);
  m.context_grid.primes = h.primes;
  m.prior_grid.primes = h.primes;
  {
    ByteReader r(require(b, SectionId::kNetworkWeights).payload);
    for (Affine* a : network_list(m)) read_affine(r, *a);
    for (auto* bn : {&m.entropy.anchor_bottleneck, &m.entropy.coupled_bottleneck})
      for (double& v : bn->logits) v = half_to_float(r.u16());
    if (!r.done()) throw DataError("network_weights: trailing bytes");
  }
  {
    ByteReader r(require(b, SectionId::kGridTables).payload);
    const std::uint64_t n = r.varint();
    if (n > (std::uint64_t{1} << 32)) throw DataError("grid_tables: bad length");
    const auto ctx = r.bytes(static_cast<std::size_t>(n));
    decode_grid_tables(ctx, m.context_grid, m.config.grid_step);
    const auto& payload = require(b, SectionId::kGridTables).payload;
    decode_grid_tables(std::span<const std::uint8_t>(payload).subspan(r.position()), m.prior_grid, m.config.grid_step);
  }
  decode_primitive_sections(b, h.anchor_count, m);
  return m;
}

std::size_t primitive_payload_bytes(const Bitstream& b) {
  std::size_t n = 0;
  for (const auto& s : b.sections)
    if (s.id == SectionId::kAnchorCovariances || s.id == SectionId::kHyperpriors ||
        s.id == SectionId::kAnchorEmbeddings || s.id == SectionId::kCoupledEmbeddings)
      n += s.payload.size();
  return n;
}

}  // namespace cgs
