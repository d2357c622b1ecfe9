#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cgs/primitives.hpp"

namespace cgs {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kProbBits = 16;
inline constexpr std::uint32_t kProbTotal = 1u << kProbBits;

// Carry-propagating range coder (32-bit range, byte-wise output).
class RangeEncoder {
 public:
  // Codes the interval [cum, cum + freq) of `total` (total <= 2^16).
  void encode(std::uint32_t cum, std::uint32_t freq, std::uint32_t total);
  // Equiprobable bits, most significant first; nbits <= 32.
  void encode_bits(std::uint32_t value, int nbits);
  Bytes finish();

 private:
  void shift_low();
  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  Bytes out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> data);
  // Target frequency in [0, total) of the next symbol; follow with consume().
  std::uint32_t peek(std::uint32_t total);
  void consume(std::uint32_t cum, std::uint32_t freq);
  std::uint32_t decode_bits(int nbits);

 private:
  std::uint8_t next_byte();
  void normalize();
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
  std::uint32_t scale_ = 1;
};

// Static 16-bit cumulative frequency table: cum[0] = 0 < ... < cum[n] = 2^16.
struct CodedCDF {
  std::vector<std::uint32_t> cum;

  std::size_t size() const { return cum.empty() ? 0 : cum.size() - 1; }
  std::uint32_t freq(std::size_t s) const { return cum[s + 1] - cum[s]; }
};

// Every symbol gets at least one count; the remainder goes to the most
// probable symbol. Throws std::invalid_argument for an empty or oversize alphabet.
CodedCDF make_coded_cdf(std::span<const double> pmf);

void encode_symbol(RangeEncoder& enc, const CodedCDF& cdf, std::size_t symbol);
std::size_t decode_symbol(RangeDecoder& dec, const CodedCDF& cdf);

// One CDF per symbol, or a single CDF shared by all symbols.
Bytes ac_encode(std::span<const std::size_t> symbols, std::span<const CodedCDF> cdfs);
std::vector<std::size_t> ac_decode(std::span<const std::uint8_t> bytes, std::span<const CodedCDF> cdfs,
                                   std::size_t count);

// Frequency-count model updated after every symbol.
class AdaptiveModel {
 public:
  explicit AdaptiveModel(std::size_t symbols);
  void encode(RangeEncoder& enc, std::size_t symbol);
  std::size_t decode(RangeDecoder& dec);

 private:
  void update(std::size_t symbol);
  std::vector<std::uint32_t> freq_;
  std::uint32_t total_ = 0;
};

// Unsigned integer with an adaptive bit-length prefix and raw mantissa bits.
void encode_uint(RangeEncoder& enc, AdaptiveModel& lengths, std::uint64_t v);
std::uint64_t decode_uint(RangeDecoder& dec, AdaptiveModel& lengths);

inline std::uint64_t zigzag(std::int64_t v) {
  return (static_cast<std::uint64_t>(v) << 1) ^ static_cast<std::uint64_t>(v >> 63);
}
inline std::int64_t unzigzag(std::uint64_t v) {
  return static_cast<std::int64_t>(v >> 1) ^ -static_cast<std::int64_t>(v & 1);
}

// Quantization index under a discretized Gaussian: a window of symbols
// around round(mean/step) plus an escape to a raw-coded index.
void encode_gaussian_index(RangeEncoder& enc, std::int64_t index, double mean, double scale, double step);
std::int64_t decode_gaussian_index(RangeDecoder& dec, double mean, double scale, double step);
// Bits encode_gaussian_index spends on `index`, from the same 16-bit tables.
double gaussian_index_bits(std::int64_t index, double mean, double scale, double step);

// Anchor locations: lattice quantization, Morton sort, delta coding.
// Decoded points come back in Morton order.
Bytes encode_anchor_locations(std::span<const Vec3> positions, double step);
std::vector<Vec3> decode_anchor_locations(std::span<const std::uint8_t> bytes, double step);
// Stable Morton order of the quantized positions.
std::vector<std::size_t> morton_order(std::span<const Vec3> positions, double step);

// Little-endian byte helpers with bounds-checked reads.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void varint(std::uint64_t v);
  void bytes(std::span<const std::uint8_t> b) { out.insert(out.end(), b.begin(), b.end()); }
  Bytes out;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> d) : data_(d) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::uint64_t varint();
  std::span<const std::uint8_t> bytes(std::size_t n);
  bool done() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

enum class SectionId : std::uint16_t {
  kNetworkWeights = 1,
  kGridTables = 2,
  kAnchorLocations = 3,
  kAnchorCovariances = 4,
  kHyperpriors = 5,
  kAnchorEmbeddings = 6,
  kCoupledEmbeddings = 7,
  kTemporalResidues = 8,
};

const char* section_name(SectionId id);

enum class FrameType : std::uint16_t { kStatic = 0, kIntra = 1, kPredicted = 2 };

inline constexpr std::uint16_t kBitstreamVersion = 1;

struct BitstreamHeader {
  FrameType type = FrameType::kStatic;
  std::uint32_t frame_index = 0;
  std::uint32_t anchor_count = 0;
  ModelConfig config;
  std::array<std::uint32_t, 3> primes{1u, 2654435761u, 805459861u};
  Vec3 lo{0.0, 0.0, 0.0};
  Vec3 hi{1.0, 1.0, 1.0};
};

struct Section {
  SectionId id;
  Bytes payload;
};

struct Bitstream {
  BitstreamHeader header;
  std::vector<Section> sections;

  Bytes serialize() const;
  static Bitstream parse(std::span<const std::uint8_t> bytes);
  const Section* find(SectionId id) const;
  std::size_t header_bytes() const;
};

// Human-readable header and section table.
std::string describe_bitstream(const Bitstream& b, std::size_t total_bytes);

// Rounds networks to fp16, grids to grid_step, locations to the lattice
// (anchors reordered to Morton order) and embeddings/covariances with their
// predicted steps: the model a decoder reconstructs.
SceneModel quantize_model(const SceneModel& model);

Bytes encode_model(const SceneModel& model, FrameType type = FrameType::kStatic, std::uint32_t frame_index = 0);
SceneModel decode_model(std::span<const std::uint8_t> bytes);
// Decodes the static sections of an already-parsed stream.
SceneModel decode_model(const Bitstream& b);

// Location, covariance, hyper latent and embedding sections of an already
// quantized model.
std::vector<Section> encode_primitive_sections(const SceneModel& quantized);
// Decodes `count` anchors from those sections of b and appends them to m,
// whose networks and grids supply the entropy model.
void decode_primitive_sections(const Bitstream& b, std::size_t count, SceneModel& m);

// Byte size of the entropy-coded primitive sections (covariances, hyper
// latents, embeddings) of an encoded model.
std::size_t primitive_payload_bytes(const Bitstream& b);

// Shared pieces for other payloads built on the same container.
void write_affine(ByteWriter& w, const Affine& a);
void read_affine(ByteReader& r, Affine& a);
void round_affine_to_half(Affine& a);
Bytes encode_grid_tables(const FeatureGrid& grid, double step);
void decode_grid_tables(std::span<const std::uint8_t> bytes, FeatureGrid& grid, double step);
void quantize_grid(FeatureGrid& grid, double step);

}  // namespace cgs
