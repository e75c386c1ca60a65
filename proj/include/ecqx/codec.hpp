#pragma once

// Lossless coding of per-layer assignment matrices.
//
// Container layout (all integers little-endian, lengths 32-bit):
//
//   offset  size  field
//   0       4     magic "ECQB"
//   4       4     format version (1)
//   8       4     layer count L
//   then L layer records:
//           4     name length n
//           n     name bytes
//           4     bit width (2..5); the grid has 2^bw - 1 levels
//           8     step size, IEEE-754 binary64
//           4     rank r
//           4*r   dims
//           4     payload length m
//           m     payload: adaptive arithmetic code of the centroid indices
//   last 4 bytes  CRC-32 (zlib polynomial) of every preceding byte
//
// The payload codes the row-major index stream with an order-0 adaptive model:
// every symbol starts at count 1 and gains 1 per occurrence; counts are halved
// when their total exceeds 2^24. The coder is a 32-bit binary arithmetic coder
// with bit-plus-follow underflow handling; bits are packed MSB first and the
// final byte is zero padded.

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ecqx/quantizer.hpp"

namespace ecqx {

inline constexpr char kBitstreamMagic[4] = {'E', 'C', 'Q', 'B'};
inline constexpr std::uint32_t kBitstreamVersion = 1;

namespace coding {

inline constexpr std::uint64_t kTop = 0xffffffffULL;
inline constexpr std::uint64_t kHalf = 0x80000000ULL;
inline constexpr std::uint64_t kQuarter = 0x40000000ULL;
inline constexpr std::uint32_t kMaxTotal = 1u << 24;

class AdaptiveModel {
 public:
  explicit AdaptiveModel(std::size_t symbols) : freq_(symbols, 1), total_(std::uint32_t(symbols)) {}

  std::size_t symbols() const { return freq_.size(); }
  std::uint32_t total() const { return total_; }

  std::uint32_t cum_low(std::size_t s) const {
    std::uint32_t c = 0;
    for (std::size_t i = 0; i < s; ++i) c += freq_[i];
    return c;
  }
  std::uint32_t freq(std::size_t s) const { return freq_[s]; }

  // Symbol whose cumulative interval contains `target`; also returns its low end.
  std::size_t find(std::uint32_t target, std::uint32_t& low) const {
    std::uint32_t c = 0;
    for (std::size_t s = 0; s < freq_.size(); ++s) {
      if (target < c + freq_[s]) {
        low = c;
        return s;
      }
      c += freq_[s];
    }
    low = c - freq_.back();
    return freq_.size() - 1;
  }

  void update(std::size_t s) {
    ++freq_[s];
    if (++total_ > kMaxTotal) {
      total_ = 0;
      for (auto& f : freq_) total_ += (f = (f + 1) / 2);
    }
  }

 private:
  std::vector<std::uint32_t> freq_;
  std::uint32_t total_;
};

class BitWriter {
 public:
  void put(int bit) {
    cur_ = std::uint8_t((cur_ << 1) | bit);
    if (++n_ == 8) {
      bytes_.push_back(char(cur_));
      cur_ = 0;
      n_ = 0;
    }
  }
  std::string finish() {
    if (n_) bytes_.push_back(char(cur_ << (8 - n_)));
    n_ = 0;
    return std::move(bytes_);
  }

 private:
  std::string bytes_;
  std::uint8_t cur_ = 0;
  int n_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::string_view bytes) : bytes_(bytes) {}
  int get() {
    if (pos_ >= 8 * bytes_.size()) {
      ++pos_;
      return 0;
    }
    const int bit = (std::uint8_t(bytes_[pos_ / 8]) >> (7 - pos_ % 8)) & 1;
    ++pos_;
    return bit;
  }
  std::size_t overrun() const { return pos_ > 8 * bytes_.size() ? pos_ - 8 * bytes_.size() : 0; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string encode_symbols(std::span<const std::uint8_t> symbols, std::size_t alphabet) {
  AdaptiveModel model(alphabet);
  BitWriter out;
  std::uint64_t low = 0, high = kTop;
  std::uint64_t pending = 0;
  auto emit = [&](int bit) {
    out.put(bit);
    for (; pending > 0; --pending) out.put(!bit);
  };
  for (auto s : symbols) {
    if (s >= alphabet) throw InputError("symbol " + std::to_string(s) + " outside alphabet");
    const std::uint64_t range = high - low + 1, total = model.total();
    const std::uint64_t cl = model.cum_low(s), ch = cl + model.freq(s);
    high = low + range * ch / total - 1;
    low = low + range * cl / total;
    for (;;) {
      if (high < kHalf) {
        emit(0);
      } else if (low >= kHalf) {
        emit(1);
        low -= kHalf;
        high -= kHalf;
      } else if (low >= kQuarter && high < 3 * kQuarter) {
        ++pending;
        low -= kQuarter;
        high -= kQuarter;
      } else {
        break;
      }
      low = 2 * low;
      high = 2 * high + 1;
    }
    model.update(s);
  }
  ++pending;
  emit(low < kQuarter ? 0 : 1);
  return out.finish();
}

// Throws InputError when the payload is exhausted before `count` symbols.
inline std::vector<std::uint8_t> decode_symbols(std::string_view payload, std::size_t count, std::size_t alphabet) {
  AdaptiveModel model(alphabet);
  BitReader in(payload);
  std::uint64_t low = 0, high = kTop, value = 0;
  for (int i = 0; i < 32; ++i) value = (value << 1) | std::uint64_t(in.get());
  std::vector<std::uint8_t> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::uint64_t range = high - low + 1, total = model.total();
    const std::uint64_t target = ((value - low + 1) * total - 1) / range;
    std::uint32_t cl = 0;
    const std::size_t s = model.find(std::uint32_t(target), cl);
    const std::uint64_t ch = std::uint64_t(cl) + model.freq(s);
    high = low + range * ch / total - 1;
    low = low + range * cl / total;
    for (;;) {
      if (high < kHalf) {
      } else if (low >= kHalf) {
        low -= kHalf;
        high -= kHalf;
        value -= kHalf;
      } else if (low >= kQuarter && high < 3 * kQuarter) {
        low -= kQuarter;
        high -= kQuarter;
        value -= kQuarter;
      } else {
        break;
      }
      low = 2 * low;
      high = 2 * high + 1;
      value = 2 * value + std::uint64_t(in.get());
    }
    // The encoder flushes at most 32 - 2 bits of state beyond its last byte;
    // reading far past the end means the payload was cut short.
    if (in.overrun() > 40) throw InputError("arithmetic-coded payload truncated");
    out.push_back(std::uint8_t(s));
    model.update(s);
  }
  return out;
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(char((v >> (8 * b)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(char((bits >> (8 * b)) & 0xff));
}

inline std::uint32_t crc32_of(std::string_view bytes) {
  return std::uint32_t(::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), uInt(bytes.size())));
}

}  // namespace coding

struct CodedLayer {
  std::string name;
  CentroidGrid grid;
  AssignmentMatrix assign;

  friend bool operator==(const CodedLayer&, const CodedLayer&) = default;
};

struct Bitstream {
  std::string bytes;
  std::vector<std::size_t> payload_bytes;  // per layer

  std::size_t size() const { return bytes.size(); }
};

inline Bitstream encode(const std::vector<CodedLayer>& layers) {
  Bitstream bs;
  std::string& out = bs.bytes;
  out.append(kBitstreamMagic, 4);
  coding::put_u32(out, kBitstreamVersion);
  coding::put_u32(out, std::uint32_t(layers.size()));
  for (const auto& l : layers) {
    if (!l.grid.uniform())
      throw InputError("layer '" + l.name + "': only uniform grids can be stored (step and bit width)");
    if (l.grid.size() != grid_levels(l.grid.bitwidth)) throw InputError("grid level count does not match bit width");
    if (shape_size(l.assign.shape) != l.assign.size()) throw ShapeError("assignment shape/data mismatch");
    coding::put_u32(out, std::uint32_t(l.name.size()));
    out += l.name;
    coding::put_u32(out, std::uint32_t(l.grid.bitwidth));
    coding::put_f64(out, l.grid.step);
    coding::put_u32(out, std::uint32_t(l.assign.shape.size()));
    for (auto d : l.assign.shape) coding::put_u32(out, std::uint32_t(d));
    const std::string payload = coding::encode_symbols(l.assign.index, l.grid.size());
    coding::put_u32(out, std::uint32_t(payload.size()));
    out += payload;
    bs.payload_bytes.push_back(payload.size());
  }
  coding::put_u32(out, coding::crc32_of(out));
  return bs;
}

namespace detail {

class ByteCursor {
 public:
  explicit ByteCursor(std::string_view b) : b_(b) {}
  std::size_t pos() const { return pos_; }
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw FormatError(std::string("truncated bitstream reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | std::uint8_t(b_[pos_ + b]);
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | std::uint8_t(b_[pos_ + b]);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<CodedLayer> decode(std::string_view bytes) {
  if (bytes.size() < 16) throw FormatError("bitstream shorter than its fixed header and checksum", bytes.size());
  if (bytes.substr(0, 4) != std::string_view(kBitstreamMagic, 4)) throw FormatError("bad bitstream magic", 0);
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  detail::ByteCursor trailer(bytes.substr(bytes.size() - 4));
  if (trailer.u32("checksum") != coding::crc32_of(body))
    throw FormatError("bitstream checksum mismatch", bytes.size() - 4);

  detail::ByteCursor cur(body);
  cur.bytes(4, "magic");
  const std::size_t version_at = cur.pos();
  if (const auto v = cur.u32("version"); v != kBitstreamVersion)
    throw FormatError("unsupported bitstream version " + std::to_string(v), version_at);
  const std::uint32_t n_layers = cur.u32("layer count");
  std::vector<CodedLayer> layers;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    CodedLayer layer;
    const std::uint32_t name_len = cur.u32("name length");
    layer.name = std::string(cur.bytes(name_len, "name"));
    const std::size_t bw_at = cur.pos();
    const auto bw = int(cur.u32("bit width"));
    if (bw < 2 || bw > 5) throw FormatError("bit width " + std::to_string(bw) + " outside [2, 5]", bw_at);
    const std::size_t step_at = cur.pos();
    const double step = cur.f64("step");
    if (!(step > 0.0) || !std::isfinite(step)) throw FormatError("invalid step size", step_at);
    layer.grid = uniform_grid(bw, step);
    const std::uint32_t rank = cur.u32("rank");
    for (std::uint32_t d = 0; d < rank; ++d) layer.assign.shape.push_back(cur.u32("dims"));
    const std::uint32_t len = cur.u32("payload length");
    const std::size_t payload_at = cur.pos();
    const auto payload = cur.bytes(len, "payload");
    try {
      layer.assign.index = coding::decode_symbols(payload, shape_size(layer.assign.shape), layer.grid.size());
    } catch (const InputError& e) {
      throw FormatError(e.what(), payload_at);
    }
    layers.push_back(std::move(layer));
  }
  if (cur.pos() != body.size()) throw FormatError("trailing bytes after last layer record", cur.pos());
  return layers;
}

/// Bits of everything in the container except the coded payloads.
inline std::size_t container_overhead_bits(const std::vector<CodedLayer>& layers) {
  std::size_t bytes = 12 + 4;
  for (const auto& l : layers) bytes += 4 + l.name.size() + 4 + 8 + 4 + 4 * l.assign.shape.size() + 4;
  return 8 * bytes;
}

/// Ideal coded size: sum over layers of N_W * H plus the header bits.
inline double entropy_size_estimate(std::span<const ClusterStats> stats, std::size_t header_bits) {
  double bits = double(header_bits);
  for (const auto& s : stats) bits += double(s.total) * entropy(s);
  return bits;
}

inline double compression_ratio(double fp_bytes, double coded_bytes) {
  if (!(coded_bytes > 0.0)) throw InputError("coded size must be positive");
  return fp_bytes / coded_bytes;
}

// Full-precision baseline: quantizable weights at 32 bits each.
inline double fp_weight_bytes(std::size_t quantizable_weights) { return 4.0 * double(quantizable_weights); }

}  // namespace ecqx
