#include "nzc/range_coder.hpp"

#include <algorithm>

namespace nzc {

namespace {

constexpr uint32_t kTop = 1u << 24;

class Encoder {
 public:
  explicit Encoder(std::vector<uint8_t>& out) : out_(out) {}

  void encode(uint32_t cum, uint32_t freq, int precision) {
    range_ /= (1u << precision);
    low_ += uint64_t(cum) * range_;
    range_ *= freq;
    normalize();
  }

  void encode_bits(uint32_t value, int nbits) {
    for (int i = nbits - 1; i >= 0; --i) {
      range_ >>= 1;
      if ((value >> i) & 1u) low_ += range_;
      normalize();
    }
  }

  void flush() {
    for (int i = 0; i < 5; ++i) shift_low();
  }

 private:
  void normalize() {
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  void shift_low() {
    if (uint32_t(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const uint8_t carry = uint8_t(low_ >> 32);
      uint8_t byte = cache_;
      do {
        out_.push_back(uint8_t(byte + carry));
        byte = 0xFF;
      } while (--cache_size_ != 0);
      cache_ = uint8_t(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ << 8) & 0xFFFFFFFFull;
  }

  std::vector<uint8_t>& out_;
  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  uint64_t cache_size_ = 1;
};

class Decoder {
 public:
  Decoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
    for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | read_byte();
  }

  uint32_t decode_freq(int precision) {
    range_ /= (1u << precision);
    return std::min(code_ / range_, (1u << precision) - 1);
  }

  void decode_update(uint32_t cum, uint32_t freq) {
    code_ -= cum * range_;
    range_ *= freq;
    normalize();
  }

  uint32_t decode_bits(int nbits) {
    uint32_t result = 0;
    for (int i = 0; i < nbits; ++i) {
      range_ >>= 1;
      code_ -= range_;
      const uint32_t borrow = 0u - (code_ >> 31);
      code_ += range_ & borrow;
      normalize();
      result = (result << 1) + (borrow + 1);
    }
    return result;
  }

 private:
  void normalize() {
    while (range_ < kTop) {
      code_ = (code_ << 8) | read_byte();
      range_ <<= 8;
    }
  }

  uint8_t read_byte() {
    if (pos_ >= size_) fail(ErrorCode::CorruptStream, "range-coded stream truncated");
    return data_[pos_++];
  }

  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

const CdfRow& row_for(const QuantizedCdfTable& table, int32_t index) {
  if (index < 0 || size_t(index) >= table.rows.size())
    fail(ErrorCode::InvalidArgument,
         "row index " + std::to_string(index) + " outside table of " +
             std::to_string(table.rows.size()) + " rows");
  return table.rows[size_t(index)];
}

}  // namespace

EncodedChunk rc_encode(const std::vector<int32_t>& symbols,
                       const std::vector<int32_t>& row_indexes, const QuantizedCdfTable& table) {
  if (symbols.size() != row_indexes.size())
    fail(ErrorCode::Contract, "rc_encode: symbols and row_indexes must have equal length");
  EncodedChunk chunk;
  chunk.symbol_count = static_cast<int64_t>(symbols.size());
  if (symbols.empty()) return chunk;

  Encoder enc(chunk.bytes);
  for (size_t i = 0; i < symbols.size(); ++i) {
    const CdfRow& row = row_for(table, row_indexes[i]);
    const int support = row.support();
    const int64_t idx = int64_t(symbols[i]) - row.offset;
    if (idx >= 0 && idx < support) {
      enc.encode(row.cdf[size_t(idx)], row.cdf[size_t(idx) + 1] - row.cdf[size_t(idx)],
                 table.precision);
    } else {
      const uint32_t esc_freq = row.cdf[size_t(support) + 1] - row.cdf[size_t(support)];
      if (esc_freq == 0)
        fail(ErrorCode::Capacity, "escape slot has zero frequency; value not representable");
      enc.encode(row.cdf[size_t(support)], esc_freq, table.precision);
      const int32_t v = symbols[i];
      const uint32_t mag = v < 0 ? uint32_t(-(int64_t(v))) : uint32_t(v);
      const uint32_t raw = (v < 0 ? 0x80000000u : 0u) | std::min(mag, 0x7FFFFFFFu);
      enc.encode_bits(raw, 32);
    }
  }
  enc.flush();
  return chunk;
}

std::vector<int32_t> rc_decode(const EncodedChunk& chunk, const std::vector<int32_t>& row_indexes,
                               const QuantizedCdfTable& table) {
  if (static_cast<int64_t>(row_indexes.size()) != chunk.symbol_count)
    fail(ErrorCode::Contract, "rc_decode: row_indexes length must equal symbol_count");
  std::vector<int32_t> out(row_indexes.size());
  if (row_indexes.empty()) return out;

  Decoder dec(chunk.bytes.data(), chunk.bytes.size());
  for (size_t i = 0; i < row_indexes.size(); ++i) {
    const CdfRow& row = row_for(table, row_indexes[i]);
    const int support = row.support();
    const uint32_t f = dec.decode_freq(table.precision);
    // last slot whose cumulative start is <= f
    const auto it = std::upper_bound(row.cdf.begin(), row.cdf.end(), f);
    int idx = static_cast<int>(it - row.cdf.begin()) - 1;
    idx = std::min(idx, support);  // corrupt streams may land past the escape slot
    dec.decode_update(row.cdf[size_t(idx)], row.cdf[size_t(idx) + 1] - row.cdf[size_t(idx)]);
    if (idx == support) {
      const uint32_t raw = dec.decode_bits(32);
      const int32_t mag = static_cast<int32_t>(raw & 0x7FFFFFFFu);
      out[i] = (raw & 0x80000000u) ? -mag : mag;
    } else {
      out[i] = row.offset + idx;
    }
  }
  return out;
}

}  // namespace nzc
