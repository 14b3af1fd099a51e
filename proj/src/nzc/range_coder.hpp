#pragma once

// Byte-oriented range coder over static 16-bit quantized CDF tables.
//
// Stream layout (kept bit-exact; see docs/bitstream.md for the full
// interop description):
//   - encoder state: low = 0 (64-bit), range = 0xFFFFFFFF (32-bit),
//     cache = 0, cache_size = 1; the first emitted byte is therefore a
//     leading zero (or the ripple of a carry).
//   - symbol coding: range /= 2^16; low += cum * range; range *= freq;
//     renormalize while range < 2^24 by shifting the top byte of low out
//     through the carry-counting cache.
//   - escape symbols occupy the last CDF slot of every row and are followed
//     by 32 raw bits (sign bit, then 31-bit magnitude) in bypass mode
//     (range >>= 1 per bit).
//   - flush: five cache shifts; decoders prime their 32-bit code window by
//     consuming five bytes (the first is the leading zero).
// An n-symbol payload is decoded with exactly the bytes the encoder
// emitted, so truncation is always detectable.

#include <cstdint>
#include <vector>

#include "nzc/entropy.hpp"

namespace nzc {

struct EncodedChunk {
  std::vector<uint8_t> bytes;
  int64_t symbol_count = 0;
};

// Encodes symbols[i] with the CDF row row_indexes[i]. Out-of-support values
// go through the escape slot plus 32 raw bits. Empty input yields an empty
// payload.
EncodedChunk rc_encode(const std::vector<int32_t>& symbols,
                       const std::vector<int32_t>& row_indexes, const QuantizedCdfTable& table);

// Exact inverse of rc_encode given the same table and row sequence.
std::vector<int32_t> rc_decode(const EncodedChunk& chunk, const std::vector<int32_t>& row_indexes,
                               const QuantizedCdfTable& table);

}  // namespace nzc
