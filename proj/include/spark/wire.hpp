#pragma once

// Wire encoding of CompressedJacobian frames ("SPKJ"). Little-endian:
//
//   magic        4   "SPKJ"
//   version      u16 (kWireVersion)
//   client id    u32
//   rows N       u32
//   classes C    u16
//   layer count  u16
//   per layer    u16 name length, name bytes (utf-8), u32 d_l, u32 k_l
//   codec tag    u8  (0 f64, 1 f32, 2 f16, 3 i8)
//   i8 scales    f32 per layer, present only for codec i8
//   indices      u32 per row (original batch positions)
//   payload      per layer, N*C*k_l entries in (n, c, m) order
//
// A full neighbor message is one frame followed by N*C logits (f64 under the
// f64 codec, f32 otherwise) and N u8 labels; see comm_bytes().

#include <cstdint>
#include <span>
#include <vector>

#include "spark/projection.hpp"

namespace spark::proj {

inline constexpr std::uint16_t kWireVersion = 1;
/// Fixed part of the header (magic..layer count plus the codec tag).
inline constexpr std::size_t kFixedHeaderBytes = 4 + 2 + 4 + 4 + 2 + 2 + 1;

struct WireStats {
  std::size_t clamped = 0;  // f16 entries clamped to +-65504
};

/// IEEE-754 binary16, round to nearest even. Values that would overflow are
/// clamped to +-max-finite and flagged through `clamped`.
std::uint16_t to_half(double x, bool& clamped) noexcept;
double from_half(std::uint16_t h) noexcept;

/// Header bytes for the given frame, excluding the payload.
std::size_t header_bytes(const CompressedJacobian& cj, Codec codec);
std::size_t payload_bytes(const CompressedJacobian& cj, Codec codec);
/// header_bytes + payload_bytes; equals encode_wire(cj, codec).size().
std::size_t frame_bytes(const CompressedJacobian& cj, Codec codec);

std::vector<std::uint8_t> encode_wire(const CompressedJacobian& cj, Codec codec, WireStats* stats = nullptr);
CompressedJacobian decode_wire(std::span<const std::uint8_t> bytes);

/// Logits ship as f64 under the f64 codec and as f32 otherwise; labels as u8,
/// one per row.
std::size_t logits_bytes(std::size_t logits_rows, std::size_t num_classes, Codec codec) noexcept;

/// Exact bytes of one neighbor message: frame (in cj.codec) + logits + labels.
std::size_t comm_bytes(const CompressedJacobian& cj, std::size_t logits_rows, std::size_t num_classes);

}  // namespace spark::proj
