#include "spark/wire.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "spark/errors.hpp"

namespace spark::proj {

std::uint16_t to_half(double x, bool& clamped) noexcept {
  clamped = false;
  if (std::isnan(x)) return 0x7E00;
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0x0000;
  const double a = std::fabs(x);
  constexpr std::uint16_t kMaxFinite = 0x7BFF;

  if (a < 0x1.0p-14) {
    // Subnormal range: units of 2^-24. A result of 1024 is the smallest normal.
    const auto m = static_cast<std::uint16_t>(std::nearbyint(a * 0x1.0p24));
    return static_cast<std::uint16_t>(sign | m);
  }
  int exp2 = 0;
  const double frac = std::frexp(a, &exp2);  // a = frac * 2^exp2, frac in [0.5, 1)
  int e = exp2 - 1;
  auto m = static_cast<std::uint32_t>(std::nearbyint((frac * 2.0 - 1.0) * 1024.0));
  if (m == 1024) {
    m = 0;
    ++e;
  }
  if (e > 15 || std::isinf(a)) {
    clamped = true;
    return static_cast<std::uint16_t>(sign | kMaxFinite);
  }
  return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>((e + 15) << 10) | m);
}

double from_half(std::uint16_t h) noexcept {
  const bool negative = (h & 0x8000) != 0;
  const int e = (h >> 10) & 0x1F;
  const int m = h & 0x3FF;
  double v = 0.0;
  if (e == 0) {
    v = std::ldexp(static_cast<double>(m), -24);
  } else if (e == 31) {
    v = m == 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
  } else {
    v = std::ldexp(1.0 + static_cast<double>(m) / 1024.0, e - 15);
  }
  return negative ? -v : v;
}

std::size_t header_bytes(const CompressedJacobian& cj, Codec codec) {
  std::size_t n = kFixedHeaderBytes;
  for (const auto& name : cj.layer_names) n += 2 + name.size() + 4 + 4;
  if (codec == Codec::i8) n += 4 * cj.layers.size();
  n += 4 * cj.sample_count;
  return n;
}

std::size_t payload_bytes(const CompressedJacobian& cj, Codec codec) {
  return cj.sample_count * cj.num_classes * cj.width() * bytes_per_entry(codec);
}

std::size_t frame_bytes(const CompressedJacobian& cj, Codec codec) {
  return header_bytes(cj, codec) + payload_bytes(cj, codec);
}

std::size_t logits_bytes(std::size_t logits_rows, std::size_t num_classes, Codec codec) noexcept {
  return logits_rows * num_classes * (codec == Codec::f64 ? 8 : 4) + logits_rows;
}

std::size_t comm_bytes(const CompressedJacobian& cj, std::size_t logits_rows, std::size_t num_classes) {
  return frame_bytes(cj, cj.codec) + logits_bytes(logits_rows, num_classes, cj.codec);
}

namespace {

class Writer {
 public:
  explicit Writer(std::size_t reserve) { buf_.reserve(reserve); }

  template <typename T>
  void put(T v) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_f64(double d) { put(std::bit_cast<std::uint64_t>(d)); }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ParseError("truncated SPKJ frame", pos_);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_wire(const CompressedJacobian& cj, Codec codec, WireStats* stats) {
  if (cj.layers.size() != cj.layer_names.size() || cj.layers.size() != cj.layer_dims.size()) {
    throw ContractViolation("encode_wire: inconsistent layer table");
  }
  if (cj.sample_indices.size() != cj.sample_count) {
    throw ContractViolation("encode_wire: sample index count differs from row count");
  }
  Writer w(frame_bytes(cj, codec));
  w.put_bytes("SPKJ");
  w.put<std::uint16_t>(kWireVersion);
  w.put<std::uint32_t>(cj.owner);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cj.sample_count));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(cj.num_classes));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(cj.layers.size()));
  for (std::size_t l = 0; l < cj.layers.size(); ++l) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(cj.layer_names[l].size()));
    w.put_bytes(cj.layer_names[l]);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cj.layer_dims[l]));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cj.layers[l].cols()));
  }
  w.put<std::uint8_t>(static_cast<std::uint8_t>(codec));

  std::vector<float> scales(cj.layers.size(), 0.0f);
  if (codec == Codec::i8) {
    for (std::size_t l = 0; l < cj.layers.size(); ++l) {
      const double max_abs = cj.layers[l].size() == 0 ? 0.0 : cj.layers[l].cwiseAbs().maxCoeff();
      scales[l] = static_cast<float>(max_abs / 127.0);
      w.put_f32(scales[l]);
    }
  }
  for (const auto idx : cj.sample_indices) w.put<std::uint32_t>(idx);

  std::size_t clamped = 0;
  for (std::size_t l = 0; l < cj.layers.size(); ++l) {
    const Matrix& m = cj.layers[l];
    const double scale = scales[l];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double x = m(r, c);
        switch (codec) {
          case Codec::f64: w.put_f64(x); break;
          case Codec::f32: w.put_f32(static_cast<float>(x)); break;
          case Codec::f16: {
            bool hit = false;
            w.put<std::uint16_t>(to_half(x, hit));
            clamped += hit ? 1 : 0;
            break;
          }
          case Codec::i8: {
            const double q = scale > 0.0 ? std::nearbyint(x / scale) : 0.0;
            w.put<std::int8_t>(static_cast<std::int8_t>(std::clamp(q, -127.0, 127.0)));
            break;
          }
        }
      }
    }
  }
  if (stats != nullptr) stats->clamped += clamped;
  return w.take();
}

CompressedJacobian decode_wire(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.get_string(4) != "SPKJ") throw ParseError("bad SPKJ magic", 0);
  const auto version = r.get<std::uint16_t>();
  if (version != kWireVersion) {
    throw ProtocolError("unsupported SPKJ version " + std::to_string(version));
  }
  CompressedJacobian cj;
  cj.owner = r.get<std::uint32_t>();
  cj.sample_count = r.get<std::uint32_t>();
  cj.num_classes = r.get<std::uint16_t>();
  const auto layer_count = r.get<std::uint16_t>();
  std::vector<std::size_t> widths;
  for (std::uint16_t l = 0; l < layer_count; ++l) {
    const auto name_len = r.get<std::uint16_t>();
    cj.layer_names.push_back(r.get_string(name_len));
    cj.layer_dims.push_back(r.get<std::uint32_t>());
    widths.push_back(r.get<std::uint32_t>());
  }
  const std::size_t codec_pos = r.pos();
  const auto tag = r.get<std::uint8_t>();
  if (tag > static_cast<std::uint8_t>(Codec::i8)) throw ParseError("unknown codec tag " + std::to_string(tag), codec_pos);
  cj.codec = static_cast<Codec>(tag);

  std::vector<double> scales(layer_count, 0.0);
  if (cj.codec == Codec::i8) {
    for (auto& s : scales) s = r.get_f32();
  }
  // Sizes come from the header; check them against the buffer before allocating.
  if (r.remaining() / 4 < cj.sample_count) {
    throw ParseError("SPKJ header declares " + std::to_string(cj.sample_count) + " samples, frame is too short",
                     r.pos());
  }
  cj.sample_indices.resize(cj.sample_count);
  for (auto& idx : cj.sample_indices) idx = r.get<std::uint32_t>();

  unsigned __int128 expected = 0;
  for (const auto w : widths) {
    expected += static_cast<unsigned __int128>(cj.sample_count) * cj.num_classes * w * bytes_per_entry(cj.codec);
  }
  if (static_cast<unsigned __int128>(r.remaining()) != expected) {
    throw ParseError("SPKJ payload holds " + std::to_string(r.remaining()) + " bytes, header implies " +
                         (expected > SIZE_MAX ? std::string("more") : std::to_string(static_cast<std::size_t>(expected))),
                     r.pos());
  }

  const auto rows = static_cast<Eigen::Index>(cj.sample_count * cj.num_classes);
  for (std::uint16_t l = 0; l < layer_count; ++l) {
    Matrix m(rows, static_cast<Eigen::Index>(widths[l]));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        switch (cj.codec) {
          case Codec::f64: m(i, j) = r.get_f64(); break;
          case Codec::f32: m(i, j) = r.get_f32(); break;
          case Codec::f16: m(i, j) = from_half(r.get<std::uint16_t>()); break;
          case Codec::i8: m(i, j) = scales[l] * r.get<std::int8_t>(); break;
        }
      }
    }
    cj.layers.push_back(std::move(m));
  }
  return cj;
}

}  // namespace spark::proj
