#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/tensor.hpp"

// Little-endian binary helpers and PPM output shared by the file formats.
namespace flareon::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  void f32s(std::span<const float> vs) {
    buf_.reserve(buf_.size() + 4 * vs.size());
    for (float v : vs) f32(v);
  }

  const std::vector<char>& buffer() const noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const char> data, std::string source) : data_(data), source_(std::move(source)) {}

  std::string_view bytes(std::size_t n) {
    need(n, "bytes");
    std::string_view s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  void f32s(std::span<float> out) {
    need(4 * out.size(), "f32 payload");
    for (float& v : out) v = f32();
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  const std::string& source() const noexcept { return source_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw FormatError(detail::concat(source_, ": truncated ", what, " at offset ", pos_));
  }

  std::span<const char> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(detail::concat(path.string(), ": cannot open for reading"));
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(size);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  if (!in) throw FormatError(detail::concat(path.string(), ": read failed"));
  return buf;
}

inline void write_file(const std::filesystem::path& path, std::span<const char> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(detail::concat(path.string(), ": cannot open for writing"));
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error(detail::concat(path.string(), ": write failed"));
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span<const char>(text.data(), text.size()));
}

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Binary PPM (P6) from a C x H x W image in [0,1]. One channel is
/// written as gray.
inline std::vector<char> encode_ppm(std::span<const float> chw, std::size_t c, std::size_t h, std::size_t w) {
  expect(c == 1 || c == 3, "encode_ppm: need 1 or 3 channels, got ", c);
  expect(chw.size() == c * h * w, "encode_ppm: buffer size mismatch");
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t src = (c == 1 ? 0 : ch) * h * w + y * w + x;
        out.push_back(static_cast<char>(to_byte(chw[src])));
      }
  return out;
}

inline void write_ppm(const std::filesystem::path& path, std::span<const float> chw, std::size_t c, std::size_t h,
                      std::size_t w) {
  write_file(path, encode_ppm(chw, c, h, w));
}

}  // namespace flareon::io
