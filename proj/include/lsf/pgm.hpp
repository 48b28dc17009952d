#pragma once

// Binary Netpbm greymap (P5) codec. 16-bit payloads are big-endian.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "lsf/array.hpp"
#include "lsf/error.hpp"

namespace lsf {

using Image16 = Array2D<std::uint16_t>;

namespace detail {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  unsigned long number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    unsigned long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + static_cast<unsigned long>(bytes_[pos_] - '0');
      if (value > 1'000'000'000UL) throw Error(Errc::MalformedHeader, std::string(what) + " is too large");
      ++pos_;
    }
    if (pos_ == start) throw Error(Errc::MalformedHeader, std::string("expected ") + what);
    return value;
  }

  std::size_t pos() const noexcept { return pos_; }
  void advance(std::size_t n) noexcept { pos_ += n; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Image16 decode_pgm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw Error(Errc::MalformedHeader, "missing P5 magic");
  }
  detail::HeaderReader reader(bytes);
  reader.advance(2);
  const auto width = reader.number("width");
  const auto height = reader.number("height");
  const auto maxval = reader.number("maxval");
  if (maxval == 0 || maxval > 65535) throw Error(Errc::MalformedHeader, "maxval out of range");
  if (reader.pos() >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[reader.pos()]))) {
    throw Error(Errc::MalformedHeader, "header must end with a single whitespace byte");
  }
  reader.advance(1);

  const std::size_t bytes_per_sample = maxval < 256 ? 1 : 2;
  const std::size_t needed = static_cast<std::size_t>(width) * height * bytes_per_sample;
  if (bytes.size() - reader.pos() < needed) {
    throw Error(Errc::TruncatedData, "expected " + std::to_string(needed) + " payload bytes, found " +
                                         std::to_string(bytes.size() - reader.pos()));
  }
  Image16 out(height, width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + reader.pos());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint16_t v =
        bytes_per_sample == 1 ? p[i] : static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
    if (v > maxval) throw Error(Errc::MalformedHeader, "sample exceeds maxval");
    out.data()[i] = v;
  }
  return out;
}

/// Encode with maxval 255 when every value fits in a byte, 65535 otherwise.
inline std::string encode_pgm(const Image16& image) {
  std::uint16_t peak = 0;
  for (auto v : image) peak = std::max(peak, v);
  const bool wide = peak > 255;
  std::string out = "P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n" +
                    (wide ? "65535" : "255") + "\n";
  const std::size_t header = out.size();
  out.resize(header + image.size() * (wide ? 2 : 1));
  for (std::size_t i = 0; i < image.size(); ++i) {
    const std::uint16_t v = image.data()[i];
    if (wide) {
      out[header + 2 * i] = static_cast<char>(v >> 8);
      out[header + 2 * i + 1] = static_cast<char>(v & 0xff);
    } else {
      out[header + i] = static_cast<char>(v);
    }
  }
  return out;
}

inline Image16 read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_pgm(ss.str());
  } catch (const Error& e) {
    throw Error(e.code(), "'" + path.string() + "': " + e.what());
  }
}

inline void write_pgm(const std::filesystem::path& path, const Image16& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_pgm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "write to '" + path.string() + "' failed");
}

}  // namespace lsf
