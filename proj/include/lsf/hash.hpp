#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace lsf {

/// 64-bit FNV-1a content hash used for dataset and label-space fingerprints.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::byte> bytes) noexcept {
    for (std::byte b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Fnv1a& update(std::string_view text) noexcept {
    return update(std::as_bytes(std::span<const char>(text.data(), text.size())));
  }

  std::uint64_t value() const noexcept { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fingerprint_of(std::string_view text) { return Fnv1a{}.update(text).hex(); }

}  // namespace lsf
