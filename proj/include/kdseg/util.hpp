#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace kdseg {

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;

/// 64-bit FNV-1a; stable across platforms, used for run-directory names and
/// parameter fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

std::string hex64(std::uint64_t v);

/// UTC timestamp, ISO-8601 with millisecond precision.
std::string utc_timestamp();

}  // namespace kdseg
