#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace kdseg {

/// 8-bit interleaved image (HWC).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

/// Reads a PNG converting to `channels` (1 or 3). Throws IoError.
Image8 read_png(const std::filesystem::path& path, std::size_t channels);

void write_png(const std::filesystem::path& path, const Image8& image);

}  // namespace kdseg
