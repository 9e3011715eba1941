#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mhvae {

/// 16-bit grayscale raster, row-major.
struct Image16 {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint16_t> pixels;
};

void write_png16(const std::string& path, const Image16& image);
Image16 read_png16(const std::string& path);

}  // namespace mhvae
