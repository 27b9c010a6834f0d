#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lomt {

/// Grayscale image as read from disk; px holds 8- or 16-bit samples widened
/// to uint16.
struct GrayImage {
  int width = 0;
  int height = 0;
  int bit_depth = 8;
  std::vector<uint16_t> px;
};

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<uint8_t>& px);
void write_png_gray16(const std::string& path, int width, int height,
                      const std::vector<uint16_t>& px);
GrayImage read_png_gray(const std::string& path);

}  // namespace lomt
