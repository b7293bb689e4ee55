#pragma once
// Binary PNM: P6 (RGB) and P5 (gray), 8- or 16-bit big-endian samples.

#include <cstdint>
#include <string>
#include <vector>

namespace hdc {

struct Image {
  int64_t width = 0, height = 0, channels = 1;
  int maxval = 255;
  std::vector<uint16_t> data;  // row-major, interleaved channels
};

Image read_pnm(const std::string& path);
/// Gray images become P5, three-channel images P6; 16-bit when maxval > 255.
void write_pnm(const std::string& path, const Image& image);

}  // namespace hdc
