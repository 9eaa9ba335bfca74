#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace histonet {

// 8-bit raster image, row-major with interleaved channels (gray or RGB).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;  // 1 or 3
  std::vector<std::uint8_t> pixels;

  static Image create(int height, int width, int channels, std::uint8_t fill = 0);

  std::uint8_t& at(int y, int x, int c) {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::size_t size() const { return pixels.size(); }
};

// Reads PGM (P5), PPM (P6), or PNG (8-bit, non-interlaced) by content
// sniffing. Missing/unreadable file -> IoError; malformed content -> DataError.
Image load_image(const std::string& path);

Image decode_png(const std::vector<std::uint8_t>& bytes);
Image decode_pnm(const std::vector<std::uint8_t>& bytes);

// Writers used by the synthetic generator and report heatmaps.
void save_pgm(const std::string& path, const Image& img);   // channels == 1
void save_ppm(const std::string& path, const Image& img);   // channels == 3
void save_image(const std::string& path, const Image& img); // dispatch on channels

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace histonet
