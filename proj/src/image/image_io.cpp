#include "histonet/image.hpp"

#include <zlib.h>

#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "histonet/errors.hpp"

namespace histonet {

Image Image::create(int height, int width, int channels, std::uint8_t fill) {
  if (height <= 0 || width <= 0) throw DataError("image extents must be positive");
  if (channels != 1 && channels != 3) throw DataError("image channels must be 1 or 3");
  Image img;
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.pixels.assign(static_cast<std::size_t>(height) * width * channels, fill);
  return img;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

namespace {

// ---- PNM (PGM P5 / PPM P6) ----

// Reads the next whitespace-delimited integer token, skipping '#' comments.
int pnm_next_int(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= b.size() || !std::isdigit(b[pos])) throw DataError("malformed PNM header");
  long value = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    value = value * 10 + (b[pos] - '0');
    if (value > 1000000000L) throw DataError("PNM header value out of range");
    ++pos;
  }
  return static_cast<int>(value);
}

}  // namespace

Image decode_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw DataError("not a binary PGM/PPM payload");
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  const int width = pnm_next_int(bytes, pos);
  const int height = pnm_next_int(bytes, pos);
  const int maxval = pnm_next_int(bytes, pos);
  if (width <= 0 || height <= 0) throw DataError("PNM extents must be positive");
  if (maxval <= 0 || maxval > 255) throw DataError("only 8-bit PNM supported (maxval <= 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError("malformed PNM header");
  ++pos;  // single whitespace byte separates header from raster
  const std::size_t need = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() - pos < need) throw DataError("PNM raster truncated");
  Image img = Image::create(height, width, channels);
  std::memcpy(img.pixels.data(), bytes.data() + pos, need);
  return img;
}

namespace {

std::uint32_t read_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

std::uint8_t paeth(std::uint8_t a, std::uint8_t b, std::uint8_t c) {
  const int p = static_cast<int>(a) + b - c;
  const int pa = std::abs(p - a);
  const int pb = std::abs(p - b);
  const int pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  static const std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSig, 8) != 0) {
    throw DataError("not a PNG payload");
  }
  std::size_t pos = 8;
  bool have_ihdr = false;
  std::uint32_t width = 0, height = 0;
  int bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> idat;
  std::vector<std::uint8_t> palette;  // RGB triples
  bool done = false;
  while (!done) {
    if (bytes.size() - pos < 12) throw DataError("PNG chunk truncated");
    const std::uint32_t len = read_be32(bytes.data() + pos);
    if (bytes.size() - pos < 12 + static_cast<std::size_t>(len)) {
      throw DataError("PNG chunk truncated");
    }
    const std::uint8_t* type = bytes.data() + pos + 4;
    const std::uint8_t* data = bytes.data() + pos + 8;
    const std::uint32_t crc_stored = read_be32(data + len);
    const std::uint32_t crc_calc = static_cast<std::uint32_t>(
        crc32(crc32(0L, type, 4), data, static_cast<uInt>(len)));
    if (crc_stored != crc_calc) throw DataError("PNG chunk CRC mismatch");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw DataError("bad IHDR length");
      width = read_be32(data);
      height = read_be32(data + 4);
      bit_depth = data[8];
      color_type = data[9];
      const int interlace = data[12];
      if (data[10] != 0 || data[11] != 0) throw DataError("unsupported PNG compression/filter");
      if (interlace != 0) throw DataError("interlaced PNG unsupported");
      if (bit_depth != 8) throw DataError("only 8-bit PNG supported");
      if (color_type != 0 && color_type != 2 && color_type != 3 && color_type != 4 &&
          color_type != 6) {
        throw DataError("unsupported PNG color type");
      }
      if (width == 0 || height == 0 || width > 1u << 20 || height > 1u << 20) {
        throw DataError("PNG extents out of range");
      }
      have_ihdr = true;
    } else if (std::memcmp(type, "PLTE", 4) == 0) {
      if (len % 3 != 0 || len == 0) throw DataError("bad PLTE length");
      palette.assign(data, data + len);
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      done = true;
    }
    // Ancillary chunks are skipped.
    pos += 12 + len;
  }
  if (!have_ihdr) throw DataError("PNG missing IHDR");
  if (idat.empty()) throw DataError("PNG missing IDAT");

  const int src_ch = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 3 ? 1
                     : color_type == 4 ? 2 : 4;
  const std::size_t stride = static_cast<std::size_t>(width) * src_ch;
  const std::size_t raw_size = (stride + 1) * height;
  std::vector<std::uint8_t> raw(raw_size);
  uLongf out_len = static_cast<uLongf>(raw_size);
  const int zrc = uncompress(raw.data(), &out_len, idat.data(), static_cast<uLong>(idat.size()));
  if (zrc != Z_OK || out_len != raw_size) throw DataError("PNG inflate failed");

  // Undo per-scanline filters in place (previous row already reconstructed).
  std::vector<std::uint8_t> recon(static_cast<std::size_t>(height) * stride);
  const int bpp = src_ch;  // bytes per pixel at depth 8
  for (std::uint32_t y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* cur = recon.data() + y * stride;
    const std::uint8_t* prev = y > 0 ? recon.data() + (y - 1) * stride : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const std::uint8_t left = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
      const std::uint8_t up = prev != nullptr ? prev[i] : 0;
      const std::uint8_t ul =
          (prev != nullptr && i >= static_cast<std::size_t>(bpp)) ? prev[i - bpp] : 0;
      switch (filter) {
        case 0: cur[i] = src[i]; break;
        case 1: cur[i] = static_cast<std::uint8_t>(src[i] + left); break;
        case 2: cur[i] = static_cast<std::uint8_t>(src[i] + up); break;
        case 3: cur[i] = static_cast<std::uint8_t>(src[i] + ((left + up) / 2)); break;
        case 4: cur[i] = static_cast<std::uint8_t>(src[i] + paeth(left, up, ul)); break;
        default: throw DataError("unknown PNG filter type");
      }
    }
  }

  // Collapse to gray or RGB (alpha dropped, palette expanded).
  const int out_ch = (color_type == 0 || color_type == 4) ? 1 : 3;
  Image img = Image::create(static_cast<int>(height), static_cast<int>(width), out_ch);
  for (std::uint32_t y = 0; y < height; ++y) {
    for (std::uint32_t x = 0; x < width; ++x) {
      const std::uint8_t* px = recon.data() + y * stride + static_cast<std::size_t>(x) * src_ch;
      std::uint8_t* dst =
          img.pixels.data() + (static_cast<std::size_t>(y) * width + x) * out_ch;
      switch (color_type) {
        case 0:
        case 4: dst[0] = px[0]; break;
        case 2:
        case 6:
          dst[0] = px[0];
          dst[1] = px[1];
          dst[2] = px[2];
          break;
        case 3: {
          const std::size_t idx = static_cast<std::size_t>(px[0]) * 3;
          if (idx + 2 >= palette.size()) throw DataError("PNG palette index out of range");
          dst[0] = palette[idx];
          dst[1] = palette[idx + 1];
          dst[2] = palette[idx + 2];
          break;
        }
        default: break;
      }
    }
  }
  return img;
}

Image load_image(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P') return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes);
  throw DataError("unrecognized image format: " + path);
}

namespace {

void save_pnm(const std::string& path, const Image& img, bool color) {
  if (img.channels != (color ? 3 : 1)) {
    throw DataError(std::string("image is not ") + (color ? "3" : "1") + "-channel");
  }
  std::vector<std::uint8_t> out;
  const std::string header = std::string(color ? "P6" : "P5") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) +
                             "\n255\n";
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  write_file_bytes(path, out);
}

}  // namespace

void save_pgm(const std::string& path, const Image& img) { save_pnm(path, img, false); }
void save_ppm(const std::string& path, const Image& img) { save_pnm(path, img, true); }

void save_image(const std::string& path, const Image& img) {
  if (img.channels == 1) {
    save_pgm(path, img);
  } else {
    save_ppm(path, img);
  }
}

}  // namespace histonet
