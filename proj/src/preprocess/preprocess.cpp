#include "histonet/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include <json.hpp>

#include "histonet/errors.hpp"
#include "histonet/rng.hpp"

namespace histonet::preprocess {

namespace {

std::uint8_t clamp_u8(double v) {
  const double r = std::floor(v + 0.5);  // round half up
  if (r <= 0.0) return 0;
  if (r >= 255.0) return 255;
  return static_cast<std::uint8_t>(r);
}

int clamp_int(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

void AugmentSpec::validate() const {
  if (rotation_degrees.empty()) throw ConfigError("augment rotation set must be non-empty");
  for (int r : rotation_degrees) {
    if (r != 0 && r != 90 && r != 180 && r != 270) {
      throw ConfigError("augment rotations must be multiples of 90 in [0, 270]");
    }
  }
  if (!(zoom_lo >= 0.8 && zoom_lo <= zoom_hi && zoom_hi <= 1.2)) {
    throw ConfigError("augment zoom range must be well-ordered within [0.8, 1.2]");
  }
  if (!(brightness_delta >= 0.0 && brightness_delta <= 0.2)) {
    throw ConfigError("augment brightness delta must lie in [0, 0.2]");
  }
}

bool AugmentSpec::is_identity() const {
  return rotation_degrees == std::vector<int>{0} && !horizontal_flip && !vertical_flip &&
         zoom_lo == 1.0 && zoom_hi == 1.0 && brightness_delta == 0.0;
}

void PreprocessConfig::validate() const {
  if (pad < 0) throw ConfigError("pad must be >= 0");
  if (median_kernel < 1 || median_kernel % 2 == 0) {
    throw ConfigError("median kernel must be an odd integer >= 1");
  }
  if (clahe_tile_rows < 1 || clahe_tile_cols < 1) throw ConfigError("tile grid must be >= 1x1");
  if (!(clahe_clip_limit > 1.0)) throw ConfigError("clip limit must be > 1");
  if (target_h < 1 || target_w < 1) throw ConfigError("target size must be positive");
  augment.validate();
}

std::string PreprocessConfig::to_json() const {
  nlohmann::json j;
  j["pad"] = pad;
  j["median_kernel"] = median_kernel;
  j["clahe_tiles"] = {clahe_tile_rows, clahe_tile_cols};
  j["clahe_clip_limit"] = clahe_clip_limit;
  j["target_size"] = {target_h, target_w};
  j["seed"] = seed;
  j["augment"] = {{"rotation_degrees", augment.rotation_degrees},
                  {"horizontal_flip", augment.horizontal_flip},
                  {"vertical_flip", augment.vertical_flip},
                  {"zoom_range", {augment.zoom_lo, augment.zoom_hi}},
                  {"brightness_delta", augment.brightness_delta}};
  return j.dump();
}

PreprocessConfig PreprocessConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  PreprocessConfig cfg;
  cfg.pad = j.value("pad", cfg.pad);
  cfg.median_kernel = j.value("median_kernel", cfg.median_kernel);
  if (j.contains("clahe_tiles")) {
    cfg.clahe_tile_rows = j["clahe_tiles"].at(0).get<int>();
    cfg.clahe_tile_cols = j["clahe_tiles"].at(1).get<int>();
  }
  cfg.clahe_clip_limit = j.value("clahe_clip_limit", cfg.clahe_clip_limit);
  if (j.contains("target_size")) {
    cfg.target_h = j["target_size"].at(0).get<int>();
    cfg.target_w = j["target_size"].at(1).get<int>();
  }
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    cfg.augment.rotation_degrees =
        a.value("rotation_degrees", cfg.augment.rotation_degrees);
    cfg.augment.horizontal_flip = a.value("horizontal_flip", cfg.augment.horizontal_flip);
    cfg.augment.vertical_flip = a.value("vertical_flip", cfg.augment.vertical_flip);
    if (a.contains("zoom_range")) {
      cfg.augment.zoom_lo = a["zoom_range"].at(0).get<double>();
      cfg.augment.zoom_hi = a["zoom_range"].at(1).get<double>();
    }
    cfg.augment.brightness_delta = a.value("brightness_delta", cfg.augment.brightness_delta);
  }
  cfg.validate();
  return cfg;
}

Image zero_pad(const Image& img, int pad) {
  if (pad < 0) throw ConfigError("pad must be >= 0");
  if (pad == 0) return img;
  Image out = Image::create(img.height + 2 * pad, img.width + 2 * pad, img.channels, 0);
  for (int y = 0; y < img.height; ++y) {
    std::copy_n(&img.pixels[static_cast<std::size_t>(y) * img.width * img.channels],
                static_cast<std::size_t>(img.width) * img.channels,
                &out.pixels[(static_cast<std::size_t>(y + pad) * out.width + pad) *
                            img.channels]);
  }
  return out;
}

Image median_filter(const Image& img, int k) {
  if (k < 1 || k % 2 == 0) throw ConfigError("median kernel must be an odd integer >= 1");
  if (k == 1) return img;
  Image out = Image::create(img.height, img.width, img.channels);
  const int half = k / 2;
  std::vector<std::uint8_t> window(static_cast<std::size_t>(k) * k);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        std::size_t n = 0;
        for (int dy = -half; dy <= half; ++dy) {
          const int sy = clamp_int(y + dy, 0, img.height - 1);  // edge replication
          for (int dx = -half; dx <= half; ++dx) {
            const int sx = clamp_int(x + dx, 0, img.width - 1);
            window[n++] = img.at(sy, sx, c);
          }
        }
        auto mid = window.begin() + static_cast<std::ptrdiff_t>(n / 2);
        std::nth_element(window.begin(), mid, window.begin() + static_cast<std::ptrdiff_t>(n));
        out.at(y, x, c) = *mid;
      }
    }
  }
  return out;
}

namespace {

// Per-tile equalization mapping: real-valued LUT over the 256 input levels.
using TileLut = std::array<double, 256>;

TileLut build_tile_lut(const Image& gray, std::int64_t y0, std::int64_t y1, std::int64_t x0,
                       std::int64_t x1, double clip_limit) {
  TileLut lut{};
  std::array<double, 256> hist{};
  for (std::int64_t y = y0; y < y1; ++y) {
    for (std::int64_t x = x0; x < x1; ++x) {
      hist[gray.at(static_cast<int>(y), static_cast<int>(x), 0)] += 1.0;
    }
  }
  const double area = static_cast<double>((y1 - y0) * (x1 - x0));
  int occupied = 0;
  for (double h : hist) {
    if (h > 0.0) ++occupied;
  }
  if (occupied <= 1) {
    // Single-level tile: equalization has nothing to spread; keep identity so
    // constant regions are exact fixed points.
    for (int b = 0; b < 256; ++b) lut[static_cast<std::size_t>(b)] = static_cast<double>(b);
    return lut;
  }
  const double clip = clip_limit * area / 256.0;
  auto clip_pass = [&]() {
    double excess = 0.0;
    for (double& h : hist) {
      if (h > clip) {
        excess += h - clip;
        h = clip;
      }
    }
    return excess;
  };
  double excess = clip_pass();
  int guard = 0;
  while (excess >= 1.0) {
    const double share = excess / 256.0;
    for (double& h : hist) h += share;
    excess = clip_pass();
    if (++guard > 10000) throw NumericError("clahe redistribution did not converge");
  }
  const double share = excess / 256.0;  // residual below one count: spread, no re-clip
  for (double& h : hist) h += share;

  double cdf = 0.0;
  for (int b = 0; b < 256; ++b) {
    cdf += hist[static_cast<std::size_t>(b)];
    lut[static_cast<std::size_t>(b)] = cdf * 255.0 / area;
  }
  return lut;
}

// Index pair + blend weight against a sorted list of tile centers, with edge
// replication outside the first/last center.
void center_blend(const std::vector<double>& centers, double pos, int& i0, int& i1, double& w) {
  const int n = static_cast<int>(centers.size());
  if (pos <= centers.front() || n == 1) {
    i0 = i1 = 0;
    w = 0.0;
    return;
  }
  if (pos >= centers.back()) {
    i0 = i1 = n - 1;
    w = 0.0;
    return;
  }
  int i = 0;
  while (i + 1 < n && centers[static_cast<std::size_t>(i + 1)] <= pos) ++i;
  i0 = i;
  i1 = i + 1;
  w = (pos - centers[static_cast<std::size_t>(i0)]) /
      (centers[static_cast<std::size_t>(i1)] - centers[static_cast<std::size_t>(i0)]);
}

Image clahe_gray(const Image& gray, int tile_rows, int tile_cols, double clip_limit) {
  const int h = gray.height;
  const int w = gray.width;
  std::vector<TileLut> luts(static_cast<std::size_t>(tile_rows) * tile_cols);
  std::vector<double> cy(static_cast<std::size_t>(tile_rows));
  std::vector<double> cx(static_cast<std::size_t>(tile_cols));
  std::vector<std::int64_t> ty0(static_cast<std::size_t>(tile_rows)),
      ty1(static_cast<std::size_t>(tile_rows));
  std::vector<std::int64_t> tx0(static_cast<std::size_t>(tile_cols)),
      tx1(static_cast<std::size_t>(tile_cols));
  for (int i = 0; i < tile_rows; ++i) {
    ty0[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(i) * h / tile_rows;
    ty1[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(i + 1) * h / tile_rows;
    cy[static_cast<std::size_t>(i)] =
        static_cast<double>(ty0[static_cast<std::size_t>(i)]) +
        static_cast<double>(ty1[static_cast<std::size_t>(i)] - ty0[static_cast<std::size_t>(i)] -
                            1) /
            2.0;
  }
  for (int j = 0; j < tile_cols; ++j) {
    tx0[static_cast<std::size_t>(j)] = static_cast<std::int64_t>(j) * w / tile_cols;
    tx1[static_cast<std::size_t>(j)] = static_cast<std::int64_t>(j + 1) * w / tile_cols;
    cx[static_cast<std::size_t>(j)] =
        static_cast<double>(tx0[static_cast<std::size_t>(j)]) +
        static_cast<double>(tx1[static_cast<std::size_t>(j)] - tx0[static_cast<std::size_t>(j)] -
                            1) /
            2.0;
  }
  for (int i = 0; i < tile_rows; ++i) {
    for (int j = 0; j < tile_cols; ++j) {
      luts[static_cast<std::size_t>(i * tile_cols + j)] =
          build_tile_lut(gray, ty0[static_cast<std::size_t>(i)], ty1[static_cast<std::size_t>(i)],
                         tx0[static_cast<std::size_t>(j)], tx1[static_cast<std::size_t>(j)],
                         clip_limit);
    }
  }

  Image out = Image::create(h, w, 1);
  std::vector<int> ri0(static_cast<std::size_t>(h)), ri1(static_cast<std::size_t>(h));
  std::vector<double> rw(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) {
    center_blend(cy, static_cast<double>(y), ri0[static_cast<std::size_t>(y)],
                 ri1[static_cast<std::size_t>(y)], rw[static_cast<std::size_t>(y)]);
  }
  std::vector<int> ci0(static_cast<std::size_t>(w)), ci1(static_cast<std::size_t>(w));
  std::vector<double> cw(static_cast<std::size_t>(w));
  for (int x = 0; x < w; ++x) {
    center_blend(cx, static_cast<double>(x), ci0[static_cast<std::size_t>(x)],
                 ci1[static_cast<std::size_t>(x)], cw[static_cast<std::size_t>(x)]);
  }
  for (int y = 0; y < h; ++y) {
    const double wy = rw[static_cast<std::size_t>(y)];
    const int iy0 = ri0[static_cast<std::size_t>(y)];
    const int iy1 = ri1[static_cast<std::size_t>(y)];
    for (int x = 0; x < w; ++x) {
      const double wx = cw[static_cast<std::size_t>(x)];
      const int ix0 = ci0[static_cast<std::size_t>(x)];
      const int ix1 = ci1[static_cast<std::size_t>(x)];
      const std::uint8_t v = gray.at(y, x, 0);
      const double val =
          (1.0 - wy) * (1.0 - wx) * luts[static_cast<std::size_t>(iy0 * tile_cols + ix0)][v] +
          (1.0 - wy) * wx * luts[static_cast<std::size_t>(iy0 * tile_cols + ix1)][v] +
          wy * (1.0 - wx) * luts[static_cast<std::size_t>(iy1 * tile_cols + ix0)][v] +
          wy * wx * luts[static_cast<std::size_t>(iy1 * tile_cols + ix1)][v];
      out.at(y, x, 0) = clamp_u8(val);
    }
  }
  return out;
}

std::uint8_t bt601_luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return clamp_u8(0.299 * r + 0.587 * g + 0.114 * b);
}

}  // namespace

Image clahe(const Image& img, int tile_rows, int tile_cols, double clip_limit) {
  if (tile_rows < 1 || tile_cols < 1) throw ConfigError("tile grid must be >= 1x1");
  if (tile_rows > img.height || tile_cols > img.width) {
    throw ConfigError("tile grid exceeds image extents");
  }
  if (!(clip_limit > 1.0)) throw ConfigError("clip limit must be > 1");
  if (img.channels == 1) return clahe_gray(img, tile_rows, tile_cols, clip_limit);

  // Color: equalize BT.601 luma, re-apply the luma shift per channel so
  // chroma offsets are preserved, clamping into range.
  Image luma = Image::create(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      luma.at(y, x, 0) = bt601_luma(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    }
  }
  const Image eq = clahe_gray(luma, tile_rows, tile_cols, clip_limit);
  Image out = Image::create(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const int delta = static_cast<int>(eq.at(y, x, 0)) - static_cast<int>(luma.at(y, x, 0));
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) =
            static_cast<std::uint8_t>(clamp_int(static_cast<int>(img.at(y, x, c)) + delta, 0, 255));
      }
    }
  }
  return out;
}

Tensor normalize(const Image& img) {
  Tensor t = Tensor::zeros({img.channels, img.height, img.width});
  double* p = t.values_mut().data();
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        *p++ = static_cast<double>(img.at(y, x, c)) / 255.0;
      }
    }
  }
  return t;
}

Image denormalize(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("denormalize expects (channels, H, W)");
  const int ch = static_cast<int>(t.dim(0));
  const int h = static_cast<int>(t.dim(1));
  const int w = static_cast<int>(t.dim(2));
  if (ch != 1 && ch != 3) throw ShapeError("denormalize expects 1 or 3 channels");
  Image img = Image::create(h, w, ch);
  const double* p = t.values().data();
  for (int c = 0; c < ch; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        img.at(y, x, c) = clamp_u8(*p++ * 255.0);
      }
    }
  }
  return img;
}

namespace {

double sample_bilinear(const Image& img, double sy, double sx, int c) {
  const int h = img.height;
  const int w = img.width;
  sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
  sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double dy = sy - y0;
  const double dx = sx - x0;
  return (1.0 - dy) * (1.0 - dx) * img.at(y0, x0, c) + (1.0 - dy) * dx * img.at(y0, x1, c) +
         dy * (1.0 - dx) * img.at(y1, x0, c) + dy * dx * img.at(y1, x1, c);
}

Image rotate_quarter(const Image& img, int degrees) {
  if (degrees == 0) return img;
  const int h = img.height;
  const int w = img.width;
  if (degrees == 180) {
    Image out = Image::create(h, w, img.channels);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < img.channels; ++c) {
          out.at(y, x, c) = img.at(h - 1 - y, w - 1 - x, c);
        }
      }
    }
    return out;
  }
  Image out = Image::create(w, h, img.channels);
  for (int y = 0; y < w; ++y) {
    for (int x = 0; x < h; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = degrees == 90 ? img.at(h - 1 - x, y, c)   // clockwise
                                        : img.at(x, w - 1 - y, c);  // 270 = counter-clockwise
      }
    }
  }
  return out;
}

Image flip_image(const Image& img, bool horizontal) {
  Image out = Image::create(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = horizontal ? img.at(y, img.width - 1 - x, c)
                                     : img.at(img.height - 1 - y, x, c);
      }
    }
  }
  return out;
}

// Resamples about the image center by 1/z with clamped (edge-replicated)
// coordinates: z > 1 magnifies the center, z < 1 shrinks the content with
// replicated borders. Output extents are unchanged.
Image zoom_image(const Image& img, double z) {
  const double cy = static_cast<double>(img.height - 1) / 2.0;
  const double cx = static_cast<double>(img.width - 1) / 2.0;
  Image out = Image::create(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y) {
    const double sy = cy + (static_cast<double>(y) - cy) / z;
    for (int x = 0; x < img.width; ++x) {
      const double sx = cx + (static_cast<double>(x) - cx) / z;
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = clamp_u8(sample_bilinear(img, sy, sx, c));
      }
    }
  }
  return out;
}

}  // namespace

Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ConfigError("resize target must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  Image out = Image::create(out_h, out_w, img.channels);
  const double sy_scale = static_cast<double>(img.height) / out_h;
  const double sx_scale = static_cast<double>(img.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double sy = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;  // half-pixel centers
    for (int x = 0; x < out_w; ++x) {
      const double sx = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
      for (int c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = clamp_u8(sample_bilinear(img, sy, sx, c));
      }
    }
  }
  return out;
}

Image augment(const Image& img, const AugmentSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  // All five parameters are always drawn, in a fixed order, so the stream
  // position of each move never depends on which moves are enabled.
  const int rotation =
      spec.rotation_degrees[static_cast<std::size_t>(rng.uniform_int(spec.rotation_degrees.size()))];
  const bool do_hflip = rng.uniform01() < 0.5;
  const bool do_vflip = rng.uniform01() < 0.5;
  const double zoom = rng.uniform(spec.zoom_lo, spec.zoom_hi);
  const double delta = rng.uniform(-spec.brightness_delta, spec.brightness_delta);

  Image out = rotate_quarter(img, rotation);
  if (spec.horizontal_flip && do_hflip) out = flip_image(out, true);
  if (spec.vertical_flip && do_vflip) out = flip_image(out, false);
  if (zoom != 1.0) out = zoom_image(out, zoom);
  if (delta != 0.0) {
    const double shift = delta * 255.0;
    for (std::uint8_t& px : out.pixels) {
      px = clamp_u8(static_cast<double>(px) + shift);
    }
  }
  return out;
}

Tensor run_pipeline(const Image& img, const PreprocessConfig& cfg, bool training,
                    std::uint64_t augment_seed) {
  cfg.validate();
  Image work = zero_pad(img, cfg.pad);
  work = median_filter(work, cfg.median_kernel);
  work = clahe(work, cfg.clahe_tile_rows, cfg.clahe_tile_cols, cfg.clahe_clip_limit);
  work = resize_bilinear(work, cfg.target_h, cfg.target_w);
  if (training) work = augment(work, cfg.augment, augment_seed);
  return normalize(work);
}

}  // namespace histonet::preprocess
