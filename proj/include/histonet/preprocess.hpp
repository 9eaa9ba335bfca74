#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histonet/image.hpp"
#include "histonet/tensor.hpp"

namespace histonet::preprocess {

// Allowed augmentation moves; the concrete parameters of each application are
// drawn from a seed (see augment()). Ranges are validated against the stated
// bounds: zoom within [0.8, 1.2], |brightness delta| <= 0.2.
struct AugmentSpec {
  std::vector<int> rotation_degrees = {0, 90, 180, 270};
  bool horizontal_flip = true;
  bool vertical_flip = true;
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;
  double brightness_delta = 0.1;  // draws from [-delta, +delta], fraction of full scale

  void validate() const;  // ConfigError on violation
  bool is_identity() const;
};

struct PreprocessConfig {
  int pad = 1;
  int median_kernel = 3;
  int clahe_tile_rows = 8;
  int clahe_tile_cols = 8;
  double clahe_clip_limit = 2.0;
  int target_h = 96;
  int target_w = 96;
  AugmentSpec augment;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError on violation
  std::string to_json() const;
  static PreprocessConfig from_json(const std::string& text);
};

// Surrounds the image with `pad` rows/columns of zeros.
Image zero_pad(const Image& img, int pad);

// k x k median per channel with edge replication; k must be odd (>= 1).
Image median_filter(const Image& img, int k);

// Contrast-limited adaptive histogram equalization. Tile histograms (256
// bins) are clipped at clip_limit * tile_pixels / 256 with iterative uniform
// redistribution (until the residual excess is below one count; the final
// residual is spread without re-clipping), mapped through CDF * 255 /
// tile_pixels, and pixels are bilinearly interpolated among the four nearest
// tile mappings (edge tiles replicate). A tile whose histogram occupies a
// single bin keeps the identity mapping, so constant regions are fixed
// points. Color images are equalized on BT.601 luma only; chroma offsets are
// preserved and the result clamped.
Image clahe(const Image& img, int tile_rows, int tile_cols, double clip_limit);

// (channels, H, W) tensor of pixel/255.
Tensor normalize(const Image& img);

// Rounds a normalized tensor back to an 8-bit image (floor(v*255 + 0.5)).
Image denormalize(const Tensor& t);

// Bilinear resize with half-pixel-aligned sample centers.
Image resize_bilinear(const Image& img, int out_h, int out_w);

// Applies rotate -> flip -> zoom -> brightness with parameters drawn from
// `seed` in that fixed order (every parameter is drawn even when its move is
// disabled, so enabling one move never shifts another's stream).
Image augment(const Image& img, const AugmentSpec& spec, std::uint64_t seed);

// zero_pad -> median_filter -> clahe -> resize -> (augment when training) ->
// normalize. The augment draw uses `augment_seed` so callers can vary it per
// sample/epoch while the config stays fixed.
Tensor run_pipeline(const Image& img, const PreprocessConfig& cfg, bool training = false,
                    std::uint64_t augment_seed = 0);

}  // namespace histonet::preprocess
