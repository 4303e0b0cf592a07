#pragma once

#include <cstdint>

#include "dcac/rng.hpp"
#include "dcac/tensor.hpp"

namespace dcac {

// Training-time augmentation settings. Factor ranges for brightness,
// contrast and saturation are [1-s, 1+s] with s = jitter_strength; the hue
// offset range is +-s/2 of one full hue turn.
struct AugmentConfig {
    double max_rotation_deg = 90.0;
    double max_translate_frac = 0.10;
    double scale_lo = 0.8;
    double scale_hi = 1.2;
    double max_shear_deg = 10.0;
    double jitter_strength = 0.5;
    double hflip_p = 0.5;
    double vflip_p = 0.5;
    double crop_area_lo = 0.6;
    double crop_area_hi = 1.0;
    // Crop aspect is a factor applied to the source image's own aspect
    // ratio, so the full frame is always reachable.
    double crop_aspect_lo = 0.75;
    double crop_aspect_hi = 1.333;
    std::int64_t output_size = 160;

    void validate() const;

    // All ranges collapsed so the pipeline reduces to a plain resize.
    static AugmentConfig identity();
};

// Half-pixel-center bilinear resize with edge clamping; [C,H,W] any C.
TensorPtr resize_bilinear(const TensorPtr& img, std::int64_t out_h, std::int64_t out_w);

// Bilinear warp with reflection padding. For each output pixel, coordinates
// relative to the output center are mapped through the row-major 2x2 matrix
// m, then shifted by (tx, ty) and the input center to give the sample point.
TensorPtr warp_affine(const TensorPtr& img, const double m[4], double tx, double ty,
                      std::int64_t out_h, std::int64_t out_w);

TensorPtr flip_horizontal(const TensorPtr& img);
TensorPtr flip_vertical(const TensorPtr& img);

// Applies, in order: brightness (multiply), contrast (blend with the mean
// luma), saturation (blend with per-pixel luma), hue rotation (HSV
// round-trip, hue_turns of a full circle). No clamping here.
TensorPtr color_jitter(const TensorPtr& img, double brightness, double contrast,
                       double saturation, double hue_turns);

// Full pipeline: random-resized crop -> one composed affine (rotation,
// translation, scale, shear) -> flips -> color jitter -> clamp to [0,1].
// Requires [3,H,W], H,W >= 32, pixel values in [0,1]. Output [3,S,S].
TensorPtr augment(const TensorPtr& img, const AugmentConfig& cfg, Rng& rng);

}  // namespace dcac
