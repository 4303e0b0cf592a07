#include "dcac/augment.hpp"

#include <algorithm>
#include <cmath>

namespace dcac {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_range(bool ok, const char* field) {
    if (!ok) raise(ErrorCode::ConfigError, std::string("augment config: bad ") + field);
}

void check_chw(const TensorPtr& img, const char* who) {
    if (img->rank() != 3 || img->extent(0) < 1) {
        raise(ErrorCode::ShapeMismatch,
              std::string(who) + ": expected [C,H,W], got " + shape_str(img->shape));
    }
}

std::int64_t clamp_idx(std::int64_t i, std::int64_t n) {
    return std::min(n - 1, std::max<std::int64_t>(0, i));
}

// Mirror an out-of-range tap back into [0, n) without repeating the edge.
std::int64_t reflect_idx(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

// Shared bilinear gather: samples (sx[ox], sy[oy]) per output pixel with a
// caller-chosen tap policy (clamp for resizes, reflect for warps).
template <typename TapFn>
TensorPtr gather_bilinear(const TensorPtr& img, const std::vector<double>& sx,
                          const std::vector<double>& sy, TapFn tap) {
    const std::int64_t ch = img->extent(0);
    const std::int64_t ih = img->extent(1);
    const std::int64_t iw = img->extent(2);
    const std::int64_t oh = static_cast<std::int64_t>(sy.size());
    const std::int64_t ow = static_cast<std::int64_t>(sx.size());
    auto out = Tensor::zeros({ch, oh, ow});

    for (std::int64_t oy = 0; oy < oh; ++oy) {
        const double fy = std::floor(sy[static_cast<std::size_t>(oy)]);
        const double wy = sy[static_cast<std::size_t>(oy)] - fy;
        const std::int64_t y0 = tap(static_cast<std::int64_t>(fy), ih);
        const std::int64_t y1 = tap(static_cast<std::int64_t>(fy) + 1, ih);
        for (std::int64_t ox = 0; ox < ow; ++ox) {
            const double fx = std::floor(sx[static_cast<std::size_t>(ox)]);
            const double wx = sx[static_cast<std::size_t>(ox)] - fx;
            const std::int64_t x0 = tap(static_cast<std::int64_t>(fx), iw);
            const std::int64_t x1 = tap(static_cast<std::int64_t>(fx) + 1, iw);
            for (std::int64_t c = 0; c < ch; ++c) {
                const double* plane = img->data.data() + c * ih * iw;
                const double top = plane[y0 * iw + x0] * (1 - wx) + plane[y0 * iw + x1] * wx;
                const double bot = plane[y1 * iw + x0] * (1 - wx) + plane[y1 * iw + x1] * wx;
                out->data[static_cast<std::size_t>((c * oh + oy) * ow + ox)] =
                    top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

// Resize of the axis-aligned crop window [top,top+h) x [left,left+w).
TensorPtr crop_resize(const TensorPtr& img, std::int64_t top, std::int64_t left,
                      std::int64_t crop_h, std::int64_t crop_w, std::int64_t out_h,
                      std::int64_t out_w) {
    std::vector<double> sx(static_cast<std::size_t>(out_w));
    std::vector<double> sy(static_cast<std::size_t>(out_h));
    for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const double raw = left + (ox + 0.5) * static_cast<double>(crop_w) / out_w - 0.5;
        sx[static_cast<std::size_t>(ox)] =
            std::min(static_cast<double>(left + crop_w - 1), std::max<double>(left, raw));
    }
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const double raw = top + (oy + 0.5) * static_cast<double>(crop_h) / out_h - 0.5;
        sy[static_cast<std::size_t>(oy)] =
            std::min(static_cast<double>(top + crop_h - 1), std::max<double>(top, raw));
    }
    return gather_bilinear(img, sx, sy, clamp_idx);
}

struct Hsv {
    double h;  // [0,1) turns
    double s;
    double v;
};

Hsv rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out{0.0, 0.0, mx};
    if (mx > 0) out.s = d / mx;
    if (d > 0) {
        double h6;
        if (mx == r) {
            h6 = (g - b) / d;
            if (h6 < 0) h6 += 6;
        } else if (mx == g) {
            h6 = (b - r) / d + 2;
        } else {
            h6 = (r - g) / d + 4;
        }
        out.h = h6 / 6.0;
    }
    return out;
}

void hsv_to_rgb(const Hsv& in, double* r, double* g, double* b) {
    const double c = in.v * in.s;
    const double h6 = in.h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(h6, 2.0) - 1.0));
    double rr = 0, gg = 0, bb = 0;
    switch (static_cast<int>(h6) % 6) {
        case 0: rr = c; gg = x; break;
        case 1: rr = x; gg = c; break;
        case 2: gg = c; bb = x; break;
        case 3: gg = x; bb = c; break;
        case 4: rr = x; bb = c; break;
        default: rr = c; bb = x; break;
    }
    const double base = in.v - c;
    *r = rr + base;
    *g = gg + base;
    *b = bb + base;
}

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace

void AugmentConfig::validate() const {
    check_range(max_rotation_deg >= 0 && max_rotation_deg <= 180, "max_rotation_deg");
    check_range(max_translate_frac >= 0 && max_translate_frac <= 1, "max_translate_frac");
    check_range(scale_lo > 0 && scale_lo <= scale_hi, "scale range");
    check_range(max_shear_deg >= 0 && max_shear_deg < 90, "max_shear_deg");
    check_range(jitter_strength >= 0 && jitter_strength < 1, "jitter_strength");
    check_range(hflip_p >= 0 && hflip_p <= 1, "hflip_p");
    check_range(vflip_p >= 0 && vflip_p <= 1, "vflip_p");
    check_range(crop_area_lo > 0 && crop_area_lo <= crop_area_hi && crop_area_hi <= 1,
                "crop_area range");
    check_range(crop_aspect_lo > 0 && crop_aspect_lo <= crop_aspect_hi, "crop_aspect range");
    check_range(output_size >= 1, "output_size");
}

AugmentConfig AugmentConfig::identity() {
    AugmentConfig cfg;
    cfg.max_rotation_deg = 0;
    cfg.max_translate_frac = 0;
    cfg.scale_lo = cfg.scale_hi = 1.0;
    cfg.max_shear_deg = 0;
    cfg.jitter_strength = 0;
    cfg.hflip_p = cfg.vflip_p = 0;
    cfg.crop_area_lo = cfg.crop_area_hi = 1.0;
    cfg.crop_aspect_lo = cfg.crop_aspect_hi = 1.0;
    return cfg;
}

TensorPtr resize_bilinear(const TensorPtr& img, std::int64_t out_h, std::int64_t out_w) {
    check_chw(img, "resize_bilinear");
    if (out_h < 1 || out_w < 1) {
        raise(ErrorCode::UsageError, "resize_bilinear: output size must be positive");
    }
    return crop_resize(img, 0, 0, img->extent(1), img->extent(2), out_h, out_w);
}

TensorPtr warp_affine(const TensorPtr& img, const double m[4], double tx, double ty,
                      std::int64_t out_h, std::int64_t out_w) {
    check_chw(img, "warp_affine");
    const std::int64_t ch = img->extent(0);
    const std::int64_t ih = img->extent(1);
    const std::int64_t iw = img->extent(2);
    const double ocx = (out_w - 1) / 2.0;
    const double ocy = (out_h - 1) / 2.0;
    const double icx = (iw - 1) / 2.0;
    const double icy = (ih - 1) / 2.0;

    auto out = Tensor::zeros({ch, out_h, out_w});
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const double u = ox - ocx;
            const double v = oy - ocy;
            const double sx = m[0] * u + m[1] * v + icx + tx;
            const double sy = m[2] * u + m[3] * v + icy + ty;
            const double fx = std::floor(sx);
            const double fy = std::floor(sy);
            const double wx = sx - fx;
            const double wy = sy - fy;
            const std::int64_t x0 = reflect_idx(static_cast<std::int64_t>(fx), iw);
            const std::int64_t x1 = reflect_idx(static_cast<std::int64_t>(fx) + 1, iw);
            const std::int64_t y0 = reflect_idx(static_cast<std::int64_t>(fy), ih);
            const std::int64_t y1 = reflect_idx(static_cast<std::int64_t>(fy) + 1, ih);
            for (std::int64_t c = 0; c < ch; ++c) {
                const double* plane = img->data.data() + c * ih * iw;
                const double top = plane[y0 * iw + x0] * (1 - wx) + plane[y0 * iw + x1] * wx;
                const double bot = plane[y1 * iw + x0] * (1 - wx) + plane[y1 * iw + x1] * wx;
                out->data[static_cast<std::size_t>((c * out_h + oy) * out_w + ox)] =
                    top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

TensorPtr flip_horizontal(const TensorPtr& img) {
    check_chw(img, "flip_horizontal");
    const std::int64_t ch = img->extent(0);
    const std::int64_t h = img->extent(1);
    const std::int64_t w = img->extent(2);
    auto out = Tensor::zeros(img->shape);
    for (std::int64_t c = 0; c < ch; ++c) {
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                out->data[static_cast<std::size_t>((c * h + y) * w + x)] =
                    img->data[static_cast<std::size_t>((c * h + y) * w + (w - 1 - x))];
            }
        }
    }
    return out;
}

TensorPtr flip_vertical(const TensorPtr& img) {
    check_chw(img, "flip_vertical");
    const std::int64_t ch = img->extent(0);
    const std::int64_t h = img->extent(1);
    const std::int64_t w = img->extent(2);
    auto out = Tensor::zeros(img->shape);
    for (std::int64_t c = 0; c < ch; ++c) {
        for (std::int64_t y = 0; y < h; ++y) {
            const std::size_t src = static_cast<std::size_t>((c * h + (h - 1 - y)) * w);
            const std::size_t dst = static_cast<std::size_t>((c * h + y) * w);
            std::copy_n(img->data.begin() + static_cast<std::ptrdiff_t>(src), w,
                        out->data.begin() + static_cast<std::ptrdiff_t>(dst));
        }
    }
    return out;
}

TensorPtr color_jitter(const TensorPtr& img, double brightness, double contrast,
                       double saturation, double hue_turns) {
    if (img->rank() != 3 || img->extent(0) != 3) {
        raise(ErrorCode::ShapeMismatch,
              "color_jitter: expected [3,H,W], got " + shape_str(img->shape));
    }
    const std::int64_t plane = img->extent(1) * img->extent(2);
    auto out = Tensor::from(img->shape, img->data);
    double* r = out->data.data();
    double* g = r + plane;
    double* b = g + plane;

    if (brightness != 1.0) {
        for (auto& v : out->data) v *= brightness;
    }
    if (contrast != 1.0) {
        double mean = 0;
        for (std::int64_t i = 0; i < plane; ++i) mean += luma(r[i], g[i], b[i]);
        mean /= static_cast<double>(plane);
        for (auto& v : out->data) v = mean + contrast * (v - mean);
    }
    if (saturation != 1.0) {
        for (std::int64_t i = 0; i < plane; ++i) {
            const double l = luma(r[i], g[i], b[i]);
            r[i] = l + saturation * (r[i] - l);
            g[i] = l + saturation * (g[i] - l);
            b[i] = l + saturation * (b[i] - l);
        }
    }
    if (hue_turns != 0.0) {
        for (std::int64_t i = 0; i < plane; ++i) {
            // Hue rotation assumes HSV-representable values; excursions from
            // the earlier factors are folded back into range first.
            const double rr = std::min(1.0, std::max(0.0, r[i]));
            const double gg = std::min(1.0, std::max(0.0, g[i]));
            const double bb = std::min(1.0, std::max(0.0, b[i]));
            Hsv hsv = rgb_to_hsv(rr, gg, bb);
            hsv.h += hue_turns;
            hsv.h -= std::floor(hsv.h);
            hsv_to_rgb(hsv, &r[i], &g[i], &b[i]);
        }
    }
    return out;
}

TensorPtr augment(const TensorPtr& img, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    if (img->rank() != 3 || img->extent(0) != 3) {
        raise(ErrorCode::ShapeMismatch, "augment: expected [3,H,W], got " + shape_str(img->shape));
    }
    const std::int64_t ih = img->extent(1);
    const std::int64_t iw = img->extent(2);
    if (ih < 32 || iw < 32) {
        raise(ErrorCode::DataError, "augment: input must be at least 32x32, got " +
                                        std::to_string(ih) + "x" + std::to_string(iw));
    }
    for (double v : img->data) {
        if (!(v >= 0.0 && v <= 1.0)) {
            raise(ErrorCode::DataError, "augment: pixel values must lie in [0,1]");
        }
    }
    const std::int64_t size = cfg.output_size;

    // Random-resized crop. The aspect factor scales the source aspect, so
    // (area 1, factor 1) selects the full frame exactly.
    const double area_frac = rng.uniform(cfg.crop_area_lo, cfg.crop_area_hi);
    const double aspect = rng.uniform(cfg.crop_aspect_lo, cfg.crop_aspect_hi) *
                          (static_cast<double>(iw) / static_cast<double>(ih));
    const double area = area_frac * static_cast<double>(ih) * static_cast<double>(iw);
    std::int64_t crop_w = std::llround(std::sqrt(area * aspect));
    std::int64_t crop_h = std::llround(std::sqrt(area / aspect));
    crop_w = std::min(iw, std::max<std::int64_t>(1, crop_w));
    crop_h = std::min(ih, std::max<std::int64_t>(1, crop_h));
    const std::int64_t top =
        static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(ih - crop_h + 1)));
    const std::int64_t left =
        static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(iw - crop_w + 1)));
    auto cur = crop_resize(img, top, left, crop_h, crop_w, size, size);

    // One composed affine: rotation, translation, scale, shear.
    const double theta =
        rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * kPi / 180.0;
    const double tx = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) *
                      static_cast<double>(size);
    const double ty = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) *
                      static_cast<double>(size);
    const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const double shear = rng.uniform(-cfg.max_shear_deg, cfg.max_shear_deg) * kPi / 180.0;

    // Forward map A = R(theta) * Shear(shear) * scale; sampling inverts it.
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    const double sh = std::tan(shear);
    const double a00 = scale * ct;
    const double a01 = scale * (ct * sh - st);
    const double a10 = scale * st;
    const double a11 = scale * (st * sh + ct);
    const double det = a00 * a11 - a01 * a10;
    const double inv[4] = {a11 / det, -a01 / det, -a10 / det, a00 / det};
    const double itx = -(inv[0] * tx + inv[1] * ty);
    const double ity = -(inv[2] * tx + inv[3] * ty);
    cur = warp_affine(cur, inv, itx, ity, size, size);

    // Both flip coins are always spent to keep the draw count stable.
    const bool do_h = rng.bernoulli(cfg.hflip_p);
    const bool do_v = rng.bernoulli(cfg.vflip_p);
    if (do_h) cur = flip_horizontal(cur);
    if (do_v) cur = flip_vertical(cur);

    const double s = cfg.jitter_strength;
    const double fb = rng.uniform(1 - s, 1 + s);
    const double fc = rng.uniform(1 - s, 1 + s);
    const double fs = rng.uniform(1 - s, 1 + s);
    const double hue = rng.uniform(-s / 2, s / 2);
    cur = color_jitter(cur, fb, fc, fs, hue);

    for (auto& v : cur->data) v = std::min(1.0, std::max(0.0, v));
    return cur;
}

}  // namespace dcac
