#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <cstdio>

#include "dcac/augment.hpp"
#include "dcac/image.hpp"
#include "dcac/rng.hpp"

using namespace dcac;

namespace {

TensorPtr random_image(Rng& rng, std::int64_t h, std::int64_t w) {
    auto img = Tensor::zeros({3, h, w});
    for (auto& v : img->data) v = rng.uniform();
    return img;
}

double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    REQUIRE(a->shape == b->shape);
    double m = 0;
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        m = std::max(m, std::abs(a->data[i] - b->data[i]));
    }
    return m;
}

}  // namespace

TEST_CASE("ppm decodes known bytes to exact v/255 values") {
    // 2x2 P6: RGB triples 0,128,255 / 1,2,3 / 255,255,255 / 0,0,0
    std::vector<unsigned char> bytes = {'P', '6', '\n', '2', ' ', '2', '\n',
                                        '2', '5', '5', '\n',
                                        0, 128, 255, 1, 2, 3, 255, 255, 255, 0, 0, 0};
    auto img = decode_ppm(bytes);
    REQUIRE(img->shape == Shape{3, 2, 2});
    CHECK(img->data[0] == 0.0);               // R(0,0)
    CHECK(img->data[1] == 1.0 / 255.0);       // R(0,1)
    CHECK(img->data[2] == 1.0);               // R(1,0)
    CHECK(img->data[3] == 0.0);               // R(1,1)
    CHECK(img->data[4] == 128.0 / 255.0);     // G(0,0)
    CHECK(img->data[8] == 1.0);               // B(0,0)
    CHECK(img->data[9] == 3.0 / 255.0);       // B(0,1)
}

TEST_CASE("ppm header accepts comments and rejects bad maxval") {
    std::vector<unsigned char> commented = {'P', '6', '\n', '#', ' ', 'x', '\n',
                                            '1', ' ', '1', '\n', '2', '5', '5', '\n',
                                            10, 20, 30};
    auto img = decode_ppm(commented);
    CHECK(img->shape == Shape{3, 1, 1});
    CHECK(img->data[1] == 20.0 / 255.0);

    std::vector<unsigned char> bad = {'P', '6', '\n', '1', ' ', '1', '\n',
                                      '6', '5', '5', '3', '5', '\n', 0, 0};
    CHECK_THROWS_WITH_AS(decode_ppm(bad), doctest::Contains("maxval"), Error);

    std::vector<unsigned char> truncated = {'P', '6', '\n', '2', ' ', '2', '\n',
                                            '2', '5', '5', '\n', 1, 2, 3};
    CHECK_THROWS_AS(decode_ppm(truncated), Error);
}

TEST_CASE("ppm round-trip stays within the 8-bit quantization bound") {
    Rng rng(11);
    auto img = random_image(rng, 9, 13);
    auto back = decode_ppm(encode_ppm(img));
    REQUIRE(back->shape == img->shape);
    CHECK(max_abs_diff(img, back) <= 1.0 / 255.0);

    // Quantized values are fixed points: a second trip is bit-identical.
    auto again = decode_ppm(encode_ppm(back));
    CHECK(max_abs_diff(back, again) == 0.0);
}

TEST_CASE("png round-trip is exact on quantized data and all-black stays zero") {
    Rng rng(12);
    auto img = random_image(rng, 16, 11);
    auto once = decode_png(encode_png(img));
    CHECK(max_abs_diff(img, once) <= 1.0 / 255.0);
    auto twice = decode_png(encode_png(once));
    CHECK(max_abs_diff(once, twice) == 0.0);

    auto black = Tensor::zeros({3, 5, 7});
    auto decoded = decode_png(encode_png(black));
    REQUIRE(decoded->shape == Shape{3, 5, 7});
    for (double v : decoded->data) CHECK(v == 0.0);
}

TEST_CASE("png rejects corruption, truncation, and unsupported layouts") {
    Rng rng(13);
    auto bytes = encode_png(random_image(rng, 8, 8));

    auto corrupted = bytes;
    corrupted[bytes.size() / 2] ^= 0xff;  // inside IDAT -> crc mismatch
    CHECK_THROWS_AS(decode_png(corrupted), Error);

    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    CHECK_THROWS_AS(decode_png(truncated), Error);

    auto not_png = bytes;
    not_png[0] = 0;
    CHECK_THROWS_WITH_AS(decode_png(not_png), doctest::Contains("signature"), Error);

    auto interlaced = bytes;
    // IHDR data starts at offset 16; interlace flag is its 13th byte. The
    // chunk crc must be recomputed for the parser to reach the flag check.
    interlaced[16 + 12] = 1;
    {
        // crc over type+data = bytes [12, 12+4+13)
        unsigned long crc = 0;
        crc = crc32(0L, nullptr, 0);
        crc = crc32(crc, interlaced.data() + 12, 17);
        interlaced[29] = static_cast<unsigned char>(crc >> 24);
        interlaced[30] = static_cast<unsigned char>(crc >> 16);
        interlaced[31] = static_cast<unsigned char>(crc >> 8);
        interlaced[32] = static_cast<unsigned char>(crc);
    }
    CHECK_THROWS_WITH_AS(decode_png(interlaced), doctest::Contains("interlace"), Error);
}

TEST_CASE("load_image dispatches on magic bytes and names unsupported formats") {
    Rng rng(14);
    auto img = random_image(rng, 6, 6);

    const std::string png_path = "/tmp/dcac_test_img.png";
    const std::string ppm_path = "/tmp/dcac_test_img.ppm";
    save_png(png_path, img);
    save_ppm(ppm_path, img);
    auto from_png = load_image(png_path);
    auto from_ppm = load_image(ppm_path);
    CHECK(max_abs_diff(from_png, from_ppm) == 0.0);
    std::remove(png_path.c_str());
    std::remove(ppm_path.c_str());

    const std::string junk = "/tmp/dcac_test_img.bin";
    std::FILE* f = std::fopen(junk.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("GIF89a nope", f);
    std::fclose(f);
    CHECK_THROWS_WITH_AS(load_image(junk), doctest::Contains("unsupported"), Error);
    std::remove(junk.c_str());

    CHECK_THROWS_AS(load_image("/tmp/dcac_missing_image.png"), Error);
}

TEST_CASE("bilinear resize: identity at equal size, constants and ramps preserved") {
    Rng rng(15);
    auto img = random_image(rng, 12, 17);
    auto same = resize_bilinear(img, 12, 17);
    CHECK(max_abs_diff(img, same) == 0.0);

    auto flat = Tensor::full({3, 8, 8}, 0.42);
    auto up = resize_bilinear(flat, 13, 21);
    for (double v : up->data) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));

    // A horizontal ramp v(x) = x downsampled 4 -> 2 hits the half-pixel
    // centers: samples at x = 0.5 and 2.5.
    auto ramp = Tensor::zeros({1, 1, 4});
    for (int x = 0; x < 4; ++x) ramp->data[static_cast<std::size_t>(x)] = x;
    auto down = resize_bilinear(ramp, 1, 2);
    CHECK(down->data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(down->data[1] == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("warp_affine with a quarter-turn equals an exact rotation") {
    Rng rng(16);
    const std::int64_t n = 10;
    auto img = random_image(rng, n, n);
    // Output->input map for a +90 degree forward rotation.
    const double inv[4] = {0, 1, -1, 0};
    auto out = warp_affine(img, inv, 0, 0, n, n);
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < n; ++y) {
            for (std::int64_t x = 0; x < n; ++x) {
                const double expect =
                    img->data[static_cast<std::size_t>((c * n + (n - 1 - x)) * n + y)];
                CHECK(out->data[static_cast<std::size_t>((c * n + y) * n + x)] == expect);
            }
        }
    }
}

TEST_CASE("warp_affine translation reflects at the border") {
    // 1x1x4 row [0,1,2,3], shift sampling +2: x=2 -> 4 -> reflect to 2(n-1)-4 = 2.
    auto img = Tensor::zeros({1, 1, 4});
    for (int x = 0; x < 4; ++x) img->data[static_cast<std::size_t>(x)] = x;
    const double ident[4] = {1, 0, 0, 1};
    auto out = warp_affine(img, ident, 2.0, 0.0, 1, 4);
    CHECK(out->data[0] == 2.0);
    CHECK(out->data[1] == 3.0);
    CHECK(out->data[2] == 2.0);  // reflected
    CHECK(out->data[3] == 1.0);  // reflected
}

TEST_CASE("flips reverse the expected axis and are involutions") {
    Rng rng(17);
    auto img = random_image(rng, 5, 9);
    auto h = flip_horizontal(img);
    CHECK(h->data[0] == img->data[8]);
    CHECK(max_abs_diff(flip_horizontal(h), img) == 0.0);
    auto v = flip_vertical(img);
    CHECK(v->data[0] == img->data[static_cast<std::size_t>(4 * 9)]);
    CHECK(max_abs_diff(flip_vertical(v), img) == 0.0);
}

TEST_CASE("color jitter components match hand values") {
    // Two pixels: black and white.
    auto img = Tensor::zeros({3, 1, 2});
    for (int c = 0; c < 3; ++c) img->data[static_cast<std::size_t>(2 * c + 1)] = 1.0;

    auto bright = color_jitter(img, 0.5, 1, 1, 0);
    CHECK(bright->data[1] == 0.5);
    CHECK(bright->data[0] == 0.0);

    // Mean luma is 0.5; contrast 0.5 pulls both pixels halfway to it.
    auto contr = color_jitter(img, 1, 0.5, 1, 0);
    CHECK(contr->data[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(contr->data[1] == doctest::Approx(0.75).epsilon(1e-12));

    // Saturation 0 collapses every pixel to its luma.
    auto colored = Tensor::zeros({3, 1, 1});
    colored->data[0] = 1.0;  // pure red
    auto gray = color_jitter(colored, 1, 1, 0, 0);
    CHECK(gray->data[0] == doctest::Approx(0.299).epsilon(1e-12));
    CHECK(gray->data[1] == doctest::Approx(0.299).epsilon(1e-12));
    CHECK(gray->data[2] == doctest::Approx(0.299).epsilon(1e-12));

    // A half-turn hue rotation sends pure red to pure cyan.
    auto cyan = color_jitter(colored, 1, 1, 1, 0.5);
    CHECK(cyan->data[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(cyan->data[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cyan->data[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("full-circle hue rotation is the identity within 1e-6") {
    Rng rng(18);
    auto img = random_image(rng, 7, 7);
    auto spun = color_jitter(img, 1, 1, 1, 1.0);
    CHECK(max_abs_diff(img, spun) < 1e-6);
}

TEST_CASE("identity augmentation equals a plain bilinear resize") {
    Rng img_rng(19);
    // Non-square on purpose: the crop must still select the full frame.
    auto img = random_image(img_rng, 48, 64);
    auto cfg = AugmentConfig::identity();

    Rng rng(2718);
    auto out = augment(img, cfg, rng);
    auto plain = resize_bilinear(img, cfg.output_size, cfg.output_size);
    CHECK(out->shape == Shape{3, 160, 160});
    CHECK(max_abs_diff(out, plain) == 0.0);
}

TEST_CASE("augmented outputs are always 160x160 in [0,1]") {
    AugmentConfig cfg;  // full-strength defaults
    for (int trial = 0; trial < 12; ++trial) {
        Rng img_rng(derive_seed(500, trial));
        const std::int64_t h = 32 + img_rng.uniform_below(60);
        const std::int64_t w = 32 + img_rng.uniform_below(60);
        auto img = random_image(img_rng, h, w);
        Rng rng(derive_seed(501, trial));
        auto out = augment(img, cfg, rng);
        CHECK(out->shape == Shape{3, 160, 160});
        for (double v : out->data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("augmentation is deterministic per rng stream") {
    Rng img_rng(20);
    auto img = random_image(img_rng, 40, 40);
    AugmentConfig cfg;

    Rng r1(909);
    Rng r2(909);
    auto a = augment(img, cfg, r1);
    auto b = augment(img, cfg, r2);
    CHECK(max_abs_diff(a, b) == 0.0);

    // The next draw from the same stream differs almost surely.
    auto c = augment(img, cfg, r1);
    CHECK(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("augment rejects bad inputs and bad configs") {
    auto small = Tensor::full({3, 16, 16}, 0.5);
    AugmentConfig cfg;
    Rng rng(1);
    CHECK_THROWS_WITH_AS(augment(small, cfg, rng), doctest::Contains("32"), Error);

    auto out_of_range = Tensor::full({3, 40, 40}, 1.5);
    CHECK_THROWS_WITH_AS(augment(out_of_range, cfg, rng), doctest::Contains("pixel"), Error);

    auto ok = Tensor::full({3, 40, 40}, 0.5);
    AugmentConfig bad;
    bad.scale_lo = 1.3;
    bad.scale_hi = 0.8;
    CHECK_THROWS_WITH_AS(augment(ok, bad, rng), doctest::Contains("scale"), Error);
    bad = AugmentConfig{};
    bad.crop_area_lo = 0.0;
    CHECK_THROWS_WITH_AS(augment(ok, bad, rng), doctest::Contains("crop_area"), Error);
}
