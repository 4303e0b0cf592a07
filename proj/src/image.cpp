#include "dcac/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace dcac {

namespace {

constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

void check_image_tensor(const TensorPtr& img, const char* who) {
    if (img->rank() != 3 || img->extent(0) != 3) {
        raise(ErrorCode::ShapeMismatch,
              std::string(who) + ": expected [3,H,W], got " + shape_str(img->shape));
    }
}

unsigned char quantize(double v) {
    const double c = std::min(1.0, std::max(0.0, v));
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

TensorPtr pixels_to_tensor(const std::vector<unsigned char>& px, std::int64_t h, std::int64_t w,
                           int channels) {
    auto out = Tensor::zeros({3, h, w});
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < plane; ++i) {
        const unsigned char* p = px.data() + static_cast<std::size_t>(i) * channels;
        double r, g, b;
        if (channels >= 3) {
            r = p[0] / 255.0;
            g = p[1] / 255.0;
            b = p[2] / 255.0;
        } else {
            r = g = b = p[0] / 255.0;  // grayscale replicated
        }
        out->data[static_cast<std::size_t>(i)] = r;
        out->data[static_cast<std::size_t>(plane + i)] = g;
        out->data[static_cast<std::size_t>(2 * plane + i)] = b;
    }
    return out;
}

std::uint32_t read_be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void push_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

void push_chunk(std::vector<unsigned char>& out, const char type[4],
                const std::vector<unsigned char>& data) {
    push_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0L, out.data() + type_at, static_cast<uInt>(4 + data.size()));
    push_be32(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a);
    const int pb = std::abs(p - b);
    const int pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

TensorPtr decode_png(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0) {
        raise(ErrorCode::DataError, "png: missing signature");
    }

    std::int64_t width = 0;
    std::int64_t height = 0;
    int channels = 0;
    bool have_header = false;
    bool have_end = false;
    std::vector<unsigned char> idat;

    std::size_t at = 8;
    while (at + 12 <= bytes.size() && !have_end) {
        const std::uint32_t len = read_be32(bytes.data() + at);
        if (at + 12 + len > bytes.size()) {
            raise(ErrorCode::CorruptFile, "png: truncated chunk");
        }
        const unsigned char* type = bytes.data() + at + 4;
        const unsigned char* data = bytes.data() + at + 8;
        const std::uint32_t stored_crc = read_be32(data + len);
        const auto computed = crc32(0L, type, static_cast<uInt>(4 + len));
        if (stored_crc != static_cast<std::uint32_t>(computed)) {
            raise(ErrorCode::CorruptFile, "png: chunk crc mismatch");
        }

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) raise(ErrorCode::CorruptFile, "png: bad IHDR length");
            width = read_be32(data);
            height = read_be32(data + 4);
            const int bit_depth = data[8];
            const int color_type = data[9];
            const int interlace = data[12];
            if (width <= 0 || height <= 0) raise(ErrorCode::DataError, "png: bad dimensions");
            if (bit_depth != 8) {
                raise(ErrorCode::DataError,
                      "png: only 8-bit depth is supported, got " + std::to_string(bit_depth));
            }
            if (interlace != 0) raise(ErrorCode::DataError, "png: interlaced files not supported");
            switch (color_type) {
                case 0: channels = 1; break;
                case 2: channels = 3; break;
                case 4: channels = 2; break;
                case 6: channels = 4; break;
                default:
                    raise(ErrorCode::DataError,
                          "png: unsupported color type " + std::to_string(color_type));
            }
            have_header = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            if (!have_header) raise(ErrorCode::CorruptFile, "png: IDAT before IHDR");
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            have_end = true;
        }
        at += 12 + len;
    }
    if (!have_header || !have_end || idat.empty()) {
        raise(ErrorCode::CorruptFile, "png: truncated file");
    }

    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    const std::size_t raw_size = static_cast<std::size_t>(height) * (stride + 1);
    std::vector<unsigned char> raw(raw_size);
    uLongf got = static_cast<uLongf>(raw_size);
    const int zrc = uncompress(raw.data(), &got, idat.data(), static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || got != raw_size) {
        raise(ErrorCode::CorruptFile, "png: broken compressed stream");
    }

    // Undo per-row filters in place; `px` holds the defiltered scanlines.
    std::vector<unsigned char> px(static_cast<std::size_t>(height) * stride);
    for (std::int64_t y = 0; y < height; ++y) {
        const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const unsigned char* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        unsigned char* dst = px.data() + static_cast<std::size_t>(y) * stride;
        const unsigned char* up = y > 0 ? dst - stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int left = x >= static_cast<std::size_t>(channels) ? dst[x - channels] : 0;
            const int above = up ? up[x] : 0;
            const int corner =
                (up && x >= static_cast<std::size_t>(channels)) ? up[x - channels] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, corner); break;
                default: raise(ErrorCode::CorruptFile, "png: unknown row filter");
            }
            dst[x] = static_cast<unsigned char>(v & 0xff);
        }
    }
    return pixels_to_tensor(px, height, width, channels);
}

std::vector<unsigned char> encode_png(const TensorPtr& img) {
    check_image_tensor(img, "encode_png");
    const std::int64_t h = img->extent(1);
    const std::int64_t w = img->extent(2);
    const std::int64_t plane = h * w;

    // Filter 0 on every row: predictable, deterministic output.
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (3 * w + 1));
    for (std::int64_t y = 0; y < h; ++y) {
        unsigned char* row = raw.data() + static_cast<std::size_t>(y) * (3 * w + 1);
        row[0] = 0;
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                row[1 + 3 * x + c] =
                    quantize(img->data[static_cast<std::size_t>(c * plane + y * w + x)]);
            }
        }
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK) {
        raise(ErrorCode::IoError, "png: compression failed");
    }
    compressed.resize(bound);

    std::vector<unsigned char> out(kPngSig, kPngSig + 8);
    std::vector<unsigned char> ihdr;
    push_be32(ihdr, static_cast<std::uint32_t>(w));
    push_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", compressed);
    push_chunk(out, "IEND", {});
    return out;
}

TensorPtr decode_ppm(const std::vector<unsigned char>& bytes) {
    std::size_t at = 0;
    auto peek = [&]() -> int { return at < bytes.size() ? bytes[at] : -1; };
    auto skip_space = [&] {
        while (at < bytes.size()) {
            if (std::isspace(peek())) {
                ++at;
            } else if (peek() == '#') {
                while (at < bytes.size() && bytes[at] != '\n') ++at;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> std::int64_t {
        skip_space();
        if (at >= bytes.size() || !std::isdigit(peek())) {
            raise(ErrorCode::CorruptFile, "ppm: malformed header");
        }
        std::int64_t v = 0;
        while (at < bytes.size() && std::isdigit(peek())) {
            v = v * 10 + (bytes[at] - '0');
            ++at;
        }
        return v;
    };

    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
        raise(ErrorCode::DataError, "ppm: not a binary P6 file");
    }
    at = 2;
    const std::int64_t w = read_int();
    const std::int64_t h = read_int();
    const std::int64_t maxval = read_int();
    if (w <= 0 || h <= 0) raise(ErrorCode::DataError, "ppm: bad dimensions");
    if (maxval != 255) {
        raise(ErrorCode::DataError, "ppm: only maxval 255 is supported, got " +
                                        std::to_string(maxval));
    }
    ++at;  // single whitespace byte after maxval
    const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
    if (at + need > bytes.size()) raise(ErrorCode::CorruptFile, "ppm: truncated pixel data");

    std::vector<unsigned char> px(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                                  bytes.begin() + static_cast<std::ptrdiff_t>(at + need));
    return pixels_to_tensor(px, h, w, 3);
}

std::vector<unsigned char> encode_ppm(const TensorPtr& img) {
    check_image_tensor(img, "encode_ppm");
    const std::int64_t h = img->extent(1);
    const std::int64_t w = img->extent(2);
    const std::int64_t plane = h * w;

    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(out.size() + static_cast<std::size_t>(plane) * 3);
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            out.push_back(quantize(img->data[static_cast<std::size_t>(c * plane + i)]));
        }
    }
    return out;
}

namespace {

std::vector<unsigned char> read_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::IoError, "cannot open image: " + path);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

void write_binary(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) raise(ErrorCode::IoError, "cannot write image: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) raise(ErrorCode::IoError, "image write failed: " + path);
}

}  // namespace

TensorPtr load_image(const std::string& path) {
    const auto bytes = read_binary(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) {
        return decode_png(bytes);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
        return decode_ppm(bytes);
    }
    raise(ErrorCode::DataError, "unsupported image format: " + path);
}

void save_png(const std::string& path, const TensorPtr& img) {
    write_binary(path, encode_png(img));
}

void save_ppm(const std::string& path, const TensorPtr& img) {
    write_binary(path, encode_ppm(img));
}

}  // namespace dcac
