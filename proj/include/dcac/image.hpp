#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcac/tensor.hpp"

namespace dcac {

// 8-bit image codecs. Decoders return [3,H,W] float tensors with values
// v/255 in [0,1]; grayscale is replicated across channels and alpha is
// dropped. Encoders quantize with round-to-nearest.

TensorPtr decode_png(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> encode_png(const TensorPtr& img);

TensorPtr decode_ppm(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> encode_ppm(const TensorPtr& img);

// Dispatches on the file's magic bytes (PNG signature or P6 header).
TensorPtr load_image(const std::string& path);

void save_png(const std::string& path, const TensorPtr& img);
void save_ppm(const std::string& path, const TensorPtr& img);

}  // namespace dcac
