#include "dcac/layers.hpp"

#include <cmath>

namespace dcac {

namespace {

// Kaiming-uniform with fan-in mode and ReLU gain: bound = sqrt(6 / fan_in).
TensorPtr kaiming_uniform(const Shape& shape, std::int64_t fan_in, Rng& rng) {
    auto t = Tensor::zeros(shape, /*requires_grad=*/true);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t->data) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, ops::IntPair stride_, ops::IntPair padding_,
               int groups_, bool with_bias, Rng& rng)
    : stride(stride_), padding(padding_), groups(groups_) {
    if (in_ch % groups_ != 0) {
        raise(ErrorCode::ConfigError, "Conv2d: in_ch " + std::to_string(in_ch) +
                                          " not divisible by groups " + std::to_string(groups_));
    }
    const std::int64_t cg = in_ch / groups_;
    const std::int64_t fan_in = cg * kernel * kernel;
    weight = kaiming_uniform({out_ch, cg, kernel, kernel}, fan_in, rng);
    if (with_bias) bias = Tensor::zeros({out_ch}, /*requires_grad=*/true);
}

TensorPtr Conv2d::forward(Tape* tape, const TensorPtr& x) const {
    return ops::conv2d(tape, x, weight, bias, stride, padding, groups);
}

void Conv2d::collect(const std::string& prefix, NamedTensors& out) const {
    out.params.push_back({prefix + ".weight", weight});
    if (bias) out.params.push_back({prefix + ".bias", bias});
}

BatchNorm2d::BatchNorm2d(int channels) {
    gamma = Tensor::full({channels}, 1.0, /*requires_grad=*/true);
    beta = Tensor::zeros({channels}, /*requires_grad=*/true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
}

TensorPtr BatchNorm2d::forward(Tape* tape, const TensorPtr& x, bool training) const {
    return ops::batch_norm(tape, x, gamma, beta, running_mean, running_var,
                           training && !frozen);
}

void BatchNorm2d::collect(const std::string& prefix, NamedTensors& out) const {
    out.params.push_back({prefix + ".gamma", gamma});
    out.params.push_back({prefix + ".beta", beta});
    out.buffers.push_back({prefix + ".running_mean", running_mean});
    out.buffers.push_back({prefix + ".running_var", running_var});
}

ConvBlock::ConvBlock(int in_ch, int out_ch, int kernel, ops::IntPair stride, Rng& rng)
    : conv(in_ch, out_ch, kernel, stride, {kernel / 2, kernel / 2}, 1, /*with_bias=*/true, rng),
      bn(out_ch) {}

TensorPtr ConvBlock::forward(Tape* tape, const TensorPtr& x, bool training) const {
    return ops::relu(tape, bn.forward(tape, conv.forward(tape, x), training));
}

void ConvBlock::collect(const std::string& prefix, NamedTensors& out) const {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
}

EmbedLayer::EmbedLayer(int in_ch, int out_ch, Rng& rng)
    : depthwise(in_ch, in_ch, 3, {1, 1}, {1, 1}, in_ch, /*with_bias=*/true, rng),
      pointwise(in_ch, out_ch, 1, {1, 1}, {0, 0}, 1, /*with_bias=*/true, rng) {}

TensorPtr EmbedLayer::forward(Tape* tape, const TensorPtr& x) const {
    return pointwise.forward(tape, depthwise.forward(tape, x));
}

void EmbedLayer::collect(const std::string& prefix, NamedTensors& out) const {
    depthwise.collect(prefix + ".dw", out);
    pointwise.collect(prefix + ".pw", out);
}

CondenserBranch::CondenserBranch(int channels_, int reduction, int num_embeds, Rng& rng)
    : channels(channels_), cmid(std::max(1, channels_ / reduction)) {
    if (num_embeds < 1 || num_embeds > 2) {
        raise(ErrorCode::ConfigError,
              "CondenserBranch: embedding layer count must be 1 or 2, got " +
                  std::to_string(num_embeds));
    }
    embeds.emplace_back(channels, cmid, rng);
    for (int i = 1; i < num_embeds; ++i) embeds.emplace_back(cmid, cmid, rng);
    expand_pw = Conv2d(cmid, channels, 1, {1, 1}, {0, 0}, 1, /*with_bias=*/true, rng);
}

TensorPtr CondenserBranch::forward(Tape* tape, const TensorPtr& v) const {
    if (v->rank() != 4 || v->extent(1) != channels) {
        raise(ErrorCode::ShapeMismatch,
              "condenser: input shape " + shape_str(v->shape) + " does not carry " +
                  std::to_string(channels) + " channels");
    }
    const auto H = v->extent(2), W = v->extent(3);
    if (H % 2 != 0 || W % 2 != 0) {
        raise(ErrorCode::ShapeMismatch, "condenser: spatial dims " + std::to_string(H) + "x" +
                                            std::to_string(W) +
                                            " must be even; pad the input before condensing");
    }
    auto h = ops::maxpool2d(tape, v, {2, 2}, {2, 2});
    h = embeds[0].forward(tape, h);
    for (std::size_t i = 1; i < embeds.size(); ++i) {
        h = ops::relu(tape, h);
        h = embeds[i].forward(tape, h);
    }
    h = ops::upsample_nearest(tape, h, 2);
    return expand_pw.forward(tape, h);
}

void CondenserBranch::collect(const std::string& prefix, NamedTensors& out) const {
    for (std::size_t i = 0; i < embeds.size(); ++i) {
        embeds[i].collect(prefix + ".embed" + std::to_string(i), out);
    }
    expand_pw.collect(prefix + ".expand", out);
}

DcacModule::DcacModule(int channels, int reduction, Rng& rng)
    : branch_a(channels, reduction, 1, rng), branch_b(channels, reduction, 2, rng) {}

TensorPtr DcacModule::forward(Tape* tape, const TensorPtr& v) const {
    auto pa = branch_a.forward(tape, v);
    auto pb = branch_b.forward(tape, v);
    if (pa->shape != pb->shape) {
        raise(ErrorCode::ShapeMismatch, "dcac: branch outputs disagree, " + shape_str(pa->shape) +
                                            " vs " + shape_str(pb->shape));
    }
    auto attention = ops::sigmoid(tape, ops::add(tape, pa, pb));
    return ops::mul(tape, v, attention);
}

void DcacModule::collect(const std::string& prefix, NamedTensors& out) const {
    branch_a.collect(prefix + ".a", out);
    branch_b.collect(prefix + ".b", out);
}

Aads::Aads(int channels) {
    kernel = Tensor::zeros({channels, 1, 3, 3});
    // outer([1,2,1],[1,2,1]) / 16
    const double k[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < 9; ++i)
            kernel->data[static_cast<std::size_t>(c * 9 + i)] = k[i] / 16.0;
}

TensorPtr Aads::forward(Tape* tape, const TensorPtr& v) const {
    const int groups = static_cast<int>(kernel->extent(0));
    if (v->rank() != 4 || v->extent(1) != groups) {
        raise(ErrorCode::ShapeMismatch, "aads: input shape " + shape_str(v->shape) +
                                            " does not carry " + std::to_string(groups) +
                                            " channels");
    }
    auto padded = ops::pad2d_reflect1(tape, v);
    return ops::conv2d(tape, padded, kernel, nullptr, {2, 2}, {0, 0}, groups);
}

void Aads::collect(const std::string& prefix, NamedTensors& out) const {
    out.buffers.push_back({prefix + ".kernel", kernel});
}

}  // namespace dcac
