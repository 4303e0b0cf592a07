#pragma once

#include <string>
#include <vector>

#include "dcac/ops.hpp"
#include "dcac/rng.hpp"
#include "dcac/tensor.hpp"

namespace dcac {

struct NamedTensor {
    std::string name;
    TensorPtr tensor;
};

// Learnable parameters and persistent non-learnable state (running statistics,
// fixed kernels), each in stable declaration order.
struct NamedTensors {
    std::vector<NamedTensor> params;
    std::vector<NamedTensor> buffers;
};

struct Conv2d {
    TensorPtr weight;
    TensorPtr bias;  // may be null
    ops::IntPair stride{1, 1};
    ops::IntPair padding{0, 0};
    int groups = 1;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, ops::IntPair stride, ops::IntPair padding,
           int groups, bool with_bias, Rng& rng);
    TensorPtr forward(Tape* tape, const TensorPtr& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BatchNorm2d {
    TensorPtr gamma, beta, running_mean, running_var;
    // A frozen norm behaves as in inference: running statistics normalize and
    // are not updated, regardless of the training flag.
    bool frozen = false;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);
    TensorPtr forward(Tape* tape, const TensorPtr& x, bool training) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

// conv -> batch norm -> relu
struct ConvBlock {
    Conv2d conv;
    BatchNorm2d bn;

    ConvBlock() = default;
    ConvBlock(int in_ch, int out_ch, int kernel, ops::IntPair stride, Rng& rng);
    TensorPtr forward(Tape* tape, const TensorPtr& x, bool training) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

// Depthwise 3x3 (pad 1) followed by pointwise 1x1; no activation of its own.
struct EmbedLayer {
    Conv2d depthwise;
    Conv2d pointwise;

    EmbedLayer() = default;
    EmbedLayer(int in_ch, int out_ch, Rng& rng);
    TensorPtr forward(Tape* tape, const TensorPtr& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

// One attention-condenser branch: spatial condense (maxpool 2x2/2), one or two
// embedding layers (ReLU between stacked embeddings only), then expansion back
// to the input resolution and channel count. Produces pre-activation
// projections; the sigmoid lives in the fusing module.
struct CondenserBranch {
    int channels = 0;
    int cmid = 0;
    std::vector<EmbedLayer> embeds;
    Conv2d expand_pw;

    CondenserBranch() = default;
    CondenserBranch(int channels, int reduction, int num_embeds, Rng& rng);
    TensorPtr forward(Tape* tape, const TensorPtr& v) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

// Double-condensing attention module: two condenser branches (the second with
// two embedding layers), fused additively under one sigmoid, gating the input.
struct DcacModule {
    CondenserBranch branch_a;
    CondenserBranch branch_b;

    DcacModule() = default;
    DcacModule(int channels, int reduction, Rng& rng);
    TensorPtr forward(Tape* tape, const TensorPtr& v) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

// Anti-aliased downsampling: fixed 3x3 binomial blur (depthwise, reflection
// padding) followed by stride-2 subsampling from index 0. The kernel is
// persistent state but never learnable.
struct Aads {
    TensorPtr kernel;  // [C,1,3,3]

    Aads() = default;
    explicit Aads(int channels);
    TensorPtr forward(Tape* tape, const TensorPtr& v) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace dcac
