#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcac/layers.hpp"

namespace dcac {

// One stage of a computation stream: optional anti-aliased downsample, a 3x3
// conv block setting the width, then zero or more DC-AC blocks at that width.
struct StageSpec {
    int conv_channels = 0;
    int dcac_count = 0;
    bool downsample = false;
};

// Concatenate the listed streams along channels, mix with a 1x1 conv block,
// then run more stages on the merged stream.
struct MergeSpec {
    std::vector<int> inputs;
    int mix_channels = 0;
    std::vector<StageSpec> stages;
};

struct NetworkConfig {
    int format_version = 1;
    int input_channels = 3;
    int input_height = 160;
    int input_width = 160;
    struct {
        int channels = 8;
        int stride = 2;
    } stem;
    std::vector<std::vector<StageSpec>> branches;  // exactly 4
    std::vector<MergeSpec> merge_plan;
    int tail_channels = 0;
    int head_outputs = 1;
    int channel_reduction = 4;  // DC-AC bottleneck ratio r

    // Raises ConfigError naming the offending field.
    void validate() const;
    // Overall stride from input to the final feature map.
    std::int64_t total_downsample_factor() const;

    nlohmann::json to_json() const;
    static NetworkConfig from_json(const nlohmann::json& j);

    static NetworkConfig paper_scale();
    static NetworkConfig tiny();
    static NetworkConfig preset(const std::string& name);  // "paper_scale" | "tiny"
};

struct Stage {
    std::optional<Aads> down;
    ConvBlock conv;
    std::vector<DcacModule> dcacs;
};

struct MergeUnit {
    std::vector<int> inputs;
    ConvBlock mix;
    std::vector<Stage> stages;
};

enum class FreezeScope { none, all_but_head };

class Network {
  public:
    NetworkConfig config;
    ConvBlock stem;
    std::vector<std::vector<Stage>> branches;
    std::vector<MergeUnit> merges;
    ConvBlock tail;
    TensorPtr head_weight, head_bias;

    // Raw logits [N,1]. `training` selects batch-norm behaviour.
    TensorPtr forward(Tape* tape, const TensorPtr& batch, bool training) const;

    // Every learnable parameter and persistent buffer, in stable declaration
    // order (the checkpoint contract).
    NamedTensors named_tensors() const;
    std::vector<TensorPtr> trainable_params() const;
    void set_frozen(FreezeScope scope);
};

Network build_network(const NetworkConfig& config, std::uint64_t seed);

struct LayerFootprint {
    std::string name;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    Shape out_shape;
};

struct FootprintReport {
    std::vector<LayerFootprint> layers;
    std::int64_t total_params = 0;
    std::int64_t total_macs = 0;
    // Reported FLOPs counts one multiply-accumulate as one FLOP; the
    // double-counting convention is total_macs * 2.
    std::int64_t total_flops = 0;
    std::int64_t peak_activation_elems = 0;
    nlohmann::json to_json() const;
};

// Parameter and multiply-accumulate accounting for a batch of one at the
// config's input size (or an override).
FootprintReport analyze(const NetworkConfig& config);
FootprintReport analyze(const NetworkConfig& config, int height, int width);

}  // namespace dcac
