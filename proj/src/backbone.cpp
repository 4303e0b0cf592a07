#include "dcac/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace dcac {

using nlohmann::json;

namespace {

std::int64_t conv_out_extent(std::int64_t n, int kernel, int stride, int pad) {
    return (n + 2 * pad - kernel) / stride + 1;
}

std::int64_t ceil_div2(std::int64_t n) { return (n + 1) / 2; }

const json& require_field(const json& j, const char* field, const std::string& where) {
    if (!j.contains(field)) {
        raise(ErrorCode::ConfigError, "config: missing field '" + where + field + "'");
    }
    return j.at(field);
}

int require_int(const json& j, const char* field, const std::string& where) {
    const auto& v = require_field(j, field, where);
    if (!v.is_number_integer()) {
        raise(ErrorCode::ConfigError, "config: field '" + where + field + "' must be an integer");
    }
    return v.get<int>();
}

bool require_bool(const json& j, const char* field, const std::string& where) {
    const auto& v = require_field(j, field, where);
    if (!v.is_boolean()) {
        raise(ErrorCode::ConfigError, "config: field '" + where + field + "' must be a boolean");
    }
    return v.get<bool>();
}

StageSpec stage_from_json(const json& j, const std::string& where) {
    StageSpec s;
    s.conv_channels = require_int(j, "conv_channels", where);
    s.dcac_count = require_int(j, "dcac_count", where);
    s.downsample = require_bool(j, "downsample", where);
    return s;
}

json stage_to_json(const StageSpec& s) {
    return json{{"conv_channels", s.conv_channels},
                {"dcac_count", s.dcac_count},
                {"downsample", s.downsample}};
}

}  // namespace

void NetworkConfig::validate() const {
    if (format_version != 1) {
        raise(ErrorCode::VersionMismatch,
              "config: unsupported format_version " + std::to_string(format_version));
    }
    if (input_channels < 1 || input_height < 1 || input_width < 1) {
        raise(ErrorCode::ConfigError, "config: input_size extents must be positive");
    }
    if (stem.channels < 1) raise(ErrorCode::ConfigError, "config: stem.channels must be positive");
    if (stem.stride < 1 || stem.stride > 2) {
        raise(ErrorCode::ConfigError, "config: stem.stride must be 1 or 2");
    }
    if (channel_reduction < 1) {
        raise(ErrorCode::ConfigError, "config: channel_reduction must be positive");
    }
    if (branches.size() != 4) {
        raise(ErrorCode::ConfigError, "config: branches must list exactly 4 computation branches, got " +
                                          std::to_string(branches.size()));
    }
    auto check_stages = [](const std::vector<StageSpec>& stages, const std::string& where) {
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto tag = where + ".stages[" + std::to_string(i) + "]";
            if (stages[i].conv_channels < 1) {
                raise(ErrorCode::ConfigError, "config: " + tag + ".conv_channels must be positive");
            }
            if (stages[i].dcac_count < 0) {
                raise(ErrorCode::ConfigError, "config: " + tag + ".dcac_count must be >= 0");
            }
        }
    };
    for (std::size_t b = 0; b < branches.size(); ++b) {
        const auto where = "branches[" + std::to_string(b) + "]";
        if (branches[b].empty()) {
            raise(ErrorCode::ConfigError,
                  "config: " + where + " must run at least one stage before any merge");
        }
        check_stages(branches[b], where);
    }
    if (merge_plan.empty()) {
        raise(ErrorCode::ConfigError, "config: merge_plan must contain at least one merge");
    }

    // Stream bookkeeping: branches are streams 0..3, each merge appends one.
    auto scale_of = [](const std::vector<StageSpec>& stages, std::int64_t base) {
        for (const auto& s : stages)
            if (s.downsample) base *= 2;
        return base;
    };
    std::vector<std::int64_t> scales;
    std::vector<bool> consumed;
    for (const auto& b : branches) {
        scales.push_back(scale_of(b, 1));
        consumed.push_back(false);
    }
    for (std::size_t m = 0; m < merge_plan.size(); ++m) {
        const auto& merge = merge_plan[m];
        const auto where = "merge_plan[" + std::to_string(m) + "]";
        if (merge.inputs.size() < 2) {
            raise(ErrorCode::ConfigError, "config: " + where + ".inputs needs at least 2 streams");
        }
        if (merge.mix_channels < 1) {
            raise(ErrorCode::ConfigError, "config: " + where + ".mix_channels must be positive");
        }
        check_stages(merge.stages, where);
        std::int64_t scale = -1;
        for (int idx : merge.inputs) {
            if (idx < 0 || idx >= static_cast<int>(scales.size())) {
                raise(ErrorCode::ConfigError, "config: " + where + ".inputs references stream " +
                                                  std::to_string(idx) + " which does not exist yet");
            }
            if (consumed[static_cast<std::size_t>(idx)]) {
                raise(ErrorCode::ConfigError, "config: " + where + ".inputs reuses stream " +
                                                  std::to_string(idx) + " already merged");
            }
            consumed[static_cast<std::size_t>(idx)] = true;
            const auto s = scales[static_cast<std::size_t>(idx)];
            if (scale == -1) scale = s;
            if (s != scale) {
                raise(ErrorCode::ConfigError, "config: " + where +
                                                  ".inputs mixes streams at different spatial scales");
            }
        }
        scales.push_back(scale_of(merge.stages, scale));
        consumed.push_back(false);
    }
    int live = 0;
    for (std::size_t i = 0; i < consumed.size(); ++i)
        if (!consumed[i]) ++live;
    if (live != 1 || consumed.back()) {
        raise(ErrorCode::ConfigError,
              "config: merge_plan must leave exactly the final merged stream unconsumed");
    }
    if (tail_channels < 1) raise(ErrorCode::ConfigError, "config: tail_channels must be positive");
    if (head_outputs != 1) {
        raise(ErrorCode::ConfigError, "config: head.outputs must be 1 for binary classification");
    }
}

std::int64_t NetworkConfig::total_downsample_factor() const {
    auto count = [](const std::vector<StageSpec>& stages) {
        std::int64_t f = 1;
        for (const auto& s : stages)
            if (s.downsample) f *= 2;
        return f;
    };
    // Track each stream's scale; merge inputs sit at equal scales (validated),
    // so the final stream's scale is the network stride.
    std::vector<std::int64_t> scales;
    for (const auto& b : branches) scales.push_back(stem.stride * count(b));
    for (const auto& m : merge_plan) {
        scales.push_back(scales.at(static_cast<std::size_t>(m.inputs.at(0))) * count(m.stages));
    }
    return scales.back();
}

json NetworkConfig::to_json() const {
    json branches_j = json::array();
    for (const auto& b : branches) {
        json stages = json::array();
        for (const auto& s : b) stages.push_back(stage_to_json(s));
        branches_j.push_back(stages);
    }
    json merges_j = json::array();
    for (const auto& m : merge_plan) {
        json stages = json::array();
        for (const auto& s : m.stages) stages.push_back(stage_to_json(s));
        merges_j.push_back(
            json{{"inputs", m.inputs}, {"mix_channels", m.mix_channels}, {"stages", stages}});
    }
    return json{
        {"format_version", format_version},
        {"input_size",
         {{"channels", input_channels}, {"height", input_height}, {"width", input_width}}},
        {"stem", {{"channels", stem.channels}, {"stride", stem.stride}}},
        {"branches", branches_j},
        {"merge_plan", merges_j},
        {"tail_channels", tail_channels},
        {"head", {{"outputs", head_outputs}}},
        {"channel_reduction", channel_reduction},
    };
}

NetworkConfig NetworkConfig::from_json(const json& j) {
    NetworkConfig c;
    c.format_version = require_int(j, "format_version", "");
    if (c.format_version != 1) {
        raise(ErrorCode::VersionMismatch,
              "config: unsupported format_version " + std::to_string(c.format_version));
    }
    const auto& in = require_field(j, "input_size", "");
    c.input_channels = require_int(in, "channels", "input_size.");
    c.input_height = require_int(in, "height", "input_size.");
    c.input_width = require_int(in, "width", "input_size.");
    const auto& stem_j = require_field(j, "stem", "");
    c.stem.channels = require_int(stem_j, "channels", "stem.");
    c.stem.stride = require_int(stem_j, "stride", "stem.");
    const auto& branches_j = require_field(j, "branches", "");
    if (!branches_j.is_array()) raise(ErrorCode::ConfigError, "config: branches must be an array");
    c.branches.clear();
    for (std::size_t b = 0; b < branches_j.size(); ++b) {
        const auto& stages_j = branches_j.at(b);
        const auto where = "branches[" + std::to_string(b) + "].";
        if (!stages_j.is_array()) {
            raise(ErrorCode::ConfigError, "config: " + where + " must be an array of stages");
        }
        std::vector<StageSpec> stages;
        for (const auto& s : stages_j) stages.push_back(stage_from_json(s, where));
        c.branches.push_back(std::move(stages));
    }
    const auto& merges_j = require_field(j, "merge_plan", "");
    if (!merges_j.is_array()) raise(ErrorCode::ConfigError, "config: merge_plan must be an array");
    c.merge_plan.clear();
    for (std::size_t m = 0; m < merges_j.size(); ++m) {
        const auto& mj = merges_j.at(m);
        const auto where = "merge_plan[" + std::to_string(m) + "].";
        MergeSpec spec;
        const auto& inputs = require_field(mj, "inputs", where);
        if (!inputs.is_array()) {
            raise(ErrorCode::ConfigError, "config: " + where + "inputs must be an array");
        }
        for (const auto& v : inputs) spec.inputs.push_back(v.get<int>());
        spec.mix_channels = require_int(mj, "mix_channels", where);
        const auto& stages_j = require_field(mj, "stages", where);
        for (const auto& s : stages_j) spec.stages.push_back(stage_from_json(s, where));
        c.merge_plan.push_back(std::move(spec));
    }
    c.tail_channels = require_int(j, "tail_channels", "");
    c.head_outputs = require_int(require_field(j, "head", ""), "outputs", "head.");
    if (j.contains("channel_reduction")) c.channel_reduction = require_int(j, "channel_reduction", "");
    c.validate();
    return c;
}

NetworkConfig NetworkConfig::paper_scale() {
    // Widths/depths tuned with analyze() to land on the published footprint:
    // ~1.61M parameters, ~0.338G multiply-accumulates at 3x160x160.
    NetworkConfig c;
    c.stem = {8, 2};
    c.branches = {
        {{14, 1, false}, {34, 1, true}, {72, 1, true}},
        {{18, 1, false}, {42, 2, true}, {80, 2, true}},
        {{22, 2, false}, {50, 2, true}, {88, 2, true}},
        {{26, 2, false}, {58, 3, true}, {96, 3, true}},
    };
    c.merge_plan = {
        {{0, 1}, 128, {{168, 2, true}}},
        {{2, 3}, 144, {{184, 3, true}}},
        {{4, 5}, 184, {{216, 2, false}}},
    };
    c.tail_channels = 480;
    return c;
}

NetworkConfig NetworkConfig::tiny() {
    // paper_scale widths divided by 8 (rounded up), 32x32 input.
    NetworkConfig c;
    c.input_height = 32;
    c.input_width = 32;
    c.stem = {1, 2};
    c.branches = {
        {{2, 1, false}, {5, 1, true}, {9, 1, true}},
        {{3, 1, false}, {6, 2, true}, {10, 2, true}},
        {{3, 2, false}, {7, 2, true}, {11, 2, true}},
        {{4, 2, false}, {8, 3, true}, {12, 3, true}},
    };
    c.merge_plan = {
        {{0, 1}, 16, {{21, 2, true}}},
        {{2, 3}, 18, {{23, 3, true}}},
        {{4, 5}, 23, {{27, 2, false}}},
    };
    c.tail_channels = 60;
    return c;
}

NetworkConfig NetworkConfig::preset(const std::string& name) {
    if (name == "paper_scale") return paper_scale();
    if (name == "tiny") return tiny();
    raise(ErrorCode::ConfigError, "config: unknown preset '" + name + "' (use paper_scale or tiny)");
}

namespace {

Stage build_stage(const StageSpec& spec, int in_channels, int reduction, Rng& rng) {
    Stage st;
    if (spec.downsample) st.down.emplace(in_channels);
    st.conv = ConvBlock(in_channels, spec.conv_channels, 3, {1, 1}, rng);
    for (int i = 0; i < spec.dcac_count; ++i) {
        st.dcacs.emplace_back(spec.conv_channels, reduction, rng);
    }
    return st;
}

TensorPtr run_stage(Tape* tape, const Stage& st, TensorPtr h, bool training) {
    if (st.down) h = st.down->forward(tape, h);
    h = st.conv.forward(tape, h, training);
    for (const auto& m : st.dcacs) {
        const auto H = h->extent(2), W = h->extent(3);
        if (H % 2 != 0 || W % 2 != 0) {
            auto padded = ops::pad2d_zero_br(tape, h, static_cast<int>(H % 2),
                                             static_cast<int>(W % 2));
            h = ops::crop2d_br(tape, m.forward(tape, padded), H, W);
        } else {
            h = m.forward(tape, h);
        }
    }
    return h;
}

void collect_stage(const Stage& st, const std::string& prefix, NamedTensors& out) {
    if (st.down) st.down->collect(prefix + ".down", out);
    st.conv.collect(prefix + ".conv", out);
    for (std::size_t i = 0; i < st.dcacs.size(); ++i) {
        st.dcacs[i].collect(prefix + ".dcac" + std::to_string(i), out);
    }
}

}  // namespace

Network build_network(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Network net;
    net.config = config;
    Rng rng(seed);

    net.stem = ConvBlock(config.input_channels, config.stem.channels, 3,
                         {config.stem.stride, config.stem.stride}, rng);

    std::vector<int> stream_channels;
    for (const auto& branch : config.branches) {
        std::vector<Stage> stages;
        int ch = config.stem.channels;
        for (const auto& spec : branch) {
            stages.push_back(build_stage(spec, ch, config.channel_reduction, rng));
            ch = spec.conv_channels;
        }
        net.branches.push_back(std::move(stages));
        stream_channels.push_back(ch);
    }
    for (const auto& spec : config.merge_plan) {
        MergeUnit unit;
        unit.inputs = spec.inputs;
        int concat_ch = 0;
        for (int idx : spec.inputs) concat_ch += stream_channels.at(static_cast<std::size_t>(idx));
        unit.mix = ConvBlock(concat_ch, spec.mix_channels, 1, {1, 1}, rng);
        int ch = spec.mix_channels;
        for (const auto& st : spec.stages) {
            unit.stages.push_back(build_stage(st, ch, config.channel_reduction, rng));
            ch = st.conv_channels;
        }
        net.merges.push_back(std::move(unit));
        stream_channels.push_back(ch);
    }
    net.tail = ConvBlock(stream_channels.back(), config.tail_channels, 1, {1, 1}, rng);

    const double bound = std::sqrt(6.0 / static_cast<double>(config.tail_channels));
    net.head_weight =
        Tensor::zeros({config.head_outputs, config.tail_channels}, /*requires_grad=*/true);
    for (auto& v : net.head_weight->data) v = rng.uniform(-bound, bound);
    net.head_bias = Tensor::zeros({config.head_outputs}, /*requires_grad=*/true);
    return net;
}

TensorPtr Network::forward(Tape* tape, const TensorPtr& batch, bool training) const {
    if (batch->rank() != 4 || batch->extent(1) != config.input_channels) {
        raise(ErrorCode::ShapeMismatch,
              "forward: expected input [N," + std::to_string(config.input_channels) +
                  ",H,W], got " + shape_str(batch->shape));
    }
    const auto factor = config.total_downsample_factor();
    if (batch->extent(2) < factor || batch->extent(3) < factor) {
        raise(ErrorCode::ShapeMismatch,
              "forward: spatial dims " + std::to_string(batch->extent(2)) + "x" +
                  std::to_string(batch->extent(3)) + " below the minimum " +
                  std::to_string(factor) + "x" + std::to_string(factor) +
                  " required by the downsampling factor");
    }

    auto stem_out = stem.forward(tape, batch, training);
    std::vector<TensorPtr> streams;
    for (const auto& branch : branches) {
        auto h = stem_out;
        for (const auto& st : branch) h = run_stage(tape, st, h, training);
        streams.push_back(h);
    }
    for (const auto& merge : merges) {
        std::vector<TensorPtr> ins;
        for (int idx : merge.inputs) ins.push_back(streams.at(static_cast<std::size_t>(idx)));
        auto h = ops::concat_channels(tape, ins);
        h = merge.mix.forward(tape, h, training);
        for (const auto& st : merge.stages) h = run_stage(tape, st, h, training);
        streams.push_back(h);
    }
    auto h = tail.forward(tape, streams.back(), training);
    h = ops::global_avg_pool(tape, h);
    return ops::linear(tape, h, head_weight, head_bias);
}

NamedTensors Network::named_tensors() const {
    NamedTensors out;
    stem.collect("stem", out);
    for (std::size_t b = 0; b < branches.size(); ++b) {
        for (std::size_t s = 0; s < branches[b].size(); ++s) {
            collect_stage(branches[b][s],
                          "branch" + std::to_string(b) + ".stage" + std::to_string(s), out);
        }
    }
    for (std::size_t m = 0; m < merges.size(); ++m) {
        const auto prefix = "merge" + std::to_string(m);
        merges[m].mix.collect(prefix + ".mix", out);
        for (std::size_t s = 0; s < merges[m].stages.size(); ++s) {
            collect_stage(merges[m].stages[s], prefix + ".stage" + std::to_string(s), out);
        }
    }
    tail.collect("tail", out);
    out.params.push_back({"head.weight", head_weight});
    out.params.push_back({"head.bias", head_bias});
    return out;
}

std::vector<TensorPtr> Network::trainable_params() const {
    std::vector<TensorPtr> out;
    for (const auto& p : named_tensors().params) {
        if (p.tensor->requires_grad) out.push_back(p.tensor);
    }
    return out;
}

void Network::set_frozen(FreezeScope scope) {
    const bool freeze_body = scope == FreezeScope::all_but_head;
    for (const auto& p : named_tensors().params) {
        const bool is_head = p.name == "head.weight" || p.name == "head.bias";
        p.tensor->requires_grad = is_head || !freeze_body;
    }
    auto set_bn = [&](BatchNorm2d& bn) { bn.frozen = freeze_body; };
    set_bn(stem.bn);
    for (auto& branch : branches)
        for (auto& st : branch) set_bn(st.conv.bn);
    for (auto& merge : merges) {
        set_bn(merge.mix.bn);
        for (auto& st : merge.stages) set_bn(st.conv.bn);
    }
    set_bn(tail.bn);
}

namespace {

std::int64_t tensors_numel(const NamedTensors& nt) {
    std::int64_t n = 0;
    for (const auto& p : nt.params) n += p.tensor->numel();
    return n;
}

std::int64_t module_params(const auto& module) {
    NamedTensors nt;
    module.collect("x", nt);
    return tensors_numel(nt);
}

struct FootprintWalker {
    FootprintReport rep;

    void row(const std::string& name, std::int64_t params, std::int64_t macs, Shape shape) {
        std::int64_t elems = 1;
        for (auto e : shape) elems *= e;
        rep.peak_activation_elems = std::max(rep.peak_activation_elems, elems);
        rep.layers.push_back({name, params, macs, std::move(shape)});
    }

    // Conv block: 3x3 or 1x1 conv (+bias, +norm scale/shift), at stride.
    void conv_block(const std::string& name, const ConvBlock& cb, std::int64_t& c, std::int64_t& h,
                    std::int64_t& w) {
        const auto kh = cb.conv.weight->extent(2);
        const auto cout = cb.conv.weight->extent(0);
        const auto cg = cb.conv.weight->extent(1);
        h = conv_out_extent(h, static_cast<int>(kh), cb.conv.stride.first, cb.conv.padding.first);
        w = conv_out_extent(w, static_cast<int>(kh), cb.conv.stride.second,
                            cb.conv.padding.second);
        const auto macs = cout * cg * kh * kh * h * w;
        row(name, module_params(cb), macs, {1, cout, h, w});
        c = cout;
    }

    void aads(const std::string& name, std::int64_t c, std::int64_t& h, std::int64_t& w) {
        h = ceil_div2(h);
        w = ceil_div2(w);
        row(name, 0, 9 * c * h * w, {1, c, h, w});
    }

    void dcac(const std::string& name, const DcacModule& m, std::int64_t c, std::int64_t h,
              std::int64_t w) {
        const std::int64_t cmid = m.branch_a.cmid;
        const std::int64_t he = h + (h % 2), we = w + (w % 2);
        const std::int64_t hc = he / 2, wc = we / 2;
        // Branch A: depthwise 3x3 + pointwise C->Cmid on the condensed map,
        // then pointwise expansion Cmid->C at full resolution.
        std::int64_t macs = 9 * c * hc * wc + c * cmid * hc * wc + cmid * c * he * we;
        // Branch B repeats A's shape with one extra embedding layer.
        macs += 9 * c * hc * wc + c * cmid * hc * wc;
        macs += 9 * cmid * hc * wc + cmid * cmid * hc * wc;
        macs += cmid * c * he * we;
        row(name, module_params(m), macs, {1, c, h, w});
    }

    void stage(const std::string& prefix, const Stage& st, std::int64_t& c, std::int64_t& h,
               std::int64_t& w) {
        if (st.down) aads(prefix + ".down", c, h, w);
        conv_block(prefix + ".conv", st.conv, c, h, w);
        for (std::size_t i = 0; i < st.dcacs.size(); ++i) {
            dcac(prefix + ".dcac" + std::to_string(i), st.dcacs[i], c, h, w);
        }
    }
};

}  // namespace

json FootprintReport::to_json() const {
    json layers_j = json::array();
    for (const auto& l : layers) {
        layers_j.push_back({{"name", l.name},
                            {"params", l.params},
                            {"macs", l.macs},
                            {"out_shape", l.out_shape}});
    }
    return json{{"layers", layers_j},
                {"total_params", total_params},
                {"total_macs", total_macs},
                {"total_flops", total_flops},
                {"total_flops_fused_multiply_add_counted_twice", 2 * total_macs},
                {"peak_activation_elems", peak_activation_elems}};
}

FootprintReport analyze(const NetworkConfig& config) {
    return analyze(config, config.input_height, config.input_width);
}

FootprintReport analyze(const NetworkConfig& config, int height, int width) {
    config.validate();
    // Parameter counts come from an actual instantiation so the report can
    // never drift from the real tensor inventory.
    Network net = build_network(config, 0);

    FootprintWalker walk;
    std::int64_t c = config.input_channels, h = height, w = width;
    walk.rep.peak_activation_elems = c * h * w;

    walk.conv_block("stem", net.stem, c, h, w);
    const std::int64_t stem_c = c, stem_h = h, stem_w = w;

    struct StreamDims {
        std::int64_t c, h, w;
    };
    std::vector<StreamDims> streams;
    for (std::size_t b = 0; b < net.branches.size(); ++b) {
        std::int64_t bc = stem_c, bh = stem_h, bw = stem_w;
        for (std::size_t s = 0; s < net.branches[b].size(); ++s) {
            walk.stage("branch" + std::to_string(b) + ".stage" + std::to_string(s),
                       net.branches[b][s], bc, bh, bw);
        }
        streams.push_back({bc, bh, bw});
    }
    for (std::size_t m = 0; m < net.merges.size(); ++m) {
        const auto prefix = "merge" + std::to_string(m);
        const auto& unit = net.merges[m];
        std::int64_t cc = 0;
        const auto& first = streams.at(static_cast<std::size_t>(unit.inputs.at(0)));
        for (int idx : unit.inputs) cc += streams.at(static_cast<std::size_t>(idx)).c;
        std::int64_t mh = first.h, mw = first.w;
        walk.row(prefix + ".concat", 0, 0, {1, cc, mh, mw});
        walk.conv_block(prefix + ".mix", unit.mix, cc, mh, mw);
        for (std::size_t s = 0; s < unit.stages.size(); ++s) {
            walk.stage(prefix + ".stage" + std::to_string(s), unit.stages[s], cc, mh, mw);
        }
        streams.push_back({cc, mh, mw});
    }
    auto [tc, th, tw] = streams.back();
    walk.conv_block("tail", net.tail, tc, th, tw);
    walk.row("global_avg_pool", 0, 0, {1, tc});
    walk.row("head",
             net.head_weight->numel() + net.head_bias->numel(),
             net.head_weight->numel(), {1, config.head_outputs});

    auto rep = std::move(walk.rep);
    for (const auto& l : rep.layers) {
        rep.total_params += l.params;
        rep.total_macs += l.macs;
    }
    rep.total_flops = rep.total_macs;
    return rep;
}

}  // namespace dcac
