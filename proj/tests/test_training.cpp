#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "dcac/image.hpp"
#include "dcac/rng.hpp"
#include "dcac/training.hpp"
#include "oracles.hpp"

using namespace dcac;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
void expect_code(Fn&& fn, ErrorCode code) {
    try {
        fn();
        FAIL_CHECK("expected an error with code " << error_code_name(code));
    } catch (const Error& e) {
        CHECK(e.code() == code);
    }
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

fs::path fresh_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("dcac_training_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Patch the stored CRC after editing checkpoint bytes in place.
void refresh_crc(std::string& bytes) {
    REQUIRE(bytes.size() > 4);
    const std::size_t body = bytes.size() - 4;
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
    for (int i = 0; i < 4; ++i)
        bytes[body + static_cast<std::size_t>(i)] = static_cast<char>((crc >> (8 * i)) & 0xff);
}

// Small labeled image corpus: malignant images are bright with a hot spot,
// benign ones are dark, so the classes are easy to separate.
struct Fixture {
    fs::path root;
    Manifest train_m;
    Manifest val_m;
};

void write_lesion_image(const fs::path& path, int label, Rng& rng) {
    auto img = Tensor::zeros({3, 32, 32});
    const double base = label ? 0.70 : 0.25;
    for (auto& v : img->data) v = std::clamp(base + 0.10 * (rng.uniform() - 0.5), 0.0, 1.0);
    if (label) {
        for (std::int64_t y = 10; y < 22; ++y) {
            for (std::int64_t x = 10; x < 22; ++x) {
                img->data[static_cast<std::size_t>(y * 32 + x)] =
                    std::min(1.0, img->data[static_cast<std::size_t>(y * 32 + x)] + 0.25);
            }
        }
    }
    save_png(path.string(), img);
}

Fixture make_fixture(const std::string& tag, int train_images = 12, int val_images = 6) {
    Fixture fx;
    fx.root = fresh_dir(tag);
    Rng rng(4242);
    std::vector<SampleRecord> tr, va;
    for (int i = 0; i < train_images; ++i) {
        SampleRecord r;
        r.image_name = "tr_" + std::to_string(i);
        r.patient_id = "TP" + std::to_string(i / 2);
        r.target = (i % 3 == 0) ? 1 : 0;
        write_lesion_image(fx.root / (r.image_name + ".png"), r.target, rng);
        tr.push_back(r);
    }
    for (int i = 0; i < val_images; ++i) {
        SampleRecord r;
        r.image_name = "va_" + std::to_string(i);
        r.patient_id = "VP" + std::to_string(i / 2);
        r.target = (i % 3 == 0) ? 1 : 0;
        write_lesion_image(fx.root / (r.image_name + ".png"), r.target, rng);
        va.push_back(r);
    }
    fx.train_m = Manifest::from_records(tr);
    fx.val_m = Manifest::from_records(va);
    return fx;
}

TrainConfig small_cfg() {
    TrainConfig cfg;
    cfg.phase1 = {2, 1e-3};
    cfg.phase2 = {2, 1e-4};
    cfg.batch_size = 4;
    cfg.seed = 1234;
    return cfg;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("cosine schedule hits its endpoints exactly and never increases") {
    CHECK(cosine_lr(0, 80, 5e-5, 0.0) == 5e-5);
    CHECK(cosine_lr(80, 80, 5e-5, 0.0) == 0.0);
    CHECK(cosine_lr(40, 80, 5e-5, 0.0) == doctest::Approx(2.5e-5).epsilon(1e-12));

    CHECK(cosine_lr(0, 10, 3e-4, 1e-6) == 3e-4);
    CHECK(cosine_lr(10, 10, 3e-4, 1e-6) == 1e-6);

    double prev = cosine_lr(0, 80, 5e-5, 0.0);
    for (int e = 1; e <= 80; ++e) {
        const double cur = cosine_lr(e, 80, 5e-5, 0.0);
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("cosine schedule rejects bad arguments") {
    CHECK_THROWS_WITH_AS(cosine_lr(0, 0, 1e-3, 0.0), doctest::Contains("total_epochs"), Error);
    CHECK_THROWS_WITH_AS(cosine_lr(-1, 10, 1e-3, 0.0), doctest::Contains("epoch"), Error);
    CHECK_THROWS_WITH_AS(cosine_lr(11, 10, 1e-3, 0.0), doctest::Contains("epoch"), Error);
}

TEST_CASE("adamw matches the scalar reference update for many steps") {
    const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
    auto p = Tensor::from({7}, {0.5, -0.3, 1.2, 0.0, -2.0, 0.07, 3.3}, true);
    std::vector<double> ref = p->data;
    std::vector<oracles::AdamwRefState> states(ref.size());

    AdamW opt({p}, lr, b1, b2, eps, wd);
    Rng rng(99);
    for (int t = 1; t <= 50; ++t) {
        p->ensure_grad();
        for (std::size_t j = 0; j < ref.size(); ++j) {
            const double g = rng.uniform(-1.0, 1.0);
            p->grad[j] = g;
            ref[j] = oracles::adamw_ref_step(ref[j], g, states[j], t, lr, b1, b2, eps, wd);
        }
        opt.step();
        opt.zero_grad();
    }
    CHECK(opt.steps() == 50);
    for (std::size_t j = 0; j < ref.size(); ++j)
        CHECK(p->data[j] == doctest::Approx(ref[j]).epsilon(1e-12));
}

TEST_CASE("adamw with zero gradients: identity without decay, pure shrink with it") {
    auto p = Tensor::from({3}, {1.0, -4.0, 0.25}, true);
    const std::vector<double> before = p->data;

    AdamW no_decay({p}, 0.1, 0.9, 0.999, 1e-8, 0.0);
    no_decay.step();
    CHECK(p->data == before);

    AdamW decay({p}, 0.1, 0.9, 0.999, 1e-8, 0.01);
    decay.step();
    for (std::size_t j = 0; j < before.size(); ++j)
        CHECK(p->data[j] == before[j] - 0.1 * (0.01 * before[j]));
}

TEST_CASE("adamw rejects non-finite gradients") {
    auto p = Tensor::from({2}, {1.0, 2.0}, true);
    p->ensure_grad();
    AdamW opt({p}, 1e-3, 0.9, 0.999, 1e-8, 0.01);

    p->grad[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("non-finite"), Error);

    p->grad[1] = std::numeric_limits<double>::infinity();
    expect_code([&] { opt.step(); }, ErrorCode::NumericError);
}

TEST_CASE("adamw state restore continues a run bit-exactly") {
    auto grads = [](int t, std::size_t j) {
        return std::sin(0.37 * static_cast<double>(t) + static_cast<double>(j));
    };
    auto run = [&](int from, int to, AdamW& opt, const TensorPtr& p) {
        for (int t = from; t <= to; ++t) {
            p->ensure_grad();
            for (std::size_t j = 0; j < p->data.size(); ++j) p->grad[j] = grads(t, j);
            opt.step();
            opt.zero_grad();
        }
    };

    auto a = Tensor::from({4}, {0.1, 0.2, 0.3, 0.4}, true);
    AdamW opt_a({a}, 5e-3, 0.9, 0.999, 1e-8, 0.01);
    run(1, 10, opt_a, a);
    const std::vector<double> mid = a->data;
    const auto mid_slots = opt_a.slots();
    const auto mid_steps = opt_a.steps();
    run(11, 15, opt_a, a);

    auto b = Tensor::from({4}, mid, true);
    AdamW opt_b({b}, 5e-3, 0.9, 0.999, 1e-8, 0.01);
    opt_b.restore(mid_steps, mid_slots);
    run(11, 15, opt_b, b);

    CHECK(a->data == b->data);
    CHECK(opt_a.steps() == opt_b.steps());

    AdamW bad({b}, 5e-3, 0.9, 0.999, 1e-8, 0.01);
    expect_code([&] { bad.restore(3, {}); }, ErrorCode::DataError);
    expect_code([&] { bad.restore(3, {{{0.0}, {0.0}}}); }, ErrorCode::DataError);
}

TEST_CASE("training config validation names the offending field") {
    auto bad = [](auto mutate, const char* needle) {
        TrainConfig cfg;
        mutate(cfg);
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains(needle), Error);
    };
    bad([](TrainConfig& c) { c.phase1.epochs = -1; }, "phase1.epochs");
    bad([](TrainConfig& c) { c.phase2.lr = 0.0; }, "phase2.lr");
    bad([](TrainConfig& c) { c.beta1 = 1.0; }, "beta1");
    bad([](TrainConfig& c) { c.beta2 = -0.1; }, "beta2");
    bad([](TrainConfig& c) { c.eps = 0.0; }, "eps");
    bad([](TrainConfig& c) { c.batch_size = 0; }, "batch_size");
    bad([](TrainConfig& c) { c.weight_decay = -1.0; }, "weight_decay");
    bad([](TrainConfig& c) { c.lr_min = -1e-9; }, "lr_min");
}

TEST_CASE("checkpoint round-trip preserves every field and is byte-stable") {
    const fs::path dir = fresh_dir("roundtrip");
    Network net = build_network(NetworkConfig::tiny(), 11);

    Checkpoint ckpt = snapshot_network(net);
    ckpt.phase = 2;
    ckpt.epoch = 3;
    ckpt.optimizer_steps = 17;
    ckpt.log_tail = {"{\"epoch\":1}", "{\"epoch\":2}"};
    ckpt.arrays.push_back({"optim.head.weight.m", {1, 27}, std::vector<double>(27, 0.125)});

    const fs::path path = dir / "state.ckpt";
    save_checkpoint(path.string(), ckpt);
    const Checkpoint back = load_checkpoint(path.string());

    CHECK(back.format_version == 1);
    CHECK(back.config.to_json() == net.config.to_json());
    CHECK(back.phase == 2);
    CHECK(back.epoch == 3);
    CHECK(back.optimizer_steps == 17);
    CHECK(back.log_tail == ckpt.log_tail);
    REQUIRE(back.arrays.size() == ckpt.arrays.size());
    for (std::size_t i = 0; i < back.arrays.size(); ++i) {
        CHECK(back.arrays[i].name == ckpt.arrays[i].name);
        CHECK(back.arrays[i].shape == ckpt.arrays[i].shape);
        CHECK(back.arrays[i].data == ckpt.arrays[i].data);
    }
    const NamedArray* head = back.find("head.weight");
    REQUIRE(head != nullptr);
    CHECK(back.find("no.such.tensor") == nullptr);

    const fs::path again = dir / "again.ckpt";
    save_checkpoint(again.string(), back);
    CHECK(slurp(path) == slurp(again));
}

TEST_CASE("checkpoint loader rejects damaged or foreign files") {
    const fs::path dir = fresh_dir("damage");
    Network net = build_network(NetworkConfig::tiny(), 3);
    Checkpoint ckpt = snapshot_network(net);
    const fs::path path = dir / "ok.ckpt";
    save_checkpoint(path.string(), ckpt);
    const std::string good = slurp(path);

    expect_code([&] { load_checkpoint((dir / "absent.ckpt").string()); }, ErrorCode::IoError);

    spit(dir / "tiny.ckpt", "DC");
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "tiny.ckpt").string()),
                         doctest::Contains("truncated"), Error);

    std::string wrong_magic = good;
    wrong_magic[0] = 'X';
    spit(dir / "magic.ckpt", wrong_magic);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "magic.ckpt").string()),
                         doctest::Contains("magic"), Error);

    spit(dir / "chopped.ckpt", good.substr(0, good.size() / 2));
    expect_code([&] { load_checkpoint((dir / "chopped.ckpt").string()); },
                ErrorCode::CorruptFile);

    std::string flipped = good;
    flipped[good.size() / 2] = static_cast<char>(flipped[good.size() / 2] ^ 0x40);
    spit(dir / "flipped.ckpt", flipped);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "flipped.ckpt").string()),
                         doctest::Contains("integrity"), Error);

    std::string version2 = good;
    version2[4] = 2;  // format version lives right after the magic
    refresh_crc(version2);
    spit(dir / "v2.ckpt", version2);
    expect_code([&] { load_checkpoint((dir / "v2.ckpt").string()); },
                ErrorCode::VersionMismatch);
}

TEST_CASE("network restore copies tensors by name and checks shapes") {
    Network a = build_network(NetworkConfig::tiny(), 1);
    Network b = build_network(NetworkConfig::tiny(), 2);
    const Checkpoint from_a = snapshot_network(a);

    const auto names_a = a.named_tensors();
    const auto names_b = b.named_tensors();
    REQUIRE(names_a.params.size() == names_b.params.size());
    CHECK(names_a.params[0].tensor->data != names_b.params[0].tensor->data);

    restore_network(b, from_a, /*partial=*/false);
    for (std::size_t i = 0; i < names_a.params.size(); ++i)
        CHECK(names_a.params[i].tensor->data == names_b.params[i].tensor->data);
    for (std::size_t i = 0; i < names_a.buffers.size(); ++i)
        CHECK(names_a.buffers[i].tensor->data == names_b.buffers[i].tensor->data);

    // Partial restore touches only the named tensors.
    Network c = build_network(NetworkConfig::tiny(), 5);
    Checkpoint head_only;
    head_only.config = c.config;
    head_only.arrays.push_back(
        {"head.weight", a.head_weight->shape, a.head_weight->data});
    const std::vector<double> c_stem = c.stem.conv.weight->data;
    restore_network(c, head_only, /*partial=*/true);
    CHECK(c.head_weight->data == a.head_weight->data);
    CHECK(c.stem.conv.weight->data == c_stem);
    CHECK_THROWS_WITH_AS(restore_network(c, head_only, /*partial=*/false),
                         doctest::Contains("missing tensor"), Error);

    Checkpoint bad_shape = from_a;
    bad_shape.arrays[0].shape = {1, 1, 1, 1};
    bad_shape.arrays[0].data.assign(1, 0.0);
    CHECK_THROWS_WITH_AS(restore_network(b, bad_shape, /*partial=*/false),
                         doctest::Contains("shape"), Error);
}

TEST_CASE("log entries serialize with a stable core and null for failed validation") {
    TrainLogEntry e;
    e.phase = 2;
    e.epoch = 7;
    e.lr = 1.25e-4;
    e.train_loss = 0.5;
    e.val_auroc = std::numeric_limits<double>::quiet_NaN();
    e.wall_ms = 321;

    const auto full = e.to_json();
    CHECK(full.at("phase") == 2);
    CHECK(full.at("epoch") == 7);
    CHECK(full.at("val_auroc").is_null());
    CHECK(full.at("wall_ms") == 321);

    const auto stable = e.to_json_stable();
    CHECK_FALSE(stable.contains("wall_ms"));
    e.wall_ms = 99999;
    CHECK(e.to_json_stable() == stable);

    e.val_auroc = 0.875;
    CHECK(e.to_json().at("val_auroc") == 0.875);
}

TEST_CASE("training rejects inconsistent inputs before touching any files") {
    Network net = build_network(NetworkConfig::tiny(), 7);
    TrainConfig cfg = small_cfg();

    SampleRecord r1{.image_name = "a", .patient_id = "P1", .target = 1};
    SampleRecord r2{.image_name = "b", .patient_id = "P1", .target = 0};
    SampleRecord r3{.image_name = "c", .patient_id = "P2", .target = 0};
    const Manifest m12 = Manifest::from_records({r1, r2});
    const Manifest m13 = Manifest::from_records({r1, r3});
    const Manifest m3 = Manifest::from_records({r3});

    CHECK_THROWS_WITH_AS(train_two_phase(net, Manifest{}, m3, "/nowhere", cfg),
                         doctest::Contains("training manifest is empty"), Error);
    CHECK_THROWS_WITH_AS(train_two_phase(net, m12, Manifest{}, "/nowhere", cfg),
                         doctest::Contains("validation manifest is empty"), Error);
    CHECK_THROWS_WITH_AS(train_two_phase(net, m12, m13, "/nowhere", cfg),
                         doctest::Contains("P1"), Error);

    NetworkConfig rect = NetworkConfig::tiny();
    rect.input_width = 48;
    Network wide = build_network(rect, 7);
    CHECK_THROWS_WITH_AS(train_two_phase(wide, m12, m3, "/nowhere", cfg),
                         doctest::Contains("square"), Error);

    TrainConfig bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_WITH_AS(train_two_phase(net, m12, m3, "/nowhere", bad),
                         doctest::Contains("batch_size"), Error);
}

TEST_CASE("phase one trains only the classifier head") {
    const Fixture fx = make_fixture("freeze");
    Network net = build_network(NetworkConfig::tiny(), 7);
    const Checkpoint before = snapshot_network(net);

    TrainConfig cfg = small_cfg();
    cfg.phase1 = {1, 1e-3};
    cfg.phase2 = {0, 1e-4};
    const TrainResult res = train_two_phase(net, fx.train_m, fx.val_m, fx.root.string(), cfg);

    CHECK(res.finished);
    CHECK(res.checkpoint.phase == 3);
    CHECK(res.checkpoint.epoch == 0);
    REQUIRE(res.log.size() == 1);
    CHECK(res.log[0].phase == 1);
    CHECK(res.log[0].epoch == 1);
    CHECK(res.log[0].wall_ms >= 0);

    bool head_changed = false;
    for (const auto& arr : res.checkpoint.arrays) {
        const NamedArray* orig = before.find(arr.name);
        REQUIRE(orig != nullptr);
        if (arr.name == "head.weight" || arr.name == "head.bias") {
            head_changed = head_changed || arr.data != orig->data;
        } else {
            CHECK_MESSAGE(arr.data == orig->data, arr.name << " moved during the frozen phase");
        }
    }
    CHECK(head_changed);

    // After training every parameter is trainable again.
    CHECK(net.trainable_params().size() == net.named_tensors().params.size());
}

TEST_CASE("phase two updates the body but never the fixed blur kernels") {
    const Fixture fx = make_fixture("body");
    Network net = build_network(NetworkConfig::tiny(), 7);
    const Checkpoint before = snapshot_network(net);

    TrainConfig cfg = small_cfg();
    cfg.phase1 = {0, 1e-3};
    cfg.phase2 = {1, 1e-3};
    const TrainResult res = train_two_phase(net, fx.train_m, fx.val_m, fx.root.string(), cfg);
    REQUIRE(res.log.size() == 1);
    CHECK(res.log[0].phase == 2);

    bool body_changed = false;
    bool stats_changed = false;
    int blur_kernels = 0;
    for (const auto& arr : res.checkpoint.arrays) {
        const NamedArray* orig = before.find(arr.name);
        REQUIRE(orig != nullptr);
        if (arr.name.ends_with(".down.kernel")) {
            ++blur_kernels;
            CHECK(arr.data == orig->data);
            REQUIRE(arr.data.size() % 9 == 0);
            const double want[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
            for (std::size_t j = 0; j < arr.data.size(); ++j)
                CHECK(arr.data[j] == want[j % 9] / 16.0);
        } else if (arr.name == "stem.conv.weight") {
            body_changed = body_changed || arr.data != orig->data;
        } else if (arr.name.ends_with(".running_mean")) {
            stats_changed = stats_changed || arr.data != orig->data;
        }
    }
    CHECK(blur_kernels > 0);
    CHECK(body_changed);
    CHECK(stats_changed);
}

TEST_CASE("identical runs produce identical checkpoints and logs") {
    const Fixture fx = make_fixture("determinism");
    const TrainConfig cfg = small_cfg();

    auto run = [&](const std::string& tag) {
        Network net = build_network(NetworkConfig::tiny(), 7);
        TrainOptions opts;
        opts.out_dir = (fx.root / tag).string();
        return train_two_phase(net, fx.train_m, fx.val_m, fx.root.string(), cfg, opts);
    };
    const TrainResult r1 = run("d1");
    const TrainResult r2 = run("d2");

    CHECK(slurp(fx.root / "d1" / "checkpoint_final.ckpt") ==
          slurp(fx.root / "d2" / "checkpoint_final.ckpt"));
    CHECK(slurp(fx.root / "d1" / "checkpoint_latest.ckpt") ==
          slurp(fx.root / "d2" / "checkpoint_latest.ckpt"));

    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i)
        CHECK(r1.log[i].to_json_stable() == r2.log[i].to_json_stable());

    const auto l1 = read_lines(fx.root / "d1" / "train_log.jsonl");
    const auto l2 = read_lines(fx.root / "d2" / "train_log.jsonl");
    REQUIRE(l1.size() == 4);
    REQUIRE(l2.size() == 4);
    for (std::size_t i = 0; i < l1.size(); ++i) {
        auto a = nlohmann::json::parse(l1[i]);
        auto b = nlohmann::json::parse(l2[i]);
        CHECK(a.at("wall_ms").is_number());
        a.erase("wall_ms");
        b.erase("wall_ms");
        CHECK(a == b);
    }
}

TEST_CASE("interrupted training resumes to a bit-identical final checkpoint") {
    const Fixture fx = make_fixture("resume");
    const TrainConfig cfg = small_cfg();  // 2 + 2 epochs

    Network uninterrupted = build_network(NetworkConfig::tiny(), 7);
    TrainOptions full_opts;
    full_opts.out_dir = (fx.root / "full").string();
    const TrainResult full =
        train_two_phase(uninterrupted, fx.train_m, fx.val_m, fx.root.string(), cfg, full_opts);
    CHECK(full.finished);
    CHECK(full.log.size() == 4);
    const std::string final_bytes = slurp(fx.root / "full" / "checkpoint_final.ckpt");

    // Stop mid-phase-2, then resume on a network built with a different seed:
    // everything observable must come from the checkpoint.
    Network first = build_network(NetworkConfig::tiny(), 7);
    TrainOptions stop_opts;
    stop_opts.out_dir = (fx.root / "steps").string();
    stop_opts.stop_after_epochs = 3;
    const TrainResult interrupted =
        train_two_phase(first, fx.train_m, fx.val_m, fx.root.string(), cfg, stop_opts);
    CHECK_FALSE(interrupted.finished);
    CHECK(interrupted.log.size() == 3);
    CHECK(interrupted.checkpoint.phase == 2);
    CHECK(interrupted.checkpoint.epoch == 1);
    CHECK(interrupted.checkpoint.optimizer_steps == 3);
    CHECK(interrupted.checkpoint.find("optim.head.weight.m") != nullptr);
    CHECK(interrupted.checkpoint.find("optim.stem.conv.weight.v") != nullptr);

    Network second = build_network(NetworkConfig::tiny(), 99);
    TrainOptions resume_opts;
    resume_opts.out_dir = (fx.root / "steps").string();
    resume_opts.resume_from = (fx.root / "steps" / "checkpoint_latest.ckpt").string();
    const TrainResult resumed =
        train_two_phase(second, fx.train_m, fx.val_m, fx.root.string(), cfg, resume_opts);
    CHECK(resumed.finished);
    CHECK(resumed.log.size() == 1);
    CHECK(slurp(fx.root / "steps" / "checkpoint_final.ckpt") == final_bytes);
    CHECK(read_lines(fx.root / "steps" / "train_log.jsonl").size() == 4);

    // Stopping exactly at the phase boundary stores a cursor with no
    // optimizer state; resuming from it still reproduces the full run.
    Network third = build_network(NetworkConfig::tiny(), 7);
    TrainOptions boundary_opts;
    boundary_opts.out_dir = (fx.root / "boundary").string();
    boundary_opts.stop_after_epochs = 2;
    const TrainResult at_boundary =
        train_two_phase(third, fx.train_m, fx.val_m, fx.root.string(), cfg, boundary_opts);
    CHECK_FALSE(at_boundary.finished);
    CHECK(at_boundary.checkpoint.phase == 2);
    CHECK(at_boundary.checkpoint.epoch == 0);
    CHECK(at_boundary.checkpoint.optimizer_steps == 0);
    CHECK(at_boundary.checkpoint.find("optim.head.weight.m") == nullptr);

    Network fourth = build_network(NetworkConfig::tiny(), 31);
    TrainOptions continue_opts;
    continue_opts.out_dir = (fx.root / "boundary").string();
    continue_opts.resume_from = (fx.root / "boundary" / "checkpoint_latest.ckpt").string();
    const TrainResult continued =
        train_two_phase(fourth, fx.train_m, fx.val_m, fx.root.string(), cfg, continue_opts);
    CHECK(continued.finished);
    CHECK(continued.log.size() == 2);
    CHECK(slurp(fx.root / "boundary" / "checkpoint_final.ckpt") == final_bytes);

    // A mid-phase checkpoint stripped of optimizer state cannot be resumed.
    Checkpoint stripped = interrupted.checkpoint;
    std::erase_if(stripped.arrays,
                  [](const NamedArray& a) { return a.name.starts_with("optim."); });
    const fs::path stripped_path = fx.root / "stripped.ckpt";
    save_checkpoint(stripped_path.string(), stripped);
    Network fifth = build_network(NetworkConfig::tiny(), 7);
    TrainOptions stripped_opts;
    stripped_opts.resume_from = stripped_path.string();
    CHECK_THROWS_WITH_AS(
        train_two_phase(fifth, fx.train_m, fx.val_m, fx.root.string(), cfg, stripped_opts),
        doctest::Contains("optimizer state"), Error);

    // Resuming into a different architecture is refused.
    NetworkConfig other = NetworkConfig::tiny();
    other.tail_channels = 64;
    Network mismatched = build_network(other, 7);
    TrainOptions mismatch_opts;
    mismatch_opts.resume_from = (fx.root / "steps" / "checkpoint_final.ckpt").string();
    CHECK_THROWS_WITH_AS(
        train_two_phase(mismatched, fx.train_m, fx.val_m, fx.root.string(), cfg, mismatch_opts),
        doctest::Contains("configuration"), Error);
}

TEST_CASE("a checkpoint can warm-start a fresh network") {
    const Fixture fx = make_fixture("warm");
    TrainConfig cfg = small_cfg();
    cfg.phase1 = {1, 1e-3};
    cfg.phase2 = {0, 1e-4};

    Network donor = build_network(NetworkConfig::tiny(), 7);
    TrainOptions opts;
    opts.out_dir = (fx.root / "donor").string();
    train_two_phase(donor, fx.train_m, fx.val_m, fx.root.string(), cfg, opts);

    TrainConfig warm_cfg = cfg;
    warm_cfg.phase1 = {0, 1e-3};
    warm_cfg.pretrained_checkpoint = (fx.root / "donor" / "checkpoint_final.ckpt").string();
    Network fresh = build_network(NetworkConfig::tiny(), 99);
    const TrainResult res =
        train_two_phase(fresh, fx.train_m, fx.val_m, fx.root.string(), warm_cfg);

    const Checkpoint donor_state = snapshot_network(donor);
    const Checkpoint fresh_state = snapshot_network(fresh);
    REQUIRE(donor_state.arrays.size() == fresh_state.arrays.size());
    for (std::size_t i = 0; i < donor_state.arrays.size(); ++i)
        CHECK(donor_state.arrays[i].data == fresh_state.arrays[i].data);
    CHECK(res.finished);
    CHECK(res.log.empty());
}

TEST_CASE("failed validation is logged as null and training carries on") {
    const Fixture fx = make_fixture("valnull");
    Manifest ghost_val = fx.val_m;
    SampleRecord ghost{.image_name = "va_ghost", .patient_id = "VP9", .target = 1};
    auto recs = ghost_val.records;
    recs.push_back(ghost);
    ghost_val = Manifest::from_records(recs);

    Network net = build_network(NetworkConfig::tiny(), 7);
    TrainConfig cfg = small_cfg();
    cfg.phase1 = {1, 1e-3};
    cfg.phase2 = {0, 1e-4};
    const TrainResult res =
        train_two_phase(net, fx.train_m, ghost_val, fx.root.string(), cfg);

    CHECK(res.finished);
    REQUIRE(res.log.size() == 1);
    CHECK(std::isnan(res.log[0].val_auroc));
    CHECK(res.log[0].to_json().at("val_auroc").is_null());
    CHECK(res.checkpoint.phase == 3);
}

TEST_CASE("the checkpoint log tail keeps only the last eight epochs") {
    const Fixture fx = make_fixture("tail", /*train_images=*/4, /*val_images=*/4);
    Network net = build_network(NetworkConfig::tiny(), 7);
    TrainConfig cfg = small_cfg();
    cfg.phase1 = {9, 1e-3};
    cfg.phase2 = {0, 1e-4};
    const TrainResult res = train_two_phase(net, fx.train_m, fx.val_m, fx.root.string(), cfg);

    REQUIRE(res.log.size() == 9);
    REQUIRE(res.checkpoint.log_tail.size() == 8);
    const auto first = nlohmann::json::parse(res.checkpoint.log_tail.front());
    CHECK(first.at("epoch") == 2);
    const auto last = nlohmann::json::parse(res.checkpoint.log_tail.back());
    CHECK(last.at("epoch") == 9);
}

TEST_CASE("an easily separable problem is learned within a few epochs") {
    const Fixture fx = make_fixture("overfit", /*train_images=*/16, /*val_images=*/8);
    Network net = build_network(NetworkConfig::tiny(), 7);

    // Whole-network fine-tuning only: on a scratch network the frozen-body
    // phase cannot adapt the normalization statistics, so it is skipped.
    TrainConfig cfg;
    cfg.phase1 = {0, 1e-3};
    cfg.phase2 = {14, 3e-3};
    cfg.batch_size = 8;
    cfg.seed = 555;
    cfg.augment = AugmentConfig::identity();
    const TrainResult res = train_two_phase(net, fx.train_m, fx.val_m, fx.root.string(), cfg);

    REQUIRE(res.log.size() == 14);
    const double early = (res.log[0].train_loss + res.log[1].train_loss) / 2.0;
    const double late = (res.log[12].train_loss + res.log[13].train_loss) / 2.0;
    CHECK(late < early);
    CHECK(res.log.back().train_loss < 0.2);
    CHECK(res.log.back().val_auroc >= 0.99);
}
