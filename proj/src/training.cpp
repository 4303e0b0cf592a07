#include "dcac/training.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <limits>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "dcac/evaluation.hpp"
#include "dcac/image.hpp"
#include "dcac/ops.hpp"
#include "dcac/rng.hpp"

namespace dcac {

namespace {

namespace fs = std::filesystem;

void check_positive(double v, const char* field) {
    if (!(v > 0.0) || !std::isfinite(v))
        raise(ErrorCode::ConfigError, std::string(field) + " must be a positive finite number");
}

}  // namespace

void TrainConfig::validate() const {
    if (phase1.epochs < 0) raise(ErrorCode::ConfigError, "phase1.epochs must be >= 0");
    if (phase2.epochs < 0) raise(ErrorCode::ConfigError, "phase2.epochs must be >= 0");
    check_positive(phase1.lr, "phase1.lr");
    check_positive(phase2.lr, "phase2.lr");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
        raise(ErrorCode::ConfigError, "weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) raise(ErrorCode::ConfigError, "beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) raise(ErrorCode::ConfigError, "beta2 must be in [0, 1)");
    check_positive(eps, "eps");
    if (batch_size < 1) raise(ErrorCode::ConfigError, "batch_size must be >= 1");
    if (!(lr_min >= 0.0) || !std::isfinite(lr_min))
        raise(ErrorCode::ConfigError, "lr_min must be >= 0");
}

double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min) {
    if (total_epochs < 1) raise(ErrorCode::ConfigError, "total_epochs must be >= 1");
    if (epoch < 0 || epoch > total_epochs)
        raise(ErrorCode::ConfigError, "epoch must lie in [0, total_epochs]");
    const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(t * M_PI));
}

AdamW::AdamW(std::vector<TensorPtr> params, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      wd_(weight_decay) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i]) raise(ErrorCode::ConfigError, "optimizer given a null parameter");
        const std::size_t n = params_[i]->data.size();
        slots_[i].m.assign(n, 0.0);
        slots_[i].v.assign(n, 0.0);
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = *params_[i];
        Slot& s = slots_[i];
        const bool has_grad = !p.grad.empty();
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            const double g = has_grad ? p.grad[j] : 0.0;
            if (!std::isfinite(g))
                raise(ErrorCode::NumericError, "non-finite gradient in optimizer step");
            s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g;
            s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g * g;
            const double mhat = s.m[j] / bc1;
            const double vhat = s.v[j] / bc2;
            p.data[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.data[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (const auto& p : params_) p->zero_grad();
}

void AdamW::restore(std::int64_t steps, std::vector<Slot> slots) {
    if (steps < 0) raise(ErrorCode::DataError, "optimizer step count must be >= 0");
    if (slots.size() != params_.size())
        raise(ErrorCode::DataError, "optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].m.size() != params_[i]->data.size() ||
            slots[i].v.size() != params_[i]->data.size())
            raise(ErrorCode::DataError, "optimizer state does not match the parameter list");
    }
    t_ = steps;
    slots_ = std::move(slots);
}

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

namespace {

constexpr char kMagic[4] = {'D', 'C', 'A', 'C'};

void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
  public:
    ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string bytes(std::uint64_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), static_cast<std::size_t>(n));
        pos_ += static_cast<std::size_t>(n);
        return s;
    }

    std::uint64_t remaining() const { return n_ - pos_; }

  private:
    void need(std::uint64_t n) const {
        if (n > n_ - pos_) raise(ErrorCode::CorruptFile, "checkpoint truncated");
    }

    const unsigned char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

nlohmann::json checkpoint_meta(const Checkpoint& ckpt) {
    nlohmann::json j;
    j["config"] = ckpt.config.to_json();
    j["phase"] = ckpt.phase;
    j["epoch"] = ckpt.epoch;
    j["optimizer_steps"] = ckpt.optimizer_steps;
    j["log_tail"] = ckpt.log_tail;
    return j;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, ckpt.format_version);
    const std::string meta = checkpoint_meta(ckpt).dump();
    put_u64(buf, meta.size());
    buf += meta;
    put_u64(buf, ckpt.arrays.size());
    for (const auto& a : ckpt.arrays) {
        put_u64(buf, a.name.size());
        buf += a.name;
        put_u64(buf, a.shape.size());
        for (std::int64_t d : a.shape) put_u64(buf, static_cast<std::uint64_t>(d));
        if (shape_numel(a.shape) != static_cast<std::int64_t>(a.data.size()))
            raise(ErrorCode::ConfigError, "checkpoint array " + a.name +
                                              " has a shape/data size mismatch");
        put_u64(buf, a.data.size());
        for (double v : a.data) put_f64(buf, v);
    }
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    put_u32(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::IoError, "cannot open checkpoint file for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) raise(ErrorCode::IoError, "failed to write checkpoint file: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::IoError, "cannot open checkpoint file: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!in.good() && !in.eof()) raise(ErrorCode::IoError, "failed to read checkpoint file: " + path);

    if (buf.size() < 16) raise(ErrorCode::CorruptFile, "checkpoint truncated");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        raise(ErrorCode::CorruptFile, "not a checkpoint file (bad magic)");
    const std::size_t body = buf.size() - 4;
    const std::uint32_t want = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
    ByteReader tail(reinterpret_cast<const unsigned char*>(buf.data()) + body, 4);
    if (tail.u32() != want) raise(ErrorCode::CorruptFile, "checkpoint integrity check failed");

    ByteReader r(reinterpret_cast<const unsigned char*>(buf.data()), body);
    r.bytes(4);  // magic, already verified
    Checkpoint ckpt;
    ckpt.format_version = r.u32();
    if (ckpt.format_version != 1)
        raise(ErrorCode::VersionMismatch,
              "unsupported checkpoint format version " + std::to_string(ckpt.format_version) +
                  " (expected 1)");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.bytes(r.u64()));
    } catch (const nlohmann::json::exception&) {
        raise(ErrorCode::CorruptFile, "checkpoint metadata is not valid JSON");
    }
    try {
        ckpt.config = NetworkConfig::from_json(meta.at("config"));
        ckpt.phase = meta.at("phase").get<int>();
        ckpt.epoch = meta.at("epoch").get<int>();
        ckpt.optimizer_steps = meta.at("optimizer_steps").get<std::int64_t>();
        ckpt.log_tail = meta.at("log_tail").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
        raise(ErrorCode::CorruptFile, "checkpoint metadata is missing required fields");
    }
    const std::uint64_t n_arrays = r.u64();
    for (std::uint64_t i = 0; i < n_arrays; ++i) {
        NamedArray a;
        a.name = r.bytes(r.u64());
        const std::uint64_t rank = r.u64();
        if (rank > 4) raise(ErrorCode::CorruptFile, "checkpoint array rank out of range");
        for (std::uint64_t d = 0; d < rank; ++d)
            a.shape.push_back(static_cast<std::int64_t>(r.u64()));
        const std::uint64_t count = r.u64();
        if (shape_numel(a.shape) != static_cast<std::int64_t>(count))
            raise(ErrorCode::CorruptFile, "checkpoint array size disagrees with its shape");
        a.data.resize(static_cast<std::size_t>(count));
        for (auto& v : a.data) v = r.f64();
        ckpt.arrays.push_back(std::move(a));
    }
    if (r.remaining() != 0) raise(ErrorCode::CorruptFile, "checkpoint has trailing bytes");
    return ckpt;
}

Checkpoint snapshot_network(const Network& net) {
    Checkpoint ckpt;
    ckpt.config = net.config;
    const NamedTensors named = net.named_tensors();
    auto push = [&](const NamedTensor& nt) {
        ckpt.arrays.push_back({nt.name, nt.tensor->shape, nt.tensor->data});
    };
    for (const auto& nt : named.params) push(nt);
    for (const auto& nt : named.buffers) push(nt);
    return ckpt;
}

void restore_network(Network& net, const Checkpoint& ckpt, bool partial) {
    const NamedTensors named = net.named_tensors();
    auto restore_one = [&](const NamedTensor& nt) {
        const NamedArray* a = ckpt.find(nt.name);
        if (!a) {
            if (partial) return;
            raise(ErrorCode::DataError, "checkpoint is missing tensor " + nt.name);
        }
        if (a->shape != nt.tensor->shape)
            raise(ErrorCode::DataError, "checkpoint tensor " + nt.name + " has shape " +
                                            shape_str(a->shape) + ", network expects " +
                                            shape_str(nt.tensor->shape));
        nt.tensor->data = a->data;
    };
    for (const auto& nt : named.params) restore_one(nt);
    for (const auto& nt : named.buffers) restore_one(nt);
}

nlohmann::json TrainLogEntry::to_json_stable() const {
    nlohmann::json j;
    j["phase"] = phase;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["train_loss"] = train_loss;
    if (std::isnan(val_auroc))
        j["val_auroc"] = nullptr;
    else
        j["val_auroc"] = val_auroc;
    return j;
}

nlohmann::json TrainLogEntry::to_json() const {
    nlohmann::json j = to_json_stable();
    j["wall_ms"] = wall_ms;
    return j;
}

namespace {

// Seed-stream tags keeping the per-purpose random streams disjoint.
constexpr std::uint64_t kSamplerTag = 0xB47C;
constexpr std::uint64_t kAugmentTagBase = 0xA0;  // + phase
constexpr std::uint64_t kEvalTag = 0xE7A1;

TensorPtr load_training_image(const std::string& image_root, const std::string& name,
                              std::unordered_map<std::string, TensorPtr>& cache) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    const fs::path base = fs::path(image_root) / name;
    fs::path path = base;
    path += ".png";
    if (!fs::exists(path)) {
        path = base;
        path += ".ppm";
    }
    if (!fs::exists(path))
        raise(ErrorCode::IoError,
              "training image " + name + " not found under " + image_root);
    TensorPtr img = load_image(path.string());
    cache.emplace(name, img);
    return img;
}

}  // namespace

TrainResult train_two_phase(Network& net, const Manifest& train_manifest,
                            const Manifest& val_manifest, const std::string& image_root,
                            const TrainConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    if (net.config.input_height != net.config.input_width)
        raise(ErrorCode::ConfigError, "training requires a square network input");
    if (train_manifest.records.empty())
        raise(ErrorCode::DataError, "training manifest is empty");
    if (val_manifest.records.empty())
        raise(ErrorCode::DataError, "validation manifest is empty");
    if (train_manifest.count_malignant() == 0 ||
        train_manifest.count_malignant() == static_cast<std::int64_t>(train_manifest.records.size()))
        raise(ErrorCode::DataError, "training manifest needs both classes");
    for (const auto& [patient, _] : val_manifest.by_patient) {
        if (train_manifest.by_patient.count(patient))
            raise(ErrorCode::DataError,
                  "training and validation sets share patient " + patient);
    }
    AugmentConfig aug_cfg = cfg.augment;
    aug_cfg.output_size = net.config.input_height;
    aug_cfg.validate();

    // Cursor into the schedule: `phase` is the phase the next epoch belongs
    // to (3 = done) and `epoch` counts completed epochs within it.
    int phase = 1;
    int epoch = 0;
    std::int64_t restored_steps = 0;
    std::vector<std::string> log_tail;
    Checkpoint resume;
    bool resumed = false;

    if (!opts.resume_from.empty()) {
        resume = load_checkpoint(opts.resume_from);
        if (resume.config.to_json() != net.config.to_json())
            raise(ErrorCode::DataError,
                  "resume checkpoint was built for a different network configuration");
        restore_network(net, resume, /*partial=*/false);
        phase = resume.phase;
        epoch = resume.epoch;
        restored_steps = resume.optimizer_steps;
        log_tail = resume.log_tail;
        resumed = true;
    } else if (!cfg.pretrained_checkpoint.empty()) {
        const Checkpoint warm = load_checkpoint(cfg.pretrained_checkpoint);
        restore_network(net, warm, /*partial=*/true);
    }

    if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);
    std::ofstream log_file;
    if (!opts.out_dir.empty()) {
        log_file.open((fs::path(opts.out_dir) / "train_log.jsonl").string(), std::ios::app);
        if (!log_file)
            raise(ErrorCode::IoError, "cannot open training log under " + opts.out_dir);
    }

    const std::int64_t n_train = static_cast<std::int64_t>(train_manifest.records.size());
    const std::int64_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t side = net.config.input_height;
    const std::int64_t chans = net.config.input_channels;

    std::unordered_map<std::string, TensorPtr> image_cache;
    // Name lookup by identity so optimizer moments can be checkpointed under
    // the parameter they belong to.
    std::unordered_map<const Tensor*, std::string> param_names;
    for (const auto& nt : net.named_tensors().params) param_names[nt.tensor.get()] = nt.name;

    auto make_checkpoint = [&](int next_phase, int next_epoch, const AdamW* opt,
                               const std::vector<TensorPtr>* opt_params) {
        Checkpoint ckpt = snapshot_network(net);
        ckpt.phase = next_phase;
        ckpt.epoch = next_epoch;
        ckpt.optimizer_steps = opt ? opt->steps() : 0;
        ckpt.log_tail = log_tail;
        if (opt) {
            for (std::size_t i = 0; i < opt_params->size(); ++i) {
                const std::string& pname = param_names.at((*opt_params)[i].get());
                const AdamW::Slot& slot = opt->slots()[i];
                const Shape& shape = (*opt_params)[i]->shape;
                ckpt.arrays.push_back({"optim." + pname + ".m", shape, slot.m});
                ckpt.arrays.push_back({"optim." + pname + ".v", shape, slot.v});
            }
        }
        return ckpt;
    };

    TrainResult result;
    int total_done = (phase >= 2 ? cfg.phase1.epochs : 0) +
                     (phase >= 3 ? cfg.phase2.epochs : 0) + epoch;

    for (int p = (phase <= 2 ? phase : 3); p <= 2; ++p) {
        const PhaseConfig& pc = (p == 1) ? cfg.phase1 : cfg.phase2;
        const int start_epoch = (p == phase) ? epoch : 0;

        net.set_frozen(p == 1 ? FreezeScope::all_but_head : FreezeScope::none);
        std::vector<TensorPtr> params = net.trainable_params();
        AdamW opt(params, pc.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        if (resumed && p == phase && start_epoch > 0) {
            std::vector<AdamW::Slot> slots;
            for (const auto& param : params) {
                const std::string& pname = param_names.at(param.get());
                const NamedArray* m = resume.find("optim." + pname + ".m");
                const NamedArray* v = resume.find("optim." + pname + ".v");
                if (!m || !v)
                    raise(ErrorCode::DataError,
                          "resume checkpoint is missing optimizer state for " + pname);
                slots.push_back({m->data, v->data});
            }
            opt.restore(restored_steps, std::move(slots));
        }

        for (int e = start_epoch; e < pc.epochs; ++e) {
            const auto epoch_start = std::chrono::steady_clock::now();
            opt.set_lr(cosine_lr(e, pc.epochs, pc.lr, cfg.lr_min));
            BalancedSampler sampler(train_manifest,
                                    derive_seed(cfg.seed, kSamplerTag,
                                                static_cast<std::uint64_t>(p),
                                                static_cast<std::uint64_t>(e)));
            double loss_sum = 0.0;
            for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
                TensorPtr batch = Tensor::zeros({cfg.batch_size, chans, side, side});
                TensorPtr targets = Tensor::zeros({cfg.batch_size, 1});
                for (int b = 0; b < cfg.batch_size; ++b) {
                    const std::size_t idx = sampler.next();
                    const SampleRecord& rec = train_manifest.records[idx];
                    TensorPtr img = load_training_image(image_root, rec.image_name, image_cache);
                    Rng draw_rng(derive_seed(cfg.seed, kAugmentTagBase + static_cast<std::uint64_t>(p),
                                             static_cast<std::uint64_t>(e),
                                             static_cast<std::uint64_t>(s) *
                                                     static_cast<std::uint64_t>(cfg.batch_size) +
                                                 static_cast<std::uint64_t>(b)));
                    TensorPtr view = augment(img, aug_cfg, draw_rng);
                    std::copy(view->data.begin(), view->data.end(),
                              batch->data.begin() + static_cast<std::ptrdiff_t>(b) * view->numel());
                    targets->data[static_cast<std::size_t>(b)] = rec.target;
                }
                Tape tape;
                TensorPtr logits = net.forward(&tape, batch, /*training=*/true);
                TensorPtr loss = ops::bce_with_logits_mean(&tape, logits, targets);
                tape.backward(loss);
                opt.step();
                opt.zero_grad();
                loss_sum += loss->data[0];
            }

            double val_auroc = std::numeric_limits<double>::quiet_NaN();
            try {
                val_auroc = evaluate(net, val_manifest, image_root,
                                     derive_seed(cfg.seed, kEvalTag))
                                .auroc_full;
            } catch (const Error&) {
                // Recorded as null in the log; training continues.
            }

            TrainLogEntry entry;
            entry.phase = p;
            entry.epoch = e + 1;
            entry.lr = opt.lr();
            entry.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
            entry.val_auroc = val_auroc;
            entry.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - epoch_start)
                                .count();
            result.log.push_back(entry);
            log_tail.push_back(entry.to_json_stable().dump());
            if (log_tail.size() > 8) log_tail.erase(log_tail.begin());
            if (log_file.is_open()) {
                log_file << entry.to_json().dump() << "\n";
                log_file.flush();
            }

            const bool phase_done = (e + 1 == pc.epochs);
            Checkpoint latest = phase_done ? make_checkpoint(p + 1, 0, nullptr, nullptr)
                                           : make_checkpoint(p, e + 1, &opt, &params);
            if (!opts.out_dir.empty())
                save_checkpoint((fs::path(opts.out_dir) / "checkpoint_latest.ckpt").string(),
                                latest);

            ++total_done;
            const bool all_done = (p == 2 && phase_done);
            if (opts.stop_after_epochs > 0 && total_done >= opts.stop_after_epochs && !all_done) {
                result.checkpoint = std::move(latest);
                result.finished = false;
                return result;
            }
        }
    }

    net.set_frozen(FreezeScope::none);
    result.checkpoint = make_checkpoint(3, 0, nullptr, nullptr);
    result.finished = true;
    if (!opts.out_dir.empty()) {
        save_checkpoint((fs::path(opts.out_dir) / "checkpoint_latest.ckpt").string(),
                        result.checkpoint);
        save_checkpoint((fs::path(opts.out_dir) / "checkpoint_final.ckpt").string(),
                        result.checkpoint);
    }
    return result;
}

}  // namespace dcac
