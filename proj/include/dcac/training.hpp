#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcac/augment.hpp"
#include "dcac/backbone.hpp"
#include "dcac/datapipe.hpp"

namespace dcac {

struct PhaseConfig {
    int epochs = 80;
    double lr = 5e-5;
};

// Two-phase schedule: phase 1 trains the head with everything else frozen,
// phase 2 fine-tunes the whole network at a tenth of the learning rate.
struct TrainConfig {
    PhaseConfig phase1{80, 5e-5};
    PhaseConfig phase2{80, 5e-6};
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 32;
    double lr_min = 0.0;
    std::uint64_t seed = 0;
    std::string pretrained_checkpoint;  // optional warm start ("" = none)
    AugmentConfig augment;              // output_size is set from the network

    void validate() const;
};

// lr(e) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi e / total)), one step
// per epoch.
double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min);

// Decoupled-weight-decay Adam over an explicit parameter list; parameters
// not handed in (frozen ones) carry no state and are never touched.
class AdamW {
  public:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };

    AdamW(std::vector<TensorPtr> params, double lr, double beta1, double beta2, double eps,
          double weight_decay);

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::int64_t steps() const { return t_; }

    // One update from the gradients currently on the parameters.
    void step();
    void zero_grad();

    const std::vector<Slot>& slots() const { return slots_; }
    void restore(std::int64_t steps, std::vector<Slot> slots);

  private:
    std::vector<TensorPtr> params_;
    std::vector<Slot> slots_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    double wd_;
    std::int64_t t_ = 0;
};

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

// On-disk training state. Arrays hold every parameter and buffer in
// declaration order, followed by optimizer moments for the phase in flight.
struct Checkpoint {
    std::uint32_t format_version = 1;
    NetworkConfig config;
    int phase = 1;                      // phase the next epoch belongs to (3 = done)
    int epoch = 0;                      // completed epochs within that phase
    std::int64_t optimizer_steps = 0;
    std::vector<NamedArray> arrays;
    std::vector<std::string> log_tail;  // recent per-epoch records, timing-free

    const NamedArray* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Checkpoint of the live network state (no optimizer arrays).
Checkpoint snapshot_network(const Network& net);

// Copies checkpoint arrays into the network by name. With partial=false
// every network tensor must be present; with partial=true matching names
// are restored and the rest keep their values (warm start).
void restore_network(Network& net, const Checkpoint& ckpt, bool partial = false);

struct TrainLogEntry {
    int phase = 0;
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_auroc = 0.0;  // NaN when validation failed (serialized null)
    std::int64_t wall_ms = 0;

    nlohmann::json to_json() const;
    // Same record minus wall_ms; checkpoints embed this so that identical
    // runs produce identical bytes.
    nlohmann::json to_json_stable() const;
};

struct TrainOptions {
    std::string out_dir;        // "" = write no checkpoint/log files
    int stop_after_epochs = 0;  // halt after N total completed epochs (0 = run all)
    std::string resume_from;    // checkpoint path ("" = fresh run)
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogEntry> log;  // entries produced by this call
    bool finished = true;
};

// Runs the full two-phase schedule: balanced with-replacement batches,
// augmented training images, per-epoch cosine learning rate, binary
// cross-entropy on the logits, per-epoch validation AUROC and checkpoint.
TrainResult train_two_phase(Network& net, const Manifest& train_manifest,
                            const Manifest& val_manifest, const std::string& image_root,
                            const TrainConfig& cfg, const TrainOptions& opts = {});

}  // namespace dcac
