#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcac/augment.hpp"
#include "dcac/backbone.hpp"
#include "dcac/datapipe.hpp"
#include "dcac/evaluation.hpp"
#include "dcac/gradcheck.hpp"
#include "dcac/image.hpp"
#include "dcac/rng.hpp"
#include "dcac/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dcac;

namespace {

constexpr const char* kToolVersion = "1.0.0";

int g_exit_code = 0;

std::string iso_utc(std::chrono::system_clock::time_point tp) {
    const std::time_t t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::IoError, "cannot open output file: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) raise(ErrorCode::IoError, "failed to write output file: " + path.string());
}

// Every command ends by describing its run: what ran, with which inputs and
// seeds, what it wrote, and when. Written beside the outputs when there is
// an output directory, and always echoed to stderr as one JSON line.
struct RunRecord {
    std::string command;
    std::vector<std::string> config_paths;
    json seeds = json::object();
    std::vector<std::string> output_paths;
    std::string out_dir;
    int threads = 1;
    std::chrono::system_clock::time_point started = std::chrono::system_clock::now();

    void emit() const {
        const json j{{"command", command},
                     {"tool_version", kToolVersion},
                     {"config_paths", config_paths},
                     {"seeds", seeds},
                     {"threads", threads},
                     {"started_at", iso_utc(started)},
                     {"finished_at", iso_utc(std::chrono::system_clock::now())},
                     {"output_paths", output_paths}};
        if (!out_dir.empty()) {
            fs::create_directories(out_dir);
            write_text_file(fs::path(out_dir) / "run_manifest.json", j.dump(2) + "\n");
        }
        std::fprintf(stderr, "%s\n", j.dump().c_str());
    }
};

NetworkConfig load_network_config(const std::string& preset, const std::string& config_path,
                                  RunRecord& run) {
    if (!preset.empty() && !config_path.empty())
        raise(ErrorCode::UsageError, "give either --preset or --config, not both");
    if (!preset.empty()) return NetworkConfig::preset(preset);
    if (config_path.empty()) raise(ErrorCode::UsageError, "one of --preset or --config is required");
    run.config_paths.push_back(config_path);
    std::ifstream in(config_path);
    if (!in) raise(ErrorCode::IoError, "cannot open config file: " + config_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        raise(ErrorCode::ConfigError,
              std::string("config file is not valid JSON: ") + e.what());
    }
    NetworkConfig cfg = NetworkConfig::from_json(j);
    cfg.validate();
    return cfg;
}

std::string footprint_text(const FootprintReport& rep) {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-36s %12s %16s  %s\n", "layer", "params", "macs",
                  "output");
    out += line;
    for (const auto& l : rep.layers) {
        std::snprintf(line, sizeof line, "%-36s %12lld %16lld  %s\n", l.name.c_str(),
                      static_cast<long long>(l.params), static_cast<long long>(l.macs),
                      shape_str(l.out_shape).c_str());
        out += line;
    }
    std::snprintf(line, sizeof line,
                  "total: params=%lld macs=%lld flops=%lld peak_activation_elems=%lld\n",
                  static_cast<long long>(rep.total_params), static_cast<long long>(rep.total_macs),
                  static_cast<long long>(rep.total_flops),
                  static_cast<long long>(rep.peak_activation_elems));
    out += line;
    return out;
}

std::string eval_text(const EvalReport& rep) {
    std::string out;
    char line[96];
    auto add = [&](const char* name, double v) {
        if (std::isnan(v))
            std::snprintf(line, sizeof line, "%s: undefined (single-class subset)\n", name);
        else
            std::snprintf(line, sizeof line, "%s: %.6f\n", name, v);
        out += line;
    };
    add("auroc_full", rep.auroc_full);
    add("auroc_public", rep.auroc_public);
    add("auroc_private", rep.auroc_private);
    std::snprintf(line, sizeof line, "n_pos: %lld\nn_neg: %lld\nseed: %llu\n",
                  static_cast<long long>(rep.n_pos), static_cast<long long>(rep.n_neg),
                  static_cast<unsigned long long>(rep.seed));
    out += line;
    return out;
}

struct AnalyzeArgs {
    std::string preset, config, format = "json", out_dir;
    std::vector<int> input_size;
};

void cmd_analyze(const AnalyzeArgs& a, RunRecord run) {
    run.command = "analyze";
    run.out_dir = a.out_dir;
    const NetworkConfig cfg = load_network_config(a.preset, a.config, run);
    const FootprintReport rep = a.input_size.empty()
                                    ? analyze(cfg)
                                    : analyze(cfg, a.input_size[0], a.input_size[1]);
    if (a.format == "json")
        std::printf("%s\n", rep.to_json().dump(2).c_str());
    else
        std::fputs(footprint_text(rep).c_str(), stdout);
    if (!a.out_dir.empty()) {
        fs::create_directories(a.out_dir);
        const fs::path path = fs::path(a.out_dir) / "footprint.json";
        write_text_file(path, rep.to_json().dump(2) + "\n");
        run.output_paths.push_back(path.string());
    }
    run.emit();
}

struct SplitArgs {
    std::string manifest, duplicates, out_dir, format = "json";
    double val_frac = 0.3;
    std::uint64_t seed = 0;
};

void cmd_split(const SplitArgs& a, RunRecord run) {
    run.command = "split";
    run.out_dir = a.out_dir;
    run.config_paths.push_back(a.manifest);
    run.seeds["split"] = a.seed;

    Manifest m = load_manifest(a.manifest);
    json dedup;
    if (!a.duplicates.empty()) {
        run.config_paths.push_back(a.duplicates);
        DedupReport rep;
        m = remove_duplicates(m, load_id_list(a.duplicates), &rep);
        dedup = json{{"removed", rep.removed}, {"absent", rep.absent}};
    }
    const auto [train, val] = patient_split(m, a.val_frac, a.seed);

    fs::create_directories(a.out_dir);
    const fs::path train_path = fs::path(a.out_dir) / "train.csv";
    const fs::path val_path = fs::path(a.out_dir) / "val.csv";
    write_manifest_csv(train_path.string(), train);
    write_manifest_csv(val_path.string(), val);

    json summary = split_summary(train, val, a.val_frac, a.seed);
    if (!dedup.is_null()) summary["dedup"] = dedup;
    const fs::path summary_path = fs::path(a.out_dir) / "split_summary.json";
    write_text_file(summary_path, summary.dump(2) + "\n");
    run.output_paths = {train_path.string(), val_path.string(), summary_path.string()};

    if (a.format == "json") {
        std::printf("%s\n", summary.dump(2).c_str());
    } else {
        std::printf("train: %zu images (%lld malignant)\n", train.size(),
                    static_cast<long long>(train.count_malignant()));
        std::printf("val:   %zu images (%lld malignant)\n", val.size(),
                    static_cast<long long>(val.count_malignant()));
    }
    run.emit();
}

struct TrainArgs {
    std::string preset, config, data_dir, images_dir, out_dir, resume, pretrained;
    std::string format = "json";
    TrainConfig cfg;
    int stop_after = 0;
    std::uint64_t seed = 0;
};

void cmd_train(TrainArgs a, RunRecord run) {
    run.command = "train";
    run.out_dir = a.out_dir;
    run.seeds["train"] = a.seed;
    const NetworkConfig netcfg = load_network_config(a.preset, a.config, run);

    const fs::path data(a.data_dir);
    run.config_paths.push_back((data / "train.csv").string());
    run.config_paths.push_back((data / "val.csv").string());
    const Manifest train_m = load_manifest((data / "train.csv").string());
    const Manifest val_m = load_manifest((data / "val.csv").string());
    const std::string images = a.images_dir.empty() ? a.data_dir : a.images_dir;

    a.cfg.seed = a.seed;
    a.cfg.pretrained_checkpoint = a.pretrained;
    if (!a.pretrained.empty()) run.config_paths.push_back(a.pretrained);
    if (!a.resume.empty()) run.config_paths.push_back(a.resume);

    Network net = build_network(netcfg, a.seed);
    TrainOptions opts;
    opts.out_dir = a.out_dir;
    opts.stop_after_epochs = a.stop_after;
    opts.resume_from = a.resume;
    const TrainResult res = train_two_phase(net, train_m, val_m, images, a.cfg, opts);

    run.output_paths.push_back((fs::path(a.out_dir) / "checkpoint_latest.ckpt").string());
    if (res.finished)
        run.output_paths.push_back((fs::path(a.out_dir) / "checkpoint_final.ckpt").string());
    run.output_paths.push_back((fs::path(a.out_dir) / "train_log.jsonl").string());

    json summary{{"finished", res.finished},
                 {"epochs_run", res.log.size()},
                 {"final_epoch", res.log.empty() ? json(nullptr) : res.log.back().to_json()}};
    if (a.format == "json") {
        std::printf("%s\n", summary.dump(2).c_str());
    } else {
        std::printf("epochs run: %zu (%s)\n", res.log.size(),
                    res.finished ? "finished" : "interrupted");
        if (!res.log.empty()) {
            const auto& e = res.log.back();
            std::printf("last epoch: phase %d epoch %d loss %.6f val_auroc %s\n", e.phase,
                        e.epoch, e.train_loss,
                        std::isnan(e.val_auroc) ? "undefined"
                                                : std::to_string(e.val_auroc).c_str());
        }
    }
    run.emit();
}

struct EvaluateArgs {
    std::string checkpoint, manifest, images_dir, out_dir, format = "json";
    std::uint64_t seed = 0;
};

void cmd_evaluate(const EvaluateArgs& a, RunRecord run) {
    run.command = "evaluate";
    run.out_dir = a.out_dir;
    run.config_paths = {a.checkpoint, a.manifest};
    run.seeds["protocol"] = a.seed;

    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    Network net = build_network(ckpt.config, 0);
    restore_network(net, ckpt);
    const Manifest m = load_manifest(a.manifest);

    ScoredSet scored;
    const EvalReport rep = evaluate(net, m, a.images_dir, a.seed, &scored);

    if (a.format == "json")
        std::printf("%s\n", rep.to_json().dump(2).c_str());
    else
        std::fputs(eval_text(rep).c_str(), stdout);

    if (!a.out_dir.empty()) {
        fs::create_directories(a.out_dir);
        const fs::path report_path = fs::path(a.out_dir) / "eval_report.json";
        const fs::path scores_path = fs::path(a.out_dir) / "scores.csv";
        write_text_file(report_path, rep.to_json().dump(2) + "\n");
        write_text_file(scores_path, scored_csv(scored));
        run.output_paths = {report_path.string(), scores_path.string()};
    }
    run.emit();
}

struct GradcheckArgs {
    std::string preset = "tiny", format = "json";
    std::uint64_t seed = 0;
};

void cmd_gradcheck(const GradcheckArgs& a, RunRecord run) {
    run.command = "gradcheck";
    run.seeds["gradcheck"] = a.seed;
    const GradCheckReport rep = run_builtin_gradcheck(a.seed);

    if (a.format == "json") {
        json cases = json::array();
        for (const auto& c : rep.cases)
            cases.push_back({{"name", c.name},
                             {"max_rel_error", c.max_rel_error},
                             {"tolerance", c.tolerance},
                             {"passed", c.passed}});
        std::printf("%s\n",
                    json{{"cases", cases}, {"all_passed", rep.all_passed()}}.dump(2).c_str());
    } else {
        for (const auto& c : rep.cases)
            std::printf("%-44s %12.3e (tol %.0e)  %s\n", c.name.c_str(), c.max_rel_error,
                        c.tolerance, c.passed ? "PASS" : "FAIL");
        std::printf("%s\n", rep.all_passed() ? "all gradient checks passed"
                                             : "GRADIENT CHECKS FAILED");
    }
    run.emit();
    if (!rep.all_passed()) g_exit_code = 1;
}

struct PreviewArgs {
    std::string image, out_dir, format = "json";
    std::uint64_t seed = 0;
    int count = 8;
    int size = 160;
    bool identity = false;
};

void cmd_augment_preview(const PreviewArgs& a, RunRecord run) {
    run.command = "augment-preview";
    run.out_dir = a.out_dir;
    run.config_paths = {a.image};
    run.seeds["augment"] = a.seed;
    if (a.count < 1) raise(ErrorCode::UsageError, "--n must be >= 1");

    const TensorPtr img = load_image(a.image);
    AugmentConfig cfg = a.identity ? AugmentConfig::identity() : AugmentConfig{};
    cfg.output_size = a.size;
    cfg.validate();

    fs::create_directories(a.out_dir);
    for (int k = 0; k < a.count; ++k) {
        Rng rng(derive_seed(a.seed, 0xA46, static_cast<std::uint64_t>(k)));
        const TensorPtr view = augment(img, cfg, rng);
        char name[32];
        std::snprintf(name, sizeof name, "augment_%03d.png", k);
        const fs::path path = fs::path(a.out_dir) / name;
        save_png(path.string(), view);
        run.output_paths.push_back(path.string());
    }

    if (a.format == "json") {
        std::printf("%s\n", json{{"files_written", a.count}, {"output_size", a.size}}
                                .dump(2)
                                .c_str());
    } else {
        std::printf("wrote %d augmented views of %dx%d to %s\n", a.count, a.size, a.size,
                    a.out_dir.c_str());
    }
    run.emit();
}

int default_threads() {
    if (const char* env = std::getenv("DCAC_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

void add_format_flag(CLI::App* sub, std::string& target) {
    sub->add_option("--format", target, "Report format")
        ->check(CLI::IsMember({"json", "text"}))
        ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-condenser network engine for skin-lesion classification"};
    app.set_version_flag("--version", std::string("dcac ") + kToolVersion);
    app.require_subcommand(1);

    int threads = default_threads();
    app.add_option("--threads", threads,
                   "Worker cap (reserved; the current build runs single-threaded)")
        ->check(CLI::PositiveNumber);

    auto analyze_args = std::make_shared<AnalyzeArgs>();
    CLI::App* analyze_cmd =
        app.add_subcommand("analyze", "Report parameter and multiply-accumulate footprint");
    analyze_cmd->add_option("--preset", analyze_args->preset, "Built-in network preset");
    analyze_cmd->add_option("--config", analyze_args->config, "Network config JSON file");
    analyze_cmd->add_option("--input-size", analyze_args->input_size, "Override input H W")
        ->expected(2);
    analyze_cmd->add_option("--out", analyze_args->out_dir, "Directory for footprint.json");
    add_format_flag(analyze_cmd, analyze_args->format);

    auto split_args = std::make_shared<SplitArgs>();
    CLI::App* split_cmd =
        app.add_subcommand("split", "Patient-disjoint train/validation split of a manifest");
    split_cmd->add_option("--manifest", split_args->manifest, "Input manifest CSV")->required();
    split_cmd->add_option("--duplicates", split_args->duplicates,
                          "File listing duplicate image names to drop");
    split_cmd->add_option("--val-frac", split_args->val_frac, "Validation image fraction")
        ->capture_default_str();
    split_cmd->add_option("--seed", split_args->seed, "Split seed")->capture_default_str();
    split_cmd->add_option("--out", split_args->out_dir, "Output directory")->required();
    add_format_flag(split_cmd, split_args->format);

    auto train_args = std::make_shared<TrainArgs>();
    CLI::App* train_cmd = app.add_subcommand("train", "Two-phase training run");
    train_cmd->add_option("--preset", train_args->preset, "Built-in network preset");
    train_cmd->add_option("--config", train_args->config, "Network config JSON file");
    train_cmd->add_option("--data", train_args->data_dir,
                          "Directory holding train.csv and val.csv")
        ->required();
    train_cmd->add_option("--images", train_args->images_dir,
                          "Image directory (defaults to --data)");
    train_cmd->add_option("--out", train_args->out_dir, "Output directory")->required();
    train_cmd->add_option("--resume", train_args->resume, "Checkpoint to resume from");
    train_cmd->add_option("--pretrained", train_args->pretrained,
                          "Checkpoint for a warm start");
    train_cmd->add_option("--epochs1", train_args->cfg.phase1.epochs, "Phase-1 epochs")
        ->capture_default_str();
    train_cmd->add_option("--lr1", train_args->cfg.phase1.lr, "Phase-1 peak learning rate")
        ->capture_default_str();
    train_cmd->add_option("--epochs2", train_args->cfg.phase2.epochs, "Phase-2 epochs")
        ->capture_default_str();
    train_cmd->add_option("--lr2", train_args->cfg.phase2.lr, "Phase-2 peak learning rate")
        ->capture_default_str();
    train_cmd->add_option("--batch-size", train_args->cfg.batch_size, "Batch size")
        ->capture_default_str();
    train_cmd->add_option("--weight-decay", train_args->cfg.weight_decay, "AdamW weight decay")
        ->capture_default_str();
    train_cmd->add_option("--lr-min", train_args->cfg.lr_min, "Cosine schedule floor")
        ->capture_default_str();
    train_cmd->add_option("--stop-after", train_args->stop_after,
                          "Halt after N total epochs (0 = run to completion)")
        ->capture_default_str();
    train_cmd->add_option("--seed", train_args->seed, "Training seed")->capture_default_str();
    add_format_flag(train_cmd, train_args->format);

    auto eval_args = std::make_shared<EvaluateArgs>();
    CLI::App* eval_cmd =
        app.add_subcommand("evaluate", "Score a manifest with a checkpoint and report AUROC");
    eval_cmd->add_option("--checkpoint", eval_args->checkpoint, "Trained checkpoint")->required();
    eval_cmd->add_option("--manifest", eval_args->manifest, "Manifest CSV to score")->required();
    eval_cmd->add_option("--images", eval_args->images_dir, "Image directory")->required();
    eval_cmd->add_option("--seed", eval_args->seed, "Public/private protocol seed")
        ->capture_default_str();
    eval_cmd->add_option("--out", eval_args->out_dir,
                         "Directory for eval_report.json and scores.csv");
    add_format_flag(eval_cmd, eval_args->format);

    auto grad_args = std::make_shared<GradcheckArgs>();
    CLI::App* grad_cmd =
        app.add_subcommand("gradcheck", "Finite-difference checks for every layer");
    grad_cmd->add_option("--preset", grad_args->preset, "Shape preset for the checks")
        ->check(CLI::IsMember({"tiny"}))
        ->capture_default_str();
    grad_cmd->add_option("--seed", grad_args->seed, "Shape randomization seed")
        ->capture_default_str();
    add_format_flag(grad_cmd, grad_args->format);

    auto prev_args = std::make_shared<PreviewArgs>();
    CLI::App* prev_cmd =
        app.add_subcommand("augment-preview", "Write augmented views of one image");
    prev_cmd->add_option("--image", prev_args->image, "Input PNG or PPM")->required();
    prev_cmd->add_option("--seed", prev_args->seed, "Augmentation seed")->capture_default_str();
    prev_cmd->add_option("--n", prev_args->count, "Number of views")->capture_default_str();
    prev_cmd->add_option("--size", prev_args->size, "Output side length")->capture_default_str();
    prev_cmd->add_flag("--identity", prev_args->identity,
                       "Disable randomness: plain resize only");
    prev_cmd->add_option("--out", prev_args->out_dir, "Output directory")->required();
    add_format_flag(prev_cmd, prev_args->format);

    auto with_run = [&](auto fn, auto args) {
        return [fn, args, &threads]() {
            RunRecord run;
            run.threads = threads;
            fn(*args, std::move(run));
        };
    };
    analyze_cmd->callback(with_run(cmd_analyze, analyze_args));
    split_cmd->callback(with_run(cmd_split, split_args));
    train_cmd->callback(with_run(cmd_train, train_args));
    eval_cmd->callback(with_run(cmd_evaluate, eval_args));
    grad_cmd->callback(with_run(cmd_gradcheck, grad_args));
    prev_cmd->callback(with_run(cmd_augment_preview, prev_args));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error (%s): %s\n", error_code_name(e.code()), e.what());
        return (e.code() == ErrorCode::UsageError || e.code() == ErrorCode::ConfigError) ? 2 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return g_exit_code;
}
