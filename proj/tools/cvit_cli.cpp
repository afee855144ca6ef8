#include <CLI11.hpp>

#include "cvit/checkpoint.hpp"
#include "cvit/config.hpp"
#include "cvit/data.hpp"
#include "cvit/metrics.hpp"
#include "cvit/model.hpp"
#include "cvit/train.hpp"

#include <filesystem>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace cvit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitCheckpoint = 4;

int run_train(const std::string& config_path, std::optional<uint64_t> seed_override,
              std::optional<std::string> output_override,
              std::optional<std::string> data_override) {
    RunConfig cfg = parse_config_file(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (output_override) cfg.output_dir = *output_override;
    if (data_override) cfg.dataset_root = *data_override;
    cfg.validate();
    if (cfg.dataset_root.empty()) throw config_error("dataset_root is required");

    CViTConfig model_cfg = cfg.model_config();
    IngestResult data = ingest(cfg.dataset_root, model_cfg.fl.input_size);
    std::cout << "ingested " << data.samples.size() << " samples (" << data.skipped
              << " skipped)\n";
    SplitManifest manifest = split(data.samples, cfg.ratios, cfg.seed);

    fs::create_directories(cfg.output_dir);
    manifest.save((fs::path(cfg.output_dir) / "manifest.tsv").string());

    auto model = CViTModel<float>::init(model_cfg, cfg.seed);
    TrainOptions opts;
    opts.schedule = cfg.schedule;
    opts.batch_size = cfg.batch_size;
    opts.seed = cfg.seed;
    opts.augmentation = cfg.augmentation;
    opts.adam.weight_decay = cfg.weight_decay;
    opts.log = &std::cout;

    TrainResult result = train(model, data.samples, manifest, opts);
    write_history_csv((fs::path(cfg.output_dir) / "history.csv").string(), result.history);
    save_checkpoint(model, (fs::path(cfg.output_dir) / "last.ckpt").string(),
                    cfg.schedule.total_epochs - 1);
    save_checkpoint(result.best_model, (fs::path(cfg.output_dir) / "best.ckpt").string(),
                    result.best_epoch,
                    result.best_epoch >= 0 ? &result.best_val_loss : nullptr);
    std::cout << "best epoch " << result.best_epoch << " val_loss " << result.best_val_loss
              << "\n";
    return kExitOk;
}

int run_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& split_name, const std::string& data_root,
             const std::string& output_dir, const std::string& expect_scale) {
    std::optional<CViTConfig> expected;
    if (expect_scale == "full") expected = CViTConfig::full_scale();
    else if (expect_scale == "reduced") expected = CViTConfig::reduced_scale();
    else if (expect_scale != "auto")
        throw config_error("--scale must be auto, full, or reduced");

    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path, expected ? &*expected : nullptr);
    SplitManifest manifest = SplitManifest::load(manifest_path);
    IngestResult data = ingest(data_root, ckpt.meta.config.fl.input_size);
    auto indices = indices_for_split(data.samples, manifest, split_name);
    if (indices.empty()) throw data_error("split '" + split_name + "' is empty");

    MetricsReport report = evaluate(ckpt.model, data.samples, indices);
    std::cout << "samples " << indices.size() << "\n";
    std::cout << "accuracy " << report.accuracy << "\n";
    std::cout << "log_loss " << report.log_loss << "\n";
    if (report.auc) {
        std::cout << "auc " << *report.auc << "\n";
        fs::create_directories(output_dir);
        write_roc_csv((fs::path(output_dir) / "roc.csv").string(), report.roc_points);
    } else {
        std::cout << "auc n/a (single-class split)\n";
    }
    fs::create_directories(output_dir);
    std::ofstream mf((fs::path(output_dir) / "metrics.txt").string());
    mf << "accuracy " << report.accuracy << "\nlog_loss " << report.log_loss << "\n";
    if (report.auc) mf << "auc " << *report.auc << "\n";
    for (const auto& v : report.per_video)
        mf << "video " << v.video_id << " " << v.aggregate << " "
           << (v.label_out == 1 ? "fake" : "real") << "\n";
    return kExitOk;
}

int run_predict(const std::string& ckpt_path, const std::string& frames_dir,
                int64_t max_frames) {
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    auto frames = load_frames(frames_dir, ckpt.meta.config.fl.input_size);
    if (frames.empty()) throw data_error("no decodable frames in " + frames_dir);
    const std::string video_id = fs::path(frames_dir).filename().string();
    VideoVerdict verdict = classify_video(ckpt.model, frames, video_id, max_frames);
    std::cout << verdict.video_id << ", " << verdict.aggregate << ", "
              << (verdict.label_out == 1 ? "fake" : "real") << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CViT deepfake-detection engine"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, manifest_path, split_name = "test";
    std::string data_root, frames_dir, output_dir = ".", expect_scale = "auto";
    std::optional<uint64_t> seed;
    std::optional<std::string> output_override, data_override;
    int64_t max_frames = 30;
    uint64_t expand_seed = 0;

    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", config_path, "run config file")->required();
    train_cmd->add_option("--seed", seed, "override config seed");
    train_cmd->add_option("--output", output_override, "override output directory");
    train_cmd->add_option("--data", data_override, "override dataset root");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
    eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--manifest", manifest_path, "split manifest file")->required();
    eval_cmd->add_option("--split", split_name, "train|val|test");
    eval_cmd->add_option("--data", data_root, "dataset root")->required();
    eval_cmd->add_option("--output", output_dir, "directory for roc.csv and metrics.txt");
    eval_cmd->add_option("--scale", expect_scale,
                         "expected model scale: auto|full|reduced");

    auto* predict_cmd = app.add_subcommand("predict", "classify one video's frame directory");
    predict_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    predict_cmd->add_option("--frames", frames_dir, "directory of frame images")->required();
    predict_cmd->add_option("--max-frames", max_frames, "frames used, first N by filename");

    auto* expand_cmd = app.add_subcommand("expand", "write an offline-augmented dataset copy");
    expand_cmd->add_option("--data", data_root, "dataset root")->required();
    expand_cmd->add_option("--output", output_dir, "destination root")->required();
    expand_cmd->add_option("--seed", expand_seed, "augmentation seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed())
            return run_train(config_path, seed, output_override, data_override);
        if (eval_cmd->parsed())
            return run_eval(ckpt_path, manifest_path, split_name, data_root, output_dir,
                            expect_scale);
        if (predict_cmd->parsed()) return run_predict(ckpt_path, frames_dir, max_frames);
        if (expand_cmd->parsed()) {
            expand_dataset(data_root, output_dir, AugmentationPolicy{}, expand_seed);
            return kExitOk;
        }
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const checkpoint_error& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
