#include "cvit/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace cvit {

CViTConfig RunConfig::model_config() const {
    CViTConfig c =
        scale == "reduced" ? CViTConfig::reduced_scale() : CViTConfig::full_scale();
    if (encoder_depth >= 0) c.vit.encoder_depth = encoder_depth;
    return c;
}

void RunConfig::validate() const {
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (scale != "full" && scale != "reduced")
        throw config_error("scale must be 'full' or 'reduced', got '" + scale + "'");
    const double rsum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9)
        throw config_error("split ratios must sum to 1, got " + std::to_string(rsum));
    for (double r : ratios)
        if (r < 0.0 || r > 1.0) throw config_error("split ratios must lie in [0,1]");
    if (augmentation.probability_augmented < 0.0 || augmentation.probability_augmented > 1.0)
        throw config_error("probability_augmented must lie in [0,1]");
    if (schedule.base_lr <= 0.0) throw config_error("base_lr must be positive");
    if (schedule.total_epochs < 0) throw config_error("total_epochs must be >= 0");
    if (schedule.step_size < 1) throw config_error("step_size must be >= 1");
    if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
}

void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "dataset_root") cfg.dataset_root = value;
        else if (key == "output_dir") cfg.output_dir = value;
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "scale") cfg.scale = value;
        else if (key == "encoder_depth") cfg.encoder_depth = std::stoll(value);
        else if (key == "base_lr") cfg.schedule.base_lr = std::stod(value);
        else if (key == "lr_gamma") cfg.schedule.gamma = std::stod(value);
        else if (key == "lr_step_size") cfg.schedule.step_size = std::stoi(value);
        else if (key == "total_epochs") cfg.schedule.total_epochs = std::stoi(value);
        else if (key == "batch_size") cfg.batch_size = std::stoll(value);
        else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
        else if (key == "ratio_train") cfg.ratios[0] = std::stod(value);
        else if (key == "ratio_val") cfg.ratios[1] = std::stod(value);
        else if (key == "ratio_test") cfg.ratios[2] = std::stod(value);
        else if (key == "probability_augmented")
            cfg.augmentation.probability_augmented = std::stod(value);
        else if (key == "hflip_probability") cfg.augmentation.hflip_probability = std::stod(value);
        else if (key == "max_rotation_deg") cfg.augmentation.max_rotation_deg = std::stod(value);
        else if (key == "jitter") cfg.augmentation.jitter = std::stod(value);
        else if (key == "noise_sigma") cfg.augmentation.noise_sigma = std::stod(value);
        else throw config_error("unknown config key: " + key);
    } catch (const config_error&) {
        throw;
    } catch (const std::exception&) {
        throw config_error("invalid value for " + key + ": '" + value + "'");
    }
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot read config file: " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (eq == std::string::npos)
            throw config_error("line " + std::to_string(lineno) + ": expected 'key = value'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

}  // namespace cvit
