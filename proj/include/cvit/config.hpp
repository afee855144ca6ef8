#pragma once

#include "cvit/data.hpp"
#include "cvit/model.hpp"
#include "cvit/train.hpp"

#include <stdexcept>
#include <string>

namespace cvit {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Run settings for the CLI: flat `key = value` file, `#` comments,
/// command-line flags win over file values.
struct RunConfig {
    std::string dataset_root;
    std::string output_dir = "out";
    uint64_t seed = 0;

    std::string scale = "full";  // "full" | "reduced"
    int64_t encoder_depth = -1;  // -1 keeps the scale default

    Schedule schedule;
    int64_t batch_size = 32;
    double weight_decay = 1e-7;

    std::array<double, 3> ratios = {0.70, 0.15, 0.15};
    AugmentationPolicy augmentation;

    CViTConfig model_config() const;
    void validate() const;
};

RunConfig parse_config_file(const std::string& path);
void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace cvit
