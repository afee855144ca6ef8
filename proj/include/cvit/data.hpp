#pragma once

#include "cvit/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvit {

struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kLabelReal = 0;
inline constexpr int kLabelFake = 1;

inline constexpr std::array<float, 3> kChannelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kChannelStd{0.229f, 0.224f, 0.225f};

/// One pre-cropped face frame. Image scalars live in [0,1] until normalize().
struct Sample {
    TensorF image;  // 3 x S x S
    int label = kLabelReal;
    std::string video_id;
    int frame_index = 0;
    std::string relative_path;
};

struct IngestResult {
    std::vector<Sample> samples;
    int skipped = 0;  // undecodable files
};

/// Reads `root/{real,fake}/<video_id>/<frame>.(png|jpg)`, resizing every
/// image bilinearly to image_size and scaling to [0,1]. Undecodable files are
/// skipped with a count; an empty class directory is fatal.
IngestResult ingest(const std::string& root, int64_t image_size = 224);

/// Per-channel (x - mean) / std.
TensorF normalize(const TensorF& image);

struct ManifestEntry {
    std::string split;  // "train" | "val" | "test"
    int label = 0;
    std::string video_id;
    std::string relative_path;
};

struct SplitManifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> of_split(const std::string& split) const;
    void save(const std::string& path) const;
    static SplitManifest load(const std::string& path);
};

/// Video-level 70:15:15 assignment, deterministic per seed. No video straddles
/// splits; within each split the majority class is trimmed to the minority
/// image count.
SplitManifest split(const std::vector<Sample>& samples,
                    std::array<double, 3> ratios = {0.70, 0.15, 0.15}, uint64_t seed = 0);

struct AugmentationPolicy {
    double probability_augmented = 0.9;
    double hflip_probability = 0.5;
    double max_rotation_deg = 10.0;
    double jitter = 0.2;        // brightness/contrast amplitude
    double noise_sigma = 0.02;  // additive Gaussian noise cap
};

/// With probability_augmented applies flip/rotate/jitter/noise; label,
/// video_id, and extents never change, output stays in [0,1].
Sample augment(const Sample& s, const AugmentationPolicy& policy, std::mt19937& rng);

TensorF hflip(const TensorF& image);
TensorF rotate_bilinear(const TensorF& image, double degrees);

struct Batch {
    TensorF images;  // B x 3 x S x S, normalized
    std::vector<int> labels;
    std::vector<std::string> video_ids;
};

/// Mini-batch stream over one split. Train mode reshuffles per epoch (seeded)
/// and augments before normalizing; eval mode is deterministic order,
/// normalize only. The final short batch is yielded.
class BatchStream {
public:
    BatchStream(const std::vector<Sample>& samples, std::vector<size_t> indices,
                int64_t batch_size, uint64_t seed, bool train,
                AugmentationPolicy policy = {});

    void start_epoch(int epoch);
    std::optional<Batch> next();
    int64_t num_samples() const { return static_cast<int64_t>(indices_.size()); }

private:
    const std::vector<Sample>* samples_;
    std::vector<size_t> indices_;
    int64_t batch_size_;
    uint64_t seed_;
    bool train_;
    AugmentationPolicy policy_;
    std::vector<size_t> order_;
    size_t pos_ = 0;
    std::mt19937 aug_rng_;
};

/// Maps manifest entries of one split back to loaded sample indices.
std::vector<size_t> indices_for_split(const std::vector<Sample>& samples,
                                      const SplitManifest& manifest,
                                      const std::string& split_name);

/// Decodable images of one directory in lexicographic filename order, resized
/// to image_size and scaled to [0,1]. Used for per-video prediction.
std::vector<TensorF> load_frames(const std::string& dir, int64_t image_size);

/// Writes originals plus augmented copies (offline 1.9x expansion) as PNG
/// under out_root, mirroring the dataset layout.
void expand_dataset(const std::string& root, const std::string& out_root,
                    const AugmentationPolicy& policy, uint64_t seed, int64_t image_size = 224);

}  // namespace cvit
