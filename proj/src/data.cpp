#include "cvit/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace cvit {

namespace {

bool has_image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

int parse_frame_index(const fs::path& p, int fallback) {
    std::string stem = p.stem().string();
    std::string digits;
    for (char c : stem)
        if (std::isdigit(static_cast<unsigned char>(c))) digits += c;
    if (digits.empty() || digits.size() > 9) return fallback;
    return std::stoi(digits);
}

// 8-bit BGR mat -> 3 x size x size float RGB in [0,1], bilinear resample.
TensorF decode_and_resize(const cv::Mat& bgr, int64_t size) {
    TensorF out({3, size, size});
    const int64_t H = bgr.rows, W = bgr.cols;
    const double sy = static_cast<double>(H) / size;
    const double sx = static_cast<double>(W) / size;
    for (int64_t i = 0; i < size; ++i) {
        const double fy = std::min<double>((i + 0.5) * sy - 0.5, H - 1);
        const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fy)), 0, H - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, H - 1);
        const double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int64_t j = 0; j < size; ++j) {
            const double fx = std::min<double>((j + 0.5) * sx - 0.5, W - 1);
            const int64_t x0 =
                std::clamp<int64_t>(static_cast<int64_t>(std::floor(fx)), 0, W - 1);
            const int64_t x1 = std::min<int64_t>(x0 + 1, W - 1);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            const auto p00 = bgr.at<cv::Vec3b>(static_cast<int>(y0), static_cast<int>(x0));
            const auto p01 = bgr.at<cv::Vec3b>(static_cast<int>(y0), static_cast<int>(x1));
            const auto p10 = bgr.at<cv::Vec3b>(static_cast<int>(y1), static_cast<int>(x0));
            const auto p11 = bgr.at<cv::Vec3b>(static_cast<int>(y1), static_cast<int>(x1));
            for (int c = 0; c < 3; ++c) {
                const int bgr_c = 2 - c;  // BGR -> RGB
                const double top = p00[bgr_c] * (1 - wx) + p01[bgr_c] * wx;
                const double bot = p10[bgr_c] * (1 - wx) + p11[bgr_c] * wx;
                out[c * size * size + i * size + j] =
                    static_cast<float>((top * (1 - wy) + bot * wy) / 255.0);
            }
        }
    }
    return out;
}

cv::Mat to_bgr_mat(const TensorF& image) {
    const int64_t S = image.dim(1);
    cv::Mat bgr(static_cast<int>(S), static_cast<int>(S), CV_8UC3);
    for (int64_t i = 0; i < S; ++i)
        for (int64_t j = 0; j < S; ++j) {
            auto& px = bgr.at<cv::Vec3b>(static_cast<int>(i), static_cast<int>(j));
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(image[c * S * S + i * S + j], 0.0f, 1.0f);
                px[2 - c] = static_cast<uchar>(std::lround(v * 255.0f));
            }
        }
    return bgr;
}

}  // namespace

IngestResult ingest(const std::string& root, int64_t image_size) {
    IngestResult result;
    const std::pair<const char*, int> classes[] = {{"real", kLabelReal}, {"fake", kLabelFake}};
    for (auto [cls, label] : classes) {
        const fs::path class_dir = fs::path(root) / cls;
        if (!fs::is_directory(class_dir))
            throw data_error("missing class directory: " + class_dir.string());
        std::vector<fs::path> videos;
        for (auto& e : fs::directory_iterator(class_dir))
            if (e.is_directory()) videos.push_back(e.path());
        std::sort(videos.begin(), videos.end());
        size_t class_count = 0;
        for (const auto& vdir : videos) {
            std::vector<fs::path> frames;
            for (auto& e : fs::directory_iterator(vdir))
                if (e.is_regular_file() && has_image_extension(e.path()))
                    frames.push_back(e.path());
            std::sort(frames.begin(), frames.end());
            int seq = 0;
            for (const auto& f : frames) {
                cv::Mat bgr = cv::imread(f.string(), cv::IMREAD_COLOR);
                if (bgr.empty()) {
                    ++result.skipped;
                    std::cerr << "warning: skipping undecodable file " << f << "\n";
                    continue;
                }
                Sample s;
                s.image = decode_and_resize(bgr, image_size);
                s.label = label;
                s.video_id = std::string(cls) + "/" + vdir.filename().string();
                s.frame_index = parse_frame_index(f, seq);
                s.relative_path = fs::relative(f, root).generic_string();
                result.samples.push_back(std::move(s));
                ++seq;
                ++class_count;
            }
        }
        if (class_count == 0)
            throw data_error("class directory has no decodable images: " + class_dir.string());
    }
    return result;
}

TensorF normalize(const TensorF& image) {
    const int64_t plane = image.numel() / 3;
    TensorF out(image.shape());
    for (int c = 0; c < 3; ++c)
        out.array().segment(c * plane, plane) =
            (image.array().segment(c * plane, plane) - kChannelMean[c]) / kChannelStd[c];
    return out;
}

std::vector<ManifestEntry> SplitManifest::of_split(const std::string& split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e);
    return out;
}

void SplitManifest::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw data_error("cannot write manifest: " + path);
    for (const auto& e : entries)
        f << e.split << '\t' << e.label << '\t' << e.video_id << '\t' << e.relative_path
          << '\n';
}

SplitManifest SplitManifest::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot read manifest: " + path);
    SplitManifest m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        std::string label;
        if (!std::getline(ss, e.split, '\t') || !std::getline(ss, label, '\t') ||
            !std::getline(ss, e.video_id, '\t') || !std::getline(ss, e.relative_path))
            throw data_error("malformed manifest line: " + line);
        e.label = std::stoi(label);
        m.entries.push_back(std::move(e));
    }
    return m;
}

SplitManifest split(const std::vector<Sample>& samples, std::array<double, 3> ratios,
                    uint64_t seed) {
    // group frames by video, per class
    std::map<std::string, std::vector<size_t>> by_video;
    std::map<std::string, int> video_label;
    for (size_t i = 0; i < samples.size(); ++i) {
        by_video[samples[i].video_id].push_back(i);
        video_label[samples[i].video_id] = samples[i].label;
    }
    std::array<std::vector<std::string>, 2> class_videos;
    for (auto& [vid, idxs] : by_video) class_videos[video_label[vid]].push_back(vid);
    for (int c = 0; c < 2; ++c)
        if (class_videos[c].empty())
            throw data_error(std::string("no videos for class ") + (c == 0 ? "real" : "fake"));

    SplitManifest manifest;
    const char* names[3] = {"train", "val", "test"};
    std::array<std::array<std::vector<size_t>, 2>, 3> split_class_samples;

    std::mt19937_64 rng(seed);
    for (int c = 0; c < 2; ++c) {
        auto videos = class_videos[c];
        std::shuffle(videos.begin(), videos.end(), rng);
        const size_t n = videos.size();
        const size_t n_train = static_cast<size_t>(std::llround(ratios[0] * n));
        const size_t n_val = static_cast<size_t>(std::llround(ratios[1] * n));
        for (size_t v = 0; v < n; ++v) {
            const int sp = v < n_train ? 0 : (v < n_train + n_val ? 1 : 2);
            for (size_t idx : by_video[videos[v]]) split_class_samples[sp][c].push_back(idx);
        }
    }

    // balance by trimming the majority class (drop from the tail)
    for (int sp = 0; sp < 3; ++sp) {
        auto& real = split_class_samples[sp][0];
        auto& fake = split_class_samples[sp][1];
        const size_t keep = std::min(real.size(), fake.size());
        real.resize(keep);
        fake.resize(keep);
        for (int c = 0; c < 2; ++c)
            for (size_t idx : split_class_samples[sp][c]) {
                const Sample& s = samples[idx];
                manifest.entries.push_back(
                    {names[sp], s.label, s.video_id, s.relative_path});
            }
    }
    return manifest;
}

TensorF hflip(const TensorF& image) {
    const int64_t S = image.dim(1);
    TensorF out(image.shape());
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < S; ++i)
            for (int64_t j = 0; j < S; ++j)
                out[c * S * S + i * S + j] = image[c * S * S + i * S + (S - 1 - j)];
    return out;
}

TensorF rotate_bilinear(const TensorF& image, double degrees) {
    const int64_t S = image.dim(1);
    const double rad = degrees * M_PI / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cx = (S - 1) / 2.0;
    TensorF out(image.shape());
    for (int64_t i = 0; i < S; ++i) {
        for (int64_t j = 0; j < S; ++j) {
            // inverse map, edge clamp
            const double dy = i - cx, dx = j - cx;
            const double sy = std::clamp(cs * dy + sn * dx + cx, 0.0, S - 1.0);
            const double sx = std::clamp(-sn * dy + cs * dx + cx, 0.0, S - 1.0);
            const int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
            const int64_t y1 = std::min(y0 + 1, S - 1), x1 = std::min(x0 + 1, S - 1);
            const double wy = sy - y0, wx = sx - x0;
            for (int64_t c = 0; c < 3; ++c) {
                const float* p = image.data() + c * S * S;
                const double top = p[y0 * S + x0] * (1 - wx) + p[y0 * S + x1] * wx;
                const double bot = p[y1 * S + x0] * (1 - wx) + p[y1 * S + x1] * wx;
                out[c * S * S + i * S + j] = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Sample augment(const Sample& s, const AugmentationPolicy& policy, std::mt19937& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    if (uni(rng) >= policy.probability_augmented) return s;
    Sample out = s;
    if (policy.hflip_probability > 0 && uni(rng) < policy.hflip_probability)
        out.image = hflip(out.image);
    if (policy.max_rotation_deg > 0) {
        std::uniform_real_distribution<double> rot(-policy.max_rotation_deg,
                                                   policy.max_rotation_deg);
        out.image = rotate_bilinear(out.image, rot(rng));
    }
    if (policy.jitter > 0) {
        std::uniform_real_distribution<double> jit(-policy.jitter, policy.jitter);
        const float brightness = static_cast<float>(jit(rng));
        const float contrast = static_cast<float>(1.0 + jit(rng));
        out.image.array() = (out.image.array() - 0.5f) * contrast + 0.5f + brightness;
    }
    if (policy.noise_sigma > 0) {
        std::normal_distribution<float> noise(0.0f, static_cast<float>(policy.noise_sigma));
        for (int64_t i = 0; i < out.image.numel(); ++i) out.image[i] += noise(rng);
    }
    out.image.array() = out.image.array().min(1.0f).max(0.0f);
    return out;
}

BatchStream::BatchStream(const std::vector<Sample>& samples, std::vector<size_t> indices,
                         int64_t batch_size, uint64_t seed, bool train,
                         AugmentationPolicy policy)
    : samples_(&samples),
      indices_(std::move(indices)),
      batch_size_(batch_size),
      seed_(seed),
      train_(train),
      policy_(policy),
      order_(indices_),
      aug_rng_(static_cast<unsigned>(seed)) {
    if (batch_size_ < 1) throw data_error("batch size must be >= 1");
}

void BatchStream::start_epoch(int epoch) {
    order_ = indices_;
    pos_ = 0;
    if (train_) {
        std::mt19937_64 rng(seed_ * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch) + 1);
        std::shuffle(order_.begin(), order_.end(), rng);
        aug_rng_.seed(static_cast<unsigned>(seed_ + 7919u * (epoch + 1)));
    }
}

std::optional<Batch> BatchStream::next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const size_t count = std::min<size_t>(batch_size_, order_.size() - pos_);
    const auto& first = (*samples_)[order_[pos_]].image;
    const int64_t S = first.dim(1);
    Batch batch;
    batch.images = TensorF({static_cast<int64_t>(count), 3, S, S});
    const int64_t stride = 3 * S * S;
    for (size_t k = 0; k < count; ++k) {
        const Sample& s = (*samples_)[order_[pos_ + k]];
        TensorF img = train_ ? augment(s, policy_, aug_rng_).image : s.image;
        batch.images.array().segment(static_cast<int64_t>(k) * stride, stride) =
            normalize(img).array();
        batch.labels.push_back(s.label);
        batch.video_ids.push_back(s.video_id);
    }
    pos_ += count;
    return batch;
}

std::vector<size_t> indices_for_split(const std::vector<Sample>& samples,
                                      const SplitManifest& manifest,
                                      const std::string& split_name) {
    std::map<std::string, size_t> by_path;
    for (size_t i = 0; i < samples.size(); ++i) by_path[samples[i].relative_path] = i;
    std::vector<size_t> out;
    for (const auto& e : manifest.entries) {
        if (e.split != split_name) continue;
        auto it = by_path.find(e.relative_path);
        if (it == by_path.end())
            throw data_error("manifest entry not found in dataset: " + e.relative_path);
        out.push_back(it->second);
    }
    return out;
}

std::vector<TensorF> load_frames(const std::string& dir, int64_t image_size) {
    if (!fs::is_directory(dir)) throw data_error("not a directory: " + dir);
    std::vector<fs::path> files;
    for (auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<TensorF> frames;
    for (const auto& f : files) {
        cv::Mat bgr = cv::imread(f.string(), cv::IMREAD_COLOR);
        if (bgr.empty()) {
            std::cerr << "warning: skipping undecodable file " << f << "\n";
            continue;
        }
        frames.push_back(decode_and_resize(bgr, image_size));
    }
    return frames;
}

void expand_dataset(const std::string& root, const std::string& out_root,
                    const AugmentationPolicy& policy, uint64_t seed, int64_t image_size) {
    IngestResult data = ingest(root, image_size);
    std::mt19937 rng(static_cast<unsigned>(seed));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (const auto& s : data.samples) {
        const fs::path dst = fs::path(out_root) / s.relative_path;
        fs::create_directories(dst.parent_path());
        cv::imwrite(dst.string(), to_bgr_mat(s.image));
        if (uni(rng) < policy.probability_augmented) {
            AugmentationPolicy always = policy;
            always.probability_augmented = 1.0;
            Sample aug = augment(s, always, rng);
            fs::path aug_dst = dst.parent_path() / (dst.stem().string() + "_aug.png");
            cv::imwrite(aug_dst.string(), to_bgr_mat(aug.image));
        }
    }
}

}  // namespace cvit
