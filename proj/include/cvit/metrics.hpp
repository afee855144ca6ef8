#pragma once

#include <optional>
#include <string>
#include <vector>

namespace cvit {

struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
};

/// Aggregate of up to 30 frame probabilities for one video; fake iff the mean
/// probability is >= 0.5.
struct VideoVerdict {
    std::string video_id;
    std::vector<double> frame_probabilities;
    double aggregate = 0.0;
    int label_out = 0;
};

struct MetricsReport {
    double accuracy = 0.0;
    double log_loss = 0.0;
    std::vector<RocPoint> roc_points;
    std::optional<double> auc;  // absent when only one class is present
    std::vector<VideoVerdict> per_video;
};

/// Mean binary cross-entropy of fake-probabilities, clamped to
/// [1e-7, 1 - 1e-7] before the log.
double bce_loss(const std::vector<double>& probabilities, const std::vector<int>& labels);

/// ROC by sweeping every distinct score threshold (predict fake when
/// score >= threshold). Starts at (0,0), ends at (1,1); both coordinates are
/// non-decreasing.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels);

/// Trapezoidal integral of an roc_curve() result.
double auc_trapezoid(const std::vector<RocPoint>& roc);

/// Concordance-probability AUC: (#correctly ordered pos/neg pairs + 0.5 ties)
/// / (P*N). Throws when only one class is present.
double auc_pairwise_oracle(const std::vector<double>& scores, const std::vector<int>& labels);

/// Frame-level accuracy at threshold 0.5, log loss, ROC/AUC, and per-video
/// mean-probability verdicts.
MetricsReport compute_metrics(const std::vector<double>& scores,
                              const std::vector<int>& labels,
                              const std::vector<std::string>& video_ids);

VideoVerdict aggregate_video(const std::string& video_id,
                             const std::vector<double>& frame_probabilities);

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc);

}  // namespace cvit
