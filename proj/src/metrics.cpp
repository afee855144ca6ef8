#include "cvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

namespace cvit {

namespace {
constexpr double kProbClamp = 1e-7;
}

double bce_loss(const std::vector<double>& probabilities, const std::vector<int>& labels) {
    if (probabilities.empty() || probabilities.size() != labels.size())
        throw std::invalid_argument("bce_loss: need one label per probability, nonempty");
    double acc = 0.0;
    for (size_t i = 0; i < probabilities.size(); ++i) {
        const double p = std::clamp(probabilities[i], kProbClamp, 1.0 - kProbClamp);
        acc += labels[i] == 1 ? -std::log(p) : -std::log(1.0 - p);
    }
    return acc / static_cast<double>(probabilities.size());
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("roc_curve: need one label per score, nonempty");
    int64_t P = 0, N = 0;
    for (int y : labels) (y == 1 ? P : N)++;

    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    std::vector<RocPoint> roc;
    roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < order.size()) {
        const double thr = scores[order[i]];
        // consume all samples tied at this threshold
        while (i < order.size() && scores[order[i]] == thr) {
            (labels[order[i]] == 1 ? tp : fp)++;
            ++i;
        }
        roc.push_back({thr, N > 0 ? static_cast<double>(fp) / N : 0.0,
                       P > 0 ? static_cast<double>(tp) / P : 0.0});
    }
    if (roc.back().fpr != 1.0 || roc.back().tpr != 1.0)
        roc.push_back({-std::numeric_limits<double>::infinity(), N > 0 ? 1.0 : roc.back().fpr,
                       P > 0 ? 1.0 : roc.back().tpr});
    return roc;
}

double auc_trapezoid(const std::vector<RocPoint>& roc) {
    double area = 0.0;
    for (size_t i = 1; i < roc.size(); ++i)
        area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0;
    return area;
}

double auc_pairwise_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
    int64_t P = 0, N = 0;
    for (int y : labels) (y == 1 ? P : N)++;
    if (P == 0 || N == 0)
        throw std::invalid_argument("auc_pairwise_oracle: both classes must be present");
    double concordant = 0.0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j]) concordant += 1.0;
            else if (scores[i] == scores[j]) concordant += 0.5;
        }
    }
    return concordant / (static_cast<double>(P) * static_cast<double>(N));
}

MetricsReport compute_metrics(const std::vector<double>& scores,
                              const std::vector<int>& labels,
                              const std::vector<std::string>& video_ids) {
    if (scores.empty() || scores.size() != labels.size())
        throw std::invalid_argument("compute_metrics: need one label per score, nonempty");
    MetricsReport report;
    int64_t correct = 0, P = 0, N = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const int pred = scores[i] >= 0.5 ? 1 : 0;
        if (pred == labels[i]) ++correct;
        (labels[i] == 1 ? P : N)++;
    }
    report.accuracy = static_cast<double>(correct) / scores.size();
    report.log_loss = bce_loss(scores, labels);
    if (P > 0 && N > 0) {
        report.roc_points = roc_curve(scores, labels);
        report.auc = auc_trapezoid(report.roc_points);
    }
    if (!video_ids.empty()) {
        std::map<std::string, std::vector<double>> by_video;
        for (size_t i = 0; i < scores.size(); ++i) by_video[video_ids[i]].push_back(scores[i]);
        for (auto& [vid, probs] : by_video)
            report.per_video.push_back(aggregate_video(vid, probs));
    }
    return report;
}

VideoVerdict aggregate_video(const std::string& video_id,
                             const std::vector<double>& frame_probabilities) {
    if (frame_probabilities.empty())
        throw std::invalid_argument("aggregate_video: need at least one frame");
    VideoVerdict v;
    v.video_id = video_id;
    v.frame_probabilities = frame_probabilities;
    double acc = 0.0;
    for (double p : frame_probabilities) acc += p;
    v.aggregate = acc / frame_probabilities.size();
    v.label_out = v.aggregate >= 0.5 ? 1 : 0;  // boundary 0.5 is fake
    return v;
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write ROC csv: " + path);
    f << "threshold,fpr,tpr\n";
    for (const auto& p : roc) f << p.threshold << "," << p.fpr << "," << p.tpr << "\n";
}

}  // namespace cvit
