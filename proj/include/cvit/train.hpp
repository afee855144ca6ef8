#pragma once

#include "cvit/data.hpp"
#include "cvit/metrics.hpp"
#include "cvit/model.hpp"
#include "cvit/ops.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvit {

/// Piecewise-constant step decay: lr(epoch) = base * gamma^floor(epoch/step).
struct Schedule {
    double base_lr = 1e-4;
    double gamma = 0.1;
    int step_size = 15;
    int total_epochs = 50;

    double lr_at(int epoch) const {
        if (epoch < 0 || epoch >= total_epochs)
            throw std::invalid_argument("lr_at: epoch out of range");
        const int k = epoch / step_size;
        // keep decade schedules (base 1e-4, gamma 0.1) exactly on decade values
        const double eb = std::log10(base_lr), eg = std::log10(gamma);
        if (std::abs(eb - std::round(eb)) < 1e-12 && std::abs(eg - std::round(eg)) < 1e-12)
            return std::pow(10.0, std::round(eb) + k * std::round(eg));
        return base_lr * std::pow(gamma, k);
    }
};

/// Adam with decoupled weight decay (p -= lr*wd*p before the moment update).
template <typename S>
class Adam {
public:
    struct Config {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-7;
    };

    explicit Adam(Config cfg = {}) : cfg_(cfg) {}

    const Config& config() const { return cfg_; }
    int64_t step_count() const { return t_; }

    void step(const std::vector<Tensor<S>*>& params,
              const std::vector<const Tensor<S>*>& grads, double lr) {
        if (params.size() != grads.size())
            throw std::invalid_argument("adam_step: params/grads size mismatch");
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(Tensor<S>::zeros(p->shape()));
                v_.emplace_back(Tensor<S>::zeros(p->shape()));
            }
        }
        for (const auto* g : grads)
            if (!g->all_finite())
                throw std::runtime_error("adam_step: non-finite gradient, step aborted");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->array();
            const auto& g = grads[i]->array();
            if (cfg_.weight_decay != 0.0)
                p -= static_cast<S>(lr * cfg_.weight_decay) * p;
            m_[i].array() = static_cast<S>(cfg_.beta1) * m_[i].array() +
                            static_cast<S>(1.0 - cfg_.beta1) * g;
            v_[i].array() = static_cast<S>(cfg_.beta2) * v_[i].array() +
                            static_cast<S>(1.0 - cfg_.beta2) * g * g;
            p -= static_cast<S>(lr) * (m_[i].array() / static_cast<S>(bc1)) /
                 ((v_[i].array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(cfg_.eps));
        }
    }

private:
    Config cfg_;
    std::vector<Tensor<S>> m_, v_;
    int64_t t_ = 0;
};

inline TensorF softmax_rows(const TensorF& logits) {
    TensorF out(logits.shape());
    const int64_t D = logits.shape().back();
    const int64_t R = logits.numel() / D;
    for (int64_t r = 0; r < R; ++r) {
        auto row = logits.array().segment(r * D, D);
        out.array().segment(r * D, D) = (row - row.maxCoeff()).exp();
        out.array().segment(r * D, D) /= out.array().segment(r * D, D).sum();
    }
    return out;
}

/// Eval-mode frame scores over a split; returns the full metrics report.
inline MetricsReport evaluate(CViTModel<float>& model, const std::vector<Sample>& samples,
                              const std::vector<size_t>& indices, int64_t batch_size = 32) {
    if (indices.empty()) throw std::invalid_argument("evaluate: empty split");
    BatchStream stream(samples, indices, batch_size, 0, /*train=*/false);
    stream.start_epoch(0);
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::string> video_ids;
    while (auto batch = stream.next()) {
        TensorF probs = softmax_rows(model.logits(batch->images));
        for (size_t i = 0; i < batch->labels.size(); ++i) {
            scores.push_back(probs[2 * static_cast<int64_t>(i) + 1]);
            labels.push_back(batch->labels[i]);
            video_ids.push_back(batch->video_ids[i]);
        }
    }
    return compute_metrics(scores, labels, video_ids);
}

/// Softmax fake-probability per frame, mean-aggregated to a video verdict.
/// Uses at most max_frames frames in the given order.
inline VideoVerdict classify_video(CViTModel<float>& model, const std::vector<TensorF>& frames,
                                   const std::string& video_id, int64_t max_frames = 30) {
    if (frames.empty()) throw std::invalid_argument("classify_video: need at least one frame");
    const int64_t used = std::min<int64_t>(max_frames, static_cast<int64_t>(frames.size()));
    std::vector<double> probs;
    for (int64_t i = 0; i < used; ++i) {
        TensorF x = normalize(frames[i]);
        const auto& s = x.shape();
        TensorF logits = model.logits(x.reshaped({1, s[0], s[1], s[2]}));
        probs.push_back(softmax_rows(logits)[1]);
    }
    return aggregate_video(video_id, probs);
}

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    std::optional<double> val_auc;
};

struct TrainResult {
    std::vector<EpochStats> history;
    CViTModel<float> best_model;
    int best_epoch = -1;
    double best_val_loss = 0.0;
};

struct TrainOptions {
    Schedule schedule;
    int64_t batch_size = 32;
    uint64_t seed = 0;
    AugmentationPolicy augmentation;
    Adam<float>::Config adam;
    std::ostream* log = nullptr;
};

/// One optimizer step on a batch; returns the batch loss.
inline double train_step(CViTModel<float>& model, Adam<float>& optimizer, const Batch& batch,
                         double lr) {
    Tape<float> tape;
    auto bound = model.bind(tape, /*requires_grad=*/true);
    Var x = tape.leaf(batch.images, false);
    Var logits = model.forward(tape, bound, x, Mode::train);
    Var loss = bce_with_logits(tape, logits, batch.labels);
    const double loss_value = tape.value(loss)[0];
    tape.backward(loss);
    auto named = model.named_parameters();
    std::vector<Tensor<float>*> params;
    std::vector<const Tensor<float>*> grads;
    for (size_t i = 0; i < named.size(); ++i) {
        params.push_back(named[i].second);
        grads.push_back(&tape.grad(bound.params[i]));
    }
    optimizer.step(params, grads, lr);
    return loss_value;
}

/// Full training loop: per epoch, shuffled-augmented train batches with Adam
/// updates, then a validation pass. Keeps the best-validation-loss model.
/// A non-finite train loss aborts with the last good model preserved in
/// best_model.
inline TrainResult train(CViTModel<float>& model, const std::vector<Sample>& samples,
                         const SplitManifest& manifest, const TrainOptions& opts) {
    auto train_idx = indices_for_split(samples, manifest, "train");
    auto val_idx = indices_for_split(samples, manifest, "val");
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train: empty train or validation split");

    TrainResult result;
    result.best_model = model;
    Adam<float> optimizer(opts.adam);
    BatchStream stream(samples, train_idx, opts.batch_size, opts.seed, /*train=*/true,
                       opts.augmentation);

    for (int epoch = 0; epoch < opts.schedule.total_epochs; ++epoch) {
        const double lr = opts.schedule.lr_at(epoch);
        stream.start_epoch(epoch);
        double loss_sum = 0.0;
        int64_t batches = 0;
        while (auto batch = stream.next()) {
            const double loss = train_step(model, optimizer, *batch, lr);
            if (!std::isfinite(loss))
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", aborting");
            loss_sum += loss;
            ++batches;
        }
        MetricsReport val = evaluate(model, samples, val_idx, opts.batch_size);
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.train_loss = loss_sum / std::max<int64_t>(1, batches);
        stats.val_loss = val.log_loss;
        stats.val_accuracy = val.accuracy;
        stats.val_auc = val.auc;
        result.history.push_back(stats);
        if (result.best_epoch < 0 || val.log_loss < result.best_val_loss) {
            result.best_epoch = epoch;
            result.best_val_loss = val.log_loss;
            result.best_model = model;
        }
        if (opts.log)
            (*opts.log) << "epoch " << epoch << " lr " << lr << " train_loss "
                        << stats.train_loss << " val_loss " << stats.val_loss << " val_acc "
                        << stats.val_accuracy << "\n";
    }
    return result;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write history csv: " + path);
    f << "epoch,lr,train_loss,val_loss,val_accuracy,val_auc\n";
    for (const auto& e : history) {
        f << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.val_loss << ","
          << e.val_accuracy << ",";
        if (e.val_auc) f << *e.val_auc;
        f << "\n";
    }
}

}  // namespace cvit
