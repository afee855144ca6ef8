#include <doctest.h>

#include "cvit/train.hpp"
#include "testutil.hpp"

#include <cmath>

using namespace cvit;
using namespace cvit::testutil;

TEST_CASE("lr schedule") {
    Schedule s;  // base 1e-4, gamma 0.1, step 15, 50 epochs
    SUBCASE("decade boundaries are exact") {
        CHECK(s.lr_at(0) == 1e-4);
        CHECK(s.lr_at(14) == 1e-4);
        CHECK(s.lr_at(15) == 1e-5);
        CHECK(s.lr_at(29) == 1e-5);
        CHECK(s.lr_at(30) == 1e-6);
        CHECK(s.lr_at(45) == 1e-7);
        CHECK(s.lr_at(49) == 1e-7);
    }
    SUBCASE("out-of-range epochs throw") {
        CHECK_THROWS(s.lr_at(-1));
        CHECK_THROWS(s.lr_at(50));
    }
    SUBCASE("non-decade schedules follow base * gamma^k") {
        Schedule t{0.3, 0.5, 10, 40};
        CHECK(t.lr_at(0) == doctest::Approx(0.3));
        CHECK(t.lr_at(10) == doctest::Approx(0.15));
        CHECK(t.lr_at(25) == doctest::Approx(0.3 * 0.25));
    }
}

TEST_CASE("adam") {
    SUBCASE("first step moves each parameter by about lr") {
        // bias-corrected first step is lr * g / (|g| + eps) ~= lr * sign(g)
        Adam<double>::Config cfg;
        cfg.weight_decay = 0.0;
        Adam<double> opt(cfg);
        Tensor<double> p({3}, {1.0, -2.0, 0.5});
        Tensor<double> g({3}, {0.3, -4.0, 1e-3});
        opt.step({&p}, {&g}, 1e-4);
        CHECK(p[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(-2.0 + 1e-4).epsilon(1e-6));
        CHECK(p[2] < 0.5);
    }
    SUBCASE("zero gradient with zero weight decay is a no-op") {
        Adam<double>::Config cfg;
        cfg.weight_decay = 0.0;
        Adam<double> opt(cfg);
        Tensor<double> p({2}, {1.0, -1.0});
        Tensor<double> g = Tensor<double>::zeros({2});
        opt.step({&p}, {&g}, 1e-2);
        CHECK(p[0] == 1.0);
        CHECK(p[1] == -1.0);
    }
    SUBCASE("decoupled weight decay shrinks before the update") {
        Adam<double>::Config cfg;
        cfg.weight_decay = 0.1;
        Adam<double> opt(cfg);
        Tensor<double> p({1}, {1.0});
        Tensor<double> g = Tensor<double>::zeros({1});
        opt.step({&p}, {&g}, 1.0);
        CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-12));
    }
    SUBCASE("identical runs are deterministic") {
        auto run = [] {
            Adam<double> opt;
            Tensor<double> p({2}, {0.4, -0.7});
            for (int i = 0; i < 25; ++i) {
                Tensor<double> g({2}, {p[0] * 2.0, p[1] * 2.0});
                opt.step({&p}, {&g}, 1e-2);
            }
            return std::make_pair(p[0], p[1]);
        };
        auto a = run(), b = run();
        CHECK(a.first == b.first);
        CHECK(a.second == b.second);
    }
    SUBCASE("drives a convex quadratic toward its minimum") {
        Adam<double> opt;
        Tensor<double> p({1}, {3.0});
        for (int i = 0; i < 2000; ++i) {
            Tensor<double> g({1}, {2.0 * (p[0] - 1.0)});
            opt.step({&p}, {&g}, 1e-2);
        }
        CHECK(std::abs(p[0] - 1.0) < 1e-2);
    }
    SUBCASE("non-finite gradient aborts the step") {
        Adam<double> opt;
        Tensor<double> p({1}, {1.0});
        Tensor<double> g({1}, {std::numeric_limits<double>::quiet_NaN()});
        CHECK_THROWS_WITH_AS(opt.step({&p}, {&g}, 1e-2),
                             "adam_step: non-finite gradient, step aborted",
                             std::runtime_error);
        CHECK(p[0] == 1.0);  // untouched
    }
}

TEST_CASE("training loop") {
    auto cfg = CViTConfig::reduced_scale();
    auto samples =
        make_synthetic_samples(/*videos_per_class=*/10, /*frames_per_video=*/4,
                               cfg.fl.input_size, 11);

    SUBCASE("train_step reduces loss when repeated on one batch") {
        auto model = CViTModel<float>::init(cfg, 0);
        Adam<float>::Config acfg;
        acfg.weight_decay = 0.0;
        Adam<float> opt(acfg);
        std::vector<size_t> idx;
        for (size_t i = 0; i < 16; ++i) idx.push_back(i * 5 % samples.size());
        BatchStream stream(samples, idx, 16, 0, /*train=*/false);
        stream.start_epoch(0);
        Batch batch = *stream.next();
        const double first = train_step(model, opt, batch, 1e-3);
        double last = first;
        for (int i = 0; i < 30; ++i) last = train_step(model, opt, batch, 1e-3);
        CHECK(last < first);
        CHECK(last < 0.2);
    }
    SUBCASE("history length, lr column, and best-model bookkeeping") {
        auto model = CViTModel<float>::init(cfg, 1);
        SplitManifest manifest = split(samples, {0.50, 0.25, 0.25}, 1);
        TrainOptions opts;
        opts.schedule = Schedule{1e-3, 0.1, 2, 3};
        opts.batch_size = 8;
        opts.seed = 1;
        REQUIRE(!indices_for_split(samples, manifest, "train").empty());
        TrainResult result = train(model, samples, manifest, opts);
        REQUIRE(result.history.size() == 3);
        CHECK(result.history[0].lr == 1e-3);
        CHECK(result.history[2].lr == 1e-4);
        CHECK(result.best_epoch >= 0);
        double best = result.history[0].val_loss;
        for (const auto& e : result.history) best = std::min(best, e.val_loss);
        CHECK(result.best_val_loss == doctest::Approx(best));
    }
    SUBCASE("same seed reproduces the loss history bitwise") {
        SplitManifest manifest = split(samples, {0.50, 0.25, 0.25}, 2);
        auto run = [&] {
            auto model = CViTModel<float>::init(cfg, 7);
            TrainOptions opts;
            opts.schedule = Schedule{1e-3, 0.1, 5, 2};
            opts.batch_size = 8;
            opts.seed = 7;
            return train(model, samples, manifest, opts);
        };
        TrainResult a = run(), b = run();
        REQUIRE(a.history.size() == b.history.size());
        for (size_t i = 0; i < a.history.size(); ++i) {
            CHECK(a.history[i].train_loss == b.history[i].train_loss);
            CHECK(a.history[i].val_loss == b.history[i].val_loss);
        }
    }
}

TEST_CASE("evaluate and classify_video") {
    auto cfg = CViTConfig::reduced_scale();
    auto model = CViTModel<float>::init(cfg, 3);
    auto samples = make_synthetic_samples(4, 3, cfg.fl.input_size, 13);
    std::vector<size_t> all(samples.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;

    SUBCASE("evaluate is deterministic and well-formed") {
        MetricsReport a = evaluate(model, samples, all, 8);
        MetricsReport b = evaluate(model, samples, all, 8);
        CHECK(a.accuracy == b.accuracy);
        CHECK(a.log_loss == b.log_loss);
        CHECK(a.accuracy >= 0.0);
        CHECK(a.accuracy <= 1.0);
        CHECK(a.per_video.size() == 8);  // 4 videos per class
    }
    SUBCASE("classify_video uses at most max_frames frames") {
        std::vector<TensorF> frames;
        std::mt19937 rng(5);
        for (int i = 0; i < 45; ++i)
            frames.push_back(stripe_image(cfg.fl.input_size, kLabelFake, 3.0, 0.4, rng));
        VideoVerdict v = classify_video(model, frames, "clip", 30);
        CHECK(v.frame_probabilities.size() == 30);
        std::vector<TensorF> first30(frames.begin(), frames.begin() + 30);
        VideoVerdict w = classify_video(model, first30, "clip", 30);
        CHECK(v.aggregate == w.aggregate);
        CHECK((v.label_out == 0 || v.label_out == 1));
    }
    SUBCASE("fewer frames than the cap uses them all") {
        std::vector<TensorF> frames;
        std::mt19937 rng(6);
        for (int i = 0; i < 5; ++i)
            frames.push_back(stripe_image(cfg.fl.input_size, kLabelReal, 4.0, 0.1, rng));
        CHECK(classify_video(model, frames, "clip", 30).frame_probabilities.size() == 5);
    }
    SUBCASE("empty inputs throw") {
        CHECK_THROWS(evaluate(model, samples, {}, 8));
        CHECK_THROWS(classify_video(model, {}, "clip", 30));
    }
}
