#include <doctest.h>

#include "cvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace cvit;

TEST_CASE("bce_loss") {
    SUBCASE("uninformative 0.5 scores give ln 2") {
        CHECK(bce_loss({0.5, 0.5}, {0, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("confident correct scores give -ln 0.9") {
        CHECK(bce_loss({0.1, 0.9}, {0, 1}) ==
              doctest::Approx(-std::log(0.9)).epsilon(1e-12));
    }
    SUBCASE("extreme scores stay finite via clamping") {
        const double loss = bce_loss({0.0, 1.0}, {1, 0});
        CHECK(std::isfinite(loss));
        CHECK(loss == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
    }
    SUBCASE("size mismatch throws") {
        CHECK_THROWS(bce_loss({0.5}, {0, 1}));
    }
}

TEST_CASE("roc and auc") {
    SUBCASE("hand-computed four-point case") {
        // pairs (pos, neg): (0.35,0.1)+, (0.35,0.4)-, (0.8,0.1)+, (0.8,0.4)+ => 3/4
        const std::vector<double> scores{0.1, 0.35, 0.4, 0.8};
        const std::vector<int> labels{0, 1, 0, 1};
        CHECK(auc_pairwise_oracle(scores, labels) == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(auc_trapezoid(roc_curve(scores, labels)) ==
              doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("perfect separation gives 1, inverted gives 0") {
        CHECK(auc_trapezoid(roc_curve({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1})) ==
              doctest::Approx(1.0));
        CHECK(auc_trapezoid(roc_curve({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1})) ==
              doctest::Approx(0.0));
    }
    SUBCASE("curve is anchored and monotone") {
        std::mt19937 rng(0);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        std::vector<double> scores;
        std::vector<int> labels;
        for (int i = 0; i < 200; ++i) {
            scores.push_back(std::round(uni(rng) * 10.0) / 10.0);  // force ties
            labels.push_back(uni(rng) < 0.5 ? 0 : 1);
        }
        auto roc = roc_curve(scores, labels);
        REQUIRE(roc.size() >= 2);
        CHECK(roc.front().fpr == 0.0);
        CHECK(roc.front().tpr == 0.0);
        CHECK(roc.back().fpr == 1.0);
        CHECK(roc.back().tpr == 1.0);
        for (size_t i = 1; i < roc.size(); ++i) {
            CHECK(roc[i].fpr >= roc[i - 1].fpr);
            CHECK(roc[i].tpr >= roc[i - 1].tpr);
            CHECK(roc[i].threshold <= roc[i - 1].threshold);
        }
    }
    SUBCASE("trapezoid matches pairwise concordance across random instances") {
        std::mt19937 rng(1);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        for (int trial = 0; trial < 100; ++trial) {
            const int n = 5 + static_cast<int>(uni(rng) * 60);
            std::vector<double> scores;
            std::vector<int> labels;
            for (int i = 0; i < n; ++i) {
                // quantized scores so tie handling is exercised
                scores.push_back(std::round(uni(rng) * 8.0) / 8.0);
                labels.push_back(uni(rng) < 0.5 ? 0 : 1);
            }
            labels[0] = 0;
            labels[1] = 1;  // both classes present
            CHECK(std::abs(auc_trapezoid(roc_curve(scores, labels)) -
                           auc_pairwise_oracle(scores, labels)) < 1e-9);
        }
    }
    SUBCASE("auc invariant under strictly increasing transforms") {
        std::mt19937 rng(2);
        std::uniform_real_distribution<double> uni(0.01, 0.99);
        std::vector<double> scores, warped;
        std::vector<int> labels;
        for (int i = 0; i < 100; ++i) {
            scores.push_back(uni(rng));
            warped.push_back(std::atan(5.0 * scores.back()));
            labels.push_back(uni(rng) < 0.5 ? 0 : 1);
        }
        CHECK(auc_trapezoid(roc_curve(scores, labels)) ==
              doctest::Approx(auc_trapezoid(roc_curve(warped, labels))).epsilon(1e-12));
    }
    SUBCASE("random labels land near 0.5") {
        std::mt19937 rng(3);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        std::vector<double> scores;
        std::vector<int> labels;
        for (int i = 0; i < 2000; ++i) {
            scores.push_back(uni(rng));
            labels.push_back(uni(rng) < 0.5 ? 0 : 1);
        }
        const double auc = auc_trapezoid(roc_curve(scores, labels));
        CHECK(auc > 0.45);
        CHECK(auc < 0.55);
    }
    SUBCASE("single-class input throws in the oracle and yields no auc") {
        CHECK_THROWS(auc_pairwise_oracle({0.2, 0.8}, {1, 1}));
        auto report = compute_metrics({0.2, 0.8}, {1, 1}, {"a", "a"});
        CHECK(!report.auc.has_value());
    }
}

TEST_CASE("compute_metrics") {
    const std::vector<double> scores{0.9, 0.2, 0.6, 0.4};
    const std::vector<int> labels{1, 0, 1, 0};
    const std::vector<std::string> vids{"f/v0", "r/v0", "f/v0", "r/v0"};
    auto report = compute_metrics(scores, labels, vids);
    CHECK(report.accuracy == doctest::Approx(1.0));
    REQUIRE(report.auc.has_value());
    CHECK(*report.auc == doctest::Approx(1.0));
    REQUIRE(report.per_video.size() == 2);
    for (const auto& v : report.per_video) {
        if (v.video_id == "f/v0") {
            CHECK(v.aggregate == doctest::Approx(0.75));
            CHECK(v.label_out == 1);
        } else {
            CHECK(v.aggregate == doctest::Approx(0.3));
            CHECK(v.label_out == 0);
        }
    }
}

TEST_CASE("aggregate_video") {
    SUBCASE("mean and verdict") {
        auto v = aggregate_video("x", {0.8, 1.0});
        CHECK(v.aggregate == doctest::Approx(0.9));
        CHECK(v.label_out == 1);
    }
    SUBCASE("boundary 0.5 counts as fake") {
        CHECK(aggregate_video("x", {0.5}).label_out == 1);
    }
    SUBCASE("mixed frames below the bar stay real") {
        std::vector<double> probs(15, 0.2);
        probs.insert(probs.end(), 15, 0.6);
        auto v = aggregate_video("x", probs);
        CHECK(v.aggregate == doctest::Approx(0.4));
        CHECK(v.label_out == 0);
    }
    SUBCASE("order invariance") {
        std::vector<double> a{0.1, 0.9, 0.3}, b{0.3, 0.1, 0.9};
        CHECK(aggregate_video("x", a).aggregate ==
              doctest::Approx(aggregate_video("x", b).aggregate).epsilon(1e-15));
    }
    SUBCASE("no frames throws") {
        CHECK_THROWS(aggregate_video("x", {}));
    }
}
