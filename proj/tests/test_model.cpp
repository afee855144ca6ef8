#include <doctest.h>

#include "cvit/gradcheck.hpp"
#include "cvit/model.hpp"

#include <cmath>
#include <random>

using namespace cvit;

namespace {

TensorF randu(Shape shape, unsigned seed) {
    TensorF t(std::move(shape));
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

TensorF softmax_rows(const TensorF& logits) {
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

}  // namespace

TEST_CASE("parameter counts") {
    auto model = CViTModel<float>::init(CViTConfig::full_scale(), 1);
    auto counts = model.count_parameters();

    SUBCASE("FL count sits in the published band") {
        CHECK(counts.fl >= 10'700'000);
        CHECK(counts.fl <= 10'920'000);
    }
    SUBCASE("stage-5 conv weights analytic count") {
        // 3*3*256*512 + 3 * 3*3*512*512
        int64_t got = 0;
        for (auto& layer : model.stages[4]) got += layer.w.numel();
        CHECK(got == 1179648 + 3 * 2359296);
        CHECK(got == 8257536);
    }
    SUBCASE("total equals sum of components and is seed-invariant") {
        CHECK(counts.total() == counts.fl + counts.vit);
        auto model2 = CViTModel<float>::init(CViTConfig::full_scale(), 999);
        auto counts2 = model2.count_parameters();
        CHECK(counts2.fl == counts.fl);
        CHECK(counts2.vit == counts.vit);
    }
    SUBCASE("zero-depth encoder additivity") {
        CViTConfig cfg = CViTConfig::full_scale();
        cfg.vit.encoder_depth = 0;
        auto m0 = CViTModel<float>::init(cfg, 1);
        int64_t expected = m0.patch_w.numel() + m0.patch_b.numel() + m0.class_token.numel() +
                           m0.pos_embedding.numel() + m0.final_ln_gamma.numel() +
                           m0.final_ln_beta.numel() + m0.head_w1.numel() + m0.head_b1.numel() +
                           m0.head_w2.numel() + m0.head_b2.numel();
        CHECK(m0.count_parameters().vit == expected);
        CHECK(m0.count_parameters().total() == m0.count_parameters().fl + expected);
    }
}

TEST_CASE("initialization") {
    auto cfg = CViTConfig::reduced_scale();
    SUBCASE("same seed twice is bitwise identical") {
        auto a = CViTModel<float>::init(cfg, 42);
        auto b = CViTModel<float>::init(cfg, 42);
        auto pa = a.named_parameters(), pb = b.named_parameters();
        for (size_t i = 0; i < pa.size(); ++i)
            for (int64_t j = 0; j < pa[i].second->numel(); ++j)
                CHECK((*pa[i].second)[j] == (*pb[i].second)[j]);
    }
    SUBCASE("norm scales start at one, shifts at zero") {
        auto m = CViTModel<float>::init(cfg, 7);
        for (auto& stage : m.stages)
            for (auto& l : stage) {
                CHECK(l.gamma.array().minCoeff() == 1.0f);
                CHECK(l.gamma.array().maxCoeff() == 1.0f);
                CHECK(l.beta.array().abs().maxCoeff() == 0.0f);
            }
        CHECK(m.encoder[0].ln1_gamma.array().minCoeff() == 1.0f);
        CHECK(m.final_ln_beta.array().abs().maxCoeff() == 0.0f);
    }
    SUBCASE("large layers hit the fan-in variance target within 20%") {
        auto m = CViTModel<float>::init(CViTConfig::full_scale(), 11);
        for (auto& [name, t] : m.named_parameters()) {
            if (t->numel() < 10'000 || name.find(".w") == std::string::npos) continue;
            int64_t fan_in = 0;
            if (t->rank() == 4) fan_in = t->dim(1) * 9;
            else if (t->rank() == 2) fan_in = t->dim(0);
            else continue;
            const double target = 2.0 / fan_in;
            const double mean = t->array().template cast<double>().mean();
            const double var =
                (t->array().template cast<double>() - mean).square().mean();
            CHECK(var > 0.8 * target);
            CHECK(var < 1.2 * target);
        }
    }
}

TEST_CASE("reduced-scale forward") {
    auto cfg = CViTConfig::reduced_scale();
    auto model = CViTModel<float>::init(cfg, 3);

    SUBCASE("fl output shape is 128x1x1") {
        Tape<float> t;
        auto b = model.bind(t, false);
        Var x = t.leaf(randu({2, 3, 32, 32}, 1));
        Var f = model.fl_forward(t, b, x, Mode::eval);
        CHECK(t.value(f).shape() == Shape{2, 128, 1, 1});
    }
    SUBCASE("batch of 4 gives 4x2 logits with softmax rows summing to 1") {
        TensorF logits = model.logits(randu({4, 3, 32, 32}, 2));
        CHECK(logits.shape() == Shape{4, 2});
        TensorF probs = softmax_rows(logits);
        for (int r = 0; r < 4; ++r)
            CHECK(std::abs(probs[2 * r] + probs[2 * r + 1] - 1.0f) < 1e-6f);
    }
    SUBCASE("identical inputs in one batch give identical rows (eval)") {
        TensorF one = randu({1, 3, 32, 32}, 3);
        TensorF batch({2, 3, 32, 32});
        batch.array().segment(0, one.numel()) = one.array();
        batch.array().segment(one.numel(), one.numel()) = one.array();
        TensorF logits = model.logits(batch);
        CHECK(logits[0] == logits[2]);
        CHECK(logits[1] == logits[3]);
    }
    SUBCASE("permuting the batch permutes logits identically (eval)") {
        TensorF a = randu({1, 3, 32, 32}, 4), c = randu({1, 3, 32, 32}, 5);
        TensorF ab({2, 3, 32, 32}), ba({2, 3, 32, 32});
        ab.array().segment(0, a.numel()) = a.array();
        ab.array().segment(a.numel(), c.numel()) = c.array();
        ba.array().segment(0, c.numel()) = c.array();
        ba.array().segment(c.numel(), a.numel()) = a.array();
        TensorF l1 = model.logits(ab), l2 = model.logits(ba);
        CHECK(l1[0] == l2[2]);
        CHECK(l1[1] == l2[3]);
        CHECK(l1[2] == l2[0]);
        CHECK(l1[3] == l2[1]);
    }
    SUBCASE("wrong input extents rejected") {
        Tape<float> t;
        auto b = model.bind(t, false);
        Var x = t.leaf(TensorF::zeros({1, 3, 16, 16}));
        CHECK_THROWS_AS(model.fl_forward(t, b, x, Mode::eval), dim_error);
    }
}

TEST_CASE("zero propagation through FL") {
    auto cfg = CViTConfig::reduced_scale();
    auto model = CViTModel<float>::init(cfg, 9);
    // zero conv weights; eval batchnorm with zero running mean, unit var, beta 0
    for (auto& stage : model.stages)
        for (auto& l : stage) {
            l.w.array().setZero();
            l.b.array().setZero();
            l.beta.array().setZero();
            l.bn.running_mean.array().setZero();
            l.bn.running_var.array().setOnes();
        }
    Tape<float> t;
    auto b = model.bind(t, false);
    Var x = t.leaf(randu({1, 3, 32, 32}, 6));
    Var f = model.fl_forward(t, b, x, Mode::eval);
    CHECK(t.value(f).array().abs().maxCoeff() == 0.0f);
}

TEST_CASE("patchify_and_embed") {
    CViTConfig cfg = CViTConfig::reduced_scale();
    cfg.fl.input_size = 64;  // gives 2 patches so locality is visible
    auto model = CViTModel<float>::init(cfg, 10);
    const int64_t C = cfg.fl.output_channels(), P = cfg.num_patches(), W = cfg.fl.output_size();
    REQUIRE(P == 2);

    SUBCASE("sequence length and dim") {
        Tape<float> t;
        auto b = model.bind(t, false);
        Var f = t.leaf(randu({3, C, P, W}, 7));
        Var seq = model.patchify_and_embed(t, b, f);
        CHECK(t.value(seq).shape() == Shape{3, P + 1, cfg.vit.embed_dim});
    }
    SUBCASE("zero everything gives zero sequence") {
        auto m = model;
        m.patch_b.array().setZero();
        m.class_token.array().setZero();
        m.pos_embedding.array().setZero();
        Tape<float> t;
        auto b = m.bind(t, false);
        Var f = t.leaf(TensorF::zeros({1, C, P, W}));
        Var seq = m.patchify_and_embed(t, b, f);
        CHECK(t.value(seq).array().abs().maxCoeff() == 0.0f);
    }
    SUBCASE("per-patch locality") {
        TensorF f1 = randu({1, C, P, W}, 8), f2 = randu({1, C, P, W}, 9);
        // make patch 0 (height row 0) identical in both maps
        for (int64_t c = 0; c < C; ++c)
            for (int64_t w = 0; w < W; ++w)
                f2[(c * P + 0) * W + w] = f1[(c * P + 0) * W + w];
        Tape<float> t;
        auto b = model.bind(t, false);
        Var s1 = model.patchify_and_embed(t, b, t.leaf(f1));
        auto b2 = model.bind(t, false);
        Var s2 = model.patchify_and_embed(t, b2, t.leaf(f2));
        const int64_t E = cfg.vit.embed_dim;
        // token 1 (first patch) matches, token 2 differs
        for (int64_t e = 0; e < E; ++e)
            CHECK(t.value(s1)[E + e] == t.value(s2)[E + e]);
        bool differs = false;
        for (int64_t e = 0; e < E; ++e)
            differs = differs || t.value(s1)[2 * E + e] != t.value(s2)[2 * E + e];
        CHECK(differs);
    }
    SUBCASE("wrong height rejected") {
        Tape<float> t;
        auto b = model.bind(t, false);
        Var f = t.leaf(TensorF::zeros({1, C, P + 1, W}));
        CHECK_THROWS_AS(model.patchify_and_embed(t, b, f), dim_error);
    }
}

TEST_CASE("full-scale shape contract") {
    auto model = CViTModel<float>::init(CViTConfig::full_scale(), 12);
    Tape<float> t;
    auto b = model.bind(t, false);
    Var x = t.leaf(TensorF::ones({1, 3, 224, 224}));
    Var f = model.fl_forward(t, b, x, Mode::eval);
    CHECK(t.value(f).shape() == Shape{1, 512, 7, 7});
    Var logits = model.vit_forward(t, b, f);
    CHECK(t.value(logits).shape() == Shape{1, 2});
    CHECK(t.value(logits).all_finite());
}

TEST_CASE("model gradient spot checks") {
    auto cfg = CViTConfig::gradcheck_scale();
    auto model = CViTModel<double>::init(cfg, 13);
    TensorD x = randu({2, 3, 32, 32}, 14).cast<double>();
    std::vector<int> labels = {0, 1};

    auto loss_with_param = [&](const std::string& pname) {
        return [&, pname](Tape<double>& t, Var v) {
            CViTModel<double> m = model;  // fresh BN stats per evaluation
            auto params = m.named_parameters();
            typename CViTModel<double>::Bound b;
            for (auto& [name, tensor] : params) {
                if (name.rfind("fl.", 0) == 0) ++b.fl_param_count;
                b.params.push_back(name == pname ? v : t.leaf(*tensor, false));
            }
            Var logits = m.forward(t, b, t.leaf(x, false), Mode::train);
            return bce_with_logits(t, logits, labels);
        };
    };

    SUBCASE("class token") {
        CHECK(finite_diff_check(loss_with_param("vit.class_token"), model.class_token) < 1e-4);
    }
    SUBCASE("first conv weight") {
        CHECK(finite_diff_check(loss_with_param("fl.s0.c0.w"), model.stages[0][0].w) < 1e-4);
    }
    SUBCASE("head weight") {
        CHECK(finite_diff_check(loss_with_param("vit.head.w2"), model.head_w2) < 1e-4);
    }
}
