#include <doctest.h>

#include "cvit/checkpoint.hpp"
#include "testutil.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace cvit;
using namespace cvit::testutil;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// First byte of the tensor blob region (just past the "data <n>" line).
size_t blob_start(const std::string& bytes) {
    const size_t tag = bytes.find("\ndata ");
    REQUIRE(tag != std::string::npos);
    const size_t nl = bytes.find('\n', tag + 1);
    REQUIRE(nl != std::string::npos);
    return nl + 1;
}

TensorF probe_logits(CViTModel<float>& model) {
    const auto& cfg = model.config;
    std::mt19937 rng(42);
    TensorF img = stripe_image(cfg.fl.input_size, kLabelFake, 3.5, 0.2, rng);
    return model.logits(
        normalize(img).reshaped({1, 3, cfg.fl.input_size, cfg.fl.input_size}));
}

}  // namespace

TEST_CASE("checkpoint round trip") {
    TempDir dir("ckpt");
    const std::string path = (fs::path(dir.str()) / "m.ckpt").string();
    auto model = CViTModel<float>::init(CViTConfig::reduced_scale(), 17);
    // make running stats nontrivial so buffers are exercised too
    for (auto& [name, t] : model.named_buffers()) t->array() += 0.25f;
    const double val_loss = 0.1234;
    save_checkpoint(model, path, /*epoch=*/7, &val_loss);

    LoadedCheckpoint loaded = load_checkpoint(path);

    SUBCASE("metadata survives") {
        CHECK(loaded.meta.format_version == kCheckpointVersion);
        CHECK(loaded.meta.epoch == 7);
        CHECK(loaded.meta.has_val_loss);
        CHECK(loaded.meta.val_loss == doctest::Approx(0.1234));
        CHECK(loaded.model.config.vit.embed_dim == model.config.vit.embed_dim);
        CHECK(loaded.model.config.fl.input_size == model.config.fl.input_size);
    }
    SUBCASE("every parameter and buffer is bitwise identical") {
        auto a = model.named_parameters();
        auto b = loaded.model.named_parameters();
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].first == b[i].first);
            REQUIRE(a[i].second->shape() == b[i].second->shape());
            CHECK((a[i].second->array() == b[i].second->array()).all());
        }
        auto ab = model.named_buffers();
        auto bb = loaded.model.named_buffers();
        REQUIRE(ab.size() == bb.size());
        for (size_t i = 0; i < ab.size(); ++i)
            CHECK((ab[i].second->array() == bb[i].second->array()).all());
    }
    SUBCASE("probe inference matches bitwise") {
        TensorF la = probe_logits(model);
        TensorF lb = probe_logits(loaded.model);
        CHECK((la.array() == lb.array()).all());
    }
    SUBCASE("matching expected config is accepted, mismatch refused") {
        auto reduced = CViTConfig::reduced_scale();
        CHECK_NOTHROW(load_checkpoint(path, &reduced));
        auto full = CViTConfig::full_scale();
        CHECK_THROWS_AS(load_checkpoint(path, &full), checkpoint_error);
    }
}

TEST_CASE("checkpoint integrity") {
    TempDir dir("ckpt_integrity");
    const std::string path = (fs::path(dir.str()) / "m.ckpt").string();
    auto model = CViTModel<float>::init(CViTConfig::reduced_scale(), 5);
    save_checkpoint(model, path);
    const std::string good = read_file(path);
    const size_t data0 = blob_start(good);
    const std::string bad_path = (fs::path(dir.str()) / "bad.ckpt").string();

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint((fs::path(dir.str()) / "nope.ckpt").string()),
                        checkpoint_error);
    }
    SUBCASE("wrong magic") {
        std::string bytes = good;
        bytes.replace(0, 4, "XVIT");
        write_file(bad_path, bytes);
        CHECK_THROWS_AS(load_checkpoint(bad_path), checkpoint_error);
    }
    SUBCASE("unsupported version") {
        std::string bytes = good;
        const size_t nl = bytes.find('\n');
        bytes.replace(0, nl, "CVIT-CHECKPOINT 99");
        write_file(bad_path, bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(bad_path),
                             "unsupported checkpoint format_version 99", checkpoint_error);
    }
    SUBCASE("truncated blob") {
        write_file(bad_path, good.substr(0, good.size() - 100));
        try {
            load_checkpoint(bad_path);
            FAIL("truncated checkpoint was accepted");
        } catch (const checkpoint_error& e) {
            CHECK(std::string(e.what()).find("integrity error") != std::string::npos);
        }
    }
    SUBCASE("single flipped byte names the damaged tensor") {
        std::string bytes = good;
        bytes[data0 + 11] ^= 0x40;  // inside the first tensor's blob
        write_file(bad_path, bytes);
        try {
            load_checkpoint(bad_path);
            FAIL("corrupted checkpoint was accepted");
        } catch (const checkpoint_error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("checksum mismatch") != std::string::npos);
            CHECK(msg.find("fl.s0.c0.w") != std::string::npos);
        }
    }
    SUBCASE("random blob corruption is always detected") {
        std::mt19937_64 rng(99);
        std::uniform_int_distribution<size_t> pos(data0, good.size() - 1);
        std::uniform_int_distribution<int> bit(0, 7);
        for (int trial = 0; trial < 100; ++trial) {
            std::string bytes = good;
            bytes[pos(rng)] ^= static_cast<char>(1 << bit(rng));
            write_file(bad_path, bytes);
            CHECK_THROWS_AS(load_checkpoint(bad_path), checkpoint_error);
        }
    }
}
