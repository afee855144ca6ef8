#pragma once

#include "cvit/model.hpp"

#include <stdexcept>
#include <string>

namespace cvit {

struct checkpoint_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
    int format_version = kCheckpointVersion;
    CViTConfig config;
    int epoch = -1;
    double val_loss = 0.0;
    bool has_val_loss = false;
};

struct LoadedCheckpoint {
    CViTModel<float> model;
    CheckpointMeta meta;
};

/// Container file: text header (version, config snapshot, tensor index with
/// name/shape/offset/crc32) followed by raw little-endian float32 blobs.
/// Parameters and batchnorm running statistics are both persisted.
void save_checkpoint(CViTModel<float>& model, const std::string& path, int epoch = -1,
                     const double* val_loss = nullptr);

/// Verifies version, per-tensor length and checksum; a corrupted tensor fails
/// with its name. When `expected` is given, a config-snapshot mismatch is
/// refused before any tensor is read.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const CViTConfig* expected = nullptr);

uint32_t crc32(const void* data, size_t len);

}  // namespace cvit
