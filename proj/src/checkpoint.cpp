#include "cvit/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace cvit {

namespace {

std::string join_list(const std::vector<int64_t>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<int64_t> parse_list(const std::string& s) {
    std::vector<int64_t> out;
    std::istringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
    return out;
}

void write_config(std::ostream& f, const CViTConfig& c) {
    f << "config fl.in_channels " << c.fl.in_channels << "\n";
    f << "config fl.input_size " << c.fl.input_size << "\n";
    f << "config fl.stage_channels " << join_list(c.fl.stage_channels) << "\n";
    f << "config fl.convs_per_stage " << join_list(c.fl.convs_per_stage) << "\n";
    f << "config vit.embed_dim " << c.vit.embed_dim << "\n";
    f << "config vit.heads " << c.vit.heads << "\n";
    f << "config vit.encoder_depth " << c.vit.encoder_depth << "\n";
    f << "config vit.mlp_hidden " << c.vit.mlp_hidden << "\n";
    f << "config vit.head_hidden " << c.vit.head_hidden << "\n";
    f << "config vit.num_classes " << c.vit.num_classes << "\n";
}

void apply_config(CViTConfig& c, const std::string& key, const std::string& value) {
    if (key == "fl.in_channels") c.fl.in_channels = std::stoll(value);
    else if (key == "fl.input_size") c.fl.input_size = std::stoll(value);
    else if (key == "fl.stage_channels") c.fl.stage_channels = parse_list(value);
    else if (key == "fl.convs_per_stage") c.fl.convs_per_stage = parse_list(value);
    else if (key == "vit.embed_dim") c.vit.embed_dim = std::stoll(value);
    else if (key == "vit.heads") c.vit.heads = std::stoll(value);
    else if (key == "vit.encoder_depth") c.vit.encoder_depth = std::stoll(value);
    else if (key == "vit.mlp_hidden") c.vit.mlp_hidden = std::stoll(value);
    else if (key == "vit.head_hidden") c.vit.head_hidden = std::stoll(value);
    else if (key == "vit.num_classes") c.vit.num_classes = std::stoll(value);
    else throw checkpoint_error("unknown config key in checkpoint: " + key);
}

bool config_equal(const CViTConfig& a, const CViTConfig& b) {
    return a.fl.in_channels == b.fl.in_channels && a.fl.input_size == b.fl.input_size &&
           a.fl.stage_channels == b.fl.stage_channels &&
           a.fl.convs_per_stage == b.fl.convs_per_stage &&
           a.vit.embed_dim == b.vit.embed_dim && a.vit.heads == b.vit.heads &&
           a.vit.encoder_depth == b.vit.encoder_depth &&
           a.vit.mlp_hidden == b.vit.mlp_hidden && a.vit.head_hidden == b.vit.head_hidden &&
           a.vit.num_classes == b.vit.num_classes;
}

std::vector<std::pair<std::string, Tensor<float>*>> all_tensors(CViTModel<float>& model) {
    auto out = model.named_parameters();
    for (auto& nb : model.named_buffers()) out.push_back(nb);
    return out;
}

}  // namespace

uint32_t crc32(const void* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

void save_checkpoint(CViTModel<float>& model, const std::string& path, int epoch,
                     const double* val_loss) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw checkpoint_error("cannot write checkpoint: " + path);
    f << "CVIT-CHECKPOINT " << kCheckpointVersion << "\n";
    write_config(f, model.config);
    if (epoch >= 0) f << "epoch " << epoch << "\n";
    if (val_loss) f << "val_loss " << *val_loss << "\n";
    auto tensors = all_tensors(model);
    int64_t offset = 0;
    for (auto& [name, t] : tensors) {
        f << "tensor " << name << " " << t->rank();
        for (size_t d = 0; d < t->rank(); ++d) f << " " << t->dim(d);
        f << " " << offset << " "
          << crc32(t->data(), static_cast<size_t>(t->numel()) * sizeof(float)) << "\n";
        offset += t->numel() * static_cast<int64_t>(sizeof(float));
    }
    f << "data " << offset << "\n";
    for (auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t->data()),
                t->numel() * static_cast<int64_t>(sizeof(float)));
    if (!f) throw checkpoint_error("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, const CViTConfig* expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw checkpoint_error("cannot read checkpoint: " + path);
    std::string line;
    if (!std::getline(f, line)) throw checkpoint_error("empty checkpoint: " + path);
    {
        std::istringstream ss(line);
        std::string magic;
        int version = -1;
        ss >> magic >> version;
        if (magic != "CVIT-CHECKPOINT")
            throw checkpoint_error("not a checkpoint file: " + path);
        if (version != kCheckpointVersion)
            throw checkpoint_error("unsupported checkpoint format_version " +
                                   std::to_string(version));
    }

    CheckpointMeta meta;
    struct Index {
        std::string name;
        Shape shape;
        int64_t offset;
        uint32_t crc;
    };
    std::vector<Index> index;
    int64_t data_bytes = -1;
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "config") {
            std::string key, value;
            ss >> key >> value;
            apply_config(meta.config, key, value);
        } else if (tag == "epoch") {
            ss >> meta.epoch;
        } else if (tag == "val_loss") {
            ss >> meta.val_loss;
            meta.has_val_loss = true;
        } else if (tag == "tensor") {
            Index ix;
            size_t rank = 0;
            ss >> ix.name >> rank;
            for (size_t d = 0; d < rank; ++d) {
                int64_t e = 0;
                ss >> e;
                ix.shape.push_back(e);
            }
            ss >> ix.offset >> ix.crc;
            if (!ss) throw checkpoint_error("malformed tensor index line: " + line);
            index.push_back(std::move(ix));
        } else if (tag == "data") {
            ss >> data_bytes;
            break;
        } else {
            throw checkpoint_error("malformed checkpoint header line: " + line);
        }
    }
    if (data_bytes < 0) throw checkpoint_error("checkpoint missing data section: " + path);
    if (expected && !config_equal(meta.config, *expected))
        throw checkpoint_error(
            "checkpoint config mismatch: stored model shape differs from the expected "
            "configuration (input " +
            std::to_string(meta.config.fl.input_size) + ", embed " +
            std::to_string(meta.config.vit.embed_dim) + " vs expected input " +
            std::to_string(expected->fl.input_size) + ", embed " +
            std::to_string(expected->vit.embed_dim) + ")");

    LoadedCheckpoint out{CViTModel<float>::init(meta.config, 0), meta};
    auto tensors = all_tensors(out.model);
    if (tensors.size() != index.size())
        throw checkpoint_error("checkpoint tensor count mismatch: expected " +
                               std::to_string(tensors.size()) + ", found " +
                               std::to_string(index.size()));
    const std::streampos data_start = f.tellg();
    for (size_t i = 0; i < tensors.size(); ++i) {
        auto& [name, t] = tensors[i];
        const Index& ix = index[i];
        if (ix.name != name)
            throw checkpoint_error("checkpoint tensor order mismatch: expected " + name +
                                   ", found " + ix.name);
        if (ix.shape != t->shape())
            throw checkpoint_error("shape mismatch for tensor " + name + ": stored " +
                                   shape_str(ix.shape) + ", model wants " +
                                   shape_str(t->shape()));
        f.seekg(data_start + static_cast<std::streamoff>(ix.offset));
        const std::streamsize bytes = t->numel() * static_cast<int64_t>(sizeof(float));
        if (!f.read(reinterpret_cast<char*>(t->data()), bytes))
            throw checkpoint_error("integrity error: truncated data for tensor " + name);
        if (crc32(t->data(), static_cast<size_t>(bytes)) != ix.crc)
            throw checkpoint_error("integrity error: checksum mismatch for tensor " + name);
    }
    return out;
}

}  // namespace cvit
