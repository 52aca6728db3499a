#pragma once

#include "zsad/backbone.hpp"

#include <map>
#include <memory>
#include <string>

namespace zsad {

// Single-file binary archive: versioned header, string metadata, tokenizer
// vocabulary, named double tensors, CRC-protected payload. Round-trips are
// bit-exact; truncated or corrupted files fail to load.
namespace checkpoint {

constexpr uint32_t kFormatVersion = 1;

struct Archive {
    uint32_t version = kFormatVersion;
    std::map<std::string, std::string> meta;
    std::vector<std::string> vocab;
    std::map<std::string, Mat> tensors;
};

void write_archive(const std::string& path, const Archive& archive);
Archive read_archive(const std::string& path);

// Serialises the full model (specs, vocabulary, every parameter, adapter and
// anchor state) under the given stage tag.
void save_model(const std::string& path, const DualEncoder& model, Stage stage);
std::unique_ptr<DualEncoder> load_model(const std::string& path, Stage* stage_out = nullptr);
Stage peek_stage(const std::string& path);

// Adapter-only export: adapter weights, lambda, K and the stage tag. Enough
// to rebuild an adapted model from a backbone checkpoint plus this file.
void save_adapter_export(const std::string& path, const DualEncoder& model, Stage stage);
void apply_adapter_export(const std::string& path, DualEncoder& model);

}  // namespace checkpoint
}  // namespace zsad
