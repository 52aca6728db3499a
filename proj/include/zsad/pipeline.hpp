#pragma once

#include "zsad/checkpoint.hpp"
#include "zsad/config.hpp"
#include "zsad/pretrain.hpp"
#include "zsad/training.hpp"

#include <memory>
#include <string>
#include <vector>

namespace zsad::pipeline {

// config-to-struct builders -------------------------------------------------

VisionEncoderSpec vision_spec_from(const Config& cfg);
TextEncoderSpec text_spec_from(const Config& cfg);  // vocab_size left at 0
AdapterConfig text_adapter_config_from(const Config& cfg, int text_depth);
AdapterConfig vision_adapter_config_from(const Config& cfg, int vision_depth);
DefectSpec defect_spec_from(const Config& cfg);
SplitSpec split_spec_from(const Config& cfg);
PretrainConfig pretrain_config_from(const Config& cfg, uint64_t run_seed);
StageConfig stage_config_from(const Config& cfg, int stage, uint64_t run_seed);
SimilarityConfig similarity_config_from(const Config& cfg);
uint64_t run_seed_from(const Config& cfg);

struct Inputs {
    std::vector<ClassSpec> specs;        // builtin shapes, descriptions from the registry
    ClassRegistry registry;
    PromptBank bank;           // adaptation ensemble
    PromptBank pretrain_bank;  // corpus ensemble (superset vocabulary)
};
Inputs load_inputs(const Config& cfg, const std::string& config_dir);

// builds the tokenizer vocabulary from the corpus captions plus every prompt
// either bank can produce over the registry
Tokenizer build_vocabulary(const Inputs& inputs,
                           const std::vector<CaptionedSample>& corpus);

// run directory help ---------------------------------------------------------

// exclusive lock on <dir>/.lock for the lifetime of the object
class RunLock {
public:
    explicit RunLock(const std::string& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

void write_run_metadata(const std::string& out_dir, const std::string& command,
                        const Config& cfg, uint64_t seed, double wall_seconds);

// command bodies (shared between the CLI and tests) --------------------------

void cmd_gen_data(const Config& cfg, const std::string& config_dir,
                  const std::string& out_dir);
void cmd_pretrain(const Config& cfg, const std::string& config_dir,
                  const std::string& out_dir);
void cmd_adapt(const Config& cfg, const std::string& config_dir,
               const std::string& out_dir, int stage, const std::string& checkpoint_path);
void cmd_eval(const Config& cfg, const std::string& config_dir, const std::string& out_dir,
              const std::string& checkpoint_path, const std::string& split);
void cmd_infer(const Config& cfg, const std::string& config_dir, const std::string& out_dir,
               const std::string& checkpoint_path, const std::string& image_path,
               const std::string& class_id);
void cmd_export_diagnostics(const Config& cfg, const std::string& config_dir,
                            const std::string& out_dir,
                            const std::string& checkpoint_path);

}  // namespace zsad::pipeline
