#pragma once

#include "zsad/backbone.hpp"
#include "zsad/prompts.hpp"
#include "zsad/synthdata.hpp"

#include <map>
#include <string>
#include <vector>

namespace zsad {

struct PretrainConfig {
    int epochs = 30;
    int batch_size = 64;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double temperature = 0.07;
    bool cosine_lr = true;
    int retrieval_pool = 32;
    uint64_t seed = 0;

    void validate() const;
};

struct PretrainReport {
    int steps = 0;
    double final_loss = 0.0;
    double retrieval_top1 = 0.0;
    // baseline |<T_N, T_A>| per class on the frozen pretrained encoder,
    // measured with the adaptation prompt bank
    std::map<std::string, double> anchor_entanglement;
    double mean_entanglement = 0.0;
};

// Symmetric InfoNCE over the batch similarity matrix. Both embedding blocks
// are B x d with unit rows; batches below 2 are rejected.
ag::Ref contrastive_loss_ref(ag::Graph& g, ag::Ref image_embeds, ag::Ref text_embeds,
                             double temperature);
double contrastive_loss(const Mat& image_embeds, const Mat& text_embeds,
                        double temperature);

// Contrastive pretraining over the caption corpus. Aborts on non-finite loss.
// The report's entanglement baseline is computed with `anchor_bank` (the
// adaptation ensemble), not the corpus bank.
PretrainReport pretrain(DualEncoder& model, const std::vector<CaptionedSample>& corpus,
                        const std::vector<CaptionedSample>& held_out,
                        const ClassRegistry& registry, const PromptBank& anchor_bank,
                        const PretrainConfig& cfg, const std::string& log_path = "");

// Fraction of held-out pairs whose true caption ranks first against
// `pool_size - 1` distinct distractor captions drawn from the held-out set.
double retrieval_top1(DualEncoder& model, const std::vector<CaptionedSample>& held_out,
                      int pool_size, uint64_t seed);

void write_pretrain_report(const PretrainReport& report, const std::string& path);

}  // namespace zsad
