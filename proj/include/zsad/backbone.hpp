#pragma once

#include "zsad/adapters.hpp"
#include "zsad/graph.hpp"
#include "zsad/image.hpp"
#include "zsad/params.hpp"
#include "zsad/tokenizer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace zsad {

struct VisionEncoderSpec {
    int image_size = 64;
    int patch_size = 8;
    int depth = 8;
    int width = 128;
    int heads = 4;
    int embed_dim = 128;
    int mlp_ratio = 2;
    std::vector<int> tap_layers{2, 4, 6, 8};

    int grid() const { return image_size / patch_size; }
    int patches() const { return grid() * grid(); }       // N
    int tokens() const { return patches() + 1; }          // + class token
    int patch_dim() const { return patch_size * patch_size * 3; }
    void validate() const;
};

struct TextEncoderSpec {
    int vocab_size = 0;  // fixed when the tokenizer vocabulary is frozen
    int context_length = 32;
    int depth = 4;
    int width = 128;
    int heads = 4;
    int embed_dim = 128;
    int mlp_ratio = 2;

    void validate() const;
};

enum class Stage { pretrain, stage1, stage2 };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

// Miniature CLIP-style dual encoder. Both towers are pre-LN transformers;
// the text tower is causal and reads the EOS position, the vision tower
// carries a class token and exposes four intermediate tap layers.
class DualEncoder {
public:
    DualEncoder(VisionEncoderSpec vspec, TextEncoderSpec tspec, Tokenizer tokenizer,
                uint64_t init_seed);

    struct VisionOut {
        ag::Ref v_image;              // 1 x d, unit norm
        std::vector<ag::Ref> taps;    // 4 tensors, N x width, tap-layer order
        ag::Ref patch_projected;      // N x d, unit rows (backbone head on patches)
    };

    VisionOut encode_image(ag::Graph& g, const Image& img);
    ag::Ref encode_text(ag::Graph& g, const std::vector<int>& token_ids);
    ag::Ref encode_text(ag::Graph& g, const std::string& text);

    // Convenience no-grad helpers returning plain values.
    Eigen::RowVectorXd text_embedding(const std::string& text);
    Eigen::RowVectorXd image_embedding(const Image& img);

    void attach_text_adapters(const AdapterConfig& cfg, uint64_t seed);
    void attach_vision_adapters(const AdapterConfig& cfg, uint64_t seed);
    bool text_adapted() const { return text_adapters_.has_value(); }
    bool vision_adapted() const { return vision_adapters_.has_value(); }
    const AdapterStack& text_adapters() const;
    const AdapterStack& vision_adapters() const;

    // Four trainable granularity projectors (width -> d), one per tap layer.
    void create_granularity_projectors(uint64_t seed);
    bool has_granularity_projectors() const;
    static std::string projector_name(int i) { return "head.proj." + std::to_string(i) + ".w"; }

    // Frozen per-class text anchors, stored after the first adaptation stage.
    void store_anchors(const std::string& class_id, const Eigen::RowVectorXd& t_n,
                       const Eigen::RowVectorXd& t_a);
    bool has_anchors() const;
    std::vector<std::string> anchor_classes() const;
    std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> anchors_of(const std::string& class_id) const;

    ParameterPartition partition_parameters(Stage stage) const;
    void apply_partition(Stage stage);  // sets trainable flags accordingly

    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const VisionEncoderSpec& vision_spec() const { return vspec_; }
    const TextEncoderSpec& text_spec() const { return tspec_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }

private:
    ag::Ref transformer_block(ag::Graph& g, ag::Ref x, const std::string& prefix,
                              int heads, const Mat* attn_mask);
    void init_tower(const std::string& prefix, int depth, int width, int mlp_ratio,
                    uint64_t seed);
    Mat causal_mask(int n) const;

    VisionEncoderSpec vspec_;
    TextEncoderSpec tspec_;
    Tokenizer tokenizer_;
    ParamStore store_;
    std::optional<AdapterStack> text_adapters_;
    std::optional<AdapterStack> vision_adapters_;
};

}  // namespace zsad
