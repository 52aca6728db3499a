#include "zsad/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace zsad {

void VisionEncoderSpec::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw std::invalid_argument("image_size must be a positive multiple of patch_size");
    if (depth < 1 || width < 1 || heads < 1 || embed_dim < 1 || mlp_ratio < 1)
        throw std::invalid_argument("vision spec fields must be positive");
    if (width % heads != 0)
        throw std::invalid_argument("vision width must be divisible by heads");
    if (tap_layers.size() != 4)
        throw std::invalid_argument("exactly 4 tap layers are required");
    for (size_t i = 0; i < tap_layers.size(); ++i) {
        if (tap_layers[i] < 1 || tap_layers[i] > depth)
            throw std::invalid_argument("tap layer out of range");
        if (i > 0 && tap_layers[i] <= tap_layers[i - 1])
            throw std::invalid_argument("tap layers must be strictly increasing");
    }
}

void TextEncoderSpec::validate() const {
    if (vocab_size < 5) throw std::invalid_argument("text vocab too small");
    if (context_length < 3 || depth < 1 || width < 1 || heads < 1 || embed_dim < 1)
        throw std::invalid_argument("text spec fields must be positive");
    if (width % heads != 0)
        throw std::invalid_argument("text width must be divisible by heads");
}

std::string to_string(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::stage1: return "stage1";
        case Stage::stage2: return "stage2";
    }
    return "pretrain";
}

Stage stage_from_string(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "stage1") return Stage::stage1;
    if (s == "stage2") return Stage::stage2;
    throw std::invalid_argument("unknown stage: " + s);
}

namespace {
void fill_normal(Param& p, double stddev, uint64_t seed) {
    Rng rng(mix_seed(seed, p.name));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c)
            p.value(r, c) = rng.normal(0.0, stddev);
}
}  // namespace

DualEncoder::DualEncoder(VisionEncoderSpec vspec, TextEncoderSpec tspec,
                         Tokenizer tokenizer, uint64_t init_seed)
    : vspec_(vspec), tspec_(tspec), tokenizer_(std::move(tokenizer)) {
    vspec_.validate();
    tspec_.validate();
    if (vspec_.embed_dim != tspec_.embed_dim)
        throw std::invalid_argument("vision and text embed_dim must agree");
    if (tspec_.vocab_size != tokenizer_.vocab_size())
        throw std::invalid_argument("text spec vocab_size must match the tokenizer");

    // vision tower
    fill_normal(store_.create("vision.patch_embed.w", vspec_.width, vspec_.patch_dim()),
                1.0 / std::sqrt(double(vspec_.patch_dim())), init_seed);
    store_.create("vision.patch_embed.b", 1, vspec_.width);
    fill_normal(store_.create("vision.cls_token", 1, vspec_.width), 0.02, init_seed);
    fill_normal(store_.create("vision.pos_embed", vspec_.tokens(), vspec_.width), 0.01,
                init_seed);
    init_tower("vision", vspec_.depth, vspec_.width, vspec_.mlp_ratio, init_seed);
    store_.create("vision.ln_final.g", 1, vspec_.width).value.setOnes();
    store_.create("vision.ln_final.b", 1, vspec_.width);
    fill_normal(store_.create("vision.proj", vspec_.embed_dim, vspec_.width),
                1.0 / std::sqrt(double(vspec_.width)), init_seed);

    // text tower
    fill_normal(store_.create("text.token_embed", tspec_.vocab_size, tspec_.width), 0.02,
                init_seed);
    fill_normal(store_.create("text.pos_embed", tspec_.context_length, tspec_.width),
                0.01, init_seed);
    init_tower("text", tspec_.depth, tspec_.width, tspec_.mlp_ratio, init_seed);
    store_.create("text.ln_final.g", 1, tspec_.width).value.setOnes();
    store_.create("text.ln_final.b", 1, tspec_.width);
    fill_normal(store_.create("text.proj", tspec_.embed_dim, tspec_.width),
                1.0 / std::sqrt(double(tspec_.width)), init_seed);
}

void DualEncoder::init_tower(const std::string& prefix, int depth, int width,
                             int mlp_ratio, uint64_t seed) {
    int hidden = width * mlp_ratio;
    double wstd = 1.0 / std::sqrt(double(width));
    double hstd = 1.0 / std::sqrt(double(hidden));
    for (int i = 0; i < depth; ++i) {
        std::string b = prefix + ".blocks." + std::to_string(i) + ".";
        store_.create(b + "ln1.g", 1, width).value.setOnes();
        store_.create(b + "ln1.b", 1, width);
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            fill_normal(store_.create(b + w, width, width), wstd, seed);
        for (const char* bias : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            store_.create(b + bias, 1, width);
        store_.create(b + "ln2.g", 1, width).value.setOnes();
        store_.create(b + "ln2.b", 1, width);
        fill_normal(store_.create(b + "mlp.w1", hidden, width), wstd, seed);
        store_.create(b + "mlp.b1", 1, hidden);
        fill_normal(store_.create(b + "mlp.w2", width, hidden), hstd, seed);
        store_.create(b + "mlp.b2", 1, width);
    }
}

Mat DualEncoder::causal_mask(int n) const {
    Mat m = Mat::Zero(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = r + 1; c < n; ++c) m(r, c) = -1e30;
    return m;
}

ag::Ref DualEncoder::transformer_block(ag::Graph& g, ag::Ref x, const std::string& prefix,
                                       int heads, const Mat* attn_mask) {
    using namespace ag;
    int width = int(x.value().cols());
    int dh = width / heads;
    auto P = [&](const std::string& n) -> Ref { return g.param(store_.at(prefix + n)); };

    Ref h = layernorm_rows(x);
    h = mul_rowvec(h, P("ln1.g"));
    h = add_rowvec(h, P("ln1.b"));
    Ref q = add_rowvec(matmul_nt(h, P("attn.wq")), P("attn.bq"));
    Ref k = add_rowvec(matmul_nt(h, P("attn.wk")), P("attn.bk"));
    Ref v = add_rowvec(matmul_nt(h, P("attn.wv")), P("attn.bv"));
    std::vector<Ref> head_outs;
    head_outs.reserve(size_t(heads));
    ag::Ref mask_ref;
    if (attn_mask != nullptr) mask_ref = g.constant(*attn_mask);
    for (int hd = 0; hd < heads; ++hd) {
        Ref qh = slice_cols(q, hd * dh, dh);
        Ref kh = slice_cols(k, hd * dh, dh);
        Ref vh = slice_cols(v, hd * dh, dh);
        Ref scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
        if (mask_ref) scores = add(scores, mask_ref);
        head_outs.push_back(matmul(softmax_rows(scores), vh));
    }
    Ref attn = concat_cols(head_outs);
    attn = add_rowvec(matmul_nt(attn, P("attn.wo")), P("attn.bo"));
    x = add(x, attn);

    Ref m = layernorm_rows(x);
    m = mul_rowvec(m, P("ln2.g"));
    m = add_rowvec(m, P("ln2.b"));
    m = add_rowvec(matmul_nt(m, P("mlp.w1")), P("mlp.b1"));
    m = gelu(m);
    m = add_rowvec(matmul_nt(m, P("mlp.w2")), P("mlp.b2"));
    return add(x, m);
}

DualEncoder::VisionOut DualEncoder::encode_image(ag::Graph& g, const Image& img) {
    using namespace ag;
    if (img.h != vspec_.image_size || img.w != vspec_.image_size || img.c != 3)
        throw std::invalid_argument("encode_image: image shape mismatch (want " +
                                    std::to_string(vspec_.image_size) + "x" +
                                    std::to_string(vspec_.image_size) + "x3)");
    int gside = vspec_.grid(), ps = vspec_.patch_size;
    Mat patches(vspec_.patches(), vspec_.patch_dim());
    for (int py = 0; py < gside; ++py)
        for (int px = 0; px < gside; ++px) {
            Eigen::Index row = py * gside + px;
            int col = 0;
            for (int y = 0; y < ps; ++y)
                for (int x = 0; x < ps; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        // map [0,1] input to [-1,1] before embedding
                        patches(row, col++) =
                            (img.at(py * ps + y, px * ps + x, ch) - 0.5) / 0.5;
        }

    Ref x = matmul_nt(g.constant(std::move(patches)), g.param(store_.at("vision.patch_embed.w")));
    x = add_rowvec(x, g.param(store_.at("vision.patch_embed.b")));
    x = concat_rows({g.param(store_.at("vision.cls_token")), x});
    x = add(x, g.param(store_.at("vision.pos_embed")));

    std::vector<ag::Ref> taps(4);
    std::vector<int> patch_rows(size_t(vspec_.patches()));
    for (int i = 0; i < vspec_.patches(); ++i) patch_rows[size_t(i)] = i + 1;

    for (int layer = 1; layer <= vspec_.depth; ++layer) {
        x = transformer_block(g, x, "vision.blocks." + std::to_string(layer - 1) + ".",
                              vspec_.heads, nullptr);
        if (vision_adapters_ && layer <= vision_adapters_->cfg.count) {
            Ref res = adapter_forward(g, x, store_, *vision_adapters_, layer);
            x = fuse(x, res, vision_adapters_->cfg.lambda);
        }
        for (size_t t = 0; t < vspec_.tap_layers.size(); ++t)
            if (vspec_.tap_layers[t] == layer)
                taps[t] = select_rows(x, patch_rows);
    }

    Ref ln = layernorm_rows(x);
    ln = mul_rowvec(ln, g.param(store_.at("vision.ln_final.g")));
    ln = add_rowvec(ln, g.param(store_.at("vision.ln_final.b")));
    Ref cls = select_rows(ln, {0});
    Ref v_image = l2normalize_rows(matmul_nt(cls, g.param(store_.at("vision.proj"))));
    Ref patch_proj = l2normalize_rows(
        matmul_nt(select_rows(ln, patch_rows), g.param(store_.at("vision.proj"))));
    return {v_image, std::move(taps), patch_proj};
}

ag::Ref DualEncoder::encode_text(ag::Graph& g, const std::vector<int>& token_ids) {
    using namespace ag;
    if (int(token_ids.size()) != tspec_.context_length)
        throw std::invalid_argument("encode_text: token sequence length mismatch");
    int eos_pos = -1;
    for (size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] < 0 || token_ids[i] >= tspec_.vocab_size)
            throw std::invalid_argument("encode_text: token id out of range");
        if (token_ids[i] == Tokenizer::kEos && eos_pos < 0) eos_pos = int(i);
    }
    if (eos_pos < 0) throw std::invalid_argument("encode_text: sequence has no EOS");

    Ref x = select_rows(g.param(store_.at("text.token_embed")), token_ids);
    x = add(x, g.param(store_.at("text.pos_embed")));
    Mat mask = causal_mask(tspec_.context_length);
    for (int layer = 1; layer <= tspec_.depth; ++layer) {
        x = transformer_block(g, x, "text.blocks." + std::to_string(layer - 1) + ".",
                              tspec_.heads, &mask);
        if (text_adapters_ && layer <= text_adapters_->cfg.count) {
            Ref res = adapter_forward(g, x, store_, *text_adapters_, layer);
            x = fuse(x, res, text_adapters_->cfg.lambda);
        }
    }
    Ref ln = layernorm_rows(x);
    ln = mul_rowvec(ln, g.param(store_.at("text.ln_final.g")));
    ln = add_rowvec(ln, g.param(store_.at("text.ln_final.b")));
    Ref eos = select_rows(ln, {eos_pos});
    return l2normalize_rows(matmul_nt(eos, g.param(store_.at("text.proj"))));
}

ag::Ref DualEncoder::encode_text(ag::Graph& g, const std::string& text) {
    return encode_text(g, tokenizer_.tokenize(text, tspec_.context_length));
}

Eigen::RowVectorXd DualEncoder::text_embedding(const std::string& text) {
    ag::Graph g(false);
    return encode_text(g, text).value().row(0);
}

Eigen::RowVectorXd DualEncoder::image_embedding(const Image& img) {
    ag::Graph g(false);
    return encode_image(g, img).v_image.value().row(0);
}

void DualEncoder::attach_text_adapters(const AdapterConfig& cfg, uint64_t seed) {
    if (text_adapters_) throw std::logic_error("text adapters already attached");
    text_adapters_ =
        attach_adapters(store_, "adapter.text", cfg, tspec_.width, tspec_.depth, seed);
}

void DualEncoder::attach_vision_adapters(const AdapterConfig& cfg, uint64_t seed) {
    if (vision_adapters_) throw std::logic_error("vision adapters already attached");
    vision_adapters_ =
        attach_adapters(store_, "adapter.vision", cfg, vspec_.width, vspec_.depth, seed);
}

const AdapterStack& DualEncoder::text_adapters() const {
    if (!text_adapters_) throw std::logic_error("text adapters not attached");
    return *text_adapters_;
}

const AdapterStack& DualEncoder::vision_adapters() const {
    if (!vision_adapters_) throw std::logic_error("vision adapters not attached");
    return *vision_adapters_;
}

void DualEncoder::create_granularity_projectors(uint64_t seed) {
    if (has_granularity_projectors())
        throw std::logic_error("granularity projectors already exist");
    double bound = 1.0 / std::sqrt(double(vspec_.width));
    for (int i = 1; i <= 4; ++i) {
        Param& p = store_.create(projector_name(i), vspec_.embed_dim, vspec_.width);
        Rng rng(mix_seed(seed, p.name));
        for (Eigen::Index r = 0; r < p.value.rows(); ++r)
            for (Eigen::Index c = 0; c < p.value.cols(); ++c)
                p.value(r, c) = rng.uniform(-bound, bound);
    }
}

bool DualEncoder::has_granularity_projectors() const {
    return store_.contains(projector_name(1));
}

void DualEncoder::store_anchors(const std::string& class_id,
                                const Eigen::RowVectorXd& t_n,
                                const Eigen::RowVectorXd& t_a) {
    if (t_n.size() != vspec_.embed_dim || t_a.size() != vspec_.embed_dim)
        throw std::invalid_argument("anchor dimension mismatch");
    std::string base = "anchors." + class_id;
    if (store_.contains(base + ".n")) {
        store_.at(base + ".n").value = t_n;
        store_.at(base + ".a").value = t_a;
    } else {
        store_.create(base + ".n", 1, vspec_.embed_dim).value = t_n;
        store_.create(base + ".a", 1, vspec_.embed_dim).value = t_a;
    }
}

bool DualEncoder::has_anchors() const {
    return !store_.names_with_prefix("anchors.").empty();
}

std::vector<std::string> DualEncoder::anchor_classes() const {
    std::vector<std::string> out;
    for (const auto& n : store_.names_with_prefix("anchors.")) {
        if (n.size() > 2 && n.substr(n.size() - 2) == ".n")
            out.push_back(n.substr(8, n.size() - 10));
    }
    return out;
}

std::pair<Eigen::RowVectorXd, Eigen::RowVectorXd> DualEncoder::anchors_of(
    const std::string& class_id) const {
    std::string base = "anchors." + class_id;
    if (!store_.contains(base + ".n"))
        throw std::out_of_range("no stored anchors for class " + class_id);
    return {store_.at(base + ".n").value.row(0), store_.at(base + ".a").value.row(0)};
}

ParameterPartition DualEncoder::partition_parameters(Stage stage) const {
    ParameterPartition part;
    auto all = store_.names();
    auto is_backbone = [](const std::string& n) {
        return n.rfind("vision.", 0) == 0 || n.rfind("text.", 0) == 0;
    };
    switch (stage) {
        case Stage::pretrain: {
            if (text_adapters_ || vision_adapters_)
                throw std::logic_error("pretrain partition requires no adapters attached");
            for (const auto& n : all)
                (is_backbone(n) ? part.trainable : part.frozen).insert(n);
            break;
        }
        case Stage::stage1: {
            if (!text_adapters_)
                throw std::logic_error("stage1 partition requires text adapters attached");
            for (const auto& n : all) {
                if (n.rfind("adapter.text.", 0) == 0 || n == "text.proj")
                    part.trainable.insert(n);
                else
                    part.frozen.insert(n);
            }
            break;
        }
        case Stage::stage2: {
            if (!vision_adapters_)
                throw std::logic_error("stage2 partition requires vision adapters attached");
            if (!has_granularity_projectors())
                throw std::logic_error("stage2 partition requires granularity projectors");
            for (const auto& n : all) {
                if (n.rfind("adapter.vision.", 0) == 0 || n.rfind("head.proj.", 0) == 0)
                    part.trainable.insert(n);
                else
                    part.frozen.insert(n);
            }
            break;
        }
    }
    part.validate_against(store_);
    return part;
}

void DualEncoder::apply_partition(Stage stage) {
    store_.set_trainable(partition_parameters(stage).trainable);
}

}  // namespace zsad
