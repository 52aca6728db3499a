#include "zsad/pretrain.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace zsad {

void PretrainConfig::validate() const {
    if (epochs < 1 || batch_size < 2) throw std::invalid_argument("bad pretrain config");
    if (!(lr > 0.0) || !(temperature > 0.0))
        throw std::invalid_argument("bad pretrain config");
    if (retrieval_pool < 2) throw std::invalid_argument("retrieval pool too small");
}

ag::Ref contrastive_loss_ref(ag::Graph& g, ag::Ref image_embeds, ag::Ref text_embeds,
                             double temperature) {
    Eigen::Index b = image_embeds.value().rows();
    if (b < 2) throw std::invalid_argument("contrastive loss needs a batch of >= 2");
    if (text_embeds.value().rows() != b ||
        text_embeds.value().cols() != image_embeds.value().cols())
        throw std::invalid_argument("contrastive loss: embedding shape mismatch");

    ag::Ref eye = g.constant(Mat::Identity(b, b));
    auto ce_diag = [&](ag::Ref lg) {
        ag::Ref p = ag::clamp(ag::softmax_rows(lg), 1e-12, 1.0);
        ag::Ref picked = ag::hadamard(ag::log_(p), eye);
        return ag::scale(ag::sum_all(picked), -1.0 / double(b));
    };
    // rows: image -> text retrieval; transposed rows: text -> image
    ag::Ref logits_i = ag::scale(ag::matmul_nt(image_embeds, text_embeds), 1.0 / temperature);
    ag::Ref logits_t = ag::scale(ag::matmul_nt(text_embeds, image_embeds), 1.0 / temperature);
    return ag::scale(ag::add(ce_diag(logits_i), ce_diag(logits_t)), 0.5);
}

double contrastive_loss(const Mat& image_embeds, const Mat& text_embeds,
                        double temperature) {
    ag::Graph g(false);
    return contrastive_loss_ref(g, g.constant(image_embeds), g.constant(text_embeds),
                                temperature)
        .value()(0, 0);
}

namespace {

struct EmbeddingPass {
    Mat images;  // B x d
    Mat texts;   // B x d
};

// no-grad forward over one batch
EmbeddingPass forward_batch(DualEncoder& model, const std::vector<CaptionedSample>& corpus,
                            const std::vector<size_t>& batch) {
    int d = model.vision_spec().embed_dim;
    EmbeddingPass out;
    out.images.resize(Eigen::Index(batch.size()), d);
    out.texts.resize(Eigen::Index(batch.size()), d);
    for (size_t i = 0; i < batch.size(); ++i) {
        ag::Graph g(false);
        out.images.row(Eigen::Index(i)) =
            model.encode_image(g, corpus[batch[i]].sample.image).v_image.value().row(0);
        out.texts.row(Eigen::Index(i)) =
            model.encode_text(g, corpus[batch[i]].caption).value().row(0);
    }
    return out;
}

}  // namespace

double retrieval_top1(DualEncoder& model, const std::vector<CaptionedSample>& held_out,
                      int pool_size, uint64_t seed) {
    if (held_out.size() < size_t(pool_size))
        throw std::invalid_argument("retrieval: held-out set smaller than the pool");

    // embed each distinct caption once
    std::map<std::string, Eigen::RowVectorXd> caption_embeds;
    std::vector<std::string> distinct;
    for (const auto& cs : held_out)
        if (caption_embeds.emplace(cs.caption, Eigen::RowVectorXd()).second)
            distinct.push_back(cs.caption);
    if (distinct.size() < size_t(pool_size))
        throw std::invalid_argument("retrieval: fewer distinct captions than the pool");
    for (auto& [caption, e] : caption_embeds) e = model.text_embedding(caption);

    Rng rng(mix_seed(seed, "retrieval"));
    size_t hits = 0;
    for (const auto& cs : held_out) {
        Eigen::RowVectorXd img = model.image_embedding(cs.sample.image);
        // pool: the true caption plus distinct distractor strings
        std::set<std::string> pool{cs.caption};
        while (int(pool.size()) < pool_size)
            pool.insert(distinct[size_t(rng.index(distinct.size()))]);
        double best = -2.0;
        std::string best_caption;
        for (const auto& c : pool) {  // set order: deterministic lexicographic
            double s = img.dot(caption_embeds.at(c));
            if (s > best) {
                best = s;
                best_caption = c;
            }
        }
        if (best_caption == cs.caption) ++hits;
    }
    return double(hits) / double(held_out.size());
}

PretrainReport pretrain(DualEncoder& model, const std::vector<CaptionedSample>& corpus,
                        const std::vector<CaptionedSample>& held_out,
                        const ClassRegistry& registry, const PromptBank& anchor_bank,
                        const PretrainConfig& cfg, const std::string& log_path) {
    cfg.validate();
    if (corpus.size() < size_t(cfg.batch_size))
        throw std::invalid_argument("pretrain: corpus smaller than one batch");
    model.apply_partition(Stage::pretrain);

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    Adam opt(model.store(), ac);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw std::runtime_error("cannot write training log: " + log_path);
    }

    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    int steps_per_epoch = int(corpus.size()) / cfg.batch_size;
    int total_steps = std::max(1, cfg.epochs * steps_per_epoch);

    PretrainReport report;
    double loss_value = 0.0;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "pretrain.epoch", uint64_t(epoch)));
        shuffle_rng.shuffle(order);
        for (int bstart = 0; bstart + cfg.batch_size <= int(order.size());
             bstart += cfg.batch_size) {
            std::vector<size_t> batch(order.begin() + bstart,
                                      order.begin() + bstart + cfg.batch_size);

            // pass 1: embeddings without tape, then the coupling loss
            EmbeddingPass emb = forward_batch(model, corpus, batch);
            ag::Graph lg(true);
            ag::Ref e_img = lg.input(emb.images);
            ag::Ref e_txt = lg.input(emb.texts);
            ag::Ref loss = contrastive_loss_ref(lg, e_img, e_txt, cfg.temperature);
            loss_value = loss.value()(0, 0);
            if (!std::isfinite(loss_value))
                throw std::runtime_error("pretrain diverged: non-finite loss at step " +
                                         std::to_string(step));
            lg.backward(loss);
            Mat g_img = lg.grad_of(e_img);
            Mat g_txt = lg.grad_of(e_txt);

            // pass 2: re-run each sample with tape and seed the embedding grads
            model.store().zero_grads();
            for (size_t i = 0; i < batch.size(); ++i) {
                ag::Graph g(true);
                ag::Ref vi = model.encode_image(g, corpus[batch[i]].sample.image).v_image;
                ag::Ref ti = model.encode_text(g, corpus[batch[i]].caption);
                g.backward_seed(vi, g_img.row(Eigen::Index(i)));
                g.backward_seed(ti, g_txt.row(Eigen::Index(i)));
                g.collect_param_grads();
            }
            double lr_scale = 1.0;
            if (cfg.cosine_lr)
                lr_scale = 0.5 * (1.0 + std::cos(M_PI * double(step) / double(total_steps)));
            opt.step(lr_scale);
            if (log.is_open()) {
                nlohmann::json j{{"step", step}, {"loss", loss_value},
                                 {"lr_scale", lr_scale}, {"epoch", epoch}};
                log << j.dump() << "\n";
            }
            ++step;
        }
    }

    report.steps = step;
    report.final_loss = loss_value;
    report.retrieval_top1 = retrieval_top1(model, held_out, cfg.retrieval_pool,
                                           mix_seed(cfg.seed, "pool"));
    double sum = 0.0;
    for (const auto& [cid, desc] : registry.entries) {
        TextAnchors a = compute_anchors(cid, registry, anchor_bank, model);
        double ent = std::abs(a.t_n.dot(a.t_a));
        report.anchor_entanglement[cid] = ent;
        sum += ent;
    }
    report.mean_entanglement = sum / double(registry.entries.size());
    return report;
}

void write_pretrain_report(const PretrainReport& report, const std::string& path) {
    nlohmann::json j;
    j["steps"] = report.steps;
    j["final_loss"] = report.final_loss;
    j["retrieval_top1"] = report.retrieval_top1;
    j["mean_entanglement"] = report.mean_entanglement;
    for (const auto& [cid, v] : report.anchor_entanglement)
        j["anchor_entanglement"][cid] = v;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write pretrain report: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace zsad
