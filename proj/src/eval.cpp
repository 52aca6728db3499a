#include "zsad/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace fs = std::filesystem;

namespace zsad {

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auroc: scores/labels size mismatch");
    size_t n_pos = 0, n_neg = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw std::invalid_argument("auroc: labels must be 0/1");
        (y == 1 ? n_pos : n_neg) += 1;
    }
    if (n_pos == 0 || n_neg == 0)
        throw std::invalid_argument("auroc undefined: needs both classes");
    for (double s : scores)
        if (!std::isfinite(s)) throw std::invalid_argument("auroc: non-finite score");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // midranks: tied scores share the average of their rank span
    double pos_rank_sum = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double midrank = 0.5 * double(i + 1 + j + 1);  // ranks are 1-based
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) pos_rank_sum += midrank;
        i = j + 1;
    }
    double np = double(n_pos), nn = double(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

MetricsRecord evaluate(const InferFn& infer_fn, const std::vector<LabeledSample>& dataset) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");

    struct PerClass {
        std::vector<double> img_scores;
        std::vector<int> img_labels;
        std::vector<double> px_scores;
        std::vector<int> px_labels;
    };
    std::map<std::string, PerClass> by_class;
    std::vector<double> img_scores, px_scores;
    std::vector<int> img_labels, px_labels;

    for (const LabeledSample& s : dataset) {
        AnomalyPrediction pred = infer_fn(s);
        if (pred.h != s.mask.rows() || pred.w != s.mask.cols())
            throw std::invalid_argument("evaluate: prediction/mask resolution mismatch");
        PerClass& pc = by_class[s.class_id];
        img_scores.push_back(pred.anomaly_score());
        img_labels.push_back(s.label);
        pc.img_scores.push_back(pred.anomaly_score());
        pc.img_labels.push_back(s.label);
        for (Eigen::Index y = 0; y < s.mask.rows(); ++y)
            for (Eigen::Index x = 0; x < s.mask.cols(); ++x) {
                double sc = pred.p_seg(y * s.mask.cols() + x, 1);
                int lb = s.mask(y, x) != 0.0 ? 1 : 0;
                px_scores.push_back(sc);
                px_labels.push_back(lb);
                pc.px_scores.push_back(sc);
                pc.px_labels.push_back(lb);
            }
    }

    auto maybe_auroc = [](const std::vector<double>& s,
                          const std::vector<int>& l) -> std::optional<double> {
        bool has_pos = false, has_neg = false;
        for (int y : l) (y == 1 ? has_pos : has_neg) = true;
        if (!has_pos || !has_neg) return std::nullopt;  // undefined, not 0
        return auroc(s, l);
    };

    MetricsRecord out;
    out.image_auroc = maybe_auroc(img_scores, img_labels);
    out.pixel_auroc = maybe_auroc(px_scores, px_labels);
    for (auto& [cid, pc] : by_class) {
        ClassMetrics cm;
        cm.image_auroc = maybe_auroc(pc.img_scores, pc.img_labels);
        cm.pixel_auroc = maybe_auroc(pc.px_scores, pc.px_labels);
        cm.n_images = int(pc.img_labels.size());
        out.per_class[cid] = cm;
    }
    return out;
}

MetricsRecord zero_shot_protocol(DualEncoder& model, const std::vector<LabeledSample>& test_set,
                                 const std::vector<std::string>& train_classes,
                                 const ClassRegistry& registry, const PromptBank& bank,
                                 const SimilarityConfig& cfg, PatchFeatureMode mode) {
    std::set<std::string> train(train_classes.begin(), train_classes.end());
    std::set<std::string> test_classes;
    for (const auto& s : test_set) test_classes.insert(s.class_id);
    for (const auto& c : test_classes)
        if (train.count(c))
            throw std::invalid_argument(
                "zero-shot protocol violated: class in both train and test: " + c);

    std::map<std::string, TextAnchors> anchors;
    for (const auto& c : test_classes) anchors[c] = compute_anchors(c, registry, bank, model);

    InferFn fn = [&](const LabeledSample& s) {
        return infer(model, s.image, anchors.at(s.class_id), cfg, mode);
    };
    return evaluate(fn, test_set);
}

void export_diagnostics(DualEncoder& model, const std::vector<std::string>& class_ids,
                        const ClassRegistry& registry, const PromptBank& bank,
                        const std::string& out_dir) {
    fs::create_directories(out_dir);
    struct Row {
        std::string class_id;
        std::string state;
        std::string prompt;
        Eigen::RowVectorXd embed;
    };
    std::vector<Row> rows;
    for (const auto& cid : class_ids) {
        PromptSet prompts = expand(registry.description(cid), bank);
        for (const auto& p : prompts.normal)
            rows.push_back({cid, "normal", p, model.text_embedding(p)});
        for (const auto& p : prompts.anomaly)
            rows.push_back({cid, "anomaly", p, model.text_embedding(p)});
    }

    std::ofstream m(fs::path(out_dir) / "prompt_similarity.tsv");
    if (!m) throw std::runtime_error("cannot write prompt_similarity.tsv");
    m << "label";
    for (const auto& r : rows) m << "\t" << r.class_id << "/" << r.state;
    m << "\n";
    m.precision(17);
    for (const auto& a : rows) {
        m << a.class_id << "/" << a.state << "/" << a.prompt;
        for (const auto& b : rows) m << "\t" << a.embed.dot(b.embed);
        m << "\n";
    }

    std::ofstream e(fs::path(out_dir) / "text_embeddings.tsv");
    if (!e) throw std::runtime_error("cannot write text_embeddings.tsv");
    e << "class\tstate\tprompt";
    for (int i = 0; i < rows.front().embed.size(); ++i) e << "\tdim" << i;
    e << "\n";
    e.precision(17);
    for (const auto& r : rows) {
        e << r.class_id << "\t" << r.state << "\t" << r.prompt;
        for (int i = 0; i < r.embed.size(); ++i) e << "\t" << r.embed(i);
        e << "\n";
    }
}

void write_metrics_report(const MetricsRecord& metrics, const std::string& text_path,
                          const std::string& json_path, const std::string& title) {
    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string("undefined");
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", *v);
        return std::string(buf);
    };
    {
        std::ofstream f(text_path);
        if (!f) throw std::runtime_error("cannot write " + text_path);
        f << "# " << title << "\n";
        f << "image_auroc: " << fmt(metrics.image_auroc) << "\n";
        f << "pixel_auroc: " << fmt(metrics.pixel_auroc) << "\n";
        for (const auto& [cid, cm] : metrics.per_class)
            f << "class " << cid << ": image_auroc=" << fmt(cm.image_auroc)
              << " pixel_auroc=" << fmt(cm.pixel_auroc) << " n=" << cm.n_images << "\n";
    }
    {
        nlohmann::json j;
        j["title"] = title;
        if (metrics.image_auroc) j["image_auroc"] = *metrics.image_auroc;
        if (metrics.pixel_auroc) j["pixel_auroc"] = *metrics.pixel_auroc;
        for (const auto& [cid, cm] : metrics.per_class) {
            nlohmann::json c;
            if (cm.image_auroc) c["image_auroc"] = *cm.image_auroc;
            if (cm.pixel_auroc) c["pixel_auroc"] = *cm.pixel_auroc;
            c["n_images"] = cm.n_images;
            j["per_class"][cid] = c;
        }
        std::ofstream f(json_path);
        if (!f) throw std::runtime_error("cannot write " + json_path);
        f << j.dump(2) << "\n";
    }
}

}  // namespace zsad
