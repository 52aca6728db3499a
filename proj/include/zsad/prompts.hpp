#pragma once

#include "zsad/backbone.hpp"

#include <string>
#include <utility>
#include <vector>

namespace zsad {

// Prompt templates carry one "{}" slot; descriptors carry one "[CLS]" slot.
// Expansion is the cartesian product, template-major.
struct PromptBank {
    std::vector<std::string> templates;
    std::vector<std::string> normal_descriptors;
    std::vector<std::string> anomaly_descriptors;

    void validate() const;
    static PromptBank load(const std::string& path);
    void save(const std::string& path) const;
    // The ensemble used for adaptation: 2 templates, 3 normal and 5 anomaly
    // descriptors.
    static PromptBank default_bank();
};

struct ClassRegistry {
    // ordered (class_id, description) pairs; ids unique, descriptions non-empty
    std::vector<std::pair<std::string, std::string>> entries;

    bool contains(const std::string& class_id) const;
    const std::string& description(const std::string& class_id) const;
    std::vector<std::string> ids() const;
    void validate() const;
    static ClassRegistry load(const std::string& path);
    void save(const std::string& path) const;
};

struct TextAnchors {
    Eigen::RowVectorXd t_n;  // unit norm
    Eigen::RowVectorXd t_a;  // unit norm
    std::string class_id;
};

struct PromptSet {
    std::vector<std::string> normal;
    std::vector<std::string> anomaly;
};

// Verbatim substitution of "[CLS]" in each descriptor, then "{}" in each
// template; returns |templates| x |descriptors| prompts per state.
PromptSet expand(const std::string& class_description, const PromptBank& bank);

// Graph-building anchor computation: unit-normalised means of the prompt
// ensembles under the current (possibly adapted) text encoder. Gradients flow
// through into the text tower's trainable parameters.
struct AnchorRefs {
    ag::Ref t_n;
    ag::Ref t_a;
};
AnchorRefs compute_anchor_refs(ag::Graph& g, DualEncoder& model,
                               const std::string& class_description,
                               const PromptBank& bank);

TextAnchors compute_anchors(const std::string& class_id, const ClassRegistry& registry,
                            const PromptBank& bank, DualEncoder& model);

// 2x2 grid of anchor inner products:
// [[<Tn_a,Tn_b>, <Tn_a,Ta_b>], [<Ta_a,Tn_b>, <Ta_a,Ta_b>]]
Eigen::Matrix2d anchor_similarity(const TextAnchors& a, const TextAnchors& b);

}  // namespace zsad
