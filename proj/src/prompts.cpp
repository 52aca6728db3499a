#include "zsad/prompts.hpp"

#include <fstream>
#include <stdexcept>

namespace zsad {

namespace {

size_t count_occurrences(const std::string& s, const std::string& needle) {
    size_t n = 0, pos = 0;
    while ((pos = s.find(needle, pos)) != std::string::npos) {
        ++n;
        pos += needle.size();
    }
    return n;
}

std::string replace_once(const std::string& s, const std::string& slot,
                         const std::string& value) {
    size_t pos = s.find(slot);
    if (pos == std::string::npos) return s;
    std::string out = s;
    out.replace(pos, slot.size(), value);
    return out;
}

std::string strip(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

void PromptBank::validate() const {
    if (normal_descriptors.empty() || anomaly_descriptors.empty())
        throw std::invalid_argument("prompt bank: descriptor lists must be non-empty");
    for (const auto& t : templates)
        if (count_occurrences(t, "{}") != 1)
            throw std::invalid_argument("template must contain exactly one {}: " + t);
    for (const auto& d : normal_descriptors)
        if (count_occurrences(d, "[CLS]") != 1)
            throw std::invalid_argument("descriptor must contain exactly one [CLS]: " + d);
    for (const auto& d : anomaly_descriptors)
        if (count_occurrences(d, "[CLS]") != 1)
            throw std::invalid_argument("descriptor must contain exactly one [CLS]: " + d);
}

PromptBank PromptBank::default_bank() {
    PromptBank bank;
    bank.templates = {"{}", "a photo of a {}"};
    bank.normal_descriptors = {"[CLS]", "a [CLS]", "the [CLS]"};
    bank.anomaly_descriptors = {"damaged [CLS]", "broken [CLS]", "[CLS] with flaw",
                                "[CLS] with defect", "[CLS] with damage"};
    return bank;
}

PromptBank PromptBank::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read prompt bank: " + path);
    PromptBank bank;
    std::vector<std::string>* section = nullptr;
    std::string line;
    while (std::getline(f, line)) {
        std::string s = strip(line);
        if (s.empty() || s[0] == '#') continue;
        if (s == "[templates]") {
            section = &bank.templates;
        } else if (s == "[normal]") {
            section = &bank.normal_descriptors;
        } else if (s == "[anomaly]") {
            section = &bank.anomaly_descriptors;
        } else {
            if (section == nullptr)
                throw std::runtime_error("prompt bank: entry before any section: " + s);
            section->push_back(s);
        }
    }
    bank.validate();
    return bank;
}

void PromptBank::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write prompt bank: " + path);
    f << "[templates]\n";
    for (const auto& t : templates) f << t << "\n";
    f << "[normal]\n";
    for (const auto& d : normal_descriptors) f << d << "\n";
    f << "[anomaly]\n";
    for (const auto& d : anomaly_descriptors) f << d << "\n";
}

bool ClassRegistry::contains(const std::string& class_id) const {
    for (const auto& [id, desc] : entries)
        if (id == class_id) return true;
    return false;
}

const std::string& ClassRegistry::description(const std::string& class_id) const {
    for (const auto& [id, desc] : entries)
        if (id == class_id) return desc;
    throw std::out_of_range("unknown class id: " + class_id);
}

std::vector<std::string> ClassRegistry::ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& [id, desc] : entries) out.push_back(id);
    return out;
}

void ClassRegistry::validate() const {
    for (size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].first.empty() || entries[i].second.empty())
            throw std::invalid_argument("class registry: empty id or description");
        for (size_t j = i + 1; j < entries.size(); ++j)
            if (entries[i].first == entries[j].first)
                throw std::invalid_argument("class registry: duplicate id " +
                                            entries[i].first);
    }
}

ClassRegistry ClassRegistry::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read class registry: " + path);
    ClassRegistry reg;
    std::string line;
    while (std::getline(f, line)) {
        std::string s = strip(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("class registry: expected 'id = description': " + s);
        reg.entries.emplace_back(strip(s.substr(0, eq)), strip(s.substr(eq + 1)));
    }
    reg.validate();
    return reg;
}

void ClassRegistry::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write class registry: " + path);
    for (const auto& [id, desc] : entries) f << id << " = " << desc << "\n";
}

PromptSet expand(const std::string& class_description, const PromptBank& bank) {
    bank.validate();
    PromptSet out;
    out.normal.reserve(bank.templates.size() * bank.normal_descriptors.size());
    out.anomaly.reserve(bank.templates.size() * bank.anomaly_descriptors.size());
    for (const auto& t : bank.templates) {
        for (const auto& d : bank.normal_descriptors)
            out.normal.push_back(
                replace_once(t, "{}", replace_once(d, "[CLS]", class_description)));
        for (const auto& d : bank.anomaly_descriptors)
            out.anomaly.push_back(
                replace_once(t, "{}", replace_once(d, "[CLS]", class_description)));
    }
    return out;
}

AnchorRefs compute_anchor_refs(ag::Graph& g, DualEncoder& model,
                               const std::string& class_description,
                               const PromptBank& bank) {
    PromptSet prompts = expand(class_description, bank);
    auto anchor = [&](const std::vector<std::string>& texts) {
        std::vector<ag::Ref> embeds;
        embeds.reserve(texts.size());
        for (const auto& t : texts) embeds.push_back(model.encode_text(g, t));
        return ag::l2normalize_rows(ag::mean_rows(ag::concat_rows(embeds)));
    };
    return {anchor(prompts.normal), anchor(prompts.anomaly)};
}

TextAnchors compute_anchors(const std::string& class_id, const ClassRegistry& registry,
                            const PromptBank& bank, DualEncoder& model) {
    if (!registry.contains(class_id))
        throw std::out_of_range("unknown class id: " + class_id);
    ag::Graph g(false);
    AnchorRefs refs = compute_anchor_refs(g, model, registry.description(class_id), bank);
    TextAnchors anchors;
    anchors.t_n = refs.t_n.value().row(0);
    anchors.t_a = refs.t_a.value().row(0);
    anchors.class_id = class_id;
    return anchors;
}

Eigen::Matrix2d anchor_similarity(const TextAnchors& a, const TextAnchors& b) {
    if (a.t_n.size() != b.t_n.size())
        throw std::invalid_argument("anchor_similarity: dimension mismatch");
    Eigen::Matrix2d m;
    m(0, 0) = a.t_n.dot(b.t_n);
    m(0, 1) = a.t_n.dot(b.t_a);
    m(1, 0) = a.t_a.dot(b.t_n);
    m(1, 1) = a.t_a.dot(b.t_a);
    return m;
}

}  // namespace zsad
