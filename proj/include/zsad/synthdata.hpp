#pragma once

#include "zsad/image.hpp"
#include "zsad/prompts.hpp"
#include "zsad/rng.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace zsad {

enum class ShapeFamily {
    disk, ring, square, frame, cross, stripes_h, stripes_v, checker,
    triangle, diamond, blob, grid
};

enum class DefectFamily { scratch, hole, stain, crack, texture_swap };

struct NamedColor {
    std::string name;
    std::array<double, 3> rgb;
};

struct ClassSpec {
    std::string id;
    std::string description;      // human-readable, used as the prompt [CLS] text
    ShapeFamily shape;
    std::vector<NamedColor> palette;
    double jitter = 0.06;         // per-channel color jitter at render time

    void validate() const;
};

struct DefectSpec {
    std::vector<DefectFamily> families{DefectFamily::scratch, DefectFamily::hole,
                                       DefectFamily::stain, DefectFamily::crack,
                                       DefectFamily::texture_swap};
    double min_area_frac = 0.01;  // of object foreground area
    double max_area_frac = 0.12;
    int min_count = 1;
    int max_count = 3;
    double contrast_floor = 0.15;
    int max_retries = 64;

    void validate() const;
};

struct LabeledSample {
    Image image;
    Eigen::MatrixXd mask;  // H x W binary, all zero when normal
    int label = 0;         // 1 iff mask has a nonzero pixel
    std::string class_id;
    uint64_t seed = 0;

    void validate() const;
};

struct SplitSpec {
    std::vector<std::string> train_classes;
    std::vector<std::string> test_classes;
    int shots = 16;                 // per train class; -1 means "full"
    int full_shots = 128;           // what "full" means at desk scale
    int test_normal_per_class = 16;
    int test_anomaly_per_class = 16;
    DefectSpec defects;

    int effective_shots() const { return shots < 0 ? full_shots : shots; }
    void validate() const;
};

struct Split {
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> test;
};

struct CaptionedSample {
    LabeledSample sample;
    std::string caption;
};

// The default 12-class registry: 8 training classes and 4 held out for the
// zero-shot protocol.
std::vector<ClassSpec> default_class_specs();
ClassRegistry registry_from_specs(const std::vector<ClassSpec>& specs);
const ClassSpec& spec_of(const std::vector<ClassSpec>& specs, const std::string& class_id);
std::vector<std::string> default_train_class_ids();
std::vector<std::string> default_test_class_ids();

// Binary object support recovered from pixel intensities; renders guarantee
// foreground max-channel > 0.24 and background below it.
Eigen::MatrixXd object_foreground(const Image& img);

LabeledSample render_normal(const ClassSpec& spec, uint64_t seed);
LabeledSample inject_defect(const LabeledSample& sample, const DefectSpec& dspec,
                            uint64_t seed);

// color jitter, rotation (+-30 deg), translation (<=10%), horizontal and
// vertical flips, each applied independently with probability 0.5; geometric
// transforms hit image and mask identically, the mask is re-binarised at 0.5
// and the label recomputed.
LabeledSample augment(const LabeledSample& sample, uint64_t seed);

// Deterministic per-sample streams: sample i of class c derives its RNG from
// hash(seed, c, i), so parallel and serial generation agree bit-exactly.
Split make_split(const std::vector<ClassSpec>& specs, const SplitSpec& split,
                 uint64_t seed);
std::vector<LabeledSample> make_validation_slice(const std::vector<ClassSpec>& specs,
                                                 const std::vector<std::string>& class_ids,
                                                 int per_class, const DefectSpec& defects,
                                                 uint64_t seed);

// Image/caption pairs for contrastive pretraining. Captions are prompt-bank
// expansions of "<color> <class description>"; anomalous pairs use anomaly
// descriptors.
std::vector<CaptionedSample> caption_corpus(const std::vector<ClassSpec>& specs,
                                            const PromptBank& bank, int n_per_class,
                                            double anomaly_fraction,
                                            const DefectSpec& defects, uint64_t seed);

// On-disk layout: <root>/<class>/img_NNNNN.ppm (+ mask_NNNNN.pgm), manifest
// lines "path<TAB>mask<TAB>label<TAB>class<TAB>seed[<TAB>caption]".
void save_dataset(const std::string& root, const std::string& manifest_name,
                  const std::vector<LabeledSample>& samples,
                  const std::vector<std::string>* captions = nullptr);
std::vector<LabeledSample> load_dataset(const std::string& root,
                                        const std::string& manifest_name,
                                        std::vector<std::string>* captions = nullptr);

}  // namespace zsad
