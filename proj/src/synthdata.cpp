#include "zsad/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace zsad {

namespace {

constexpr int kImageSize = 64;
constexpr double kBackground = 0.12;
constexpr double kForegroundThreshold = 0.24;
// all defect pixels stay inside this radius so rotation + translation in
// augment() cannot push them out of frame
constexpr double kDefectRadius = 22.0;

struct PixelSet {
    std::vector<std::pair<int, int>> pixels;  // (y, x)
};

double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }

std::array<double, 3> jittered(const NamedColor& c, double jitter, Rng& rng) {
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i)
        out[i] = clamp01(c.rgb[i] + rng.uniform(-jitter, jitter));
    // keep the object clearly above the foreground-recovery threshold
    double mx = std::max({out[0], out[1], out[2]});
    if (mx < 0.3)
        for (int i = 0; i < 3; ++i) out[i] = clamp01(out[i] + (0.3 - mx) + 0.05);
    return out;
}

std::array<double, 3> darker(const std::array<double, 3>& c) {
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i) out[i] = clamp01(0.30 + 0.45 * c[i]);
    return out;
}

void paint(Image& img, int y, int x, const std::array<double, 3>& c) {
    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
}

}  // namespace

void ClassSpec::validate() const {
    if (id.empty() || description.empty())
        throw std::invalid_argument("class spec needs an id and a description");
    if (palette.empty()) throw std::invalid_argument("class spec needs a palette");
}

void DefectSpec::validate() const {
    if (families.empty()) throw std::invalid_argument("defect spec needs families");
    if (!(min_area_frac > 0.0) || !(max_area_frac > min_area_frac))
        throw std::invalid_argument("defect size range is empty");
    if (min_count < 1 || max_count < min_count)
        throw std::invalid_argument("defect count range is empty");
    if (contrast_floor <= 0.0 || contrast_floor > 0.5)
        throw std::invalid_argument("contrast floor out of range");
}

void LabeledSample::validate() const {
    if (mask.rows() != image.h || mask.cols() != image.w)
        throw std::invalid_argument("mask shape does not match image");
    bool any = false;
    for (Eigen::Index y = 0; y < mask.rows(); ++y)
        for (Eigen::Index x = 0; x < mask.cols(); ++x) {
            if (mask(y, x) != 0.0 && mask(y, x) != 1.0)
                throw std::invalid_argument("mask must be binary");
            any = any || mask(y, x) != 0.0;
        }
    if ((label == 1) != any)
        throw std::invalid_argument("label does not agree with the mask");
}

void SplitSpec::validate() const {
    if (train_classes.empty() || test_classes.empty())
        throw std::invalid_argument("split needs train and test classes");
    for (const auto& t : train_classes)
        for (const auto& u : test_classes)
            if (t == u)
                throw std::invalid_argument(
                    "train and test classes must be disjoint (zero-shot protocol): " + t);
    if (shots >= 0 && shots % 2 != 0)
        throw std::invalid_argument("shot count must be even for the 1:1 ratio");
    if (shots == 0) throw std::invalid_argument("shot count must be positive");
    if (full_shots < 2 || full_shots % 2 != 0)
        throw std::invalid_argument("full_shots must be a positive even count");
    defects.validate();
}

std::vector<ClassSpec> default_class_specs() {
    auto C = [](const char* n, double r, double g, double b) {
        return NamedColor{n, {r, g, b}};
    };
    NamedColor red = C("red", 0.85, 0.18, 0.18);
    NamedColor green = C("green", 0.18, 0.72, 0.25);
    NamedColor blue = C("blue", 0.22, 0.38, 0.88);
    NamedColor yellow = C("yellow", 0.88, 0.82, 0.20);
    NamedColor purple = C("purple", 0.60, 0.28, 0.80);
    NamedColor orange = C("orange", 0.92, 0.55, 0.16);
    NamedColor cyan = C("cyan", 0.18, 0.78, 0.78);
    NamedColor white = C("white", 0.90, 0.90, 0.88);

    std::vector<ClassSpec> specs;
    auto add = [&](const char* id, const char* desc, ShapeFamily shape,
                   std::vector<NamedColor> pal) {
        ClassSpec s;
        s.id = id;
        s.description = desc;
        s.shape = shape;
        s.palette = std::move(pal);
        specs.push_back(std::move(s));
    };
    // training classes
    add("disk", "solid disk", ShapeFamily::disk, {red, yellow, white});
    add("ring", "round ring", ShapeFamily::ring, {blue, cyan, purple});
    add("square", "square tile", ShapeFamily::square, {green, orange, white});
    add("frame", "hollow frame", ShapeFamily::frame, {purple, red, cyan});
    add("cross", "cross mark", ShapeFamily::cross, {orange, blue, yellow});
    add("hstripe", "striped panel", ShapeFamily::stripes_h, {cyan, green, red});
    add("vstripe", "pinstripe board", ShapeFamily::stripes_v, {yellow, purple, blue});
    add("checker", "checker board", ShapeFamily::checker, {white, orange, green});
    // held-out classes
    add("triangle", "triangle wedge", ShapeFamily::triangle, {blue, green, orange});
    add("diamond", "diamond plate", ShapeFamily::diamond, {cyan, red, yellow});
    add("blob", "amorphous blob", ShapeFamily::blob, {green, purple, white});
    add("grid", "grid lattice", ShapeFamily::grid, {red, cyan, purple});
    return specs;
}

ClassRegistry registry_from_specs(const std::vector<ClassSpec>& specs) {
    ClassRegistry reg;
    for (const auto& s : specs) reg.entries.emplace_back(s.id, s.description);
    reg.validate();
    return reg;
}

const ClassSpec& spec_of(const std::vector<ClassSpec>& specs, const std::string& class_id) {
    for (const auto& s : specs)
        if (s.id == class_id) return s;
    throw std::out_of_range("unknown class id: " + class_id);
}

std::vector<std::string> default_train_class_ids() {
    return {"disk", "ring", "square", "frame", "cross", "hstripe", "vstripe", "checker"};
}

std::vector<std::string> default_test_class_ids() {
    return {"triangle", "diamond", "blob", "grid"};
}

Eigen::MatrixXd object_foreground(const Image& img) {
    Eigen::MatrixXd fg = Eigen::MatrixXd::Zero(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double mx = std::max({img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)});
            if (mx > kForegroundThreshold) fg(y, x) = 1.0;
        }
    return fg;
}

namespace {

void fill_background(Image& img, Rng& rng) {
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double v = kBackground + rng.uniform(-0.02, 0.02);
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = clamp01(v);
        }
}

// paints the class shape; returns the support mask used for defect placement
Eigen::MatrixXd paint_shape(Image& img, const ClassSpec& spec, const NamedColor& base,
                            Rng& rng) {
    const double cx = (kImageSize - 1) / 2.0, cy = (kImageSize - 1) / 2.0;
    Eigen::MatrixXd support = Eigen::MatrixXd::Zero(kImageSize, kImageSize);
    std::array<double, 3> c1 = jittered(base, spec.jitter, rng);
    std::array<double, 3> c2 = darker(c1);

    auto put = [&](int y, int x, const std::array<double, 3>& c) {
        paint(img, y, x, c);
        support(y, x) = 1.0;
    };
    auto foreach_pixel = [&](auto&& inside) {
        for (int y = 0; y < kImageSize; ++y)
            for (int x = 0; x < kImageSize; ++x) inside(y, x);
    };

    switch (spec.shape) {
        case ShapeFamily::disk: {
            double r = rng.uniform(16.0, 22.0);
            foreach_pixel([&](int y, int x) {
                if (std::hypot(y - cy, x - cx) <= r) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::ring: {
            double ro = rng.uniform(18.0, 22.0);
            double ri = ro - rng.uniform(5.0, 8.0);
            foreach_pixel([&](int y, int x) {
                double d = std::hypot(y - cy, x - cx);
                if (d <= ro && d >= ri) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::square: {
            double h = rng.uniform(14.0, 19.0);
            foreach_pixel([&](int y, int x) {
                if (std::abs(y - cy) <= h && std::abs(x - cx) <= h) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::frame: {
            double h = rng.uniform(16.0, 21.0);
            double t = rng.uniform(4.0, 6.0);
            foreach_pixel([&](int y, int x) {
                double ay = std::abs(y - cy), ax = std::abs(x - cx);
                bool outer = ay <= h && ax <= h;
                bool inner = ay <= h - t && ax <= h - t;
                if (outer && !inner) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::cross: {
            double h = rng.uniform(18.0, 22.0);
            double t = rng.uniform(4.0, 6.0);
            foreach_pixel([&](int y, int x) {
                double ay = std::abs(y - cy), ax = std::abs(x - cx);
                if ((ay <= t && ax <= h) || (ax <= t && ay <= h)) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::stripes_h:
        case ShapeFamily::stripes_v: {
            double h = rng.uniform(17.0, 21.0);
            int period = int(rng.index(5)) + 6;  // 6..10
            bool horizontal = spec.shape == ShapeFamily::stripes_h;
            foreach_pixel([&](int y, int x) {
                if (std::abs(y - cy) <= h && std::abs(x - cx) <= h) {
                    int k = horizontal ? y : x;
                    put(y, x, (k / (period / 2)) % 2 == 0 ? c1 : c2);
                }
            });
            break;
        }
        case ShapeFamily::checker: {
            double h = rng.uniform(17.0, 21.0);
            int cell = int(rng.index(4)) + 5;  // 5..8
            foreach_pixel([&](int y, int x) {
                if (std::abs(y - cy) <= h && std::abs(x - cx) <= h)
                    put(y, x, ((y / cell) + (x / cell)) % 2 == 0 ? c1 : c2);
            });
            break;
        }
        case ShapeFamily::triangle: {
            double h = rng.uniform(17.0, 22.0);
            foreach_pixel([&](int y, int x) {
                double fy = (y - (cy - h)) / (2.0 * h);  // 0 at apex, 1 at base
                if (fy < 0.0 || fy > 1.0) return;
                if (std::abs(x - cx) <= fy * h) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::diamond: {
            double a = rng.uniform(15.0, 21.0), b = rng.uniform(15.0, 21.0);
            foreach_pixel([&](int y, int x) {
                if (std::abs(x - cx) / a + std::abs(y - cy) / b <= 1.0) put(y, x, c1);
            });
            break;
        }
        case ShapeFamily::blob: {
            int k = int(rng.index(4)) + 4;  // 4..7 lobes
            std::vector<std::array<double, 3>> lobes;  // (y, x, r)
            for (int i = 0; i < k; ++i)
                lobes.push_back({cy + rng.uniform(-9.0, 9.0), cx + rng.uniform(-9.0, 9.0),
                                 rng.uniform(6.0, 11.0)});
            foreach_pixel([&](int y, int x) {
                for (const auto& l : lobes)
                    if (std::hypot(y - l[0], x - l[1]) <= l[2]) {
                        put(y, x, c1);
                        return;
                    }
            });
            break;
        }
        case ShapeFamily::grid: {
            double h = rng.uniform(17.0, 21.0);
            int period = int(rng.index(4)) + 7;  // 7..10
            foreach_pixel([&](int y, int x) {
                if (std::abs(y - cy) <= h && std::abs(x - cx) <= h) {
                    bool line = (y % period) < 2 || (x % period) < 2;
                    put(y, x, line ? c1 : c2);
                }
            });
            break;
        }
    }

    // mild luminance texture on the object
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            if (support(y, x) != 0.0) {
                double n = rng.uniform(-0.03, 0.03);
                for (int ch = 0; ch < 3; ++ch)
                    img.at(y, x, ch) = clamp01(img.at(y, x, ch) + n);
            }
    return support;
}

LabeledSample render_impl(const ClassSpec& spec, uint64_t seed, std::string* color_name) {
    spec.validate();
    Rng rng(mix_seed(seed, spec.id, 0x524e44));  // render stream
    const NamedColor& base = spec.palette[size_t(rng.index(spec.palette.size()))];
    if (color_name != nullptr) *color_name = base.name;
    LabeledSample s;
    s.image = Image(kImageSize, kImageSize, 3);
    fill_background(s.image, rng);
    paint_shape(s.image, spec, base, rng);
    s.image.quantize8();
    s.mask = Eigen::MatrixXd::Zero(kImageSize, kImageSize);
    s.label = 0;
    s.class_id = spec.id;
    s.seed = seed;
    return s;
}

}  // namespace

LabeledSample render_normal(const ClassSpec& spec, uint64_t seed) {
    return render_impl(spec, seed, nullptr);
}

namespace {

PixelSet defect_pixels(DefectFamily family, int target_area, const Eigen::MatrixXd& ok,
                       Rng& rng) {
    PixelSet out;
    std::vector<std::pair<int, int>> candidates;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            if (ok(y, x) != 0.0) candidates.emplace_back(y, x);
    if (candidates.empty()) return out;
    auto [cy0, cx0] = candidates[size_t(rng.index(candidates.size()))];
    double cy = cy0, cx = cx0;
    auto admit = [&](int y, int x) {
        if (y < 0 || x < 0 || y >= kImageSize || x >= kImageSize) return;
        if (ok(y, x) == 0.0) return;
        out.pixels.emplace_back(y, x);
    };
    auto stamp_disk = [&](double py, double px, double r) {
        for (int y = int(py - r) - 1; y <= int(py + r) + 1; ++y)
            for (int x = int(px - r) - 1; x <= int(px + r) + 1; ++x)
                if (std::hypot(y - py, x - px) <= r) admit(y, x);
    };
    auto stamp_band = [&](double y0, double x0, double y1, double x1, double half_t) {
        int steps = int(std::hypot(y1 - y0, x1 - x0) * 2) + 1;
        for (int i = 0; i <= steps; ++i) {
            double t = double(i) / steps;
            stamp_disk(y0 + t * (y1 - y0), x0 + t * (x1 - x0), half_t);
        }
    };
    switch (family) {
        case DefectFamily::scratch: {
            double theta = rng.uniform(0.0, 2.0 * M_PI);
            double half_t = 1.2;
            double len = std::max(3.0, double(target_area) / (2.0 * half_t + 1.0));
            stamp_band(cy - 0.5 * len * std::sin(theta), cx - 0.5 * len * std::cos(theta),
                       cy + 0.5 * len * std::sin(theta), cx + 0.5 * len * std::cos(theta),
                       half_t);
            break;
        }
        case DefectFamily::hole: {
            double r = std::max(1.5, std::sqrt(double(target_area) / M_PI));
            stamp_disk(cy, cx, r);
            break;
        }
        case DefectFamily::stain: {
            int lobes = 2 + int(rng.index(2));
            double r = std::max(1.5, std::sqrt(double(target_area) / (M_PI * lobes)) * 1.2);
            for (int i = 0; i < lobes; ++i)
                stamp_disk(cy + rng.uniform(-r, r), cx + rng.uniform(-r, r), r);
            break;
        }
        case DefectFamily::crack: {
            int segments = 3 + int(rng.index(4));
            double half_t = 1.1;
            double seg_len =
                std::max(2.5, double(target_area) / ((2.0 * half_t + 1.0) * segments));
            double y = cy, x = cx;
            double theta = rng.uniform(0.0, 2.0 * M_PI);
            for (int i = 0; i < segments; ++i) {
                double ny = y + seg_len * std::sin(theta);
                double nx = x + seg_len * std::cos(theta);
                stamp_band(y, x, ny, nx, half_t);
                y = ny;
                x = nx;
                theta += rng.uniform(-0.9, 0.9);
            }
            break;
        }
        case DefectFamily::texture_swap: {
            double aspect = rng.uniform(0.5, 2.0);
            double hh = std::max(1.5, std::sqrt(double(target_area) * aspect) / 2.0);
            double hw = std::max(1.5, double(target_area) / (4.0 * hh) );
            for (int y = int(cy - hh); y <= int(cy + hh); ++y)
                for (int x = int(cx - hw); x <= int(cx + hw); ++x) admit(y, x);
            break;
        }
    }
    std::sort(out.pixels.begin(), out.pixels.end());
    out.pixels.erase(std::unique(out.pixels.begin(), out.pixels.end()), out.pixels.end());
    return out;
}

}  // namespace

LabeledSample inject_defect(const LabeledSample& sample, const DefectSpec& dspec,
                            uint64_t seed) {
    dspec.validate();
    if (sample.label != 0)
        throw std::invalid_argument("inject_defect expects a normal sample");

    Eigen::MatrixXd fg = object_foreground(sample.image);
    const double cy = (kImageSize - 1) / 2.0, cx = (kImageSize - 1) / 2.0;
    // restrict placement so augmentation cannot push defect pixels off frame
    Eigen::MatrixXd ok = fg;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            if (std::hypot(y - cy, x - cx) > kDefectRadius) ok(y, x) = 0.0;
    double area = fg.sum();
    if (area < 16.0) throw std::runtime_error("inject_defect: no usable foreground");

    Rng rng(mix_seed(seed, sample.class_id, 0xdef3c7));
    for (int attempt = 0; attempt < dspec.max_retries; ++attempt) {
        double frac = rng.uniform(dspec.min_area_frac, dspec.max_area_frac);
        int count = dspec.min_count + int(rng.index(uint64_t(dspec.max_count - dspec.min_count + 1)));
        int per_defect = std::max(3, int(frac * area / count));

        std::vector<std::pair<PixelSet, DefectFamily>> drawn;
        std::set<std::pair<int, int>> all;
        for (int d = 0; d < count; ++d) {
            DefectFamily family = dspec.families[size_t(rng.index(dspec.families.size()))];
            PixelSet ps = defect_pixels(family, per_defect, ok, rng);
            all.insert(ps.pixels.begin(), ps.pixels.end());
            drawn.emplace_back(std::move(ps), family);
        }
        double got = double(all.size());
        if (got < dspec.min_area_frac * area || got > dspec.max_area_frac * area)
            continue;  // retry with a fresh draw

        LabeledSample out = sample;
        out.seed = seed;
        std::array<double, 3> dark{kBackground, kBackground, kBackground};
        for (const auto& [ps, family] : drawn) {
            for (const auto& [y, x] : ps.pixels) {
                std::array<double, 3> orig{out.image.at(y, x, 0), out.image.at(y, x, 1),
                                           out.image.at(y, x, 2)};
                std::array<double, 3> c{};
                switch (family) {
                    case DefectFamily::hole:
                    case DefectFamily::crack:
                        c = dark;  // exposes the substrate
                        break;
                    case DefectFamily::scratch:
                    case DefectFamily::stain:
                        // hue shift against the local color
                        c = {clamp01(1.0 - orig[0]), clamp01(1.0 - orig[1]),
                             clamp01(orig[2] * 0.3)};
                        break;
                    case DefectFamily::texture_swap: {
                        double n = rng.uniform(0.25, 0.95);
                        c = {n, clamp01(n * 0.8), clamp01(1.0 - n)};
                        break;
                    }
                }
                // contrast floor, channel-wise, with quantization margin
                double delta = std::max({std::abs(c[0] - orig[0]), std::abs(c[1] - orig[1]),
                                         std::abs(c[2] - orig[2])});
                if (delta < dspec.contrast_floor + 0.02) {
                    for (int ch = 0; ch < 3; ++ch)
                        c[ch] = clamp01(orig[ch] + (orig[ch] < 0.5 ? 0.3 : -0.3));
                }
                paint(out.image, y, x, c);
                out.mask(y, x) = 1.0;
            }
        }
        out.image.quantize8();
        out.label = 1;
        out.class_id = sample.class_id;
        return out;
    }
    throw std::runtime_error("inject_defect: could not place a defect within retries");
}

namespace {

void warp_affine(const LabeledSample& in, LabeledSample& out, double angle_rad,
                 double ty, double tx) {
    const double cy = (in.image.h - 1) / 2.0, cx = (in.image.w - 1) / 2.0;
    double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
    MaskMat m8(in.mask.rows(), in.mask.cols());
    for (Eigen::Index y = 0; y < in.mask.rows(); ++y)
        for (Eigen::Index x = 0; x < in.mask.cols(); ++x)
            m8(y, x) = in.mask(y, x) != 0.0 ? 1 : 0;
    for (int y = 0; y < in.image.h; ++y)
        for (int x = 0; x < in.image.w; ++x) {
            // inverse map: rotate about center, then translate
            double dy = y - cy - ty, dx = x - cx - tx;
            double sy = cy + (ca * dy - sa * dx);
            double sx = cx + (sa * dy + ca * dx);
            for (int ch = 0; ch < 3; ++ch)
                out.image.at(y, x, ch) =
                    clamp01(bilinear_sample(in.image, sy, sx, ch, kBackground));
            out.mask(y, x) = bilinear_sample_mask(m8, sy, sx) >= 0.5 ? 1.0 : 0.0;
        }
}

}  // namespace

LabeledSample augment(const LabeledSample& sample, uint64_t seed) {
    sample.validate();
    Rng rng(mix_seed(seed, sample.class_id, 0xa06));
    LabeledSample cur = sample;

    // color jitter (image only)
    if (rng.coin()) {
        double brightness = rng.uniform(-0.2, 0.2);
        double contrast = 1.0 + rng.uniform(-0.2, 0.2);
        for (double& v : cur.image.data)
            v = clamp01((v + brightness - 0.5) * contrast + 0.5);
    }
    // rotation
    if (rng.coin()) {
        double angle = rng.uniform(-30.0, 30.0) * M_PI / 180.0;
        LabeledSample next = cur;
        warp_affine(cur, next, angle, 0.0, 0.0);
        cur = std::move(next);
    }
    // affine translation
    if (rng.coin()) {
        double ty = rng.uniform(-0.1, 0.1) * cur.image.h;
        double tx = rng.uniform(-0.1, 0.1) * cur.image.w;
        LabeledSample next = cur;
        warp_affine(cur, next, 0.0, ty, tx);
        cur = std::move(next);
    }
    // horizontal flip
    if (rng.coin()) {
        LabeledSample next = cur;
        for (int y = 0; y < cur.image.h; ++y)
            for (int x = 0; x < cur.image.w; ++x) {
                for (int ch = 0; ch < 3; ++ch)
                    next.image.at(y, x, ch) = cur.image.at(y, cur.image.w - 1 - x, ch);
                next.mask(y, x) = cur.mask(y, cur.image.w - 1 - x);
            }
        cur = std::move(next);
    }
    // vertical flip
    if (rng.coin()) {
        LabeledSample next = cur;
        for (int y = 0; y < cur.image.h; ++y)
            for (int x = 0; x < cur.image.w; ++x) {
                for (int ch = 0; ch < 3; ++ch)
                    next.image.at(y, x, ch) = cur.image.at(cur.image.h - 1 - y, x, ch);
                next.mask(y, x) = cur.mask(cur.image.h - 1 - y, x);
            }
        cur = std::move(next);
    }
    cur.label = cur.mask.sum() > 0.0 ? 1 : 0;
    return cur;
}

namespace {
// index scheme keeping the split / validation / corpus streams disjoint
constexpr uint64_t kValidationOffset = 1u << 20;
constexpr uint64_t kCorpusOffset = 2u << 20;
constexpr uint64_t kTestOffset = 3u << 20;

LabeledSample make_sample(const ClassSpec& spec, bool anomalous, const DefectSpec& defects,
                          uint64_t global_seed, uint64_t index) {
    uint64_t s = mix_seed(global_seed, spec.id, index);
    LabeledSample sample = render_normal(spec, s);
    if (anomalous) sample = inject_defect(sample, defects, s);
    return sample;
}
}  // namespace

Split make_split(const std::vector<ClassSpec>& specs, const SplitSpec& split,
                 uint64_t seed) {
    split.validate();
    Split out;
    int shots = split.effective_shots();
    for (const auto& cid : split.train_classes) {
        const ClassSpec& spec = spec_of(specs, cid);
        for (int i = 0; i < shots / 2; ++i) {
            out.train.push_back(make_sample(spec, false, split.defects, seed, uint64_t(i)));
            out.train.push_back(
                make_sample(spec, true, split.defects, seed, uint64_t(shots / 2 + i)));
        }
    }
    for (const auto& cid : split.test_classes) {
        const ClassSpec& spec = spec_of(specs, cid);
        for (int i = 0; i < split.test_normal_per_class; ++i)
            out.test.push_back(
                make_sample(spec, false, split.defects, seed, kTestOffset + uint64_t(i)));
        for (int i = 0; i < split.test_anomaly_per_class; ++i)
            out.test.push_back(make_sample(spec, true, split.defects, seed,
                                           kTestOffset + 4096 + uint64_t(i)));
    }
    return out;
}

std::vector<LabeledSample> make_validation_slice(const std::vector<ClassSpec>& specs,
                                                 const std::vector<std::string>& class_ids,
                                                 int per_class, const DefectSpec& defects,
                                                 uint64_t seed) {
    if (per_class < 2 || per_class % 2 != 0)
        throw std::invalid_argument("validation slice needs an even per-class count");
    std::vector<LabeledSample> out;
    for (const auto& cid : class_ids) {
        const ClassSpec& spec = spec_of(specs, cid);
        for (int i = 0; i < per_class / 2; ++i) {
            out.push_back(
                make_sample(spec, false, defects, seed, kValidationOffset + uint64_t(i)));
            out.push_back(make_sample(spec, true, defects, seed,
                                      kValidationOffset + 2048 + uint64_t(i)));
        }
    }
    return out;
}

std::vector<CaptionedSample> caption_corpus(const std::vector<ClassSpec>& specs,
                                            const PromptBank& bank, int n_per_class,
                                            double anomaly_fraction,
                                            const DefectSpec& defects, uint64_t seed) {
    if (specs.empty()) throw std::invalid_argument("caption_corpus: no classes");
    if (n_per_class < 1) throw std::invalid_argument("caption_corpus: n_per_class < 1");
    bank.validate();
    std::vector<CaptionedSample> out;
    out.reserve(specs.size() * size_t(n_per_class));
    for (const auto& spec : specs) {
        for (int i = 0; i < n_per_class; ++i) {
            uint64_t idx = kCorpusOffset + uint64_t(i);
            uint64_t s = mix_seed(seed, spec.id, idx);
            Rng rng(mix_seed(s, "caption"));
            bool anomalous = rng.uniform() < anomaly_fraction;

            CaptionedSample cs;
            std::string color_name;
            cs.sample = render_impl(spec, s, &color_name);
            if (anomalous) cs.sample = inject_defect(cs.sample, defects, s);

            const auto& descriptors =
                anomalous ? bank.anomaly_descriptors : bank.normal_descriptors;
            const std::string& tmpl =
                bank.templates[size_t(rng.index(bank.templates.size()))];
            const std::string& desc = descriptors[size_t(rng.index(descriptors.size()))];
            std::string cls_text = color_name + " " + spec.description;
            std::string caption = tmpl;
            std::string d = desc;
            d.replace(d.find("[CLS]"), 5, cls_text);
            caption.replace(caption.find("{}"), 2, d);
            cs.caption = caption;
            out.push_back(std::move(cs));
        }
    }
    return out;
}

void save_dataset(const std::string& root, const std::string& manifest_name,
                  const std::vector<LabeledSample>& samples,
                  const std::vector<std::string>* captions) {
    if (captions != nullptr && captions->size() != samples.size())
        throw std::invalid_argument("caption list size mismatch");
    fs::create_directories(root);
    std::ofstream manifest(fs::path(root) / manifest_name);
    if (!manifest) throw std::runtime_error("cannot write manifest in " + root);
    std::map<std::string, int> counters;
    for (size_t i = 0; i < samples.size(); ++i) {
        const LabeledSample& s = samples[i];
        int n = counters[s.class_id]++;
        fs::path dir = fs::path(root) / s.class_id;
        fs::create_directories(dir);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%05d", n);
        std::string img_rel = s.class_id + "/img_" + buf + ".ppm";
        std::string mask_rel = s.class_id + "/mask_" + buf + ".pgm";
        write_ppm((fs::path(root) / img_rel).string(), s.image);
        MaskMat m8(s.mask.rows(), s.mask.cols());
        for (Eigen::Index y = 0; y < s.mask.rows(); ++y)
            for (Eigen::Index x = 0; x < s.mask.cols(); ++x)
                m8(y, x) = s.mask(y, x) != 0.0 ? 1 : 0;
        write_pgm((fs::path(root) / mask_rel).string(), m8);
        manifest << img_rel << "\t" << mask_rel << "\t" << s.label << "\t" << s.class_id
                 << "\t" << s.seed;
        if (captions != nullptr) manifest << "\t" << (*captions)[i];
        manifest << "\n";
    }
}

std::vector<LabeledSample> load_dataset(const std::string& root,
                                        const std::string& manifest_name,
                                        std::vector<std::string>* captions) {
    std::ifstream manifest(fs::path(root) / manifest_name);
    if (!manifest)
        throw std::runtime_error("cannot read manifest " + manifest_name + " in " + root);
    std::vector<LabeledSample> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t pos = 0;
        while (true) {
            size_t tab = line.find('\t', pos);
            cols.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        if (cols.size() < 5) throw std::runtime_error("malformed manifest line: " + line);
        LabeledSample s;
        s.image = read_ppm((fs::path(root) / cols[0]).string());
        MaskMat m8 = read_pgm((fs::path(root) / cols[1]).string());
        s.mask = Eigen::MatrixXd::Zero(m8.rows(), m8.cols());
        for (Eigen::Index y = 0; y < m8.rows(); ++y)
            for (Eigen::Index x = 0; x < m8.cols(); ++x)
                if (m8(y, x)) s.mask(y, x) = 1.0;
        s.label = std::stoi(cols[2]);
        s.class_id = cols[3];
        s.seed = std::stoull(cols[4]);
        s.validate();
        if (captions != nullptr) {
            if (cols.size() < 6) throw std::runtime_error("manifest line lacks caption");
            captions->push_back(cols[5]);
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace zsad
