#include "zsad/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace zsad {

void Image::quantize8() {
    for (double& v : data) {
        double q = std::round(std::min(std::max(v, 0.0), 1.0) * 255.0);
        v = q / 255.0;
    }
}

namespace {
void write_header(std::ofstream& f, const char* magic, int w, int h) {
    f << magic << "\n" << w << " " << h << "\n255\n";
}
void read_header(std::ifstream& f, const char* magic, int& w, int& h) {
    std::string m;
    f >> m;
    if (m != magic) throw std::runtime_error("bad image magic: " + m);
    int maxv = 0;
    f >> w >> h >> maxv;
    if (!f || w <= 0 || h <= 0 || maxv != 255)
        throw std::runtime_error("bad image header");
    f.get();  // single whitespace before raster
}
}  // namespace

void write_ppm(const std::string& path, const Image& img) {
    if (img.c != 3) throw std::invalid_argument("write_ppm expects 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    write_header(f, "P6", img.w, img.h);
    std::vector<unsigned char> row(size_t(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double v = std::min(std::max(img.at(y, x, ch), 0.0), 1.0);
                row[size_t(x) * 3 + ch] = (unsigned char)std::lround(v * 255.0);
            }
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!f) throw std::runtime_error("short write on " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    int w = 0, h = 0;
    read_header(f, "P6", w, h);
    Image img(h, w, 3);
    std::vector<unsigned char> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        if (!f) throw std::runtime_error("truncated image " + path);
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.at(y, x, ch) = double(row[size_t(x) * 3 + ch]) / 255.0;
    }
    return img;
}

void write_pgm(const std::string& path, const MaskMat& mask) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    write_header(f, "P5", int(mask.cols()), int(mask.rows()));
    std::vector<unsigned char> row(size_t(mask.cols()));
    for (Eigen::Index y = 0; y < mask.rows(); ++y) {
        for (Eigen::Index x = 0; x < mask.cols(); ++x)
            row[size_t(x)] = mask(y, x) ? 255 : 0;
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!f) throw std::runtime_error("short write on " + path);
}

void write_pgm_gray(const std::string& path, const Eigen::MatrixXd& gray) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    write_header(f, "P5", int(gray.cols()), int(gray.rows()));
    std::vector<unsigned char> row(size_t(gray.cols()));
    for (Eigen::Index y = 0; y < gray.rows(); ++y) {
        for (Eigen::Index x = 0; x < gray.cols(); ++x) {
            double v = std::min(std::max(gray(y, x), 0.0), 1.0);
            row[size_t(x)] = (unsigned char)std::lround(v * 255.0);
        }
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!f) throw std::runtime_error("short write on " + path);
}

MaskMat read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    int w = 0, h = 0;
    read_header(f, "P5", w, h);
    MaskMat mask(h, w);
    std::vector<unsigned char> row(size_t(w), 0);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        if (!f) throw std::runtime_error("truncated image " + path);
        for (int x = 0; x < w; ++x) mask(y, x) = row[size_t(x)] >= 128 ? 1 : 0;
    }
    return mask;
}

double bilinear_sample(const Image& img, double y, double x, int ch, double fill) {
    if (y < -0.5 || x < -0.5 || y > img.h - 0.5 || x > img.w - 0.5) return fill;
    double fy = std::floor(y), fx = std::floor(x);
    int y0 = int(fy), x0 = int(fx);
    double ty = y - fy, tx = x - fx;
    auto px = [&](int yy, int xx) {
        if (yy < 0 || xx < 0 || yy >= img.h || xx >= img.w) return fill;
        return img.at(yy, xx, ch);
    };
    return (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
           ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
}

double bilinear_sample_mask(const MaskMat& m, double y, double x) {
    if (y < -0.5 || x < -0.5 || y > double(m.rows()) - 0.5 || x > double(m.cols()) - 0.5)
        return 0.0;
    double fy = std::floor(y), fx = std::floor(x);
    int y0 = int(fy), x0 = int(fx);
    double ty = y - fy, tx = x - fx;
    auto px = [&](int yy, int xx) -> double {
        if (yy < 0 || xx < 0 || yy >= m.rows() || xx >= m.cols()) return 0.0;
        return double(m(yy, xx));
    };
    return (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
           ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
}

}  // namespace zsad
