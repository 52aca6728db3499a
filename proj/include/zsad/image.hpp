#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace zsad {

// Planar float image, values in [0,1], channel-major storage.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;  // size h*w*c, index = (ch*h + y)*w + x

    Image() = default;
    Image(int height, int width, int channels, double fill = 0.0)
        : h(height), w(width), c(channels),
          data(size_t(height) * width * channels, fill) {}

    double& at(int y, int x, int ch) { return data[(size_t(ch) * h + y) * w + x]; }
    double at(int y, int x, int ch) const { return data[(size_t(ch) * h + y) * w + x]; }

    // snaps every value to the 8-bit grid k/255 so in-memory and on-disk
    // pipelines see identical pixels
    void quantize8();
    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

using MaskMat = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// 8-bit binary PPM (P6) / PGM (P5) round-trip; images quantized on write.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const MaskMat& mask);        // 0/255
void write_pgm_gray(const std::string& path, const Eigen::MatrixXd& gray);  // [0,1]
MaskMat read_pgm(const std::string& path);

// Samples img at real coordinates with bilinear interpolation; out-of-frame
// reads return `fill`.
double bilinear_sample(const Image& img, double y, double x, int ch, double fill);
double bilinear_sample_mask(const MaskMat& m, double y, double x);

}  // namespace zsad
