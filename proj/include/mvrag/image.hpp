#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvrag/tensor.hpp"

namespace mvrag {

// Small RGB image, values in [0,1], channels-last row-major (same layout the
// tensor ops use).
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pix;  // height*width*3

    Image() = default;
    Image(int h, int w) : height(h), width(w), pix(static_cast<size_t>(h) * w * 3, 0.0) {}

    double& at(int y, int x, int c) { return pix[((static_cast<size_t>(y) * width) + x) * 3 + c]; }
    double at(int y, int x, int c) const {
        return pix[((static_cast<size_t>(y) * width) + x) * 3 + c];
    }
    size_t numel() const { return pix.size(); }

    void clamp01();
    // Fraction of pixels differing from other by more than tol in any channel.
    double fraction_pixels_differing(const Image& other, double tol = 1e-9) const;
    double mean_abs_diff(const Image& other) const;

    Tensor to_tensor() const;                       // [H, W, 3]
    static Image from_tensor(const Tensor& t);      // accepts [H,W,3] or [1,H,W,3]
};

// 8-bit PNG round trip. Writing quantizes to 8 bits; reading maps back to
// [0,1]. Throws std::runtime_error on I/O or format problems.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Horizontal strip of equally sized images (grid output for sampled views).
Image hstack(const std::vector<Image>& imgs);

// Color space helpers; h in [0,360), s,v in [0,1].
void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v);
void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b);

// Bilinear sample with clamp-to-edge; x,y in pixel coordinates.
void sample_bilinear(const Image& img, double y, double x, double out[3]);

uint64_t image_checksum(const Image& img);

}  // namespace mvrag
