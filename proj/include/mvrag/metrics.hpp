#pragma once

#include <vector>

#include "mvrag/image.hpp"

namespace mvrag {

inline constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE) on [0,1] images; identical images return the 99 dB cap.
double psnr(const Image& a, const Image& b);

// Mean local SSIM over sliding 8x8 luminance windows, C1=(0.01)^2,
// C2=(0.03)^2 on unit range. Images must be at least 8x8.
double ssim(const Image& a, const Image& b);

// Dominant hue (degrees) over sufficiently saturated pixels; returns false
// when no pixel qualifies.
bool dominant_hue(const Image& img, double& hue_out, double min_saturation = 0.2);

// Circular hue distance in degrees.
double hue_distance(double a, double b);

// True when the dominant hue of the image is within tol degrees of the hue
// of the given color.
bool hue_matches_color(const Image& img, double r, double g, double b, double tol_deg = 45.0);

double median(std::vector<double> xs);
double mean(const std::vector<double>& xs);

}  // namespace mvrag
