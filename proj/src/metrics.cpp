#include "mvrag/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvrag {

double psnr(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("psnr: shape mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.pix.size(); ++i) {
        const double d = a.pix[i] - b.pix[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.pix.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

std::vector<double> luminance(const Image& img) {
    std::vector<double> y(static_cast<size_t>(img.height) * img.width);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            y[static_cast<size_t>(r) * img.width + c] =
                0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
    return y;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("ssim: shape mismatch");
    constexpr int W = 8;
    if (a.height < W || a.width < W)
        throw std::invalid_argument("ssim: image smaller than the 8x8 window");
    const auto ya = luminance(a);
    const auto yb = luminance(b);
    constexpr double C1 = 0.01 * 0.01;
    constexpr double C2 = 0.03 * 0.03;
    const int H = a.height, Wd = a.width;
    double total = 0;
    int count = 0;
    for (int y0 = 0; y0 + W <= H; ++y0)
        for (int x0 = 0; x0 + W <= Wd; ++x0) {
            double ma = 0, mb = 0;
            for (int y = 0; y < W; ++y)
                for (int x = 0; x < W; ++x) {
                    ma += ya[static_cast<size_t>(y0 + y) * Wd + x0 + x];
                    mb += yb[static_cast<size_t>(y0 + y) * Wd + x0 + x];
                }
            const double n = W * W;
            ma /= n;
            mb /= n;
            double va = 0, vb = 0, cov = 0;
            for (int y = 0; y < W; ++y)
                for (int x = 0; x < W; ++x) {
                    const double da = ya[static_cast<size_t>(y0 + y) * Wd + x0 + x] - ma;
                    const double db = yb[static_cast<size_t>(y0 + y) * Wd + x0 + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n - 1;
            vb /= n - 1;
            cov /= n - 1;
            const double s = ((2 * ma * mb + C1) * (2 * cov + C2)) /
                             ((ma * ma + mb * mb + C1) * (va + vb + C2));
            total += s;
            ++count;
        }
    return total / count;
}

bool dominant_hue(const Image& img, double& hue_out, double min_saturation) {
    // circular mean over saturated pixels
    double sx = 0, sy = 0;
    int n = 0;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            double h, s, v;
            rgb_to_hsv(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2), h, s, v);
            if (s < min_saturation || v < 0.1) continue;
            const double rad = h * 0.017453292519943295;
            sx += std::cos(rad);
            sy += std::sin(rad);
            ++n;
        }
    if (n == 0) return false;
    double h = std::atan2(sy, sx) / 0.017453292519943295;
    if (h < 0) h += 360.0;
    hue_out = h;
    return true;
}

double hue_distance(double a, double b) {
    double d = std::fmod(std::abs(a - b), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

bool hue_matches_color(const Image& img, double r, double g, double b, double tol_deg) {
    double h, s, v, hue;
    rgb_to_hsv(r, g, b, h, s, v);
    if (!dominant_hue(img, hue)) return false;
    return hue_distance(hue, h) <= tol_deg;
}

double median(std::vector<double> xs) {
    if (xs.empty()) throw std::invalid_argument("median: empty");
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double mean(const std::vector<double>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean: empty");
    double s = 0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

}  // namespace mvrag
