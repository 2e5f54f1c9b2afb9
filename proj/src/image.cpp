#include "mvrag/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace mvrag {

void Image::clamp01() {
    for (auto& v : pix) v = std::min(1.0, std::max(0.0, v));
}

double Image::fraction_pixels_differing(const Image& other, double tol) const {
    if (height != other.height || width != other.width)
        throw std::invalid_argument("fraction_pixels_differing: size mismatch");
    size_t diff = 0;
    const size_t n = static_cast<size_t>(height) * width;
    for (size_t p = 0; p < n; ++p) {
        for (int c = 0; c < 3; ++c) {
            if (std::abs(pix[p * 3 + c] - other.pix[p * 3 + c]) > tol) {
                ++diff;
                break;
            }
        }
    }
    return static_cast<double>(diff) / static_cast<double>(n);
}

double Image::mean_abs_diff(const Image& other) const {
    if (pix.size() != other.pix.size())
        throw std::invalid_argument("mean_abs_diff: size mismatch");
    double s = 0;
    for (size_t i = 0; i < pix.size(); ++i) s += std::abs(pix[i] - other.pix[i]);
    return s / static_cast<double>(pix.size());
}

Tensor Image::to_tensor() const {
    return Tensor({height, width, 3}, std::vector<double>(pix.begin(), pix.end()));
}

Image Image::from_tensor(const Tensor& t) {
    auto s = t.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3 || s[2] != 3)
        throw std::invalid_argument("Image::from_tensor: expected [H,W,3], got " + shape_str(t.shape()));
    Image img(s[0], s[1]);
    img.pix.assign(t.data().begin(), t.data().end());
    return img;
}

void write_png(const std::string& path, const Image& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: libpng error on " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::min(1.0, std::max(0.0, img.at(y, x, c)));
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: corrupt or unreadable PNG " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int w = static_cast<int>(png_get_image_width(png, info));
    if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: unexpected channel layout in " + path);
    }
    Image img(h, w);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

Image hstack(const std::vector<Image>& imgs) {
    if (imgs.empty()) throw std::invalid_argument("hstack: empty list");
    const int h = imgs[0].height, w = imgs[0].width;
    Image out(h, w * static_cast<int>(imgs.size()));
    for (size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].height != h || imgs[i].width != w)
            throw std::invalid_argument("hstack: size mismatch");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    out.at(y, static_cast<int>(i) * w + x, c) = imgs[i].at(y, x, c);
    }
    return out;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0;
    if (d <= 0) {
        h = 0;
        return;
    }
    if (mx == r) h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = 60.0 * ((b - r) / d + 2.0);
    else h = 60.0 * ((r - g) / d + 4.0);
    if (h < 0) h += 360.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = std::fmod(h, 360.0);
    if (h < 0) h += 360.0;
    const double c = v * s;
    const double x = c * (1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0));
    const double m = v - c;
    double rp, gp, bp;
    if (h < 60) { rp = c; gp = x; bp = 0; }
    else if (h < 120) { rp = x; gp = c; bp = 0; }
    else if (h < 180) { rp = 0; gp = c; bp = x; }
    else if (h < 240) { rp = 0; gp = x; bp = c; }
    else if (h < 300) { rp = x; gp = 0; bp = c; }
    else { rp = c; gp = 0; bp = x; }
    r = rp + m;
    g = gp + m;
    b = bp + m;
}

void sample_bilinear(const Image& img, double y, double x, double out[3]) {
    const double yc = std::min(static_cast<double>(img.height - 1), std::max(0.0, y));
    const double xc = std::min(static_cast<double>(img.width - 1), std::max(0.0, x));
    const int y0 = static_cast<int>(std::floor(yc));
    const int x0 = static_cast<int>(std::floor(xc));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const int x1 = std::min(x0 + 1, img.width - 1);
    const double fy = yc - y0, fx = xc - x0;
    for (int c = 0; c < 3; ++c) {
        const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
        const double bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
        out[c] = top * (1 - fy) + bot * fy;
    }
}

uint64_t image_checksum(const Image& img) {
    // Checksum over the 8-bit quantized pixels so PNG round trips agree.
    std::vector<uint8_t> q(img.pix.size());
    for (size_t i = 0; i < img.pix.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, img.pix[i]));
        q[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return fnv1a64(q.data(), q.size());
}

}  // namespace mvrag
