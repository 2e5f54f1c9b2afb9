#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvrag/datagen.hpp"
#include "mvrag/metrics.hpp"
#include "testutil.hpp"

using namespace mvrag;

namespace {

// Direct-formula reference SSIM, written independently of the implementation:
// per 8x8 window, straight loops over the definition.
double ssim_reference(const Image& a, const Image& b) {
    constexpr int W = 8;
    const double C1 = 0.0001, C2 = 0.0009;
    auto lum = [](const Image& img, int y, int x) {
        return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    };
    double total = 0;
    int count = 0;
    for (int y0 = 0; y0 + W <= a.height; ++y0)
        for (int x0 = 0; x0 + W <= a.width; ++x0) {
            double ma = 0, mb = 0;
            for (int y = 0; y < W; ++y)
                for (int x = 0; x < W; ++x) {
                    ma += lum(a, y0 + y, x0 + x);
                    mb += lum(b, y0 + y, x0 + x);
                }
            ma /= 64.0;
            mb /= 64.0;
            double va = 0, vb = 0, cov = 0;
            for (int y = 0; y < W; ++y)
                for (int x = 0; x < W; ++x) {
                    va += std::pow(lum(a, y0 + y, x0 + x) - ma, 2);
                    vb += std::pow(lum(b, y0 + y, x0 + x) - mb, 2);
                    cov += (lum(a, y0 + y, x0 + x) - ma) * (lum(b, y0 + y, x0 + x) - mb);
                }
            va /= 63.0;
            vb /= 63.0;
            cov /= 63.0;
            total += ((2 * ma * mb + C1) * (2 * cov + C2)) /
                     ((ma * ma + mb * mb + C1) * (va + vb + C2));
            ++count;
        }
    return total / count;
}

Image random_image(int side, uint64_t seed) {
    Rng rng(seed);
    Image img(side, side);
    for (auto& v : img.pix) v = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("psnr: cap, arithmetic, formula oracle, symmetry") {
    Image a = random_image(32, 3);
    CHECK(psnr(a, a) == 99.0);

    Image half(32, 32), zero(32, 32);
    for (auto& v : half.pix) v = 0.5;
    CHECK(psnr(half, zero) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-12));

    Image b = random_image(32, 4);
    double mse = 0;
    for (size_t i = 0; i < a.pix.size(); ++i) mse += (a.pix[i] - b.pix[i]) * (a.pix[i] - b.pix[i]);
    mse /= a.pix.size();
    CHECK(std::abs(psnr(a, b) - 10.0 * std::log10(1.0 / mse)) < 1e-9);
    CHECK(psnr(a, b) == psnr(b, a));

    Image wrong(16, 16);
    CHECK_THROWS_AS(psnr(a, wrong), std::invalid_argument);
}

TEST_CASE("ssim: identity, negation ordering, reference oracle, symmetry") {
    Image a = random_image(32, 5);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    // image vs its negation on a pattern avoiding mid-gray
    Rng rng(9);
    Image pat(32, 32);
    for (auto& v : pat.pix) v = rng.bernoulli(0.5) ? 0.9 : 0.1;
    Image neg = pat;
    for (auto& v : neg.pix) v = 1.0 - v;
    CHECK(ssim(pat, neg) < 1.0);

    // five fixed pairs against the independent reference
    for (uint64_t seed : {10ull, 11ull, 12ull, 13ull, 14ull}) {
        Image x = random_image(32, seed);
        Image y = random_image(32, seed + 100);
        CHECK(std::abs(ssim(x, y) - ssim_reference(x, y)) < 1e-6);
        CHECK(ssim(x, y) == ssim(y, x));
    }

    Image tiny(4, 4);
    CHECK_THROWS_AS(ssim(tiny, tiny), std::invalid_argument);
}

TEST_CASE("ssim distinguishes renders better than chance") {
    Rng r1(3), r2(3), r3(4);
    auto specs = sample_spec_universe(2, 8);
    Image v1 = render(specs[0], CameraPose::from_angles(0, 10), 32, r1);
    Image v1b = render(specs[0], CameraPose::from_angles(0, 10), 32, r2);
    Image v2 = render(specs[1], CameraPose::from_angles(0, 10), 32, r3);
    CHECK(ssim(v1, v1b) > ssim(v1, v2));
}

TEST_CASE("dominant hue tracks the render color") {
    for (int c = 0; c < palette_size(); ++c) {
        ToyObjectSpec spec{ObjShape::Sphere, c, Marking::None, c};
        Rng rng(7);
        Image img = render(spec, CameraPose::from_angles(20, 10), 32, rng);
        const Rgb rgb = spec.base_rgb();
        CHECK_MESSAGE(hue_matches_color(img, rgb.r, rgb.g, rgb.b), palette()[c].name);
    }
    // gray image has no dominant hue
    Image gray(32, 32);
    for (auto& v : gray.pix) v = 0.5;
    double h;
    CHECK(!dominant_hue(gray, h));
}

TEST_CASE("median and mean") {
    CHECK(median({3, 1, 2}) == 2.0);
    CHECK(median({4, 1, 2, 3}) == 2.5);
    CHECK(mean({1, 2, 3}) == doctest::Approx(2.0));
    CHECK_THROWS_AS(median({}), std::invalid_argument);
}
