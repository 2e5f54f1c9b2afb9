#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "mvrag/datagen.hpp"
#include "testutil.hpp"

using namespace mvrag;
using namespace mvrag::testing;
namespace fs = std::filesystem;

namespace {
ToyObjectSpec make_spec(ObjShape sh, int c, Marking m, int mc) { return {sh, c, m, mc}; }
}

TEST_CASE("caption is deterministic and templated") {
    auto s = make_spec(ObjShape::Pyramid, 4, Marking::Stripe, 0);
    CHECK(s.caption() == "a cyan pyramid with a red stripe");
    auto plain = make_spec(ObjShape::Cube, 0, Marking::None, 3);
    CHECK(plain.caption() == "a red cube");
    CHECK(ToyObjectSpec::from_id(s.id()) == s);
}

TEST_CASE("camera pose invariants") {
    for (double az : {0.0, 37.0, 200.0})
        for (double el : {-5.0, 0.0, 12.5, 30.0}) {
            auto p = CameraPose::from_angles(az, el);
            double n = 0;
            for (double c : p.center) n += c * c;
            CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
            // R^T R = I
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    double d = 0;
                    for (int k = 0; k < 3; ++k) d += p.rotation[k * 3 + i] * p.rotation[k * 3 + j];
                    CHECK(std::abs(d - (i == j ? 1.0 : 0.0)) < 1e-9);
                }
        }
}

TEST_CASE("orthogonal poses geometry") {
    auto poses = orthogonal_poses(0.0, 0.0);
    REQUIRE(poses.size() == 4);
    const double expect[4][3] = {{1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}};
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c) CHECK(std::abs(poses[i].center[c] - expect[i][c]) < 1e-9);

    // pairwise dots at elevation 0: orthogonal or antipodal
    for (double base : {0.0, 33.0, 123.4}) {
        auto ps = orthogonal_poses(base, 0.0);
        int antipodal = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j) {
                double d = 0;
                for (int c = 0; c < 3; ++c) d += ps[i].center[c] * ps[j].center[c];
                if (std::abs(d + 1.0) < 1e-9) ++antipodal;
                else CHECK(std::abs(d) < 1e-9);
            }
        CHECK(antipodal == 2);
    }

    auto elevated = orthogonal_poses(10.0, 30.0);
    for (const auto& p : elevated) CHECK(std::abs(p.center[2] - 0.5) < 1e-9);

    CHECK_THROWS_AS(orthogonal_poses(0.0, 45.0), std::invalid_argument);
    CHECK_THROWS_AS(orthogonal_poses(0.0, -10.0), std::invalid_argument);
}

TEST_CASE("sphere without marking looks identical from any azimuth up to background") {
    auto spec = make_spec(ObjShape::Sphere, 2, Marking::None, 2);
    Rng r1(7), r2(7);
    Image front = render(spec, CameraPose::from_angles(0, 10), 32, r1);
    Image back = render(spec, CameraPose::from_angles(180, 10), 32, r2);
    // same background seed, so images should match everywhere
    CHECK(front.mean_abs_diff(back) < 1e-9);
}

TEST_CASE("marked objects are distinguishable front vs back") {
    // the render invariant: front and back differ in >= 1% of pixels
    for (ObjShape sh : {ObjShape::Cube, ObjShape::Sphere, ObjShape::Cylinder, ObjShape::Cone,
                        ObjShape::Pyramid})
        for (Marking m : {Marking::Stripe, Marking::Dot, Marking::Checker}) {
            auto spec = make_spec(sh, 1, m, 3);
            Rng r1(5), r2(5);
            Image front = render(spec, CameraPose::from_angles(0, 10), 32, r1);
            Image back = render(spec, CameraPose::from_angles(180, 10), 32, r2);
            CHECK_MESSAGE(front.fraction_pixels_differing(back, 1e-6) >= 0.01,
                          shape_name(sh), "+", marking_name(m));
        }
}

TEST_CASE("cube with stripe differs between azimuth 0 and 90") {
    auto spec = make_spec(ObjShape::Cube, 0, Marking::Stripe, 2);
    Rng r1(9), r2(9);
    Image a = render(spec, CameraPose::from_angles(0, 5), 32, r1);
    Image b = render(spec, CameraPose::from_angles(90, 5), 32, r2);
    CHECK(a.fraction_pixels_differing(b, 1e-6) > 0.0);
}

TEST_CASE("render golden checksum is stable") {
    auto spec = make_spec(ObjShape::Cone, 3, Marking::Checker, 5);
    Rng rng(7);
    Image img = render(spec, CameraPose::from_angles(45, 15), 32, rng);
    // golden value recorded from the first run of this renderer
    CHECK(image_checksum(img) == 0xfaf7b34487bf6772ull);
}

TEST_CASE("render rejects bad sizes") {
    Rng rng(1);
    CHECK_THROWS_AS(render(make_spec(ObjShape::Cube, 0, Marking::None, 0),
                           CameraPose::from_angles(0, 0), 17, rng),
                    std::invalid_argument);
}

TEST_CASE("background gray stays in range and is uniform") {
    for (uint64_t seed : {1ull, 2ull, 3ull, 99ull}) {
        Rng rng(seed);
        Image img = render(make_spec(ObjShape::Sphere, 0, Marking::None, 0),
                           CameraPose::from_angles(0, 0), 32, rng);
        const double bg = img.at(0, 0, 0);
        CHECK(bg >= 0.4);
        CHECK(bg <= 0.6);
        CHECK(img.at(0, 0, 1) == bg);
        CHECK(img.at(31, 31, 2) == bg);
    }
}

TEST_CASE("augmentations disabled yield clean renders; enabled stay in range") {
    auto spec = make_spec(ObjShape::Cylinder, 6, Marking::Dot, 1);
    auto clean = simulate_retrieval_views(spec, 4, 11, 32, 0.0);
    REQUIRE(clean.size() == 4);
    // prob 0: identical to the raw renders from the same derived streams
    for (int i = 0; i < 4; ++i) {
        Rng rng = sample_rng(11, "retrieval_view", i);
        const double az = rng.uniform(0.0, 360.0);
        const double el = rng.uniform(-5.0, 30.0);
        Image raw = render(spec, CameraPose::from_angles(az, el), 32, rng);
        CHECK(clean[i].mean_abs_diff(raw) == 0.0);
    }

    auto augd = simulate_retrieval_views(spec, 4, 11, 32, 1.0);
    bool any_diff = false;
    for (int i = 0; i < 4; ++i) {
        for (double v : augd[i].pix) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        if (augd[i].mean_abs_diff(clean[i]) > 0.0) any_diff = true;
    }
    CHECK(any_diff);
    CHECK_THROWS_AS(simulate_retrieval_views(spec, 5, 1), std::invalid_argument);
}

TEST_CASE("2d corpus counting, determinism, no pose metadata") {
    auto classes = sample_spec_universe(10, 21);
    auto corpus = build_2d_corpus(classes, 5, 33, 32, 4);
    CHECK(corpus.records.size() == 50);
    auto corpus2 = build_2d_corpus(classes, 5, 33, 32, 4);
    for (size_t i = 0; i < corpus.records.size(); ++i) {
        CHECK(corpus.records[i].id == corpus2.records[i].id);
        CHECK(corpus.images[i].mean_abs_diff(corpus2.images[i]) == 0.0);
    }
    CHECK_THROWS_AS(build_2d_corpus(classes, 4, 33, 32, 4), std::invalid_argument);

    // round trip through disk: manifest has exactly id/caption/image
    const std::string dir = "/tmp/mvrag_test_corpus";
    fs::remove_all(dir);
    write_corpus(corpus, dir);
    auto loaded = load_corpus(dir);
    REQUIRE(loaded.records.size() == corpus.records.size());
    for (size_t i = 0; i < loaded.records.size(); ++i) {
        CHECK(loaded.records[i].caption == corpus.records[i].caption);
        // 8-bit quantization on write: allow one LSB
        CHECK(loaded.images[i].mean_abs_diff(corpus.images[i]) < 1.0 / 255.0);
    }
    fs::remove_all(dir);
}

TEST_CASE("ood split: exact sizes, disjoint, deterministic, corpus coverage") {
    auto all = sample_spec_universe(100, 77);
    auto [in_domain, ood] = make_ood_split(all, 0.2, 5);
    CHECK(in_domain.size() == 80);
    CHECK(ood.size() == 20);
    std::set<std::string> in_ids, ood_ids;
    for (const auto& s : in_domain) in_ids.insert(s.id());
    for (const auto& s : ood) ood_ids.insert(s.id());
    for (const auto& id : ood_ids) CHECK(in_ids.count(id) == 0);

    auto [in2, ood2] = make_ood_split(all, 0.2, 5);
    CHECK(in2.size() == in_domain.size());
    for (size_t i = 0; i < ood.size(); ++i) CHECK(ood2[i] == ood[i]);

    CHECK_THROWS_AS(make_ood_split(all, 0.0, 5), std::invalid_argument);
    CHECK_THROWS_AS(make_ood_split(all, 0.6, 5), std::invalid_argument);

    // every ood spec can be given >= K corpus images by construction
    auto corpus = build_2d_corpus(ood, 5, 3, 32, 4);
    CHECK(corpus.records.size() == ood.size() * 5);
}

TEST_CASE("mode invariants of training samples") {
    auto spec = make_spec(ObjShape::Pyramid, 2, Marking::Stripe, 0);
    auto s3 = make_3d_sample(spec, 4, 42);
    CHECK(s3.mode == BatchMode::Mode3D);
    CHECK(s3.targets.size() == 4);
    CHECK(s3.poses.size() == 4);
    CHECK(s3.conditioning.size() == 4);
    CHECK(s3.prompt == spec.caption() + std::string(", 3d asset"));

    auto corpus = build_2d_corpus({spec}, 6, 9, 32, 4);
    auto s2 = make_2d_sample(corpus, 0, 6, 4, 43);
    CHECK(s2.mode == BatchMode::Mode2D);
    CHECK(s2.targets.size() == 1);
    CHECK(s2.poses.empty());
    CHECK(s2.conditioning.size() == 4);
    CHECK(s2.prompt == spec.caption());
    // conditioning + target are distinct corpus entries
}

TEST_CASE("split files round trip") {
    auto all = sample_spec_universe(12, 3);
    const std::string path = "/tmp/mvrag_test_split/in.txt";
    write_split(all, path);
    auto back = read_split(path);
    REQUIRE(back.size() == all.size());
    for (size_t i = 0; i < all.size(); ++i) CHECK(back[i] == all[i]);
    fs::remove_all("/tmp/mvrag_test_split");
}
