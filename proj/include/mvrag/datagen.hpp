#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mvrag/image.hpp"
#include "mvrag/rng.hpp"

namespace mvrag {

enum class ObjShape { Cube, Sphere, Cylinder, Cone, Pyramid };
enum class Marking { None, Stripe, Dot, Checker };

struct Rgb {
    double r, g, b;
};

// Named color palette used by captions; hues are well separated so hue-based
// oracles are unambiguous.
struct PaletteEntry {
    const char* name;
    Rgb rgb;
};
const std::vector<PaletteEntry>& palette();
int palette_size();

const char* shape_name(ObjShape s);
const char* marking_name(Marking m);

// One synthetic object class. Caption and id are deterministic functions of
// the fields; marking None canonicalizes marking_color to the base color.
struct ToyObjectSpec {
    ObjShape shape = ObjShape::Cube;
    int color = 0;          // palette index
    Marking marking = Marking::None;
    int marking_color = 0;  // palette index

    std::string caption() const;
    std::string id() const;
    Rgb base_rgb() const;
    Rgb marking_rgb() const;

    static ToyObjectSpec from_id(const std::string& id);
    bool operator==(const ToyObjectSpec& o) const = default;
};

struct CameraPose {
    double azimuth_deg = 0;
    double elevation_deg = 0;
    std::array<double, 3> center{};    // on the unit sphere
    std::array<double, 9> rotation{};  // row-major 3x3, rows = right/up/forward

    static CameraPose from_angles(double azimuth_deg, double elevation_deg);
    // Flattened 3x4 extrinsic: rotation rows followed by the center column.
    std::array<double, 12> extrinsic() const;
};

// Four views at base, base+90, base+180, base+270 sharing one elevation.
// Elevation must lie in [-5, 30] degrees.
std::vector<CameraPose> orthogonal_poses(double base_azimuth_deg, double elevation_deg);

// Flat-shaded SDF render with a marking texture; empty background is a
// uniform gray in [0.4, 0.6] drawn from rng. size must be 32 or 64.
Image render(const ToyObjectSpec& spec, const CameraPose& pose, int size, Rng& rng);

// The retrieval-variance augmentation stack. Each stage fires independently
// with probability `prob`; values clamped back to [0,1].
Image augment(const Image& img, Rng& rng, double prob = 0.5);

// k clean renders from random poses (uniform azimuth, elevation in range),
// each passed through augment(). k in [1, 4].
std::vector<Image> simulate_retrieval_views(const ToyObjectSpec& spec, int k, uint64_t seed,
                                            int size = 32, double aug_prob = 0.5);

// --------------------------------------------------------------------------
// corpus
// --------------------------------------------------------------------------

struct CorpusRecord {
    std::string id;
    std::string caption;
    std::string image;  // path relative to the corpus directory
};

struct Corpus {
    std::vector<CorpusRecord> records;
    std::vector<Image> images;  // aligned with records when loaded/built in memory
    std::string dir;            // set when tied to a directory

    const Image& image_of(size_t idx) const { return images.at(idx); }
};

// One ToyObjectSpec per class; images_per_class posed+augmented renders each.
// Throws if images_per_class < k_cond + 1.
Corpus build_2d_corpus(const std::vector<ToyObjectSpec>& classes, int images_per_class,
                       uint64_t seed, int image_size = 32, int k_cond = 4);

void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir, bool load_images = true);

// --------------------------------------------------------------------------
// spec universe and OOD split
// --------------------------------------------------------------------------

// Deterministic sample of `count` distinct specs from the full cross product.
std::vector<ToyObjectSpec> sample_spec_universe(int count, uint64_t seed);

// Held-out combinations never seen in base pretraining but present in the
// retrieval corpus. Holdout is grouped by (color, shape) cells so held-out
// combinations are compositionally far from the training set.
std::pair<std::vector<ToyObjectSpec>, std::vector<ToyObjectSpec>> make_ood_split(
    const std::vector<ToyObjectSpec>& all, double holdout_fraction, uint64_t seed);

void write_split(const std::vector<ToyObjectSpec>& specs, const std::string& path);
std::vector<ToyObjectSpec> read_split(const std::string& path);

// --------------------------------------------------------------------------
// training batches
// --------------------------------------------------------------------------

enum class BatchMode { Mode3D, Mode2D };

// One training sample (one prompt). Mode3D carries N=4 targets and poses;
// Mode2D carries a single held-out target and no poses.
struct TrainingSample {
    BatchMode mode = BatchMode::Mode3D;
    std::string prompt;
    std::vector<Image> conditioning;
    std::vector<Image> targets;
    std::vector<CameraPose> poses;
};

inline constexpr int kNumViews = 4;
inline constexpr const char* kAssetSuffix = ", 3d asset";

TrainingSample make_3d_sample(const ToyObjectSpec& spec, int k_cond, uint64_t seed,
                              int image_size = 32);
// class_start/class_len delimit one class's records inside the corpus.
TrainingSample make_2d_sample(const Corpus& corpus, size_t class_start, size_t class_len,
                              int k_cond, uint64_t seed);

}  // namespace mvrag
