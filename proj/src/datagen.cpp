#include "mvrag/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mvrag {

// ---------------------------------------------------------------------------
// palette / naming
// ---------------------------------------------------------------------------

const std::vector<PaletteEntry>& palette() {
    static const std::vector<PaletteEntry> p = {
        {"red", {0.85, 0.10, 0.10}},     {"green", {0.10, 0.70, 0.15}},
        {"blue", {0.12, 0.25, 0.90}},    {"yellow", {0.92, 0.85, 0.05}},
        {"cyan", {0.05, 0.80, 0.85}},    {"magenta", {0.85, 0.10, 0.80}},
        {"orange", {0.95, 0.55, 0.05}},  {"purple", {0.50, 0.15, 0.80}},
    };
    return p;
}

int palette_size() { return static_cast<int>(palette().size()); }

const char* shape_name(ObjShape s) {
    switch (s) {
        case ObjShape::Cube: return "cube";
        case ObjShape::Sphere: return "sphere";
        case ObjShape::Cylinder: return "cylinder";
        case ObjShape::Cone: return "cone";
        case ObjShape::Pyramid: return "pyramid";
    }
    return "?";
}

const char* marking_name(Marking m) {
    switch (m) {
        case Marking::None: return "none";
        case Marking::Stripe: return "stripe";
        case Marking::Dot: return "dot";
        case Marking::Checker: return "checker";
    }
    return "?";
}

namespace {

ObjShape shape_from_name(const std::string& s) {
    for (ObjShape v : {ObjShape::Cube, ObjShape::Sphere, ObjShape::Cylinder, ObjShape::Cone,
                       ObjShape::Pyramid})
        if (s == shape_name(v)) return v;
    throw std::invalid_argument("unknown shape name: " + s);
}

Marking marking_from_name(const std::string& s) {
    for (Marking v : {Marking::None, Marking::Stripe, Marking::Dot, Marking::Checker})
        if (s == marking_name(v)) return v;
    throw std::invalid_argument("unknown marking name: " + s);
}

int color_from_name(const std::string& s) {
    const auto& p = palette();
    for (size_t i = 0; i < p.size(); ++i)
        if (s == p[i].name) return static_cast<int>(i);
    throw std::invalid_argument("unknown color name: " + s);
}

}  // namespace

std::string ToyObjectSpec::caption() const {
    std::string c = "a ";
    c += palette()[color].name;
    c += " ";
    c += shape_name(shape);
    if (marking != Marking::None) {
        c += " with a ";
        c += palette()[marking_color].name;
        c += " ";
        c += marking_name(marking);
    }
    return c;
}

std::string ToyObjectSpec::id() const {
    std::string s = shape_name(shape);
    s += "-";
    s += palette()[color].name;
    s += "-";
    s += marking_name(marking);
    s += "-";
    s += palette()[marking == Marking::None ? color : marking_color].name;
    return s;
}

Rgb ToyObjectSpec::base_rgb() const { return palette()[color].rgb; }
Rgb ToyObjectSpec::marking_rgb() const { return palette()[marking_color].rgb; }

ToyObjectSpec ToyObjectSpec::from_id(const std::string& id) {
    std::vector<std::string> parts;
    std::stringstream ss(id);
    std::string tok;
    while (std::getline(ss, tok, '-')) parts.push_back(tok);
    if (parts.size() != 4) throw std::invalid_argument("bad spec id: " + id);
    ToyObjectSpec spec;
    spec.shape = shape_from_name(parts[0]);
    spec.color = color_from_name(parts[1]);
    spec.marking = marking_from_name(parts[2]);
    spec.marking_color = spec.marking == Marking::None ? spec.color : color_from_name(parts[3]);
    return spec;
}

// ---------------------------------------------------------------------------
// camera
// ---------------------------------------------------------------------------

namespace {
constexpr double kDegToRad = 0.017453292519943295;

std::array<double, 3> cross3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

void normalize3(std::array<double, 3>& v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (auto& x : v) x /= n;
}
}  // namespace

CameraPose CameraPose::from_angles(double azimuth_deg, double elevation_deg) {
    CameraPose p;
    p.azimuth_deg = azimuth_deg;
    p.elevation_deg = elevation_deg;
    const double a = azimuth_deg * kDegToRad;
    const double e = elevation_deg * kDegToRad;
    p.center = {std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e)};
    std::array<double, 3> fwd = {-p.center[0], -p.center[1], -p.center[2]};
    std::array<double, 3> world_up = {0, 0, 1};
    std::array<double, 3> right = cross3(fwd, world_up);
    normalize3(right);
    std::array<double, 3> up = cross3(right, fwd);
    normalize3(up);
    for (int i = 0; i < 3; ++i) {
        p.rotation[i] = right[i];
        p.rotation[3 + i] = up[i];
        p.rotation[6 + i] = fwd[i];
    }
    return p;
}

std::array<double, 12> CameraPose::extrinsic() const {
    std::array<double, 12> e{};
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) e[r * 4 + c] = rotation[r * 3 + c];
        e[r * 4 + 3] = center[r];
    }
    return e;
}

std::vector<CameraPose> orthogonal_poses(double base_azimuth_deg, double elevation_deg) {
    if (elevation_deg < -5.0 || elevation_deg > 30.0)
        throw std::invalid_argument("orthogonal_poses: elevation " + std::to_string(elevation_deg) +
                                    " outside [-5, 30] degrees");
    std::vector<CameraPose> poses;
    for (int i = 0; i < 4; ++i) {
        double az = std::fmod(base_azimuth_deg + 90.0 * i, 360.0);
        if (az < 0) az += 360.0;
        poses.push_back(CameraPose::from_angles(az, elevation_deg));
    }
    return poses;
}

// ---------------------------------------------------------------------------
// SDF renderer
// ---------------------------------------------------------------------------

namespace {

struct Vec3 {
    double x, y, z;
};

double sdf(const ToyObjectSpec& spec, const Vec3& p) {
    switch (spec.shape) {
        case ObjShape::Sphere:
            return std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z) - 0.62;
        case ObjShape::Cube: {
            const double h = 0.48;
            const double dx = std::abs(p.x) - h, dy = std::abs(p.y) - h, dz = std::abs(p.z) - h;
            return std::max({dx, dy, dz});
        }
        case ObjShape::Cylinder: {
            const double rho = std::sqrt(p.x * p.x + p.y * p.y);
            return std::max(rho - 0.45, std::abs(p.z) - 0.55);
        }
        case ObjShape::Cone: {
            // apex (0, +0.60), base radius 0.55 at z = -0.55
            const double rho = std::sqrt(p.x * p.x + p.y * p.y);
            const double apex_z = 0.60, base_z = -0.55, base_r = 0.55;
            // outward normal of the slanted line in (rho, z) space
            const double len = std::sqrt((apex_z - base_z) * (apex_z - base_z) + base_r * base_r);
            const double nr = (apex_z - base_z) / len, nz = base_r / len;
            const double lateral = nr * rho + nz * (p.z - apex_z);
            return std::max(lateral, base_z - p.z);
        }
        case ObjShape::Pyramid: {
            // square base half-width 0.50 at z=-0.50, apex at z=+0.55
            const double apex_z = 0.55, base_z = -0.50, half = 0.50;
            const double len = std::sqrt((apex_z - base_z) * (apex_z - base_z) + half * half);
            const double nr = (apex_z - base_z) / len, nz = half / len;
            const double sx = nr * std::abs(p.x) + nz * (p.z - apex_z);
            const double sy = nr * std::abs(p.y) + nz * (p.z - apex_z);
            return std::max({sx, sy, base_z - p.z});
        }
    }
    return 1e9;
}

Vec3 sdf_normal(const ToyObjectSpec& spec, const Vec3& p) {
    const double h = 1e-5;
    const double dx = sdf(spec, {p.x + h, p.y, p.z}) - sdf(spec, {p.x - h, p.y, p.z});
    const double dy = sdf(spec, {p.x, p.y + h, p.z}) - sdf(spec, {p.x, p.y - h, p.z});
    const double dz = sdf(spec, {p.x, p.y, p.z + h}) - sdf(spec, {p.x, p.y, p.z - h});
    const double n = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (n < 1e-12) return {0, 0, 1};
    return {dx / n, dy / n, dz / n};
}

// Marking textures in object space; deliberately asymmetric so opposite views
// of a marked object are distinguishable.
bool in_marking(Marking m, const Vec3& p) {
    switch (m) {
        case Marking::None:
            return false;
        case Marking::Stripe:
            return std::abs(p.x + 0.35 * p.y - 0.18) < 0.11;
        case Marking::Dot:
            return std::sin(9.0 * p.x + 1.3) * std::sin(9.0 * p.y + 0.7) *
                       std::sin(9.0 * p.z + 0.9) >
                   0.45;
        case Marking::Checker: {
            const int cx = static_cast<int>(std::floor((p.x + 10.37) * 3.5));
            const int cy = static_cast<int>(std::floor((p.y + 10.11) * 3.5));
            const int cz = static_cast<int>(std::floor((p.z + 10.23) * 3.5));
            return ((cx + cy + cz) & 1) == 0;
        }
    }
    return false;
}

}  // namespace

Image render(const ToyObjectSpec& spec, const CameraPose& pose, int size, Rng& rng) {
    if (size != 32 && size != 64)
        throw std::invalid_argument("render: size must be 32 or 64, got " + std::to_string(size));
    const double bg = rng.uniform(0.4, 0.6);
    Image img(size, size);

    const double* R = pose.rotation.data();
    const Vec3 right{R[0], R[1], R[2]};
    const Vec3 up{R[3], R[4], R[5]};
    const Vec3 fwd{R[6], R[7], R[8]};
    const Vec3 origin{pose.center[0], pose.center[1], pose.center[2]};

    // Camera-attached light so object appearance tracks the viewpoint.
    Vec3 light{0.25 * right.x + 0.45 * up.x - 0.86 * fwd.x,
               0.25 * right.y + 0.45 * up.y - 0.86 * fwd.y,
               0.25 * right.z + 0.45 * up.z - 0.86 * fwd.z};
    {
        const double n = std::sqrt(light.x * light.x + light.y * light.y + light.z * light.z);
        light = {light.x / n, light.y / n, light.z / n};
    }

    const Rgb base = spec.base_rgb();
    const Rgb mark = spec.marking_rgb();

    for (int py = 0; py < size; ++py) {
        for (int px = 0; px < size; ++px) {
            const double u = (2.0 * (px + 0.5) / size - 1.0);
            const double v = (1.0 - 2.0 * (py + 0.5) / size);
            // Orthographic ray: offset in the image plane, direction = forward.
            Vec3 ro{origin.x + u * right.x + v * up.x, origin.y + u * right.y + v * up.y,
                    origin.z + u * right.z + v * up.z};
            double t = 0.0;
            bool hit = false;
            Vec3 p{0, 0, 0};
            for (int step = 0; step < 96; ++step) {
                p = {ro.x + t * fwd.x, ro.y + t * fwd.y, ro.z + t * fwd.z};
                const double d = sdf(spec, p);
                if (d < 1e-4) {
                    hit = true;
                    break;
                }
                t += std::max(d, 1e-3);
                if (t > 3.0) break;
            }
            if (!hit) {
                img.at(py, px, 0) = bg;
                img.at(py, px, 1) = bg;
                img.at(py, px, 2) = bg;
                continue;
            }
            const Vec3 n = sdf_normal(spec, p);
            const double diffuse =
                std::max(0.0, n.x * light.x + n.y * light.y + n.z * light.z);
            const double shade = 0.55 + 0.45 * diffuse;
            const Rgb& col = in_marking(spec.marking, p) ? mark : base;
            img.at(py, px, 0) = std::min(1.0, col.r * shade);
            img.at(py, px, 1) = std::min(1.0, col.g * shade);
            img.at(py, px, 2) = std::min(1.0, col.b * shade);
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// augmentations
// ---------------------------------------------------------------------------

namespace {

// Solve the 8x8 system mapping the unit square corners to the jittered quad;
// returns the 3x3 homography (row-major, h22 = 1).
std::array<double, 9> homography_from_corners(const std::array<std::array<double, 2>, 4>& src,
                                              const std::array<std::array<double, 2>, 4>& dst) {
    double A[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        const double x = src[i][0], y = src[i][1];
        const double X = dst[i][0], Y = dst[i][1];
        double* r1 = A[2 * i];
        double* r2 = A[2 * i + 1];
        r1[0] = x; r1[1] = y; r1[2] = 1; r1[6] = -x * X; r1[7] = -y * X; r1[8] = X;
        r2[3] = x; r2[4] = y; r2[5] = 1; r2[6] = -x * Y; r2[7] = -y * Y; r2[8] = Y;
    }
    // Gaussian elimination with partial pivoting.
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
        std::swap(A[piv], A[col]);
        const double d = A[col][col];
        if (std::abs(d) < 1e-12) throw std::runtime_error("degenerate homography");
        for (int c = col; c < 9; ++c) A[col][c] /= d;
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            const double f = A[r][col];
            for (int c = col; c < 9; ++c) A[r][c] -= f * A[col][c];
        }
    }
    return {A[0][8], A[1][8], A[2][8], A[3][8], A[4][8], A[5][8], A[6][8], A[7][8], 1.0};
}

Image warp_perspective(const Image& img, Rng& rng) {
    const double j = 0.10 * img.width;  // corner jitter <= 10% of side
    std::array<std::array<double, 2>, 4> src = {{{0, 0},
                                                 {double(img.width - 1), 0},
                                                 {double(img.width - 1), double(img.height - 1)},
                                                 {0, double(img.height - 1)}}};
    auto dst = src;
    for (auto& c : dst) {
        c[0] += rng.uniform(-j, j);
        c[1] += rng.uniform(-j, j);
    }
    // Inverse map: output corner -> source corner.
    const auto H = homography_from_corners(dst, src);
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double w = H[6] * x + H[7] * y + H[8];
            const double sx = (H[0] * x + H[1] * y + H[2]) / w;
            const double sy = (H[3] * x + H[4] * y + H[5]) / w;
            double px[3];
            sample_bilinear(img, sy, sx, px);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = px[c];
        }
    return out;
}

Image rotate(const Image& img, Rng& rng) {
    const double theta = rng.uniform(-20.0, 20.0) * kDegToRad;
    const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double sx = cx + ct * dx + st * dy;
            const double sy = cy - st * dx + ct * dy;
            double px[3];
            sample_bilinear(img, sy, sx, px);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = px[c];
        }
    return out;
}

Image resized_crop(const Image& img, Rng& rng) {
    const double scale = rng.uniform(0.7, 1.0);
    const double cw = scale * img.width, ch = scale * img.height;
    const double x0 = rng.uniform(0.0, img.width - cw);
    const double y0 = rng.uniform(0.0, img.height - ch);
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double sx = x0 + (x + 0.5) / img.width * cw - 0.5;
            const double sy = y0 + (y + 0.5) / img.height * ch - 0.5;
            double px[3];
            sample_bilinear(img, sy, sx, px);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = px[c];
        }
    return out;
}

Image color_jitter(const Image& img, Rng& rng) {
    const double brightness = rng.uniform(0.8, 1.2);
    const double contrast = rng.uniform(0.8, 1.2);
    const double saturation = rng.uniform(0.8, 1.2);
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double r = img.at(y, x, 0) * brightness;
            double g = img.at(y, x, 1) * brightness;
            double b = img.at(y, x, 2) * brightness;
            r = (r - 0.5) * contrast + 0.5;
            g = (g - 0.5) * contrast + 0.5;
            b = (b - 0.5) * contrast + 0.5;
            const double lum = 0.299 * r + 0.587 * g + 0.114 * b;
            out.at(y, x, 0) = lum + (r - lum) * saturation;
            out.at(y, x, 1) = lum + (g - lum) * saturation;
            out.at(y, x, 2) = lum + (b - lum) * saturation;
        }
    return out;
}

// Stand-in for the image-variation model: hue shift plus low-amplitude value
// noise gives a semantically-same, visually-different variant.
Image appearance_perturb(const Image& img, Rng& rng) {
    const double hue_shift = rng.uniform(-15.0, 15.0);
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double h, s, v;
            rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
            v += rng.normal() * 0.03;
            double r, g, b;
            hsv_to_rgb(h + hue_shift, s, std::min(1.0, std::max(0.0, v)), r, g, b);
            out.at(y, x, 0) = r;
            out.at(y, x, 1) = g;
            out.at(y, x, 2) = b;
        }
    return out;
}

}  // namespace

Image augment(const Image& img, Rng& rng, double prob) {
    Image out = img;
    if (rng.bernoulli(prob)) out = warp_perspective(out, rng);
    if (rng.bernoulli(prob)) out = rotate(out, rng);
    if (rng.bernoulli(prob)) out = resized_crop(out, rng);
    if (rng.bernoulli(prob)) out = color_jitter(out, rng);
    if (rng.bernoulli(prob)) out = appearance_perturb(out, rng);
    out.clamp01();
    return out;
}

std::vector<Image> simulate_retrieval_views(const ToyObjectSpec& spec, int k, uint64_t seed,
                                            int size, double aug_prob) {
    if (k < 1 || k > 4)
        throw std::invalid_argument("simulate_retrieval_views: k must be in [1,4], got " +
                                    std::to_string(k));
    std::vector<Image> views;
    for (int i = 0; i < k; ++i) {
        Rng rng = sample_rng(seed, "retrieval_view", static_cast<uint64_t>(i));
        const double az = rng.uniform(0.0, 360.0);
        const double el = rng.uniform(-5.0, 30.0);
        Image clean = render(spec, CameraPose::from_angles(az, el), size, rng);
        views.push_back(augment(clean, rng, aug_prob));
    }
    return views;
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

Corpus build_2d_corpus(const std::vector<ToyObjectSpec>& classes, int images_per_class,
                       uint64_t seed, int image_size, int k_cond) {
    if (images_per_class < k_cond + 1)
        throw std::invalid_argument("build_2d_corpus: images_per_class " +
                                    std::to_string(images_per_class) + " < K+1 = " +
                                    std::to_string(k_cond + 1));
    Corpus corpus;
    for (size_t ci = 0; ci < classes.size(); ++ci) {
        const auto& spec = classes[ci];
        for (int i = 0; i < images_per_class; ++i) {
            Rng rng = sample_rng(seed, "corpus_" + spec.id(), static_cast<uint64_t>(i));
            const double az = rng.uniform(0.0, 360.0);
            const double el = rng.uniform(-5.0, 30.0);
            Image img = render(spec, CameraPose::from_angles(az, el), image_size, rng);
            img = augment(img, rng, 0.5);
            char suffix[16];
            std::snprintf(suffix, sizeof(suffix), "_%02d", i);
            CorpusRecord rec;
            rec.id = spec.id() + suffix;
            rec.caption = spec.caption();
            rec.image = "images/" + rec.id + ".png";
            corpus.records.push_back(rec);
            corpus.images.push_back(std::move(img));
        }
    }
    return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("write_corpus: cannot write manifest in " + dir);
    for (size_t i = 0; i < corpus.records.size(); ++i) {
        const auto& rec = corpus.records[i];
        json j = {{"id", rec.id}, {"caption", rec.caption}, {"image", rec.image}};
        manifest << j.dump() << "\n";
        write_png((fs::path(dir) / rec.image).string(), corpus.images[i]);
    }
}

Corpus load_corpus(const std::string& dir, bool load_images) {
    std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest)
        throw std::runtime_error("load_corpus: missing manifest.jsonl in " + dir);
    Corpus corpus;
    corpus.dir = dir;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        CorpusRecord rec{j.at("id").get<std::string>(), j.at("caption").get<std::string>(),
                         j.at("image").get<std::string>()};
        if (load_images) corpus.images.push_back(read_png((fs::path(dir) / rec.image).string()));
        corpus.records.push_back(std::move(rec));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// spec universe / split
// ---------------------------------------------------------------------------

std::vector<ToyObjectSpec> sample_spec_universe(int count, uint64_t seed) {
    std::vector<ToyObjectSpec> all;
    const int nc = palette_size();
    for (ObjShape s : {ObjShape::Cube, ObjShape::Sphere, ObjShape::Cylinder, ObjShape::Cone,
                       ObjShape::Pyramid})
        for (int c = 0; c < nc; ++c) {
            all.push_back({s, c, Marking::None, c});
            for (Marking m : {Marking::Stripe, Marking::Dot, Marking::Checker})
                for (int mc = 0; mc < nc; ++mc) {
                    if (mc == c) continue;
                    all.push_back({s, c, m, mc});
                }
        }
    if (count > static_cast<int>(all.size()))
        throw std::invalid_argument("sample_spec_universe: count " + std::to_string(count) +
                                    " exceeds universe size " + std::to_string(all.size()));
    Rng rng(seed);
    // Fisher-Yates prefix shuffle.
    for (int i = 0; i < count; ++i) {
        const size_t j = i + rng.uniform_int(all.size() - i);
        std::swap(all[i], all[j]);
    }
    all.resize(count);
    return all;
}

std::pair<std::vector<ToyObjectSpec>, std::vector<ToyObjectSpec>> make_ood_split(
    const std::vector<ToyObjectSpec>& all, double holdout_fraction, uint64_t seed) {
    if (holdout_fraction <= 0.0 || holdout_fraction > 0.5)
        throw std::invalid_argument("make_ood_split: holdout_fraction must be in (0, 0.5]");
    const int target = static_cast<int>(std::lround(holdout_fraction * all.size()));
    if (target == 0 || target == static_cast<int>(all.size()))
        throw std::invalid_argument("make_ood_split: degenerate split");

    // Group specs by (color, shape) cell, shuffle cells, take whole cells until
    // the target count is met (last cell may contribute partially).
    std::map<std::pair<int, int>, std::vector<size_t>> cells;
    for (size_t i = 0; i < all.size(); ++i)
        cells[{all[i].color, static_cast<int>(all[i].shape)}].push_back(i);
    std::vector<std::vector<size_t>> cell_list;
    for (auto& [key, idxs] : cells) cell_list.push_back(idxs);
    Rng rng(seed ^ 0x5eedf00dULL);
    for (size_t i = 0; i + 1 < cell_list.size(); ++i) {
        const size_t j = i + rng.uniform_int(cell_list.size() - i);
        std::swap(cell_list[i], cell_list[j]);
    }
    std::set<size_t> ood_idx;
    for (const auto& cell : cell_list) {
        if (static_cast<int>(ood_idx.size()) >= target) break;
        for (size_t idx : cell) {
            if (static_cast<int>(ood_idx.size()) >= target) break;
            ood_idx.insert(idx);
        }
    }
    std::vector<ToyObjectSpec> in_domain, ood;
    for (size_t i = 0; i < all.size(); ++i) {
        if (ood_idx.count(i)) ood.push_back(all[i]);
        else in_domain.push_back(all[i]);
    }
    if (in_domain.empty() || ood.empty())
        throw std::invalid_argument("make_ood_split: degenerate split");
    return {in_domain, ood};
}

void write_split(const std::vector<ToyObjectSpec>& specs, const std::string& path) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_split: cannot write " + path);
    for (const auto& s : specs) out << s.id() << "\n";
}

std::vector<ToyObjectSpec> read_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_split: cannot read " + path);
    std::vector<ToyObjectSpec> specs;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) specs.push_back(ToyObjectSpec::from_id(line));
    }
    return specs;
}

// ---------------------------------------------------------------------------
// training samples
// ---------------------------------------------------------------------------

TrainingSample make_3d_sample(const ToyObjectSpec& spec, int k_cond, uint64_t seed,
                              int image_size) {
    TrainingSample s;
    s.mode = BatchMode::Mode3D;
    s.prompt = spec.caption() + kAssetSuffix;
    Rng rng = sample_rng(seed, "sample3d_" + spec.id(), 0);
    const double base_az = rng.uniform(0.0, 360.0);
    const double elev = rng.uniform(-5.0, 30.0);
    s.poses = orthogonal_poses(base_az, elev);
    for (const auto& pose : s.poses) s.targets.push_back(render(spec, pose, image_size, rng));
    s.conditioning = simulate_retrieval_views(spec, k_cond, rng.next_u64(), image_size);
    return s;
}

TrainingSample make_2d_sample(const Corpus& corpus, size_t class_start, size_t class_len,
                              int k_cond, uint64_t seed) {
    if (class_len < static_cast<size_t>(k_cond) + 1)
        throw std::invalid_argument("make_2d_sample: class has fewer than K+1 images");
    TrainingSample s;
    s.mode = BatchMode::Mode2D;
    s.prompt = corpus.records[class_start].caption;
    Rng rng(seed);
    // Sample K+1 distinct images: K conditioning plus one held-out target.
    std::vector<size_t> idx(class_len);
    for (size_t i = 0; i < class_len; ++i) idx[i] = class_start + i;
    for (int i = 0; i < k_cond + 1; ++i) {
        const size_t j = i + rng.uniform_int(idx.size() - i);
        std::swap(idx[i], idx[j]);
    }
    for (int i = 0; i < k_cond; ++i) s.conditioning.push_back(corpus.image_of(idx[i]));
    s.targets.push_back(corpus.image_of(idx[k_cond]));
    return s;
}

}  // namespace mvrag
