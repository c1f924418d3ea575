#include "cldl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cldl/errors.hpp"
#include "cldl/rng.hpp"

namespace cldl {

namespace {

struct P {
    double x, y;
};

using Stroke = std::vector<P>;

Stroke arc(double cx, double cy, double rx, double ry, double a0, double a1, int n = 14) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        double a = a0 + (a1 - a0) * i / n;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

// Glyph skeletons in [0,1]^2, y pointing down.
std::vector<Stroke> glyph(int digit) {
    constexpr double PI = 3.14159265358979323846;
    switch (digit) {
        case 0:
            return {arc(0.50, 0.50, 0.24, 0.34, 0, 2 * PI, 24)};
        case 1:
            return {{{0.36, 0.30}, {0.54, 0.13}, {0.54, 0.87}}};
        case 2:
            return {arc(0.49, 0.31, 0.22, 0.18, -PI, 0.35 * PI, 12),
                    {{0.63, 0.47}, {0.30, 0.84}, {0.74, 0.84}}};
        case 3:
            return {arc(0.46, 0.30, 0.21, 0.17, -0.75 * PI, 0.5 * PI, 12),
                    arc(0.46, 0.66, 0.24, 0.20, -0.5 * PI, 0.75 * PI, 12)};
        case 4:
            return {{{0.60, 0.12}, {0.26, 0.60}, {0.80, 0.60}}, {{0.62, 0.38}, {0.62, 0.88}}};
        case 5:
            return {{{0.70, 0.14}, {0.34, 0.14}, {0.31, 0.46}},
                    arc(0.48, 0.64, 0.23, 0.21, -0.45 * PI, 0.75 * PI, 14)};
        case 6:
            return {{{0.66, 0.12}, {0.45, 0.28}, {0.32, 0.52}, {0.29, 0.66}},
                    arc(0.49, 0.66, 0.20, 0.19, 0, 2 * PI, 20)};
        case 7:
            return {{{0.27, 0.15}, {0.74, 0.15}, {0.44, 0.86}}};
        case 8:
            return {arc(0.50, 0.30, 0.18, 0.17, 0, 2 * PI, 18),
                    arc(0.50, 0.67, 0.22, 0.20, 0, 2 * PI, 18)};
        case 9:
            return {arc(0.52, 0.33, 0.19, 0.18, 0, 2 * PI, 18),
                    {{0.71, 0.36}, {0.68, 0.62}, {0.56, 0.87}}};
        default:
            throw std::invalid_argument("glyph: digit outside 0..9");
    }
}

double dist_to_segment(double px, double py, const P& a, const P& b) {
    double vx = b.x - a.x, vy = b.y - a.y;
    double wx = px - a.x, wy = py - a.y;
    double vv = vx * vx + vy * vy;
    double t = vv > 0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
    double dx = wx - t * vx, dy = wy - t * vy;
    return std::sqrt(dx * dx + dy * dy);
}

void render_digit(int digit, Rng& rng, std::uint8_t* out, int side) {
    const double rot = rng.uniform(-0.22, 0.22);
    const double sx = rng.uniform(0.82, 1.08), sy = rng.uniform(0.82, 1.08);
    const double shear = rng.uniform(-0.18, 0.18);
    const double tx = rng.uniform(-0.05, 0.05), ty = rng.uniform(-0.05, 0.05);
    const double thick = std::clamp(0.050 + 0.008 * rng.normal(), 0.034, 0.075) * side;
    const double intensity = rng.uniform(0.72, 1.0);
    const double cr = std::cos(rot), sr = std::sin(rot);

    std::vector<Stroke> strokes = glyph(digit);
    for (auto& s : strokes)
        for (auto& p : s) {
            double jx = p.x - 0.5 + 0.012 * rng.normal();
            double jy = p.y - 0.5 + 0.012 * rng.normal();
            double x = sx * (jx + shear * jy), y = sy * jy;
            p.x = (cr * x - sr * y + 0.5 + tx) * side;
            p.y = (sr * x + cr * y + 0.5 + ty) * side;
        }

    std::vector<double> canvas(std::size_t(side) * side, 0.0);
    const double reach = thick * 0.5 + 1.0;
    for (const auto& s : strokes) {
        for (std::size_t k = 0; k + 1 < s.size(); ++k) {
            const P &a = s[k], &b = s[k + 1];
            int x0 = std::max(0, int(std::floor(std::min(a.x, b.x) - reach)));
            int x1 = std::min(side - 1, int(std::ceil(std::max(a.x, b.x) + reach)));
            int y0 = std::max(0, int(std::floor(std::min(a.y, b.y) - reach)));
            int y1 = std::min(side - 1, int(std::ceil(std::max(a.y, b.y) + reach)));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    double d = dist_to_segment(x + 0.5, y + 0.5, a, b);
                    double c = std::clamp(thick * 0.5 + 0.5 - d, 0.0, 1.0);
                    if (c > 0.0) {
                        auto& px = canvas[std::size_t(y) * side + x];
                        px = std::max(px, c);
                    }
                }
        }
    }
    for (std::size_t i = 0; i < canvas.size(); ++i)
        out[i] = std::uint8_t(std::lround(std::clamp(canvas[i] * intensity, 0.0, 1.0) * 255.0));
}

void write_be32(std::ofstream& f, std::uint32_t v) {
    std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8),
                         std::uint8_t(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

LabeledDataset make_synthetic_digits(std::size_t n, std::uint64_t seed) {
    constexpr int side = 28;
    LabeledDataset ds;
    ds.rows = ds.cols = side;
    ds.images.resize(n * side * side);
    ds.labels.resize(n);
    Rng rng = Rng::stream(seed, "synthetic_digits");
    for (std::size_t i = 0; i < n; ++i) {
        int digit = int(i % 10);  // balanced classes
        ds.labels[i] = std::uint8_t(digit);
        render_digit(digit, rng, ds.images.data() + i * side * side, side);
    }
    return ds;
}

void write_idx(const LabeledDataset& ds, const std::string& images_path,
               const std::string& labels_path) {
    std::ofstream im(images_path, std::ios::binary);
    if (!im) throw DataError("cannot write " + images_path);
    write_be32(im, 0x00000803u);
    write_be32(im, std::uint32_t(ds.count()));
    write_be32(im, std::uint32_t(ds.rows));
    write_be32(im, std::uint32_t(ds.cols));
    im.write(reinterpret_cast<const char*>(ds.images.data()),
             std::streamsize(ds.images.size()));

    std::ofstream lb(labels_path, std::ios::binary);
    if (!lb) throw DataError("cannot write " + labels_path);
    write_be32(lb, 0x00000801u);
    write_be32(lb, std::uint32_t(ds.count()));
    lb.write(reinterpret_cast<const char*>(ds.labels.data()),
             std::streamsize(ds.labels.size()));
}

void write_synthetic_dataset(const std::string& dir, std::size_t n_train, std::size_t n_test,
                             std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    auto train = make_synthetic_digits(n_train, seed);
    auto test = make_synthetic_digits(n_test, splitmix64(seed ^ 0x7e57da7aull));
    namespace fs = std::filesystem;
    write_idx(train, (fs::path(dir) / "train-images-idx3-ubyte").string(),
              (fs::path(dir) / "train-labels-idx1-ubyte").string());
    write_idx(test, (fs::path(dir) / "t10k-images-idx3-ubyte").string(),
              (fs::path(dir) / "t10k-labels-idx1-ubyte").string());
}

}  // namespace cldl
