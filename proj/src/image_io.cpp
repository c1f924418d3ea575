#include "cldl/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cldl/data.hpp"
#include "cldl/errors.hpp"

namespace cldl {

namespace {

void put_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(std::uint8_t(x >> 24));
    v.push_back(std::uint8_t(x >> 16));
    v.push_back(std::uint8_t(x >> 8));
    v.push_back(std::uint8_t(x));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
    put_be32(out, std::uint32_t(payload.size()));
    std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    std::uint32_t crc =
        std::uint32_t(crc32(0, out.data() + crc_start, uInt(out.size() - crc_start)));
    put_be32(out, crc);
}

}  // namespace

void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                    int height) {
    if (int(pixels.size()) != width * height)
        throw std::invalid_argument("write_png_gray: pixel count mismatch");
    // filter byte 0 per scanline
    std::vector<std::uint8_t> raw;
    raw.reserve(std::size_t(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + std::ptrdiff_t(y) * width,
                   pixels.begin() + std::ptrdiff_t(y + 1) * width);
    }
    uLongf comp_len = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw NumericError("write_png_gray: deflate failed");
    comp.resize(comp_len);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, std::uint32_t(width));
    put_be32(ihdr, std::uint32_t(height));
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, gray, deflate, none, none
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
}

void write_sample_grid(const std::string& path, const MatX<float>& images, int side,
                       int grid_cols) {
    const int n = int(images.rows());
    const int rows = (n + grid_cols - 1) / grid_cols;
    const int pad = 2;
    const int W = grid_cols * (side + pad) + pad, H = rows * (side + pad) + pad;
    std::vector<std::uint8_t> canvas(std::size_t(W) * H, 0);
    for (int k = 0; k < n; ++k) {
        const int gx = (k % grid_cols) * (side + pad) + pad;
        const int gy = (k / grid_cols) * (side + pad) + pad;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                canvas[std::size_t(gy + y) * W + gx + x] =
                    denormalize_pixel(images(k, y * side + x));
    }
    write_png_gray(path, canvas, W, H);
}

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, bool log_y) {
    const int W = 720, H = 440, ml = 70, mr = 170, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            double yv = log_y ? std::log10(std::max(s.y[i], 1e-12)) : s.y[i];
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, yv);
            ymax = std::max(ymax, yv);
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double yr = ymax - ymin;
    ymin -= 0.05 * yr;
    ymax += 0.05 * yr;

    auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto sy = [&](double y) {
        double yv = log_y ? std::log10(std::max(y, 1e-12)) : y;
        return H - mb - (yv - ymin) / (ymax - ymin) * (H - mt - mb);
    };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                   "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    for (int k = 0; k <= 4; ++k) {
        double xv = xmin + (xmax - xmin) * k / 4.0;
        double yv = ymin + (ymax - ymin) * k / 4.0;
        svg << "<text x='" << sx(xv) << "' y='" << H - mb + 18
            << "' text-anchor='middle' font-size='11'>" << std::round(xv) << "</text>\n";
        double yshow = log_y ? std::pow(10.0, yv) : yv;
        svg << "<text x='" << ml - 8 << "' y='" << H - mb - (H - mt - mb) * k / 4.0 + 4
            << "' text-anchor='end' font-size='11'>";
        std::ostringstream val;
        val.precision(3);
        val << yshow;
        svg << val.str() << "</text>\n";
    }
    svg << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 12
        << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
    svg << "<text x='16' y='" << (mt + H - mb) / 2 << "' font-size='12' transform='rotate(-90 16 "
        << (mt + H - mb) / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";

    int ci = 0;
    for (const auto& s : series) {
        const char* color = colors[ci % 8];
        svg << "<polyline fill='none' stroke='" << color << "' stroke-width='1.6' points='";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            svg << sx(s.x[i]) << "," << sy(s.y[i]) << " ";
        svg << "'/>\n";
        svg << "<line x1='" << W - mr + 12 << "' y1='" << mt + 16 * ci + 8 << "' x2='"
            << W - mr + 34 << "' y2='" << mt + 16 * ci + 8 << "' stroke='" << color
            << "' stroke-width='2'/>\n";
        svg << "<text x='" << W - mr + 40 << "' y='" << mt + 16 * ci + 12 << "' font-size='11'>"
            << s.label << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";

    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << svg.str();
}

}  // namespace cldl
