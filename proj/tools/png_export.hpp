#pragma once

// PNG rendering of a topography grid with libpng: a five-stop perceptual
// palette over the in-mask range, white outside the scalp, black electrode dots.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "strokesight/error.hpp"
#include "strokesight/topo.hpp"

namespace strokesight::tools {

using Rgb = std::array<unsigned char, 3>;

// Approximate viridis at t in [0, 1].
inline Rgb palette(double t)
{
    static constexpr std::array<std::array<double, 3>, 5> stops = {{
        {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37},
    }};
    t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
    const double f = t - static_cast<double>(i);
    Rgb out{};
    for (std::size_t c = 0; c < 3; ++c)
        out[c] = static_cast<unsigned char>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
    return out;
}

inline void write_png(const topo::TopoGrid& g, const std::filesystem::path& path, std::size_t scale = 4)
{
    const std::size_t n = g.n, w = n * scale;
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < g.values.size(); ++i)
        if (g.mask[i]) {
            lo = std::min(lo, g.values[i]);
            hi = std::max(hi, g.values[i]);
        }
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<unsigned char> img(w * w * 3, 255);
    for (std::size_t r = 0; r < w; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t cell = (r / scale) * n + c / scale;
            if (!g.mask[cell]) continue;
            const auto rgb = palette((g.values[cell] - lo) / span);
            std::copy(rgb.begin(), rgb.end(), img.begin() + static_cast<std::ptrdiff_t>((r * w + c) * 3));
        }
    // Electrode dots: grid x grows to the right, row 0 is the front (+y).
    const double cell_w = 2.0 * g.half_width / static_cast<double>(n);
    for (const auto& e : g.electrodes) {
        const double px = (e.x + g.half_width) / cell_w * static_cast<double>(scale);
        const double py = (g.half_width - e.y) / cell_w * static_cast<double>(scale);
        for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx) {
                if (dx * dx + dy * dy > 4) continue;
                const long x = std::lround(px) + dx, y = std::lround(py) + dy;
                if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(w)) continue;
                auto* p = &img[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3];
                p[0] = p[1] = p[2] = 0;
            }
    }

    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) fail(ErrorKind::Io, "cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        fail(ErrorKind::Io, "libpng failed writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(w), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < w; ++r) png_write_row(png, &img[r * w * 3]);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

} // namespace strokesight::tools
