#pragma once

// Scalp maps: azimuthal equidistant projection of electrode positions around
// the vertex, then multiquadric RBF interpolation onto a masked square grid.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "strokesight/dsp.hpp"
#include "strokesight/error.hpp"
#include "strokesight/montage.hpp"

namespace strokesight::topo {

using montage::SphericalPosition;

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Default centre is the vertex (Cz). At the pole the centre longitude only
// fixes the azimuth reference; -pi/2 puts the nose at theta = 0 with theta
// growing clockwise seen from above, so the right ear lands on +x.
struct ProjectionConfig {
    double center_latitude = std::numbers::pi / 2.0;
    double center_longitude = -std::numbers::pi / 2.0;
    double radius = 1.0;

    void validate() const
    {
        if (!(radius > 0.0)) fail(ErrorKind::InvalidArgument, "projection radius must be > 0");
        if (!(std::abs(center_latitude) <= std::numbers::pi / 2.0)) fail(ErrorKind::InvalidArgument, "centre latitude outside [-pi/2, pi/2]");
    }
};

inline std::array<double, 3> unit_vector(const SphericalPosition& p)
{
    return {std::cos(p.latitude) * std::cos(p.longitude), std::cos(p.latitude) * std::sin(p.longitude), std::sin(p.latitude)};
}

// Central angle in a form that stays accurate for both tiny and near-pi
// separations (atan2 of cross and dot products).
inline double central_angle(const SphericalPosition& a, const SphericalPosition& b)
{
    const auto u = unit_vector(a), v = unit_vector(b);
    const double cx = u[1] * v[2] - u[2] * v[1], cy = u[2] * v[0] - u[0] * v[2], cz = u[0] * v[1] - u[1] * v[0];
    const double dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    return std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot);
}

inline Point2 project(const SphericalPosition& p, const ProjectionConfig& cfg = {})
{
    cfg.validate();
    if (!(std::abs(p.latitude) <= std::numbers::pi / 2.0 + 1e-12) || !std::isfinite(p.longitude))
        fail(ErrorKind::InvalidArgument, "latitude outside [-pi/2, pi/2]");
    const SphericalPosition centre{cfg.center_latitude, cfg.center_longitude};
    const double c = central_angle(centre, p);
    if (c == 0.0) return {0.0, 0.0};
    if (std::numbers::pi - c < 1e-9) fail(ErrorKind::InvalidArgument, "point is antipodal to the projection centre; azimuth undefined");
    const double dl = p.longitude - cfg.center_longitude;
    const double theta = std::atan2(std::cos(p.latitude) * std::sin(dl),
                                    std::cos(cfg.center_latitude) * std::sin(p.latitude) -
                                        std::sin(cfg.center_latitude) * std::cos(p.latitude) * std::cos(dl));
    const double rho = cfg.radius * c;
    return {rho * std::sin(theta), rho * std::cos(theta)};
}

struct ElectrodeLocation {
    std::string name;
    SphericalPosition spherical{};
    Point2 projected{};
};

inline std::vector<ElectrodeLocation> electrode_locations(const std::vector<std::string>& names, const ProjectionConfig& cfg = {})
{
    std::vector<ElectrodeLocation> out;
    for (const auto& n : names) {
        if (!montage::has_position(n)) fail(ErrorKind::UnknownChannel, "no scalp position for channel '" + n + "'");
        const auto s = montage::spherical_position(n);
        out.push_back({n, s, project(s, cfg)});
    }
    return out;
}

// Left/right counterpart under the 10-20 numbering (odd <-> next even).
inline std::string mirror_channel(const std::string& name)
{
    if (name.empty() || !std::isdigit(static_cast<unsigned char>(name.back()))) return name;
    std::size_t i = name.size();
    while (i > 0 && std::isdigit(static_cast<unsigned char>(name[i - 1]))) --i;
    const int n = std::stoi(name.substr(i));
    return name.substr(0, i) + std::to_string(n % 2 == 1 ? n + 1 : n - 1);
}

// ---------------------------------------------------------------------------
// Multiquadric RBF with a constant term

inline constexpr double kRbfEpsilon = 0.01;

inline double multiquadric(double r, double eps) { return std::sqrt(r * r + eps * eps); }

struct RbfInterpolant {
    std::vector<Point2> centers;
    std::vector<double> weights;
    double constant = 0.0;
    double epsilon = kRbfEpsilon;

    double operator()(double x, double y) const
    {
        double s = constant;
        for (std::size_t i = 0; i < centers.size(); ++i)
            s += weights[i] * multiquadric(std::hypot(x - centers[i].x, y - centers[i].y), epsilon);
        return s;
    }
};

// Solves [Phi 1; 1^T 0] [w; c] = [v; 0].
inline RbfInterpolant fit_rbf(std::span<const Point2> pts, std::span<const double> values, double eps = kRbfEpsilon)
{
    const std::size_t n = pts.size();
    if (values.size() != n) fail(ErrorKind::InvalidArgument, "rbf: one value per point required");
    if (n < 3) fail(ErrorKind::InvalidArgument, "rbf: need at least 3 points");
    for (double v : values)
        if (!std::isfinite(v)) fail(ErrorKind::NonFinite, "rbf: non-finite electrode value");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y) < 1e-9)
                fail(ErrorKind::SingularSystem, "rbf: duplicate electrode positions make the system singular");
    bool collinear = true;
    for (std::size_t k = 2; k < n && collinear; ++k) {
        const double cross = (pts[1].x - pts[0].x) * (pts[k].y - pts[0].y) - (pts[1].y - pts[0].y) * (pts[k].x - pts[0].x);
        collinear = std::abs(cross) < 1e-12;
    }
    if (collinear) fail(ErrorKind::InvalidArgument, "rbf: electrodes are collinear");
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n + 1), static_cast<Eigen::Index>(n + 1));
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n + 1));
    for (std::size_t i = 0; i < n; ++i) {
        const auto I = static_cast<Eigen::Index>(i);
        for (std::size_t j = 0; j < n; ++j)
            A(I, static_cast<Eigen::Index>(j)) = multiquadric(std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y), eps);
        A(I, static_cast<Eigen::Index>(n)) = 1.0;
        A(static_cast<Eigen::Index>(n), I) = 1.0;
        b(I) = values[i];
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    if (!lu.isInvertible()) fail(ErrorKind::SingularSystem, "rbf: interpolation system is singular");
    const Eigen::VectorXd sol = lu.solve(b);
    RbfInterpolant f;
    f.centers.assign(pts.begin(), pts.end());
    f.weights.assign(sol.data(), sol.data() + n);
    f.constant = sol(static_cast<Eigen::Index>(n));
    f.epsilon = eps;
    return f;
}

// ---------------------------------------------------------------------------
// Grid

struct GridConfig {
    std::size_t n = 80;
    double epsilon = kRbfEpsilon;
    double mask_scale = 1.05;  // mask radius = scale * max electrode radius
};

struct GridElectrode {
    std::string name;
    double x = 0.0, y = 0.0, value = 0.0;
};

// Row 0 is the front (nose, +y), column 0 the left (-x). Cells outside the
// scalp disk hold NaN and mask = false.
struct TopoGrid {
    std::size_t n = 0;
    double half_width = 0.0;  // grid spans [-half_width, half_width]^2
    double mask_radius = 0.0;
    std::string band;
    std::vector<double> values;
    std::vector<bool> mask;
    std::vector<GridElectrode> electrodes;
    RbfInterpolant interpolant;

    double x_of(std::size_t col) const { return -half_width + (static_cast<double>(col) + 0.5) * 2.0 * half_width / static_cast<double>(n); }
    double y_of(std::size_t row) const { return half_width - (static_cast<double>(row) + 0.5) * 2.0 * half_width / static_cast<double>(n); }
    double at(std::size_t row, std::size_t col) const { return values[row * n + col]; }
    bool inside(std::size_t row, std::size_t col) const { return mask[row * n + col]; }

    // Nearest cell centre to (x, y).
    std::pair<std::size_t, std::size_t> cell_of(double x, double y) const
    {
        const double step = 2.0 * half_width / static_cast<double>(n);
        auto idx = [&](double v) {
            const double k = std::floor(v / step);
            return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(n - 1)));
        };
        return {idx(half_width - y), idx(x + half_width)};
    }

    // Masked cell with the largest value.
    std::pair<std::size_t, std::size_t> argmax_cell() const
    {
        std::size_t best = values.size();
        for (std::size_t i = 0; i < values.size(); ++i)
            if (mask[i] && (best == values.size() || values[i] > values[best])) best = i;
        if (best == values.size()) fail(ErrorKind::Degenerate, "topo grid has no masked cells");
        return {best / n, best % n};
    }
};

inline TopoGrid interpolate(const std::vector<std::string>& names, std::span<const double> values, const GridConfig& grid = {},
                            const ProjectionConfig& proj = {})
{
    if (names.size() != values.size()) fail(ErrorKind::InvalidArgument, "topo: one value per electrode required");
    if (grid.n == 0) fail(ErrorKind::InvalidArgument, "topo: grid size must be > 0");
    if (!(grid.mask_scale > 0.0)) fail(ErrorKind::InvalidArgument, "topo: mask scale must be > 0");
    const auto locs = electrode_locations(names, proj);
    std::vector<Point2> pts;
    double rmax = 0.0;
    for (const auto& l : locs) {
        pts.push_back(l.projected);
        rmax = std::max(rmax, std::hypot(l.projected.x, l.projected.y));
    }
    TopoGrid g;
    g.interpolant = fit_rbf(pts, values, grid.epsilon);
    g.n = grid.n;
    g.mask_radius = grid.mask_scale * rmax;
    g.half_width = g.mask_radius;
    g.values.assign(g.n * g.n, std::numeric_limits<double>::quiet_NaN());
    g.mask.assign(g.n * g.n, false);
    for (std::size_t r = 0; r < g.n; ++r)
        for (std::size_t c = 0; c < g.n; ++c) {
            const double x = g.x_of(c), y = g.y_of(r);
            if (std::hypot(x, y) > g.mask_radius) continue;
            g.mask[r * g.n + c] = true;
            g.values[r * g.n + c] = g.interpolant(x, y);
        }
    for (std::size_t i = 0; i < locs.size(); ++i) g.electrodes.push_back({locs[i].name, pts[i].x, pts[i].y, values[i]});
    return g;
}

// ---------------------------------------------------------------------------
// Band selection

// Accepts a canonical band name or a sub-band index "0".."9". Returns the
// inclusive sub-band range.
inline std::pair<std::size_t, std::size_t> band_range(const std::string& selector, std::size_t n_bands = 10)
{
    for (const auto& b : dsp::kCanonicalBands)
        if (b.name == selector) {
            if (n_bands != 10) fail(ErrorKind::InvalidArgument, "canonical bands need the default 10-band scheme");
            return {b.first, b.last};
        }
    if (!selector.empty() && std::all_of(selector.begin(), selector.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
        const auto k = std::stoul(selector);
        if (k < n_bands) return {k, k};
    }
    fail(ErrorKind::InvalidArgument, "unknown band '" + selector + "' (use delta, theta, alpha, beta, gamma or 0-" +
                                         std::to_string(n_bands - 1) + ")");
}

// Per-channel value of a band: the sum of its sub-band powers.
inline std::vector<double> band_values(std::span<const double> matrix, std::size_t n_channels, std::size_t n_bands, const std::string& selector)
{
    if (matrix.size() != n_channels * n_bands) fail(ErrorKind::InvalidArgument, "band_values: matrix size mismatch");
    const auto [lo, hi] = band_range(selector, n_bands);
    std::vector<double> out(n_channels, 0.0);
    for (std::size_t c = 0; c < n_channels; ++c)
        for (std::size_t b = lo; b <= hi; ++b) out[c] += matrix[c * n_bands + b];
    return out;
}

inline TopoGrid render_band(const dsp::BandPowers& powers, const std::vector<std::string>& channel_names, const std::string& selector,
                            const GridConfig& grid = {})
{
    if (channel_names.size() != powers.n_channels) fail(ErrorKind::InvalidArgument, "render_band: channel names do not match powers");
    auto g = interpolate(channel_names, band_values(powers.values, powers.n_channels, powers.n_bands, selector), grid);
    g.band = selector;
    return g;
}

inline nlohmann::json to_json(const TopoGrid& g)
{
    nlohmann::json values = nlohmann::json::array();
    for (std::size_t i = 0; i < g.values.size(); ++i) values.push_back(g.mask[i] ? nlohmann::json(g.values[i]) : nlohmann::json(nullptr));
    nlohmann::json el = nlohmann::json::array();
    for (const auto& e : g.electrodes) el.push_back({{"name", e.name}, {"x", e.x}, {"y", e.y}, {"value", e.value}});
    const auto [r, c] = g.argmax_cell();
    return {{"N", g.n},
            {"band", g.band},
            {"half_width", g.half_width},
            {"mask_radius", g.mask_radius},
            {"values", std::move(values)},
            {"electrodes", std::move(el)},
            {"argmax", {{"row", r}, {"col", c}}}};
}

} // namespace strokesight::topo
