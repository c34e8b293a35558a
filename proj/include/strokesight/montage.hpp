#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace strokesight::montage {

inline constexpr std::size_t kChannelCount = 32;

/// Canonical 32-electrode 10-20/10-10 montage order (front to back, left
/// to right). This order is also the sequence axis fed to the classifier.
inline constexpr std::array<std::string_view, kChannelCount> kCanonicalChannels = {
    "Fp1", "Fp2", "AF3", "AF4", "F7",  "F3",  "Fz",  "F4",
    "F8",  "FC5", "FC1", "FC2", "FC6", "T7",  "C3",  "Cz",
    "C4",  "T8",  "CP5", "CP1", "CP2", "CP6", "P7",  "P3",
    "Pz",  "P4",  "P8",  "PO3", "PO4", "O1",  "Oz",  "O2",
};

enum class Hemisphere { Left, Midline, Right };

inline std::optional<std::size_t> canonical_index(std::string_view name)
{
    for (std::size_t i = 0; i < kCanonicalChannels.size(); ++i) {
        if (kCanonicalChannels[i] == name) return i;
    }
    return std::nullopt;
}

/// 10-20 convention: odd suffix = left, even = right, 'z' = midline.
inline Hemisphere hemisphere_of(std::string_view name)
{
    if (name.empty()) return Hemisphere::Midline;
    const char last = name.back();
    if (last == 'z' || last == 'Z') return Hemisphere::Midline;
    if (std::isdigit(static_cast<unsigned char>(last))) {
        return ((last - '0') % 2 == 1) ? Hemisphere::Left : Hemisphere::Right;
    }
    return Hemisphere::Midline;
}

/// Electrode on the unit head sphere. Latitude is measured from the
/// equator through Fpz/T7/Oz/T8; longitude from the right-ear (+x) axis
/// towards the nose (+y).
struct SphericalPosition {
    double latitude;
    double longitude;
};

struct ElectrodeSpherical {
    std::string_view name;
    // BESA convention: theta is inclination from Cz in degrees (negative on
    // the left), phi is the in-plane angle in degrees.
    double besa_theta;
    double besa_phi;
};

inline constexpr std::array<ElectrodeSpherical, kChannelCount> kBesaPositions = {{
    {"Fp1", -92, -72}, {"Fp2", 92, 72},   {"AF3", -74, -65}, {"AF4", 74, 65},
    {"F7", -92, -36},  {"F3", -60, -51},  {"Fz", 46, 90},    {"F4", 60, 51},
    {"F8", 92, 36},    {"FC5", -72, -21}, {"FC1", -32, -45}, {"FC2", 32, 45},
    {"FC6", 72, 21},   {"T7", -92, 0},    {"C3", -46, 0},    {"Cz", 0, 0},
    {"C4", 46, 0},     {"T8", 92, 0},     {"CP5", -72, 21},  {"CP1", -32, 45},
    {"CP2", 32, -45},  {"CP6", 72, -21},  {"P7", -92, 36},   {"P3", -60, 51},
    {"Pz", 46, -90},   {"P4", 60, -51},   {"P8", 92, -36},   {"PO3", -74, 65},
    {"PO4", 74, -65},  {"O1", -92, 72},   {"Oz", 92, -90},   {"O2", 92, -72},
}};

inline std::array<double, 3> besa_to_cartesian(double theta_deg, double phi_deg)
{
    constexpr double deg = std::numbers::pi / 180.0;
    const double t = theta_deg * deg;
    const double p = phi_deg * deg;
    double x = std::sin(t) * std::cos(p);
    double y = std::sin(t) * std::sin(p);
    const double z = std::cos(t);
    // cos(90 deg) is not exactly zero in binary; snap so midline stays on x = 0.
    if (std::abs(x) < 1e-12) x = 0.0;
    if (std::abs(y) < 1e-12) y = 0.0;
    return {x, y, z};
}

inline SphericalPosition spherical_position(std::string_view name)
{
    for (const auto& e : kBesaPositions) {
        if (e.name == name) {
            const auto c = besa_to_cartesian(e.besa_theta, e.besa_phi);
            return {std::atan2(c[2], std::hypot(c[0], c[1])), std::atan2(c[1], c[0])};
        }
    }
    return {std::numbers::pi / 2.0, 0.0};
}

inline bool has_position(std::string_view name)
{
    for (const auto& e : kBesaPositions) {
        if (e.name == name) return true;
    }
    return false;
}

inline std::vector<std::string> canonical_names()
{
    return {kCanonicalChannels.begin(), kCanonicalChannels.end()};
}

} // namespace strokesight::montage
