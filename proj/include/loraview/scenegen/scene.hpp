#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>

#include "loraview/numerics/matrix.hpp"

namespace loraview::scenegen {

enum class ObjectId : std::uint8_t {
    circle,
    square,
    triangle,
    cross,
    ring,
    star,
    diamond,
    hexagon,
    crescent,
    arrow,
    tee,
    ell,
};
inline constexpr std::size_t kObjectCount = 12;

enum class Elevation : std::uint8_t { low, mid, high, top };
inline constexpr std::size_t kElevationCount = 4;
inline constexpr std::size_t kAzimuthCount = 8;  // 0, 45, ..., 315 degrees
inline constexpr std::size_t kViewCount = kElevationCount * kAzimuthCount;

enum class BackgroundId : std::uint8_t { plain, grass_noise, forest_stripes, table_edge, beach_gradient };
inline constexpr std::size_t kBackgroundCount = 5;

inline constexpr std::array<std::string_view, kObjectCount> kObjectNames = {
    "circle", "square", "triangle", "cross", "ring", "star", "diamond", "hexagon", "crescent", "arrow", "tee", "ell"};
inline constexpr std::array<std::string_view, kElevationCount> kElevationNames = {"low", "mid", "high", "top"};
inline constexpr std::array<std::string_view, kBackgroundCount> kBackgroundNames = {
    "plain", "grass-noise", "forest-stripes", "table-edge", "beach-gradient"};

/// Camera view: elevation level x azimuth step. Index = elevation * 8 + azimuth.
struct ViewId {
    Elevation elevation = Elevation::mid;
    std::uint8_t azimuth = 0;  // in units of 45 degrees, 0..7

    static ViewId from_index(std::size_t index) {
        if (index >= kViewCount) throw ParameterError("view index " + std::to_string(index) + " out of range");
        return ViewId{static_cast<Elevation>(index / kAzimuthCount), static_cast<std::uint8_t>(index % kAzimuthCount)};
    }
    std::size_t index() const noexcept { return static_cast<std::size_t>(elevation) * kAzimuthCount + azimuth; }
    int azimuth_degrees() const noexcept { return 45 * azimuth; }
    std::string name() const {
        std::string deg = std::to_string(azimuth_degrees());
        while (deg.size() < 3) deg.insert(deg.begin(), '0');
        return std::string(kElevationNames[static_cast<std::size_t>(elevation)]) + "-" + deg;
    }
    friend bool operator==(const ViewId&, const ViewId&) = default;
};

inline std::string_view to_string(ObjectId o) { return kObjectNames.at(static_cast<std::size_t>(o)); }
inline std::string_view to_string(BackgroundId b) { return kBackgroundNames.at(static_cast<std::size_t>(b)); }

inline ObjectId parse_object(std::string_view s) {
    for (std::size_t i = 0; i < kObjectCount; ++i)
        if (kObjectNames[i] == s) return static_cast<ObjectId>(i);
    throw ParameterError("unknown object '" + std::string(s) + "'");
}

inline BackgroundId parse_background(std::string_view s) {
    for (std::size_t i = 0; i < kBackgroundCount; ++i)
        if (kBackgroundNames[i] == s) return static_cast<BackgroundId>(i);
    throw ParameterError("unknown background '" + std::string(s) + "'");
}

/// Accepts "mid-045" style names.
inline ViewId parse_view(std::string_view s) {
    for (std::size_t i = 0; i < kViewCount; ++i) {
        ViewId v = ViewId::from_index(i);
        if (v.name() == s) return v;
    }
    throw ParameterError("unknown view '" + std::string(s) + "'");
}

struct SceneSpec {
    ObjectId object = ObjectId::circle;
    ViewId view{};
    BackgroundId background = BackgroundId::plain;
    std::size_t grid = 24;

    friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct RenderedScene {
    Matrix image;  // grid x grid, values in [0, 1]
    Matrix mask;   // 1 on object pixels, 0 elsewhere
    SceneSpec spec;
};

// ---------------------------------------------------------------------------
// Geometry

/// Point-in-shape test in the object's canonical frame, shapes span roughly
/// [-1, 1] on both axes. v grows downwards (image convention).
inline bool inside_shape(ObjectId object, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (object) {
    case ObjectId::circle:
        return u * u + v * v <= 0.95 * 0.95;
    case ObjectId::square:
        return au <= 0.78 && av <= 0.78;
    case ObjectId::triangle: {
        // apex up at (0, -0.95), base corners (+-0.9, 0.75)
        if (v > 0.75) return false;
        double half_width = 0.9 * (v + 0.95) / 1.7;
        return v >= -0.95 && au <= half_width;
    }
    case ObjectId::cross:
        return (au <= 0.32 && av <= 0.95) || (av <= 0.32 && au <= 0.95);
    case ObjectId::ring: {
        double r2 = u * u + v * v;
        return r2 <= 0.95 * 0.95 && r2 >= 0.5 * 0.5;
    }
    case ObjectId::star: {
        double r = std::sqrt(u * u + v * v);
        if (r > 1.0) return false;
        double theta = std::atan2(v, u) + std::numbers::pi / 2.0;  // a point straight up
        double sector = 2.0 * std::numbers::pi / 5.0;
        double t = std::fmod(theta + 10.0 * sector, sector) / sector;  // 0..1 within a spike
        double tri = std::abs(2.0 * t - 1.0);                          // 1 at spike tips, 0 between
        double limit = 0.42 + (1.0 - 0.42) * tri;
        return r <= limit;
    }
    case ObjectId::diamond:
        return au + av <= 0.98;
    case ObjectId::hexagon:
        return av <= 0.82 && au * 0.866 + av * 0.5 <= 0.82;
    case ObjectId::crescent: {
        bool outer = u * u + v * v <= 0.95 * 0.95;
        double du = u - 0.45;
        bool bite = du * du + v * v <= 0.7 * 0.7;
        return outer && !bite;
    }
    case ObjectId::arrow: {
        bool shaft = av <= 0.24 && u >= -0.95 && u <= 0.15;
        bool head = u >= 0.1 && u <= 0.98 && av <= 0.8 * (0.98 - u) / 0.88;
        return shaft || head;
    }
    case ObjectId::tee:
        return (au <= 0.92 && v >= -0.92 && v <= -0.42) || (au <= 0.27 && v >= -0.42 && v <= 0.92);
    case ObjectId::ell:
        return (u >= -0.85 && u <= -0.35 && av <= 0.92) || (u >= -0.85 && u <= 0.85 && v >= 0.42 && v <= 0.92);
    }
    return false;
}

/// Per-view layout: how the flat shape lying on the ground plane is seen.
struct ViewGeometry {
    double vertical_scale;  // foreshortening of the ground plane
    double azimuth_rad;     // in-plane rotation of the silhouette
    double center_x;        // pixels
    double center_y;        // pixels
    double radius;          // pixels, before foreshortening
    std::optional<double> horizon_y;  // pixels; absent for the top view
};

inline ViewGeometry view_geometry(ViewId view, std::size_t grid) {
    static constexpr std::array<double, kElevationCount> kScale = {0.5, 0.68, 0.85, 1.0};
    static constexpr std::array<double, kElevationCount> kCenter = {0.64, 0.6, 0.56, 0.5};
    static constexpr std::array<double, kElevationCount> kHorizon = {0.3, 0.21, 0.11, -1.0};
    const auto e = static_cast<std::size_t>(view.elevation);
    const double g = static_cast<double>(grid);
    ViewGeometry geo{};
    geo.vertical_scale = kScale[e];
    geo.azimuth_rad = view.azimuth * std::numbers::pi / 4.0;
    geo.center_x = 0.5 * g;
    geo.center_y = kCenter[e] * g;
    geo.radius = 0.3 * g;
    if (kHorizon[e] > 0) geo.horizon_y = kHorizon[e] * g;
    return geo;
}

/// Pixel position expressed in the shape's canonical frame.
struct ObjectFrame {
    double u;
    double v;
};

/// Undoes the view: translate to the object centre, unfold the vertical
/// foreshortening, then rotate back by the azimuth.
inline ObjectFrame to_object_frame(const ViewGeometry& geo, double px, double py) {
    double dx = (px - geo.center_x) / geo.radius;
    double dy = (py - geo.center_y) / (geo.radius * geo.vertical_scale);
    double c = std::cos(geo.azimuth_rad), s = std::sin(geo.azimuth_rad);
    return {c * dx + s * dy, -s * dx + c * dy};
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Deterministic per-pixel noise in [-1, 1].
inline double hash_noise(std::uint64_t seed, std::int64_t x, std::int64_t y) {
    std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(x) * 0x100000001B3ull ^
                                         mix64(static_cast<std::uint64_t>(y))));
    return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

}  // namespace detail

/// Background value at a pixel centre; all values stay within [0.05, 0.7]
/// so object pixels (>= 0.8) always differ from what they cover.
inline double background_value(BackgroundId bg, const ViewGeometry& geo, ViewId view, std::size_t grid,
                               std::uint64_t seed, std::size_t x, std::size_t y) {
    const double px = static_cast<double>(x) + 0.5;
    const double py = static_cast<double>(y) + 0.5;
    const double g = static_cast<double>(grid);
    const double az = geo.azimuth_rad;
    if (bg == BackgroundId::plain) return 0.35;

    // Horizon tilts with azimuth; the top view has no horizon.
    bool ground = true;
    bool on_line = false;
    if (geo.horizon_y) {
        double line_y = *geo.horizon_y + 0.18 * std::sin(az) * (px - geo.center_x);
        ground = py > line_y + 0.5;
        on_line = std::abs(py - line_y) <= 0.5;
    }
    switch (bg) {
    case BackgroundId::grass_noise: {
        if (on_line) return 0.7;
        if (!ground) return 0.6;
        return 0.3 + 0.08 * detail::hash_noise(seed, static_cast<std::int64_t>(x), static_cast<std::int64_t>(y));
    }
    case BackgroundId::forest_stripes: {
        if (on_line) return 0.7;
        if (ground) return geo.horizon_y ? 0.3 : 0.3 + 0.1 * std::cos(2.0 * std::numbers::pi * (px / 8.0) + az);
        int phase = static_cast<int>(x) + view.azimuth;
        return (phase / 2) % 2 == 0 ? 0.12 : 0.45;
    }
    case BackgroundId::table_edge: {
        if (on_line) return 0.7;
        if (!ground) return 0.18;
        // A second, azimuth-dependent edge across the table top.
        double nx = std::cos(az), ny = std::sin(az);
        double d = (px - 0.5 * g) * nx + (py - 0.85 * g) * ny;
        if (std::abs(d) <= 0.5) return 0.65;
        return d < 0 ? 0.48 : 0.3;
    }
    case BackgroundId::beach_gradient: {
        if (on_line) return 0.7;
        if (!ground) return 0.55 + 0.1 * (py / g);
        double t = ((px - 0.5 * g) * std::cos(az) + (py - 0.5 * g) * std::sin(az)) / g;  // ~[-0.7, 0.7]
        return 0.35 + 0.25 * t;
    }
    case BackgroundId::plain:
        break;
    }
    return 0.35;
}

/// Object pixel value: brightness ramps along the rotated local u axis.
inline double object_value(const ObjectFrame& f) {
    double t = std::clamp(0.5 + 0.5 * f.u, 0.0, 1.0);
    return 0.8 + 0.18 * t;
}

/// Background-only render (no object) of the same scene.
inline Matrix render_background(const SceneSpec& spec, std::uint64_t seed) {
    const ViewGeometry geo = view_geometry(spec.view, spec.grid);
    Matrix img(spec.grid, spec.grid);
    for (std::size_t y = 0; y < spec.grid; ++y)
        for (std::size_t x = 0; x < spec.grid; ++x)
            img(y, x) = static_cast<float>(background_value(spec.background, geo, spec.view, spec.grid, seed, x, y));
    return img;
}

/// Deterministic render of a scene and its exact object mask.
inline RenderedScene render(const SceneSpec& spec, std::uint64_t seed) {
    if (spec.grid < 16) throw ParameterError("grid must be >= 16, got " + std::to_string(spec.grid));
    if (static_cast<std::size_t>(spec.object) >= kObjectCount) throw ParameterError("invalid object id");
    if (static_cast<std::size_t>(spec.background) >= kBackgroundCount) throw ParameterError("invalid background id");
    if (spec.view.azimuth >= kAzimuthCount || static_cast<std::size_t>(spec.view.elevation) >= kElevationCount)
        throw ParameterError("invalid view id");

    const ViewGeometry geo = view_geometry(spec.view, spec.grid);
    RenderedScene out{render_background(spec, seed), Matrix(spec.grid, spec.grid), spec};
    for (std::size_t y = 0; y < spec.grid; ++y) {
        for (std::size_t x = 0; x < spec.grid; ++x) {
            ObjectFrame f = to_object_frame(geo, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
            if (!inside_shape(spec.object, f.u, f.v)) continue;
            out.mask(y, x) = 1.0f;
            out.image(y, x) = static_cast<float>(object_value(f));
        }
    }
    return out;
}

}  // namespace loraview::scenegen
