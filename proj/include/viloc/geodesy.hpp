#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

// Coordinate machinery: geodetic (WGS84) -> ECEF -> local ENU world frame ->
// camera frame -> pixels.
//
// Frame conventions, used everywhere in this library:
//   world  = local ENU tangent plane anchored at a per-scene geodetic origin
//            (x east, y north, z up), meters
//   camera = +z forward, +x right, +y down (standard pinhole)

namespace viloc::geo {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

constexpr double kWgs84A = 6378137.0;                // semi-major axis [m]
constexpr double kWgs84F = 1.0 / 298.257223563;      // flattening
constexpr double kWgs84E2 = kWgs84F * (2.0 - kWgs84F);

constexpr double kDeg2Rad = M_PI / 180.0;
constexpr double kRad2Deg = 180.0 / M_PI;

struct GeodeticCoord {
    double lat_deg = 0.0;  // [-90, 90]
    double lon_deg = 0.0;  // [-180, 180]
    double alt_m = 0.0;    // above WGS84 ellipsoid

    bool is_valid() const {
        return std::isfinite(lat_deg) && std::isfinite(lon_deg) && std::isfinite(alt_m) &&
               lat_deg >= -90.0 && lat_deg <= 90.0 && lon_deg >= -180.0 && lon_deg <= 180.0;
    }
};

// A point in the scene's local ENU world frame [m].
using WorldPoint = Vec3;

struct PixelCoord {
    double u = 0.0;
    double v = 0.0;
};

struct CameraIntrinsics {
    double fx = 0.0, fy = 0.0;  // [px]
    double cx = 0.0, cy = 0.0;  // [px]
    int width = 0, height = 0;

    bool is_valid() const {
        return fx > 0.0 && fy > 0.0 && cx > 0.0 && cx < width && cy > 0.0 && cy < height;
    }

    Mat3 matrix() const {
        Mat3 k;
        k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
        return k;
    }
};

// Rigid transform between the world and camera frames. The same struct holds
// either direction; which one is meant is part of each API's contract.
struct WorldCameraTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    // max |R^T R - I| — 0 for an exact rotation
    double orthonormality_error() const {
        return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    }

    bool is_valid(double tol = 1e-9) const {
        return orthonormality_error() < tol && std::abs(rotation.determinant() - 1.0) < tol &&
               translation.allFinite();
    }
};

struct PointBehindCamera : std::runtime_error {
    explicit PointBehindCamera(double z)
        : std::runtime_error("point projects behind the camera (z = " + std::to_string(z) + ")") {}
};

inline Vec3 wgs84_to_ecef(const GeodeticCoord& g) {
    const double lat = g.lat_deg * kDeg2Rad;
    const double lon = g.lon_deg * kDeg2Rad;
    const double sl = std::sin(lat), cl = std::cos(lat);
    const double n = kWgs84A / std::sqrt(1.0 - kWgs84E2 * sl * sl);
    return {(n + g.alt_m) * cl * std::cos(lon),
            (n + g.alt_m) * cl * std::sin(lon),
            (n * (1.0 - kWgs84E2) + g.alt_m) * sl};
}

/// ECEF -> geodetic via Bowring's iteration (converges to sub-mm in a few steps).
inline GeodeticCoord ecef_to_wgs84(const Vec3& p) {
    const double lon = std::atan2(p.y(), p.x());
    const double rho = std::hypot(p.x(), p.y());
    double lat = std::atan2(p.z(), rho * (1.0 - kWgs84E2));
    double alt = 0.0;
    for (int i = 0; i < 8; ++i) {
        const double sl = std::sin(lat);
        const double n = kWgs84A / std::sqrt(1.0 - kWgs84E2 * sl * sl);
        alt = (rho > 1.0) ? rho / std::cos(lat) - n : p.z() / sl - n * (1.0 - kWgs84E2);
        lat = std::atan2(p.z(), rho * (1.0 - kWgs84E2 * n / (n + alt)));
    }
    return {lat * kRad2Deg, lon * kRad2Deg, alt};
}

// Rows are the east/north/up axes in ECEF coordinates.
inline Mat3 enu_rotation(const GeodeticCoord& origin) {
    const double lat = origin.lat_deg * kDeg2Rad;
    const double lon = origin.lon_deg * kDeg2Rad;
    const double sl = std::sin(lat), cl = std::cos(lat);
    const double so = std::sin(lon), co = std::cos(lon);
    Mat3 r;
    r << -so, co, 0.0,
         -sl * co, -sl * so, cl,
         cl * co, cl * so, sl;
    return r;
}

inline WorldPoint ecef_to_enu(const Vec3& p, const GeodeticCoord& origin) {
    return enu_rotation(origin) * (p - wgs84_to_ecef(origin));
}

inline Vec3 enu_to_ecef(const WorldPoint& enu, const GeodeticCoord& origin) {
    return enu_rotation(origin).transpose() * enu + wgs84_to_ecef(origin);
}

inline GeodeticCoord enu_to_wgs84(const WorldPoint& enu, const GeodeticCoord& origin) {
    return ecef_to_wgs84(enu_to_ecef(enu, origin));
}

inline WorldPoint wgs84_to_enu(const GeodeticCoord& g, const GeodeticCoord& origin) {
    return ecef_to_enu(wgs84_to_ecef(g), origin);
}

inline Vec3 world_to_camera(const WorldCameraTransform& t, const WorldPoint& p) {
    return t.rotation * p + t.translation;
}

inline WorldCameraTransform invert_transform(const WorldCameraTransform& t) {
    return {t.rotation.transpose(), -(t.rotation.transpose() * t.translation)};
}

// Camera optical center expressed in the world frame (last column of ^W T_C).
inline WorldPoint camera_origin_world(const WorldCameraTransform& world_to_cam) {
    return invert_transform(world_to_cam).translation;
}

inline PixelCoord project_camera_point(const CameraIntrinsics& k, const Vec3& pc) {
    if (pc.z() <= 0.0) throw PointBehindCamera(pc.z());
    return {k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy};
}

inline PixelCoord project(const CameraIntrinsics& k, const WorldCameraTransform& t,
                          const WorldPoint& p) {
    return project_camera_point(k, world_to_camera(t, p));
}

// Pixel + z-depth -> camera-frame point; inverse of project at that depth.
inline Vec3 unproject(const CameraIntrinsics& k, const PixelCoord& px, double depth) {
    return {(px.u - k.cx) / k.fx * depth, (px.v - k.cy) / k.fy * depth, depth};
}

}  // namespace viloc::geo
