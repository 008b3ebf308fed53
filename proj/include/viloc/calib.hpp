#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "viloc/geodesy.hpp"
#include "viloc/rng.hpp"

// Camera extrinsic calibration from surveyed 3D-2D reference points:
// a three-point resection solver (quartic in a distance ratio), an exhaustive
// 4-subset wrapper selecting the candidate with the lowest full-set
// reprojection error, and seeded perturbation of a calibrated transform.

namespace viloc::calib {

using geo::CameraIntrinsics;
using geo::Mat3;
using geo::PixelCoord;
using geo::Vec3;
using geo::WorldCameraTransform;
using geo::WorldPoint;

struct ReferencePoint {
    WorldPoint world;
    PixelCoord pixel;
};

struct CalibrationResult {
    WorldCameraTransform transform;  // world -> camera
    double reprojection_avg = 0.0;   // [px]
    double reprojection_std = 0.0;   // [px]
    std::optional<double> rsu_error; // [m], only when a surveyed RSU is given
};

struct PerturbationSpec {
    double sigma_theta_deg = 0.0;  // std of each axis rotation angle
    double sigma_t_m = 0.0;        // std of each translation component
    std::uint64_t seed = 0;
};

struct DegenerateConfiguration : std::runtime_error {
    explicit DegenerateConfiguration(const std::string& what) : std::runtime_error(what) {}
};

struct NoRealSolution : std::runtime_error {
    NoRealSolution() : std::runtime_error("P3P system has no real solution") {}
};

struct AllSubsetsDegenerate : std::runtime_error {
    AllSubsetsDegenerate() : std::runtime_error("every 4-point subset is degenerate") {}
};

namespace detail {

// Real roots of c4 x^4 + ... + c0 via the companion matrix, Newton-polished.
inline std::vector<double> real_quartic_roots(std::array<double, 5> c) {
    double scale = 0.0;
    for (double v : c) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return {};
    for (double& v : c) v /= scale;

    // trim a vanishing leading coefficient (degenerate geometry -> lower degree)
    int deg = 4;
    while (deg > 0 && std::abs(c[deg]) < 1e-13) --deg;
    if (deg == 0) return {};

    Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
    for (int i = 0; i < deg; ++i) companion(0, i) = -c[deg - 1 - i] / c[deg];
    companion.bottomLeftCorner(deg - 1, deg - 1).setIdentity();

    Eigen::EigenSolver<Eigen::MatrixXd> es(companion, false);
    std::vector<double> roots;
    for (int i = 0; i < deg; ++i) {
        std::complex<double> r = es.eigenvalues()[i];
        if (std::abs(r.imag()) > 1e-7 * (1.0 + std::abs(r.real()))) continue;
        double x = r.real();
        for (int it = 0; it < 3; ++it) {  // Newton polish on the original polynomial
            double f = 0.0, df = 0.0;
            for (int k = deg; k >= 1; --k) {
                f = f * x + c[k];
                df = df * x + k * c[k];
            }
            f = f * x + c[0];
            if (df != 0.0) x -= f / df;
        }
        roots.push_back(x);
    }
    std::sort(roots.begin(), roots.end());
    return roots;
}

// Rigid alignment camera = R * world + t for exactly matched point sets
// (Kabsch on centroids; points are guaranteed non-collinear by the caller).
inline WorldCameraTransform align_points(const std::array<Vec3, 3>& world,
                                         const std::array<Vec3, 3>& camera) {
    Vec3 cw = (world[0] + world[1] + world[2]) / 3.0;
    Vec3 cc = (camera[0] + camera[1] + camera[2]) / 3.0;
    Mat3 h = Mat3::Zero();
    for (int i = 0; i < 3; ++i) h += (world[i] - cw) * (camera[i] - cc).transpose();
    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() > 0 ? 1.0 : -1.0;
    Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
    return {r, cc - r * cw};
}

// Gauss-Newton refinement of the three camera-frame distances on the
// law-of-cosines system; tightens quartic-root solutions to ~1e-12 residual.
inline void refine_distances(Vec3& s, double a2, double b2, double c2, double ca, double cb,
                             double cg) {
    for (int it = 0; it < 12; ++it) {
        Vec3 f(s(1) * s(1) + s(2) * s(2) - 2.0 * s(1) * s(2) * ca - a2,
               s(0) * s(0) + s(2) * s(2) - 2.0 * s(0) * s(2) * cb - b2,
               s(0) * s(0) + s(1) * s(1) - 2.0 * s(0) * s(1) * cg - c2);
        Mat3 j;
        j << 0.0, 2.0 * (s(1) - s(2) * ca), 2.0 * (s(2) - s(1) * ca),
             2.0 * (s(0) - s(2) * cb), 0.0, 2.0 * (s(2) - s(0) * cb),
             2.0 * (s(0) - s(1) * cg), 2.0 * (s(1) - s(0) * cg), 0.0;
        Vec3 step = j.fullPivLu().solve(f);
        if (!step.allFinite()) return;
        s -= step;
        if (f.cwiseAbs().maxCoeff() < 1e-14 * std::max(1.0, a2)) return;
    }
}

inline double reprojection_of(const WorldCameraTransform& t, const CameraIntrinsics& k,
                              const ReferencePoint& ref) {
    Vec3 pc = geo::world_to_camera(t, ref.world);
    if (pc.z() <= 0.0) return std::numeric_limits<double>::infinity();
    PixelCoord px = geo::project_camera_point(k, pc);
    return std::hypot(px.u - ref.pixel.u, px.v - ref.pixel.v);
}

}  // namespace detail

/// Perspective-three-point resection. Solves for the world->camera transform
/// from 3 correspondences, returning every real solution ranked by the
/// reprojection error of the 4th (validation) point, best first.
inline std::vector<WorldCameraTransform> solve_p3p(const std::array<ReferencePoint, 3>& points,
                                                   const ReferencePoint& validation,
                                                   const CameraIntrinsics& k) {
    const Vec3 p1 = points[0].world, p2 = points[1].world, p3 = points[2].world;

    const double span = std::max({(p2 - p1).norm(), (p3 - p1).norm(), (p3 - p2).norm()});
    if (span <= 0.0 || (p2 - p1).cross(p3 - p1).norm() < 1e-9 * span * span)
        throw DegenerateConfiguration("collinear world points");

    const Mat3 kinv = k.matrix().inverse();
    std::array<Vec3, 3> ray;
    for (int i = 0; i < 3; ++i)
        ray[i] = (kinv * Vec3(points[i].pixel.u, points[i].pixel.v, 1.0)).normalized();
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            if (ray[i].dot(ray[j]) > 1.0 - 1e-12)
                throw DegenerateConfiguration("coincident bearing rays");

    const double a = (p2 - p3).norm(), b = (p1 - p3).norm(), c = (p1 - p2).norm();
    const double ca = ray[1].dot(ray[2]);  // cos(angle at camera between rays 2,3)
    const double cb = ray[0].dot(ray[2]);
    const double cg = ray[0].dot(ray[1]);
    const double a2 = a * a, b2 = b * b, c2 = c * c;
    const double m = a2 / b2, q = c2 / b2;

    // Grunert: s2 = u*s1, s3 = v*s1; eliminating u yields a quartic in v:
    //   N(v)^2 - 2*cg*N(v)*D(v) + E(v)*D(v)^2 = 0
    // with N = (m-q-1)v^2 - 2(m-q)cb v + (m-q+1), D = 2(cg - v*ca),
    //      E = -q v^2 + 2q cb v + (1-q).
    const std::array<double, 3> nn{m - q + 1.0, -2.0 * (m - q) * cb, m - q - 1.0};
    const std::array<double, 2> dd{2.0 * cg, -2.0 * ca};
    const std::array<double, 3> ee{1.0 - q, 2.0 * q * cb, -q};

    std::array<double, 5> quartic{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) quartic[i + j] += nn[i] * nn[j];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) quartic[i + j] -= 2.0 * cg * nn[i] * dd[j];
    std::array<double, 3> d2{dd[0] * dd[0], 2.0 * dd[0] * dd[1], dd[1] * dd[1]};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) quartic[i + j] += ee[i] * d2[j];

    std::vector<Vec3> distance_sets;
    for (double v : detail::real_quartic_roots(quartic)) {
        if (!(v > 1e-9)) continue;
        const double denom = 1.0 + v * v - 2.0 * v * cb;
        if (denom <= 0.0) continue;
        const double s1 = b / std::sqrt(denom);
        const double s3 = v * s1;
        // remaining law-of-cosines equation is quadratic in s2
        const double disc = s1 * s1 * (cg * cg - 1.0) + c2;
        if (disc < 0.0) continue;
        for (double sgn : {-1.0, 1.0}) {
            double s2 = s1 * cg + sgn * std::sqrt(disc);
            if (!(s2 > 1e-9)) continue;
            Vec3 s(s1, s2, s3);
            detail::refine_distances(s, a2, b2, c2, ca, cb, cg);
            if (!(s.minCoeff() > 0.0)) continue;
            // accept only fully converged solutions of all three equations
            const double scale = std::max({1.0, a2, b2, c2});
            const Vec3 res(s(1) * s(1) + s(2) * s(2) - 2.0 * s(1) * s(2) * ca - a2,
                           s(0) * s(0) + s(2) * s(2) - 2.0 * s(0) * s(2) * cb - b2,
                           s(0) * s(0) + s(1) * s(1) - 2.0 * s(0) * s(1) * cg - c2);
            if (res.cwiseAbs().maxCoeff() > 1e-9 * scale) continue;
            bool dup = false;
            for (const Vec3& prev : distance_sets)
                if ((prev - s).cwiseAbs().maxCoeff() < 1e-7 * std::max(1.0, s.maxCoeff())) dup = true;
            if (!dup) distance_sets.push_back(s);
        }
    }
    if (distance_sets.empty()) throw NoRealSolution();

    std::vector<std::pair<double, WorldCameraTransform>> ranked;
    for (const Vec3& s : distance_sets) {
        std::array<Vec3, 3> cam_pts{s(0) * ray[0], s(1) * ray[1], s(2) * ray[2]};
        WorldCameraTransform t =
            detail::align_points({p1, p2, p3}, cam_pts);
        ranked.emplace_back(detail::reprojection_of(t, k, validation), t);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& x, const auto& y) { return x.first < y.first; });

    std::vector<WorldCameraTransform> out;
    out.reserve(ranked.size());
    for (auto& [err, t] : ranked) out.push_back(t);
    return out;
}

/// Mean and population std of per-point reprojection error [px].
inline std::pair<double, double> reprojection_error(const WorldCameraTransform& t,
                                                    const CameraIntrinsics& k,
                                                    const std::vector<ReferencePoint>& refs) {
    std::vector<double> errs;
    errs.reserve(refs.size());
    for (const ReferencePoint& r : refs) {
        Vec3 pc = geo::world_to_camera(t, r.world);
        if (pc.z() <= 0.0) throw geo::PointBehindCamera(pc.z());
        PixelCoord px = geo::project_camera_point(k, pc);
        errs.push_back(std::hypot(px.u - r.pixel.u, px.v - r.pixel.v));
    }
    double avg = 0.0;
    for (double e : errs) avg += e;
    avg /= static_cast<double>(errs.size());
    double var = 0.0;
    for (double e : errs) var += (e - avg) * (e - avg);
    var /= static_cast<double>(errs.size());
    return {avg, std::sqrt(var)};
}

/// Enumerates every 4-point subset (3 solving + 1 validation), scores every
/// candidate pose by full-set reprojection error, and returns the global
/// minimizer. Ties go to the earliest subset in lexicographic index order.
inline CalibrationResult calibrate_scene(const std::vector<ReferencePoint>& refs,
                                         const CameraIntrinsics& k,
                                         const std::optional<WorldPoint>& surveyed_rsu = {}) {
    const int n = static_cast<int>(refs.size());
    if (n < 4) throw std::invalid_argument("calibrate_scene needs at least 4 reference points");

    double best_score = std::numeric_limits<double>::infinity();
    std::optional<WorldCameraTransform> best;

    std::array<int, 4> idx{};
    for (idx[0] = 0; idx[0] < n; ++idx[0])
        for (idx[1] = idx[0] + 1; idx[1] < n; ++idx[1])
            for (idx[2] = idx[1] + 1; idx[2] < n; ++idx[2])
                for (idx[3] = idx[2] + 1; idx[3] < n; ++idx[3]) {
                    // solve every triple of the subset, the 4th point validating,
                    // so the candidate pool does not depend on input ordering
                    std::vector<WorldCameraTransform> candidates;
                    for (int skip = 0; skip < 4; ++skip) {
                        std::array<ReferencePoint, 3> tri;
                        int w = 0;
                        for (int i = 0; i < 4; ++i)
                            if (i != skip) tri[w++] = refs[idx[i]];
                        try {
                            auto sols = solve_p3p(tri, refs[idx[skip]], k);
                            candidates.insert(candidates.end(), sols.begin(), sols.end());
                        } catch (const DegenerateConfiguration&) {
                        } catch (const NoRealSolution&) {
                        }
                    }
                    for (const WorldCameraTransform& t : candidates) {
                        double total = 0.0;
                        for (const ReferencePoint& r : refs) {
                            total += detail::reprojection_of(t, k, r);
                            if (!std::isfinite(total)) break;
                        }
                        if (total < best_score) {
                            best_score = total;
                            best = t;
                        }
                    }
                }

    if (!best) throw AllSubsetsDegenerate();

    CalibrationResult result;
    result.transform = *best;
    std::tie(result.reprojection_avg, result.reprojection_std) =
        reprojection_error(*best, k, refs);
    if (surveyed_rsu)
        result.rsu_error = (geo::camera_origin_world(*best) - *surveyed_rsu).norm();
    return result;
}

namespace detail {

inline Mat3 axis_rotations_zyx(double tx, double ty, double tz) {
    Mat3 rx, ry, rz;
    rx << 1, 0, 0, 0, std::cos(tx), -std::sin(tx), 0, std::sin(tx), std::cos(tx);
    ry << std::cos(ty), 0, std::sin(ty), 0, 1, 0, -std::sin(ty), 0, std::cos(ty);
    rz << std::cos(tz), -std::sin(tz), 0, std::sin(tz), std::cos(tz), 0, 0, 0, 1;
    return rz * ry * rx;
}

// nearest rotation via polar decomposition
inline Mat3 orthonormalize(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() > 0 ? 1.0 : -1.0;
    return svd.matrixU() * d * svd.matrixV().transpose();
}

}  // namespace detail

/// Applies a seeded random rotation (world-axis angles ~ N(0, sigma_theta^2),
/// composed Z*Y*X) and translation (~ N(0, sigma_t^2 I)) to a camera->world
/// transform, then re-orthonormalizes the rotation.
inline WorldCameraTransform perturb_transform(const WorldCameraTransform& cam_to_world,
                                              const PerturbationSpec& spec) {
    auto rng = make_rng(spec.seed, "calib/perturb");
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double sr = spec.sigma_theta_deg * geo::kDeg2Rad;
    const double tx = sr * gauss(rng), ty = sr * gauss(rng), tz = sr * gauss(rng);
    Vec3 tp(spec.sigma_t_m * gauss(rng), spec.sigma_t_m * gauss(rng), spec.sigma_t_m * gauss(rng));

    WorldCameraTransform out;
    out.rotation =
        detail::orthonormalize(detail::axis_rotations_zyx(tx, ty, tz) * cam_to_world.rotation);
    out.translation = cam_to_world.translation + tp;
    return out;
}

}  // namespace viloc::calib
