#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "viloc/calib.hpp"
#include "viloc/geodesy.hpp"
#include "viloc/rng.hpp"

// Synthetic street scenes: smooth random-waypoint pedestrian trajectories and
// the five sensor streams observing them (camera detections, FTM ranging,
// RSSI, 9-axis IMU, GPS), each with a configurable noise model. The world
// frame is the ENU tangent plane anchored at the RSU's geodetic position;
// the camera and RSU share the point (0, 0, camera_height).

namespace viloc::sim {

using geo::CameraIntrinsics;
using geo::GeodeticCoord;
using geo::Mat3;
using geo::PixelCoord;
using geo::Vec3;
using geo::WorldCameraTransform;

struct NoiseConfig {
    // depth error grows linearly from 1% of range to 9% at >= 20 m
    double depth_frac_near = 0.01;
    double depth_frac_far = 0.09;
    double bbox_pixel_std = 3.0;    // [px]
    double ftm_std = 0.6;           // [m]
    double ftm_bias = 0.5;          // [m]
    double imu_accel_std = 0.05;    // [m/s^2]
    double imu_gyro_std = 0.005;    // [rad/s]
    double imu_mag_std = 0.5;       // [uT]
    double gps_white_std = 1.0;     // [m], per fix, per pedestrian
    double gps_bias_std = 3.0;      // [m], scene-shared AR(1) bias, stationary std
    double gps_bias_rho = 0.98;     // AR(1) coefficient, in [0, 1)
    double rssi_p0 = -40.0;         // [dBm] at 1 m
    double rssi_gamma = 2.2;        // path-loss exponent
    double rssi_shadow_std = 4.0;   // [dB]
    double detection_dropout_prob = 0.05;
    double clock_offset_std = 0.1;  // [s], one offset per stream
    double ref_world_std = 1.0;     // [m], survey noise on reference points
    double ref_pixel_std = 2.0;     // [px], annotation noise on reference points

    double depth_noise_frac(double range) const {
        return depth_frac_near +
               (depth_frac_far - depth_frac_near) * std::min(range, 20.0) / 20.0;
    }

    NoiseConfig& zero() {
        bbox_pixel_std = ftm_std = ftm_bias = 0.0;
        imu_accel_std = imu_gyro_std = imu_mag_std = 0.0;
        gps_white_std = gps_bias_std = 0.0;
        rssi_shadow_std = 0.0;
        detection_dropout_prob = clock_offset_std = 0.0;
        ref_world_std = ref_pixel_std = 0.0;
        depth_frac_near = depth_frac_far = 0.0;
        return *this;
    }
};

struct SceneConfig {
    std::string scene_id = "scene";
    double duration = 180.0;  // [s]
    int n_pedestrians = 1;
    GeodeticCoord rsu_geodetic{40.742, -74.175, 10.0};
    double camera_height = 2.6;     // [m] above the world origin
    double camera_yaw_deg = 0.0;    // from north toward east
    double camera_pitch_deg = 12.0; // downward tilt
    CameraIntrinsics intrinsics{1000.0, 1000.0, 960.0, 540.0, 1920, 1080};
    NoiseConfig noise;
    double gps_difficulty = 0.0;  // scales the shared bias by (1 + difficulty)
    // pedestrians walk inside this ground rectangle, in front of the camera
    double walk_min_x = -8.0, walk_max_x = 8.0;
    double walk_min_y = 5.0, walk_max_y = 26.0;
    // > 0 confines each pedestrian to its own depth band, bands this far apart
    double lane_separation = 0.0;
    std::uint64_t seed = 0;
};

struct CameraObs {
    double t = 0.0;
    double u = 0.0, v = 0.0;  // noisy detection center [px]
    double depth = 0.0;       // noisy range along the optical axis [m]
    Vec3 xyz = Vec3::Zero();  // camera-frame position back-projected from (u, v, depth)
};

struct FtmObs {
    double t = 0.0;
    double range = 0.0;  // [m], never negative
    double std = 0.0;    // reported measurement std [m]
};

struct RssiObs {
    double t = 0.0;
    double rssi = 0.0;  // [dBm]
};

struct ImuObs {
    double t = 0.0;
    Vec3 accel = Vec3::Zero();  // body-frame specific force [m/s^2]
    Vec3 gyro = Vec3::Zero();   // body-frame angular rate [rad/s]
    Vec3 mag = Vec3::Zero();    // body-frame field [uT]
};

struct GpsObs {
    double t = 0.0;
    GeodeticCoord fix;
};

struct TruthSample {
    double t = 0.0;
    Vec3 pos = Vec3::Zero();  // world (ENU) [m]
    double heading = 0.0;     // [rad] CCW from east
};

struct RawStreams {
    std::vector<CameraObs> camera;
    std::vector<FtmObs> ftm;
    std::vector<RssiObs> rssi;
    std::vector<ImuObs> imu;
    std::vector<GpsObs> gps;
    std::vector<TruthSample> truth;  // 50 Hz ground truth, noise-free
};

struct CameraSeesNothing : std::runtime_error {
    CameraSeesNothing()
        : std::runtime_error("no pedestrian ever enters the camera field of view") {}
};

// Continuous pedestrian path. heading is the body yaw, which may oscillate
// about the velocity direction; the defaults derive both from the kinematics.
class Trajectory {
  public:
    virtual ~Trajectory() = default;
    virtual double start() const = 0;
    virtual double end() const = 0;
    virtual Vec3 position(double t) const = 0;
    virtual Vec3 velocity(double t) const = 0;
    virtual Vec3 acceleration(double t) const = 0;

    virtual double heading(double t) const {
        const Vec3 v = velocity(t);
        return std::atan2(v.y(), v.x());
    }
    virtual double heading_rate(double t) const {
        const Vec3 v = velocity(t), a = acceleration(t);
        const double h2 = v.x() * v.x() + v.y() * v.y();
        return h2 < 1e-12 ? 0.0 : (v.x() * a.y() - v.y() * a.x()) / h2;
    }
};

namespace detail {

// One quintic segment p(s) = sum c_k s^k, s = (t - t0) / T; endpoint position,
// velocity, and acceleration are interpolated exactly, so chaining segments
// with shared endpoint derivatives yields a C^2 path.
struct QuinticSegment {
    double t0 = 0.0, T = 1.0;
    std::array<Vec3, 6> c{};

    static QuinticSegment fit(double t0, double T, const Vec3& p0, const Vec3& v0, const Vec3& a0,
                              const Vec3& p1, const Vec3& v1, const Vec3& a1) {
        QuinticSegment s;
        s.t0 = t0;
        s.T = T;
        const Vec3 d = p1 - p0;
        s.c[0] = p0;
        s.c[1] = T * v0;
        s.c[2] = 0.5 * T * T * a0;
        s.c[3] = 10.0 * d - T * (6.0 * v0 + 4.0 * v1) - T * T * (1.5 * a0 - 0.5 * a1);
        s.c[4] = -15.0 * d + T * (8.0 * v0 + 7.0 * v1) + T * T * (1.5 * a0 - a1);
        s.c[5] = 6.0 * d - T * (3.0 * v0 + 3.0 * v1) - T * T * (0.5 * a0 - 0.5 * a1);
        return s;
    }

    Vec3 position(double t) const {
        const double s = (t - t0) / T;
        Vec3 p = Vec3::Zero();
        double sk = 1.0;
        for (int k = 0; k <= 5; ++k, sk *= s) p += c[k] * sk;
        return p;
    }
    Vec3 velocity(double t) const {
        const double s = (t - t0) / T;
        Vec3 p = Vec3::Zero();
        double sk = 1.0;
        for (int k = 1; k <= 5; ++k, sk *= s) p += static_cast<double>(k) * c[k] * sk;
        return p / T;
    }
    Vec3 acceleration(double t) const {
        const double s = (t - t0) / T;
        Vec3 p = Vec3::Zero();
        double sk = 1.0;
        for (int k = 2; k <= 5; ++k, sk *= s) p += static_cast<double>(k * (k - 1)) * c[k] * sk;
        return p / (T * T);
    }
};

}  // namespace detail

// Random-waypoint walk smoothed by quintic segments, plus a gait-frequency
// vertical bob on the position and a yaw wobble on the body heading.
class WaypointTrajectory final : public Trajectory {
  public:
    WaypointTrajectory(std::vector<detail::QuinticSegment> segments, double bob_amp,
                       double gait_hz, double bob_phase, double wobble_amp, double wobble_phase)
        : segments_(std::move(segments)),
          bob_amp_(bob_amp),
          gait_omega_(2.0 * M_PI * gait_hz),
          bob_phase_(bob_phase),
          wobble_amp_(wobble_amp),
          wobble_phase_(wobble_phase) {}

    double start() const override { return segments_.front().t0; }
    double end() const override {
        return segments_.back().t0 + segments_.back().T;
    }

    Vec3 position(double t) const override {
        t = clamp_time(t);
        Vec3 p = segment_at(t).position(t);
        p.z() += bob_amp_ * std::sin(gait_omega_ * t + bob_phase_);
        return p;
    }
    Vec3 velocity(double t) const override {
        t = clamp_time(t);
        Vec3 v = segment_at(t).velocity(t);
        v.z() += bob_amp_ * gait_omega_ * std::cos(gait_omega_ * t + bob_phase_);
        return v;
    }
    Vec3 acceleration(double t) const override {
        t = clamp_time(t);
        Vec3 a = segment_at(t).acceleration(t);
        a.z() -= bob_amp_ * gait_omega_ * gait_omega_ * std::sin(gait_omega_ * t + bob_phase_);
        return a;
    }
    double heading(double t) const override {
        t = clamp_time(t);
        return Trajectory::heading(t) +
               wobble_amp_ * std::sin(gait_omega_ * t + wobble_phase_);
    }
    double heading_rate(double t) const override {
        t = clamp_time(t);
        return Trajectory::heading_rate(t) +
               wobble_amp_ * gait_omega_ * std::cos(gait_omega_ * t + wobble_phase_);
    }

  private:
    double clamp_time(double t) const {
        return std::clamp(t, start(), end() - 1e-9);
    }
    const detail::QuinticSegment& segment_at(double t) const {
        // segments are contiguous in time; binary search by start time
        std::size_t lo = 0, hi = segments_.size();
        while (hi - lo > 1) {
            const std::size_t mid = (lo + hi) / 2;
            (segments_[mid].t0 <= t ? lo : hi) = mid;
        }
        return segments_[lo];
    }

    std::vector<detail::QuinticSegment> segments_;
    double bob_amp_, gait_omega_, bob_phase_, wobble_amp_, wobble_phase_;
};

/// World->camera transform for a pole-mounted camera at `position`, yawed from
/// north toward east and pitched down by the given angles.
inline WorldCameraTransform camera_pose(double yaw_deg, double pitch_deg, const Vec3& position) {
    const double yaw = yaw_deg * geo::kDeg2Rad, pitch = pitch_deg * geo::kDeg2Rad;
    const Vec3 fwd(std::sin(yaw) * std::cos(pitch), std::cos(yaw) * std::cos(pitch),
                   -std::sin(pitch));
    const Vec3 right = fwd.cross(Vec3::UnitZ()).normalized();
    const Vec3 down = fwd.cross(right);
    Mat3 r_cw;
    r_cw.col(0) = right;
    r_cw.col(1) = down;
    r_cw.col(2) = fwd;
    WorldCameraTransform t;
    t.rotation = r_cw.transpose();
    t.translation = -t.rotation * position;
    return t;
}

/// Walkable rectangle for one pedestrian; with lane_separation > 0 the walk
/// area splits into disjoint depth bands so camera-frame paths cannot overlap.
struct WalkArea {
    double min_x, max_x, min_y, max_y;
};

inline WalkArea walk_area_for(const SceneConfig& cfg, int ped) {
    WalkArea area{cfg.walk_min_x, cfg.walk_max_x, cfg.walk_min_y, cfg.walk_max_y};
    if (cfg.lane_separation > 0.0 && cfg.n_pedestrians > 1) {
        const int n = cfg.n_pedestrians;
        const double band =
            (cfg.walk_max_y - cfg.walk_min_y - (n - 1) * cfg.lane_separation) / n;
        if (band < 1.0)
            throw std::invalid_argument("walk area too shallow for the lane separation");
        area.min_y = cfg.walk_min_y + ped * (band + cfg.lane_separation);
        area.max_y = area.min_y + band;
    }
    return area;
}

/// Smooth random-waypoint trajectory covering [-2, duration + 2] so streams
/// with clock offsets can sample slightly outside the nominal window.
inline std::shared_ptr<const Trajectory> make_random_trajectory(const SceneConfig& cfg, int ped) {
    auto rng = make_rng(cfg.seed, "sim/traj/" + std::to_string(ped));
    const WalkArea area = walk_area_for(cfg, ped);
    // waypoints keep a margin from the edges so spline overshoot stays inside
    const double inset_x = std::min(1.0, 0.15 * (area.max_x - area.min_x));
    const double inset_y = std::min(1.0, 0.15 * (area.max_y - area.min_y));
    std::uniform_real_distribution<double> ux(area.min_x + inset_x, area.max_x - inset_x);
    std::uniform_real_distribution<double> uy(area.min_y + inset_y, area.max_y - inset_y);
    std::uniform_real_distribution<double> uspeed(0.8, 1.6);
    std::uniform_real_distribution<double> uphase(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> uheight(1.0, 1.25);
    std::uniform_real_distribution<double> ubob(0.015, 0.03);
    std::uniform_real_distribution<double> ugait(1.8, 2.2);
    std::uniform_real_distribution<double> uwobble(0.05, 0.15);

    const double height = uheight(rng);
    std::vector<Vec3> pts{Vec3(ux(rng), uy(rng), height)};
    std::vector<double> speeds;
    double covered = 0.0;
    const double min_hop = std::min(3.0, 0.5 * (area.max_y - area.min_y));
    while (covered < cfg.duration + 4.0) {
        Vec3 next;
        for (int tries = 0;; ++tries) {
            next = Vec3(ux(rng), uy(rng), height);
            if ((next - pts.back()).norm() >= min_hop || tries >= 100) break;
        }
        const double speed = uspeed(rng);
        covered += (next - pts.back()).norm() / speed;
        speeds.push_back(speed);
        pts.push_back(next);
    }

    // endpoint velocities blend adjacent legs so the chained quintics stay C^2;
    // sharp turns get slowed down, which also bounds the overshoot past waypoints
    const std::size_t n = pts.size();
    std::vector<Vec3> vels(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 dir;
        double turn = 1.0;
        if (i == 0)
            dir = (pts[1] - pts[0]).normalized();
        else if (i == n - 1)
            dir = (pts[n - 1] - pts[n - 2]).normalized();
        else {
            const Vec3 in = (pts[i] - pts[i - 1]).normalized();
            const Vec3 out = (pts[i + 1] - pts[i]).normalized();
            dir = in + out;
            dir = dir.norm() < 1e-9 ? in : dir.normalized();
            turn = std::max(0.25, 0.5 * (1.0 + in.dot(out)));
        }
        const double sp = i == 0 ? speeds[0]
                       : i == n - 1 ? speeds[n - 2]
                                    : 0.5 * (speeds[i - 1] + speeds[i]);
        vels[i] = turn * sp * dir;
    }

    std::vector<detail::QuinticSegment> segs;
    double t0 = -2.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double T = std::max(0.5, (pts[i + 1] - pts[i]).norm() / speeds[i]);
        segs.push_back(detail::QuinticSegment::fit(t0, T, pts[i], vels[i], Vec3::Zero(),
                                                   pts[i + 1], vels[i + 1], Vec3::Zero()));
        t0 += T;
    }
    return std::make_shared<WaypointTrajectory>(std::move(segs), ubob(rng), ugait(rng),
                                                uphase(rng), uwobble(rng), uphase(rng));
}

namespace detail {

inline double clock_offset(const SceneConfig& cfg, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    return cfg.noise.clock_offset_std * g(rng);
}

inline Mat3 body_rotation(double heading) {
    // body x forward (along heading), y left, z up; columns are body axes in world
    Mat3 r;
    r << std::cos(heading), -std::sin(heading), 0.0,
         std::sin(heading), std::cos(heading), 0.0,
         0.0, 0.0, 1.0;
    return r;
}

}  // namespace detail

inline std::vector<CameraObs> synthesize_camera(const Trajectory& traj,
                                                const WorldCameraTransform& world_to_cam,
                                                const CameraIntrinsics& k,
                                                const SceneConfig& cfg, int ped) {
    auto rng = make_rng(cfg.seed, "sim/camera/" + std::to_string(ped));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double offset = detail::clock_offset(cfg, rng);

    std::vector<CameraObs> out;
    const int ticks = static_cast<int>(cfg.duration * 3.0);
    for (int i = 0; i <= ticks; ++i) {
        const double t = i / 3.0;
        const Vec3 pc = geo::world_to_camera(world_to_cam, traj.position(t + offset));
        if (pc.z() <= 0.2) continue;
        const PixelCoord true_px = geo::project_camera_point(k, pc);
        if (true_px.u < 0.0 || true_px.u > k.width || true_px.v < 0.0 || true_px.v > k.height)
            continue;
        if (unit(rng) < cfg.noise.detection_dropout_prob) continue;

        CameraObs obs;
        obs.t = t;
        obs.u = true_px.u + cfg.noise.bbox_pixel_std * gauss(rng);
        obs.v = true_px.v + cfg.noise.bbox_pixel_std * gauss(rng);
        obs.depth = pc.z() * (1.0 + cfg.noise.depth_noise_frac(pc.z()) * gauss(rng));
        if (obs.depth <= 0.0) continue;
        obs.xyz = geo::unproject(k, {obs.u, obs.v}, obs.depth);
        out.push_back(obs);
    }
    return out;
}

inline std::vector<FtmObs> synthesize_ftm(const Trajectory& traj, const Vec3& rsu_world,
                                          const SceneConfig& cfg, int ped) {
    auto rng = make_rng(cfg.seed, "sim/ftm/" + std::to_string(ped));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double offset = detail::clock_offset(cfg, rng);

    std::vector<FtmObs> out;
    const int ticks = static_cast<int>(cfg.duration * 3.0);
    for (int i = 0; i <= ticks; ++i) {
        const double t = i / 3.0;
        const double d = (traj.position(t + offset) - rsu_world).norm();
        const double r = d + cfg.noise.ftm_bias + cfg.noise.ftm_std * gauss(rng);
        out.push_back({t, std::max(0.0, r), cfg.noise.ftm_std});
    }
    return out;
}

inline std::vector<RssiObs> synthesize_rssi(const Trajectory& traj, const Vec3& rsu_world,
                                            const SceneConfig& cfg, int ped) {
    auto rng = make_rng(cfg.seed, "sim/rssi/" + std::to_string(ped));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double offset = detail::clock_offset(cfg, rng);

    std::vector<RssiObs> out;
    const int ticks = static_cast<int>(cfg.duration * 3.0);
    for (int i = 0; i <= ticks; ++i) {
        const double t = i / 3.0;
        const double d = (traj.position(t + offset) - rsu_world).norm();
        const double rssi = cfg.noise.rssi_p0 -
                            10.0 * cfg.noise.rssi_gamma * std::log10(std::max(d, 0.1)) +
                            cfg.noise.rssi_shadow_std * gauss(rng);
        out.push_back({t, rssi});
    }
    return out;
}

inline std::vector<ImuObs> synthesize_imu(const Trajectory& traj, const SceneConfig& cfg,
                                          int ped) {
    auto rng = make_rng(cfg.seed, "sim/imu/" + std::to_string(ped));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double offset = detail::clock_offset(cfg, rng);
    const Vec3 gravity(0.0, 0.0, 9.81);
    const Vec3 north_field(0.0, 50.0, 0.0);  // [uT]

    std::vector<ImuObs> out;
    const int ticks = static_cast<int>(cfg.duration * 50.0);
    out.reserve(ticks + 1);
    for (int i = 0; i <= ticks; ++i) {
        const double t = i / 50.0;
        const double ts = t + offset;
        const Mat3 r_wb = detail::body_rotation(traj.heading(ts));
        ImuObs obs;
        obs.t = t;
        obs.accel = r_wb.transpose() * (traj.acceleration(ts) + gravity);
        obs.gyro = Vec3(0.0, 0.0, traj.heading_rate(ts));
        obs.mag = r_wb.transpose() * north_field;
        for (int a = 0; a < 3; ++a) {
            obs.accel(a) += cfg.noise.imu_accel_std * gauss(rng);
            obs.gyro(a) += cfg.noise.imu_gyro_std * gauss(rng);
            obs.mag(a) += cfg.noise.imu_mag_std * gauss(rng);
        }
        out.push_back(obs);
    }
    return out;
}

/// GPS for all pedestrians at once: the AR(1) bias sequence is drawn once per
/// scene and shared, which is the error correlation the generator must learn.
inline std::vector<std::vector<GpsObs>> synthesize_gps(
    const std::vector<const Trajectory*>& trajs, const SceneConfig& cfg) {
    auto bias_rng = make_rng(cfg.seed, "sim/gps/bias");
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int ticks = static_cast<int>(cfg.duration);
    const double rho = cfg.noise.gps_bias_rho;
    const double sigma = cfg.noise.gps_bias_std * (1.0 + cfg.gps_difficulty);
    const double innovation = sigma * std::sqrt(std::max(0.0, 1.0 - rho * rho));

    std::vector<Vec3> bias(ticks + 1);
    for (int a = 0; a < 3; ++a) bias[0](a) = sigma * gauss(bias_rng);
    for (int i = 1; i <= ticks; ++i)
        for (int a = 0; a < 3; ++a) bias[i](a) = rho * bias[i - 1](a) + innovation * gauss(bias_rng);

    std::vector<std::vector<GpsObs>> out(trajs.size());
    for (std::size_t ped = 0; ped < trajs.size(); ++ped) {
        auto rng = make_rng(cfg.seed, "sim/gps/" + std::to_string(ped));
        const double offset = detail::clock_offset(cfg, rng);
        out[ped].reserve(ticks + 1);
        for (int i = 0; i <= ticks; ++i) {
            const double t = static_cast<double>(i);
            Vec3 p = trajs[ped]->position(t + offset) + bias[i];
            for (int a = 0; a < 3; ++a) p(a) += cfg.noise.gps_white_std * gauss(rng);
            out[ped].push_back({t, geo::enu_to_wgs84(p, cfg.rsu_geodetic)});
        }
    }
    return out;
}

struct Scene {
    SceneConfig config;
    WorldCameraTransform world_to_camera;  // true extrinsics
    Vec3 rsu_world = Vec3::Zero();
    std::vector<calib::ReferencePoint> refs;  // surveyed (noise included)
    std::vector<RawStreams> streams;          // one per pedestrian
    // analytic paths; empty when a scene is loaded back from disk
    std::vector<std::shared_ptr<const Trajectory>> trajectories;
};

/// Six surveyed landmarks: pixels from a jittered 3x2 grid (well spread, never
/// collinear) at random depths, back-projected into the world through the true
/// transform, then corrupted by the configured survey noise.
inline std::vector<calib::ReferencePoint> place_reference_points(
    const SceneConfig& cfg, const WorldCameraTransform& world_to_cam) {
    auto rng = make_rng(cfg.seed, "sim/refs");
    std::uniform_real_distribution<double> jitter(-0.08, 0.08);
    std::uniform_real_distribution<double> udepth(4.0, 28.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const WorldCameraTransform cam_to_world = geo::invert_transform(world_to_cam);

    std::vector<calib::ReferencePoint> refs;
    for (double fu : {0.25, 0.5, 0.75})
        for (double fv : {0.35, 0.65}) {
            const PixelCoord px{(fu + jitter(rng)) * cfg.intrinsics.width,
                                (fv + jitter(rng)) * cfg.intrinsics.height};
            const Vec3 pc = geo::unproject(cfg.intrinsics, px, udepth(rng));
            calib::ReferencePoint r;
            r.world = geo::world_to_camera(cam_to_world, pc) +
                      cfg.noise.ref_world_std * Vec3(gauss(rng), gauss(rng), gauss(rng));
            r.pixel = {px.u + cfg.noise.ref_pixel_std * gauss(rng),
                       px.v + cfg.noise.ref_pixel_std * gauss(rng)};
            refs.push_back(r);
        }
    return refs;
}

inline Scene generate_scene(const SceneConfig& cfg) {
    if (cfg.duration <= 0.0) throw std::invalid_argument("duration must be positive");
    if (cfg.n_pedestrians < 1) throw std::invalid_argument("need at least one pedestrian");

    Scene scene;
    scene.config = cfg;
    scene.rsu_world = Vec3(0.0, 0.0, cfg.camera_height);
    scene.world_to_camera = camera_pose(cfg.camera_yaw_deg, cfg.camera_pitch_deg, scene.rsu_world);
    scene.refs = place_reference_points(cfg, scene.world_to_camera);

    std::vector<const Trajectory*> traj_ptrs;
    for (int ped = 0; ped < cfg.n_pedestrians; ++ped) {
        scene.trajectories.push_back(make_random_trajectory(cfg, ped));
        traj_ptrs.push_back(scene.trajectories.back().get());
    }

    auto gps = synthesize_gps(traj_ptrs, cfg);
    bool any_visible = false;
    for (int ped = 0; ped < cfg.n_pedestrians; ++ped) {
        const Trajectory& traj = *traj_ptrs[ped];
        RawStreams s;
        s.camera = synthesize_camera(traj, scene.world_to_camera, cfg.intrinsics, cfg, ped);
        s.ftm = synthesize_ftm(traj, scene.rsu_world, cfg, ped);
        s.rssi = synthesize_rssi(traj, scene.rsu_world, cfg, ped);
        s.imu = synthesize_imu(traj, cfg, ped);
        s.gps = std::move(gps[ped]);

        const int truth_ticks = static_cast<int>(cfg.duration * 50.0);
        s.truth.reserve(truth_ticks + 1);
        for (int i = 0; i <= truth_ticks; ++i) {
            const double t = i / 50.0;
            s.truth.push_back({t, traj.position(t), traj.heading(t)});
        }

        // visibility is checked pre-dropout so a noisy-but-visible scene is kept
        for (int i = 0; i <= static_cast<int>(cfg.duration * 3.0) && !any_visible; ++i) {
            const Vec3 pc = geo::world_to_camera(scene.world_to_camera, traj.position(i / 3.0));
            if (pc.z() <= 0.2) continue;
            const PixelCoord px = geo::project_camera_point(cfg.intrinsics, pc);
            any_visible = px.u >= 0.0 && px.u <= cfg.intrinsics.width && px.v >= 0.0 &&
                          px.v <= cfg.intrinsics.height;
        }
        scene.streams.push_back(std::move(s));
    }
    if (!any_visible) throw CameraSeesNothing();
    return scene;
}

// ---- scene directory serialization ----------------------------------------

namespace detail {

using nlohmann::json;

inline json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
inline Vec3 json_vec3(const json& j) { return Vec3(j.at(0), j.at(1), j.at(2)); }

inline json config_json(const SceneConfig& c) {
    const NoiseConfig& n = c.noise;
    return json{{"scene_id", c.scene_id},
                {"duration", c.duration},
                {"n_pedestrians", c.n_pedestrians},
                {"rsu_geodetic",
                 {{"lat", c.rsu_geodetic.lat_deg},
                  {"lon", c.rsu_geodetic.lon_deg},
                  {"alt", c.rsu_geodetic.alt_m}}},
                {"camera_height", c.camera_height},
                {"camera_yaw_deg", c.camera_yaw_deg},
                {"camera_pitch_deg", c.camera_pitch_deg},
                {"intrinsics",
                 {{"fx", c.intrinsics.fx},
                  {"fy", c.intrinsics.fy},
                  {"cx", c.intrinsics.cx},
                  {"cy", c.intrinsics.cy},
                  {"width", c.intrinsics.width},
                  {"height", c.intrinsics.height}}},
                {"noise",
                 {{"depth_frac_near", n.depth_frac_near},
                  {"depth_frac_far", n.depth_frac_far},
                  {"bbox_pixel_std", n.bbox_pixel_std},
                  {"ftm_std", n.ftm_std},
                  {"ftm_bias", n.ftm_bias},
                  {"imu_accel_std", n.imu_accel_std},
                  {"imu_gyro_std", n.imu_gyro_std},
                  {"imu_mag_std", n.imu_mag_std},
                  {"gps_white_std", n.gps_white_std},
                  {"gps_bias_std", n.gps_bias_std},
                  {"gps_bias_rho", n.gps_bias_rho},
                  {"rssi_p0", n.rssi_p0},
                  {"rssi_gamma", n.rssi_gamma},
                  {"rssi_shadow_std", n.rssi_shadow_std},
                  {"detection_dropout_prob", n.detection_dropout_prob},
                  {"clock_offset_std", n.clock_offset_std},
                  {"ref_world_std", n.ref_world_std},
                  {"ref_pixel_std", n.ref_pixel_std}}},
                {"gps_difficulty", c.gps_difficulty},
                {"walk_min_x", c.walk_min_x},
                {"walk_max_x", c.walk_max_x},
                {"walk_min_y", c.walk_min_y},
                {"walk_max_y", c.walk_max_y},
                {"lane_separation", c.lane_separation},
                {"seed", c.seed}};
}

inline SceneConfig config_from_json(const json& j) {
    SceneConfig c;
    c.scene_id = j.at("scene_id");
    c.duration = j.at("duration");
    c.n_pedestrians = j.at("n_pedestrians");
    c.rsu_geodetic = {j.at("rsu_geodetic").at("lat"), j.at("rsu_geodetic").at("lon"),
                      j.at("rsu_geodetic").at("alt")};
    c.camera_height = j.at("camera_height");
    c.camera_yaw_deg = j.at("camera_yaw_deg");
    c.camera_pitch_deg = j.at("camera_pitch_deg");
    const json& k = j.at("intrinsics");
    c.intrinsics = {k.at("fx"), k.at("fy"), k.at("cx"), k.at("cy"), k.at("width"), k.at("height")};
    const json& n = j.at("noise");
    c.noise.depth_frac_near = n.at("depth_frac_near");
    c.noise.depth_frac_far = n.at("depth_frac_far");
    c.noise.bbox_pixel_std = n.at("bbox_pixel_std");
    c.noise.ftm_std = n.at("ftm_std");
    c.noise.ftm_bias = n.at("ftm_bias");
    c.noise.imu_accel_std = n.at("imu_accel_std");
    c.noise.imu_gyro_std = n.at("imu_gyro_std");
    c.noise.imu_mag_std = n.at("imu_mag_std");
    c.noise.gps_white_std = n.at("gps_white_std");
    c.noise.gps_bias_std = n.at("gps_bias_std");
    c.noise.gps_bias_rho = n.at("gps_bias_rho");
    c.noise.rssi_p0 = n.at("rssi_p0");
    c.noise.rssi_gamma = n.at("rssi_gamma");
    c.noise.rssi_shadow_std = n.at("rssi_shadow_std");
    c.noise.detection_dropout_prob = n.at("detection_dropout_prob");
    c.noise.clock_offset_std = n.at("clock_offset_std");
    c.noise.ref_world_std = n.at("ref_world_std");
    c.noise.ref_pixel_std = n.at("ref_pixel_std");
    c.gps_difficulty = j.at("gps_difficulty");
    c.walk_min_x = j.at("walk_min_x");
    c.walk_max_x = j.at("walk_max_x");
    c.walk_min_y = j.at("walk_min_y");
    c.walk_max_y = j.at("walk_max_y");
    c.lane_separation = j.at("lane_separation");
    c.seed = j.at("seed");
    return c;
}

}  // namespace detail

inline void write_scene(const Scene& scene, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    using nlohmann::json;
    fs::create_directories(dir);

    json root = detail::config_json(scene.config);
    json rot = json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot.push_back(scene.world_to_camera.rotation(r, c));
    root["world_to_camera"] = {{"rotation", rot},
                               {"translation", detail::vec3_json(scene.world_to_camera.translation)}};
    root["rsu_world"] = detail::vec3_json(scene.rsu_world);
    json refs = json::array();
    for (const auto& r : scene.refs)
        refs.push_back({{"world", detail::vec3_json(r.world)}, {"pixel", {r.pixel.u, r.pixel.v}}});
    root["reference_points"] = refs;
    std::ofstream(dir / "scene.json") << root.dump(2) << '\n';

    for (std::size_t ped = 0; ped < scene.streams.size(); ++ped) {
        const fs::path pdir = dir / "streams" / std::to_string(ped);
        fs::create_directories(pdir);
        const RawStreams& s = scene.streams[ped];

        std::ofstream cam(pdir / "camera.jsonl");
        for (const auto& o : s.camera)
            cam << json{{"t", o.t}, {"u", o.u}, {"v", o.v}, {"depth", o.depth},
                        {"xyz", detail::vec3_json(o.xyz)}}
                       .dump()
                << '\n';
        std::ofstream ftm(pdir / "ftm.jsonl");
        for (const auto& o : s.ftm)
            ftm << json{{"t", o.t}, {"range", o.range}, {"std", o.std}}.dump() << '\n';
        std::ofstream rssi(pdir / "rssi.jsonl");
        for (const auto& o : s.rssi) rssi << json{{"t", o.t}, {"rssi", o.rssi}}.dump() << '\n';
        std::ofstream imu(pdir / "imu.jsonl");
        for (const auto& o : s.imu)
            imu << json{{"t", o.t}, {"accel", detail::vec3_json(o.accel)},
                        {"gyro", detail::vec3_json(o.gyro)}, {"mag", detail::vec3_json(o.mag)}}
                       .dump()
                << '\n';
        std::ofstream gps(pdir / "gps.jsonl");
        for (const auto& o : s.gps)
            gps << json{{"t", o.t}, {"lat", o.fix.lat_deg}, {"lon", o.fix.lon_deg},
                        {"alt", o.fix.alt_m}}
                       .dump()
                << '\n';
        std::ofstream truth(pdir / "truth.jsonl");
        for (const auto& o : s.truth)
            truth << json{{"t", o.t}, {"pos", detail::vec3_json(o.pos)}, {"heading", o.heading}}
                         .dump()
                  << '\n';
    }
}

inline Scene read_scene(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    using nlohmann::json;

    std::ifstream in(dir / "scene.json");
    if (!in) throw std::runtime_error("missing scene.json in " + dir.string());
    json root = json::parse(in);

    Scene scene;
    scene.config = detail::config_from_json(root);
    const json& t = root.at("world_to_camera");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            scene.world_to_camera.rotation(r, c) = t.at("rotation").at(3 * r + c);
    scene.world_to_camera.translation = detail::json_vec3(t.at("translation"));
    scene.rsu_world = detail::json_vec3(root.at("rsu_world"));
    for (const json& r : root.at("reference_points")) {
        calib::ReferencePoint ref;
        ref.world = detail::json_vec3(r.at("world"));
        ref.pixel = {r.at("pixel").at(0), r.at("pixel").at(1)};
        scene.refs.push_back(ref);
    }

    for (int ped = 0; ped < scene.config.n_pedestrians; ++ped) {
        const fs::path pdir = dir / "streams" / std::to_string(ped);
        RawStreams s;
        std::string line;

        std::ifstream cam(pdir / "camera.jsonl");
        while (std::getline(cam, line)) {
            json j = json::parse(line);
            s.camera.push_back(
                {j.at("t"), j.at("u"), j.at("v"), j.at("depth"), detail::json_vec3(j.at("xyz"))});
        }
        std::ifstream ftm(pdir / "ftm.jsonl");
        while (std::getline(ftm, line)) {
            json j = json::parse(line);
            s.ftm.push_back({j.at("t"), j.at("range"), j.at("std")});
        }
        std::ifstream rssi(pdir / "rssi.jsonl");
        while (std::getline(rssi, line)) {
            json j = json::parse(line);
            s.rssi.push_back({j.at("t"), j.at("rssi")});
        }
        std::ifstream imu(pdir / "imu.jsonl");
        while (std::getline(imu, line)) {
            json j = json::parse(line);
            s.imu.push_back({j.at("t"), detail::json_vec3(j.at("accel")),
                             detail::json_vec3(j.at("gyro")), detail::json_vec3(j.at("mag"))});
        }
        std::ifstream gps(pdir / "gps.jsonl");
        while (std::getline(gps, line)) {
            json j = json::parse(line);
            s.gps.push_back({j.at("t"), GeodeticCoord{j.at("lat"), j.at("lon"), j.at("alt")}});
        }
        std::ifstream truth(pdir / "truth.jsonl");
        while (std::getline(truth, line)) {
            json j = json::parse(line);
            s.truth.push_back({j.at("t"), detail::json_vec3(j.at("pos")), j.at("heading")});
        }
        scene.streams.push_back(std::move(s));
    }
    return scene;
}

}  // namespace viloc::sim
