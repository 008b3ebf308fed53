#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "viloc/sim.hpp"

using namespace viloc;
using geo::Vec3;

namespace {

struct StillTrajectory final : sim::Trajectory {
    Vec3 p;
    explicit StillTrajectory(const Vec3& pos) : p(pos) {}
    double start() const override { return -1e6; }
    double end() const override { return 1e6; }
    Vec3 position(double) const override { return p; }
    Vec3 velocity(double) const override { return Vec3::Zero(); }
    Vec3 acceleration(double) const override { return Vec3::Zero(); }
};

struct CircleTrajectory final : sim::Trajectory {
    double r, omega;
    CircleTrajectory(double radius, double w) : r(radius), omega(w) {}
    double start() const override { return -1e6; }
    double end() const override { return 1e6; }
    Vec3 position(double t) const override {
        return {r * std::cos(omega * t), r * std::sin(omega * t), 1.1};
    }
    Vec3 velocity(double t) const override {
        return {-r * omega * std::sin(omega * t), r * omega * std::cos(omega * t), 0.0};
    }
    Vec3 acceleration(double t) const override {
        return {-r * omega * omega * std::cos(omega * t), -r * omega * omega * std::sin(omega * t),
                0.0};
    }
};

sim::SceneConfig quiet_config() {
    sim::SceneConfig cfg;
    cfg.duration = 20.0;
    cfg.noise.zero();
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double wrap_angle(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a < -M_PI) a += 2.0 * M_PI;
    return a;
}

}  // namespace

TEST_CASE("zero-noise streams reproduce analytic ground truth", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.seed = 11;
    const sim::Scene scene = sim::generate_scene(cfg);
    REQUIRE(scene.streams.size() == 1);
    REQUIRE_FALSE(scene.streams[0].camera.empty());
    const sim::Trajectory& traj = *scene.trajectories[0];

    for (const auto& o : scene.streams[0].camera) {
        const Vec3 truth = geo::world_to_camera(scene.world_to_camera, traj.position(o.t));
        REQUIRE((o.xyz - truth).norm() < 1e-9);
        REQUIRE(o.depth == Catch::Approx(truth.z()).margin(1e-9));
    }
    for (const auto& o : scene.streams[0].ftm) {
        const double d = (traj.position(o.t) - scene.rsu_world).norm();
        REQUIRE(o.range == Catch::Approx(d).margin(1e-12));
        REQUIRE(o.std == 0.0);
    }
    for (const auto& o : scene.streams[0].gps) {
        const Vec3 enu = geo::wgs84_to_enu(o.fix, cfg.rsu_geodetic);
        REQUIRE((enu - traj.position(o.t)).norm() < 1e-6);
    }
    for (const auto& o : scene.streams[0].rssi) {
        const double d = (traj.position(o.t) - scene.rsu_world).norm();
        const double expected = cfg.noise.rssi_p0 -
                                10.0 * cfg.noise.rssi_gamma * std::log10(std::max(d, 0.1));
        REQUIRE(o.rssi == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("scene generation is deterministic byte-for-byte", "[sim]") {
    namespace fs = std::filesystem;
    sim::SceneConfig cfg;
    cfg.duration = 12.0;
    cfg.n_pedestrians = 2;
    cfg.seed = 404;

    const fs::path base = fs::temp_directory_path() / "viloc_sim_determinism";
    fs::remove_all(base);
    sim::write_scene(sim::generate_scene(cfg), base / "a");
    sim::write_scene(sim::generate_scene(cfg), base / "b");

    int files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(base / "a")) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), base / "a");
        REQUIRE(slurp(entry.path()) == slurp(base / "b" / rel));
        ++files;
    }
    REQUIRE(files == 1 + 2 * 6);  // scene.json plus six stream files per pedestrian
    fs::remove_all(base);
}

TEST_CASE("scene directory round trip preserves every value", "[sim]") {
    namespace fs = std::filesystem;
    sim::SceneConfig cfg;
    cfg.duration = 8.0;
    cfg.n_pedestrians = 2;
    cfg.gps_difficulty = 1.5;
    cfg.seed = 31;

    const fs::path dir = fs::temp_directory_path() / "viloc_sim_roundtrip";
    fs::remove_all(dir);
    const sim::Scene scene = sim::generate_scene(cfg);
    sim::write_scene(scene, dir);
    const sim::Scene back = sim::read_scene(dir);
    fs::remove_all(dir);

    REQUIRE(sim::detail::config_json(back.config) == sim::detail::config_json(scene.config));
    REQUIRE(back.world_to_camera.rotation == scene.world_to_camera.rotation);
    REQUIRE(back.world_to_camera.translation == scene.world_to_camera.translation);
    REQUIRE(back.rsu_world == scene.rsu_world);
    REQUIRE(back.refs.size() == scene.refs.size());
    for (std::size_t i = 0; i < scene.refs.size(); ++i) {
        REQUIRE(back.refs[i].world == scene.refs[i].world);
        REQUIRE(back.refs[i].pixel.u == scene.refs[i].pixel.u);
    }
    REQUIRE(back.trajectories.empty());
    for (int ped = 0; ped < 2; ++ped) {
        const auto& a = scene.streams[ped];
        const auto& b = back.streams[ped];
        REQUIRE(b.camera.size() == a.camera.size());
        REQUIRE(b.ftm.size() == a.ftm.size());
        REQUIRE(b.rssi.size() == a.rssi.size());
        REQUIRE(b.imu.size() == a.imu.size());
        REQUIRE(b.gps.size() == a.gps.size());
        REQUIRE(b.truth.size() == a.truth.size());
        for (std::size_t i = 0; i < a.camera.size(); ++i) {
            REQUIRE(b.camera[i].t == a.camera[i].t);
            REQUIRE(b.camera[i].xyz == a.camera[i].xyz);
        }
        for (std::size_t i = 0; i < a.imu.size(); i += 97) {
            REQUIRE(b.imu[i].accel == a.imu[i].accel);
            REQUIRE(b.imu[i].gyro == a.imu[i].gyro);
            REQUIRE(b.imu[i].mag == a.imu[i].mag);
        }
        for (std::size_t i = 0; i < a.gps.size(); ++i)
            REQUIRE(b.gps[i].fix.lat_deg == a.gps[i].fix.lat_deg);
    }
}

TEST_CASE("timestamps are strictly increasing in every stream", "[sim]") {
    sim::SceneConfig cfg;
    cfg.duration = 15.0;
    cfg.seed = 3;
    const sim::Scene scene = sim::generate_scene(cfg);
    auto check = [](const auto& stream) {
        for (std::size_t i = 1; i < stream.size(); ++i)
            REQUIRE(stream[i].t > stream[i - 1].t);
    };
    check(scene.streams[0].camera);
    check(scene.streams[0].ftm);
    check(scene.streams[0].rssi);
    check(scene.streams[0].imu);
    check(scene.streams[0].gps);
    check(scene.streams[0].truth);
}

TEST_CASE("stationary pedestrian yields textbook IMU statics", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    const StillTrajectory still({2.0, 8.0, 1.1});
    const auto imu = sim::synthesize_imu(still, cfg, 0);
    REQUIRE_FALSE(imu.empty());
    for (const auto& o : imu) {
        REQUIRE((o.accel - Vec3(0.0, 0.0, 9.81)).norm() < 1e-12);
        REQUIRE(o.gyro.norm() < 1e-12);
        REQUIRE((o.mag - Vec3(0.0, 50.0, 0.0)).norm() < 1e-9);
    }
}

TEST_CASE("circular walk produces centripetal acceleration and yaw rate", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    const double r = 3.0, v = 1.2, omega = v / r;
    const CircleTrajectory circle(r, omega);
    const auto imu = sim::synthesize_imu(circle, cfg, 0);
    for (const auto& o : imu) {
        REQUIRE(std::hypot(o.accel.x(), o.accel.y()) == Catch::Approx(v * v / r).margin(1e-9));
        REQUIRE(o.accel.z() == Catch::Approx(9.81).margin(1e-9));
        REQUIRE(o.gyro.z() == Catch::Approx(omega).margin(1e-12));
        REQUIRE(o.mag.norm() == Catch::Approx(50.0).margin(1e-9));
    }
}

TEST_CASE("emitted IMU matches a finite-difference oracle on the trajectory", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 30.0;
    cfg.seed = 99;
    const auto traj = sim::make_random_trajectory(cfg, 0);
    const auto imu = sim::synthesize_imu(*traj, cfg, 0);

    const double h = 1e-4;
    for (std::size_t i = 50; i + 50 < imu.size(); i += 37) {
        const double t = imu[i].t;
        const Vec3 a_fd =
            (traj->position(t + h) - 2.0 * traj->position(t) + traj->position(t - h)) / (h * h);
        const Vec3 v_fd = (traj->position(t + h) - traj->position(t - h)) / (2.0 * h);
        REQUIRE((traj->acceleration(t) - a_fd).norm() < 1e-3);
        REQUIRE((traj->velocity(t) - v_fd).norm() < 1e-6);

        const double rate_fd = wrap_angle(traj->heading(t + h) - traj->heading(t - h)) / (2.0 * h);
        REQUIRE(traj->heading_rate(t) == Catch::Approx(rate_fd).margin(1e-3));

        const Eigen::Matrix3d r_wb = sim::detail::body_rotation(traj->heading(t));
        const Vec3 expected = r_wb.transpose() * (a_fd + Vec3(0.0, 0.0, 9.81));
        REQUIRE((imu[i].accel - expected).norm() < 1e-3);
    }
}

TEST_CASE("ftm follows range geometry and clamps at zero", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    const Vec3 rsu(0.0, 0.0, 2.6);

    SECTION("3-4-5 offset gives range 5") {
        const StillTrajectory still(rsu + Vec3(3.0, 4.0, 0.0));
        for (const auto& o : sim::synthesize_ftm(still, rsu, cfg, 0))
            REQUIRE(o.range == Catch::Approx(5.0).margin(1e-12));
    }
    SECTION("large negative bias clamps to zero, never below") {
        cfg.noise.ftm_bias = -10.0;
        const StillTrajectory still(rsu + Vec3(1.0, 0.0, 0.0));
        for (const auto& o : sim::synthesize_ftm(still, rsu, cfg, 0)) REQUIRE(o.range == 0.0);
    }
    SECTION("reported std echoes the configured std") {
        cfg.noise.ftm_std = 0.37;
        const StillTrajectory still(rsu + Vec3(5.0, 1.0, -1.0));
        for (const auto& o : sim::synthesize_ftm(still, rsu, cfg, 0)) REQUIRE(o.std == 0.37);
    }
}

TEST_CASE("rssi follows the log-distance path loss model", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.noise.rssi_p0 = -40.0;
    cfg.noise.rssi_gamma = 2.0;
    const Vec3 rsu(0.0, 0.0, 2.6);

    const StillTrajectory at_1m(rsu + Vec3(1.0, 0.0, 0.0));
    for (const auto& o : sim::synthesize_rssi(at_1m, rsu, cfg, 0))
        REQUIRE(o.rssi == Catch::Approx(-40.0).margin(1e-12));

    const StillTrajectory at_10m(rsu + Vec3(10.0, 0.0, 0.0));
    for (const auto& o : sim::synthesize_rssi(at_10m, rsu, cfg, 0))
        REQUIRE(o.rssi == Catch::Approx(-60.0).margin(1e-12));
}

TEST_CASE("depth noise reaches the far-range fraction", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 3400.0;  // ~10k camera ticks
    cfg.noise.depth_frac_near = 0.01;
    cfg.noise.depth_frac_far = 0.09;
    const auto pose = sim::camera_pose(0.0, 0.0, {0.0, 0.0, 2.6});

    const StillTrajectory still({0.0, 20.0, 2.6});  // camera-frame depth exactly 20
    const auto cam = sim::synthesize_camera(still, pose, cfg.intrinsics, cfg, 0);
    REQUIRE(cam.size() > 10000);

    double mean = 0.0;
    for (const auto& o : cam) mean += o.depth;
    mean /= cam.size();
    double var = 0.0;
    for (const auto& o : cam) var += (o.depth - mean) * (o.depth - mean);
    const double stddev = std::sqrt(var / cam.size());
    REQUIRE(stddev == Catch::Approx(0.09 * 20.0).epsilon(0.05));
}

TEST_CASE("camera culls pedestrians outside the view", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    const auto pose = sim::camera_pose(0.0, 12.0, {0.0, 0.0, 2.6});

    const StillTrajectory behind({0.0, -10.0, 1.0});
    REQUIRE(sim::synthesize_camera(behind, pose, cfg.intrinsics, cfg, 0).empty());

    cfg.noise.detection_dropout_prob = 0.5;
    const StillTrajectory visible({0.0, 10.0, 1.2});
    const auto full = sim::synthesize_camera(visible, pose, cfg.intrinsics, quiet_config(), 0);
    const auto dropped = sim::synthesize_camera(visible, pose, cfg.intrinsics, cfg, 0);
    REQUIRE_FALSE(full.empty());
    REQUIRE(dropped.size() < full.size());
    REQUIRE(dropped.size() > full.size() / 4);
}

TEST_CASE("camera observations stay self-consistent under full noise", "[sim]") {
    sim::SceneConfig cfg;  // realistic defaults
    cfg.duration = 40.0;
    cfg.seed = 8;
    const sim::Scene scene = sim::generate_scene(cfg);
    for (const auto& o : scene.streams[0].camera) {
        const Vec3 again = geo::unproject(cfg.intrinsics, {o.u, o.v}, o.depth);
        REQUIRE((again - o.xyz).norm() < 1e-9);
    }
}

TEST_CASE("gps error is shared across pedestrians when white noise is off", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 50.0;
    cfg.noise.gps_bias_std = 3.0;
    cfg.noise.gps_bias_rho = 0.9;

    const StillTrajectory a({-5.0, 10.0, 1.1}), b({6.0, 20.0, 1.2});
    const auto gps = sim::synthesize_gps({&a, &b}, cfg);
    REQUIRE(gps.size() == 2);
    REQUIRE(gps[0].size() == gps[1].size());

    bool any_error = false;
    for (std::size_t i = 0; i < gps[0].size(); ++i) {
        const Vec3 ea = geo::wgs84_to_enu(gps[0][i].fix, cfg.rsu_geodetic) - a.p;
        const Vec3 eb = geo::wgs84_to_enu(gps[1][i].fix, cfg.rsu_geodetic) - b.p;
        REQUIRE((ea - eb).norm() < 1e-6);
        any_error = any_error || ea.norm() > 0.5;
    }
    REQUIRE(any_error);
}

TEST_CASE("gps bias sequence has the configured lag-1 autocorrelation", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 9999.0;
    cfg.noise.gps_bias_std = 5.0;
    cfg.noise.gps_bias_rho = 0.99;
    cfg.seed = 17;

    const StillTrajectory still({0.0, 12.0, 1.1});
    const auto gps = sim::synthesize_gps({&still}, cfg);
    std::vector<double> x;
    for (const auto& o : gps[0])
        x.push_back((geo::wgs84_to_enu(o.fix, cfg.rsu_geodetic) - still.p).x());

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= x.size();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        den += (x[i] - mean) * (x[i] - mean);
        if (i + 1 < x.size()) num += (x[i] - mean) * (x[i + 1] - mean);
    }
    REQUIRE(num / den == Catch::Approx(0.99).margin(0.02));
}

TEST_CASE("gps difficulty scales the mean position error", "[sim]") {
    auto mean_error = [](double difficulty, std::uint64_t seed) {
        sim::SceneConfig cfg = quiet_config();
        cfg.duration = 60.0;
        cfg.noise.gps_bias_std = 3.0;
        cfg.noise.gps_bias_rho = 0.98;
        cfg.noise.gps_white_std = 1.0;
        cfg.gps_difficulty = difficulty;
        cfg.seed = seed;
        const StillTrajectory still({0.0, 12.0, 1.1});
        const auto gps = sim::synthesize_gps({&still}, cfg);
        double err = 0.0;
        for (const auto& o : gps[0])
            err += (geo::wgs84_to_enu(o.fix, cfg.rsu_geodetic) - still.p).norm();
        return err / gps[0].size();
    };

    double easy = 0.0, hard = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        easy += mean_error(0.0, seed);
        hard += mean_error(3.0, seed);
    }
    REQUIRE(hard > easy);
    REQUIRE(hard > 2.0 * easy);  // bias scales by 4x and dominates the white noise
}

TEST_CASE("an out-of-view walk area raises CameraSeesNothing", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 10.0;
    cfg.walk_min_y = -26.0;
    cfg.walk_max_y = -5.0;  // camera looks north; area is behind it
    REQUIRE_THROWS_AS(sim::generate_scene(cfg), sim::CameraSeesNothing);
}

TEST_CASE("config validation", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 0.0;
    REQUIRE_THROWS_AS(sim::generate_scene(cfg), std::invalid_argument);
    cfg = quiet_config();
    cfg.n_pedestrians = 0;
    REQUIRE_THROWS_AS(sim::generate_scene(cfg), std::invalid_argument);
}

TEST_CASE("random walks stay in their area at plausible walking speed", "[sim]") {
    sim::SceneConfig cfg;
    cfg.duration = 60.0;
    cfg.n_pedestrians = 3;
    cfg.lane_separation = 2.0;
    cfg.seed = 55;

    for (int ped = 0; ped < 3; ++ped) {
        const auto area = sim::walk_area_for(cfg, ped);
        const auto traj = sim::make_random_trajectory(cfg, ped);
        double path = 0.0;
        Vec3 prev = traj->position(0.0);
        for (double t = 0.1; t <= cfg.duration; t += 0.1) {
            const Vec3 p = traj->position(t);
            REQUIRE(p.x() > area.min_x - 2.0);
            REQUIRE(p.x() < area.max_x + 2.0);
            REQUIRE(p.y() > area.min_y - 2.0);
            REQUIRE(p.y() < area.max_y + 2.0);
            path += (p - prev).norm();
            prev = p;
        }
        const double avg_speed = path / cfg.duration;
        REQUIRE(avg_speed > 0.4);
        REQUIRE(avg_speed < 2.5);
    }

    // lanes must not overlap: consecutive bands sit lane_separation apart
    const auto a0 = sim::walk_area_for(cfg, 0);
    const auto a1 = sim::walk_area_for(cfg, 1);
    REQUIRE(a1.min_y - a0.max_y == Catch::Approx(cfg.lane_separation));
}

TEST_CASE("reference points are surveyed in view", "[sim]") {
    sim::SceneConfig cfg = quiet_config();
    cfg.duration = 10.0;
    const sim::Scene scene = sim::generate_scene(cfg);
    REQUIRE(scene.refs.size() == 6);
    for (const auto& r : scene.refs) {
        REQUIRE(r.pixel.u > 0.0);
        REQUIRE(r.pixel.u < cfg.intrinsics.width);
        REQUIRE(r.pixel.v > 0.0);
        REQUIRE(r.pixel.v < cfg.intrinsics.height);
        const Vec3 pc = geo::world_to_camera(scene.world_to_camera, r.world);
        REQUIRE(pc.z() > 0.0);
    }
}
