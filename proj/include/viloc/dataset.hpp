#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "viloc/geodesy.hpp"
#include "viloc/rng.hpp"
#include "viloc/sim.hpp"

// Fixed-shape training windows cut from raw sensor streams: 3-second spans
// resampled onto a uniform 10-step grid. A window with camera coverage at all
// ten steps is a labeled correspondence; one without becomes a phone-only
// record. Scene ids follow "<scenario>/<sequence>" so splits can hold out
// whole sequences.

namespace viloc::dataset {

using geo::Vec3;
using geo::WorldCameraTransform;

inline constexpr int kSteps = 10;
inline constexpr double kWindowSeconds = 3.0;
inline constexpr double kStep = kWindowSeconds / (kSteps - 1);
inline constexpr double kMaxSampleGap = 0.5;  // [s] nearest-sample tolerance
inline constexpr double kMaxGpsAge = 1.5;     // [s] zero-order-hold staleness limit

// per step: [depth, pixel x, pixel y, camera X, Y, Z]
struct VisionWindow {
    Eigen::Matrix<double, 6, kSteps> m = Eigen::Matrix<double, 6, kSteps>::Zero();
};

// per step: [ftm range, ftm std, accel(3), gyro(3), mag(3), gps in camera frame(3)]
// plus the parallel RSSI channel used only by feature-mask experiments
struct PhoneWindow {
    Eigen::Matrix<double, 14, kSteps> m = Eigen::Matrix<double, 14, kSteps>::Zero();
    Eigen::Matrix<double, 1, kSteps> rssi = Eigen::Matrix<double, 1, kSteps>::Zero();
};

struct Correspondence {
    std::string scene;  // "<scenario>/<sequence>"
    int ped = 0;
    double t0 = 0.0;
    std::optional<VisionWindow> vision;  // absent for phone-only records
    PhoneWindow phone;
    std::optional<Vec3> c_gnd;  // camera-frame target at the final step
    bool minted = false;        // true when added by self-training, not the camera

    bool labeled() const { return vision.has_value() && c_gnd.has_value(); }
};

using Dataset = std::vector<Correspondence>;

struct FeatureMask {
    bool ftm = true;
    bool imu = true;
    bool gps = true;
    bool rssi = false;

    int width() const { return 2 * ftm + 1 * rssi + 9 * imu + 3 * gps; }
    bool any() const { return ftm || imu || gps || rssi; }

    std::string name() const {
        std::string s;
        if (ftm) s += "F";
        if (rssi) s += "R";
        if (imu) s += "I";
        if (gps) s += "G";
        return s.empty() ? "none" : s;
    }
};

struct MalformedRecord : std::runtime_error {
    int line;
    explicit MalformedRecord(int line_no, const std::string& why)
        : std::runtime_error("malformed record at line " + std::to_string(line_no) + ": " + why),
          line(line_no) {}
};

struct WindowingStats {
    int labeled = 0;
    int phone_only = 0;
    int skipped = 0;  // windows missing required phone coverage
};

/// The ten uniform step times of a window starting at t0.
inline std::array<double, kSteps> window_grid(double t0) {
    std::array<double, kSteps> g;
    for (int j = 0; j < kSteps; ++j) g[j] = t0 + j * kStep;
    return g;
}

/// Channel rows selected by a mask, in the fixed order FTM | RSSI | IMU | GPS;
/// RSSI sits in the ranging slot so it can stand in for FTM. The full mask
/// (FTM+IMU+GPS) is the identity on the 14 phone channels.
inline Eigen::MatrixXd apply_mask(const PhoneWindow& p, const FeatureMask& mask) {
    if (!mask.any()) throw std::invalid_argument("feature mask selects nothing");
    Eigen::MatrixXd out(mask.width(), kSteps);
    int row = 0;
    if (mask.ftm) out.middleRows(row, 2) = p.m.middleRows(0, 2), row += 2;
    if (mask.rssi) out.row(row++) = p.rssi;
    if (mask.imu) out.middleRows(row, 9) = p.m.middleRows(2, 9), row += 9;
    if (mask.gps) out.middleRows(row, 3) = p.m.middleRows(11, 3), row += 3;
    return out;
}

namespace detail {

// index of the sample nearest to t, or -1 when none is within kMaxSampleGap
template <typename Obs>
int nearest_index(const std::vector<Obs>& v, double t) {
    if (v.empty()) return -1;
    auto it = std::lower_bound(v.begin(), v.end(), t,
                               [](const Obs& o, double x) { return o.t < x; });
    int best = -1;
    double best_dt = kMaxSampleGap + 1e-12;
    for (auto cand : {it == v.end() ? it - 1 : it, it == v.begin() ? it : it - 1}) {
        const double dt = std::abs(cand->t - t);
        if (dt < best_dt) {
            best_dt = dt;
            best = static_cast<int>(cand - v.begin());
        }
    }
    return best;
}

}  // namespace detail

/// Cuts one pedestrian's streams into sliding 3 s windows at the given hop.
/// Camera, FTM, and RSSI resample by nearest sample; IMU by per-step mean;
/// GPS by zero-order hold converted into the camera frame through the
/// calibrated transform (the single point where calibration error enters).
inline Dataset window_streams(const sim::RawStreams& streams, const std::string& scene_id,
                              int ped, const geo::GeodeticCoord& enu_origin,
                              const WorldCameraTransform& calibrated,
                              double hop = 1.0 / 3.0, WindowingStats* stats = nullptr) {
    if (hop <= 0.0) throw std::invalid_argument("hop must be positive");
    WindowingStats local;
    Dataset out;

    const double stream_end = streams.ftm.empty() ? 0.0 : streams.ftm.back().t;
    for (std::int64_t k = 0;; ++k) {
        const double t0 = k * hop;
        if (t0 + kWindowSeconds > stream_end + 1e-9) break;
        const auto grid = window_grid(t0);

        PhoneWindow phone;
        bool phone_ok = true;
        std::optional<VisionWindow> vision = VisionWindow{};
        for (int j = 0; j < kSteps && phone_ok; ++j) {
            const double t = grid[j];

            const int fi = detail::nearest_index(streams.ftm, t);
            const int ri = detail::nearest_index(streams.rssi, t);
            if (fi < 0 || ri < 0) {
                phone_ok = false;
                break;
            }
            phone.m(0, j) = streams.ftm[fi].range;
            phone.m(1, j) = streams.ftm[fi].std;
            phone.rssi(0, j) = streams.rssi[ri].rssi;

            // IMU: mean of all 50 Hz samples in [t - step/2, t + step/2)
            auto lo = std::lower_bound(streams.imu.begin(), streams.imu.end(), t - kStep / 2,
                                       [](const sim::ImuObs& o, double x) { return o.t < x; });
            auto hi = std::lower_bound(streams.imu.begin(), streams.imu.end(), t + kStep / 2,
                                       [](const sim::ImuObs& o, double x) { return o.t < x; });
            if (lo == hi) {
                phone_ok = false;
                break;
            }
            Vec3 acc = Vec3::Zero(), gyr = Vec3::Zero(), mag = Vec3::Zero();
            for (auto it = lo; it != hi; ++it) {
                acc += it->accel;
                gyr += it->gyro;
                mag += it->mag;
            }
            const double count = static_cast<double>(hi - lo);
            phone.m.block<3, 1>(2, j) = acc / count;
            phone.m.block<3, 1>(5, j) = gyr / count;
            phone.m.block<3, 1>(8, j) = mag / count;

            // GPS: most recent fix at or before t, mapped into the camera frame
            auto g = std::upper_bound(streams.gps.begin(), streams.gps.end(), t + 1e-9,
                                      [](double x, const sim::GpsObs& o) { return x < o.t; });
            if (g == streams.gps.begin() || t - std::prev(g)->t > kMaxGpsAge) {
                phone_ok = false;
                break;
            }
            const Vec3 enu = geo::wgs84_to_enu(std::prev(g)->fix, enu_origin);
            phone.m.block<3, 1>(11, j) = geo::world_to_camera(calibrated, enu);

            if (vision) {
                const int ci = detail::nearest_index(streams.camera, t);
                if (ci < 0) {
                    vision.reset();
                } else {
                    const sim::CameraObs& o = streams.camera[ci];
                    vision->m.col(j) << o.depth, o.u, o.v, o.xyz.x(), o.xyz.y(), o.xyz.z();
                }
            }
        }

        if (!phone_ok) {
            ++local.skipped;
            continue;
        }
        Correspondence rec;
        rec.scene = scene_id;
        rec.ped = ped;
        rec.t0 = t0;
        rec.phone = phone;
        if (vision) {
            rec.vision = vision;
            rec.c_gnd = Vec3(vision->m.block<3, 1>(3, kSteps - 1));
            ++local.labeled;
        } else {
            ++local.phone_only;
        }
        out.push_back(std::move(rec));
    }
    if (stats) *stats = local;
    return out;
}

/// Windows every pedestrian of a scene; output sorted by (scene, ped, t0).
inline Dataset window_scene(const sim::Scene& scene, const WorldCameraTransform& calibrated,
                            double hop = 1.0 / 3.0, WindowingStats* stats = nullptr) {
    WindowingStats total;
    Dataset out;
    for (std::size_t ped = 0; ped < scene.streams.size(); ++ped) {
        WindowingStats one;
        Dataset d = window_streams(scene.streams[ped], scene.config.scene_id,
                                   static_cast<int>(ped), scene.config.rsu_geodetic, calibrated,
                                   hop, &one);
        total.labeled += one.labeled;
        total.phone_only += one.phone_only;
        total.skipped += one.skipped;
        out.insert(out.end(), std::make_move_iterator(d.begin()),
                   std::make_move_iterator(d.end()));
    }
    std::stable_sort(out.begin(), out.end(), [](const Correspondence& a, const Correspondence& b) {
        return std::tie(a.scene, a.ped, a.t0) < std::tie(b.scene, b.ped, b.t0);
    });
    if (stats) *stats = total;
    return out;
}

/// Scenario prefix of a scene id ("park/run2" -> "park").
inline std::string scenario_of(const std::string& scene_id) {
    const auto slash = scene_id.rfind('/');
    return slash == std::string::npos ? scene_id : scene_id.substr(0, slash);
}

/// Holds out one whole sequence per scenario, chosen by seed; all of that
/// sequence's windows form the test set.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& all, std::uint64_t seed) {
    std::map<std::string, std::set<std::string>> sequences;
    for (const auto& r : all) sequences[scenario_of(r.scene)].insert(r.scene);

    std::set<std::string> held_out;
    for (const auto& [scenario, seqs] : sequences) {
        auto rng = make_rng(seed, "dataset/split/" + scenario);
        std::uniform_int_distribution<std::size_t> pick(0, seqs.size() - 1);
        held_out.insert(*std::next(seqs.begin(), static_cast<long>(pick(rng))));
    }

    std::pair<Dataset, Dataset> split;
    for (const auto& r : all)
        (held_out.count(r.scene) ? split.second : split.first).push_back(r);
    return split;
}

// ---- JSONL persistence -----------------------------------------------------

namespace detail {

using nlohmann::json;

template <typename Mat>
json matrix_json(const Mat& m) {
    json rows = json::array();
    for (int j = 0; j < m.cols(); ++j) {
        json col = json::array();
        for (int i = 0; i < m.rows(); ++i) col.push_back(m(i, j));
        rows.push_back(col);
    }
    return rows;
}

template <typename Mat>
void matrix_from_json(const json& j, Mat& m) {
    if (static_cast<int>(j.size()) != m.cols()) throw std::runtime_error("bad step count");
    for (int c = 0; c < m.cols(); ++c) {
        if (static_cast<int>(j.at(c).size()) != m.rows())
            throw std::runtime_error("bad channel count");
        for (int r = 0; r < m.rows(); ++r) m(r, c) = j.at(c).at(r);
    }
}

}  // namespace detail

inline void write_jsonl(const Dataset& data, const std::filesystem::path& path) {
    using nlohmann::json;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& r : data) {
        json j{{"scene", r.scene}, {"ped", r.ped}, {"t0", r.t0}};
        j["v"] = r.vision ? detail::matrix_json(r.vision->m) : json();
        j["p"] = detail::matrix_json(r.phone.m);
        json rssi = json::array();
        for (int s = 0; s < kSteps; ++s) rssi.push_back(r.phone.rssi(0, s));
        j["rssi"] = rssi;
        j["c_gnd"] = r.c_gnd ? json::array({r.c_gnd->x(), r.c_gnd->y(), r.c_gnd->z()}) : json();
        if (r.minted) j["minted"] = true;
        out << j.dump() << '\n';
    }
}

inline Dataset read_jsonl(const std::filesystem::path& path) {
    using nlohmann::json;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Dataset out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            Correspondence r;
            r.scene = j.at("scene");
            r.ped = j.at("ped");
            r.t0 = j.at("t0");
            if (!j.at("v").is_null()) {
                VisionWindow v;
                detail::matrix_from_json(j.at("v"), v.m);
                r.vision = v;
            }
            detail::matrix_from_json(j.at("p"), r.phone.m);
            const json& rssi = j.at("rssi");
            if (rssi.size() != kSteps) throw std::runtime_error("bad rssi length");
            for (int s = 0; s < kSteps; ++s) r.phone.rssi(0, s) = rssi.at(s);
            if (!j.at("c_gnd").is_null())
                r.c_gnd = Vec3(j.at("c_gnd").at(0), j.at("c_gnd").at(1), j.at("c_gnd").at(2));
            r.minted = j.value("minted", false);
            out.push_back(std::move(r));
        } catch (const MalformedRecord&) {
            throw;
        } catch (const std::exception& e) {
            throw MalformedRecord(line_no, e.what());
        }
    }
    return out;
}

}  // namespace viloc::dataset
