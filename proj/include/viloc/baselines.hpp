#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "viloc/dataset.hpp"
#include "viloc/rng.hpp"

// Reference localization methods: raw phone GPS projected into the camera
// frame, and a particle filter that corrects GPS fixes with FTM ranges to the
// roadside unit. Everything here works in camera-frame coordinates; stream
// conversion from geodetic fixes is the caller's job.

namespace viloc::baselines {

using Eigen::Vector3d;

struct ParticleFilterConfig {
    int n_particles = 1000;
    double process_noise_std = 1.0;   // [m/sqrt(s)] random-walk strength per axis
    double gps_meas_std = 2.0;        // [m]
    double resample_threshold = 0.5;  // effective-sample-size fraction
    std::uint64_t seed = 0;

    void validate() const {
        if (n_particles < 10) throw std::invalid_argument("particle filter needs >= 10 particles");
        if (process_noise_std <= 0.0 || gps_meas_std <= 0.0)
            throw std::invalid_argument("particle filter noise stds must be positive");
        if (resample_threshold <= 0.0 || resample_threshold > 1.0)
            throw std::invalid_argument("resample threshold must be in (0, 1]");
    }
};

struct GpsEpoch {
    double t = 0.0;
    Vector3d pos = Vector3d::Zero();  // camera frame
};

struct FtmEpoch {
    double t = 0.0;
    double range = 0.0;
    double std = 0.3;
};

struct PfStep {
    double t = 0.0;
    Vector3d estimate = Vector3d::Zero();
    double ess = 0.0;         // effective sample size after the weight update
    double weight_sum = 0.0;  // should be 1 after normalization
    bool collapsed = false;   // weights underflowed; cloud was re-seeded at the last fix
};

/// raw GPS readout: the camera-frame GPS channel at the window's final step
inline Vector3d gps_baseline(const dataset::PhoneWindow& p) {
    return p.m.block<3, 1>(11, dataset::kSteps - 1);
}

namespace detail {

struct Epoch {
    double t = 0.0;
    std::optional<Vector3d> gps;
    std::optional<FtmEpoch> ftm;
};

inline std::vector<Epoch> merge_epochs(const std::vector<GpsEpoch>& gps,
                                       const std::vector<FtmEpoch>& ftm) {
    for (std::size_t i = 1; i < gps.size(); ++i)
        if (gps[i].t < gps[i - 1].t) throw std::invalid_argument("gps epochs out of order");
    for (std::size_t i = 1; i < ftm.size(); ++i)
        if (ftm[i].t < ftm[i - 1].t) throw std::invalid_argument("ftm epochs out of order");

    std::vector<Epoch> out;
    std::size_t gi = 0, fi = 0;
    while (gi < gps.size() || fi < ftm.size()) {
        const bool take_gps =
            fi >= ftm.size() || (gi < gps.size() && gps[gi].t <= ftm[fi].t + 1e-9);
        Epoch e;
        if (take_gps) {
            e.t = gps[gi].t;
            e.gps = gps[gi].pos;
            ++gi;
            if (fi < ftm.size() && std::abs(ftm[fi].t - e.t) <= 1e-9) {
                e.ftm = ftm[fi];
                ++fi;
            }
        } else {
            e.t = ftm[fi].t;
            e.ftm = ftm[fi];
            ++fi;
        }
        out.push_back(e);
    }
    return out;
}

}  // namespace detail

/// GPS + FTM fusion over merged measurement epochs; one estimate per epoch.
/// Log-domain weights; systematic resampling below the ESS threshold; a full
/// likelihood underflow re-seeds the cloud around the most recent GPS fix and
/// flags the step instead of failing.
inline std::vector<PfStep> particle_filter(const std::vector<GpsEpoch>& gps_seq,
                                           const std::vector<FtmEpoch>& ftm_seq,
                                           const Vector3d& rsu_cam,
                                           const ParticleFilterConfig& cfg) {
    cfg.validate();
    if (gps_seq.empty())
        throw std::invalid_argument("particle filter needs at least one gps fix");

    const int n = cfg.n_particles;
    auto rng = make_rng(cfg.seed, "baselines/pf");
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // pedestrians are ground-bound: damp vertical diffusion; camera y points
    // down for a level camera, so y carries the height axis
    const Vector3d axis_scale(1.0, 0.1, 1.0);

    std::vector<Vector3d> particles(static_cast<std::size_t>(n));
    const auto seed_cloud = [&](const Vector3d& center) {
        for (auto& p : particles)
            p = center + cfg.gps_meas_std * Vector3d(gauss(rng), gauss(rng), gauss(rng));
    };
    seed_cloud(gps_seq.front().pos);
    Vector3d last_gps = gps_seq.front().pos;

    std::vector<double> logw(static_cast<std::size_t>(n), -std::log(static_cast<double>(n)));
    std::vector<double> w(static_cast<std::size_t>(n), 1.0 / n);

    const auto epochs = detail::merge_epochs(gps_seq, ftm_seq);
    std::vector<PfStep> out;
    out.reserve(epochs.size());

    double t_prev = epochs.front().t;
    for (const auto& e : epochs) {
        const double dt = std::max(0.0, e.t - t_prev);
        t_prev = e.t;

        const double step = cfg.process_noise_std * std::sqrt(dt);
        for (auto& p : particles)
            p += step * Vector3d(axis_scale.x() * gauss(rng), axis_scale.y() * gauss(rng),
                                 axis_scale.z() * gauss(rng));

        if (e.gps) {
            last_gps = *e.gps;
            const double inv2 = 1.0 / (2.0 * cfg.gps_meas_std * cfg.gps_meas_std);
            for (int i = 0; i < n; ++i)
                logw[static_cast<std::size_t>(i)] -=
                    (particles[static_cast<std::size_t>(i)] - *e.gps).squaredNorm() * inv2;
        }
        if (e.ftm) {
            const double sigma = std::max(e.ftm->std, 1e-3);
            const double inv2 = 1.0 / (2.0 * sigma * sigma);
            for (int i = 0; i < n; ++i) {
                const double d = (particles[static_cast<std::size_t>(i)] - rsu_cam).norm();
                const double r = e.ftm->range - d;
                logw[static_cast<std::size_t>(i)] -= r * r * inv2;
            }
        }

        PfStep stepout;
        stepout.t = e.t;

        // logw is normalized each epoch, so the peak dropping below the
        // double underflow point means a linear-domain filter would have
        // every weight at exactly zero
        const double peak = *std::max_element(logw.begin(), logw.end());
        if (!std::isfinite(peak) || peak < -700.0) {
            // every particle became impossible: restart around the last fix
            seed_cloud(last_gps);
            std::fill(logw.begin(), logw.end(), -std::log(static_cast<double>(n)));
            stepout.collapsed = true;
        } else {
            double norm = 0.0;
            for (auto& lw : logw) norm += std::exp(lw - peak);
            const double log_norm = peak + std::log(norm);
            for (auto& lw : logw) lw -= log_norm;
        }

        double sum = 0.0, sumsq = 0.0;
        Vector3d mean = Vector3d::Zero();
        for (int i = 0; i < n; ++i) {
            w[static_cast<std::size_t>(i)] = std::exp(logw[static_cast<std::size_t>(i)]);
            sum += w[static_cast<std::size_t>(i)];
            sumsq += w[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
            mean += w[static_cast<std::size_t>(i)] * particles[static_cast<std::size_t>(i)];
        }
        stepout.estimate = mean;
        stepout.weight_sum = sum;
        stepout.ess = 1.0 / sumsq;
        out.push_back(stepout);

        if (stepout.ess < cfg.resample_threshold * n) {
            std::vector<double> cum(static_cast<std::size_t>(n));
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += w[static_cast<std::size_t>(i)];
                cum[static_cast<std::size_t>(i)] = acc;
            }
            std::vector<Vector3d> next(static_cast<std::size_t>(n));
            const double u0 = unit(rng) / n;
            std::size_t src = 0;
            for (int j = 0; j < n; ++j) {
                const double u = u0 + static_cast<double>(j) / n;
                while (src + 1 < static_cast<std::size_t>(n) && cum[src] < u) ++src;
                next[static_cast<std::size_t>(j)] = particles[src];
            }
            particles.swap(next);
            std::fill(logw.begin(), logw.end(), -std::log(static_cast<double>(n)));
        }
    }
    return out;
}

/// windowed convenience: runs the filter over one correspondence window,
/// deduplicating the zero-order-held GPS channel into change epochs, and
/// returns the estimate at the final step
inline Vector3d pf_window_estimate(const dataset::PhoneWindow& p, const Vector3d& rsu_cam,
                                   const ParticleFilterConfig& cfg) {
    std::vector<GpsEpoch> gps;
    std::vector<FtmEpoch> ftm;
    for (int j = 0; j < dataset::kSteps; ++j) {
        const double t = j * dataset::kStep;
        const Vector3d fix = p.m.block<3, 1>(11, j);
        if (gps.empty() || (fix - gps.back().pos).norm() > 0.0) gps.push_back({t, fix});
        ftm.push_back({t, p.m(0, j), p.m(1, j)});
    }
    return particle_filter(gps, ftm, rsu_cam, cfg).back().estimate;
}

}  // namespace viloc::baselines
