#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "viloc/baselines.hpp"
#include "viloc/calib.hpp"
#include "viloc/dataset.hpp"
#include "viloc/gan.hpp"
#include "viloc/nn.hpp"
#include "viloc/sim.hpp"

// Metrics and experiment harnesses: per-scene error tables for the three
// localization methods, the calibration-perturbation sweep, and the feature
// ablation grid. Harnesses run the whole pipeline (simulate, calibrate,
// window, split, train, evaluate) so rows are reproducible from seeds alone.

namespace viloc::eval {

using Eigen::Vector3d;
using geo::WorldCameraTransform;

struct EmptyInput : std::invalid_argument {
    EmptyInput() : std::invalid_argument("statistics need at least one error sample") {}
};

struct ErrorStats {
    double avg = 0.0;
    double std = 0.0;
    double med = 0.0;
    double p95 = 0.0;
    int n = 0;
};

/// percentile by linear interpolation between order statistics, so
/// p95 of {1..100} lands at 95.05
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
    const std::size_t n = sorted.size();
    const double h = (static_cast<double>(n) - 1.0) * p / 100.0;
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= n) return sorted[n - 1];
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline ErrorStats localization_stats(std::vector<double> errors) {
    if (errors.empty()) throw EmptyInput{};
    for (double e : errors)
        if (!(e >= 0.0)) throw std::invalid_argument("error samples must be non-negative");
    // accumulate in sorted order so the stats are bitwise permutation-invariant
    std::sort(errors.begin(), errors.end());

    ErrorStats s;
    s.n = static_cast<int>(errors.size());
    double acc = 0.0;
    for (double e : errors) acc += e;
    s.avg = acc / s.n;
    double var = 0.0;
    for (double e : errors) var += (e - s.avg) * (e - s.avg);
    s.std = std::sqrt(var / s.n);  // population convention
    s.med = percentile_sorted(errors, 50.0);
    s.p95 = percentile_sorted(errors, 95.0);
    return s;
}

inline constexpr const char* kMethodGps = "Phone GPS";
inline constexpr const char* kMethodPf = "GPS+FTM PF";
inline constexpr const char* kMethodGan = "GAN";
inline constexpr std::array<const char*, 3> kMethods = {kMethodGps, kMethodPf, kMethodGan};
inline constexpr const char* kOverall = "Overall";

struct EvalCell {
    std::string scene;
    std::string method;
    ErrorStats stats;
};
using EvalTable = std::vector<EvalCell>;

/// per-scene and pooled error statistics for the three methods; rows come out
/// scene-sorted with the fixed method order, pooled rows last
inline EvalTable evaluate_methods(const dataset::Dataset& test, gan::GanModel& model,
                                  const baselines::ParticleFilterConfig& pf_cfg,
                                  const Vector3d& rsu_cam = Vector3d::Zero()) {
    std::map<std::string, std::array<std::vector<double>, 3>> per_scene;
    std::array<std::vector<double>, 3> pooled;

    for (const auto& r : test) {
        if (!r.labeled()) continue;
        const Vector3d truth = *r.c_gnd;
        const std::array<double, 3> errs = {
            (baselines::gps_baseline(r.phone) - truth).norm(),
            (baselines::pf_window_estimate(r.phone, rsu_cam, pf_cfg) - truth).norm(),
            (model.infer(r.phone) - truth).norm()};
        auto& bucket = per_scene[r.scene];
        for (std::size_t m = 0; m < 3; ++m) {
            bucket[m].push_back(errs[m]);
            pooled[m].push_back(errs[m]);
        }
    }
    if (pooled[0].empty()) throw EmptyInput{};

    EvalTable out;
    for (const auto& [scene, buckets] : per_scene)
        for (std::size_t m = 0; m < 3; ++m)
            out.push_back({scene, kMethods[m], localization_stats(buckets[m])});
    // pooled recomputation over every sample, not an average of scene rows
    for (std::size_t m = 0; m < 3; ++m)
        out.push_back({kOverall, kMethods[m], localization_stats(pooled[m])});
    return out;
}

// ---- experiment pipeline -----------------------------------------------

struct PipelineConfig {
    std::vector<sim::SceneConfig> scenes;
    double hop = 1.0 / 3.0;  // window stride [s]
    nn::TrainConfig train;
    baselines::ParticleFilterConfig pf;
    dataset::FeatureMask mask;
    std::uint64_t split_seed = 0;
    std::uint64_t model_seed = 0;
    std::uint64_t perturb_seed = 0;
};

struct PreparedScenes {
    std::vector<sim::Scene> scenes;
    std::vector<WorldCameraTransform> calibrated;
};

inline PreparedScenes prepare_scenes(const std::vector<sim::SceneConfig>& cfgs) {
    if (cfgs.empty()) throw std::invalid_argument("pipeline needs at least one scene");
    PreparedScenes out;
    for (const auto& c : cfgs) {
        out.scenes.push_back(sim::generate_scene(c));
        out.calibrated.push_back(
            calib::calibrate_scene(out.scenes.back().refs, c.intrinsics).transform);
    }
    return out;
}

struct SplitData {
    dataset::Dataset train;
    dataset::Dataset test;
};

/// windows every scene through its calibrated (optionally perturbed)
/// transform, then holds out one sequence per scenario
inline SplitData window_and_split(const PreparedScenes& ps, const PipelineConfig& cfg,
                                  const std::optional<calib::PerturbationSpec>& perturb = {}) {
    dataset::Dataset all;
    for (std::size_t i = 0; i < ps.scenes.size(); ++i) {
        WorldCameraTransform t = ps.calibrated[i];
        if (perturb && (perturb->sigma_theta_deg != 0.0 || perturb->sigma_t_m != 0.0)) {
            calib::PerturbationSpec sp = *perturb;
            sp.seed += i;  // independent draw per scene
            t = calib::perturb_transform(t, sp);
        }
        dataset::Dataset d = dataset::window_scene(ps.scenes[i], t, cfg.hop);
        all.insert(all.end(), std::make_move_iterator(d.begin()),
                   std::make_move_iterator(d.end()));
    }
    auto parts = dataset::split_dataset(all, cfg.split_seed);
    return {std::move(parts.first), std::move(parts.second)};
}

inline gan::GanModel train_model(const SplitData& data, const PipelineConfig& cfg) {
    gan::GanModel model(cfg.mask, cfg.train.dropout_rate, cfg.train.leaky_slope,
                        cfg.model_seed);
    gan::train(model, data.train, cfg.train);
    return model;
}

/// end-to-end run at the calibrated transform
inline EvalTable evaluate_pipeline(const PipelineConfig& cfg) {
    const PreparedScenes ps = prepare_scenes(cfg.scenes);
    const SplitData data = window_and_split(ps, cfg);
    gan::GanModel model = train_model(data, cfg);
    return evaluate_methods(data.test, model, cfg.pf);
}

struct PerturbLevel {
    double sigma_theta_deg = 0.0;
    double sigma_t_m = 0.0;
};

struct SweepRow {
    PerturbLevel level;
    EvalTable table;
};

/// retrains from scratch at every perturbation level; the (0, 0) level skips
/// the perturbation call entirely and reproduces the unperturbed run
inline std::vector<SweepRow> perturbation_sweep(const std::vector<PerturbLevel>& levels,
                                                const PipelineConfig& cfg) {
    const PreparedScenes ps = prepare_scenes(cfg.scenes);
    std::vector<SweepRow> out;
    for (const auto& lv : levels) {
        std::optional<calib::PerturbationSpec> sp;
        if (lv.sigma_theta_deg != 0.0 || lv.sigma_t_m != 0.0)
            sp = calib::PerturbationSpec{lv.sigma_theta_deg, lv.sigma_t_m, cfg.perturb_seed};
        const SplitData data = window_and_split(ps, cfg, sp);
        gan::GanModel model = train_model(data, cfg);
        out.push_back({lv, evaluate_methods(data.test, model, cfg.pf)});
    }
    return out;
}

inline std::string mask_label(const dataset::FeatureMask& m) {
    std::string out;
    const auto add = [&out](const char* name) {
        if (!out.empty()) out += '+';
        out += name;
    };
    if (m.ftm) add("FTM");
    if (m.rssi) add("RSSI");
    if (m.imu) add("IMU");
    if (m.gps) add("GPS");
    return out.empty() ? "none" : out;
}

struct AblationRow {
    dataset::FeatureMask mask;
    std::string label;
    ErrorStats gan;  // pooled over the whole test split
};

/// retrains per feature mask on identical data; only the generator's phone
/// encoder width changes between rows
inline std::vector<AblationRow> ablation(const std::vector<dataset::FeatureMask>& masks,
                                         const PipelineConfig& cfg) {
    const PreparedScenes ps = prepare_scenes(cfg.scenes);
    const SplitData data = window_and_split(ps, cfg);

    std::vector<AblationRow> out;
    for (const auto& mask : masks) {
        if (!mask.any()) throw std::invalid_argument("ablation mask selects no features");
        PipelineConfig c = cfg;
        c.mask = mask;
        gan::GanModel model = train_model(data, c);
        std::vector<double> errs;
        for (const auto& r : data.test) {
            if (!r.labeled()) continue;
            errs.push_back((model.infer(r.phone) - *r.c_gnd).norm());
        }
        out.push_back({mask, mask_label(mask), localization_stats(errs)});
    }
    return out;
}

// ---- emitters ------------------------------------------------------------

namespace detail {

inline std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

using Row = std::vector<std::string>;

/// pipe table with padded columns; text columns left-aligned, the rest right
inline void write_markdown_rows(const Row& head, const std::vector<Row>& rows, int text_cols,
                                std::ostream& os) {
    std::vector<std::size_t> width(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) width[c] = head[c].size();
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());

    const auto emit = [&](const Row& r) {
        os << '|';
        for (std::size_t c = 0; c < r.size(); ++c) {
            const std::string pad(width[c] - r[c].size(), ' ');
            if (c < static_cast<std::size_t>(text_cols))
                os << ' ' << r[c] << pad << ' ' << '|';
            else
                os << ' ' << pad << r[c] << ' ' << '|';
        }
        os << '\n';
    };
    emit(head);
    os << '|';
    for (std::size_t c = 0; c < head.size(); ++c) {
        if (c < static_cast<std::size_t>(text_cols))
            os << std::string(width[c] + 2, '-') << '|';
        else
            os << std::string(width[c] + 1, '-') << ':' << '|';
    }
    os << '\n';
    for (const auto& r : rows) emit(r);
}

}  // namespace detail

inline void write_table_csv(const EvalTable& table, std::ostream& os) {
    os << "scene,method,n,avg,std,med,p95\n";
    for (const auto& c : table)
        os << c.scene << ',' << c.method << ',' << c.stats.n << ',' << detail::fmt17(c.stats.avg)
           << ',' << detail::fmt17(c.stats.std) << ',' << detail::fmt17(c.stats.med) << ','
           << detail::fmt17(c.stats.p95) << '\n';
}

inline void write_table_markdown(const EvalTable& table, std::ostream& os) {
    detail::Row head = {"scene", "method", "n", "avg", "std", "med", "p95"};
    std::vector<detail::Row> rows;
    for (const auto& c : table)
        rows.push_back({c.scene, c.method, std::to_string(c.stats.n), detail::fmt3(c.stats.avg),
                        detail::fmt3(c.stats.std), detail::fmt3(c.stats.med),
                        detail::fmt3(c.stats.p95)});
    detail::write_markdown_rows(head, rows, 2, os);
}

inline void write_sweep_csv(const std::vector<SweepRow>& sweep, std::ostream& os) {
    os << "sigma_theta_deg,sigma_t_m,scene,method,n,avg,std,med,p95\n";
    for (const auto& row : sweep)
        for (const auto& c : row.table)
            os << detail::fmt17(row.level.sigma_theta_deg) << ','
               << detail::fmt17(row.level.sigma_t_m) << ',' << c.scene << ',' << c.method << ','
               << c.stats.n << ',' << detail::fmt17(c.stats.avg) << ','
               << detail::fmt17(c.stats.std) << ',' << detail::fmt17(c.stats.med) << ','
               << detail::fmt17(c.stats.p95) << '\n';
}

inline void write_sweep_markdown(const std::vector<SweepRow>& sweep, std::ostream& os) {
    detail::Row head = {"scene", "method", "sigma_theta_deg", "sigma_t_m", "n",
                        "avg",   "std",    "med",             "p95"};
    std::vector<detail::Row> rows;
    for (const auto& row : sweep)
        for (const auto& c : row.table)
            rows.push_back({c.scene, c.method, detail::fmt3(row.level.sigma_theta_deg),
                            detail::fmt3(row.level.sigma_t_m), std::to_string(c.stats.n),
                            detail::fmt3(c.stats.avg), detail::fmt3(c.stats.std),
                            detail::fmt3(c.stats.med), detail::fmt3(c.stats.p95)});
    detail::write_markdown_rows(head, rows, 2, os);
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& os) {
    os << "mask,n,avg,std,med,p95\n";
    for (const auto& r : rows)
        os << r.label << ',' << r.gan.n << ',' << detail::fmt17(r.gan.avg) << ','
           << detail::fmt17(r.gan.std) << ',' << detail::fmt17(r.gan.med) << ','
           << detail::fmt17(r.gan.p95) << '\n';
}

inline void write_ablation_markdown(const std::vector<AblationRow>& rows, std::ostream& os) {
    detail::Row head = {"mask", "n", "avg", "std", "med", "p95"};
    std::vector<detail::Row> body;
    for (const auto& r : rows)
        body.push_back({r.label, std::to_string(r.gan.n), detail::fmt3(r.gan.avg),
                        detail::fmt3(r.gan.std), detail::fmt3(r.gan.med),
                        detail::fmt3(r.gan.p95)});
    detail::write_markdown_rows(head, body, 1, os);
}

}  // namespace viloc::eval
