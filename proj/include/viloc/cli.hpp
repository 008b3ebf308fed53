#pragma once

#include <CLI11.hpp>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <limits>
#include <string>
#include <vector>

#include "viloc/baselines.hpp"
#include "viloc/calib.hpp"
#include "viloc/dataset.hpp"
#include "viloc/eval.hpp"
#include "viloc/gan.hpp"
#include "viloc/nn.hpp"
#include "viloc/selftrain.hpp"
#include "viloc/sim.hpp"

// Command-line front end. Every subcommand reads options with the precedence
// flags > config file > defaults (VILOC_SEED overrides only the seed default),
// writes its artifacts under --out, and drops a config.snapshot there that can
// be replayed through --config to reproduce the run byte for byte.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

namespace viloc::cli {

namespace fs = std::filesystem;

namespace detail {

inline std::uint64_t default_seed() {
    const char* env = std::getenv("VILOC_SEED");
    if (env == nullptr || *env == '\0') return 0;
    try {
        std::size_t used = 0;
        const auto v = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument("trailing junk");
        return v;
    } catch (...) {
        throw CLI::ValidationError("VILOC_SEED", "must be an unsigned integer");
    }
}

inline dataset::FeatureMask parse_mask(const std::string& code) {
    dataset::FeatureMask m;
    m.ftm = m.imu = m.gps = m.rssi = false;
    for (char ch : code) {
        switch (std::toupper(static_cast<unsigned char>(ch))) {
            case 'F': m.ftm = true; break;
            case 'R': m.rssi = true; break;
            case 'I': m.imu = true; break;
            case 'G': m.gps = true; break;
            default:
                throw CLI::ValidationError(
                    "--mask", std::string("unknown feature code '") + ch + "' in " + code);
        }
    }
    if (!m.any()) throw CLI::ValidationError("--mask", "mask selects no features");
    return m;
}

inline eval::PerturbLevel parse_level(const std::string& s) {
    const auto pos = s.find(':');
    if (pos != std::string::npos) {
        try {
            return {std::stod(s.substr(0, pos)), std::stod(s.substr(pos + 1))};
        } catch (...) {
        }
    }
    throw CLI::ValidationError("--levels", "expected DEG:METERS, got " + s);
}

inline void write_snapshot(const CLI::App& sub, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "config.snapshot");
    if (!out) throw std::runtime_error("cannot write " + (out_dir / "config.snapshot").string());
    // the section header routes the keys back into this subcommand when
    // the root-level config reader replays the file
    out << '[' << sub.get_name() << "]\n" << sub.config_to_str(true, false);
}

inline nlohmann::json transform_json(const geo::WorldCameraTransform& t) {
    nlohmann::json rot = nlohmann::json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot.push_back(t.rotation(r, c));
    return {{"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(),
                                                t.translation.z()}}};
}

inline geo::WorldCameraTransform transform_from_json(const nlohmann::json& j) {
    geo::WorldCameraTransform t;
    const auto& rot = j.at("rotation");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) t.rotation(r, c) = rot.at(3 * r + c);
    const auto& tr = j.at("translation");
    t.translation = Eigen::Vector3d(tr.at(0), tr.at(1), tr.at(2));
    return t;
}

// ---- option bundles shared between subcommands -----------------------------

struct SceneOptions {
    std::string scene_id = "scene/run0";
    double duration = 120.0;
    int peds = 2;
    double camera_yaw = 0.0;
    double camera_pitch = 12.0;
    double camera_height = 2.6;
    double gps_difficulty = 0.0;
    double lane_separation = 0.0;
    bool zero_noise = false;

    void add_to(CLI::App* sub) {
        sub->add_option("--scene-id", scene_id, "scenario/sequence id")->capture_default_str();
        sub->add_option("--duration", duration, "scene length [s]")->capture_default_str();
        sub->add_option("--peds", peds, "pedestrian count")->capture_default_str();
        sub->add_option("--camera-yaw", camera_yaw, "camera yaw [deg]")->capture_default_str();
        sub->add_option("--camera-pitch", camera_pitch, "camera pitch [deg]")
            ->capture_default_str();
        sub->add_option("--camera-height", camera_height, "camera height [m]")
            ->capture_default_str();
        sub->add_option("--gps-difficulty", gps_difficulty, "extra shared GPS bias factor")
            ->capture_default_str();
        sub->add_option("--lane-separation", lane_separation,
                        "per-pedestrian depth band spacing [m]")
            ->capture_default_str();
        sub->add_flag("--zero-noise", zero_noise, "disable every noise source");
    }

    sim::SceneConfig build(std::uint64_t seed) const {
        sim::SceneConfig c;
        c.scene_id = scene_id;
        c.duration = duration;
        c.n_pedestrians = peds;
        c.camera_yaw_deg = camera_yaw;
        c.camera_pitch_deg = camera_pitch;
        c.camera_height = camera_height;
        c.gps_difficulty = gps_difficulty;
        c.lane_separation = lane_separation;
        if (zero_noise) c.noise.zero();
        c.seed = seed;
        return c;
    }
};

struct FleetOptions {
    int scenarios = 2;
    int runs = 2;
    double duration = 60.0;
    int peds = 2;
    double gps_difficulty = 0.0;
    double lane_separation = 0.0;
    bool zero_noise = false;
    double hop = 1.0;

    void add_to(CLI::App* sub) {
        sub->add_option("--scenarios", scenarios, "scenario count")->capture_default_str();
        sub->add_option("--runs", runs, "sequences per scenario")->capture_default_str();
        sub->add_option("--duration", duration, "scene length [s]")->capture_default_str();
        sub->add_option("--peds", peds, "pedestrians per scene")->capture_default_str();
        sub->add_option("--gps-difficulty", gps_difficulty, "extra shared GPS bias factor")
            ->capture_default_str();
        sub->add_option("--lane-separation", lane_separation,
                        "per-pedestrian depth band spacing [m]")
            ->capture_default_str();
        sub->add_flag("--zero-noise", zero_noise, "disable every noise source");
        sub->add_option("--hop", hop, "window stride [s]")->capture_default_str();
    }

    std::vector<sim::SceneConfig> build(std::uint64_t seed) const {
        std::vector<sim::SceneConfig> out;
        for (int s = 0; s < scenarios; ++s)
            for (int r = 0; r < runs; ++r) {
                sim::SceneConfig c;
                c.scene_id = "s" + std::to_string(s) + "/run" + std::to_string(r);
                c.duration = duration;
                c.n_pedestrians = peds;
                c.gps_difficulty = gps_difficulty;
                c.lane_separation = lane_separation;
                if (zero_noise) c.noise.zero();
                // distinct deterministic stream per scene
                c.seed = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(s * runs + r + 1);
                out.push_back(c);
            }
        return out;
    }
};

struct TrainOptions {
    int epochs = 200;
    int batch = 32;
    double lr = 1e-3;
    double lr_late = 1e-4;
    int lr_drop = 100;
    double dropout = 0.2;
    double leaky = 0.2;
    std::string mask_code = "FIG";

    void add_to(CLI::App* sub) {
        sub->add_option("--epochs", epochs, "training epochs")->capture_default_str();
        sub->add_option("--batch", batch, "batch size")->capture_default_str();
        sub->add_option("--lr", lr, "learning rate")->capture_default_str();
        sub->add_option("--lr-late", lr_late, "rate after the drop epoch")->capture_default_str();
        sub->add_option("--lr-drop", lr_drop, "epoch after which the low rate applies")
            ->capture_default_str();
        sub->add_option("--dropout", dropout, "generator dropout rate")->capture_default_str();
        sub->add_option("--leaky", leaky, "leaky-relu slope")->capture_default_str();
        sub->add_option("--mask", mask_code, "phone features (letters F, R, I, G)")
            ->capture_default_str();
    }

    nn::TrainConfig build(std::uint64_t seed) const {
        nn::TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch;
        t.lr = lr;
        t.lr_late = lr_late;
        t.lr_drop_epoch = lr_drop;
        t.dropout_rate = dropout;
        t.leaky_slope = leaky;
        t.seed = seed;
        return t;
    }
};

struct PfOptions {
    int particles = 1000;
    double process_std = 1.0;
    double gps_std = 2.0;
    double resample = 0.5;

    void add_to(CLI::App* sub) {
        sub->add_option("--pf-particles", particles, "particle count")->capture_default_str();
        sub->add_option("--pf-process-std", process_std, "random-walk std [m/sqrt(s)]")
            ->capture_default_str();
        sub->add_option("--pf-gps-std", gps_std, "GPS likelihood std [m]")
            ->capture_default_str();
        sub->add_option("--pf-resample", resample, "ESS fraction for resampling")
            ->capture_default_str();
    }

    baselines::ParticleFilterConfig build(std::uint64_t seed) const {
        baselines::ParticleFilterConfig c;
        c.n_particles = particles;
        c.process_noise_std = process_std;
        c.gps_meas_std = gps_std;
        c.resample_threshold = resample;
        c.seed = seed;
        return c;
    }
};

inline geo::WorldCameraTransform scene_transform(const sim::Scene& scene,
                                                 const std::string& calib_file) {
    if (calib_file.empty())
        return calib::calibrate_scene(scene.refs, scene.config.intrinsics).transform;
    std::ifstream in(calib_file);
    if (!in) throw std::runtime_error("cannot read calibration " + calib_file);
    return transform_from_json(nlohmann::json::parse(in).at("transform"));
}

}  // namespace detail

namespace detail {

inline int run_impl(CLI::App& app, int argc, const char* const* argv) {
    // resolved before any option captures its default, so snapshots and help
    // show the value the run actually uses
    std::uint64_t seed = detail::default_seed();

    // ---- simulate ----------------------------------------------------------
    auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic scene directory");
    detail::SceneOptions scene_opts;
    std::string sim_out;
    scene_opts.add_to(sim_cmd);
    sim_cmd->add_option("--out", sim_out, "output scene directory")->required();
    sim_cmd->add_option("--seed", seed, "scene seed")->capture_default_str();
    sim_cmd->callback([&] {
        const sim::Scene scene = sim::generate_scene(scene_opts.build(seed));
        sim::write_scene(scene, sim_out);
        detail::write_snapshot(*sim_cmd, sim_out);
    });

    // ---- calibrate ---------------------------------------------------------
    auto* cal_cmd = app.add_subcommand("calibrate", "solve camera extrinsics from a scene");
    std::string cal_scene, cal_out;
    cal_cmd->add_option("--scene", cal_scene, "scene directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cal_cmd->add_option("--out", cal_out, "output directory")->required();
    cal_cmd->callback([&] {
        const sim::Scene scene = sim::read_scene(cal_scene);
        const calib::CalibrationResult res = calib::calibrate_scene(
            scene.refs, scene.config.intrinsics, scene.rsu_world);
        nlohmann::json j;
        j["transform"] = detail::transform_json(res.transform);
        j["reprojection_avg"] = res.reprojection_avg;
        j["reprojection_std"] = res.reprojection_std;
        if (res.rsu_error) j["rsu_error"] = *res.rsu_error;
        fs::create_directories(cal_out);
        std::ofstream(fs::path(cal_out) / "calibration.json") << j.dump(2) << '\n';
        detail::write_snapshot(*cal_cmd, cal_out);
    });

    // ---- makedata ----------------------------------------------------------
    auto* mk_cmd = app.add_subcommand("makedata", "window scenes into train/test records");
    std::vector<std::string> mk_scenes, mk_calibs;
    std::string mk_out;
    double mk_hop = 1.0 / 3.0;
    mk_cmd->add_option("--scene", mk_scenes, "scene directory (repeatable)")
        ->required()
        ->check(CLI::ExistingDirectory);
    mk_cmd->add_option("--calib", mk_calibs,
                       "calibration.json per scene (default: calibrate on the fly)")
        ->check(CLI::ExistingFile)
        ->run_callback_for_default(false);  // keep the empty default out of snapshots
    mk_cmd->add_option("--hop", mk_hop, "window stride [s]")->capture_default_str();
    mk_cmd->add_option("--out", mk_out, "output directory")->required();
    mk_cmd->add_option("--seed", seed, "split seed")->capture_default_str();
    mk_cmd->callback([&] {
        if (!mk_calibs.empty() && mk_calibs.size() != mk_scenes.size())
            throw CLI::ValidationError("--calib", "need one calibration per scene");
        dataset::Dataset all;
        for (std::size_t i = 0; i < mk_scenes.size(); ++i) {
            const sim::Scene scene = sim::read_scene(mk_scenes[i]);
            const auto t = detail::scene_transform(
                scene, mk_calibs.empty() ? std::string() : mk_calibs[i]);
            dataset::Dataset d = dataset::window_scene(scene, t, mk_hop);
            all.insert(all.end(), std::make_move_iterator(d.begin()),
                       std::make_move_iterator(d.end()));
        }
        const auto parts = dataset::split_dataset(all, seed);
        fs::create_directories(mk_out);
        dataset::write_jsonl(parts.first, fs::path(mk_out) / "train.jsonl");
        dataset::write_jsonl(parts.second, fs::path(mk_out) / "test.jsonl");
        detail::write_snapshot(*mk_cmd, mk_out);
    });

    // ---- train -------------------------------------------------------------
    auto* tr_cmd = app.add_subcommand("train", "fit the localization model");
    detail::TrainOptions tr_opts;
    std::string tr_data, tr_out;
    tr_cmd->add_option("--data", tr_data, "training records (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    tr_cmd->add_option("--out", tr_out, "output directory")->required();
    tr_opts.add_to(tr_cmd);
    tr_cmd->add_option("--seed", seed, "model and shuffle seed")->capture_default_str();
    tr_cmd->callback([&] {
        const dataset::Dataset data = dataset::read_jsonl(tr_data);
        gan::GanModel model(parse_mask(tr_opts.mask_code), tr_opts.dropout, tr_opts.leaky, seed);
        const auto history = gan::train(model, data, tr_opts.build(seed));
        fs::create_directories(tr_out);
        model.save(fs::path(tr_out) / "checkpoint.json");
        gan::write_loss_csv(history, fs::path(tr_out) / "loss.csv");
        detail::write_snapshot(*tr_cmd, tr_out);
    });

    // ---- eval --------------------------------------------------------------
    auto* ev_cmd = app.add_subcommand("eval", "score the three methods on test records");
    detail::PfOptions ev_pf;
    std::string ev_ckpt, ev_data, ev_out;
    ev_cmd->add_option("--checkpoint", ev_ckpt, "trained model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    ev_cmd->add_option("--data", ev_data, "test records (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    ev_cmd->add_option("--out", ev_out, "output directory")->required();
    ev_pf.add_to(ev_cmd);
    ev_cmd->add_option("--seed", seed, "particle filter seed")->capture_default_str();
    ev_cmd->callback([&] {
        gan::GanModel model = gan::GanModel::load(ev_ckpt);
        const dataset::Dataset test = dataset::read_jsonl(ev_data);
        const auto table = eval::evaluate_methods(test, model, ev_pf.build(seed));
        fs::create_directories(ev_out);
        std::ofstream csv(fs::path(ev_out) / "table.csv");
        eval::write_table_csv(table, csv);
        std::ofstream md(fs::path(ev_out) / "table.md");
        eval::write_table_markdown(table, md);
        detail::write_snapshot(*ev_cmd, ev_out);
    });

    // ---- perturb -----------------------------------------------------------
    auto* pb_cmd = app.add_subcommand("perturb", "calibration-perturbation sweep");
    detail::FleetOptions pb_fleet;
    detail::TrainOptions pb_train;
    detail::PfOptions pb_pf;
    std::vector<std::string> pb_levels = {"0:0", "5:0.5", "10:1", "15:1.5",
                                          "20:2", "25:2.5", "30:3"};
    std::string pb_out;
    pb_fleet.add_to(pb_cmd);
    pb_train.add_to(pb_cmd);
    pb_pf.add_to(pb_cmd);
    pb_cmd->add_option("--levels", pb_levels, "perturbation levels as DEG:METERS")
        ->capture_default_str();
    pb_cmd->add_option("--out", pb_out, "output directory")->required();
    pb_cmd->add_option("--seed", seed, "pipeline seed")->capture_default_str();
    pb_cmd->callback([&] {
        std::vector<eval::PerturbLevel> levels;
        for (const auto& s : pb_levels) levels.push_back(parse_level(s));
        eval::PipelineConfig cfg;
        cfg.scenes = pb_fleet.build(seed);
        cfg.hop = pb_fleet.hop;
        cfg.train = pb_train.build(seed);
        cfg.pf = pb_pf.build(seed);
        cfg.mask = parse_mask(pb_train.mask_code);
        cfg.split_seed = seed;
        cfg.model_seed = seed;
        cfg.perturb_seed = seed;
        const auto sweep = eval::perturbation_sweep(levels, cfg);
        fs::create_directories(pb_out);
        std::ofstream csv(fs::path(pb_out) / "sweep.csv");
        eval::write_sweep_csv(sweep, csv);
        std::ofstream md(fs::path(pb_out) / "sweep.md");
        eval::write_sweep_markdown(sweep, md);
        detail::write_snapshot(*pb_cmd, pb_out);
    });

    // ---- ablate ------------------------------------------------------------
    auto* ab_cmd = app.add_subcommand("ablate", "feature-mask ablation grid");
    detail::FleetOptions ab_fleet;
    detail::TrainOptions ab_train;
    detail::PfOptions ab_pf;
    std::vector<std::string> ab_masks = {"FIG", "RIG", "FI", "RI", "FG", "RG", "F", "I", "G"};
    std::string ab_out;
    ab_fleet.add_to(ab_cmd);
    ab_train.add_to(ab_cmd);
    ab_pf.add_to(ab_cmd);
    ab_cmd->add_option("--masks", ab_masks, "feature masks (letters F, R, I, G)")
        ->capture_default_str();
    ab_cmd->add_option("--out", ab_out, "output directory")->required();
    ab_cmd->add_option("--seed", seed, "pipeline seed")->capture_default_str();
    ab_cmd->callback([&] {
        std::vector<dataset::FeatureMask> masks;
        for (const auto& s : ab_masks) masks.push_back(parse_mask(s));
        eval::PipelineConfig cfg;
        cfg.scenes = ab_fleet.build(seed);
        cfg.hop = ab_fleet.hop;
        cfg.train = ab_train.build(seed);
        cfg.pf = ab_pf.build(seed);
        cfg.split_seed = seed;
        cfg.model_seed = seed;
        const auto rows = eval::ablation(masks, cfg);
        fs::create_directories(ab_out);
        std::ofstream csv(fs::path(ab_out) / "ablation.csv");
        eval::write_ablation_csv(rows, csv);
        std::ofstream md(fs::path(ab_out) / "ablation.md");
        eval::write_ablation_markdown(rows, md);
        detail::write_snapshot(*ab_cmd, ab_out);
    });

    // ---- selftrain ---------------------------------------------------------
    auto* st_cmd = app.add_subcommand("selftrain", "associate, mint, and fine-tune");
    std::string st_ckpt, st_labeled, st_unlabeled, st_holdout, st_out;
    int st_iters = 1, st_epochs = 50, st_batch = 32;
    double st_lr = 1e-4;
    double st_gate = std::numeric_limits<double>::infinity();
    st_cmd->add_option("--checkpoint", st_ckpt, "pretrained model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    st_cmd->add_option("--labeled", st_labeled, "labeled records (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    st_cmd->add_option("--unlabeled", st_unlabeled, "unlabeled-scene records (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    st_cmd->add_option("--holdout", st_holdout, "held-out labeled records (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    st_cmd->add_option("--iters", st_iters, "self-training iterations")->capture_default_str();
    st_cmd->add_option("--epochs", st_epochs, "fine-tune epochs per iteration")
        ->capture_default_str();
    st_cmd->add_option("--batch", st_batch, "fine-tune batch size")->capture_default_str();
    st_cmd->add_option("--lr", st_lr, "fine-tune learning rate")->capture_default_str();
    st_cmd->add_option("--max-distance", st_gate, "association distance gate [m]")
        ->capture_default_str();
    st_cmd->add_option("--out", st_out, "output directory")->required();
    st_cmd->add_option("--seed", seed, "fine-tune seed")->capture_default_str();
    st_cmd->callback([&] {
        gan::GanModel model = gan::GanModel::load(st_ckpt);
        const dataset::Dataset labeled = dataset::read_jsonl(st_labeled);
        const dataset::Dataset unlabeled = dataset::read_jsonl(st_unlabeled);
        const dataset::Dataset holdout = dataset::read_jsonl(st_holdout);
        std::vector<selftrain::SelfTrainReport> reports;
        for (int it = 1; it <= st_iters; ++it) {
            selftrain::SelfTrainConfig cfg;
            cfg.finetune_epochs = st_epochs;
            cfg.batch_size = st_batch;
            cfg.finetune_lr = st_lr;
            cfg.max_match_distance = st_gate;
            cfg.seed = seed + static_cast<std::uint64_t>(it);
            cfg.iteration = it;
            reports.push_back(
                selftrain::selftrain_iteration(model, labeled, unlabeled, holdout, cfg));
        }
        fs::create_directories(st_out);
        model.save(fs::path(st_out) / "checkpoint.json");
        std::ofstream csv(fs::path(st_out) / "report.csv");
        selftrain::write_report_csv(reports, csv);
        detail::write_snapshot(*st_cmd, st_out);
    });

    // shared plumbing: config files are only processed at the root level,
    // so --config lives there and subcommands fall through to it; full help
    // on usage errors everywhere
    app.set_config("--config", "", "read options from a config.snapshot replay file");
    for (auto* sub : app.get_subcommands(nullptr)) {
        sub->fallthrough();
        sub->failure_message(CLI::FailureMessage::help);
    }
    app.failure_message(CLI::FailureMessage::help);

    app.parse(argc, argv);
    return 0;
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
    CLI::App app{"cross-modal pedestrian localization pipeline"};
    app.require_subcommand(1);
    try {
        return detail::run_impl(app, argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const gan::DivergenceDetected& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

inline int run(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.push_back("viloc");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const auto& a : full) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace viloc::cli
