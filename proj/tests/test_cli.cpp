#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "viloc/cli.hpp"
#include "viloc/dataset.hpp"

namespace fs = std::filesystem;
namespace cli = viloc::cli;
namespace ds = viloc::dataset;

namespace {

fs::path test_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "viloc_cli_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::vector<std::string>& args) { return cli::run(args); }

// file bytes keyed by relative path; the snapshot is skipped because it
// legitimately differs when only --out differs between runs
std::map<std::string, std::string> dir_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), root).string();
        if (rel == "config.snapshot") continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        out[rel] = ss.str();
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct SharedPipeline {
    fs::path scene0, scene1, data, model;
};

// one simulated pair + windowed data + tiny trained model, reused by the
// downstream subcommand tests
const SharedPipeline& shared_pipeline() {
    static const SharedPipeline sp = [] {
        SharedPipeline p;
        const fs::path root = test_dir("shared");
        p.scene0 = root / "scene0";
        p.scene1 = root / "scene1";
        p.data = root / "data";
        p.model = root / "model";
        const auto need = [](int rc, const std::string& what) {
            if (rc != 0) throw std::runtime_error("pipeline setup failed at " + what);
        };
        need(run_cli({"simulate", "--out", p.scene0.string(), "--scene-id", "t/run0",
                      "--duration", "30", "--peds", "2", "--seed", "11"}),
             "simulate run0");
        need(run_cli({"simulate", "--out", p.scene1.string(), "--scene-id", "t/run1",
                      "--duration", "30", "--peds", "2", "--seed", "12"}),
             "simulate run1");
        need(run_cli({"makedata", "--scene", p.scene0.string(), "--scene", p.scene1.string(),
                      "--hop", "1", "--seed", "3", "--out", p.data.string()}),
             "makedata");
        need(run_cli({"train", "--data", (p.data / "train.jsonl").string(), "--epochs", "2",
                      "--batch", "16", "--seed", "4", "--out", p.model.string()}),
             "train");
        return p;
    }();
    return sp;
}

}  // namespace

TEST_CASE("usage errors exit 1 and help exits 0", "[cli]") {
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"bogus"}) == 1);
    CHECK(run_cli({"simulate"}) == 1);  // missing --out
    CHECK(run_cli({"--help"}) == 0);
    CHECK(run_cli({"simulate", "--help"}) == 0);
    CHECK(run_cli({"train", "--help"}) == 0);
}

TEST_CASE("simulate is deterministic and replays from its snapshot", "[cli]") {
    const fs::path root = test_dir("simulate");
    const std::vector<std::string> base = {"simulate",   "--scene-id", "d/run0", "--duration",
                                           "20",         "--peds",     "1",      "--seed",
                                           "7"};

    auto a1 = base;
    a1.insert(a1.end(), {"--out", (root / "a").string()});
    auto a2 = base;
    a2.insert(a2.end(), {"--out", (root / "b").string()});
    REQUIRE(run_cli(a1) == 0);
    REQUIRE(run_cli(a2) == 0);
    CHECK(dir_contents(root / "a") == dir_contents(root / "b"));
    CHECK(fs::exists(root / "a" / "config.snapshot"));

    // replay the resolved snapshot into a fresh directory
    REQUIRE(run_cli({"simulate", "--config", (root / "a" / "config.snapshot").string(), "--out",
                     (root / "c").string()}) == 0);
    CHECK(dir_contents(root / "a") == dir_contents(root / "c"));
}

TEST_CASE("VILOC_SEED overrides only the default seed", "[cli]") {
    const fs::path root = test_dir("envseed");
    ::setenv("VILOC_SEED", "9", 1);
    REQUIRE(run_cli({"simulate", "--out", (root / "env").string(), "--duration", "20", "--peds",
                     "1"}) == 0);
    // an explicit flag beats the environment
    REQUIRE(run_cli({"simulate", "--out", (root / "flag").string(), "--duration", "20",
                     "--peds", "1", "--seed", "13"}) == 0);
    ::unsetenv("VILOC_SEED");
    REQUIRE(run_cli({"simulate", "--out", (root / "plain").string(), "--duration", "20",
                     "--peds", "1", "--seed", "9"}) == 0);

    CHECK(dir_contents(root / "env") == dir_contents(root / "plain"));
    CHECK(dir_contents(root / "flag") != dir_contents(root / "env"));
    CHECK(slurp(root / "env" / "config.snapshot").find("seed=9") != std::string::npos);

    ::setenv("VILOC_SEED", "not-a-number", 1);
    CHECK(run_cli({"simulate", "--out", (root / "bad").string()}) == 1);
    ::unsetenv("VILOC_SEED");
}

TEST_CASE("calibrate solves a zero-noise scene to survey accuracy", "[cli]") {
    const fs::path root = test_dir("calibrate");
    REQUIRE(run_cli({"simulate", "--out", (root / "scene").string(), "--scene-id", "c/run0",
                     "--duration", "20", "--peds", "1", "--zero-noise", "--seed", "2"}) == 0);
    REQUIRE(run_cli({"calibrate", "--scene", (root / "scene").string(), "--out",
                     (root / "cal").string()}) == 0);

    const auto j = nlohmann::json::parse(slurp(root / "cal" / "calibration.json"));
    REQUIRE(j.contains("transform"));
    CHECK(j.at("transform").at("rotation").size() == 9);
    CHECK(j.at("reprojection_avg").get<double>() < 1e-6);
    CHECK(j.at("rsu_error").get<double>() < 1e-6);
}

TEST_CASE("makedata writes disjoint train and test records", "[cli]") {
    const auto& p = shared_pipeline();
    const auto train = ds::read_jsonl(p.data / "train.jsonl");
    const auto test = ds::read_jsonl(p.data / "test.jsonl");
    REQUIRE(!train.empty());
    REQUIRE(!test.empty());
    // the held-out run is seed-chosen, so only pin that the split is clean
    std::set<std::string> train_scenes, test_scenes;
    for (const auto& r : train) train_scenes.insert(r.scene);
    for (const auto& r : test) test_scenes.insert(r.scene);
    CHECK(train_scenes.size() == 1);
    CHECK(test_scenes.size() == 1);
    std::set<std::string> both = train_scenes;
    both.insert(test_scenes.begin(), test_scenes.end());
    CHECK(both == std::set<std::string>{"t/run0", "t/run1"});

    // accepts precomputed calibrations, one per scene
    const fs::path root = test_dir("makedata_calib");
    REQUIRE(run_cli({"calibrate", "--scene", p.scene0.string(), "--out",
                     (root / "c0").string()}) == 0);
    REQUIRE(run_cli({"calibrate", "--scene", p.scene1.string(), "--out",
                     (root / "c1").string()}) == 0);
    CHECK(run_cli({"makedata", "--scene", p.scene0.string(), "--scene", p.scene1.string(),
                   "--calib", (root / "c0" / "calibration.json").string(), "--calib",
                   (root / "c1" / "calibration.json").string(), "--hop", "1", "--seed", "3",
                   "--out", (root / "data").string()}) == 0);
    CHECK(run_cli({"makedata", "--scene", p.scene0.string(), "--calib",
                   (root / "c0" / "calibration.json").string(), "--calib",
                   (root / "c1" / "calibration.json").string(), "--out",
                   (root / "broken").string()}) == 1);  // calib/scene count mismatch

    // snapshot replay reproduces the jsonl outputs byte for byte
    REQUIRE(run_cli({"makedata", "--config", (p.data / "config.snapshot").string(), "--out",
                     (root / "replay").string()}) == 0);
    CHECK(slurp(root / "replay" / "train.jsonl") == slurp(p.data / "train.jsonl"));
    CHECK(slurp(root / "replay" / "test.jsonl") == slurp(p.data / "test.jsonl"));

    const fs::path empty = test_dir("empty_scene");
    CHECK(run_cli({"makedata", "--scene", empty.string(), "--out",
                   (root / "bad").string()}) == 2);
}

TEST_CASE("train writes a checkpoint and a loss log", "[cli]") {
    const auto& p = shared_pipeline();
    CHECK(fs::exists(p.model / "checkpoint.json"));
    const std::string loss = slurp(p.model / "loss.csv");
    CHECK(loss.rfind("epoch,l_emb,l_d,l_g_adv,l_reg\n", 0) == 0);
    CHECK(std::count(loss.begin(), loss.end(), '\n') == 3);  // header + 2 epochs

    CHECK(run_cli({"train", "--data", (p.data / "train.jsonl").string(), "--epochs", "1",
                   "--mask", "FXZ", "--out", (p.model.parent_path() / "badmask").string()}) ==
          1);
}

TEST_CASE("eval scores a checkpoint against test records", "[cli]") {
    const auto& p = shared_pipeline();
    const fs::path out = test_dir("eval");
    REQUIRE(run_cli({"eval", "--checkpoint", (p.model / "checkpoint.json").string(), "--data",
                     (p.data / "test.jsonl").string(), "--pf-particles", "200", "--seed", "5",
                     "--out", out.string()}) == 0);
    const std::string csv = slurp(out / "table.csv");
    CHECK(csv.rfind("scene,method,n,avg,std,med,p95\n", 0) == 0);
    CHECK(csv.find("Overall,Phone GPS,") != std::string::npos);
    CHECK(csv.find("Overall,GAN,") != std::string::npos);
    CHECK(fs::exists(out / "table.md"));

    // a json file that is not a checkpoint is a data error
    const fs::path junk = out / "junk.json";
    std::ofstream(junk) << "{}\n";
    CHECK(run_cli({"eval", "--checkpoint", junk.string(), "--data",
                   (p.data / "test.jsonl").string(), "--out", (out / "x").string()}) == 2);
}

TEST_CASE("zero-noise pipeline leaves only hold staleness in the gps row", "[cli]") {
    const fs::path root = test_dir("zeronoise");
    for (int run = 0; run < 2; ++run) {
        REQUIRE(run_cli({"simulate", "--out", (root / ("s" + std::to_string(run))).string(),
                         "--scene-id", "z/run" + std::to_string(run), "--duration", "30",
                         "--peds", "1", "--zero-noise", "--seed",
                         std::to_string(20 + run)}) == 0);
    }
    REQUIRE(run_cli({"makedata", "--scene", (root / "s0").string(), "--scene",
                     (root / "s1").string(), "--hop", "1", "--out",
                     (root / "data").string()}) == 0);
    REQUIRE(run_cli({"train", "--data", (root / "data" / "train.jsonl").string(), "--epochs",
                     "1", "--batch", "16", "--out", (root / "model").string()}) == 0);
    REQUIRE(run_cli({"eval", "--checkpoint", (root / "model" / "checkpoint.json").string(),
                     "--data", (root / "data" / "test.jsonl").string(), "--pf-particles",
                     "100", "--out", (root / "eval").string()}) == 0);

    // exact fixes, so the only gps error left is the zero-order-hold lag
    std::istringstream csv(slurp(root / "eval" / "table.csv"));
    std::string line;
    double gps_avg = -1.0;
    while (std::getline(csv, line))
        if (line.rfind("Overall,Phone GPS,", 0) == 0) {
            std::istringstream fields(line.substr(line.rfind("GPS,") + 4));
            std::string n, avg;
            std::getline(fields, n, ',');
            std::getline(fields, avg, ',');
            gps_avg = std::stod(avg);
        }
    REQUIRE(gps_avg >= 0.0);
    CHECK(gps_avg < 1.5);
}

TEST_CASE("training divergence exits 3", "[cli]") {
    const auto& p = shared_pipeline();
    CHECK(run_cli({"train", "--data", (p.data / "train.jsonl").string(), "--epochs", "3",
                   "--lr", "1e150", "--out", (test_dir("diverge")).string()}) == 3);
}

TEST_CASE("perturb sweep emits one block per level", "[cli]") {
    const fs::path out = test_dir("perturb");
    REQUIRE(run_cli({"perturb", "--scenarios", "1", "--runs", "2", "--duration", "20",
                     "--peds", "1", "--epochs", "1", "--batch", "16", "--pf-particles", "100",
                     "--levels", "0:0", "10:1", "--seed", "6", "--out", out.string()}) == 0);
    const std::string csv = slurp(out / "sweep.csv");
    CHECK(csv.rfind("sigma_theta_deg,sigma_t_m,scene,method,n,avg,std,med,p95\n", 0) == 0);
    CHECK(csv.find("\n0,0,") != std::string::npos);
    CHECK(csv.find("\n10,1,") != std::string::npos);
    CHECK(fs::exists(out / "sweep.md"));

    CHECK(run_cli({"perturb", "--levels", "5", "--out", (out / "bad").string()}) == 1);
}

TEST_CASE("ablate emits one row per mask", "[cli]") {
    const fs::path out = test_dir("ablate");
    REQUIRE(run_cli({"ablate", "--scenarios", "1", "--runs", "2", "--duration", "20", "--peds",
                     "1", "--epochs", "1", "--batch", "16", "--pf-particles", "100", "--masks",
                     "FIG", "G", "--seed", "6", "--out", out.string()}) == 0);
    const std::string csv = slurp(out / "ablation.csv");
    CHECK(csv.rfind("mask,n,avg,std,med,p95\n", 0) == 0);
    CHECK(csv.find("FTM+IMU+GPS,") != std::string::npos);
    CHECK(csv.find("\nGPS,") != std::string::npos);
    CHECK(fs::exists(out / "ablation.md"));
}

TEST_CASE("selftrain fine-tunes a checkpoint and reports", "[cli]") {
    const auto& p = shared_pipeline();
    const fs::path out = test_dir("selftrain");
    REQUIRE(run_cli({"selftrain", "--checkpoint", (p.model / "checkpoint.json").string(),
                     "--labeled", (p.data / "train.jsonl").string(), "--unlabeled",
                     (p.data / "test.jsonl").string(), "--holdout",
                     (p.data / "test.jsonl").string(), "--iters", "1", "--epochs", "1",
                     "--batch", "16", "--seed", "8", "--out", out.string()}) == 0);
    const std::string csv = slurp(out / "report.csv");
    CHECK(csv.rfind("iteration,precision,minted_count,pre_error,post_error\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
    CHECK(fs::exists(out / "checkpoint.json"));
}
