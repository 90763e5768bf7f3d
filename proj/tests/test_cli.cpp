#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mixview/config.hpp"
#include "mixview/experiment.hpp"

using namespace mixview;
namespace fs = std::filesystem;

namespace {

std::string bin_path() {
    const char* p = std::getenv("MIXVIEW_BIN");
    REQUIRE(p != nullptr);
    return p;
}

int run_cmd(const std::string& args, std::string* output = nullptr) {
    const std::string out_file =
        (fs::temp_directory_path() / "mixview_cli_out.txt").string();
    const std::string cmd =
        "OPENBLAS_NUM_THREADS=1 " + bin_path() + " " + args + " >" + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (output) {
        std::ifstream f(out_file);
        std::ostringstream os;
        os << f.rdbuf();
        *output = os.str();
    }
    return WEXITSTATUS(status);
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
    const fs::path p = fs::temp_directory_path() / name;
    std::ofstream f(p);
    f << j.dump(2);
    return p;
}

nlohmann::json tiny_config(const std::string& out_dir) {
    return nlohmann::json{
        {"seed", 3},
        {"out_dir", out_dir},
        {"dataset",
         {{"classes", 10}, {"train_per_class", 4}, {"test_per_class", 2},
          {"train_seed", 5}, {"test_seed", 9}, {"shifts", {"v2", "sketch"}}}},
        {"method",
         {{"objective", "simclr"}, {"regime", "mixdiff"}, {"epochs", 1}, {"batch_size", 16}}},
        {"eval", {{"probe_epochs", 10}, {"fid", false}, {"diversity", false}}}};
}

}  // namespace

TEST_CASE("config parsing and validation") {
    SECTION("minimal valid config resolves every default") {
        ExperimentConfig cfg = parse_experiment_config(nlohmann::json{{"seed", 42}});
        REQUIRE(cfg.seed == 42);
        REQUIRE(cfg.method.seed == 42);
        REQUIRE(cfg.dataset.classes == 10);
        REQUIRE(cfg.method.objective == Objective::simclr);
        REQUIRE(cfg.method.batch_size == 256);
        REQUIRE(cfg.eval.probe_epochs == 200);
        REQUIRE(cfg.dataset.train_seed != cfg.dataset.test_seed);
    }
    SECTION("missing seed names the field") {
        try {
            parse_experiment_config(nlohmann::json::object());
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("seed") != std::string::npos);
        }
    }
    SECTION("bad fields carry their path") {
        auto expect_path = [](nlohmann::json j, const std::string& path) {
            try {
                parse_experiment_config(j);
                FAIL("expected ConfigError for " + path);
            } catch (const ConfigError& e) {
                INFO(e.what());
                REQUIRE(std::string(e.what()).find(path) != std::string::npos);
            }
        };
        expect_path({{"seed", 1}, {"method", {{"objective", "moco"}}}}, "method.objective");
        expect_path({{"seed", 1}, {"method", {{"regime", "parallel"}}}}, "method.regime");
        expect_path({{"seed", 1}, {"method", {{"augmentation", "warp"}}}},
                    "method.augmentation");
        expect_path({{"seed", 1}, {"method", {{"crop_mix", {1, 2}}}}}, "method.crop_mix");
        expect_path({{"seed", 1}, {"method", {{"optimizer", "lars"}}}}, "method.optimizer");
        expect_path({{"seed", 1}, {"dataset", {{"guidance_scales", {99.0}}}}}, "dataset");
        expect_path({{"seed", 1}, {"dataset", {{"shifts", {"fog"}}}}}, "dataset.shifts");
    }
    SECTION("config hash ignores the output directory") {
        ExperimentConfig a = parse_experiment_config(nlohmann::json{{"seed", 1}});
        ExperimentConfig b = a;
        b.out_dir = "elsewhere";
        REQUIRE(config_hash(a) == config_hash(b));
        b.method.guidance = 3.0;
        REQUIRE(config_hash(a) != config_hash(b));
    }
    SECTION("run id is stable and descriptive") {
        ExperimentConfig cfg = parse_experiment_config(nlohmann::json{{"seed", 1}});
        const std::string id = make_run_id(cfg);
        REQUIRE(id.find("simclr-mixdiff") == 0);
        REQUIRE(make_run_id(cfg) == id);
    }
}

TEST_CASE("cli run + rerun determinism + report") {
    const fs::path out1 = fs::temp_directory_path() / "mixview_cli_run1";
    const fs::path out2 = fs::temp_directory_path() / "mixview_cli_run2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    const fs::path cfg = write_config("mixview_cli_cfg.json", tiny_config(out1.string()));

    std::string output;
    REQUIRE(run_cmd("run --config " + cfg.string() + " --quiet", &output) == 0);
    INFO(output);
    REQUIRE(output.find("run_id:") != std::string::npos);
    REQUIRE(output.find("in_dist_accuracy:") != std::string::npos);

    // rerun into a second directory: metrics and history must be byte-identical
    REQUIRE(run_cmd("run --config " + cfg.string() + " --out " + out2.string() + " --quiet") ==
            0);
    fs::path run1, run2;
    for (const auto& e : fs::directory_iterator(out1)) run1 = e.path();
    for (const auto& e : fs::directory_iterator(out2)) run2 = e.path();
    REQUIRE(read_file(run1 / "metrics.json") == read_file(run2 / "metrics.json"));
    REQUIRE(read_file(run1 / "history.csv") == read_file(run2 / "history.csv"));

    SECTION("report prints one row per run") {
        std::string rep;
        REQUIRE(run_cmd("report " + out1.string(), &rep) == 0);
        REQUIRE(rep.find("run_id | in_dist") != std::string::npos);
        REQUIRE(rep.find("simclr-mixdiff") != std::string::npos);
        REQUIRE(fs::exists(out1 / "report_long.csv"));
    }
    SECTION("an incomplete run is listed as MISSING, exit 0") {
        fs::create_directories(out1 / "half-finished-run");
        std::ofstream(out1 / "half-finished-run" / "history.csv") << "run_id,epoch\n";
        std::string rep;
        REQUIRE(run_cmd("report " + out1.string(), &rep) == 0);
        REQUIRE(rep.find("MISSING") != std::string::npos);
    }
}

TEST_CASE("cli exit codes") {
    SECTION("missing seed exits 2 and names the field") {
        const fs::path cfg =
            write_config("mixview_cli_noseed.json", nlohmann::json{{"out_dir", "x"}});
        std::string output;
        REQUIRE(run_cmd("run --config " + cfg.string(), &output) == 2);
        REQUIRE(output.find("seed") != std::string::npos);
    }
    SECTION("invalid json exits 2") {
        const fs::path p = fs::temp_directory_path() / "mixview_cli_bad.json";
        std::ofstream(p) << "{ not json";
        REQUIRE(run_cmd("run --config " + p.string()) == 2);
    }
    SECTION("unknown sweep kind exits 2") {
        const fs::path cfg = write_config("mixview_cli_sweepcfg.json",
                                          tiny_config((fs::temp_directory_path() /
                                                       "mixview_cli_sweepout").string()));
        REQUIRE(run_cmd("sweep flavors --config " + cfg.string()) == 2);
    }
    SECTION("report on an empty directory exits 0") {
        const fs::path empty = fs::temp_directory_path() / "mixview_cli_empty";
        fs::create_directories(empty);
        std::string output;
        REQUIRE(run_cmd("report " + empty.string(), &output) == 0);
        REQUIRE(output.find("no runs found") != std::string::npos);
    }
}

TEST_CASE("cli dump-data writes ppm images and a manifest") {
    const fs::path out = fs::temp_directory_path() / "mixview_cli_dump";
    fs::remove_all(out);
    const fs::path cfg = write_config(
        "mixview_cli_dumpcfg.json",
        tiny_config((fs::temp_directory_path() / "mixview_cli_dumprun").string()));
    REQUIRE(run_cmd("dump-data --config " + cfg.string() + " --out " + out.string() +
                    " --per-split 2") == 0);
    REQUIRE(fs::exists(out / "manifest.json"));
    int ppm_count = 0;
    for (const auto& e : fs::directory_iterator(out))
        if (e.path().extension() == ".ppm") ++ppm_count;
    REQUIRE(ppm_count >= 6);  // train, test, counterpart, two shifts
    nlohmann::json manifest = nlohmann::json::parse(read_file(out / "manifest.json"));
    REQUIRE(manifest.contains("content_hash"));
    REQUIRE(manifest["spec"]["classes"] == 10);
}

TEST_CASE("sweep grids have the documented shapes") {
    ExperimentConfig base = parse_experiment_config(nlohmann::json{{"seed", 1}});
    REQUIRE(sweep_grid("regimes", base).size() == 6);
    auto guidance = sweep_grid("guidance", base);
    REQUIRE(guidance.size() == 5);
    for (const auto& p : guidance)
        REQUIRE(std::find(p.cfg.dataset.guidance_scales.begin(),
                          p.cfg.dataset.guidance_scales.end(),
                          p.cfg.method.guidance) != p.cfg.dataset.guidance_scales.end());
    REQUIRE(sweep_grid("fraction", base).size() == 3);
    REQUIRE(sweep_grid("augmentation", base).size() == 6);
    auto cropmix = sweep_grid("cropmix", base);
    REQUIRE(cropmix.size() == 5);
    REQUIRE(cropmix[0].cfg.method.regime == Regime::real);       // (8,2,0,0)
    REQUIRE(cropmix[1].cfg.method.regime == Regime::syn);        // (0,0,8,2)
    REQUIRE(cropmix[4].cfg.method.regime == Regime::mixdiff);    // (6,1,2,1)
    for (const auto& p : cropmix) REQUIRE(p.cfg.method.objective == Objective::dino);
    REQUIRE_THROWS_AS(sweep_grid("flavors", base), ConfigError);
}

TEST_CASE("cli sweep executes a small fraction grid") {
    const fs::path out = fs::temp_directory_path() / "mixview_cli_sweep_frac";
    fs::remove_all(out);
    nlohmann::json cfg = tiny_config(out.string());
    cfg["method"]["epochs"] = 1;
    const fs::path cfg_path = write_config("mixview_cli_fraccfg.json", cfg);
    std::string output;
    REQUIRE(run_cmd("sweep fraction --config " + cfg_path.string() + " --quiet", &output) == 0);
    INFO(output);
    REQUIRE(fs::exists(out / "comparison.csv"));
    // 3 runs + comparison.csv
    int run_dirs = 0;
    for (const auto& e : fs::directory_iterator(out))
        if (e.is_directory()) ++run_dirs;
    REQUIRE(run_dirs == 3);
    const std::string comparison = read_file(out / "comparison.csv");
    REQUIRE(comparison.find("fraction=0.25") != std::string::npos);
    REQUIRE(comparison.find("fraction=1") != std::string::npos);
}
