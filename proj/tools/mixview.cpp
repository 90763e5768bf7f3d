#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mixview/experiment.hpp"
#include "mixview/gradcheck.hpp"

using namespace mixview;

namespace {

ExperimentConfig load_config_with_overrides(const std::string& config_path,
                                            const std::string& out_override,
                                            bool seed_set, uint64_t seed_override) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (seed_set) {
        cfg.seed = seed_override;
        cfg.method.seed = seed_override;
    }
    return cfg;
}

int cmd_run(const std::string& config_path, const std::string& out_override, bool seed_set,
            uint64_t seed_override, bool quiet) {
    ExperimentConfig cfg =
        load_config_with_overrides(config_path, out_override, seed_set, seed_override);
    RunSummary s = run_experiment(cfg, cfg.out_dir, nullptr, quiet ? nullptr : &std::cerr);
    std::cout << "run_id: " << s.run_id << "\n";
    std::cout << "in_dist_accuracy: " << human_num(s.probe.in_dist_accuracy) << "\n";
    std::cout << "mean_shift_accuracy: " << human_num(s.probe.mean_shift_accuracy) << "\n";
    std::cout << "overall_mean: " << human_num(s.overall_mean) << "\n";
    if (s.transfer_accuracy >= 0.0)
        std::cout << "transfer_accuracy: " << human_num(s.transfer_accuracy) << "\n";
    std::cout << "report: " << s.run_dir << "/report.json\n";
    return 0;
}

int cmd_sweep(const std::string& kind, const std::string& config_path,
              const std::string& out_override, bool seed_set, uint64_t seed_override,
              int jobs, bool quiet) {
    ExperimentConfig cfg =
        load_config_with_overrides(config_path, out_override, seed_set, seed_override);
    SweepResult r = run_sweep(kind, cfg, cfg.out_dir, jobs, quiet ? nullptr : &std::cerr);
    std::cout << "label | run_id | in_dist | mean_shift | overall\n";
    for (const auto& [label, s] : r.runs)
        std::cout << label << " | " << s.run_id << " | " << human_num(s.probe.in_dist_accuracy)
                  << " | " << human_num(s.probe.mean_shift_accuracy) << " | "
                  << human_num(s.overall_mean) << "\n";
    std::cout << "comparison: " << cfg.out_dir << "/comparison.csv\n";
    return 0;
}

int cmd_grad_check(uint64_t seed, int trials) {
    std::cout << "op | max_rel_err | trials | status\n";
    bool all_pass = true;
    for (const auto& suite :
         {gradcheck_primitives(seed, trials), gradcheck_objectives(seed, trials)}) {
        for (const auto& c : suite) {
            std::cout << c.name << " | " << human_num(c.max_rel_err) << " | " << c.trials
                      << " | " << (c.pass ? "PASS" : "FAIL") << "\n";
            all_pass = all_pass && c.pass;
        }
    }
    if (!all_pass) {
        std::cerr << "grad-check: failures above tolerance 1e-4\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"mixview: joint-embedding SSL laboratory with synthetic-counterpart mixing"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    uint64_t seed_override = 0;
    int jobs = 1;
    bool quiet = false;

    auto* run = app.add_subcommand("run", "execute one experiment from a config file");
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    auto* run_out = run->add_option("--out", out_dir, "output directory override");
    auto* run_seed = run->add_option("--seed", seed_override, "seed override");
    run->add_flag("--quiet", quiet, "suppress progress logging");

    auto* sweep = app.add_subcommand("sweep", "run a paper-experiment grid from a base config");
    std::string sweep_kind;
    sweep->add_option("kind", sweep_kind, "regimes | guidance | fraction | augmentation | cropmix")
        ->required();
    sweep->add_option("--config", config_path, "base config (JSON)")->required();
    auto* sweep_out = sweep->add_option("--out", out_dir, "output directory override");
    auto* sweep_seed = sweep->add_option("--seed", seed_override, "seed override");
    sweep->add_option("--jobs", jobs, "parallel worker count")->check(CLI::PositiveNumber);
    sweep->add_flag("--quiet", quiet, "suppress progress logging");

    auto* report = app.add_subcommand("report", "summarize a run or sweep directory");
    std::string report_dir;
    report->add_option("dir", report_dir, "run or sweep directory")->required();

    auto* dump = app.add_subcommand("dump-data", "export dataset images as PPM");
    dump->add_option("--config", config_path, "experiment config (JSON)")->required();
    std::string dump_out = "dump";
    dump->add_option("--out", dump_out, "output directory");
    int per_split = 8;
    dump->add_option("--per-split", per_split, "images per split");

    auto* gc = app.add_subcommand("grad-check", "run the finite-difference gradient suite");
    uint64_t gc_seed = 2024;
    int gc_trials = 20;
    gc->add_option("--seed", gc_seed, "oracle seed");
    gc->add_option("--trials", gc_trials, "trials per op");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(run))
            return cmd_run(config_path, run_out->count() ? out_dir : "",
                           run_seed->count() > 0, seed_override, quiet);
        if (app.got_subcommand(sweep))
            return cmd_sweep(sweep_kind, config_path, sweep_out->count() ? out_dir : "",
                             sweep_seed->count() > 0, seed_override, jobs, quiet);
        if (app.got_subcommand(report)) return report_directory(report_dir, std::cout);
        if (app.got_subcommand(dump)) {
            ExperimentConfig cfg = load_experiment_config(config_path);
            dump_dataset(cfg, dump_out, per_split);
            std::cout << "wrote " << dump_out << "/manifest.json\n";
            return 0;
        }
        if (app.got_subcommand(gc)) return cmd_grad_check(gc_seed, gc_trials);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
