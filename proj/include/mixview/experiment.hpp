#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mixview/config.hpp"
#include "mixview/evalsuite.hpp"
#include "mixview/trainer.hpp"

namespace mixview {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// formatting and atomic file helpers
// ---------------------------------------------------------------------------

/// Full-precision decimal for CSV cells (round-trips f64 exactly).
inline std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Human-table numbers use 6 significant digits.
inline std::string human_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

/// Temp-file-plus-rename write; a crashed run never leaves a partial file.
inline void atomic_write(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("atomic_write: cannot open " + tmp.string());
        f << content;
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_file: cannot open " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// run identity
// ---------------------------------------------------------------------------

inline std::string make_run_id(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << objective_name(cfg.method.objective) << "-" << regime_name(cfg.method.regime);
    if (cfg.method.regime != Regime::real) {
        char g[16];
        std::snprintf(g, sizeof(g), "%g", cfg.method.guidance);
        os << "-k" << g;
    }
    os << "-" << cfg.method.aug_policy;
    if (cfg.method.objective == Objective::dino)
        os << "-cm" << cfg.method.crop_mix.real_local << cfg.method.crop_mix.real_global
           << cfg.method.crop_mix.syn_local << cfg.method.crop_mix.syn_global;
    if (cfg.method.data_fraction < 1.0)
        os << "-f" << static_cast<int>(cfg.method.data_fraction * 100.0 + 0.5);
    os << "-s" << cfg.method.seed;
    os << "-" << config_hash(cfg).substr(0, 8);
    return os.str();
}

// ---------------------------------------------------------------------------
// one full experiment: dataset -> pretrain -> probe -> evaluate -> metrics
// ---------------------------------------------------------------------------

struct RunSummary {
    std::string run_id;
    std::string run_dir;
    std::string config_hash_hex;
    ProbeResult probe;
    double overall_mean = 0.0;
    double transfer_accuracy = -1.0;  // negative = not evaluated
    std::map<double, double> local_fid_by_k;
    std::map<int, double> diversity_real;
    double diversity_real_mean = 0.0;
    std::map<double, double> diversity_syn_mean_by_k;
    std::map<double, std::map<int, double>> diversity_syn_by_k;
    bool collapsed = false;
    int collapse_epoch = -1;
    double wall_total_ms = 0.0;
    std::vector<HistoryRow> history;
};

namespace detail {

inline std::string history_csv(const std::string& run_id, const std::vector<HistoryRow>& rows) {
    std::ostringstream os;
    os << "run_id,epoch,loss,lr,emb_std,wall_ms\n";
    for (const auto& r : rows)
        os << run_id << "," << r.epoch << "," << csv_num(r.loss) << "," << csv_num(r.lr) << ","
           << csv_num(r.emb_std) << "," << csv_num(r.wall_ms) << "\n";
    return os.str();
}

inline std::string results_csv(const std::string& run_id, const RunSummary& s) {
    std::ostringstream os;
    os << "run_id,split,accuracy,n\n";
    for (const auto& [split, acc] : s.probe.split_accuracy)
        os << run_id << "," << split << "," << csv_num(acc) << ","
           << s.probe.split_n.at(split) << "\n";
    if (s.transfer_accuracy >= 0.0)
        os << run_id << ",transfer," << csv_num(s.transfer_accuracy) << ",-1\n";
    return os.str();
}

/// Transfer protocol: probes on the disjoint-glyph world's real train split,
/// best checkpoint over the lr grid selected by cadence evaluation.
inline double transfer_accuracy(const Encoder& encoder, const ExperimentConfig& cfg) {
    DatasetSpec tspec;
    tspec.classes = cfg.dataset.classes;
    tspec.train_per_class = cfg.dataset.train_per_class;
    tspec.test_per_class = cfg.dataset.test_per_class;
    tspec.image_size = cfg.dataset.image_size;
    tspec.glyph_family_base = 10;
    tspec.train_seed = derive_seed(cfg.dataset.train_seed, 0x7452414eull);  // 'TRAN'
    tspec.test_seed = derive_seed(cfg.dataset.test_seed, 0x7452414eull);
    tspec.shifts = {};
    tspec.guidance_scales = {};
    Dataset tdata = make_dataset(tspec);

    FeatureSet train = extract_features(encoder, tdata.train, "transfer-train");
    FeatureSet test = extract_features(encoder, tdata.test, "transfer-test");

    double best = 0.0;
    Tensor x = Tensor::from({train.rows, train.dim}, train.data);
    for (double lr : cfg.eval.transfer_probe_lrs) {
        // cadence evaluation: the best intermediate checkpoint wins
        const int cadence = std::max(1, cfg.eval.transfer_eval_cadence);
        LinearProbe running = train_linear_probe(train, 0, lr);
        OptimizerState opt{OptimizerConfig{}};
        for (int trained = 0; trained < cfg.eval.transfer_probe_epochs; ++trained) {
            Tensor logits = affine(x, running.w, running.b);
            Tensor loss = supervised_ce(logits, train.labels);
            running.w.zero_grad();
            running.b.zero_grad();
            backward(loss);
            ParamStore ps;
            ps.insert("w", running.w);
            ps.insert("b", running.b);
            opt.step(ps, lr);
            if ((trained + 1) % cadence == 0 || trained + 1 == cfg.eval.transfer_probe_epochs)
                best = std::max(best, probe_accuracy(running, test));
        }
    }
    return best;
}

}  // namespace detail

/// Executes the full pipeline for one config. When a sweep shares a dataset,
/// pass it; it must have been built from cfg.dataset-compatible seeds.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_root,
                                 const Dataset* shared_dataset = nullptr,
                                 std::ostream* log = nullptr) {
    tune_allocator();
    const int64_t train_size =
        static_cast<int64_t>(cfg.dataset.classes) * cfg.dataset.train_per_class;
    if (cfg.eval.fid && train_size < 65)
        throw ConfigError(
            "eval.fid: local-FID needs at least 65 feature rows per set; enlarge the dataset "
            "or set eval.fid=false");
    const auto wall0 = std::chrono::steady_clock::now();
    RunSummary s;
    s.run_id = make_run_id(cfg);
    s.config_hash_hex = config_hash(cfg);
    const fs::path run_dir = fs::path(out_root) / s.run_id;
    s.run_dir = run_dir.string();
    fs::create_directories(run_dir);

    if (log) *log << "[" << s.run_id << "] dataset..." << std::endl;
    Dataset local_dataset;
    const Dataset* data = shared_dataset;
    if (!data) {
        local_dataset = make_dataset(cfg.dataset);
        data = &local_dataset;
    }

    if (log) *log << "[" << s.run_id << "] pretrain..." << std::endl;
    PretrainResult pre = pretrain(cfg.method, *data, nullptr, cfg.eval.record_wall_ms);
    s.history = pre.history;
    s.collapsed = pre.collapsed;
    s.collapse_epoch = pre.collapse_epoch;

    atomic_write(run_dir / "config.json", config_echo(cfg).dump(2) + "\n");
    atomic_write(run_dir / "history.csv", detail::history_csv(s.run_id, pre.history));
    save_checkpoint(pre.params, (run_dir / "checkpoint").string());

    if (log) *log << "[" << s.run_id << "] evaluate..." << std::endl;
    Encoder encoder = Encoder::from_params(pre.encoder_cfg, pre.params.clone(false));
    FeatureSet train_features = extract_features(encoder, data->train, "train");
    LinearProbe probe =
        train_linear_probe(train_features, cfg.eval.probe_epochs, cfg.eval.probe_lr);
    s.probe = evaluate_probe(probe, encoder, *data);
    s.overall_mean =
        (s.probe.in_dist_accuracy + 5.0 * s.probe.mean_shift_accuracy) / 6.0;

    if (cfg.eval.transfer) s.transfer_accuracy = detail::transfer_accuracy(encoder, cfg);

    if (cfg.eval.fid || cfg.eval.diversity) {
        if (cfg.eval.diversity) {
            s.diversity_real = diversity(train_features);
            double mean = 0;
            for (const auto& [cls, v] : s.diversity_real) mean += v;
            s.diversity_real_mean = mean / static_cast<double>(s.diversity_real.size());
        }
        for (const auto& [k, images] : data->counterparts) {
            FeatureSet syn = extract_features(encoder, images, "syn");
            if (cfg.eval.fid) s.local_fid_by_k[k] = fid(train_features, syn);
            if (cfg.eval.diversity) {
                auto div = diversity(syn);
                double m = 0;
                for (const auto& [cls, v] : div) m += v;
                s.diversity_syn_mean_by_k[k] = m / static_cast<double>(div.size());
                s.diversity_syn_by_k[k] = std::move(div);
            }
        }
    }

    atomic_write(run_dir / "results.csv", detail::results_csv(s.run_id, s));

    // metrics.json: every number re-derivable from (config, code version);
    // no timing, so reruns are byte-identical
    nlohmann::ordered_json metrics;
    metrics["run_id"] = s.run_id;
    metrics["code_version"] = kVersion;
    metrics["config_hash"] = s.config_hash_hex;
    metrics["dataset_hash"] = hash_hex(data->content_hash());
    nlohmann::ordered_json accs;
    for (const auto& [split, acc] : s.probe.split_accuracy) accs[split] = acc;
    metrics["split_accuracy"] = accs;
    metrics["in_dist_accuracy"] = s.probe.in_dist_accuracy;
    metrics["mean_shift_accuracy"] = s.probe.mean_shift_accuracy;
    metrics["overall_mean"] = s.overall_mean;
    if (s.transfer_accuracy >= 0.0) metrics["transfer_accuracy"] = s.transfer_accuracy;
    auto k_key = [](double k) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%g", k);
        return std::string(buf);
    };
    nlohmann::ordered_json fid_j;
    for (const auto& [k, v] : s.local_fid_by_k) fid_j[k_key(k)] = v;
    metrics["local_fid_by_k"] = fid_j;
    nlohmann::ordered_json divr;
    for (const auto& [cls, v] : s.diversity_real) divr[std::to_string(cls)] = v;
    metrics["diversity_real"] = divr;
    metrics["diversity_real_mean"] = s.diversity_real_mean;
    nlohmann::ordered_json divs;
    for (const auto& [k, v] : s.diversity_syn_mean_by_k) divs[k_key(k)] = v;
    metrics["diversity_syn_mean_by_k"] = divs;
    nlohmann::ordered_json divs_full;
    for (const auto& [k, per_class] : s.diversity_syn_by_k) {
        nlohmann::ordered_json klass;
        for (const auto& [cls, v] : per_class) klass[std::to_string(cls)] = v;
        divs_full[k_key(k)] = klass;
    }
    metrics["diversity_syn_by_k"] = divs_full;
    metrics["collapsed"] = s.collapsed;
    metrics["collapse_epoch"] = s.collapse_epoch;
    atomic_write(run_dir / "metrics.json", metrics.dump(2) + "\n");

    const auto wall1 = std::chrono::steady_clock::now();
    s.wall_total_ms = std::chrono::duration<double, std::milli>(wall1 - wall0).count();

    // report.json is the completion marker; written last
    nlohmann::ordered_json report;
    report["run_id"] = s.run_id;
    report["code_version"] = kVersion;
    report["config_hash"] = s.config_hash_hex;
    report["config"] = config_echo(cfg);
    report["artifacts"] = {{"history", "history.csv"},
                           {"results", "results.csv"},
                           {"metrics", "metrics.json"},
                           {"checkpoint", "checkpoint.json"}};
    report["wall_ms"] = {{"total", s.wall_total_ms}};
    report["complete"] = true;
    atomic_write(run_dir / "report.json", report.dump(2) + "\n");
    return s;
}

// ---------------------------------------------------------------------------
// sweeps: one subcommand per paper experiment
// ---------------------------------------------------------------------------

struct SweepPoint {
    std::string label;
    ExperimentConfig cfg;
};

inline std::vector<SweepPoint> sweep_grid(const std::string& kind,
                                          const ExperimentConfig& base) {
    std::vector<SweepPoint> grid;
    if (kind == "regimes") {
        for (Regime r : {Regime::mixdiff, Regime::real, Regime::syn, Regime::mixing,
                         Regime::sequential}) {
            ExperimentConfig c = base;
            c.method.regime = r;
            grid.push_back({std::string("regime=") + regime_name(r), c});
        }
        ExperimentConfig sup = base;
        sup.method.objective = Objective::supervised;
        sup.method.regime = Regime::real;
        grid.push_back({"regime=supervised", sup});
    } else if (kind == "guidance") {
        for (double k : {2.0, 3.0, 6.0, 8.0, 12.0}) {
            ExperimentConfig c = base;
            c.method.guidance = k;
            if (std::find(c.dataset.guidance_scales.begin(), c.dataset.guidance_scales.end(),
                          k) == c.dataset.guidance_scales.end())
                c.dataset.guidance_scales.push_back(k);
            std::sort(c.dataset.guidance_scales.begin(), c.dataset.guidance_scales.end());
            char label[16];
            std::snprintf(label, sizeof(label), "k=%g", k);
            grid.push_back({label, c});
        }
    } else if (kind == "fraction") {
        for (double f : {0.25, 0.5, 1.0}) {
            ExperimentConfig c = base;
            c.method.data_fraction = f;
            char label[24];
            std::snprintf(label, sizeof(label), "fraction=%g", f);
            grid.push_back({label, c});
        }
    } else if (kind == "augmentation") {
        for (const char* preset : {"none", "flip", "blur", "solarization", "jitter", "all"}) {
            ExperimentConfig c = base;
            c.method.aug_policy = preset;
            grid.push_back({std::string("augmentation=") + preset, c});
        }
    } else if (kind == "cropmix") {
        const std::vector<CropMix> rows = {
            {8, 2, 0, 0}, {0, 0, 8, 2}, {2, 1, 6, 1}, {4, 1, 4, 1}, {6, 1, 2, 1}};
        for (const CropMix& cm : rows) {
            ExperimentConfig c = base;
            c.method.objective = Objective::dino;
            c.method.crop_mix = cm;
            if (cm.syn_local + cm.syn_global == 0)
                c.method.regime = Regime::real;
            else if (cm.real_local + cm.real_global == 0)
                c.method.regime = Regime::syn;
            else
                c.method.regime = Regime::mixdiff;
            std::ostringstream label;
            label << "cropmix=" << cm.real_local << "," << cm.real_global << "," << cm.syn_local
                  << "," << cm.syn_global;
            grid.push_back({label.str(), c});
        }
    } else {
        throw ConfigError("sweep: unknown kind '" + kind + "'");
    }
    return grid;
}

struct SweepResult {
    std::vector<std::pair<std::string, RunSummary>> runs;  // (label, summary)
};

/// Executes one run per grid point. The dataset is shared across all points:
/// the grids only vary counterpart scales, subsets, or method settings, and
/// the dataset is a pure function of its spec, so a single superset build
/// serves every point.
inline SweepResult run_sweep(const std::string& kind, const ExperimentConfig& base,
                             const std::string& out_root, int jobs = 1,
                             std::ostream* log = nullptr) {
    std::vector<SweepPoint> grid = sweep_grid(kind, base);

    // superset of guidance scales over the grid so one dataset serves all
    DatasetSpec shared_spec = base.dataset;
    for (const auto& p : grid)
        for (double k : p.cfg.dataset.guidance_scales)
            if (std::find(shared_spec.guidance_scales.begin(), shared_spec.guidance_scales.end(),
                          k) == shared_spec.guidance_scales.end())
                shared_spec.guidance_scales.push_back(k);
    std::sort(shared_spec.guidance_scales.begin(), shared_spec.guidance_scales.end());
    if (log) *log << "[sweep " << kind << "] building shared dataset..." << std::endl;
    Dataset shared = make_dataset(shared_spec);

    SweepResult result;
    result.runs.resize(grid.size());
    std::mutex mu;
    size_t next = 0;
    auto worker = [&]() {
        for (;;) {
            size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= grid.size()) return;
                i = next++;
            }
            RunSummary s = run_experiment(grid[i].cfg, out_root, &shared, log);
            std::lock_guard<std::mutex> lock(mu);
            result.runs[i] = {grid[i].label, std::move(s)};
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    // consolidated comparison table, one row per run
    std::ostringstream csv;
    csv << "run_id,label,in_dist_accuracy,mean_shift_accuracy,overall_mean,collapsed\n";
    for (const auto& [label, s] : result.runs)
        csv << s.run_id << "," << label << "," << csv_num(s.probe.in_dist_accuracy) << ","
            << csv_num(s.probe.mean_shift_accuracy) << "," << csv_num(s.overall_mean) << ","
            << (s.collapsed ? 1 : 0) << "\n";
    atomic_write(fs::path(out_root) / "comparison.csv", csv.str());
    return result;
}

// ---------------------------------------------------------------------------
// report: consolidate one run dir or a sweep dir
// ---------------------------------------------------------------------------

/// Prints the accuracy table and writes a plot-ready long-format CSV.
/// Returns a process exit code (1 only when mixed code versions refuse to
/// merge; incomplete runs are listed as MISSING with exit 0).
inline int report_directory(const std::string& dir, std::ostream& out) {
    std::vector<fs::path> run_dirs;
    if (fs::exists(fs::path(dir) / "report.json")) {
        run_dirs.push_back(dir);
    } else if (fs::is_directory(dir)) {
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory()) run_dirs.push_back(e.path());
        std::sort(run_dirs.begin(), run_dirs.end());
    }
    if (run_dirs.empty()) {
        out << "no runs found in " << dir << "\n";
        return 0;
    }

    struct Row {
        std::string run_id;
        bool complete = false;
        nlohmann::json metrics;
    };
    std::vector<Row> rows;
    std::string version;
    for (const auto& rd : run_dirs) {
        Row row;
        row.run_id = rd.filename().string();
        const fs::path rep = rd / "report.json";
        const fs::path met = rd / "metrics.json";
        if (fs::exists(rep) && fs::exists(met)) {
            try {
                nlohmann::json report = nlohmann::json::parse(read_file(rep));
                row.metrics = nlohmann::json::parse(read_file(met));
                row.run_id = report.value("run_id", row.run_id);
                const std::string v = report.value("code_version", "");
                if (report.value("complete", false)) {
                    if (!version.empty() && v != version) {
                        out << "error: refusing to merge runs with differing code versions ("
                            << version << " vs " << v << ")\n";
                        return 1;
                    }
                    version = v;
                    row.complete = true;
                }
            } catch (const nlohmann::json::exception&) {
                row.complete = false;
            }
        }
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(),
              [](const Row& a, const Row& b) { return a.run_id < b.run_id; });

    out << "run_id | in_dist | mean_shift | overall\n";
    std::ostringstream longcsv;
    longcsv << "run_id,metric,value\n";
    for (const auto& row : rows) {
        if (!row.complete) {
            out << row.run_id << " | MISSING | MISSING | MISSING\n";
            continue;
        }
        const double in_dist = row.metrics.value("in_dist_accuracy", 0.0);
        const double mean_shift = row.metrics.value("mean_shift_accuracy", 0.0);
        const double overall = row.metrics.value("overall_mean", 0.0);
        out << row.run_id << " | " << human_num(in_dist) << " | " << human_num(mean_shift)
            << " | " << human_num(overall) << "\n";
        longcsv << row.run_id << ",in_dist_accuracy," << csv_num(in_dist) << "\n";
        longcsv << row.run_id << ",mean_shift_accuracy," << csv_num(mean_shift) << "\n";
        longcsv << row.run_id << ",overall_mean," << csv_num(overall) << "\n";
        if (row.metrics.contains("split_accuracy"))
            for (const auto& [split, acc] : row.metrics.at("split_accuracy").items())
                longcsv << row.run_id << ",acc_" << split << "," << csv_num(acc.get<double>())
                        << "\n";
        if (row.metrics.contains("transfer_accuracy"))
            longcsv << row.run_id << ",transfer_accuracy,"
                    << csv_num(row.metrics.at("transfer_accuracy").get<double>()) << "\n";
        if (row.metrics.contains("local_fid_by_k"))
            for (const auto& [k, v] : row.metrics.at("local_fid_by_k").items())
                longcsv << row.run_id << ",local_fid_k" << k << "," << csv_num(v.get<double>())
                        << "\n";
        if (row.metrics.contains("diversity_real_mean"))
            longcsv << row.run_id << ",diversity_real_mean,"
                    << csv_num(row.metrics.at("diversity_real_mean").get<double>()) << "\n";
        if (row.metrics.contains("diversity_syn_mean_by_k"))
            for (const auto& [k, v] : row.metrics.at("diversity_syn_mean_by_k").items())
                longcsv << row.run_id << ",diversity_syn_k" << k << ","
                        << csv_num(v.get<double>()) << "\n";
    }
    atomic_write(fs::path(dir) / "report_long.csv", longcsv.str());
    return 0;
}

// ---------------------------------------------------------------------------
// dump-data: PPM export for visual inspection
// ---------------------------------------------------------------------------

inline void dump_dataset(const ExperimentConfig& cfg, const std::string& out_dir,
                         int per_split) {
    Dataset data = make_dataset(cfg.dataset);
    fs::create_directories(out_dir);
    auto dump = [&](const std::vector<ImageSample>& images, const std::string& prefix) {
        const int n = std::min<int>(per_split, static_cast<int>(images.size()));
        for (int i = 0; i < n; ++i) {
            char name[128];
            std::snprintf(name, sizeof(name), "%s_%04d_class%d.ppm", prefix.c_str(), i,
                          images[static_cast<size_t>(i)].latent.class_id);
            write_ppm(images[static_cast<size_t>(i)].pixels, (fs::path(out_dir) / name).string());
        }
    };
    dump(data.train, "train");
    dump(data.test, "test");
    for (const auto& [k, images] : data.counterparts) {
        char prefix[32];
        std::snprintf(prefix, sizeof(prefix), "counterpart_k%g", k);
        dump(images, prefix);
    }
    for (const auto& [kind, images] : data.shift_sets)
        dump(images, std::string("shift_") + shift_kind_name(kind));

    nlohmann::ordered_json manifest;
    manifest["spec"] = config_echo(cfg)["dataset"];
    manifest["content_hash"] = hash_hex(data.content_hash());
    atomic_write(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace mixview
