#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixview/common.hpp"
#include "mixview/rng.hpp"
#include "mixview/synthworld.hpp"
#include "mixview/trainer.hpp"
#include "mixview/views.hpp"

namespace mixview {

/// Evaluation block of an experiment config.
struct EvalConfig {
    int probe_epochs = 200;
    double probe_lr = 1e-3;
    bool transfer = false;
    std::vector<double> transfer_probe_lrs = {0.5, 0.05, 0.01, 0.005};
    int transfer_probe_epochs = 200;
    int transfer_eval_cadence = 25;
    bool fid = true;
    bool diversity = true;
    bool record_wall_ms = false;
};

/// Full experiment file: dataset spec + method config + eval block, with one
/// explicit global seed (no implicit randomness anywhere).
struct ExperimentConfig {
    uint64_t seed = 0;
    std::string out_dir = "runs";
    DatasetSpec dataset;
    MethodConfig method;
    EvalConfig eval;
};

namespace cfg_detail {

using json = nlohmann::json;

template <typename T>
T get_field(const json& j, const std::string& path, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + key + ": wrong type");
    }
}

inline const json& get_block(const json& j, const std::string& key) {
    static const json empty = json::object();
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_object()) throw ConfigError(key + ": expected an object");
    return j.at(key);
}

}  // namespace cfg_detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    using cfg_detail::get_block;
    using cfg_detail::get_field;

    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    if (!j.contains("seed")) throw ConfigError("seed: required field is missing");
    ExperimentConfig cfg;
    try {
        cfg.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("seed: must be an unsigned integer");
    }
    cfg.out_dir = get_field<std::string>(j, "", "out_dir", "runs");

    const auto& d = get_block(j, "dataset");
    cfg.dataset.classes = get_field<int>(d, "dataset.", "classes", 10);
    cfg.dataset.train_per_class = get_field<int>(d, "dataset.", "train_per_class", 200);
    cfg.dataset.test_per_class = get_field<int>(d, "dataset.", "test_per_class", 50);
    cfg.dataset.image_size = get_field<int>(d, "dataset.", "image_size", 64);
    cfg.dataset.train_seed =
        get_field<uint64_t>(d, "dataset.", "train_seed", derive_seed(cfg.seed, 0xD5, 1));
    cfg.dataset.test_seed =
        get_field<uint64_t>(d, "dataset.", "test_seed", derive_seed(cfg.seed, 0xD5, 2));
    cfg.dataset.glyph_family_base = get_field<int>(d, "dataset.", "glyph_family_base", 0);
    if (d.contains("shifts")) {
        cfg.dataset.shifts.clear();
        try {
            for (const auto& s : d.at("shifts"))
                cfg.dataset.shifts.push_back(shift_kind_from_name(s.get<std::string>()));
        } catch (const ParameterError& e) {
            throw ConfigError(std::string("dataset.shifts: ") + e.what());
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("dataset.shifts: expected an array of strings");
        }
    }
    cfg.dataset.guidance_scales =
        get_field<std::vector<double>>(d, "dataset.", "guidance_scales", {8.0});

    const auto& m = get_block(j, "method");
    cfg.method.objective =
        objective_from_name(get_field<std::string>(m, "method.", "objective", "simclr"));
    cfg.method.regime = regime_from_name(get_field<std::string>(m, "method.", "regime", "mixdiff"));
    cfg.method.guidance = get_field<double>(m, "method.", "guidance", 8.0);
    cfg.method.aug_policy = get_field<std::string>(m, "method.", "augmentation", "all");
    try {
        AugPolicy::preset(cfg.method.aug_policy);
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("method.augmentation: ") + e.what());
    }
    if (m.contains("crop_mix")) {
        std::vector<int> cm;
        try {
            cm = m.at("crop_mix").get<std::vector<int>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("method.crop_mix: expected an array of 4 integers");
        }
        if (cm.size() != 4) throw ConfigError("method.crop_mix: expected exactly 4 view counts");
        cfg.method.crop_mix = CropMix{cm[0], cm[1], cm[2], cm[3]};
    }
    cfg.method.epochs = get_field<int>(m, "method.", "epochs", 100);
    cfg.method.batch_size = get_field<int>(m, "method.", "batch_size", 256);
    cfg.method.base_lr = get_field<double>(m, "method.", "base_lr", 1e-3);
    cfg.method.seed = get_field<uint64_t>(m, "method.", "seed", cfg.seed);
    cfg.method.data_fraction = get_field<double>(m, "method.", "data_fraction", 1.0);
    cfg.method.ntxent_canonical = get_field<bool>(m, "method.", "ntxent_canonical", false);
    cfg.method.barlow_standardize = get_field<bool>(m, "method.", "barlow_standardize", false);
    cfg.method.dino_centering = get_field<bool>(m, "method.", "dino_centering", true);
    cfg.method.ema_momentum = get_field<double>(m, "method.", "ema_momentum", 0.99);
    cfg.method.center_momentum = get_field<double>(m, "method.", "center_momentum", 0.9);
    cfg.method.tau = get_field<double>(m, "method.", "tau", 0.5);
    cfg.method.tau_student = get_field<double>(m, "method.", "tau_student", 0.1);
    cfg.method.tau_teacher = get_field<double>(m, "method.", "tau_teacher", 0.04);
    cfg.method.barlow_lambda = get_field<double>(m, "method.", "barlow_lambda", 0.005);
    cfg.method.embed_dim = get_field<int>(m, "method.", "embed_dim", 64);
    cfg.method.proj_hidden = get_field<int>(m, "method.", "proj_hidden", 128);
    cfg.method.dino_out = get_field<int>(m, "method.", "dino_out", 64);
    cfg.method.input_hw = get_field<int>(m, "method.", "input_hw", 32);
    const std::string opt = get_field<std::string>(m, "method.", "optimizer", "adam");
    if (opt == "adam")
        cfg.method.optimizer = OptimizerKind::adam;
    else if (opt == "sgd")
        cfg.method.optimizer = OptimizerKind::sgd_momentum;
    else
        throw ConfigError("method.optimizer: unknown optimizer '" + opt + "'");

    const auto& e = get_block(j, "eval");
    cfg.eval.probe_epochs = get_field<int>(e, "eval.", "probe_epochs", 200);
    cfg.eval.probe_lr = get_field<double>(e, "eval.", "probe_lr", 1e-3);
    cfg.eval.transfer = get_field<bool>(e, "eval.", "transfer", false);
    cfg.eval.transfer_probe_lrs = get_field<std::vector<double>>(
        e, "eval.", "transfer_probe_lrs", {0.5, 0.05, 0.01, 0.005});
    cfg.eval.transfer_probe_epochs = get_field<int>(e, "eval.", "transfer_probe_epochs", 200);
    cfg.eval.transfer_eval_cadence = get_field<int>(e, "eval.", "transfer_eval_cadence", 25);
    cfg.eval.fid = get_field<bool>(e, "eval.", "fid", true);
    cfg.eval.diversity = get_field<bool>(e, "eval.", "diversity", true);
    cfg.eval.record_wall_ms = get_field<bool>(e, "eval.", "record_wall_ms", false);

    try {
        validate_spec(cfg.dataset);
    } catch (const ParameterError& err) {
        throw ConfigError(std::string("dataset: ") + err.what());
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return parse_experiment_config(j);
}

/// Canonical echo with every field resolved. Hashing this echo gives the
/// config content hash recorded in every artifact.
inline nlohmann::ordered_json config_echo(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    nlohmann::ordered_json d;
    d["classes"] = cfg.dataset.classes;
    d["train_per_class"] = cfg.dataset.train_per_class;
    d["test_per_class"] = cfg.dataset.test_per_class;
    d["image_size"] = cfg.dataset.image_size;
    d["train_seed"] = cfg.dataset.train_seed;
    d["test_seed"] = cfg.dataset.test_seed;
    d["glyph_family_base"] = cfg.dataset.glyph_family_base;
    std::vector<std::string> shift_names;
    for (auto k : cfg.dataset.shifts) shift_names.emplace_back(shift_kind_name(k));
    d["shifts"] = shift_names;
    d["guidance_scales"] = cfg.dataset.guidance_scales;
    j["dataset"] = d;
    nlohmann::ordered_json m;
    m["objective"] = objective_name(cfg.method.objective);
    m["regime"] = regime_name(cfg.method.regime);
    m["guidance"] = cfg.method.guidance;
    m["augmentation"] = cfg.method.aug_policy;
    m["crop_mix"] = {cfg.method.crop_mix.real_local, cfg.method.crop_mix.real_global,
                     cfg.method.crop_mix.syn_local, cfg.method.crop_mix.syn_global};
    m["epochs"] = cfg.method.epochs;
    m["batch_size"] = cfg.method.batch_size;
    m["base_lr"] = cfg.method.base_lr;
    m["seed"] = cfg.method.seed;
    m["data_fraction"] = cfg.method.data_fraction;
    m["ntxent_canonical"] = cfg.method.ntxent_canonical;
    m["barlow_standardize"] = cfg.method.barlow_standardize;
    m["dino_centering"] = cfg.method.dino_centering;
    m["ema_momentum"] = cfg.method.ema_momentum;
    m["center_momentum"] = cfg.method.center_momentum;
    m["tau"] = cfg.method.tau;
    m["tau_student"] = cfg.method.tau_student;
    m["tau_teacher"] = cfg.method.tau_teacher;
    m["barlow_lambda"] = cfg.method.barlow_lambda;
    m["embed_dim"] = cfg.method.embed_dim;
    m["proj_hidden"] = cfg.method.proj_hidden;
    m["dino_out"] = cfg.method.dino_out;
    m["input_hw"] = cfg.method.input_hw;
    m["optimizer"] = cfg.method.optimizer == OptimizerKind::adam ? "adam" : "sgd";
    j["method"] = m;
    nlohmann::ordered_json e;
    e["probe_epochs"] = cfg.eval.probe_epochs;
    e["probe_lr"] = cfg.eval.probe_lr;
    e["transfer"] = cfg.eval.transfer;
    e["transfer_probe_lrs"] = cfg.eval.transfer_probe_lrs;
    e["transfer_probe_epochs"] = cfg.eval.transfer_probe_epochs;
    e["transfer_eval_cadence"] = cfg.eval.transfer_eval_cadence;
    e["fid"] = cfg.eval.fid;
    e["diversity"] = cfg.eval.diversity;
    e["record_wall_ms"] = cfg.eval.record_wall_ms;
    j["eval"] = e;
    return j;
}

/// Hash of the scientific content of a config: the output directory does not
/// participate, so the same experiment hashes identically wherever it lands.
inline std::string config_hash(const ExperimentConfig& cfg) {
    nlohmann::ordered_json echo = config_echo(cfg);
    echo.erase("out_dir");
    return hash_hex(fnv1a64(echo.dump()));
}

}  // namespace mixview
