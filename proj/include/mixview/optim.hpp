#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mixview/common.hpp"
#include "mixview/tensor.hpp"

#include <nlohmann/json.hpp>

namespace mixview {

/// Named map from parameter path to Tensor. std::map gives the deterministic
/// iteration order the optimizer and checkpoint format rely on.
class ParamStore {
  public:
    void insert(const std::string& path, Tensor t) {
        if (params_.count(path)) throw ContractError("ParamStore: duplicate path " + path);
        params_.emplace(path, std::move(t));
    }

    Tensor& at(const std::string& path) {
        auto it = params_.find(path);
        if (it == params_.end()) throw ContractError("ParamStore: missing path " + path);
        return it->second;
    }
    const Tensor& at(const std::string& path) const {
        auto it = params_.find(path);
        if (it == params_.end()) throw ContractError("ParamStore: missing path " + path);
        return it->second;
    }

    bool contains(const std::string& path) const { return params_.count(path) != 0; }
    size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad() {
        for (auto& [path, t] : params_) t.zero_grad();
    }

    bool isomorphic_to(const ParamStore& other) const {
        if (params_.size() != other.params_.size()) return false;
        auto a = params_.begin();
        auto b = other.params_.begin();
        for (; a != params_.end(); ++a, ++b) {
            if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
        }
        return true;
    }

    /// Deep copy of values into fresh leaves.
    ParamStore clone(bool requires_grad) const {
        ParamStore out;
        for (const auto& [path, t] : params_) {
            out.insert(path, Tensor::from(t.shape(),
                                          std::vector<double>(t.data().begin(), t.data().end()),
                                          requires_grad));
        }
        return out;
    }

    bool values_equal(const ParamStore& other) const {
        if (!isomorphic_to(other)) return false;
        auto a = params_.begin();
        auto b = other.params_.begin();
        for (; a != params_.end(); ++a, ++b) {
            const auto da = a->second.data();
            const auto db = b->second.data();
            for (size_t i = 0; i < da.size(); ++i)
                if (da[i] != db[i]) return false;
        }
        return true;
    }

  private:
    std::map<std::string, Tensor> params_;
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { adam, sgd_momentum };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double momentum = 0.9;  // sgd_momentum only
};

/// Per-parameter moment buffers plus a step counter.
class OptimizerState {
  public:
    OptimizerState() = default;
    explicit OptimizerState(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    int64_t step_count() const { return step_; }

    /// One update over every parameter, in path order. Requires populated grads.
    void step(ParamStore& params, double lr) {
        ++step_;
        for (auto& [path, t] : params) {
            if (!t.has_grad())
                throw ContractError("optimizer_step: missing gradient for " + path);
            auto& slot = slots_[path];
            if (slot.m.size() != static_cast<size_t>(t.numel())) {
                slot.m.assign(static_cast<size_t>(t.numel()), 0.0);
                if (cfg_.kind == OptimizerKind::adam)
                    slot.v.assign(static_cast<size_t>(t.numel()), 0.0);
            }
            auto vals = t.mutable_data();
            const auto g = t.grad();
            if (cfg_.kind == OptimizerKind::adam) {
                const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
                const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
                for (size_t i = 0; i < vals.size(); ++i) {
                    slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g[i];
                    slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                    const double mhat = slot.m[i] / bc1;
                    const double vhat = slot.v[i] / bc2;
                    vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                }
            } else {
                for (size_t i = 0; i < vals.size(); ++i) {
                    slot.m[i] = cfg_.momentum * slot.m[i] + g[i];
                    vals[i] -= lr * slot.m[i];
                }
            }
        }
    }

  private:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };
    OptimizerConfig cfg_;
    std::map<std::string, Slot> slots_;
    int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// checkpoint format: <prefix>.json manifest + <prefix>.bin little-endian f64
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "MXV1";

inline void save_checkpoint(const ParamStore& params, const std::string& prefix) {
    nlohmann::ordered_json manifest;
    manifest["magic"] = kCheckpointMagic;
    nlohmann::ordered_json plist = nlohmann::ordered_json::array();
    int64_t offset = 0;
    for (const auto& [path, t] : params) {
        nlohmann::ordered_json e;
        e["path"] = path;
        e["shape"] = t.shape();
        e["offset"] = offset;
        e["count"] = t.numel();
        plist.push_back(e);
        offset += t.numel();
    }
    manifest["params"] = plist;

    std::ofstream mf(prefix + ".json", std::ios::trunc);
    if (!mf) throw IoError("save_checkpoint: cannot open " + prefix + ".json");
    mf << manifest.dump(2) << "\n";

    std::ofstream bf(prefix + ".bin", std::ios::binary | std::ios::trunc);
    if (!bf) throw IoError("save_checkpoint: cannot open " + prefix + ".bin");
    for (const auto& [path, t] : params) {
        const auto d = t.data();
        bf.write(reinterpret_cast<const char*>(d.data()),
                 static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
}

inline ParamStore load_checkpoint(const std::string& prefix, bool requires_grad) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw FormatError("load_checkpoint: cannot open " + prefix + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: bad manifest: ") + e.what());
    }
    if (!manifest.contains("magic") || manifest["magic"] != kCheckpointMagic)
        throw FormatError("load_checkpoint: missing or wrong magic header");

    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw FormatError("load_checkpoint: cannot open " + prefix + ".bin");

    ParamStore out;
    for (const auto& e : manifest["params"]) {
        const std::string path = e["path"];
        Shape shape = e["shape"].get<Shape>();
        const int64_t count = e["count"];
        const int64_t offset = e["offset"];
        if (numel_of(shape) != count)
            throw FormatError("load_checkpoint: count/shape mismatch for " + path);
        std::vector<double> data(static_cast<size_t>(count));
        bf.seekg(offset * static_cast<int64_t>(sizeof(double)));
        bf.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!bf) throw FormatError("load_checkpoint: truncated binary for " + path);
        out.insert(path, Tensor::from(std::move(shape), std::move(data), requires_grad));
    }
    return out;
}

// ---------------------------------------------------------------------------
// hashing (FNV-1a 64)
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline uint64_t hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("hash_file: cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    }
    return h;
}

inline uint64_t hash_params(const ParamStore& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [path, t] : params) {
        h = fnv1a64(path.data(), path.size(), h);
        const auto d = t.data();
        h = fnv1a64(d.data(), d.size() * sizeof(double), h);
    }
    return h;
}

}  // namespace mixview
