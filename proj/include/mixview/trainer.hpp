#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mixview/encoder.hpp"
#include "mixview/objectives.hpp"
#include "mixview/optim.hpp"
#include "mixview/rng.hpp"
#include "mixview/synthworld.hpp"
#include "mixview/views.hpp"

namespace mixview {

enum class Objective { simclr, barlow, dino, supervised };
enum class Regime { real, syn, mixdiff, mixing, sequential };

inline const char* objective_name(Objective o) {
    switch (o) {
        case Objective::simclr: return "simclr";
        case Objective::barlow: return "barlow";
        case Objective::dino: return "dino";
        case Objective::supervised: return "supervised";
    }
    return "?";
}

inline Objective objective_from_name(const std::string& s) {
    if (s == "simclr") return Objective::simclr;
    if (s == "barlow") return Objective::barlow;
    if (s == "dino") return Objective::dino;
    if (s == "supervised") return Objective::supervised;
    throw ConfigError("method.objective: unknown objective '" + s + "'");
}

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::real: return "real";
        case Regime::syn: return "syn";
        case Regime::mixdiff: return "mixdiff";
        case Regime::mixing: return "mixing";
        case Regime::sequential: return "sequential";
    }
    return "?";
}

inline Regime regime_from_name(const std::string& s) {
    if (s == "real") return Regime::real;
    if (s == "syn") return Regime::syn;
    if (s == "mixdiff") return Regime::mixdiff;
    if (s == "mixing") return Regime::mixing;
    if (s == "sequential") return Regime::sequential;
    throw ConfigError("method.regime: unknown regime '" + s + "'");
}

/// Full specification of one pretraining run.
struct MethodConfig {
    Objective objective = Objective::simclr;
    Regime regime = Regime::mixdiff;
    double guidance = 8.0;
    std::string aug_policy = "all";
    CropMix crop_mix{6, 1, 2, 1};  // dino only
    int epochs = 100;
    int batch_size = 256;
    double base_lr = 1e-3;
    uint64_t seed = 0;
    double data_fraction = 1.0;
    bool ntxent_canonical = false;
    bool barlow_standardize = false;
    bool dino_centering = true;
    double ema_momentum = 0.99;
    double center_momentum = 0.9;
    double tau = 0.5;          // simclr temperature
    double tau_student = 0.1;  // dino
    double tau_teacher = 0.04;
    double barlow_lambda = 0.005;
    int embed_dim = 64;
    int proj_hidden = 128;
    int dino_out = 64;
    int input_hw = 32;
    OptimizerKind optimizer = OptimizerKind::adam;
};

inline void validate_method(const MethodConfig& m, const Dataset& data) {
    if (m.epochs < 0) throw ConfigError("method.epochs: must be non-negative");
    if (m.batch_size < 2) throw ConfigError("method.batch_size: must be at least 2");
    if (m.base_lr <= 0) throw ConfigError("method.base_lr: must be positive");
    if (m.data_fraction <= 0.0 || m.data_fraction > 1.0)
        throw ConfigError("method.data_fraction: must be in (0,1]");
    if (m.tau <= 0 || m.tau_student <= 0 || m.tau_teacher <= 0)
        throw ConfigError("method.tau: temperatures must be positive");
    if (m.ema_momentum < 0 || m.ema_momentum > 1)
        throw ConfigError("method.ema_momentum: must be in [0,1]");
    if (m.objective == Objective::supervised && m.regime == Regime::mixdiff)
        throw ConfigError(
            "method.regime: mixdiff branch semantics are undefined for the supervised objective");
    const bool needs_counterparts = m.regime != Regime::real;
    if (needs_counterparts && data.counterparts.find(m.guidance) == data.counterparts.end())
        throw ConfigError("method.guidance: counterparts for guidance scale " +
                          std::to_string(m.guidance) + " are not materialized in the dataset");
    if (m.objective == Objective::dino) {
        if (m.crop_mix.globals() < 1)
            throw ConfigError("method.crop_mix: at least one global view is required");
        if (m.regime == Regime::mixdiff &&
            (m.crop_mix.real_global < 1 || m.crop_mix.syn_global < 1))
            throw ConfigError(
                "method.crop_mix: mixdiff requires at least one global view per branch");
    }
}

// ---------------------------------------------------------------------------
// schedule / EMA / collapse probe
// ---------------------------------------------------------------------------

/// lr = base * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(int64_t step, int64_t total_steps, double base_lr) {
    if (total_steps <= 0) throw ParameterError("cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ParameterError("cosine_lr: step outside [0, total_steps]");
    return base_lr * (1.0 + std::cos(kPi * static_cast<double>(step) /
                                     static_cast<double>(total_steps))) / 2.0;
}

/// p_t <- m * p_t + (1-m) * p_s for every parameter, exact.
inline void ema_update(ParamStore& teacher, const ParamStore& student, double m) {
    if (m < 0.0 || m > 1.0) throw ParameterError("ema_update: momentum outside [0,1]");
    if (!teacher.isomorphic_to(student))
        throw ContractError("ema_update: teacher and student stores are not isomorphic");
    auto t = teacher.begin();
    auto s = student.begin();
    for (; t != teacher.end(); ++t, ++s) {
        auto tv = t->second.mutable_data();
        const auto sv = s->second.data();
        for (size_t i = 0; i < tv.size(); ++i) tv[i] = m * tv[i] + (1.0 - m) * sv[i];
    }
}

/// Per-dimension std of an N x D embedding block, and whether the
/// representation has collapsed (mean std below 1e-3).
inline std::pair<std::vector<double>, bool> collapse_probe(std::span<const double> emb,
                                                           int64_t N, int64_t D) {
    if (N < 2) throw ContractError("collapse_probe: need at least 2 rows");
    if (static_cast<int64_t>(emb.size()) != N * D)
        throw DimensionError("collapse_probe: buffer size mismatch");
    std::vector<double> stds(static_cast<size_t>(D), 0.0);
    double mean_std = 0.0;
    for (int64_t j = 0; j < D; ++j) {
        double mu = 0.0;
        for (int64_t i = 0; i < N; ++i) mu += emb[i * D + j];
        mu /= static_cast<double>(N);
        double var = 0.0;
        for (int64_t i = 0; i < N; ++i) {
            const double d = emb[i * D + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(N - 1);
        stds[static_cast<size_t>(j)] = std::sqrt(var);
        mean_std += stds[static_cast<size_t>(j)];
    }
    mean_std /= static_cast<double>(D);
    return {std::move(stds), mean_std < 1e-3};
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct HistoryRow {
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double emb_std = 0.0;
    double wall_ms = 0.0;
    int64_t real_views = 0;
    int64_t syn_views = 0;
};

/// Test/instrumentation hooks; all optional.
struct PretrainHooks {
    std::function<void(int step, const ParamStore& student, const ParamStore* teacher)>
        after_step;
    std::function<void(int epoch, const std::vector<int64_t>& real_indices)> on_batch;
};

struct PretrainResult {
    EncoderConfig encoder_cfg;
    ParamStore params;  // student
    std::vector<HistoryRow> history;
    bool collapsed = false;
    int collapse_epoch = -1;
};

namespace detail {
inline constexpr uint64_t kTagInit = 0x494e4954ull;
inline constexpr uint64_t kTagEpoch = 0x45504f43ull;
inline constexpr uint64_t kTagView = 0x56494557ull;

struct BatchEntry {
    int64_t index;      // index into the train split
    bool use_syn_pool;  // mixing regime: entry drawn from the counterpart pool
};
}  // namespace detail

inline EncoderConfig encoder_config_for(const MethodConfig& m, int classes) {
    EncoderConfig cfg;
    cfg.input_hw = m.input_hw;
    cfg.embed_dim = m.embed_dim;
    cfg.proj_hidden = m.proj_hidden;
    if (m.objective == Objective::dino) {
        cfg.head_input = HeadInput::embedding;
        cfg.head_dim = m.dino_out;
    } else if (m.objective == Objective::supervised) {
        cfg.head_input = HeadInput::features;
        cfg.head_dim = classes;
    }
    return cfg;
}

inline PretrainResult pretrain(const MethodConfig& config, const Dataset& data,
                               const PretrainHooks* hooks = nullptr,
                               bool record_wall = false) {
    validate_method(config, data);
    tune_allocator();
    const AugPolicy policy = AugPolicy::preset(config.aug_policy);
    const EncoderConfig enc_cfg = encoder_config_for(config, data.spec.classes);

    Encoder student = Encoder::init(enc_cfg, derive_seed(config.seed, detail::kTagInit), true);
    Encoder teacher;
    DinoHead head;
    const bool is_dino = config.objective == Objective::dino;
    if (is_dino) {
        teacher = student.clone(false);
        head = DinoHead::make(config.dino_out, config.tau_student, config.tau_teacher,
                              config.dino_centering, config.center_momentum);
    }

    OptimizerConfig opt_cfg;
    opt_cfg.kind = config.optimizer;
    OptimizerState opt(opt_cfg);

    PretrainResult result;
    result.encoder_cfg = enc_cfg;
    if (config.epochs == 0) {
        result.params = student.params().clone(true);
        return result;
    }

    const std::vector<int64_t> base_indices = data.subset_indices(config.data_fraction);
    const int64_t n = static_cast<int64_t>(base_indices.size());
    const int64_t steps_per_epoch =
        (n + config.batch_size - 1) / config.batch_size;
    const int64_t total_steps = static_cast<int64_t>(config.epochs) * steps_per_epoch;

    const std::vector<ImageSample>* syn_pool = nullptr;
    if (config.regime != Regime::real) syn_pool = &data.counterparts_at(config.guidance);

    int64_t global_step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();

        Regime effective = config.regime;
        if (config.regime == Regime::sequential)
            effective = (epoch < config.epochs / 2) ? Regime::real : Regime::syn;

        // deterministic epoch order
        Rng order_rng(derive_seed(config.seed, detail::kTagEpoch, static_cast<uint64_t>(epoch)));
        std::vector<detail::BatchEntry> order;
        if (effective == Regime::mixing) {
            order.reserve(static_cast<size_t>(2 * n));
            for (int64_t i = 0; i < n; ++i) order.push_back({base_indices[static_cast<size_t>(i)], false});
            for (int64_t i = 0; i < n; ++i) order.push_back({base_indices[static_cast<size_t>(i)], true});
            for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
                const auto j = static_cast<int64_t>(order_rng.next_below(static_cast<uint64_t>(i + 1)));
                std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
            }
            order.resize(static_cast<size_t>(n));  // same total image count per epoch
        } else {
            order.reserve(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) order.push_back({base_indices[static_cast<size_t>(i)], false});
            for (int64_t i = n - 1; i > 0; --i) {
                const auto j = static_cast<int64_t>(order_rng.next_below(static_cast<uint64_t>(i + 1)));
                std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
            }
        }

        double epoch_loss = 0.0;
        int64_t consumed = 0;
        double last_lr = 0.0;
        double emb_std = 0.0;
        int64_t real_views = 0, syn_views = 0;

        for (int64_t start = 0; start < n; start += config.batch_size) {
            const int64_t bsz = std::min<int64_t>(config.batch_size, n - start);
            if (bsz < 2) continue;  // objectives need at least a pair
            std::vector<detail::BatchEntry> batch(order.begin() + start,
                                                  order.begin() + start + bsz);
            if (hooks && hooks->on_batch) {
                std::vector<int64_t> idx;
                idx.reserve(batch.size());
                for (const auto& e : batch) idx.push_back(e.index);
                hooks->on_batch(epoch, idx);
            }

            const double lr = cosine_lr(global_step, total_steps, config.base_lr);
            last_lr = lr;
            Tensor loss;

            if (config.objective == Objective::simclr || config.objective == Objective::barlow) {
                std::vector<ViewSet> sets;
                sets.reserve(batch.size());
                for (int64_t b = 0; b < bsz; ++b) {
                    const auto& e = batch[static_cast<size_t>(b)];
                    const ImageSample& real = data.train[static_cast<size_t>(e.index)];
                    const ImageSample* syn =
                        syn_pool ? &(*syn_pool)[static_cast<size_t>(e.index)] : nullptr;
                    const uint64_t vs_seed = derive_seed(config.seed, detail::kTagView,
                                                         static_cast<uint64_t>(epoch),
                                                         static_cast<uint64_t>(start + b));
                    PairMode mode = PairMode::real_real;
                    switch (effective) {
                        case Regime::real: mode = PairMode::real_real; break;
                        case Regime::syn: mode = PairMode::syn_syn; break;
                        case Regime::mixdiff: mode = PairMode::mix; break;
                        case Regime::mixing:
                            mode = e.use_syn_pool ? PairMode::syn_syn : PairMode::real_real;
                            break;
                        case Regime::sequential: break;  // resolved above
                    }
                    sets.push_back(build_pair(real, syn, mode, policy, vs_seed, enc_cfg.input_hw));
                }
                std::vector<const std::vector<double>*> v1, v2;
                v1.reserve(sets.size());
                v2.reserve(sets.size());
                for (const auto& s : sets) {
                    v1.push_back(&s.views[0].pixels);
                    v2.push_back(&s.views[1].pixels);
                    real_views += !s.views[0].is_synthetic + !s.views[1].is_synthetic;
                    syn_views += s.views[0].is_synthetic + s.views[1].is_synthetic;
                }
                Tensor x1 = stack_views(v1, enc_cfg.in_channels, enc_cfg.input_hw);
                Tensor x2 = stack_views(v2, enc_cfg.in_channels, enc_cfg.input_hw);
                Tensor z1 = student.forward(x1).embedding;
                Tensor z2 = student.forward(x2).embedding;
                EmbeddingBatch eb(z1, z2);
                loss = config.objective == Objective::simclr
                           ? mixsr_loss(eb, config.tau, config.ntxent_canonical)
                           : barlow_loss(eb, config.barlow_lambda, config.barlow_standardize);
                {
                    auto [stds, flag] = collapse_probe(z1.data(), z1.shape()[0], z1.shape()[1]);
                    double s = 0;
                    for (double v : stds) s += v;
                    emb_std = s / static_cast<double>(stds.size());
                }
            } else if (config.objective == Objective::supervised) {
                std::vector<std::vector<double>> pixels;
                std::vector<int> labels;
                pixels.reserve(batch.size());
                for (int64_t b = 0; b < bsz; ++b) {
                    const auto& e = batch[static_cast<size_t>(b)];
                    const ImageSample* src = &data.train[static_cast<size_t>(e.index)];
                    if (effective == Regime::syn || e.use_syn_pool)
                        src = &(*syn_pool)[static_cast<size_t>(e.index)];
                    const uint64_t vs_seed = derive_seed(config.seed, detail::kTagView,
                                                         static_cast<uint64_t>(epoch),
                                                         static_cast<uint64_t>(start + b));
                    pixels.push_back(
                        apply_augmentation(*src, policy, vs_seed, true, enc_cfg.input_hw));
                    labels.push_back(src->latent.class_id);
                    (src->provenance == Provenance::synthetic ? syn_views : real_views) += 1;
                }
                std::vector<const std::vector<double>*> vp;
                vp.reserve(pixels.size());
                for (const auto& p : pixels) vp.push_back(&p);
                Tensor x = stack_views(vp, enc_cfg.in_channels, enc_cfg.input_hw);
                EncoderOut out = student.forward(x);
                loss = supervised_ce(out.head, labels);
                {
                    auto [stds, flag] =
                        collapse_probe(out.features.data(), out.features.shape()[0],
                                       out.features.shape()[1]);
                    double s = 0;
                    for (double v : stds) s += v;
                    emb_std = s / static_cast<double>(stds.size());
                }
            } else {  // dino
                CropMix mix = config.crop_mix;
                if (effective == Regime::real) mix = CropMix{8, 2, 0, 0};
                if (effective == Regime::syn) mix = CropMix{0, 0, 8, 2};

                std::vector<ViewSet> sets;
                sets.reserve(batch.size());
                for (int64_t b = 0; b < bsz; ++b) {
                    const auto& e = batch[static_cast<size_t>(b)];
                    const ImageSample& real = data.train[static_cast<size_t>(e.index)];
                    const ImageSample* syn =
                        syn_pool ? &(*syn_pool)[static_cast<size_t>(e.index)] : nullptr;
                    CropMix item_mix = mix;
                    if (effective == Regime::mixing)
                        item_mix = e.use_syn_pool ? CropMix{0, 0, 8, 2} : CropMix{8, 2, 0, 0};
                    const uint64_t vs_seed = derive_seed(config.seed, detail::kTagView,
                                                         static_cast<uint64_t>(epoch),
                                                         static_cast<uint64_t>(start + b));
                    sets.push_back(build_multicrop(real, syn, item_mix, policy, vs_seed,
                                                   enc_cfg.input_hw));
                }
                const int n_views = static_cast<int>(sets[0].views.size());
                const int n_globals = static_cast<int>(
                    std::count_if(sets[0].views.begin(), sets[0].views.end(),
                                  [](const View& v) { return v.is_global; }));
                std::vector<Tensor> student_logits;
                std::vector<Tensor> teacher_logits;
                std::vector<int> teacher_slots;
                Tensor first_embedding;
                for (int v = 0; v < n_views; ++v) {
                    std::vector<const std::vector<double>*> vp;
                    vp.reserve(sets.size());
                    for (const auto& s : sets) {
                        vp.push_back(&s.views[static_cast<size_t>(v)].pixels);
                        (s.views[static_cast<size_t>(v)].is_synthetic ? syn_views : real_views) += 1;
                    }
                    Tensor x = stack_views(vp, enc_cfg.in_channels, enc_cfg.input_hw);
                    EncoderOut so = student.forward(x);
                    student_logits.push_back(so.head);
                    if (v == 0) first_embedding = so.embedding;
                    if (v < n_globals) {
                        // globals come first in the emission order
                        EncoderOut to = teacher.forward(x);
                        teacher_logits.push_back(to.head);
                        teacher_slots.push_back(v);
                    }
                }
                loss = dino_loss(student_logits, teacher_logits, teacher_slots, head);
                {
                    auto [stds, flag] = collapse_probe(
                        first_embedding.data(), first_embedding.shape()[0],
                        first_embedding.shape()[1]);
                    double s = 0;
                    for (double v : stds) s += v;
                    emb_std = s / static_cast<double>(stds.size());
                }
                student.params().zero_grad();
                backward(loss);
                opt.step(student.params(), lr);
                ema_update(teacher.params(), student.params(), config.ema_momentum);
                dino_update_center(head, teacher_logits);
                epoch_loss += loss.item() * static_cast<double>(bsz);
                consumed += bsz;
                ++global_step;
                if (hooks && hooks->after_step)
                    hooks->after_step(static_cast<int>(global_step), student.params(),
                                      &teacher.params());
                continue;
            }

            student.params().zero_grad();
            backward(loss);
            opt.step(student.params(), lr);
            epoch_loss += loss.item() * static_cast<double>(bsz);
            consumed += bsz;
            ++global_step;
            if (hooks && hooks->after_step)
                hooks->after_step(static_cast<int>(global_step), student.params(), nullptr);
        }

        const auto t1 = std::chrono::steady_clock::now();
        HistoryRow row;
        row.epoch = epoch;
        row.loss = epoch_loss / static_cast<double>(std::max<int64_t>(1, consumed));
        row.lr = last_lr;
        row.emb_std = emb_std;
        row.wall_ms = record_wall
                          ? std::chrono::duration<double, std::milli>(t1 - t0).count()
                          : 0.0;
        row.real_views = real_views;
        row.syn_views = syn_views;
        result.history.push_back(row);

        if (emb_std < 1e-3 && !result.collapsed) {
            result.collapsed = true;
            result.collapse_epoch = epoch;
        }
    }

    result.params = student.params().clone(true);
    return result;
}

}  // namespace mixview
