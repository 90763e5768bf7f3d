#include <catch2/catch_amalgamated.hpp>

#include <chrono>

#include "mixview/trainer.hpp"

using namespace mixview;

namespace {
Dataset tiny_dataset(int per_class = 6, std::vector<double> ks = {8.0}) {
    DatasetSpec s;
    s.classes = 10;
    s.train_per_class = per_class;
    s.test_per_class = 2;
    s.train_seed = 101;
    s.test_seed = 202;
    s.guidance_scales = std::move(ks);
    s.shifts = {ShiftKind::v2};
    return make_dataset(s);
}

MethodConfig tiny_config(Objective obj, Regime reg, int epochs) {
    MethodConfig m;
    m.objective = obj;
    m.regime = reg;
    m.epochs = epochs;
    m.batch_size = 16;
    m.seed = 0;
    return m;
}
}  // namespace

TEST_CASE("ema_update recurrence") {
    auto make_store = [](double v) {
        ParamStore ps;
        ps.insert("a", Tensor::from({2}, {v, v * 2}, false));
        ps.insert("b", Tensor::from({1}, {v * 3}, false));
        return ps;
    };
    SECTION("m=1 leaves the teacher unchanged") {
        ParamStore t = make_store(2.0), s = make_store(4.0);
        ema_update(t, s, 1.0);
        REQUIRE(t.at("a").data()[0] == 2.0);
    }
    SECTION("m=0 copies the student") {
        ParamStore t = make_store(2.0), s = make_store(4.0);
        ema_update(t, s, 0.0);
        REQUIRE(t.at("a").data()[0] == 4.0);
        REQUIRE(t.at("b").data()[0] == 12.0);
    }
    SECTION("m=0.5 averages exactly") {
        ParamStore t = make_store(2.0), s = make_store(4.0);
        ema_update(t, s, 0.5);
        REQUIRE(t.at("a").data()[0] == 3.0);
    }
    SECTION("structural mismatch rejected") {
        ParamStore t = make_store(2.0);
        ParamStore s;
        s.insert("a", Tensor::from({2}, {1, 2}, false));
        REQUIRE_THROWS_AS(ema_update(t, s, 0.5), ContractError);
    }
}

TEST_CASE("cosine_lr endpoints") {
    REQUIRE(cosine_lr(0, 100, 0.4) == Catch::Approx(0.4));
    REQUIRE(cosine_lr(100, 100, 0.4) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(cosine_lr(50, 100, 0.4) == Catch::Approx(0.2).epsilon(1e-12));
    REQUIRE_THROWS_AS(cosine_lr(101, 100, 0.4), ParameterError);
    REQUIRE_THROWS_AS(cosine_lr(-1, 100, 0.4), ParameterError);
}

TEST_CASE("collapse_probe") {
    SECTION("identical rows collapse") {
        std::vector<double> emb = {1, 2, 3, 1, 2, 3, 1, 2, 3};
        auto [stds, flag] = collapse_probe(emb, 3, 3);
        REQUIRE(flag);
        for (double s : stds) REQUIRE(s == 0.0);
    }
    SECTION("standard-normal rows do not collapse") {
        Rng rng(7);
        std::vector<double> emb(256 * 8);
        for (auto& v : emb) v = rng.normal();
        auto [stds, flag] = collapse_probe(emb, 256, 8);
        REQUIRE_FALSE(flag);
    }
    SECTION("single row rejected") {
        std::vector<double> emb = {1, 2};
        REQUIRE_THROWS_AS(collapse_probe(emb, 1, 2), ContractError);
    }
}

TEST_CASE("method config validation") {
    Dataset data = tiny_dataset();
    SECTION("supervised plus mixdiff is a config error") {
        MethodConfig m = tiny_config(Objective::supervised, Regime::mixdiff, 1);
        REQUIRE_THROWS_AS(validate_method(m, data), ConfigError);
    }
    SECTION("counterparts must be materialized for synthetic regimes") {
        MethodConfig m = tiny_config(Objective::simclr, Regime::mixdiff, 1);
        m.guidance = 3.0;  // dataset only has k=8
        REQUIRE_THROWS_AS(validate_method(m, data), ConfigError);
    }
    SECTION("dino mixdiff needs a global view per branch") {
        MethodConfig m = tiny_config(Objective::dino, Regime::mixdiff, 1);
        m.crop_mix = CropMix{8, 2, 2, 0};
        REQUIRE_THROWS_AS(validate_method(m, data), ConfigError);
    }
}

TEST_CASE("pretrain basics") {
    Dataset data = tiny_dataset();

    SECTION("zero epochs returns the initialization") {
        MethodConfig m = tiny_config(Objective::simclr, Regime::real, 0);
        PretrainResult r = pretrain(m, data);
        Encoder fresh = Encoder::init(r.encoder_cfg, derive_seed(m.seed, 0x494e4954ull), true);
        REQUIRE(r.params.values_equal(fresh.params()));
        REQUIRE(r.history.empty());
    }
    SECTION("identical configs give bit-identical history and checkpoint") {
        MethodConfig m = tiny_config(Objective::simclr, Regime::mixdiff, 3);
        PretrainResult a = pretrain(m, data);
        PretrainResult b = pretrain(m, data);
        REQUIRE(a.params.values_equal(b.params));
        REQUIRE(a.history.size() == b.history.size());
        for (size_t i = 0; i < a.history.size(); ++i) {
            REQUIRE(a.history[i].loss == b.history[i].loss);
            REQUIRE(a.history[i].lr == b.history[i].lr);
            REQUIRE(a.history[i].emb_std == b.history[i].emb_std);
        }
    }
    SECTION("sequential regime consumes real then synthetic halves") {
        MethodConfig m = tiny_config(Objective::simclr, Regime::sequential, 4);
        PretrainResult r = pretrain(m, data);
        REQUIRE(r.history.size() == 4);
        for (int e = 0; e < 2; ++e) {
            REQUIRE(r.history[static_cast<size_t>(e)].syn_views == 0);
            REQUIRE(r.history[static_cast<size_t>(e)].real_views > 0);
        }
        for (int e = 2; e < 4; ++e) {
            REQUIRE(r.history[static_cast<size_t>(e)].real_views == 0);
            REQUIRE(r.history[static_cast<size_t>(e)].syn_views > 0);
        }
    }
    SECTION("mixdiff splits views between branches") {
        MethodConfig m = tiny_config(Objective::simclr, Regime::mixdiff, 1);
        PretrainResult r = pretrain(m, data);
        REQUIRE(r.history[0].real_views == r.history[0].syn_views);
        REQUIRE(r.history[0].real_views == data.train_size());
    }
    SECTION("mixdiff and real consume identical real-image index sequences") {
        std::vector<std::vector<int64_t>> seq_real, seq_mix;
        PretrainHooks hooks;
        hooks.on_batch = [&seq_real](int, const std::vector<int64_t>& idx) {
            seq_real.push_back(idx);
        };
        MethodConfig m = tiny_config(Objective::simclr, Regime::real, 2);
        pretrain(m, data, &hooks);
        hooks.on_batch = [&seq_mix](int, const std::vector<int64_t>& idx) {
            seq_mix.push_back(idx);
        };
        m.regime = Regime::mixdiff;
        pretrain(m, data, &hooks);
        REQUIRE(seq_real == seq_mix);
    }
}

TEST_CASE("dino teacher follows the exact EMA recurrence") {
    Dataset data = tiny_dataset();
    MethodConfig m = tiny_config(Objective::dino, Regime::mixdiff, 1);
    m.batch_size = 30;  // two steps per epoch at n=60
    m.ema_momentum = 0.9;

    // replay: teacher_t must equal m*teacher_{t-1} + (1-m)*student_t, bit for bit
    Encoder init = Encoder::init(encoder_config_for(m, data.spec.classes),
                                 derive_seed(m.seed, 0x494e4954ull), false);
    ParamStore replay = init.params().clone(false);
    bool checked = false;
    PretrainHooks hooks;
    hooks.after_step = [&](int, const ParamStore& student, const ParamStore* teacher) {
        REQUIRE(teacher != nullptr);
        ema_update(replay, student, m.ema_momentum);
        REQUIRE(replay.values_equal(*teacher));
        checked = true;
    };
    pretrain(m, data, &hooks);
    REQUIRE(checked);
}

TEST_CASE("training losses decrease over the first epochs (trailing mean)") {
    // Reduced image count; hyperparameters are the desk defaults. The same
    // check at the full default config runs in the acceptance suite. DINO is
    // excluded here: its loss rises while the teacher center calibrates, and
    // at this tiny scale the calibration spans the whole window.
    Dataset data = tiny_dataset(20);
    auto trailing_ok = [](const std::vector<HistoryRow>& h) {
        double first = 0, last = 0;
        for (int i = 0; i < 5; ++i) first += h[static_cast<size_t>(i)].loss;
        for (int i = 5; i < 10; ++i) last += h[static_cast<size_t>(i)].loss;
        return last < first;
    };
    for (Objective obj : {Objective::simclr, Objective::barlow, Objective::supervised}) {
        MethodConfig m = tiny_config(obj, Regime::real, 10);
        m.batch_size = 64;
        PretrainResult r = pretrain(m, data);
        INFO(objective_name(obj));
        REQUIRE(r.history.size() == 10);
        REQUIRE(trailing_ok(r.history));
    }
    // dino at this scale: the smoothed loss must at least fall from its peak
    MethodConfig m = tiny_config(Objective::dino, Regime::real, 10);
    m.batch_size = 64;
    PretrainResult r = pretrain(m, data);
    double peak = 0, tail = 0;
    for (const auto& h : r.history) peak = std::max(peak, h.loss);
    for (int i = 7; i < 10; ++i) tail += r.history[static_cast<size_t>(i)].loss / 3.0;
    REQUIRE(tail < peak);
}

TEST_CASE("single simclr step timing", "[bench]") {
    DatasetSpec s;
    s.classes = 10;
    s.train_per_class = 26;
    s.train_seed = 3;
    s.test_seed = 4;
    s.test_per_class = 1;
    s.shifts = {};
    Dataset data = make_dataset(s);
    MethodConfig m = tiny_config(Objective::simclr, Regime::mixdiff, 1);
    m.batch_size = 256;
    const auto t0 = std::chrono::steady_clock::now();
    pretrain(m, data);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    WARN("one simclr mixdiff step at B=256 took " + std::to_string(ms) + " ms");
}
