#include <catch2/catch_amalgamated.hpp>

#include "mixview/gradcheck.hpp"
#include "mixview/objectives.hpp"
#include "mixview/rng.hpp"

using namespace mixview;

namespace {
Tensor mat(Shape s, std::vector<double> v, bool rg = false) {
    return Tensor::from(std::move(s), std::move(v), rg);
}

Tensor random_mat(Rng& rng, int64_t n, int64_t d, bool rg = true) {
    std::vector<double> v(static_cast<size_t>(n * d));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from({n, d}, std::move(v), rg);
}
}  // namespace

TEST_CASE("cosine similarity") {
    std::vector<double> u = {1, 0}, v = {1, 1}, z = {0, 0};
    REQUIRE(cosine_sim(u, u) == Catch::Approx(1.0));
    REQUIRE(cosine_sim(u, std::vector<double>{0, 1}) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(cosine_sim(u, v) == Catch::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    REQUIRE_THROWS_AS(cosine_sim(u, z), DegenerateInputError);
}

TEST_CASE("mixsr_loss closed forms") {
    SECTION("identical orthonormal branches") {
        Tensor z = mat({2, 2}, {1, 0, 0, 1});
        EmbeddingBatch b(z, mat({2, 2}, {1, 0, 0, 1}));
        const double loss = mixsr_loss(b, 1.0).item();
        REQUIRE(loss == Catch::Approx(-1.0 + std::log(2.0)).margin(1e-9));
    }
    SECTION("all four embeddings mutually orthogonal") {
        Tensor z = mat({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
        Tensor zt = mat({2, 4}, {0, 0, 1, 0, 0, 0, 0, 1});
        const double loss = mixsr_loss(EmbeddingBatch(z, zt), 1.0).item();
        REQUIRE(loss == Catch::Approx(std::log(2.0)).margin(1e-9));
    }
    SECTION("N=1 is rejected: the negative set is empty") {
        EmbeddingBatch b(mat({1, 2}, {1, 0}), mat({1, 2}, {0, 1}));
        REQUIRE_THROWS_AS(mixsr_loss(b, 1.0), ContractError);
    }
    SECTION("zero embedding row is degenerate") {
        EmbeddingBatch b(mat({2, 2}, {1, 0, 0, 0}), mat({2, 2}, {1, 0, 0, 1}));
        REQUIRE_THROWS_AS(mixsr_loss(b, 1.0), DegenerateInputError);
    }
    SECTION("invariant to a global positive rescaling") {
        Rng rng(17);
        for (int t = 0; t < 20; ++t) {
            Tensor z = random_mat(rng, 3, 4, false);
            Tensor zt = random_mat(rng, 3, 4, false);
            const double base = mixsr_loss(EmbeddingBatch(z, zt), 0.5).item();
            auto scale = [&](const Tensor& m, double c) {
                std::vector<double> v(m.data().begin(), m.data().end());
                for (auto& x : v) x *= c;
                return Tensor::from(m.shape(), std::move(v));
            };
            const double scaled =
                mixsr_loss(EmbeddingBatch(scale(z, 7.3), scale(zt, 7.3)), 0.5).item();
            REQUIRE(scaled == Catch::Approx(base).margin(1e-9));
        }
    }
    SECTION("canonical denominator includes the positive") {
        Tensor z = mat({2, 2}, {1, 0, 0, 1});
        EmbeddingBatch b(z, mat({2, 2}, {1, 0, 0, 1}));
        const double printed = mixsr_loss(b, 1.0, false).item();
        const double canonical = mixsr_loss(b, 1.0, true).item();
        // canonical adds exp(1) to each denominator of 2
        REQUIRE(canonical == Catch::Approx(-1.0 + std::log(2.0 + std::exp(1.0))).margin(1e-9));
        REQUIRE(canonical > printed);
    }
}

TEST_CASE("cross_correlation closed forms") {
    SECTION("orthogonal columns give the identity") {
        Tensor z = mat({2, 2}, {1, 1, 1, -1});
        Tensor c = cross_correlation(EmbeddingBatch(z, mat({2, 2}, {1, 1, 1, -1})));
        REQUIRE(c.at({0, 0}) == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(c.at({1, 1}) == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(c.at({0, 1}) == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(c.at({1, 0}) == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("single column, orthogonal batch vectors") {
        Tensor c = cross_correlation(EmbeddingBatch(mat({2, 1}, {1, 1}), mat({2, 1}, {1, -1})));
        REQUIRE(c.item() == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("scale invariance") {
        Tensor c = cross_correlation(EmbeddingBatch(mat({2, 1}, {2, 0}), mat({2, 1}, {1, 0})));
        REQUIRE(c.item() == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("zero column rejected, no silent epsilon") {
        EmbeddingBatch b(mat({2, 2}, {1, 0, 1, 0}), mat({2, 2}, {1, 1, 1, -1}));
        REQUIRE_THROWS_AS(cross_correlation(b), DegenerateInputError);
    }
    SECTION("entries bounded in [-1,1] on random batches") {
        Rng rng(23);
        for (int t = 0; t < 50; ++t) {
            Tensor c = cross_correlation(
                EmbeddingBatch(random_mat(rng, 5, 4, false), random_mat(rng, 5, 4, false)));
            for (double v : c.data()) {
                REQUIRE(v >= -1.0 - 1e-12);
                REQUIRE(v <= 1.0 + 1e-12);
            }
        }
    }
}

TEST_CASE("barlow_loss closed forms") {
    SECTION("identity correlation gives zero") {
        Tensor z = mat({2, 2}, {1, 1, 1, -1});
        REQUIRE(barlow_loss(EmbeddingBatch(z, mat({2, 2}, {1, 1, 1, -1})), 0.005).item() ==
                Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("all-ones correlation gives 2 lambda") {
        Tensor z = mat({2, 2}, {1, 1, -1, -1});
        const double loss =
            barlow_loss(EmbeddingBatch(z, mat({2, 2}, {1, 1, -1, -1})), 0.005).item();
        REQUIRE(loss == Catch::Approx(0.01).margin(1e-12));
    }
    SECTION("lambda zero keeps only the diagonal term") {
        Rng rng(31);
        Tensor z = random_mat(rng, 4, 3, false);
        Tensor zt = random_mat(rng, 4, 3, false);
        Tensor c = cross_correlation(EmbeddingBatch(z, zt));
        double expect = 0.0;
        for (int64_t i = 0; i < 3; ++i) {
            const double d = 1.0 - c.at({i, i});
            expect += d * d;
        }
        REQUIRE(barlow_loss(EmbeddingBatch(z, zt), 0.0).item() ==
                Catch::Approx(expect).epsilon(1e-12));
    }
    SECTION("column-orthogonal identical branches give zero") {
        // columns of Z orthogonal with equal norms: C = I exactly
        Tensor z = mat({4, 2}, {1, 1, 1, -1, -1, 1, -1, -1});
        REQUIRE(barlow_loss(EmbeddingBatch(z, z), 0.005).item() ==
                Catch::Approx(0.0).margin(1e-12));
    }
}

TEST_CASE("dino_distribution") {
    SECTION("equal logits give uniform") {
        std::vector<double> logits = {0.4, 0.4, 0.4, 0.4};
        auto p = dino_distribution(logits, 0.1, nullptr);
        for (double v : p) REQUIRE(v == Catch::Approx(0.25).margin(1e-12));
    }
    SECTION("center equal to logits cancels") {
        std::vector<double> logits = {1.0, -2.0, 0.5};
        std::vector<double> center = logits;
        auto p = dino_distribution(logits, 0.3, &center);
        for (double v : p) REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-12));
    }
    SECTION("direct evaluation at (1,0)") {
        std::vector<double> logits = {1.0, 0.0};
        auto p = dino_distribution(logits, 1.0, nullptr);
        const double e = std::exp(1.0);
        REQUIRE(p[0] == Catch::Approx(e / (e + 1.0)).epsilon(1e-12));
        REQUIRE(p[1] == Catch::Approx(1.0 / (e + 1.0)).epsilon(1e-12));
    }
    SECTION("non-positive temperature rejected") {
        std::vector<double> logits = {1.0, 0.0};
        REQUIRE_THROWS_AS(dino_distribution(logits, 0.0, nullptr), ParameterError);
    }
}

TEST_CASE("dino_loss closed forms") {
    SECTION("confident teacher vs uniform student gives ln 2 per term") {
        DinoHead head = DinoHead::make(2, 1.0, 0.02, false);
        std::vector<Tensor> student = {mat({1, 2}, {5, -3}, true), mat({1, 2}, {0, 0}, true)};
        std::vector<Tensor> teacher = {mat({1, 2}, {50, 0})};  // softmax ~ (1, 0)
        const double loss = dino_loss(student, teacher, {0}, head).item();
        // one (t,s) pair: student view 1, H((1,0), (0.5,0.5)) = ln 2
        REQUIRE(loss == Catch::Approx(std::log(2.0)).margin(1e-9));
    }
    SECTION("uniform teacher and student over K=4: cross-entropy equals entropy") {
        DinoHead head = DinoHead::make(4, 1.0, 1.0, false);
        std::vector<Tensor> student = {mat({1, 4}, {0, 0, 0, 0}, true),
                                       mat({1, 4}, {0, 0, 0, 0}, true)};
        std::vector<Tensor> teacher = {mat({1, 4}, {0, 0, 0, 0})};
        const double loss = dino_loss(student, teacher, {0}, head).item();
        REQUIRE(loss == Catch::Approx(std::log(4.0)).margin(1e-9));
    }
    SECTION("term count for the default crop mix") {
        REQUIRE(dino_term_count(2, 10) == 18);
    }
    SECTION("empty or single student set rejected") {
        DinoHead head = DinoHead::make(2, 1.0, 1.0, false);
        std::vector<Tensor> teacher = {mat({1, 2}, {1, 0})};
        std::vector<Tensor> one = {mat({1, 2}, {1, 0}, true)};
        REQUIRE_THROWS_AS(dino_loss(one, teacher, {0}, head), ContractError);
    }
    SECTION("shift invariance of any single view's logits") {
        DinoHead head = DinoHead::make(3, 0.2, 0.07, true);
        Rng rng(41);
        auto logits = [&](bool rg) { return random_mat(rng, 2, 3, rg); };
        std::vector<Tensor> student = {logits(false), logits(false), logits(false)};
        std::vector<Tensor> teacher = {logits(false), logits(false)};
        const double base = dino_loss(student, teacher, {0, 1}, head).item();

        std::vector<double> shifted(student[1].data().begin(), student[1].data().end());
        for (auto& v : shifted) v += 11.7;
        std::vector<Tensor> student2 = {student[0], mat({2, 3}, shifted), student[2]};
        const double after = dino_loss(student2, teacher, {0, 1}, head).item();
        REQUIRE(after == Catch::Approx(base).margin(1e-9));
    }
    SECTION("teacher branch receives no gradients") {
        DinoHead head = DinoHead::make(2, 0.5, 0.1, true);
        std::vector<Tensor> student = {mat({2, 2}, {1, 0, 0, 1}, true),
                                       mat({2, 2}, {0.5, 0.5, 1, -1}, true)};
        std::vector<Tensor> teacher = {mat({2, 2}, {2, -1, 0, 1}, true)};
        Tensor loss = dino_loss(student, teacher, {0}, head);
        for (auto& s : student) s.zero_grad();
        teacher[0].zero_grad();
        backward(loss);
        for (double g : teacher[0].grad()) REQUIRE(g == 0.0);
        double student_grad_norm = 0.0;
        for (double g : student[1].grad()) student_grad_norm += g * g;
        REQUIRE(student_grad_norm > 0.0);
    }
}

TEST_CASE("dino center update") {
    DinoHead head = DinoHead::make(2, 0.5, 0.1, true, 0.9);
    std::vector<Tensor> teacher = {mat({2, 2}, {1, 3, 3, 5})};
    dino_update_center(head, teacher);
    // batch mean = (2, 4); center = 0.9*0 + 0.1*(2,4)
    REQUIRE(head.center[0] == Catch::Approx(0.2).margin(1e-12));
    REQUIRE(head.center[1] == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("supervised cross-entropy") {
    SECTION("huge aligned margin drives the loss to zero") {
        Tensor logits = mat({2, 3}, {100, 0, 0, 0, 100, 0});
        REQUIRE(supervised_ce(logits, {0, 1}).item() == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("uniform logits at K=10 give ln 10") {
        Tensor logits = Tensor::zeros({4, 10});
        REQUIRE(supervised_ce(logits, {0, 3, 7, 9}).item() ==
                Catch::Approx(std::log(10.0)).epsilon(1e-12));
    }
    SECTION("wrong-label certainty exceeds ln K") {
        Tensor logits = mat({1, 4}, {10, 0, 0, 0});
        REQUIRE(supervised_ce(logits, {2}).item() > std::log(4.0));
    }
    SECTION("label out of range") {
        Tensor logits = Tensor::zeros({1, 3});
        REQUIRE_THROWS_AS(supervised_ce(logits, {3}), ParameterError);
        REQUIRE_THROWS_AS(supervised_ce(logits, {-1}), ParameterError);
    }
}

TEST_CASE("objective gradients match finite differences") {
    Rng meta(2025);
    double worst = 0.0;
    SECTION("mixsr") {
        for (int t = 0; t < 50; ++t) {
            Rng rng(meta.next_u64());
            const int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
            const int64_t d = 2 + static_cast<int64_t>(rng.next_below(5));
            std::vector<Tensor> leaves = {random_mat(rng, n, d), random_mat(rng, n, d)};
            worst = std::max(worst, gradcheck_max_rel_err(
                                        [](const std::vector<Tensor>& p) {
                                            return mixsr_loss(EmbeddingBatch(p[0], p[1]), 0.5);
                                        },
                                        leaves));
        }
        REQUIRE(worst < 1e-4);
    }
    SECTION("barlow") {
        for (int t = 0; t < 50; ++t) {
            Rng rng(meta.next_u64());
            const int64_t n = 3 + static_cast<int64_t>(rng.next_below(2));
            const int64_t d = 2 + static_cast<int64_t>(rng.next_below(5));
            std::vector<Tensor> leaves = {random_mat(rng, n, d), random_mat(rng, n, d)};
            worst = std::max(worst, gradcheck_max_rel_err(
                                        [](const std::vector<Tensor>& p) {
                                            return barlow_loss(EmbeddingBatch(p[0], p[1]), 0.005);
                                        },
                                        leaves));
        }
        REQUIRE(worst < 1e-4);
    }
    SECTION("barlow standardized") {
        for (int t = 0; t < 25; ++t) {
            Rng rng(meta.next_u64());
            std::vector<Tensor> leaves = {random_mat(rng, 4, 3), random_mat(rng, 4, 3)};
            worst = std::max(worst,
                             gradcheck_max_rel_err(
                                 [](const std::vector<Tensor>& p) {
                                     return barlow_loss(EmbeddingBatch(p[0], p[1]), 0.005, true);
                                 },
                                 leaves));
        }
        REQUIRE(worst < 1e-4);
    }
    SECTION("dino") {
        for (int t = 0; t < 50; ++t) {
            Rng rng(meta.next_u64());
            const int64_t b = 1 + static_cast<int64_t>(rng.next_below(3));
            const int64_t k = 2 + static_cast<int64_t>(rng.next_below(4));
            std::vector<Tensor> leaves = {random_mat(rng, b, k), random_mat(rng, b, k),
                                          random_mat(rng, b, k)};
            Tensor teacher1 = random_mat(rng, b, k, false);
            Tensor teacher2 = random_mat(rng, b, k, false);
            DinoHead head = DinoHead::make(static_cast<int>(k), 0.4, 0.1, true);
            for (auto& c : head.center) c = rng.uniform(-0.5, 0.5);
            worst = std::max(
                worst, gradcheck_max_rel_err(
                           [&](const std::vector<Tensor>& p) {
                               return dino_loss(p, {teacher1, teacher2}, {0, 1}, head);
                           },
                           leaves));
        }
        REQUIRE(worst < 1e-4);
    }
    SECTION("supervised") {
        for (int t = 0; t < 50; ++t) {
            Rng rng(meta.next_u64());
            const int64_t n = 2 + static_cast<int64_t>(rng.next_below(3));
            const int64_t k = 2 + static_cast<int64_t>(rng.next_below(4));
            std::vector<int> labels;
            for (int64_t i = 0; i < n; ++i)
                labels.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(k))));
            std::vector<Tensor> leaves = {random_mat(rng, n, k)};
            worst = std::max(worst, gradcheck_max_rel_err(
                                        [&](const std::vector<Tensor>& p) {
                                            return supervised_ce(p[0], labels);
                                        },
                                        leaves));
        }
        REQUIRE(worst < 1e-4);
    }
}
