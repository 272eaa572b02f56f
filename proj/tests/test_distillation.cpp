#include <cmath>
#include <fstream>

#include "doctest.h"
#include "grad_check.hpp"
#include "microexp/distillation.hpp"
#include "microexp/errors.hpp"
#include "microexp/layers.hpp"

using namespace microexp;
using testutil::random_tensor;

namespace {

Tensor random_one_hot(std::size_t n, Rng& rng) {
    Tensor y({n, 8});
    for (std::size_t r = 0; r < n; ++r) y.at(r, rng.below(8)) = 1.0f;
    return y;
}

// Blended objective computed in double from scratch.
double kd_oracle(const Tensor& v, const Tensor& z, const Tensor& y, double lambda, double T, bool t_squared) {
    const std::size_t n = v.dim(0);
    auto soft = [](const Tensor& x, std::size_t r, double t) {
        std::vector<double> p(8);
        double mx = -1e300, s = 0;
        for (std::size_t c = 0; c < 8; ++c) mx = std::max(mx, double(x.at(r, c)) / t);
        for (std::size_t c = 0; c < 8; ++c) s += p[c] = std::exp(double(x.at(r, c)) / t - mx);
        for (auto& e : p) e /= s;
        return p;
    };
    double soft_term = 0, hard_term = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto pt = soft(z, r, T), pss = soft(v, r, T), ps = soft(v, r, 1.0);
        for (std::size_t c = 0; c < 8; ++c) {
            soft_term -= pt[c] * std::log(pss[c]);
            hard_term -= y.at(r, c) * std::log(ps[c]);
        }
    }
    soft_term /= double(n);
    hard_term /= double(n);
    return lambda * (t_squared ? T * T : 1.0) * soft_term + (1 - lambda) * hard_term;
}

}  // namespace

TEST_SUITE("distillation") {
    TEST_CASE("softened softmax examples") {
        Rng rng(1);
        for (int rep = 0; rep < 20; ++rep) {
            const Tensor x = random_tensor({3, 8}, rng, -5, 5);
            const Tensor a = softened_softmax(x, 1.0f), b = softmax(x);
            for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-7f);
        }
        const Tensor p = softened_softmax(Tensor({2}, {std::log(4.0f), 0.0f}), 1.0f);
        CHECK(p[0] == doctest::Approx(0.8).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(0.2).epsilon(1e-6));

        for (int rep = 0; rep < 20; ++rep) {
            const Tensor x = random_tensor({8}, rng, -2, 2);
            const Tensor p64 = softened_softmax(x, 64.0f);
            for (float q : p64.data()) CHECK(std::abs(q - 0.125f) < 0.02f);
        }
        CHECK_THROWS_AS(softened_softmax(Tensor({2}), 0.0f), ValidationError);
        CHECK_THROWS_AS(softened_softmax(Tensor({2}), -1.0f), ValidationError);
    }

    TEST_CASE("entropy grows with T and argmax is invariant") {
        Rng rng(2);
        const float temps[] = {0.5f, 1, 2, 4, 8, 16, 20, 32, 64};
        for (int rep = 0; rep < 50; ++rep) {
            const Tensor x = random_tensor({8}, rng, -4, 4);
            double prev = -1.0;
            const std::size_t arg = std::size_t(std::max_element(x.data().begin(), x.data().end()) - x.data().begin());
            for (float t : temps) {
                const Tensor p = softened_softmax(x, t);
                const double h = entropy(p.data());
                CHECK(h >= prev);
                prev = h;
                CHECK(std::size_t(std::max_element(p.data().begin(), p.data().end()) - p.data().begin()) == arg);
            }
            CHECK(prev <= std::log(8.0) + 1e-6);
        }
        CHECK(entropy(Tensor({2}, {1, 0}).data()) == 0.0);
        CHECK(entropy(Tensor({2}, {0.5f, 0.5f}).data()) == doctest::Approx(std::log(2.0)));
    }

    TEST_CASE("lambda 0 is hard-label cross-entropy") {
        Rng rng(3);
        for (float t : {1.0f, 2.0f, 16.0f}) {
            const Tensor v = random_tensor({4, 8}, rng, -3, 3), z = random_tensor({4, 8}, rng, -3, 3);
            const Tensor y = random_one_hot(4, rng);
            const KdLoss kd = kd_loss(v, z, y, {t, 0.0f, GradScaleMode::none});
            CHECK(std::abs(kd.loss - cross_entropy(softmax(v), y)) <= 1e-7f);
            const Tensor ana = scale(sub(softmax(v), y), 0.25f);
            for (std::size_t i = 0; i < ana.size(); ++i) CHECK(std::abs(kd.d_logits[i] - ana[i]) <= 1e-7f);
        }
    }

    TEST_CASE("lambda 1 with matching teacher") {
        Rng rng(4);
        const Tensor v = random_tensor({1, 8}, rng, -3, 3);
        const KdLoss kd = kd_loss(v, v, random_one_hot(1, rng), {1.0f, 1.0f, GradScaleMode::none});
        CHECK(kd.loss == doctest::Approx(entropy(softmax(v).data())).epsilon(1e-6));
        CHECK(max_abs(kd.d_logits) < 1e-7f);
    }

    TEST_CASE("loss matches double-precision oracle and is a convex combination") {
        Rng rng(5);
        for (GradScaleMode mode : {GradScaleMode::none, GradScaleMode::t_squared})
            for (float lambda : {0.0f, 0.25f, 0.5f, 1.0f})
                for (float t : {1.0f, 2.0f, 8.0f, 16.0f}) {
                    const Tensor v = random_tensor({4, 8}, rng, -3, 3), z = random_tensor({4, 8}, rng, -3, 3);
                    const Tensor y = random_one_hot(4, rng);
                    const KdLoss kd = kd_loss(v, z, y, {t, lambda, mode});
                    const double ref = kd_oracle(v, z, y, lambda, t, mode == GradScaleMode::t_squared);
                    CHECK(kd.loss == doctest::Approx(ref).epsilon(1e-5));
                    const double scale_t = mode == GradScaleMode::t_squared ? double(t) * t : 1.0;
                    CHECK(kd.loss == doctest::Approx(lambda * scale_t * kd.soft_term + (1 - lambda) * kd.hard_term)
                                         .epsilon(1e-6));
                    if (mode == GradScaleMode::none) {
                        CHECK(kd.loss >= std::min(kd.soft_term, kd.hard_term) - 1e-5f);
                        CHECK(kd.loss <= std::max(kd.soft_term, kd.hard_term) + 1e-5f);
                    }
                }
    }

    TEST_CASE("kd_loss gradient grid") {
        Rng rng(6);
        for (GradScaleMode mode : {GradScaleMode::none, GradScaleMode::t_squared})
            for (float lambda : {0.0f, 0.5f, 1.0f})
                for (float t : {1.0f, 2.0f, 16.0f})
                    for (int rep = 0; rep < 20; ++rep) {
                        const std::size_t n = 1 + std::size_t(rep % 4);
                        const Tensor v = random_tensor({n, 8}, rng, -3, 3), z = random_tensor({n, 8}, rng, -3, 3);
                        const Tensor y = random_one_hot(n, rng);
                        const DistillationConfig cfg{t, lambda, mode};
                        const KdLoss kd = kd_loss(v, z, y, cfg);
                        // the float loss is too coarse for differencing; the
                        // double oracle is the same function at full precision
                        const auto f = [&](const Tensor& s) {
                            return kd_oracle(s, z, y, lambda, t, mode == GradScaleMode::t_squared);
                        };
                        CHECK(testutil::gradient_mismatches(f, v, kd.d_logits, 1e-3) == 0);
                    }
    }

    TEST_CASE("kd_loss errors") {
        const Tensor v({2, 8}), z({3, 8});
        Tensor y({2, 8});
        y.at(0, 0) = y.at(1, 1) = 1.0f;
        CHECK_THROWS_AS(kd_loss(v, z, y, {}), DimensionError);
        CHECK_THROWS_AS(kd_loss(v, v, y, {0.0f, 0.5f, GradScaleMode::none}), ValidationError);
        CHECK_THROWS_AS(kd_loss(v, v, Tensor({2, 8}), {}), ValidationError);
        CHECK_THROWS_AS((DistillationConfig{1.0f, 1.5f, GradScaleMode::none}.validate()), ValidationError);
        CHECK(parse_grad_scale_mode("t_squared") == GradScaleMode::t_squared);
        CHECK_THROWS_AS(parse_grad_scale_mode("cubic"), ValidationError);
    }

    TEST_CASE("teacher logits files") {
        testutil::TempDir dir("logits");
        Rng rng(7);
        const std::vector<std::string> ids = {"a", "b", "c"};
        const TeacherLogits t(ids, random_tensor({3, 8}, rng, -10, 10));

        for (const char* name : {"t.csv", "t.mxtn"}) {
            save_teacher_logits(dir.file(name), t);
            const TeacherLogits back = load_teacher_logits(dir.file(name), ids);
            CHECK(back == t);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t c = 0; c < 8; ++c) CHECK(back.at(ids[i])[c] == t.logits().at(i, c));
        }
        {
            std::ifstream f(dir.file("t.mxtn"), std::ios::binary);
            char magic[4];
            f.read(magic, 4);
            CHECK(std::string(magic, 4) == "MXTN");
        }

        const std::vector<std::string> wider = {"a", "b", "c", "zz"};
        try {
            load_teacher_logits(dir.file("t.csv"), wider);
            FAIL("expected CoverageError");
        } catch (const CoverageError& e) {
            CHECK(std::string(e.what()).find("zz") != std::string::npos);
        }
        CHECK_THROWS_AS(t.at("missing"), CoverageError);

        {
            std::ofstream f(dir.file("short.csv"));
            f << "sample_id,z0,z1,z2,z3,z4,z5,z6,z7\na,1,2,3\n";
        }
        CHECK_THROWS_AS(load_teacher_logits(dir.file("short.csv")), FormatError);
        {
            std::ofstream f(dir.file("dup.csv"));
            f << "sample_id,z0,z1,z2,z3,z4,z5,z6,z7\na,1,2,3,4,5,6,7,8\na,1,2,3,4,5,6,7,8\n";
        }
        CHECK_THROWS_AS(load_teacher_logits(dir.file("dup.csv")), FormatError);
        CHECK_THROWS_AS(TeacherLogits({"a"}, Tensor({1, 7})), FormatError);
        CHECK_THROWS_AS(load_teacher_logits(dir.file("absent.csv")), IoError);
    }
}
