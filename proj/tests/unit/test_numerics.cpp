// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "numerics/autodiff.hpp"
#include "numerics/optim.hpp"
#include "support/oracles.hpp"

using namespace sane;
using namespace sane::num;

namespace {

using testing::contract;
using testing::gradient_error;
using testing::random_tensor;
using testing::VarD;

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("matmul values") {
    Tape<double> tape(false);
    auto a = constant(TensorD::matrix(2, 2, {1, 0, 0, 1}));
    auto b = constant(TensorD::matrix(2, 2, {5, 6, 7, 8}));
    CHECK(tape.matmul(a, b)->value.storage() == num::AlignedVector<double>{5, 6, 7, 8});

    auto r = constant(TensorD::matrix(1, 2, {1, 2}));
    auto c = constant(TensorD::matrix(2, 1, {3, 4}));
    auto out = tape.matmul(r, c);
    CHECK(out->value.shape() == Shape{1, 1});
    CHECK(out->value[0] == 11.0);
}

TEST_CASE("matmul shape mismatch is a dimension error") {
    Tape<double> tape;
    auto a = constant(TensorD(2, 3));
    auto b = constant(TensorD(2, 3));
    try {
        tape.matmul(a, b);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Dimension);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    std::mt19937_64 rng(11);
    auto a = random_tensor({4, 4}, rng);
    auto b = random_tensor({4, 4}, rng);
    // gradient of sum(A.B) with respect to A and B
    const double err = gradient_error(
        [](Tape<double>& t, const std::vector<VarD>& v) { return t.sum(t.matmul(v[0], v[1])); },
        {a, b});
    CHECK(err < 1e-6);

    for (int mode = 1; mode < 4; ++mode) {
        const bool ta = mode & 1;
        const bool tb = mode & 2;
        auto x = random_tensor({3, 5}, rng);
        auto y = random_tensor(ta == tb ? Shape{5, 3} : Shape{3, 5}, rng);
        if (ta && !tb) {
            y = random_tensor({3, 4}, rng);
        }
        if (!ta && tb) {
            y = random_tensor({4, 5}, rng);
        }
        const double e = gradient_error(
            [ta, tb](Tape<double>& t, const std::vector<VarD>& v) {
                return contract(t, t.matmul(v[0], v[1], ta, tb), 3);
            },
            {x, y});
        CHECK(e < 1e-6);
    }
}

TEST_CASE("elementwise ops") {
    Tape<double> tape(false);
    auto x = constant(TensorD::matrix(2, 2, {1, -2, 3, -4}));
    auto zero = constant(TensorD(2, 2));
    CHECK(tape.add(x, zero)->value == x->value);
    CHECK(gelu_scalar(0.0) == 0.0);
    auto row = constant(TensorD::matrix(1, 2, {10, 20}));
    CHECK(tape.add(x, row)->value.storage() == num::AlignedVector<double>{11, 18, 13, 16});
    CHECK(tape.relu(x)->value.storage() == num::AlignedVector<double>{1, 0, 3, 0});
    auto bad = constant(TensorD(2, 3));
    CHECK_THROWS_AS(tape.add(x, bad), Error);
}

TEST_CASE("elementwise gradients") {
    std::mt19937_64 rng(12);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto row = random_tensor({1, 4}, rng);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.mul(v[0], v[1]), 1);
          }, {a, b}) < 1e-6);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.add(v[0], v[1]), 2);
          }, {a, row}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.sub(v[0], v[1]), 3);
          }, {a, row}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.mul(v[0], v[1]), 4);
          }, {a, row}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.scale(v[0], -2.5), 5);
          }, {a}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.gelu(v[0]), 6);
          }, {a}) < kGradTol);
    // keep relu inputs away from the kink
    auto away = random_tensor({3, 4}, rng, 0.2, 1.0);
    for (std::size_t i = 0; i < away.size(); i += 2) {
        away[i] = -away[i];
    }
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.relu(v[0]), 7);
          }, {away}) < kGradTol);
}

TEST_CASE("softmax and layer norm") {
    Tape<double> tape(false);
    auto x = constant(TensorD::matrix(1, 3, {0, 0, 0}));
    auto s = tape.softmax(x, 1);
    for (double v : s->value.storage()) {
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }

    auto c = constant(TensorD::matrix(1, 4, {2, 2, 2, 2}));
    auto gain = constant(TensorD::matrix(1, 4, {1, 2, 3, 4}));
    auto bias = constant(TensorD::matrix(1, 4, {0.5, -1, 2, 0}));
    CHECK(tape.layer_norm(c, gain, bias, 1e-5)->value.storage() == bias->value.storage());

    std::mt19937_64 rng(5);
    auto r = constant(random_tensor({6, 7}, rng, -3.0, 3.0));
    for (int axis : {0, 1}) {
        auto sm = tape.softmax(r, axis);
        const std::size_t outer = axis == 1 ? 6 : 7;
        for (std::size_t o = 0; o < outer; ++o) {
            double total = 0;
            for (std::size_t i = 0; i < (axis == 1 ? 7u : 6u); ++i) {
                total += axis == 1 ? sm->value(o, i) : sm->value(i, o);
            }
            CHECK(std::abs(total - 1.0) < 1e-6);
        }
    }
    auto ln = tape.layer_norm(r, nullptr, nullptr, 1e-5);
    for (std::size_t row = 0; row < 6; ++row) {
        double mean = 0;
        double var = 0;
        for (std::size_t col = 0; col < 7; ++col) {
            mean += ln->value(row, col);
        }
        mean /= 7;
        for (std::size_t col = 0; col < 7; ++col) {
            var += (ln->value(row, col) - mean) * (ln->value(row, col) - mean);
        }
        CHECK(std::abs(mean) < 1e-6);
        CHECK(var / 7 == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("softmax and layer norm gradients") {
    std::mt19937_64 rng(13);
    auto x = random_tensor({4, 5}, rng, -2.0, 2.0);
    for (int axis : {0, 1}) {
        CHECK(gradient_error([axis](Tape<double>& t, const std::vector<VarD>& v) {
                  return contract(t, t.softmax(v[0], axis), 8);
              }, {x}) < 1e-6);
    }
    auto g = random_tensor({1, 5}, rng);
    auto b = random_tensor({1, 5}, rng);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.layer_norm(v[0], v[1], v[2], 1e-5), 9);
          }, {x, g, b}) < kGradTol);
}

TEST_CASE("structural op gradients") {
    std::mt19937_64 rng(14);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({2, 4}, rng);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.transpose(v[0]), 10);
          }, {a}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.concat_rows({v[0], v[1], v[0]}), 11);
          }, {a, b}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.gather_rows(v[0], {2, 0, 2, 1}), 12);
          }, {a}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return t.mean(t.mul(v[0], v[0]));
          }, {a}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.segment_mean(v[0], {{0, 2}, {2, 1}}), 13);
          }, {a}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.l2_normalize_rows(v[0]), 114);
          }, {a}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.linear(v[0], v[1], v[2]), 15);
          }, {a, random_tensor({5, 4}, rng), random_tensor({1, 5}, rng)}) < kGradTol);
}

TEST_CASE("attention gradient and segment independence") {
    std::mt19937_64 rng(15);
    auto q = random_tensor({7, 8}, rng);
    auto k = random_tensor({7, 8}, rng);
    auto v = random_tensor({7, 8}, rng);
    const std::vector<Segment> segs{{0, 3}, {3, 4}};
    CHECK(gradient_error([&](Tape<double>& t, const std::vector<VarD>& x) {
              return contract(t, t.attention(x[0], x[1], x[2], 2, segs), 16);
          }, {q, k, v}) < kGradTol);

    // Each segment must see only its own rows: running the second segment alone
    // gives the same output rows.
    Tape<double> tape(false);
    auto full = tape.attention(constant(q), constant(k), constant(v), 2, segs);
    auto tail = [&](const TensorD& t) {
        TensorD out(4, 8);
        std::copy(t.data() + 3 * 8, t.data() + 7 * 8, out.data());
        return constant(out);
    };
    auto alone = tape.attention(tail(q), tail(k), tail(v), 2, {{0, 4}});
    for (std::size_t i = 0; i < 32; ++i) {
        CHECK(alone->value[i] == doctest::Approx(full->value[24 + i]).epsilon(1e-14));
    }
}

TEST_CASE("mse_masked") {
    Tape<double> tape;
    auto pred = constant(TensorD::matrix(2, 2, {1, 2, 0, 0}));
    auto target = constant(TensorD::matrix(2, 2, {1, 2, 3, 4}));
    auto mask = constant(TensorD::matrix(2, 2, {1, 1, 0, 0}));
    CHECK(item(tape.mse_masked(pred, target, mask)) == 0.0);

    auto ones = constant(TensorD(Shape{2, 2}, 1.0));
    auto shifted = constant(TensorD::matrix(2, 2, {2, 3, 4, 5}));
    CHECK(item(tape.mse_masked(shifted, target, ones)) == 1.0);

    auto none = constant(TensorD(2, 2));
    CHECK(item(tape.mse_masked(shifted, target, none)) == 0.0);
    CHECK_THROWS_AS(tape.mse_masked(shifted, constant(TensorD(2, 3)), ones), Error);

    // Against a plain loop on a random 3x5 problem.
    std::mt19937_64 rng(16);
    auto p = random_tensor({3, 5}, rng);
    auto t = random_tensor({3, 5}, rng);
    TensorD m(3, 5);
    std::bernoulli_distribution coin(0.5);
    for (auto& v : m.storage()) {
        v = coin(rng) ? 1.0 : 0.0;
    }
    double num = 0;
    double den = 0;
    for (std::size_t i = 0; i < 15; ++i) {
        num += m[i] * (p[i] - t[i]) * (p[i] - t[i]);
        den += m[i];
    }
    const double oracle = den > 0 ? num / den : 0.0;
    CHECK(std::abs(item(tape.mse_masked(constant(p), constant(t), constant(m))) - oracle) < 1e-12);

    CHECK(gradient_error([m](Tape<double>& tp, const std::vector<VarD>& v) {
              return tp.mse_masked(v[0], v[1], constant(m));
          }, {p, t}) < kGradTol);
}

TEST_CASE("cross entropy gradients") {
    std::mt19937_64 rng(17);
    auto logits = random_tensor({4, 4}, rng, -2, 2);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return t.cross_entropy(v[0], {0, 3, 1, 1});
          }, {logits}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return t.cross_entropy(v[0], {2, 3, 0, 1}, true);
          }, {logits}) < kGradTol);
}

TEST_CASE("conv2d and batch norm gradients") {
    std::mt19937_64 rng(18);
    ConvGeometry g{2, 5, 4, 3, 3, 2, 1};
    auto x = random_tensor({3, 2 * 5 * 4}, rng);
    auto w = random_tensor({3, 2 * 9}, rng);
    auto b = random_tensor({1, 3}, rng);
    CHECK(gradient_error([g](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.conv2d(v[0], v[1], v[2], g), 19);
          }, {x, w, b}) < kGradTol);

    ConvGeometry g1{1, 4, 4, 3, 3, 1, 0};
    auto x1 = random_tensor({2, 16}, rng);
    auto w1 = random_tensor({2, 9}, rng);
    CHECK(gradient_error([g1](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.conv2d(v[0], v[1], nullptr, g1), 20);
          }, {x1, w1}) < kGradTol);

    auto xb = random_tensor({4, 3 * 2}, rng);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.batch_norm_train(v[0], 3, 1e-5), 21);
          }, {xb}) < kGradTol);
    CHECK(gradient_error([](Tape<double>& t, const std::vector<VarD>& v) {
              return contract(t, t.batch_norm_eval(v[0], 3, {0.1, -0.2, 0.3}, {1.5, 0.5, 2.0}, 1e-5),
                              22);
          }, {xb}) < kGradTol);
}

TEST_CASE("conv2d matches direct convolution") {
    std::mt19937_64 rng(19);
    ConvGeometry g{2, 5, 5, 3, 3, 2, 1};
    auto x = random_tensor({1, 50}, rng);
    auto w = random_tensor({2, 18}, rng);
    Tape<double> tape(false);
    auto out = tape.conv2d(constant(x), constant(w), nullptr, g);
    const std::size_t ho = g.out_height();
    const std::size_t wo = g.out_width();
    REQUIRE(out->value.cols() == 2 * ho * wo);
    for (std::size_t o = 0; o < 2; ++o) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double acc = 0;
                for (std::size_t c = 0; c < 2; ++c) {
                    for (std::size_t ky = 0; ky < 3; ++ky) {
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const long iy = long(oy * 2 + ky) - 1;
                            const long ix = long(ox * 2 + kx) - 1;
                            if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) {
                                continue;
                            }
                            acc += w(o, c * 9 + ky * 3 + kx) * x[c * 25 + iy * 5 + ix];
                        }
                    }
                }
                CHECK(out->value[o * ho * wo + oy * wo + ox] == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("forward and backward are deterministic") {
    auto run = []() {
        std::mt19937_64 rng(20);
        auto a = parameter(random_tensor({5, 6}, rng));
        auto b = parameter(random_tensor({6, 6}, rng));
        Tape<float> tape;
        auto af = parameter(a->value.cast<float>());
        auto bf = parameter(b->value.cast<float>());
        auto h = tape.gelu(tape.matmul(af, bf));
        auto loss = tape.mean(tape.softmax(tape.layer_norm(h, nullptr, nullptr, 1e-5F), 1));
        tape.backward(loss);
        return std::make_pair(af->grad, bf->grad);
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);
}

TEST_CASE("adamw") {
    SUBCASE("zero gradient and no decay leaves parameters unchanged") {
        auto p = parameter(TensorD::matrix(1, 3, {1, -2, 3}));
        p->grad_buffer();
        AdamW<double> opt({p}, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.0});
        opt.step();
        CHECK(p->value.storage() == num::AlignedVector<double>{1, -2, 3});
    }
    SUBCASE("single scalar step matches the hand-executed update") {
        // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        // p = 1*(1 - 0.1*0.01) - 0.1*0.5/(0.5 + 1e-8) = 0.899000002
        auto p = parameter(TensorD::scalar(1.0));
        p->grad_buffer()[0] = 0.5;
        AdamW<double> opt({p}, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
        opt.step();
        CHECK(p->value[0] == doctest::Approx(0.899000002).epsilon(1e-12));
    }
    SUBCASE("quadratic bowl loss decreases monotonically") {
        auto p = parameter(TensorD::matrix(1, 4, {1.0, -0.5, 0.8, 0.3}));
        AdamW<double> opt({p}, AdamWOptions{1e-2, 0.9, 0.999, 1e-8, 0.0});
        double prev = 1e300;
        for (int step = 0; step < 100; ++step) {
            Tape<double> tape;
            auto loss = tape.sum(tape.mul(p, p));
            const double l = item(loss);
            CHECK(l < prev);
            prev = l;
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
    }
}

TEST_CASE("onecycle schedule") {
    OneCycleOptions o{1e-2, 0.3, 25.0, 1e4};
    CHECK(onecycle_lr(0, 100, o) == doctest::Approx(1e-2 / 25.0).epsilon(1e-12));
    CHECK(onecycle_lr(30, 100, o) == doctest::Approx(1e-2).epsilon(1e-12));
    CHECK(std::abs(onecycle_lr(100, 100, o) - 1e-2 / 1e4) < 1e-9);
    CHECK_THROWS_AS(onecycle_lr(101, 100, o), Error);
    // rises until the peak, falls after it
    for (std::size_t s = 1; s <= 30; ++s) {
        CHECK(onecycle_lr(s, 100, o) > onecycle_lr(s - 1, 100, o));
    }
    for (std::size_t s = 31; s <= 100; ++s) {
        CHECK(onecycle_lr(s, 100, o) < onecycle_lr(s - 1, 100, o));
    }
}
