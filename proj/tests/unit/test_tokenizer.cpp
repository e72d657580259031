// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "tokenizer/tokenizer.hpp"
#include "zoo/network.hpp"

using namespace sane;
using namespace sane::tok;
using namespace sane::zoo;

namespace {

Architecture dense_4_3() {
    Architecture a;
    a.input_shape = {4};
    a.layers.push_back(LayerSpec{LayerKind::Dense, 4, 3});
    return a;
}

Architecture conv_2_3() {
    Architecture a;
    a.input_shape = {3, 5, 5};
    a.layers.push_back(LayerSpec{LayerKind::Conv2d, 3, 2, 3, 3, 1, 1, true});
    return a;
}

std::vector<Architecture> desk_architectures() {
    CnnOptions small;
    small.classes = 4;
    CnnOptions nobn;
    nobn.batchnorm = false;
    return {make_mlp(2, {16, 16}, 2), make_mlp(3, {5}, 4), make_cnn(small), make_cnn(nobn),
            dense_4_3(), conv_2_3()};
}

// Slow reference: walks every parameter in (layer, out, c_in, kh, kw, bias)
// order and places it by direct index arithmetic.
TensorF reference_tokens(const ModelCheckpoint& m, std::size_t d_t) {
    std::vector<std::vector<float>> rows;
    for (std::size_t i = 0; i < m.arch.layers.size(); ++i) {
        const auto& s = m.arch.layers[i];
        if (!s.learnable()) {
            continue;
        }
        const std::size_t per_row = m.layers[i].weight.size() / s.out;
        for (std::size_t o = 0; o < s.out; ++o) {
            std::vector<float> full;
            for (std::size_t c = 0; c < per_row; ++c) {
                full.push_back(m.layers[i].weight[o * per_row + c]);
            }
            if (s.has_bias) {
                full.push_back(m.layers[i].bias[o]);
            }
            for (std::size_t b = 0; b < full.size(); b += d_t) {
                std::vector<float> tok(d_t, 0.0F);
                for (std::size_t j = b; j < std::min(full.size(), b + d_t); ++j) {
                    tok[j - b] = full[j];
                }
                rows.push_back(tok);
            }
        }
    }
    TensorF out(rows.size(), d_t);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].begin(), rows[r].end(), out.row(r));
    }
    return out;
}

}  // namespace

TEST_CASE("token counts") {
    auto m = init_checkpoint(dense_4_3(), 1);
    auto t = tokenize(m, 5);
    CHECK(t.size() == 3);
    for (float v : t.mask.storage()) {
        CHECK(v == 1.0F);
    }

    auto c = init_checkpoint(conv_2_3(), 2);
    auto tc = tokenize(c, 16);
    REQUIRE(tc.size() == 4);
    float signal = 0;
    for (std::size_t j = 0; j < 16; ++j) {
        signal += tc.mask(1, j);
        if (j >= 12) {
            CHECK(tc.tokens(1, j) == 0.0F);
        }
    }
    CHECK(signal == 12.0F);
    CHECK(tc.layout[0].row_width == 28);
    CHECK(tc.layout[0].parts == 2);
    CHECK(tc.layout[0].pad == 4);

    // a 3x3 conv with 32 input channels and bias fills one 289-wide token per row
    Architecture big;
    big.input_shape = {32, 4, 4};
    big.layers.push_back(LayerSpec{LayerKind::Conv2d, 32, 8, 3, 3, 1, 1, true});
    auto bl = token_layout(big, 289);
    CHECK(bl[0].row_width == 289);
    CHECK(bl[0].parts == 1);
    CHECK(bl[0].pad == 0);

    CHECK_THROWS_AS(tokenize(m, 0), Error);
    Architecture only_bn;
    only_bn.input_shape = {4};
    only_bn.layers.push_back(LayerSpec{LayerKind::BatchNorm, 4, 4});
    try {
        tokenize(empty_checkpoint(only_bn), 4);
        FAIL("expected argument error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Argument);
    }
}

TEST_CASE("layout properties hold on desk architectures") {
    for (const auto& arch : desk_architectures()) {
        for (std::size_t d_t : {1u, 3u, 7u, 17u, 64u}) {
            auto m = init_checkpoint(arch, 3);
            auto t = tokenize(m, d_t);
            CHECK(t.tokens == reference_tokens(m, d_t));

            double mask_sum = 0;
            for (float v : t.mask.storage()) {
                mask_sum += v;
            }
            CHECK(mask_sum == double(m.num_parameters()));

            std::size_t expected = 0;
            for (const auto& l : t.layout) {
                const auto& s = arch.layers[l.layer];
                const std::size_t c_r = s.row_width() + (s.has_bias ? 1 : 0);
                CHECK(l.tokens() == s.out * ((c_r + d_t - 1) / d_t));
                expected += l.tokens();
            }
            REQUIRE(t.size() == expected);

            std::size_t row = 0;
            for (std::size_t li = 0; li < t.layout.size(); ++li) {
                for (std::size_t k = 0; k < t.layout[li].tokens(); ++k, ++row) {
                    CHECK(t.positions[row][0] == std::int64_t(row + 1));
                    CHECK(t.positions[row][1] == std::int64_t(li + 1));
                    CHECK(t.positions[row][2] == std::int64_t(k + 1));
                }
            }
        }
    }
}

TEST_CASE("detokenize inverts tokenize") {
    for (const auto& arch : desk_architectures()) {
        auto m = init_checkpoint(arch, 4);
        auto t = tokenize(m, 7);
        CHECK(detokenize(t, arch) == m);

        // pads are discarded
        auto noisy = t;
        for (std::size_t i = 0; i < noisy.tokens.size(); ++i) {
            if (noisy.mask[i] == 0.0F) {
                noisy.tokens[i] = 123.0F;
            }
        }
        CHECK(detokenize(noisy, arch) == m);
        CHECK(detokenize_tokens(noisy.tokens, arch, 7) == m);
    }

    SUBCASE("fuzz") {
        Rng rng(99);
        std::size_t mismatches = 0;
        auto archs = desk_architectures();
        for (int i = 0; i < 100; ++i) {
            const auto& arch = archs[static_cast<std::size_t>(i) % archs.size()];
            auto m = empty_checkpoint(arch);
            for (auto& layer : m.layers) {
                for (auto& v : layer.weight.storage()) {
                    v = static_cast<float>(rng.normal(0.0, 10.0));
                }
                for (auto& v : layer.bias.storage()) {
                    v = static_cast<float>(rng.normal());
                }
            }
            const auto d_t = static_cast<std::size_t>(rng.uniform_int(1, 40));
            auto t = tokenize(m, d_t);
            mismatches += detokenize(t, arch) == m ? 0 : 1;
            // injective on a fixed architecture
            auto other = m;
            other.layers.front().weight[0] += 1.0F;
            CHECK_FALSE(tokenize(other, d_t).tokens == t.tokens);
        }
        CHECK(mismatches == 0);
    }

    SUBCASE("layout mismatch is a format error") {
        auto t = tokenize(init_checkpoint(make_mlp(2, {16, 16}, 2), 1), 7);
        try {
            detokenize(t, make_mlp(2, {8, 16}, 2));
            FAIL("expected format error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Format);
        }
    }
}

TEST_CASE("standardization") {
    auto arch = make_mlp(2, {16, 16}, 2);
    auto a = init_checkpoint(arch, 1);
    auto b = init_checkpoint(arch, 2);
    auto s = fit_preprocess({&a, &b}, 17);

    // independent oracle for layer 0 statistics
    double sum = 0;
    double n = 0;
    for (const auto* m : {&a, &b}) {
        for (float v : m->layers[0].weight.storage()) {
            sum += v;
            ++n;
        }
        for (float v : m->layers[0].bias.storage()) {
            sum += v;
            ++n;
        }
    }
    const double mu = sum / n;
    double sq = 0;
    for (const auto* m : {&a, &b}) {
        for (float v : m->layers[0].weight.storage()) {
            sq += (v - mu) * (v - mu);
        }
        for (float v : m->layers[0].bias.storage()) {
            sq += (v - mu) * (v - mu);
        }
    }
    CHECK(s.mean[0] == doctest::Approx(mu).epsilon(1e-12));
    CHECK(s.std[0] == doctest::Approx(std::sqrt(sq / n)).epsilon(1e-12));

    auto back = destandardize(standardize(a, s), s);
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        for (std::size_t j = 0; j < a.layers[i].weight.size(); ++j) {
            const double x = a.layers[i].weight[j];
            CHECK(std::abs(back.layers[i].weight[j] - x) <= 1e-6 * std::max(std::abs(x), 1e-3));
        }
    }

    PreprocessState unit{17, std::nullopt, std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)};
    CHECK(standardize(a, unit) == a);

    auto flat = a;
    flat.layers[0].weight.fill(0.5F);
    flat.layers[0].bias.fill(0.5F);
    auto fs = fit_preprocess({&flat}, 17);
    CHECK(fs.std[0] == kStdFloor);
    auto z = standardize(flat, fs);
    for (float v : z.layers[0].weight.storage()) {
        CHECK(v == 0.0F);
    }

    PreprocessState short_state{17, 3, {0.0}, {1.0}};
    try {
        standardize(a, short_state);
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }

    auto j = preprocess_to_json(s);
    auto s2 = preprocess_from_json(nlohmann::json::parse(j.dump()));
    CHECK(s2.mean == s.mean);
    CHECK(s2.std == s.std);
    CHECK(s2.d_t == 17);
}

TEST_CASE("windows") {
    auto m = init_checkpoint(make_mlp(2, {16, 16}, 2), 5);
    auto t = tokenize(m, 17);
    const std::size_t n = t.size();
    Rng rng(1);

    auto full = draw_window(t, n + 5, rng);
    CHECK(full.size() == n);
    CHECK(full.tokens == t.tokens);

    auto one = draw_window(t, 1, rng);
    REQUIRE(one.size() == 1);
    CHECK(one.positions[0] == t.positions[one.start]);
    CHECK(one.positions[0][0] == std::int64_t(one.start + 1));

    const std::size_t ws = 10;
    const std::size_t starts = n - ws + 1;
    std::vector<double> counts(starts, 0.0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto w = draw_window(t, ws, rng);
        REQUIRE(w.size() == ws);
        CHECK(w.positions.front() == t.positions[w.start]);
        counts[w.start] += 1;
    }
    double chi2 = 0;
    const double expect = double(draws) / double(starts);
    for (double c : counts) {
        chi2 += (c - expect) * (c - expect) / expect;
    }
    REQUIRE(starts == 25);
    // upper 1% point of chi-square with 24 degrees of freedom
    CHECK(chi2 < 42.9798);

    CHECK(windows_per_model(50, 32) == 2);
    CHECK(windows_per_model(32, 32) == 1);
    CHECK(windows_per_model(50000, 256) == 196);
}
