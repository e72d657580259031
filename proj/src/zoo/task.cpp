// SPDX-License-Identifier: Apache-2.0

#include "zoo/task.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace sane::zoo {

namespace {

// 5x7 glyphs for the digits 0-9.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs{{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

constexpr std::size_t kImage = 8;

std::vector<std::int64_t> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
    std::vector<std::int64_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<std::int64_t>(i % classes);
    }
    rng.shuffle(labels);
    return labels;
}

}  // namespace

std::vector<std::size_t> TaskSpec::input_shape() const {
    if (generator == "proc-digits") {
        return {1, kImage, kImage};
    }
    return {input_dim};
}

std::string TaskSpec::id() const {
    return fmt::format("{}-c{}-d{}-s{}", generator, classes, num::shape_size(input_shape()), seed);
}

void TaskSpec::validate() const {
    if (generator != "gaussian-blobs" && generator != "two-rings" && generator != "proc-digits") {
        fail(ErrorKind::Config, fmt::format("unknown task generator '{}'", generator),
             "generator");
    }
    if (classes < 2) {
        fail(ErrorKind::Config, "task needs at least two classes", "classes");
    }
    if (generator == "proc-digits" && classes > kGlyphs.size()) {
        fail(ErrorKind::Config, "proc-digits supports at most 10 classes", "classes");
    }
    if (generator != "proc-digits" && input_dim < 2) {
        fail(ErrorKind::Config, "point-cloud tasks need input_dim >= 2", "input_dim");
    }
    if (noise < 0.0) {
        fail(ErrorKind::Config, "noise must be non-negative", "noise");
    }
}

nlohmann::json task_to_json(const TaskSpec& t) {
    return {{"generator", t.generator}, {"classes", t.classes}, {"input_dim", t.input_dim},
            {"noise", t.noise},         {"seed", t.seed},       {"n_train", t.n_train},
            {"n_val", t.n_val},         {"n_test", t.n_test}};
}

TaskSpec task_from_json(const nlohmann::json& j) {
    TaskSpec t;
    t.generator = j.value("generator", t.generator);
    t.classes = j.value("classes", t.classes);
    t.input_dim = j.value("input_dim", t.input_dim);
    t.noise = j.value("noise", t.noise);
    t.seed = j.value("seed", t.seed);
    t.n_train = j.value("n_train", t.n_train);
    t.n_val = j.value("n_val", t.n_val);
    t.n_test = j.value("n_test", t.n_test);
    return t;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    Dataset d;
    const std::size_t cols = inputs.cols();
    d.inputs = num::TensorF(end - begin, cols);
    std::copy(inputs.data() + begin * cols, inputs.data() + end * cols, d.inputs.data());
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
    return d;
}

Dataset generate_task(const TaskSpec& spec, std::size_t n, std::uint64_t stream) {
    spec.validate();
    if (n == 0) {
        fail(ErrorKind::Argument, "generate_task: n must be positive");
    }
    Rng rng(derive_seed(spec.seed, stream));
    Dataset d;
    d.labels = balanced_labels(n, spec.classes, rng);
    const std::size_t dim = num::shape_size(spec.input_shape());
    d.inputs = num::TensorF(n, dim);
    const auto noise = static_cast<float>(spec.noise);

    if (spec.generator == "gaussian-blobs") {
        // Class centres evenly spaced on a circle of radius 3 in the first two axes.
        for (std::size_t i = 0; i < n; ++i) {
            const double angle = 2.0 * M_PI * static_cast<double>(d.labels[i]) /
                                 static_cast<double>(spec.classes);
            float* x = d.inputs.row(i);
            for (std::size_t k = 0; k < dim; ++k) {
                x[k] = noise * rng.normal_f();
            }
            x[0] += static_cast<float>(3.0 * std::cos(angle));
            x[1] += static_cast<float>(3.0 * std::sin(angle));
        }
    } else if (spec.generator == "two-rings") {
        // Concentric rings of radius 1 + class index.
        for (std::size_t i = 0; i < n; ++i) {
            const double angle = rng.uniform(0.0, 2.0 * M_PI);
            const double radius = 1.0 + static_cast<double>(d.labels[i]) + spec.noise * rng.normal();
            float* x = d.inputs.row(i);
            for (std::size_t k = 2; k < dim; ++k) {
                x[k] = noise * rng.normal_f();
            }
            x[0] = static_cast<float>(radius * std::cos(angle));
            x[1] = static_cast<float>(radius * std::sin(angle));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const auto& glyph = kGlyphs[static_cast<std::size_t>(d.labels[i])];
            const auto dx = static_cast<std::size_t>(rng.uniform_int(0, 3));
            const auto dy = static_cast<std::size_t>(rng.uniform_int(0, 1));
            const auto ink = static_cast<float>(rng.uniform(0.6, 1.0));
            float* x = d.inputs.row(i);
            for (std::size_t p = 0; p < dim; ++p) {
                x[p] = noise * rng.normal_f();
            }
            for (std::size_t gy = 0; gy < 7; ++gy) {
                for (std::size_t gx = 0; gx < 5; ++gx) {
                    if (glyph[gy][gx] == '#') {
                        x[(gy + dy) * kImage + gx + dx] += ink;
                    }
                }
            }
        }
    }
    return d;
}

TaskData generate_splits(const TaskSpec& spec) {
    return TaskData{generate_task(spec, spec.n_train, 1), generate_task(spec, spec.n_val, 2),
                    generate_task(spec, spec.n_test, 3)};
}

}  // namespace sane::zoo
