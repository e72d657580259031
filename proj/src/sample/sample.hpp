// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "embed/embed.hpp"
#include "tokenizer/tokenizer.hpp"
#include "zoo/network.hpp"
#include "zoo/task.hpp"

namespace sane::sample {

using embed::EmbeddingSequence;
using model::SaneModel;
using num::TensorF;
using zoo::ModelCheckpoint;

enum class Prior { Kde, Gaussian };
enum class Bandwidth { Scott, Fixed };
/// Factorized: every (position, dimension) picks its own kernel centre.
/// Joint: one prompt is picked per draw and anchors every position.
enum class KdeKind { Factorized, Joint };

struct SampleConfig {
    std::size_t k = 50;
    std::size_t m = 5;
    std::size_t bootstrap_iters = 3;
    Bandwidth bandwidth = Bandwidth::Scott;
    double fixed_h = 0.1;
    Prior prior = Prior::Kde;
    KdeKind kde = KdeKind::Factorized;
    std::size_t bn_batches = 10;
    std::size_t bn_batch_size = 64;
    std::optional<std::size_t> halo;   // default: a quarter of the SANE window
    std::optional<std::size_t> chunk;  // default: the SANE window
    std::uint64_t seed = 1;

    void validate() const;
};

nlohmann::json sample_config_to_json(const SampleConfig& c);
SampleConfig sample_config_from_json(const nlohmann::json& j, const std::string& path = "sample");

inline constexpr double kBandwidthFloor = 1e-6;

/// Factorized per-position, per-dimension Gaussian KDE. A position with no
/// prompt coverage samples from N(0, 1).
struct Kde {
    std::size_t d_z = 0;
    std::vector<tok::Position> positions;
    std::vector<TensorF> centers;                // per position: [E_n x d_z]
    std::vector<std::vector<double>> bandwidth;  // per position: d_z
    std::vector<std::vector<std::size_t>> source;  // per position: prompt index of each centre row
    std::size_t prompts = 0;

    std::size_t size() const { return positions.size(); }
    std::size_t uncovered() const;
};

/// Prompt tokens are matched to target positions by (layer, index in layer).
Kde fit_kde(const std::vector<const EmbeddingSequence*>& prompts,
            const std::vector<tok::Position>& target, Bandwidth rule = Bandwidth::Scott,
            double fixed_h = 0.1);

/// Standard-normal sampler over the target positions.
Kde gaussian_prior(const std::vector<tok::Position>& target, std::size_t d_z);

/// k draws, each [N x d_z]. Rows are sampled in (sample, position, dimension) order.
/// A joint draw falls back to a random centre at positions its anchor prompt does not cover.
std::vector<TensorF> draw_samples(const Kde& kde, std::size_t k, Rng& rng,
                                  KdeKind kind = KdeKind::Factorized);

/// Positions of `arch` under the tokenizer layout.
std::vector<tok::Position> target_positions(const zoo::Architecture& arch, std::size_t d_t);

struct DecodeOptions {
    std::size_t chunk = 0;  // 0: the SANE window
    std::size_t halo = 0;
};

ModelCheckpoint decode_sample(const SaneModel& sane, const TensorF& z, const zoo::Architecture& arch,
                              const tok::PreprocessState& prep, const DecodeOptions& opts);

std::vector<ModelCheckpoint> decode_samples(const SaneModel& sane, const std::vector<TensorF>& zs,
                                            const zoo::Architecture& arch,
                                            const tok::PreprocessState& prep,
                                            const DecodeOptions& opts, std::size_t workers = 1);

/// Replaces batch-norm running statistics by their average over `batches`
/// training-mode passes; learned tensors are untouched.
ModelCheckpoint bn_condition(const ModelCheckpoint& m, const zoo::Dataset& data,
                             std::size_t batches, std::size_t batch_size, std::uint64_t seed);

struct Scored {
    std::size_t index = 0;
    double score = 0.0;
};

/// Top m by descending score; equal scores keep the lower index first.
std::vector<Scored> subsample(const std::vector<double>& scores, std::size_t m);

struct IterationTrace {
    std::size_t iteration = 0;
    std::vector<double> candidate_scores;  // new draws only, in draw order
    std::vector<double> kept_scores;       // descending
    double best = 0.0;
};

struct SampleResult {
    std::vector<ModelCheckpoint> models;  // descending score
    std::vector<double> scores;
    std::vector<TensorF> embeddings;
    std::vector<IterationTrace> trace;
};

struct SampleContext {
    const SaneModel* sane = nullptr;
    const tok::PreprocessState* preprocess = nullptr;
    zoo::Architecture arch;
    const zoo::Dataset* select_data = nullptr;  // scores used for keep-best
    const zoo::Dataset* bn_data = nullptr;      // inputs for conditioning
    std::size_t workers = 1;
};

/// Draw, decode, condition, score, keep m; repeated with the kept embeddings
/// refit as the next prompt set. Kept models compete again in later rounds,
/// so the best kept score never drops. One iteration is plain subsampling.
SampleResult bootstrap(const SampleContext& ctx, const std::vector<const EmbeddingSequence*>& prompts,
                       const SampleConfig& cfg);

struct TrajectoryPoint {
    std::size_t epoch = 0;
    double accuracy = 0.0;
};

struct Trajectory {
    std::vector<TrajectoryPoint> points;
    bool diverged = false;
};

/// Epoch 0 is the starting accuracy; one point per completed epoch after that.
Trajectory finetune(const ModelCheckpoint& m, const zoo::TaskData& data, std::size_t epochs,
                    const zoo::TrainOptions& opts, std::uint64_t seed);

/// Mean of per-model softmax probabilities, then argmax (ties to the lower class).
double ensemble_eval(const std::vector<ModelCheckpoint>& models, const zoo::Dataset& data);

nlohmann::json result_to_json(const SampleResult& r, const SampleConfig& cfg,
                              const std::vector<std::string>& paths);

}  // namespace sane::sample
