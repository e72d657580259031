// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "common/container.hpp"
#include "common/error.hpp"
#include "common/hash.hpp"
#include "pipeline/pipeline.hpp"

using namespace sane;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("sane_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

nlohmann::json tiny_run() {
    return nlohmann::json::parse(R"({
        "seed": 5,
        "zoo": {"arch": {"mlp": {"inputs": 2, "hidden": [6], "classes": 2}},
                "task": {"n_train": 200, "n_val": 100, "n_test": 200},
                "n_models": 14, "epochs": 3, "snapshot_epochs": [1, 3]},
        "sane": {"d_z": 4, "d_model": 16, "encoder_layers": 1, "decoder_layers": 1, "heads": 2,
                 "d_proj": 8, "ws": 8, "epochs": 2, "batch_size": 8, "permutation_pool": 2},
        "sample": {"k": 6, "m": 2, "bootstrap_iters": 2, "bn_batches": 0},
        "finetune": {"scratch_seeds": 2}
    })");
}

}  // namespace

TEST_CASE("git blob ids match git hash-object") {
    CHECK(git_blob_id("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(git_blob_id("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
}

TEST_CASE("directory hashes depend on content and relative names only") {
    const auto a = scratch("hash_a");
    const auto b = scratch("hash_b");
    for (const auto& root : {a, b}) {
        fs::create_directories(root / "sub");
        write_text(root / "x.txt", "one");
        write_text(root / "sub" / "y.txt", "two");
    }
    CHECK(content_hash(a) == content_hash(b));
    CHECK(content_hash(a / "x.txt") == git_blob_id("one"));
    write_text(b / "sub" / "y.txt", "three");
    CHECK(content_hash(a) != content_hash(b));
    fs::rename(a / "x.txt", a / "z.txt");
    write_text(b / "sub" / "y.txt", "two");
    CHECK(content_hash(a) != content_hash(b));
    CHECK_THROWS_AS(content_hash(a / "nope"), Error);
}

TEST_CASE("run config round trips and derives module seeds") {
    const auto c = pipeline::run_config_from_json(tiny_run());
    CHECK(c.seed == 5);
    CHECK(c.zoo.n_models == 14);
    CHECK(c.zoo.arch == zoo::make_mlp(2, {6}, 2));
    CHECK(c.zoo.seed == derive_seed(5, 11));
    CHECK(c.sane.seed == derive_seed(5, 12));
    CHECK(c.sample.seed == derive_seed(5, 13));
    const auto j = pipeline::run_config_to_json(c);
    const auto back = pipeline::run_config_from_json(j);
    CHECK(pipeline::run_config_to_json(back) == j);

    const auto d = pipeline::run_config_from_json(nlohmann::json::object());
    CHECK(d.zoo.arch == zoo::make_mlp(2, {16, 16}, 2));
    CHECK(d.align.enabled);
}

TEST_CASE("run config errors name the offending key") {
    auto j = tiny_run();
    j["sane"]["d_modle"] = 3;
    try {
        pipeline::run_config_from_json(j);
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
        CHECK(e.key() == "sane.d_modle");
    }
    j = tiny_run();
    j["zoo"]["task"]["nosie"] = 0.1;
    CHECK_THROWS_AS(pipeline::run_config_from_json(j), Error);
    j = tiny_run();
    j["probe"] = {{"targets", {"acc", "speed"}}};
    CHECK_THROWS_AS(pipeline::run_config_from_json(j), Error);
    j = tiny_run();
    j["zoo"]["arch"] = {{"rnn", 3}};
    CHECK_THROWS_AS(pipeline::run_config_from_json(j), Error);
    CHECK_THROWS_AS(pipeline::load_run_config("/nonexistent/run.json"), Error);
}

TEST_CASE("stages run end to end with provenance and reproducible reports") {
    const auto cfg = pipeline::run_config_from_json(tiny_run());
    const pipeline::Stage s{cfg, 1, {}};
    auto run = [&](const fs::path& root) {
        pipeline::run_zoo_gen(s, root / "zoo");
        pipeline::run_align(s, root / "zoo", root / "align");
        pipeline::run_pretrain(s, root / "align", root / "pretrain");
        pipeline::run_embed(s, root / "pretrain", root / "align", root / "embed");
        pipeline::run_probe(s, root / "align", root / "embed", root / "probe");
        pipeline::run_analyze(s, root / "align", root / "embed", root / "analyze");
        pipeline::run_sample(s, root / "pretrain", root / "align", root / "embed", root / "sample");
        pipeline::run_finetune(s, root / "sample", root / "align", root / "finetune");
        return pipeline::run_report(s,
                                    {root / "zoo", root / "align", root / "pretrain", root / "embed",
                                     root / "probe", root / "analyze", root / "sample", root / "finetune"},
                                    root / "report");
    };
    const auto a = scratch("run_a");
    const auto b = scratch("run_b");
    const auto ra = run(a);
    const auto rb = run(b);
    CHECK(ra == rb);
    CHECK(read_text(a / "report" / "summary.md") == read_text(b / "report" / "summary.md"));
    CHECK(read_text(a / "probe" / "probe.csv") == read_text(b / "probe" / "probe.csv"));

    const auto zoo_report = pipeline::read_json(a / "zoo" / "zoo_report.json");
    CHECK(zoo_report["models"] == 14);
    const auto pre = pipeline::read_json(a / "pretrain" / "pretrain_report.json");
    CHECK(pre["provenance"]["inputs"]["zoo"] == content_hash(a / "align" / "zoo"));
    CHECK(pre["log"].size() == 2);
    CHECK(pre.dump().find(a.string()) == std::string::npos);
    const auto probe = pipeline::read_json(a / "probe" / "probe_report.json");
    CHECK(probe["results"].size() == 9);
    CHECK(fs::exists(a / "analyze" / "spread_by_layer.svg"));
    CHECK(fs::exists(a / "sample" / "models" / "rank_000"));
    CHECK(fs::exists(a / "sample" / "models" / "rank_001"));
    CHECK_FALSE(fs::exists(a / "sample" / "models" / "rank_002"));
    CHECK(ra["stages"].contains("finetune"));

    CHECK_THROWS_AS(pipeline::run_zoo_gen(s, a / "zoo"), Error);
    try {
        pipeline::run_embed(s, a / "missing", a / "align", scratch("run_c"));
        FAIL("expected a missing-input error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NotFound);
    }
}
