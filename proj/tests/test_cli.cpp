// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <fstream>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "knots/cli.hpp"
#include "knots/error.hpp"
#include "knots/knots.hpp"

using namespace knots;
using nlohmann::json;

namespace {

struct Outcome {
    int code = 0;
    std::string out;
    std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Outcome o;
    o.code = cli::run(args, out, err);
    o.out = out.str();
    o.err = err.str();
    return o;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

json read_json(const std::filesystem::path& p) { return json::parse(slurp(p)); }

std::string error_kind(const Outcome& o) {
    REQUIRE(o.code != 0);
    return json::parse(o.err).at("error").get<std::string>();
}

}  // namespace

TEST_CASE("merging one adapter with TA at alpha 1 equals apply_update bit for bit") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    const auto r = run_cli({"--config", (dir / "merge_ta.json").string(), "--quiet", "--set", "adapters=[\"task0.safetensors\"]",
                            "--set", "merge.alpha=1.0", "merge"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.empty());
    const TensorMap out = load_tensor_map(dir / "out/merged_ta.safetensors");
    const TensorMap base = load_tensor_map(dir / "base.safetensors");
    const TaskUpdate u = materialize_update(load_adapter(dir / "task0.safetensors", KeyConvention::lora()));
    const TensorMap expected = apply_update(base, u);
    REQUIRE(out.entries.size() == expected.entries.size());
    for (const auto& [key, t] : expected.entries) {
        CHECK(out.at(key).shape == t.shape);
        CHECK(std::memcmp(out.at(key).data.data(), t.data.data(), t.data.size() * 4) == 0);
    }
    CHECK(out.metadata.at("model") == "synthetic");
    CHECK(json::parse(out.metadata.at("merge_config")).at("method") == "TA");

    const json report = read_json(dir / "out/merged_ta.report.json");
    CHECK(report.at("command") == "merge");
    CHECK(report.at("merge").at("alpha") == 1.0);
    CHECK(report.at("sources") == json::array({"task0"}));
    CHECK(report.at("inputs").size() == 2);
    CHECK(report.at("inputs")[0].at("sha256").get<std::string>().size() == 64);
}

TEST_CASE("KnOTS-TIES merge records its rank and the gap to plain TIES") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    const auto r = run_cli({"--config", (dir / "merge_knots.json").string(), "merge"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("KNOTS_TIES") != std::string::npos);
    const json report = read_json(dir / "out/merged_knots.json");
    CHECK(report.at("merge").at("method") == "KNOTS_TIES");
    CHECK(report.at("merge").at("seeds") == json::array({420}));
    for (const auto& [key, layer] : report.at("layers").items()) {
        CHECK(layer.at("knots_rank").get<int>() == 6);
        CHECK(layer.at("frobenius_norm").get<double>() > 0);
    }
    CHECK(report.at("baseline").at("method") == "TIES");
    for (const auto& [key, gap] : report.at("baseline").at("frobenius_gap").items()) CHECK(gap.get<double>() > 0);
}

TEST_CASE("every command is byte-reproducible") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    const std::vector<std::pair<std::string, std::vector<std::string>>> runs = {
        {"merge_ta.json", {"out/merged_ta.safetensors", "out/merged_ta.report.json"}},
        {"merge_knots.json", {"out/merged_knots.safetensors", "out/merged_knots.json"}},
        {"cka.json", {"out/cka.json"}},
        {"sweep.json", {"out/sweep.json", "out/sweep_best.safetensors"}},
        {"eval_task.json", {"out/eval_task.json"}},
        {"eval_joint.json", {"out/eval_joint.json"}},
    };
    const std::map<std::string, std::string> command = {{"merge_ta.json", "merge"}, {"merge_knots.json", "merge"},
                                                        {"cka.json", "cka"},        {"sweep.json", "sweep"},
                                                        {"eval_task.json", "eval"}, {"eval_joint.json", "eval"}};
    for (const auto& [cfg, outputs] : runs) {
        std::vector<std::string> first;
        for (int pass = 0; pass < 2; ++pass) {
            const auto r = run_cli({"--config", (dir / cfg).string(), "--threads", pass ? "3" : "1", command.at(cfg)});
            REQUIRE_MESSAGE(r.code == 0, r.err);
            std::vector<std::string> bytes;
            for (const auto& o : outputs) bytes.push_back(slurp(dir / o));
            bytes.push_back(r.out);
            if (pass == 0) first = bytes;
            else CHECK_MESSAGE(bytes == first, cfg);
        }
    }
}

TEST_CASE("cka command") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    SUBCASE("raw and aligned reports") {
        const auto r = run_cli({"--config", (dir / "cka.json").string(), "--csv", "cka"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const json doc = read_json(dir / "out/cka.json");
        REQUIRE(doc.at("reports").size() == 2);
        CHECK(doc.at("reports")[0].at("mode") == "raw_update");
        CHECK(doc.at("reports")[1].at("mode") == "knots_aligned");
        CHECK(doc.at("reports")[0].at("probe").at("kind") == "file");
        CHECK(doc.at("reports")[0].at("probe").at("path") == "probe.safetensors");
        auto mean_off = [](const json& summary) {
            double s = 0;
            int n = 0;
            for (std::size_t i = 0; i < summary.size(); ++i)
                for (std::size_t j = 0; j < summary.size(); ++j)
                    if (i != j) {
                        s += summary[i][j].get<double>();
                        ++n;
                    }
            return s / n;
        };
        CHECK(mean_off(doc.at("reports")[1].at("summary")) >= mean_off(doc.at("reports")[0].at("summary")));
        CHECK(std::filesystem::exists(dir / "out/cka.raw_update.csv"));
        CHECK(std::filesystem::exists(dir / "out/cka.knots_aligned.csv"));
    }
    SUBCASE("identical adapters give a matrix of ones") {
        const auto r = run_cli({"--config", (dir / "cka.json").string(), "--set",
                                "adapters=[\"task1.safetensors\",\"task1.safetensors\"]", "--set", "probe.kind=gaussian",
                                "--set", "probe.m=64", "--seed", "5", "--quiet", "cka"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const json doc = read_json(dir / "out/cka.json");
        for (const auto& report : doc.at("reports")) {
            CHECK(report.at("probe").at("seed") == 5);
            for (const auto& row : report.at("summary"))
                for (const auto& v : row) CHECK(std::abs(v.get<double>() - 1.0) <= 1e-6);
        }
    }
    SUBCASE("missing probe section") {
        json cfg = read_json(dir / "cka.json");
        cfg.erase("probe");
        write_file_atomic(dir / "noprobe.json", cfg.dump());
        const auto r = run_cli({"--config", (dir / "noprobe.json").string(), "cka"});
        CHECK(error_kind(r) == "MissingProbe");
        CHECK_FALSE(std::filesystem::exists(dir / "out/cka.json"));
    }
}

TEST_CASE("sweep command writes the default grids and the best checkpoint") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    const auto r = run_cli({"--config", (dir / "sweep.json").string(), "sweep", "--exhaustive"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json doc = read_json(dir / "out/sweep.json");
    const json& grids = doc.at("result").at("grids");
    CHECK(grids.at("alpha") == json::array({0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}));
    CHECK(grids.at("topk_percent") == json::array({10, 20, 30, 40, 50, 60, 70, 80, 90, 100}));
    CHECK(grids.at("dare_p") == json::array({0.99, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1}));
    CHECK(grids.at("seeds") == json::array({420, 421, 422, 423, 424}));
    CHECK(doc.at("result").at("best").at("alpha") == 0.5);
    CHECK(doc.at("result").at("exhaustive").at("best").at("alpha") == 0.5);
    CHECK(doc.at("objective") == "normalized_accuracy");
    const TensorMap best = load_tensor_map(dir / "out/sweep_best.safetensors");
    CHECK(best.at("w").data[2] == 1.0f);
}

TEST_CASE("eval command") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    SUBCASE("per task, merged equals finetuned") {
        const auto r = run_cli({"--config", (dir / "eval_task.json").string(), "--set", "adapters=[\"sym_left.safetensors\"]",
                                "--set", "eval.tasks=[\"task_left.safetensors\"]", "--set", "merge.alpha=1", "--csv", "eval"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const json doc = read_json(dir / "out/eval_task.json");
        CHECK(doc.at("rows")[0].at("normalized_accuracy") == 1.0);
        CHECK(doc.at("mean_normalized_accuracy") == 1.0);
        CHECK(slurp(dir / "out/eval_task.csv").find("left,1.000000,1.000000,1.000000") != std::string::npos);
    }
    SUBCASE("per task at the symmetric optimum") {
        const auto r = run_cli({"--config", (dir / "eval_task.json").string(), "eval"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const json doc = read_json(dir / "out/eval_task.json");
        CHECK(doc.at("rows").size() == 2);
        CHECK(doc.at("mean_normalized_accuracy") == 1.0);
    }
    SUBCASE("joint rows are monotone and bounded by per-task accuracy") {
        const auto r = run_cli({"--config", (dir / "eval_joint.json").string(), "eval"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const json doc = read_json(dir / "out/eval_joint.json");
        CHECK(doc.at("union_size") == 8);
        const json& rows = doc.at("rows");
        REQUIRE(rows.size() == 3);
        CHECK(rows[0].at("k") == 1);
        CHECK(rows[0].at("hits").get<double>() <= rows[1].at("hits").get<double>());
        CHECK(rows[1].at("hits").get<double>() <= rows[2].at("hits").get<double>());
        for (const auto& t : doc.at("per_task"))
            CHECK(t.at("joint_hits_at_1").get<double>() <= t.at("accuracy").get<double>());
    }
}

TEST_CASE("inspect command") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    const auto r = run_cli({"inspect", (dir / "base.safetensors").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("blocks.0.attn.q_proj") != std::string::npos);
    CHECK(r.out.find("[16, 16]") != std::string::npos);
    CHECK(r.out.find("head.bias") != std::string::npos);
    CHECK(r.out.find("metadata model = synthetic") != std::string::npos);

    save_tensor_map(TensorMap{}, dir / "empty.safetensors");
    const auto empty = run_cli({"inspect", (dir / "empty.safetensors").string()});
    CHECK(empty.code == 0);
    CHECK(std::count(empty.out.begin(), empty.out.end(), '\n') == 1);

    std::string bytes = slurp(dir / "base.safetensors");
    bytes.resize(bytes.size() - 10);
    write_file_atomic(dir / "cut.safetensors", bytes);
    CHECK(error_kind(run_cli({"inspect", (dir / "cut.safetensors").string()})) == "CorruptFile");
}

TEST_CASE("configuration errors") {
    fixture::TempDir dir("cli");
    fixture::write_cli_workspace(dir.path());
    const std::string cfg = (dir / "merge_ta.json").string();
    SUBCASE("invalid probability leaves no outputs") {
        const auto r = run_cli({"--config", cfg, "--set", "merge.method=DARE_TIES", "--set", "merge.dare_p=1.0", "merge"});
        CHECK(error_kind(r) == "InvalidProbability");
        CHECK_FALSE(std::filesystem::exists(dir / "out/merged_ta.safetensors"));
        CHECK_FALSE(std::filesystem::exists(dir / "out/merged_ta.report.json"));
    }
    SUBCASE("seed flag conflicts") {
        CHECK(error_kind(run_cli({"--config", cfg, "--seed", "3", "--set", "seed=4", "merge"})) == "InvalidConfig");
        CHECK(error_kind(run_cli({"--config", (dir / "cka.json").string(), "--set", "probe.seed=1", "--seed", "2", "cka"})) ==
              "InvalidConfig");
    }
    SUBCASE("unknown method") {
        CHECK(error_kind(run_cli({"--config", cfg, "--set", "merge.method=AVERAGE", "merge"})) == "InvalidConfig");
    }
    SUBCASE("missing config") {
        CHECK(error_kind(run_cli({"merge"})) == "InvalidConfig");
    }
    SUBCASE("corrupt adapter") {
        write_file_atomic(dir / "task0.safetensors", std::string("garbage"));
        CHECK(error_kind(run_cli({"--config", cfg, "merge"})) == "ParseError");
    }
    SUBCASE("bad thread variable") {
        setenv("KNOTS_THREADS", "many", 1);
        CHECK(error_kind(run_cli({"--config", cfg, "merge"})) == "InvalidConfig");
        unsetenv("KNOTS_THREADS");
    }
}

TEST_CASE("overrides edit nested config values") {
    cli::RunConfig cfg;
    cli::apply_override(cfg, "merge.alpha=0.25");
    cli::apply_override(cfg, "merge.method=TIES");
    cli::apply_override(cfg, "eval.k_list=[1,2]");
    CHECK(cfg.doc.at("merge").at("alpha") == 0.25);
    CHECK(cfg.doc.at("merge").at("method") == "TIES");
    CHECK(cfg.doc.at("eval").at("k_list") == json::array({1, 2}));
    CHECK(cfg.find("merge.alpha") != nullptr);
    CHECK(cfg.find("merge.beta") == nullptr);
    CHECK_THROWS_AS(cli::apply_override(cfg, "novalue"), Error);
    CHECK_THROWS_AS(cli::apply_flag(cfg, "merge.alpha", 0.5, "--alpha"), Error);
    CHECK_NOTHROW(cli::apply_flag(cfg, "merge.alpha", 0.25, "--alpha"));
}
