#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sicl/experiment.hpp"
#include "sicl/train.hpp"

using namespace sicl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("sicl_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Tiny world and model so every subcommand runs in well under a second.
fs::path tiny_config(const fs::path& dir) {
    const json cfg{{"world",
                    {{"scale", 0.01},
                     {"backbone_domains", 4},
                     {"backbone_size", 16},
                     {"backbone_st_domains", 1},
                     {"sqa_size", 40},
                     {"eval_size", 8},
                     {"eval_pool_size", 24},
                     {"sft_size", 12}}},
                   {"model", {{"d_model", 16}, {"n_heads", 2}, {"n_layers", 1}, {"d_ff", 24}}},
                   {"lora", {{"rank", 2}, {"alpha", 8}}},
                   {"train", {{"total_steps", 6}, {"checkpoint_every", 3}, {"episodes_per_step", 1}, {"warmup_steps", 2}}},
                   {"eval", {{"max_new", 12}}},
                   {"dtype", "float64"}};
    const auto path = dir / "tiny.json";
    std::ofstream(path) << cfg.dump(2);
    return path;
}

RunConfig run_of(const std::string& sub, const fs::path& out, std::vector<std::string> sets = {},
                 std::optional<fs::path> config = std::nullopt) {
    RunConfig r;
    r.subcommand = sub;
    r.out_dir = out;
    r.config_path = config;
    r.seed = 5;
    r.overrides = std::move(sets);
    return r;
}

// One generated world shared by the tests in this file.
const fs::path& world_dir() {
    static const fs::path dir = [] {
        const auto root = scratch("world");
        std::ostringstream sink;
        cmd_gen(run_of("gen", root / "gen", {"preset=\"all\""}, tiny_config(root)), sink);
        return root / "gen";
    }();
    return dir;
}

fs::path train_run(const std::string& name, std::vector<std::string> sets) {
    const auto out = scratch("run_" + name);
    std::ostringstream sink;
    EXPECT_EQ(cmd_train(run_of("train", out, std::move(sets), world_dir() / "config.json"), sink), 0);
    return out;
}

const fs::path& base_run() {
    static const fs::path dir = train_run("base", {"preset=base"});
    return dir;
}

fs::path eval_run(const fs::path& run, std::vector<std::string> sets = {}) {
    std::ostringstream sink;
    RunConfig r = run_of("eval", run, std::move(sets));
    r.seed.reset();
    EXPECT_EQ(cmd_eval(r, sink), 0);
    return run;
}

int run_binary(const std::string& args) {
    const std::string cmd = std::string(SICL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST(Override, ParsesJsonValuesAndNestsKeys) {
    json c = json::object();
    apply_override(c, "train.total_steps=12");
    apply_override(c, "episode.randomize_k=false");
    apply_override(c, "name=plain text");
    apply_override(c, "world.alphabet=\"abcd\"");
    apply_override(c, "eval.order=[1,2]");
    EXPECT_EQ(c["train"]["total_steps"], 12);
    EXPECT_EQ(c["episode"]["randomize_k"], false);
    EXPECT_EQ(c["name"], "plain text");
    EXPECT_EQ(c["world"]["alphabet"], "abcd");
    EXPECT_EQ(c["eval"]["order"], json::array({1, 2}));
    EXPECT_THROW(apply_override(c, "no_equals_sign"), UsageError);
    EXPECT_THROW(apply_override(c, "=3"), UsageError);
}

TEST(Config, ResolutionOrder) {
    const auto dir = scratch("resolve");
    const auto path = tiny_config(dir);
    auto r = run_of("train", dir, {"train.total_steps=9", "world.seed=77"}, path);
    r.seed = 3;
    const auto c = resolve_config(r);
    EXPECT_EQ(c["train"]["total_steps"], 9);
    EXPECT_EQ(c["world"]["seed"], 3);
    EXPECT_EQ(c["world"]["backbone_domains"], 4);
    EXPECT_EQ(c["dtype"], "float64");
    const auto b = resolve_bundle(c);
    EXPECT_EQ(b.train.total_steps, 9u);
    EXPECT_EQ(b.model.d_model, 16);
    EXPECT_EQ(b.name, "sicl_at1");
}

TEST(Gen, WritesManifestsPresetsAndFrozenConfig) {
    const auto& g = world_dir();
    for (const char* f : {"config.json", "world.json", "summary.txt", "presets/sicl_at2.json", "data/eval.shift_a.jsonl",
                          "data/sft.shift_a.jsonl", "data/st.p0.jsonl", "data/backbone.d0.jsonl"})
        EXPECT_TRUE(fs::exists(g / f)) << f;
    EXPECT_EQ(read_json(g / "config.json")["data_dir"], g.string());
    EXPECT_NE(slurp(g / "summary.txt").find("eval.shift_b"), std::string::npos);
}

TEST(Gen, SameSeedGivesIdenticalFiles) {
    const auto root = scratch("regen");
    std::ostringstream sink;
    ASSERT_EQ(cmd_gen(run_of("gen", root / "again", {"preset=\"all\""}, tiny_config(root)), sink), 0);
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(world_dir() / "data")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), world_dir());
        ASSERT_TRUE(fs::exists(root / "again" / rel)) << rel;
        EXPECT_EQ(std::hash<std::string>{}(slurp(e.path())), std::hash<std::string>{}(slurp(root / "again" / rel))) << rel;
        ++compared;
    }
    EXPECT_GT(compared, 10u);
    EXPECT_EQ(slurp(world_dir() / "presets/base.json"), slurp(root / "again/presets/base.json"));
}

TEST(Gen, UnknownPresetIsUsageError) {
    const auto root = scratch("badpreset");
    std::ostringstream sink;
    EXPECT_THROW(cmd_gen(run_of("gen", root, {"preset=nope"}), sink), UsageError);
    EXPECT_EQ(run_binary("gen -o " + root.string() + " -p nope"), 1);
    EXPECT_EQ(run_binary("frobnicate"), 1);
    EXPECT_EQ(run_binary(""), 1);
}

TEST(Train, ZeroStepsWritesInitialModel) {
    const auto out = train_run("zero", {"preset=sicl_at1", "train.total_steps=0", "init=" + json(base_run() / "model.bin").dump()});
    const auto init = model_from_checkpoint<double>(read_tensor_file(base_run() / "model.bin"));
    const auto got = model_from_checkpoint<double>(read_tensor_file(out / "model.bin")).merged();
    for (const auto& [name, m] : init.params().tensors()) EXPECT_EQ(got.params().at(name), m) << name;
    EXPECT_TRUE(TrainLog::read_jsonl(out / "train_log.jsonl").steps.empty());
    EXPECT_TRUE(fs::exists(out / "config.json"));
}

TEST(Train, PresetWithInitFromNeedsInit) {
    const auto out = scratch("noinit");
    std::ostringstream sink;
    EXPECT_THROW(cmd_train(run_of("train", out, {"preset=sicl_at1"}, world_dir() / "config.json"), sink), UsageError);
}

TEST(Train, ResumeReproducesUninterruptedLog) {
    const auto full = TrainLog::read_jsonl(base_run() / "train_log.jsonl");
    ASSERT_EQ(full.steps.size(), 6u);
    ASSERT_EQ(full.checkpoints.size(), 2u);
    const auto resumed =
        train_run("resume", {"preset=base", "resume=" + json(base_run() / "checkpoints/ckpt-3.bin").dump()});
    const auto tail = TrainLog::read_jsonl(resumed / "train_log.jsonl");
    ASSERT_EQ(tail.steps.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(tail.steps[i], full.steps[i + 3]);
    EXPECT_EQ(slurp(resumed / "model.bin"), slurp(base_run() / "model.bin"));
}

TEST(Train, FrozenConfigReproducesRun) {
    const auto again = scratch("refrozen");
    std::ostringstream sink;
    RunConfig r;
    r.subcommand = "train";
    r.out_dir = again;
    r.config_path = base_run() / "config.json";
    ASSERT_EQ(cmd_train(r, sink), 0);
    EXPECT_EQ(slurp(again / "model.bin"), slurp(base_run() / "model.bin"));
    EXPECT_EQ(slurp(again / "train_log.jsonl").size(), slurp(base_run() / "train_log.jsonl").size());
}

TEST(Train, SftModeLogsZeroDemonstrations) {
    const auto out = train_run("sft", {"preset=sft_baseline", "init=" + json(base_run() / "model.bin").dump()});
    const auto log = TrainLog::read_jsonl(out / "train_log.jsonl");
    ASSERT_FALSE(log.steps.empty());
    for (const auto& e : log.steps) EXPECT_EQ(e.k, 0u);
    EXPECT_EQ(read_json(out / "config.json")["train"]["mode"], "sft");
}

TEST(Train, ModeOverrideForcesSft) {
    const auto out = train_run("mode", {"preset=sicl_at1", "train.mode=sft", "init=" + json(base_run() / "model.bin").dump()});
    for (const auto& e : TrainLog::read_jsonl(out / "train_log.jsonl").steps) EXPECT_EQ(e.k, 0u);
}

TEST(Eval, ReportHasZeroShotAndMetricColumns) {
    eval_run(base_run());
    const auto table = slurp(base_run() / "report.txt");
    EXPECT_NE(table.find("zero-shot"), std::string::npos);
    EXPECT_NE(table.find("k=4"), std::string::npos);
    EXPECT_NE(table.find("eval.shift_a WER"), std::string::npos);
    EXPECT_NE(table.find("eval.shift_a CER"), std::string::npos);
    EXPECT_NE(table.find("eval.st_unseen BLEU"), std::string::npos);
    EXPECT_NE(table.find("eval.sqa Acc"), std::string::npos);
    const auto report = MetricReport::from_json(read_json(base_run() / "report.json"));
    ASSERT_EQ(report.suites.size(), 5u);
    for (const auto& s : report.suites) {
        EXPECT_EQ(s.zero_shot.k, 0u);
        EXPECT_EQ(s.few_shot.k, 4u);
        EXPECT_EQ(s.zero_shot.n, 8u);
        EXPECT_TRUE(headline(s.zero_shot, s.kind).has_value());
    }
    EXPECT_TRUE(fs::exists(base_run() / "breakdowns.txt"));
    EXPECT_TRUE(fs::exists(base_run() / "eval_config.json"));
}

TEST(Eval, RerunGivesIdenticalReport) {
    const auto out = scratch("eval_twice");
    for (const char* f : {"config.json", "model.bin"}) fs::copy_file(base_run() / f, out / f);
    eval_run(out);
    const auto first = slurp(out / "report.json");
    eval_run(out);
    EXPECT_EQ(slurp(out / "report.json"), first);
}

TEST(Eval, MissingCheckpointIsUsageError) {
    const auto out = scratch("eval_missing");
    std::ostringstream sink;
    EXPECT_THROW(cmd_eval(run_of("eval", out, {"data_dir=" + json(world_dir()).dump()}), sink), UsageError);
}

TEST(Compare, IdenticalRunsHaveZeroDeltas) {
    eval_run(base_run());
    const auto copy = scratch("cmp_copy");
    fs::copy_file(base_run() / "report.json", copy / "report.json");
    std::ostringstream text;
    ASSERT_EQ(cmd_compare({base_run(), copy}, copy, text), 0);
    const auto j = read_json(copy / "compare.json");
    std::size_t cells = 0;
    for (const auto& row : j["rows"])
        for (const auto& c : row["cells"]) {
            ASSERT_FALSE(c["delta"].is_null());
            EXPECT_EQ(c["delta"], 0.0);
            EXPECT_EQ(c["sign"], 0);
            ++cells;
        }
    EXPECT_EQ(cells, 4u * 5u);
    EXPECT_TRUE(fs::exists(copy / "compare.txt"));
}

TEST(Compare, MissingSuiteIsMarkedAbsent) {
    eval_run(base_run());
    const auto partial = scratch("cmp_partial");
    auto j = read_json(base_run() / "report.json");
    j["model"] = "partial";
    j["suites"].erase(j["suites"].begin() + 1);
    std::ofstream(partial / "report.json") << j.dump();
    std::ostringstream text;
    EXPECT_EQ(cmd_compare({base_run(), partial}, std::nullopt, text), 0);
    EXPECT_NE(text.str().find("absent"), std::string::npos);
    EXPECT_EQ(run_binary("compare " + base_run().string() + " " + partial.string()), 0);
}

TEST(Compare, RowsFollowArgumentOrder) {
    eval_run(base_run());
    std::vector<fs::path> dirs;
    for (const char* name : {"zeta", "alpha", "mid"}) {
        const auto d = scratch(std::string("cmp_") + name);
        auto j = read_json(base_run() / "report.json");
        j["model"] = name;
        std::ofstream(d / "report.json") << j.dump();
        dirs.push_back(d);
    }
    std::ostringstream text;
    ASSERT_EQ(cmd_compare(dirs, std::nullopt, text), 0);
    const auto s = text.str();
    const auto z = s.find("zeta"), a = s.find("alpha"), m = s.find("mid");
    ASSERT_NE(z, std::string::npos);
    EXPECT_LT(z, a);
    EXPECT_LT(a, m);
}

TEST(Compare, MissingReportIsUsageError) {
    const auto empty = scratch("cmp_empty");
    std::ostringstream text;
    EXPECT_THROW(cmd_compare({empty}, std::nullopt, text), UsageError);
}

TEST(Score, GroupsAndConservation) {
    const auto dir = scratch("score");
    std::ofstream os(dir / "in.jsonl");
    os << json{{"id", "1"}, {"hyp", "a b"}, {"ref", "a b"}, {"metric", "wer"}, {"tags", {{"g", "x"}}}}.dump() << '\n'
       << json{{"id", "2"}, {"hyp", "a"}, {"ref", "a b"}, {"metric", "wer"}, {"tags", {{"g", "y"}}}}.dump() << '\n'
       << json{{"id", "3"}, {"hyp", "c"}, {"ref", "a"}, {"metric", "wer"}, {"tags", {{"g", "y"}}}}.dump() << '\n';
    os.close();
    std::ostringstream out;
    ASSERT_EQ(cmd_score(dir / "in.jsonl", {"g"}, true, out), 0);
    const auto j = json::parse(out.str());
    EXPECT_EQ(j["overall"]["n"], 3);
    EXPECT_NEAR(j["overall"]["score"].get<double>(), 0.5, 1e-12);
    EXPECT_TRUE(j["conservation_violations"].empty());
    double sum = 0;
    for (const auto& r : j["rows"]) sum += r["sum"].get<double>();
    EXPECT_NEAR(sum, j["overall"]["sum"].get<double>(), 1e-12);
    EXPECT_EQ(run_binary("score " + (dir / "in.jsonl").string() + " -g g"), 0);
}
