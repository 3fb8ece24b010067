#include <iostream>

#include <CLI11.hpp>

#include "sicl/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> set;
};

void add_common(CLI::App* app, Common& c, bool out_required) {
    app->add_option("-c,--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "world seed");
    auto* out = app->add_option("-o,--out", c.out, "output directory");
    if (out_required) out->required();
    app->add_option("--set", c.set, "dotted.key=value override (repeatable)");
}

sicl::RunConfig run_config(const std::string& sub, const Common& c) {
    sicl::RunConfig r;
    r.subcommand = sub;
    if (!c.config.empty()) r.config_path = c.config;
    r.seed = c.seed;
    r.out_dir = c.out;
    r.overrides = c.set;
    return r;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sicl: speech in-context learning experiments"};
    app.require_subcommand(1);

    Common gen_opts, train_opts, eval_opts;
    std::string gen_preset, train_preset, data_dir, eval_data;
    std::string mode, resume, init;
    std::optional<std::size_t> k, steps, threads;
    std::string eval_ckpt, eval_name;
    std::optional<std::size_t> eval_items;

    auto* gen = app.add_subcommand("gen", "generate synthbench data for one or more presets");
    add_common(gen, gen_opts, true);
    gen->add_option("-p,--preset", gen_preset, "preset name or 'all'");

    auto* train = app.add_subcommand("train", "train a preset");
    add_common(train, train_opts, true);
    train->add_option("-p,--preset", train_preset, "preset name");
    train->add_option("-d,--data", data_dir, "directory written by gen");
    train->add_option("--mode", mode, "sicl_at or sft")->check(CLI::IsMember({"sicl_at", "sft"}));
    train->add_option("--k", k, "demonstrations per episode (fixed)");
    train->add_option("--steps", steps, "optimizer steps");
    train->add_option("--resume", resume, "resume from a training checkpoint")->check(CLI::ExistingFile);
    train->add_option("--init", init, "initial model checkpoint")->check(CLI::ExistingFile);
    train->add_option("-j,--threads", threads, "worker threads");

    auto* eval = app.add_subcommand("eval", "evaluate a run zero-shot and few-shot");
    add_common(eval, eval_opts, true);
    eval->add_option("-d,--data", eval_data, "directory written by gen");
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint (default <out>/model.bin)");
    eval->add_option("--name", eval_name, "row label in reports");
    eval->add_option("--max-items", eval_items, "queries per suite");
    eval->add_option("-j,--threads", threads, "worker threads");

    std::vector<std::string> compare_dirs;
    std::string compare_out;
    auto* compare = app.add_subcommand("compare", "join run reports into a delta table");
    compare->add_option("runs", compare_dirs, "run directories; the first is the reference")->required();
    compare->add_option("-o,--out", compare_out, "write compare.txt and compare.json here");

    std::string score_in;
    std::vector<std::string> score_groups;
    bool score_json = false;
    auto* score = app.add_subcommand("score", "score a JSON Lines file of hypotheses");
    score->add_option("input", score_in, "records")->required()->check(CLI::ExistingFile);
    score->add_option("-g,--group", score_groups, "tag to group by (repeatable)");
    score->add_flag("--json", score_json, "JSON output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            auto r = run_config("gen", gen_opts);
            if (!gen_preset.empty()) r.overrides.push_back("preset=" + gen_preset);
            return sicl::cmd_gen(r, std::cout);
        }
        if (*train) {
            auto r = run_config("train", train_opts);
            if (!train_preset.empty()) r.overrides.push_back("preset=" + train_preset);
            if (!data_dir.empty()) r.overrides.push_back("data_dir=" + nlohmann::json(data_dir).dump());
            if (!mode.empty()) r.overrides.push_back("train.mode=" + mode);
            if (k) {
                r.overrides.push_back("episode.k=" + std::to_string(*k));
                r.overrides.push_back("episode.randomize_k=false");
            }
            if (steps) r.overrides.push_back("train.total_steps=" + std::to_string(*steps));
            if (!resume.empty()) r.overrides.push_back("resume=" + nlohmann::json(resume).dump());
            if (!init.empty()) r.overrides.push_back("init=" + nlohmann::json(init).dump());
            if (threads) r.overrides.push_back("threads=" + std::to_string(*threads));
            return sicl::cmd_train(r, std::cout);
        }
        if (*eval) {
            auto r = run_config("eval", eval_opts);
            if (!eval_data.empty()) r.overrides.push_back("data_dir=" + nlohmann::json(eval_data).dump());
            if (!eval_ckpt.empty()) r.overrides.push_back("checkpoint=" + nlohmann::json(eval_ckpt).dump());
            if (!eval_name.empty()) r.overrides.push_back("name=" + nlohmann::json(eval_name).dump());
            if (eval_items) r.overrides.push_back("eval.max_items=" + std::to_string(*eval_items));
            if (threads) r.overrides.push_back("threads=" + std::to_string(*threads));
            return sicl::cmd_eval(r, std::cout);
        }
        if (*compare) {
            std::vector<fs::path> dirs(compare_dirs.begin(), compare_dirs.end());
            std::optional<fs::path> out;
            if (!compare_out.empty()) out = compare_out;
            return sicl::cmd_compare(dirs, out, std::cout);
        }
        if (*score) return sicl::cmd_score(score_in, score_groups, score_json, std::cout);
    } catch (const sicl::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const sicl::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const sicl::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
