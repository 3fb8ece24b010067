#include "sicl/experiment.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "sicl/common.hpp"
#include "sicl/retrieval.hpp"
#include "sicl/train.hpp"

namespace sicl {

namespace fs = std::filesystem;
using nlohmann::json;

// ─── Options ────────────────────────────────────────────────────────────────

void to_json(json& j, const EvalOptions& o) {
    j = {{"k", o.k},
         {"max_new", o.max_new},
         {"embed_dim", o.embed_dim},
         {"max_seq_len", o.max_seq_len},
         {"demo_order", to_string(o.demo_order)},
         {"seed", o.seed},
         {"char_bleu", o.char_bleu},
         {"max_items", o.max_items},
         {"threads", o.threads}};
}

void from_json(const json& j, EvalOptions& o) {
    EvalOptions d;
    o.k = j.value("k", d.k);
    o.max_new = j.value("max_new", d.max_new);
    o.embed_dim = j.value("embed_dim", d.embed_dim);
    o.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    o.demo_order = demo_order_from_string(j.value("demo_order", to_string(d.demo_order)));
    o.seed = j.value("seed", d.seed);
    o.char_bleu = j.value("char_bleu", d.char_bleu);
    o.max_items = j.value("max_items", d.max_items);
    o.threads = j.value("threads", d.threads);
}

// ─── Metrics per kind ───────────────────────────────────────────────────────

std::string headline_metric(TaskKind kind) {
    switch (kind) {
        case TaskKind::asr: return "WER";
        case TaskKind::st: return "BLEU";
        case TaskKind::sqa: return "Acc";
    }
    return "WER";
}

bool lower_is_better(TaskKind kind) { return kind == TaskKind::asr; }

std::optional<double> headline(const ModeResult& r, TaskKind kind) {
    switch (kind) {
        case TaskKind::asr: return r.wer;
        case TaskKind::st: return r.bleu;
        case TaskKind::sqa: return r.accuracy;
    }
    return std::nullopt;
}

namespace {

const std::vector<std::string> kBreakdownGroups{"words", "count"};

ModeResult score_mode(const TaskDataset& suite, std::span<const Sample> queries, const std::vector<std::string>& hyps,
                      std::size_t k, const EvalOptions& opt) {
    ModeResult r;
    r.k = k;
    r.n = queries.size();
    BleuStats stats;
    std::size_t correct = 0;
    double wer_sum = 0, cer_sum = 0;
    std::size_t scored = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const Sample& q = queries[i];
        ScoredItem item{q.id, suite.task.str(), hyps[i], q.target, 0.0, q.tags};
        switch (suite.kind) {
            case TaskKind::asr: {
                const auto w = capped_utterance_wer(hyps[i], q.target);
                const auto c = cer(hyps[i], q.target);
                if (!w) continue;
                item.score = *w;
                wer_sum += *w;
                cer_sum += c.value_or(0.0);
                ++scored;
                break;
            }
            case TaskKind::st: {
                const auto h = bleu_tokens(hyps[i], opt.char_bleu);
                const std::vector<std::vector<std::string>> refs{bleu_tokens(q.target, opt.char_bleu)};
                stats.add(h, refs, 4);
                item.score = bleu(h, refs, BleuOptions{4, true});
                break;
            }
            case TaskKind::sqa: {
                const auto got = extract_choice(hyps[i], q.choices.size());
                item.score = got && *got == q.target ? 1.0 : 0.0;
                correct += item.score > 0;
                break;
            }
        }
        r.items.push_back(std::move(item));
    }
    switch (suite.kind) {
        case TaskKind::asr:
            if (scored) {
                r.wer = wer_sum / static_cast<double>(scored);
                r.cer = cer_sum / static_cast<double>(scored);
            }
            break;
        case TaskKind::st: r.bleu = stats.score(BleuOptions{}); break;
        case TaskKind::sqa: r.accuracy = r.n ? static_cast<double>(correct) / static_cast<double>(r.n) : 0.0; break;
    }
    r.breakdown = breakdown(r.items, kBreakdownGroups);
    return r;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < n; i += threads) f(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

template <typename T>
SuiteReport evaluate_suite(const Transformer<T>& model, const TaskDataset& suite, const EvalOptions& opt,
                           const TemplateSet& templates) {
    SuiteReport rep;
    rep.suite = suite.task.str();
    rep.kind = suite.kind;
    std::span<const Sample> queries = suite.query_set;
    if (opt.max_items && queries.size() > opt.max_items) queries = queries.first(opt.max_items);
    const auto& tmpl = templates.get(suite.kind);
    AssembleOptions aopt;
    aopt.max_seq_len = std::min<std::size_t>(opt.max_seq_len, static_cast<std::size_t>(model.config().max_seq_len));
    aopt.reserve = opt.max_new;

    auto run = [&](std::span<const Demo> demos, const Sample& q) {
        const auto prompt = make_eval_prompt(demos, q, tmpl, aopt);
        const auto g = model.generate(input_of(prompt.seq), opt.max_new);
        return decode_bytes(g.tokens);
    };

    std::vector<std::string> zero(queries.size()), few(queries.size());
    parallel_for(queries.size(), opt.threads, [&](std::size_t i) { zero[i] = run({}, queries[i]); });

    if (opt.k > 0) {
        const auto index = build_pool_index(suite, opt.embed_dim);
        parallel_for(queries.size(), opt.threads, [&](std::size_t i) {
            const Sample& q = queries[i];
            const auto key = fallback_embed(zero[i].empty() ? std::string(" ") : zero[i], opt.embed_dim);
            Rng rng(derive_seed(opt.seed, q.id));
            auto demos = order_demos(retrieve_demos(suite, index, key, opt.k, q.id), opt.demo_order, rng);
            few[i] = run(demos, q);
        });
    }
    rep.zero_shot = score_mode(suite, queries, zero, 0, opt);
    if (opt.k > 0) rep.few_shot = score_mode(suite, queries, few, opt.k, opt);
    return rep;
}

template <typename T>
MetricReport evaluate(const Transformer<T>& model, const std::string& name,
                      const std::vector<std::shared_ptr<const TaskDataset>>& suites, const EvalOptions& opt) {
    MetricReport report;
    report.model = name;
    const Transformer<T> merged = model.merged();
    for (const auto& s : suites) report.suites.push_back(evaluate_suite(merged, *s, opt));
    return report;
}

template SuiteReport evaluate_suite(const Transformer<double>&, const TaskDataset&, const EvalOptions&,
                                    const TemplateSet&);
template SuiteReport evaluate_suite(const Transformer<float>&, const TaskDataset&, const EvalOptions&,
                                    const TemplateSet&);
template MetricReport evaluate(const Transformer<double>&, const std::string&,
                               const std::vector<std::shared_ptr<const TaskDataset>>&, const EvalOptions&);
template MetricReport evaluate(const Transformer<float>&, const std::string&,
                               const std::vector<std::shared_ptr<const TaskDataset>>&, const EvalOptions&);

// ─── Reports ────────────────────────────────────────────────────────────────

const SuiteReport* MetricReport::find(const std::string& suite) const {
    for (const auto& s : suites)
        if (s.suite == suite) return &s;
    return nullptr;
}

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

json mode_json(const ModeResult& r, bool with_items) {
    json j{{"k", r.k},         {"n", r.n},         {"wer_capped", opt_json(r.wer)}, {"cer", opt_json(r.cer)},
           {"bleu", opt_json(r.bleu)}, {"accuracy", opt_json(r.accuracy)}, {"breakdown", r.breakdown.to_json()}};
    if (with_items) {
        json items = json::array();
        for (const auto& it : r.items)
            items.push_back({{"id", it.id}, {"hyp", it.hypothesis}, {"ref", it.reference}, {"score", it.score}, {"tags", it.tags}});
        j["items"] = items;
    }
    return j;
}

ModeResult mode_from(const json& j) {
    ModeResult r;
    r.k = j.at("k").get<std::size_t>();
    r.n = j.at("n").get<std::size_t>();
    r.wer = opt_from(j, "wer_capped");
    r.cer = opt_from(j, "cer");
    r.bleu = opt_from(j, "bleu");
    r.accuracy = opt_from(j, "accuracy");
    if (j.contains("items")) {
        for (const auto& it : j.at("items")) {
            ScoredItem s;
            s.id = it.at("id").get<std::string>();
            s.hypothesis = it.at("hyp").get<std::string>();
            s.reference = it.at("ref").get<std::string>();
            s.score = it.at("score").get<double>();
            s.tags = it.at("tags").get<std::map<std::string, std::string>>();
            r.items.push_back(std::move(s));
        }
        r.breakdown = breakdown(r.items, kBreakdownGroups);
    }
    return r;
}

std::string fmt_pct(const std::optional<double>& v) {
    if (!v) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * *v;
    return os.str();
}

}  // namespace

json MetricReport::to_json(bool with_items) const {
    json suites_j = json::array();
    for (const auto& s : suites) {
        suites_j.push_back({{"suite", s.suite},
                            {"kind", sicl::to_string(s.kind)},
                            {"metric", headline_metric(s.kind)},
                            {"zero_shot", mode_json(s.zero_shot, with_items)},
                            {"few_shot", mode_json(s.few_shot, with_items)}});
    }
    return {{"model", model}, {"suites", suites_j}};
}

MetricReport MetricReport::from_json(const json& j) {
    MetricReport r;
    r.model = j.at("model").get<std::string>();
    for (const auto& s : j.at("suites")) {
        SuiteReport sr;
        sr.suite = s.at("suite").get<std::string>();
        sr.kind = task_kind_from_string(s.at("kind").get<std::string>());
        sr.zero_shot = mode_from(s.at("zero_shot"));
        sr.few_shot = mode_from(s.at("few_shot"));
        r.suites.push_back(std::move(sr));
    }
    return r;
}

std::string MetricReport::to_table() const {
    std::vector<std::string> header{"Model", "Fewshot"};
    for (const auto& s : suites) {
        if (s.kind == TaskKind::asr) {
            header.push_back(s.suite + " WER");
            header.push_back(s.suite + " CER");
        } else {
            header.push_back(s.suite + " " + headline_metric(s.kind));
        }
    }
    std::vector<std::vector<std::string>> rows{header};
    for (int few = 0; few < 2; ++few) {
        std::vector<std::string> row{few ? model + " +SICL" : model, few ? "k=" + std::to_string(suites.empty() ? 0 : suites[0].few_shot.k) : "zero-shot"};
        for (const auto& s : suites) {
            const auto& r = few ? s.few_shot : s.zero_shot;
            if (s.kind == TaskKind::asr) {
                row.push_back(fmt_pct(r.wer));
                row.push_back(fmt_pct(r.cer));
            } else {
                row.push_back(fmt_pct(headline(r, s.kind)));
            }
        }
        rows.push_back(row);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    std::ostringstream os;
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (c < 2)
                os << std::left << std::setw(static_cast<int>(width[c])) << r[c];
            else
                os << std::right << std::setw(static_cast<int>(width[c])) << r[c];
            os << (c + 1 < r.size() ? "  " : "\n");
        }
    }
    return os.str();
}

// ─── Comparison ─────────────────────────────────────────────────────────────

Comparison compare_reports(const std::vector<std::pair<std::string, MetricReport>>& runs) {
    Comparison cmp;
    for (const auto& [_, rep] : runs) {
        for (const auto& s : rep.suites) {
            if (std::find(cmp.suites.begin(), cmp.suites.end(), s.suite) != cmp.suites.end()) continue;
            cmp.suites.push_back(s.suite);
            cmp.metrics.push_back(headline_metric(s.kind));
            cmp.lower_better.push_back(lower_is_better(s.kind));
        }
    }
    for (const auto& mode : {"zero-shot", "few-shot"}) {
        const bool few = std::string(mode) == "few-shot";
        for (std::size_t r = 0; r < runs.size(); ++r) {
            ComparisonRow row{runs[r].first, mode, {}};
            for (std::size_t c = 0; c < cmp.suites.size(); ++c) {
                ComparisonCell cell;
                const auto value_of = [&](const MetricReport& rep) -> std::optional<double> {
                    const auto* s = rep.find(cmp.suites[c]);
                    if (!s) return std::nullopt;
                    return headline(few ? s->few_shot : s->zero_shot, s->kind);
                };
                cell.value = value_of(runs[r].second);
                const auto ref = value_of(runs[0].second);
                if (cell.value && ref) {
                    cell.delta = *cell.value - *ref;
                    const double better = cmp.lower_better[c] ? -*cell.delta : *cell.delta;
                    cell.sign = better > 0 ? 1 : better < 0 ? -1 : 0;
                }
                row.cells.push_back(cell);
            }
            cmp.rows.push_back(std::move(row));
        }
    }
    return cmp;
}

const ComparisonRow* Comparison::row(const std::string& run, const std::string& mode) const {
    for (const auto& r : rows)
        if (r.run == run && r.mode == mode) return &r;
    return nullptr;
}

std::string Comparison::to_text() const {
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> header{"Run", "Fewshot"};
    for (std::size_t c = 0; c < suites.size(); ++c)
        header.push_back(suites[c] + " " + metrics[c] + (lower_better[c] ? "(v)" : "(^)"));
    table.push_back(header);
    for (const auto& r : rows) {
        std::vector<std::string> line{r.run, r.mode};
        for (const auto& cell : r.cells) {
            if (!cell.value) {
                line.push_back("absent");
                continue;
            }
            std::ostringstream os;
            os << std::fixed << std::setprecision(2) << 100.0 * *cell.value;
            if (cell.delta) {
                os << " (" << (cell.delta.value() >= 0 ? "+" : "") << std::setprecision(2) << 100.0 * *cell.delta << ' '
                   << (cell.sign > 0 ? "better" : cell.sign < 0 ? "worse" : "same") << ')';
            }
            line.push_back(os.str());
        }
        table.push_back(line);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& r : table)
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    std::ostringstream os;
    for (const auto& r : table) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            os << std::left << std::setw(static_cast<int>(width[c])) << r[c] << (c + 1 < r.size() ? "  " : "\n");
        }
    }
    os << "deltas against " << (rows.empty() ? std::string("-") : rows.front().run)
       << " in the same mode; (v) lower is better, (^) higher is better\n";
    return os.str();
}

json Comparison::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
        json cells = json::object();
        for (std::size_t c = 0; c < suites.size(); ++c) {
            const auto& cell = r.cells[c];
            cells[suites[c]] = cell.value ? json{{"value", *cell.value}, {"delta", opt_json(cell.delta)}, {"sign", cell.sign}}
                                          : json{{"absent", true}};
        }
        rows_j.push_back({{"run", r.run}, {"mode", r.mode}, {"cells", cells}});
    }
    return {{"suites", suites}, {"metrics", metrics}, {"lower_is_better", lower_better}, {"rows", rows_j}};
}

// ─── Config resolution ──────────────────────────────────────────────────────

void apply_override(json& config, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw UsageError("override must look like key.path=value: " + std::string(assignment));
    const std::string key(assignment.substr(0, eq));
    const std::string raw(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw UsageError("empty key segment in override " + key);
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

json resolve_config(const RunConfig& run) {
    json config{{"world", WorldConfig{}},
                {"data_dir", nullptr},
                {"preset", "sicl_at1"},
                {"dtype", "float32"},
                {"init", nullptr},
                {"resume", nullptr},
                {"checkpoint", nullptr},
                {"name", nullptr},
                {"threads", 1},
                {"eval", EvalOptions{}}};
    if (run.config_path) {
        std::ifstream is(*run.config_path);
        if (!is) throw UsageError("cannot open config " + run.config_path->string());
        json file;
        try {
            file = json::parse(is);
        } catch (const json::parse_error& e) {
            throw ParseError("config " + run.config_path->string() + ": " + e.what());
        }
        if (!file.is_object()) throw ParseError("config " + run.config_path->string() + " is not a JSON object");
        config.merge_patch(file);
    }
    for (const auto& o : run.overrides) apply_override(config, o);
    if (run.seed) config["world"]["seed"] = *run.seed;
    // Round-trip the world section so it carries every field.
    config["world"] = config["world"].get<WorldConfig>();
    config["eval"] = config["eval"].get<EvalOptions>();
    return config;
}

ExperimentBundle resolve_bundle(const json& config) {
    const auto world = config.at("world").get<WorldConfig>();
    const std::string preset = config.at("preset").get<std::string>();
    if (std::find(preset_names().begin(), preset_names().end(), preset) == preset_names().end())
        throw UsageError("unknown preset '" + preset + "'");
    json b = to_json(preset_experiment(preset, world));
    for (const char* section : {"episode", "train", "lora", "model"}) {
        if (config.contains(section) && config.at(section).is_object()) b[section].merge_patch(config.at(section));
    }
    for (const char* key : {"mixture", "eval_suites", "full_parameters", "init_from"}) {
        if (config.contains(key)) b[key] = config.at(key);
    }
    auto bundle = bundle_from_json(b);
    const auto threads = config.value("threads", std::size_t{1});
    bundle.train.threads = std::max<std::size_t>(1, threads);
    bundle.train.validate();
    bundle.model.validate();
    return bundle;
}

namespace {

fs::path data_root(const json& config) {
    if (!config.contains("data_dir") || config.at("data_dir").is_null())
        throw UsageError("config needs data_dir (the output directory of `gen`)");
    return fs::path(config.at("data_dir").get<std::string>());
}

std::shared_ptr<const TaskDataset> load_task(const fs::path& root, const TaskId& task) {
    const auto path = root / "data" / (task.str() + ".jsonl");
    if (!fs::exists(path)) throw UsageError("dataset " + path.string() + " not found; run `gen` first");
    return std::make_shared<const TaskDataset>(load_manifest(path));
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    os << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    os << text;
}

json frozen_config(json config, const ExperimentBundle& b) {
    const json bj = to_json(b);
    for (const char* key : {"episode", "train", "lora", "model", "mixture", "eval_suites", "full_parameters", "init_from"})
        config[key] = bj.at(key);
    return config;
}

std::vector<TaskId> tasks_for(const ExperimentBundle& b, const WorldConfig& world) {
    std::vector<TaskId> tasks;
    for (const auto& e : b.mixture.entries) tasks.push_back(e.task);
    for (const auto& s : b.eval_suites) tasks.push_back(s);
    if (b.init_from) {
        for (const auto& t : tasks_for(preset_experiment(*b.init_from, world), world)) tasks.push_back(t);
    }
    return tasks;
}

}  // namespace

// ─── gen ────────────────────────────────────────────────────────────────────

int cmd_gen(const RunConfig& run, std::ostream& out) {
    auto config = resolve_config(run);
    const auto world_cfg = config.at("world").get<WorldConfig>();
    std::vector<std::string> presets;
    const auto& p = config.at("preset");
    if (p.is_array()) {
        presets = p.get<std::vector<std::string>>();
    } else if (p.get<std::string>() == "all") {
        presets = preset_names();
    } else {
        presets = {p.get<std::string>()};
    }
    for (const auto& name : presets)
        if (std::find(preset_names().begin(), preset_names().end(), name) == preset_names().end())
            throw UsageError("unknown preset '" + name + "'");
    if (run.out_dir.empty()) throw UsageError("gen needs --out");

    std::set<TaskId> needed;
    std::vector<ExperimentBundle> bundles;
    for (const auto& name : presets) {
        auto b = preset_experiment(name, world_cfg);
        for (const auto& t : tasks_for(b, world_cfg)) needed.insert(t);
        bundles.push_back(std::move(b));
    }

    const World world = build_world(world_cfg);
    fs::create_directories(run.out_dir / "data");
    fs::create_directories(run.out_dir / "presets");
    config["data_dir"] = run.out_dir.string();
    write_json(run.out_dir / "config.json", config);
    write_json(run.out_dir / "world.json", world_cfg);
    for (const auto& b : bundles) write_json(run.out_dir / "presets" / (b.name + ".json"), to_json(b));

    std::ostringstream table;
    table << std::left << std::setw(18) << "task" << std::setw(6) << "kind" << std::right << std::setw(8) << "query"
          << std::setw(8) << "pool" << std::setw(8) << "total" << "  pools\n";
    for (const auto& task : needed) {
        const auto& ds = *world.datasets.at(task);
        save_manifest(ds, run.out_dir / "data" / (task.str() + ".jsonl"));
        table << std::left << std::setw(18) << task.str() << std::setw(6) << to_string(ds.kind) << std::right
              << std::setw(8) << ds.query_set.size() << std::setw(8) << ds.demo_pool.size() << std::setw(8) << ds.size()
              << "  " << (ds.leave_one_out ? "leave-one-out" : "disjoint") << '\n';
    }
    write_text(run.out_dir / "summary.txt", table.str());
    out << table.str();
    return 0;
}

// ─── train ──────────────────────────────────────────────────────────────────

namespace {

template <typename T>
Transformer<T> initial_model(const json& config, const ExperimentBundle& b) {
    std::optional<Transformer<T>> model;
    if (config.contains("init") && !config.at("init").is_null()) {
        const fs::path init = config.at("init").get<std::string>();
        model = model_from_checkpoint<T>(read_tensor_file(init)).merged();
        for (const auto& name : model->params().names()) model->params().set_trainable(name, false);
    } else if (b.init_from) {
        throw UsageError("preset '" + b.name + "' starts from '" + *b.init_from + "'; pass --init <model.bin>");
    } else {
        model.emplace(b.model);
    }
    if (b.full_parameters)
        model->set_full_training();
    else
        model->attach_lora(b.lora);
    return std::move(*model);
}

template <typename T>
int train_impl(const json& config, const ExperimentBundle& b, const fs::path& out_dir, std::ostream& out) {
    const auto root = data_root(config);
    std::map<TaskId, std::shared_ptr<const TaskDataset>> datasets;
    for (const auto& e : b.mixture.entries) datasets[e.task] = load_task(root, e.task);
    const Mixture mixture = build_mixture(b.mixture, datasets);
    const auto indexes = build_indexes(mixture, b.episode.embed_dim);

    auto model = initial_model<T>(config, b);
    TrainOptions opt;
    opt.out_dir = out_dir / "checkpoints";
    if (config.contains("resume") && !config.at("resume").is_null()) opt.resume_from = config.at("resume").get<std::string>();
    const std::size_t report_every = std::max<std::size_t>(1, b.train.total_steps / 10);
    double window = 0;
    std::size_t window_n = 0;
    opt.on_step = [&](const TrainLogEntry& e) {
        window += e.loss;
        ++window_n;
        if (e.step % report_every == 0 || e.step == b.train.total_steps) {
            out << "step " << e.step << "/" << b.train.total_steps << "  loss " << std::fixed << std::setprecision(4)
                << window / static_cast<double>(window_n) << "  lr " << std::scientific << std::setprecision(2) << e.lr
                << std::defaultfloat << '\n';
            window = 0;
            window_n = 0;
        }
    };
    const auto t0 = std::chrono::steady_clock::now();
    auto res = train(mixture, indexes, std::move(model), b.episode, b.train, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    res.log.write_jsonl(out_dir / "train_log.jsonl");
    write_tensor_file(out_dir / "model.bin", checkpoint_of(res.model));
    if (res.model.lora()) write_tensor_file(out_dir / "adapters.bin", checkpoint_of(res.model, true));
    out << b.name << ": " << res.log.steps.size() << " steps in " << std::fixed << std::setprecision(1) << secs
        << " s; trainable " << res.model.params().scalar_count(true) << " / frozen "
        << res.model.params().scalar_count(false) << " scalars\n";
    return 0;
}

}  // namespace

int cmd_train(const RunConfig& run, std::ostream& out) {
    auto config = resolve_config(run);
    const auto bundle = resolve_bundle(config);
    if (run.out_dir.empty()) throw UsageError("train needs --out");
    fs::create_directories(run.out_dir);
    config = frozen_config(config, bundle);
    write_json(run.out_dir / "config.json", config);
    const auto dtype = config.at("dtype").get<std::string>();
    if (dtype == "float64") return train_impl<double>(config, bundle, run.out_dir, out);
    if (dtype == "float32") return train_impl<float>(config, bundle, run.out_dir, out);
    throw UsageError("dtype must be float32 or float64");
}

// ─── eval ───────────────────────────────────────────────────────────────────

namespace {

template <typename T>
MetricReport eval_impl(const json& config, const ExperimentBundle& b, const fs::path& checkpoint, const std::string& name) {
    const auto root = data_root(config);
    std::vector<std::shared_ptr<const TaskDataset>> suites;
    for (const auto& s : b.eval_suites) suites.push_back(load_task(root, s));
    const auto model = model_from_checkpoint<T>(read_tensor_file(checkpoint));
    auto opt = config.at("eval").get<EvalOptions>();
    opt.threads = std::max<std::size_t>(opt.threads, config.value("threads", std::size_t{1}));
    return evaluate(model, name, suites, opt);
}

}  // namespace

int cmd_eval(const RunConfig& run_in, std::ostream& out) {
    RunConfig run = run_in;
    if (run.out_dir.empty()) throw UsageError("eval needs --out (a run directory)");
    if (!run.config_path && fs::exists(run.out_dir / "config.json")) run.config_path = run.out_dir / "config.json";
    auto config = resolve_config(run);
    const auto bundle = resolve_bundle(config);
    fs::path checkpoint = run.out_dir / "model.bin";
    if (config.contains("checkpoint") && !config.at("checkpoint").is_null())
        checkpoint = config.at("checkpoint").get<std::string>();
    if (!fs::exists(checkpoint)) throw UsageError("checkpoint " + checkpoint.string() + " not found");
    const std::string name =
        config.contains("name") && !config.at("name").is_null() ? config.at("name").get<std::string>() : bundle.name;
    fs::create_directories(run.out_dir);
    write_json(run.out_dir / "eval_config.json", frozen_config(config, bundle));

    const auto dtype = config.at("dtype").get<std::string>();
    MetricReport report;
    if (dtype == "float64")
        report = eval_impl<double>(config, bundle, checkpoint, name);
    else if (dtype == "float32")
        report = eval_impl<float>(config, bundle, checkpoint, name);
    else
        throw UsageError("dtype must be float32 or float64");

    write_json(run.out_dir / "report.json", report.to_json());
    std::ostringstream breakdowns;
    for (const auto& s : report.suites) {
        for (int few = 0; few < 2; ++few) {
            const auto& r = few ? s.few_shot : s.zero_shot;
            breakdowns << "== " << s.suite << " (" << (few ? "k=" + std::to_string(r.k) : "zero-shot") << ", per-item "
                       << (s.kind == TaskKind::asr ? "capped WER" : s.kind == TaskKind::st ? "sentence BLEU" : "accuracy")
                       << ")\n"
                       << r.breakdown.to_text() << '\n';
        }
    }
    const std::string table = report.to_table();
    write_text(run.out_dir / "report.txt", table);
    write_text(run.out_dir / "breakdowns.txt", breakdowns.str());
    out << table;
    return 0;
}

// ─── compare ────────────────────────────────────────────────────────────────

int cmd_compare(const std::vector<fs::path>& run_dirs, const std::optional<fs::path>& out_dir, std::ostream& out) {
    if (run_dirs.empty()) throw UsageError("compare needs at least one run directory");
    std::vector<std::pair<std::string, MetricReport>> runs;
    std::set<std::string> seen;
    for (const auto& dir : run_dirs) {
        const auto path = dir / "report.json";
        std::ifstream is(path);
        if (!is) throw UsageError("no report.json in " + dir.string() + "; run `eval` first");
        json j;
        try {
            j = json::parse(is);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string() + ": " + e.what());
        }
        auto report = MetricReport::from_json(j);
        std::string name = report.model;
        if (!seen.insert(name).second) name += " [" + dir.filename().string() + "]";
        seen.insert(name);
        runs.emplace_back(name, std::move(report));
    }
    const auto cmp = compare_reports(runs);
    const auto text = cmp.to_text();
    out << text;
    if (out_dir) {
        fs::create_directories(*out_dir);
        write_text(*out_dir / "compare.txt", text);
        write_json(*out_dir / "compare.json", cmp.to_json());
    }
    return 0;
}

// ─── score ──────────────────────────────────────────────────────────────────

int cmd_score(const fs::path& input, const std::vector<std::string>& groupings_in, bool json_out, std::ostream& out) {
    std::ifstream is(input);
    if (!is) throw UsageError("cannot open " + input.string());
    std::vector<ScoredItem> items;
    std::set<std::string> tag_keys;
    std::string line;
    std::size_t n = 0, excluded = 0;
    BleuStats stats;
    bool any_bleu = false;
    while (std::getline(is, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error&) {
            throw ParseError("malformed score record", n);
        }
        ScoredItem it;
        it.id = j.value("id", std::to_string(n));
        it.task = j.value("task", "");
        it.hypothesis = j.value("hyp", "");
        it.reference = j.value("ref", "");
        if (j.contains("tags")) it.tags = j.at("tags").get<std::map<std::string, std::string>>();
        for (const auto& [k, _] : it.tags) tag_keys.insert(k);
        const std::string metric = j.value("metric", std::string("wer"));
        if (metric == "wer" || metric == "cer") {
            const auto v = metric == "wer" ? capped_utterance_wer(it.hypothesis, it.reference)
                                           : cer(it.hypothesis, it.reference);
            if (!v) {
                std::cerr << "warning: record " << it.id << " has an empty reference after normalisation; excluded\n";
                ++excluded;
                continue;
            }
            it.score = *v;
        } else if (metric == "bleu") {
            const bool chars = j.value("char_level", false);
            const auto h = bleu_tokens(it.hypothesis, chars);
            const std::vector<std::vector<std::string>> refs{bleu_tokens(it.reference, chars)};
            stats.add(h, refs, 4);
            any_bleu = true;
            it.score = bleu(h, refs, BleuOptions{4, true});
        } else if (metric == "qa") {
            const auto got = extract_choice(it.hypothesis, j.value("num_choices", std::size_t{4}));
            it.score = got && *got == it.reference ? 1.0 : 0.0;
        } else {
            throw ValidationError("unknown metric '" + metric + "' in record " + it.id);
        }
        items.push_back(std::move(it));
    }
    const std::vector<std::string> groupings =
        groupings_in.empty() ? std::vector<std::string>(tag_keys.begin(), tag_keys.end()) : groupings_in;
    const auto table = breakdown(items, groupings);
    const auto bad = table.conservation_violations();
    if (json_out) {
        json j = table.to_json();
        j["excluded"] = excluded;
        if (any_bleu) j["corpus_bleu"] = stats.score(BleuOptions{});
        j["conservation_violations"] = bad;
        out << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    } else {
        out << table.to_text();
        if (any_bleu) out << "corpus BLEU: " << std::fixed << std::setprecision(2) << 100.0 * stats.score(BleuOptions{}) << '\n';
        if (excluded) out << excluded << " record(s) excluded (empty reference)\n";
    }
    if (!bad.empty()) {
        std::cerr << "conservation violated for grouping(s):";
        for (const auto& g : bad) std::cerr << ' ' << g;
        std::cerr << '\n';
        return 2;
    }
    return 0;
}

}  // namespace sicl
