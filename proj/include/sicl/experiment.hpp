#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sicl/corpus.hpp"
#include "sicl/episodes.hpp"
#include "sicl/metrics.hpp"
#include "sicl/model.hpp"
#include "sicl/synthbench.hpp"

namespace sicl {

/// Bad command line or configuration reference (exit code 1).
class UsageError : public Error {
public:
    using Error::Error;
};

// ─── Evaluation ─────────────────────────────────────────────────────────────

struct EvalOptions {
    std::size_t k = 4;
    std::size_t max_new = 32;
    std::size_t embed_dim = 64;
    std::size_t max_seq_len = 256;
    DemoOrder demo_order = DemoOrder::similar_last;
    std::uint64_t seed = 0;
    /// ST BLEU over characters (whitespace dropped) instead of words.
    bool char_bleu = true;
    /// Evaluate at most this many queries per suite; 0 = all.
    std::size_t max_items = 0;
    std::size_t threads = 1;
};

void to_json(nlohmann::json& j, const EvalOptions& o);
void from_json(const nlohmann::json& j, EvalOptions& o);

struct ModeResult {
    std::size_t k = 0;
    std::size_t n = 0;
    std::optional<double> wer;  // capped, mean over utterances
    std::optional<double> cer;
    std::optional<double> bleu;
    std::optional<double> accuracy;
    BreakdownTable breakdown;
    std::vector<ScoredItem> items;
};

struct SuiteReport {
    std::string suite;
    TaskKind kind = TaskKind::asr;
    ModeResult zero_shot;
    ModeResult few_shot;
};

struct MetricReport {
    std::string model;
    std::vector<SuiteReport> suites;

    const SuiteReport* find(const std::string& suite) const;
    nlohmann::json to_json(bool with_items = true) const;
    static MetricReport from_json(const nlohmann::json& j);
    /// Aligned text: one row per mode, one column per suite metric.
    std::string to_table() const;
};

/// Headline metric of a suite kind (capped WER, BLEU, accuracy) and whether
/// lower is better.
std::string headline_metric(TaskKind kind);
bool lower_is_better(TaskKind kind);
std::optional<double> headline(const ModeResult& r, TaskKind kind);

/// Zero-shot (k = 0) and few-shot (Vanilla SICL, k demonstrations retrieved
/// with the model's own zero-shot hypothesis as the text key).
template <typename T>
SuiteReport evaluate_suite(const Transformer<T>& model, const TaskDataset& suite, const EvalOptions& opt,
                           const TemplateSet& templates = TemplateSet::defaults());

template <typename T>
MetricReport evaluate(const Transformer<T>& model, const std::string& name,
                      const std::vector<std::shared_ptr<const TaskDataset>>& suites, const EvalOptions& opt);

// ─── Comparison ─────────────────────────────────────────────────────────────

struct ComparisonCell {
    std::optional<double> value;  // absent when the run lacks the suite
    std::optional<double> delta;  // against the first run, same mode
    int sign = 0;                 // +1 better, -1 worse, 0 equal or absent
};

struct ComparisonRow {
    std::string run;
    std::string mode;  // "zero-shot" or "few-shot"
    std::vector<ComparisonCell> cells;
};

struct Comparison {
    std::vector<std::string> suites;
    std::vector<std::string> metrics;  // per suite
    std::vector<bool> lower_better;    // per suite
    std::vector<ComparisonRow> rows;   // runs in argument order, zero-shot then few-shot

    const ComparisonRow* row(const std::string& run, const std::string& mode) const;
    std::string to_text() const;
    nlohmann::json to_json() const;
};

Comparison compare_reports(const std::vector<std::pair<std::string, MetricReport>>& runs);

// ─── Command line ───────────────────────────────────────────────────────────

struct RunConfig {
    std::string subcommand;
    std::optional<std::filesystem::path> config_path;
    std::optional<std::uint64_t> seed;
    std::filesystem::path out_dir;
    /// dotted.key=value; the value is parsed as JSON when possible.
    std::vector<std::string> overrides;
};

void apply_override(nlohmann::json& config, std::string_view assignment);

/// Defaults, then the config file, then overrides, then --seed.
nlohmann::json resolve_config(const RunConfig& run);

/// Bundle for a resolved config: the preset, overlaid by the config's
/// episode/train/lora/model/mixture sections.
ExperimentBundle resolve_bundle(const nlohmann::json& config);

/// Writes the world (manifests + sidecars) and preset bundles; prints a summary.
int cmd_gen(const RunConfig& run, std::ostream& out);
/// Trains the resolved preset; writes checkpoints, train_log.jsonl, model.bin.
int cmd_train(const RunConfig& run, std::ostream& out);
/// Evaluates model.bin of the run (or config "checkpoint") on the eval suites.
int cmd_eval(const RunConfig& run, std::ostream& out);
/// Joins report.json of each run directory into one delta table.
int cmd_compare(const std::vector<std::filesystem::path>& run_dirs, const std::optional<std::filesystem::path>& out_dir,
                std::ostream& out);
/// Scores a JSON Lines file of {id, kind, hyp, ref, tags[, choices]} records.
int cmd_score(const std::filesystem::path& input, const std::vector<std::string>& groupings, bool json_out,
              std::ostream& out);

}  // namespace sicl
