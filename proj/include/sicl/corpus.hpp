#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <memory>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "sicl/common.hpp"

namespace sicl {

/// T×d frame features, one row per frame.
using FeatureSeq = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class TaskKind { asr, st, sqa };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

/// Answer label for choice index i: "A", "B", ...
std::string choice_label(std::size_t index);

struct Sample {
    std::string id;
    TaskId task;
    std::variant<FeatureSeq, std::string> input;
    std::string target;
    std::vector<std::string> choices;  // empty unless the task is multiple choice
    std::map<std::string, std::string> tags;

    bool has_features() const { return std::holds_alternative<FeatureSeq>(input); }
    const FeatureSeq& features() const { return std::get<FeatureSeq>(input); }
    const std::string& text_input() const { return std::get<std::string>(input); }

    /// Throws ValidationError when the per-sample invariants do not hold.
    void validate() const;
};

bool operator==(const Sample& a, const Sample& b);

struct TaskDataset {
    TaskId task;
    TaskKind kind = TaskKind::asr;
    std::vector<Sample> query_set;
    std::vector<Sample> demo_pool;
    /// When set, query and pool may share samples and retrieval excludes the
    /// query itself from its own demonstrations.
    bool leave_one_out = false;

    /// Number of distinct samples across query set and pool.
    std::size_t size() const;
    void validate() const;
    const Sample* find(std::string_view id) const;
};

bool operator==(const TaskDataset& a, const TaskDataset& b);

// ─── Manifest I/O ───────────────────────────────────────────────────────────
//
// JSON Lines, one Sample record per line:
//   {"id":..., "task":..., "kind":"asr|st|sqa", "split":"query|pool|both",
//    "target":..., "input":{"text":...} | {"features":{"file":...,"row":r,"frames":n}},
//    "choices":[...], "tags":{...}}
// Feature rows live in one sidecar matrix per manifest (see write_matrix).

TaskDataset load_manifest(const std::filesystem::path& path);
/// Writes `path` plus a sidecar `<stem>.f32` next to it.
void save_manifest(const TaskDataset& dataset, const std::filesystem::path& path);
/// Loads every *.jsonl manifest in a directory, keyed by task.
std::map<TaskId, std::shared_ptr<const TaskDataset>> load_manifest_dir(const std::filesystem::path& dir);

// Sidecar matrix: 16-byte header {magic "SFM1", u64 rows, u32 cols} then
// rows×cols little-endian float32, row-major.
void write_matrix(const std::filesystem::path& path, const FeatureSeq& m);
FeatureSeq read_matrix(const std::filesystem::path& path);

/// Precomputed embeddings: a sidecar matrix plus `<path>.ids`, one id per line.
std::unordered_map<std::string, std::vector<double>> load_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids, const FeatureSeq& vectors);

// ─── Mixture ────────────────────────────────────────────────────────────────

enum class MixtureWeighting { uniform, proportional, explicit_weights };

struct MixtureEntry {
    TaskId task;
    std::size_t sample_count = 0;  // 0 = whole query set
    double weight = 1.0;
};

struct MixtureConfig {
    std::string name;
    MixtureWeighting weighting = MixtureWeighting::uniform;
    std::vector<MixtureEntry> entries;

    /// A new config holding this config's entries followed by `extra`.
    MixtureConfig plus(std::string new_name, std::span<const MixtureEntry> extra) const;
    std::vector<double> effective_weights() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const MixtureConfig& config);
void from_json(const nlohmann::json& j, MixtureConfig& config);

class Mixture {
public:
    Mixture(MixtureConfig config, std::vector<std::shared_ptr<const TaskDataset>> datasets);

    const MixtureConfig& config() const { return config_; }
    std::size_t num_tasks() const { return datasets_.size(); }
    /// Index into entries, drawn in proportion to the effective weights.
    std::size_t draw_task_index(Rng& rng) const;
    TaskId draw_task(Rng& rng) const { return task(draw_task_index(rng)); }
    const TaskId& task(std::size_t index) const { return config_.entries[index].task; }
    const TaskDataset& dataset(std::size_t index) const { return *datasets_[index]; }
    const TaskDataset& dataset(const TaskId& task) const;
    std::size_t index_of(const TaskId& task) const;
    /// Query set truncated to the entry's sample_count.
    std::span<const Sample> queries(std::size_t index) const;

private:
    MixtureConfig config_;
    std::vector<std::shared_ptr<const TaskDataset>> datasets_;
    std::vector<double> cumulative_;
};

Mixture build_mixture(const MixtureConfig& config,
                      const std::map<TaskId, std::shared_ptr<const TaskDataset>>& datasets);

}  // namespace sicl
