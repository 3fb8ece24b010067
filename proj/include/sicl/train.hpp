#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sicl/episodes.hpp"
#include "sicl/model.hpp"

namespace sicl {

enum class TrainMode { sicl_at, sft };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(std::string_view name);

struct TrainConfig {
    std::size_t total_steps = 1000;
    double learning_rate = 3e-4;
    std::size_t warmup_steps = 100;
    double weight_decay = 0.0;
    double grad_clip_norm = 1.0;  // <= 0 disables clipping
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t episodes_per_step = 1;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::sicl_at;
    std::size_t checkpoint_every = 500;  // 0 = final checkpoint only
    std::size_t threads = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Episode config actually used for a mode (sft forces k = 0).
EpisodeConfig effective_episode_config(EpisodeConfig ep, const TrainConfig& cfg);

template <typename T>
struct AdamState {
    std::map<std::string, Mat<T>> m, v;
};

/// lr = base · min(step / warmup, 1) with 1-based steps.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);

/// Scales grads in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_gradients(Gradients<T>& grads, double max_norm);

/// One adaptive-moment update with decoupled weight decay and bias
/// correction. Gradients are clipped first; returns the pre-clip norm.
template <typename T>
double optimizer_step(ParamSet<T>& params, Gradients<T> grads, AdamState<T>& state, const TrainConfig& cfg,
                      std::size_t step);

struct TrainLogEntry {
    std::size_t step = 0;
    std::string task;  // tasks of the step's episodes, comma-joined
    std::size_t k = 0;  // demonstrations in the first episode
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;

    nlohmann::json to_json() const;
    static TrainLogEntry from_json(const nlohmann::json& j);
    friend bool operator==(const TrainLogEntry&, const TrainLogEntry&) = default;
};

struct TrainLog {
    std::vector<TrainLogEntry> steps;
    std::vector<std::pair<std::size_t, std::string>> checkpoints;

    /// JSON Lines: one record per step, checkpoints as {"event": "checkpoint"}.
    void write_jsonl(const std::filesystem::path& path) const;
    static TrainLog read_jsonl(const std::filesystem::path& path);
};

struct TrainOptions {
    /// Checkpoints go here as ckpt-<step>.bin; empty disables checkpointing.
    std::filesystem::path out_dir;
    /// Continue from a checkpoint written by train().
    std::optional<std::filesystem::path> resume_from;
    /// Called after every step (progress reporting).
    std::function<void(const TrainLogEntry&)> on_step;
};

template <typename T>
struct TrainResult {
    Transformer<T> model;
    TrainLog log;
};

/// Training loop: per step draw `episodes_per_step` episodes, average the
/// loss gradients over them (summed in draw order), update the trainable
/// partition. Deterministic for a fixed seed and thread count independent.
template <typename T>
TrainResult<T> train(const Mixture& mixture, std::span<const EmbeddingIndex> indexes, Transformer<T> model,
                     const EpisodeConfig& ep_cfg, const TrainConfig& cfg, const TrainOptions& opt = {});

/// Checkpoint with optimizer moments and the episode stream position.
template <typename T>
void save_train_checkpoint(const std::filesystem::path& path, const Transformer<T>& model, const AdamState<T>& adam,
                           const EpisodeStreamState& stream, std::size_t step, const TrainConfig& cfg);

template <typename T>
struct TrainCheckpoint {
    Transformer<T> model;
    AdamState<T> adam;
    EpisodeStreamState stream;
    std::size_t step = 0;
};

template <typename T>
TrainCheckpoint<T> load_train_checkpoint(const std::filesystem::path& path);

}  // namespace sicl
