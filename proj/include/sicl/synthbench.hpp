#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sicl/corpus.hpp"
#include "sicl/episodes.hpp"
#include "sicl/model.hpp"
#include "sicl/train.hpp"

namespace sicl {

/// Acoustic stand-in: every character maps to a prototype vector, shifted by
/// a domain offset, repeated `frame_rate` times with gaussian noise.
struct DomainSpec {
    std::string id;
    std::map<char, std::vector<float>> prototypes;
    std::vector<float> shift;
    double noise = 0.0;
    int frame_rate = 2;
    /// 0 = shift only, 1 = prototype map permuted as well.
    int tier = 0;

    std::size_t dim() const { return shift.size(); }
    void validate() const;
    FeatureSeq render(std::string_view text, Rng& rng) const;
};

/// Decodes features with knowledge of the domain: subtract the shift, pick
/// the nearest prototype for every frame group.
std::string oracle_decode(const DomainSpec& domain, const FeatureSeq& features);

/// Mean of (frame - prototype) over one (features, transcript) pair.
std::vector<double> recover_shift(const DomainSpec& domain, const FeatureSeq& features, std::string_view transcript);

struct SynthTaskSpec {
    TaskKind kind = TaskKind::asr;
    std::vector<std::string> lexicon;
    std::size_t min_words = 1;
    std::size_t max_words = 3;
    /// st: applied after reversing the string.
    std::map<char, char> substitution;
    /// sqa: the question counts this character.
    char marker = 'a';
    /// Share of samples in the query set; the rest form the pool.
    double query_fraction = 0.5;
    bool leave_one_out = false;

    std::string make_target(std::string_view text) const;
    std::vector<std::string> choices() const;
};

/// n samples with per-sample derived seeds; ids are "<task>-<index>".
TaskDataset gen_dataset(const TaskId& task, const SynthTaskSpec& spec, const DomainSpec& domain, std::size_t n,
                        std::uint64_t seed);

struct WorldConfig {
    std::uint64_t seed = 1;
    std::size_t feature_dim = 16;
    int frame_rate = 2;
    std::string alphabet = "abcdefghijkl";
    std::size_t lexicon_size = 40;
    std::size_t min_word_len = 2;
    std::size_t max_word_len = 3;
    std::size_t min_words = 1;
    std::size_t max_words = 3;
    double noise = 0.3;
    /// Multiplies the high-resource training set sizes.
    double scale = 1.0;

    std::size_t backbone_domains = 256;
    std::size_t backbone_size = 120;
    double backbone_max_shift = 4.0;
    double backbone_permuted_fraction = 0.35;
    /// Translation tasks in the backbone corpus, each with its own swaps.
    std::size_t backbone_st_domains = 16;
    /// Mixture weight of each backbone translation task relative to an ASR one.
    double backbone_st_weight = 0.4;

    std::size_t asr_groups = 8;
    std::size_t asr_size = 16368;
    double asr_min_shift = 1.0;
    double asr_max_shift = 2.5;
    std::vector<std::size_t> st_sizes{15427, 13500, 4842, 3318};
    std::size_t st_swaps = 1;
    std::size_t sqa_size = 5000;

    std::size_t eval_size = 300;
    std::size_t eval_pool_size = 500;
    double eval_shift = 3.5;
    std::size_t sft_size = 500;
    /// Words the direct fine-tuning set draws from (a prefix of the lexicon).
    std::size_t sft_lexicon_size = 6;

    void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct World {
    WorldConfig config;
    std::vector<std::string> lexicon;
    std::map<TaskId, DomainSpec> domains;  // per task
    std::map<TaskId, std::shared_ptr<const TaskDataset>> datasets;

    std::vector<TaskId> tasks_with_prefix(std::string_view prefix) const;
};

World build_world(const WorldConfig& cfg);

/// Everything needed to train and evaluate one preset.
struct ExperimentBundle {
    std::string name;
    MixtureConfig mixture;
    std::vector<TaskId> eval_suites;
    EpisodeConfig episode;
    TrainConfig train;
    /// Full-parameter training of the backbone instead of LoRA.
    bool full_parameters = false;
    /// Preset whose final model initialises this one.
    std::optional<std::string> init_from;
    LoraConfig lora;
    ModelConfig model;
};

nlohmann::json to_json(const ExperimentBundle& b);
ExperimentBundle bundle_from_json(const nlohmann::json& j);

/// Known presets: base, sicl_at1, sicl_at2, sicl_at3, sft_baseline, cv_transfer.
ExperimentBundle preset_experiment(const std::string& name, const WorldConfig& world = {});
const std::vector<std::string>& preset_names();

}  // namespace sicl
