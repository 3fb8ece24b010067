#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sicl/corpus.hpp"
#include "sicl/retrieval.hpp"
#include "sicl/tokenizer.hpp"

namespace sicl {

// ─── Prompt templates ───────────────────────────────────────────────────────

/// One segment of the prompt layout, e.g. "{input}{sep}{target}{demo_sep}".
/// Slots: {input} {choices} {sep} {target} {demo_sep}; any other text is a
/// literal rendered as bytes. {target}{demo_sep} must close the template and
/// {input} must precede {sep}. In the query segment {demo_sep} becomes EOS.
class PromptTemplate {
public:
    enum class Piece { input, choices, sep, target, demo_sep, literal };
    struct Part {
        Piece piece;
        std::string text;  // literal only
    };

    static PromptTemplate parse(std::string_view text);
    static PromptTemplate from_file(const std::filesystem::path& path);
    static PromptTemplate default_for(TaskKind kind);

    const std::vector<Part>& parts() const { return parts_; }
    const std::string& source() const { return source_; }

private:
    std::vector<Part> parts_;
    std::string source_;
};

struct TemplateSet {
    std::map<TaskKind, PromptTemplate> by_kind;
    const PromptTemplate& get(TaskKind kind) const;
    static TemplateSet defaults();
};

// ─── Sequences ──────────────────────────────────────────────────────────────

struct EncodedSequence {
    std::vector<int> tokens;
    std::vector<std::uint8_t> loss_mask;  // same length as tokens
    std::vector<TokenPosition> positions;
    FeatureSeq frames;  // one row per kFrame token, in order
    std::size_t prompt_length = 0;  // tokens before the query target span

    std::size_t size() const { return tokens.size(); }
    std::size_t mask_count() const;
};

bool operator==(const EncodedSequence& a, const EncodedSequence& b);

struct Demo {
    const Sample* sample = nullptr;
    double similarity = 0.0;
};

enum class DemoOrder { similar_last, similar_first, random };

struct AssembleOptions {
    std::size_t max_seq_len = 512;
    bool supervise_demos = false;
    /// Tokens kept free after the prompt (make_eval_prompt only).
    std::size_t reserve = 0;
};

struct Assembled {
    EncodedSequence seq;
    std::vector<Demo> kept;  // demos that fit, in layout order
    std::size_t dropped = 0;
};

/// Full training sequence. When over budget, the lowest-similarity demos are
/// dropped first (order of the rest preserved); throws ValidationError only
/// when the bare query does not fit.
Assembled assemble_sequence(std::span<const Demo> demos, const Sample& query, const PromptTemplate& tmpl,
                            const AssembleOptions& opt = {});

/// Same layout as assemble_sequence, cut right before the query target span.
Assembled make_eval_prompt(std::span<const Demo> demos, const Sample& query, const PromptTemplate& tmpl,
                           const AssembleOptions& opt = {});

/// Orders retrieved neighbours for the prompt.
std::vector<Demo> order_demos(std::vector<Demo> demos, DemoOrder order, Rng& rng);

// ─── Episodes ───────────────────────────────────────────────────────────────

struct EpisodeConfig {
    std::size_t k = 4;
    /// When set, k is drawn per episode uniformly from [k_min, k].
    bool randomize_k = false;
    std::size_t k_min = 1;
    std::size_t max_seq_len = 512;
    DemoOrder demo_order = DemoOrder::similar_last;
    std::uint64_t seed = 0;
    bool supervise_demos = false;
    std::size_t embed_dim = 64;
};

void to_json(nlohmann::json& j, const EpisodeConfig& c);
void from_json(const nlohmann::json& j, EpisodeConfig& c);
std::string to_string(DemoOrder order);
DemoOrder demo_order_from_string(std::string_view name);

struct Episode {
    TaskId task;
    std::vector<Demo> demos;  // in layout order
    const Sample* query = nullptr;
    EncodedSequence seq;
};

/// Identical episodes: same task, query, demos (ids and scores) and sequence.
bool same_episode(const Episode& a, const Episode& b);

/// Serializable position of an episode stream.
struct EpisodeStreamState {
    Rng rng = Rng(0);
    std::vector<std::uint64_t> epoch;   // per mixture entry
    std::vector<std::uint64_t> cursor;  // per mixture entry, within the epoch permutation

    nlohmann::json to_json() const;
    static EpisodeStreamState from_json(const nlohmann::json& j);
    friend bool operator==(const EpisodeStreamState&, const EpisodeStreamState&) = default;
};

/// One cosine index per mixture entry, over that task's demonstration pool.
std::vector<EmbeddingIndex> build_indexes(const Mixture& mixture, std::size_t dim);

/// Draws episodes following the training loop: task ~ mixture weights, query
/// uniformly without replacement per epoch (reshuffled each epoch), k nearest
/// demonstrations from the task's pool (leave-one-out when flagged).
class EpisodeSampler {
public:
    EpisodeSampler(const Mixture& mixture, std::span<const EmbeddingIndex> indexes, EpisodeConfig cfg,
                   TemplateSet templates = TemplateSet::defaults());

    Episode next();
    const EpisodeStreamState& state() const { return state_; }
    void restore(const EpisodeStreamState& state);
    const EpisodeConfig& config() const { return cfg_; }

private:
    const std::vector<std::uint32_t>& permutation(std::size_t task_index);

    const Mixture& mixture_;
    std::span<const EmbeddingIndex> indexes_;
    EpisodeConfig cfg_;
    TemplateSet templates_;
    EpisodeStreamState state_;
    std::vector<std::pair<std::uint64_t, std::vector<std::uint32_t>>> perm_cache_;
};

/// Free-function form of EpisodeSampler::next over an explicit stream state;
/// a default-constructed state starts the stream from the beginning.
Episode sample_episode(const Mixture& mixture, std::span<const EmbeddingIndex> indexes, const EpisodeConfig& cfg,
                       EpisodeStreamState& state);

/// Retrieves demonstrations for one query from a pool index.
std::vector<Demo> retrieve_demos(const TaskDataset& ds, const EmbeddingIndex& index, std::span<const double> key,
                                 std::size_t k, const std::string& query_id);

}  // namespace sicl
