#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sicl/corpus.hpp"
#include "sicl/tokenizer.hpp"

namespace sicl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int vocab = tok::kVocabSize;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 512;
    int feature_dim = 16;
    int max_segments = 16;  // segment indices beyond this share the last embedding
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t parameter_count() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Low-rank adapters: effective weight W + (alpha/rank)·B·A with B zero-initialised.
struct LoraConfig {
    int rank = 8;
    double alpha = 32.0;
    /// Any of q k v o ff1 ff2, applied in every layer.
    std::vector<std::string> targets{"q", "k", "v", "o", "ff1", "ff2"};
    bool train_projector = false;
    double init_scale = 0.01;  // A ~ U(-1/sqrt(in), 1/sqrt(in)) · init_scale
    std::uint64_t seed = 0;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);

/// Named tensors partitioned into trainable and frozen.
template <typename T>
class ParamSet {
public:
    void add(const std::string& name, Mat<T> value, bool trainable);
    void erase(const std::string& name);
    Mat<T>& at(const std::string& name);
    const Mat<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.contains(name); }
    bool trainable(const std::string& name) const { return trainable_.contains(name); }
    void set_trainable(const std::string& name, bool on);

    std::vector<std::string> names() const;
    std::vector<std::string> trainable_names() const;
    std::vector<std::string> frozen_names() const;
    /// Number of scalars in the trainable (or frozen) partition.
    std::size_t scalar_count(bool trainable) const;

    const std::map<std::string, Mat<T>>& tensors() const { return tensors_; }

private:
    std::map<std::string, Mat<T>> tensors_;
    std::set<std::string> trainable_;
};

/// Gradients keyed by parameter name; frozen parameters have no entry.
template <typename T>
using Gradients = std::map<std::string, Mat<T>>;

struct ModelInput {
    std::span<const int> tokens;
    const FeatureSeq* frames = nullptr;  // one row per kFrame token
    std::span<const TokenPosition> positions;
};

template <typename Seq>
ModelInput input_of(const Seq& s) {
    return ModelInput{s.tokens, &s.frames, s.positions};
}

struct GenerateResult {
    std::vector<int> tokens;  // generated ids, terminator excluded
    bool stopped = false;     // EOS (or a demo separator) was produced
    bool budget_exhausted = false;
};

template <typename T>
struct LossAndGrad {
    T loss = 0;
    std::size_t masked = 0;
    Gradients<T> grads;
};

/// Decoder-only pre-LayerNorm transformer over byte tokens with projected
/// frame features, learned span-relative position embeddings and optional
/// LoRA adapters. Forward and reverse passes are hand-written.
template <typename T>
class Transformer {
public:
    explicit Transformer(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const std::optional<LoraConfig>& lora() const { return lora_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    /// Adds adapters to every targeted matrix, freezes the base and makes the
    /// adapters (and optionally the feature projector) trainable.
    void attach_lora(const LoraConfig& lora);
    /// Restores a LoRA layout read from a checkpoint without re-initialising.
    void set_lora_config(std::optional<LoraConfig> lora) { lora_ = std::move(lora); }
    /// Marks every base parameter trainable (used to pre-train the backbone).
    void set_full_training();

    /// Logits, one row per input position.
    Mat<T> forward(const ModelInput& in) const;
    /// Mean next-token cross-entropy over masked positions. `labels`, when
    /// given, replaces the input tokens as prediction targets.
    T loss(const ModelInput& in, std::span<const std::uint8_t> mask, std::span<const int> labels = {}) const;
    /// Loss plus exact gradients for the trainable partition.
    LossAndGrad<T> loss_and_grad(const ModelInput& in, std::span<const std::uint8_t> mask,
                                 std::span<const int> labels = {}) const;

    /// Greedy decoding until EOS/DEMO_SEP, max_new tokens, or the sequence budget.
    GenerateResult generate(const ModelInput& prompt, std::size_t max_new) const;

    /// Base model with W + s·B·A folded into every adapted matrix.
    Transformer merged() const;

    template <typename U>
    Transformer<U> cast() const {
        Transformer<U> out(cfg_);
        out.set_lora_config(lora_);
        for (const auto& [name, m] : params_.tensors()) out.params().add(name, m.template cast<U>(), params_.trainable(name));
        return out;
    }

private:
    struct LayerCache;
    struct Cache;
    struct KvState;
    struct LinearCache {
        Mat<T> xa;  // x·Aᵀ for adapted matrices
    };

    Mat<T> embed(const ModelInput& in, std::size_t frame_start) const;
    int offset_row(const TokenPosition& p) const;
    int from_end_row(const TokenPosition& p) const;
    int segment_row(const TokenPosition& p) const;
    Mat<T> linear(const std::string& name, const Mat<T>& x, LinearCache* cache) const;
    Mat<T> linear_backward(const std::string& name, const Mat<T>& x, const Mat<T>& dy, const LinearCache& cache,
                           Gradients<T>& grads) const;
    Mat<T> block(int l, const Mat<T>& h, KvState* kv, LayerCache* cache) const;
    Mat<T> run_layers(const ModelInput& in, Cache* cache) const;
    void check_input(const ModelInput& in) const;

    ModelConfig cfg_;
    std::optional<LoraConfig> lora_;
    ParamSet<T> params_;
};

/// Per-position negative log-likelihood of tokens[t] under logits[t-1].
template <typename T>
T token_nll(const Mat<T>& logits, std::span<const int> tokens, std::size_t t);

/// Mean NLL over masked positions; throws on an empty mask.
template <typename T>
T sequence_loss(const Mat<T>& logits, std::span<const int> tokens, std::span<const std::uint8_t> mask);

// ─── Checkpoints ────────────────────────────────────────────────────────────

/// One named tensor; stored as 32-bit floats when `single` is set.
struct TensorRecord {
    std::string name;
    Mat<double> value;
    bool single = false;
};

/// Container: magic, version, JSON header, then (name, shape, dtype,
/// little-endian payload) records.
struct TensorFile {
    nlohmann::json header = nlohmann::json::object();
    std::vector<TensorRecord> tensors;

    const TensorRecord* find(const std::string& name) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

/// Model (or adapters only) as a tensor file. The header records the
/// configs, the parameter list and the trainable partition.
template <typename T>
TensorFile checkpoint_of(const Transformer<T>& model, bool adapters_only = false);

/// Rebuilds a full model from a checkpoint_of(model, false) file.
template <typename T>
Transformer<T> model_from_checkpoint(const TensorFile& file);

/// Attaches adapters saved with checkpoint_of(model, true) to a base model.
template <typename T>
void load_adapters(Transformer<T>& base, const TensorFile& file);

extern template class ParamSet<double>;
extern template class ParamSet<float>;
extern template class Transformer<double>;
extern template class Transformer<float>;

}  // namespace sicl
