#include "sicl/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sicl/common.hpp"

namespace sicl {

// ─── Configs ────────────────────────────────────────────────────────────────

void ModelConfig::validate() const {
    if (vocab < tok::kVocabSize) throw ValidationError("vocab must cover bytes and specials");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) throw ValidationError("model sizes must be positive");
    if (d_model % n_heads != 0) throw ValidationError("d_model must be divisible by n_heads");
    if (max_seq_len <= 1) throw ValidationError("max_seq_len must exceed 1");
    if (feature_dim <= 0) throw ValidationError("feature_dim must be positive");
    if (max_segments <= 0) throw ValidationError("max_segments must be positive");
}

std::size_t ModelConfig::parameter_count() const {
    const std::size_t d = d_model, f = d_ff, v = vocab, l = max_seq_len;
    const std::size_t embed = v * d + d * feature_dim + d + kNumSpanKinds * l * d + (l + 1) * d +
                              (static_cast<std::size_t>(max_segments) + 1) * d;
    const std::size_t layer = 4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d);
    return embed + n_layers * layer + 2 * d + v * d + v;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"vocab", c.vocab},         {"d_model", c.d_model},         {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},     {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
         {"feature_dim", c.feature_dim}, {"max_segments", c.max_segments}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab = j.value("vocab", d.vocab);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.max_segments = j.value("max_segments", d.max_segments);
    c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const LoraConfig& c) {
    j = {{"rank", c.rank},         {"alpha", c.alpha},           {"targets", c.targets},
         {"train_projector", c.train_projector}, {"init_scale", c.init_scale}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, LoraConfig& c) {
    LoraConfig d;
    c.rank = j.value("rank", d.rank);
    c.alpha = j.value("alpha", d.alpha);
    c.targets = j.value("targets", d.targets);
    c.train_projector = j.value("train_projector", d.train_projector);
    c.init_scale = j.value("init_scale", d.init_scale);
    c.seed = j.value("seed", d.seed);
}

// ─── ParamSet ───────────────────────────────────────────────────────────────

template <typename T>
void ParamSet<T>::add(const std::string& name, Mat<T> value, bool trainable) {
    if (!tensors_.emplace(name, std::move(value)).second) throw ValidationError("duplicate parameter " + name);
    if (trainable) trainable_.insert(name);
}

template <typename T>
void ParamSet<T>::erase(const std::string& name) {
    tensors_.erase(name);
    trainable_.erase(name);
}

template <typename T>
Mat<T>& ParamSet<T>::at(const std::string& name) {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
}

template <typename T>
const Mat<T>& ParamSet<T>::at(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
}

template <typename T>
void ParamSet<T>::set_trainable(const std::string& name, bool on) {
    if (!tensors_.contains(name)) throw ValidationError("unknown parameter " + name);
    if (on)
        trainable_.insert(name);
    else
        trainable_.erase(name);
}

template <typename T>
std::vector<std::string> ParamSet<T>::names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : tensors_) out.push_back(n);
    return out;
}

template <typename T>
std::vector<std::string> ParamSet<T>::trainable_names() const {
    return {trainable_.begin(), trainable_.end()};
}

template <typename T>
std::vector<std::string> ParamSet<T>::frozen_names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : tensors_)
        if (!trainable_.contains(n)) out.push_back(n);
    return out;
}

template <typename T>
std::size_t ParamSet<T>::scalar_count(bool trainable) const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors_)
        if (trainable_.contains(name) == trainable) n += static_cast<std::size_t>(m.size());
    return n;
}

// ─── Helpers ────────────────────────────────────────────────────────────────

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct LnCache {
    Mat<T> xhat;
    Vec<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, LnCache<T>* cache) {
    const auto n = x.cols();
    Mat<T> xhat(x.rows(), n);
    Vec<T> rstd(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T mean = x.row(r).mean();
        const auto centered = (x.row(r).array() - mean).eval();
        const T var = centered.square().mean();
        rstd(r) = T(1) / std::sqrt(var + T(kLnEps));
        xhat.row(r) = centered * rstd(r);
    }
    Mat<T> y = ((xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array()).matrix();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const LnCache<T>& c, Mat<T>* dg, Mat<T>* db) {
    const auto n = static_cast<T>(dy.cols());
    if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (db) *db += dy.colwise().sum();
    const Mat<T> dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const T mean_d = dxhat.row(r).mean();
        const T mean_dx = dxhat.row(r).dot(c.xhat.row(r)) / n;
        dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx).matrix();
    }
    return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
Mat<T> gelu(const Mat<T>& x) {
    return x.unaryExpr([](T v) {
        return T(0.5) * v * (T(1) + std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v)));
    });
}

template <typename T>
Mat<T> gelu_grad(const Mat<T>& x) {
    return x.unaryExpr([](T v) {
        const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * v * v);
    });
}

template <typename T>
Mat<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double std, std::uint64_t seed) {
    Rng rng(seed);
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * rng.normal());
    return m;
}

template <typename T>
Mat<T> uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, std::uint64_t seed) {
    Rng rng(seed);
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    return m;
}

template <typename T>
Mat<T>* grad_slot(const ParamSet<T>& params, Gradients<T>& grads, const std::string& name) {
    if (!params.trainable(name)) return nullptr;
    auto it = grads.find(name);
    if (it == grads.end()) {
        const auto& p = params.at(name);
        it = grads.emplace(name, Mat<T>::Zero(p.rows(), p.cols())).first;
    }
    return &it->second;
}

std::string layer_name(int l, const char* part) { return "layer" + std::to_string(l) + "." + part; }

template <typename T>
void check_finite(const Mat<T>& m, int layer) {
    if (!m.allFinite()) throw NumericError("non-finite activation in layer " + std::to_string(layer));
}

/// Row-stable log-sum-exp.
template <typename T, typename Row>
T log_sum_exp(const Row& row) {
    const T mx = row.maxCoeff();
    return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace

// ─── Transformer ────────────────────────────────────────────────────────────

template <typename T>
struct Transformer<T>::LayerCache {
    LnCache<T> ln1, ln2;
    Mat<T> a, q, k, v, ctx, b, f1, g;
    std::vector<Mat<T>> probs;  // per head
    LinearCache qc, kc, vc, oc, f1c, f2c;
};

template <typename T>
struct Transformer<T>::Cache {
    std::vector<LayerCache> layers;
    LnCache<T> lnf;
    Mat<T> z;
};

template <typename T>
struct Transformer<T>::KvState {
    std::vector<Mat<T>> k, v;  // per layer, one row per processed position
};

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_model, f = cfg_.d_ff, v = cfg_.vocab, L = cfg_.max_seq_len;
    const auto seed = [&](const std::string& name) { return derive_seed(cfg_.seed, name); };
    const auto normal = [&](const std::string& name, int rows, int cols, double std) {
        params_.add(name, normal_matrix<T>(rows, cols, std, seed(name)), false);
    };
    const auto zeros = [&](const std::string& name, int rows, int cols) {
        params_.add(name, Mat<T>::Zero(rows, cols), false);
    };
    const auto ones = [&](const std::string& name, int cols) { params_.add(name, Mat<T>::Ones(1, cols), false); };
    const double resid = 1.0 / std::sqrt(2.0 * cfg_.n_layers);

    normal("tok_emb", v, d, 0.1);
    normal("frame_proj.w", d, cfg_.feature_dim, 0.1);
    zeros("frame_proj.b", 1, d);
    normal("pos.offset", kNumSpanKinds * L, d, 0.1);
    normal("pos.from_end", L + 1, d, 0.1);
    normal("pos.segment", cfg_.max_segments + 1, d, 0.1);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        ones(layer_name(l, "ln1.g"), d);
        zeros(layer_name(l, "ln1.b"), 1, d);
        for (const char* p : {"q", "k", "v", "o"}) {
            const double std = (std::string(p) == "o" ? resid : 1.0) / std::sqrt(d);
            normal(layer_name(l, p) + ".w", d, d, std);
            zeros(layer_name(l, p) + ".b", 1, d);
        }
        ones(layer_name(l, "ln2.g"), d);
        zeros(layer_name(l, "ln2.b"), 1, d);
        normal(layer_name(l, "ff1.w"), f, d, 1.0 / std::sqrt(d));
        zeros(layer_name(l, "ff1.b"), 1, f);
        normal(layer_name(l, "ff2.w"), d, f, resid / std::sqrt(f));
        zeros(layer_name(l, "ff2.b"), 1, d);
    }
    ones("final_ln.g", d);
    zeros("final_ln.b", 1, d);
    normal("out.w", v, d, 1.0 / std::sqrt(d));
    zeros("out.b", 1, v);
}

template <typename T>
void Transformer<T>::attach_lora(const LoraConfig& lora) {
    if (lora_) throw ValidationError("LoRA adapters already attached");
    if (lora.rank <= 0) throw ValidationError("LoRA rank must be positive");
    if (!(lora.alpha > 0)) throw ValidationError("LoRA alpha must be positive");
    static const std::set<std::string> known{"q", "k", "v", "o", "ff1", "ff2"};
    for (const auto& t : lora.targets)
        if (!known.contains(t)) throw ValidationError("unknown LoRA target " + t);

    for (const auto& name : params_.names()) params_.set_trainable(name, false);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        for (const auto& t : lora.targets) {
            const std::string base = layer_name(l, t.c_str());
            const auto& w = params_.at(base + ".w");
            const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
            params_.add(base + ".lora_a",
                        uniform_matrix<T>(lora.rank, w.cols(), bound * lora.init_scale,
                                          derive_seed(lora.seed, base + ".lora_a")),
                        true);
            params_.add(base + ".lora_b", Mat<T>::Zero(w.rows(), lora.rank), true);
        }
    }
    if (lora.train_projector) {
        params_.set_trainable("frame_proj.w", true);
        params_.set_trainable("frame_proj.b", true);
    }
    lora_ = lora;
}

template <typename T>
void Transformer<T>::set_full_training() {
    for (const auto& name : params_.names()) params_.set_trainable(name, true);
}

template <typename T>
void Transformer<T>::check_input(const ModelInput& in) const {
    const auto n = in.tokens.size();
    if (n == 0) throw ValidationError("empty input sequence");
    if (n > static_cast<std::size_t>(cfg_.max_seq_len))
        throw ValidationError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                              std::to_string(cfg_.max_seq_len));
    if (in.positions.size() != n) throw ValidationError("positions length differs from token length");
    std::size_t frames = 0;
    for (const int t : in.tokens) {
        if (t < 0 || t >= cfg_.vocab) throw ValidationError("token id out of range");
        frames += t == tok::kFrame;
    }
    const std::size_t have = in.frames ? static_cast<std::size_t>(in.frames->rows()) : 0;
    if (frames != have) throw ValidationError("frame placeholder count differs from frame rows");
    if (frames && in.frames->cols() != cfg_.feature_dim) throw ValidationError("frame width differs from feature_dim");
}

template <typename T>
Mat<T> Transformer<T>::embed(const ModelInput& in, std::size_t frame_start) const {
    const auto n = static_cast<Eigen::Index>(in.tokens.size());
    const int d = cfg_.d_model, L = cfg_.max_seq_len;
    const auto& tok_emb = params_.at("tok_emb");
    const auto& pos_off = params_.at("pos.offset");
    const auto& pos_end = params_.at("pos.from_end");
    const auto& pos_seg = params_.at("pos.segment");
    Mat<T> x(n, d);
    std::size_t fi = frame_start;
    for (Eigen::Index t = 0; t < n; ++t) {
        const int id = in.tokens[t];
        if (id == tok::kFrame) {
            const auto& w = params_.at("frame_proj.w");
            x.row(t) = in.frames->row(static_cast<Eigen::Index>(fi++)).template cast<T>() * w.transpose() +
                       params_.at("frame_proj.b");
        } else {
            x.row(t) = tok_emb.row(id);
        }
        const auto& p = in.positions[t];
        x.row(t) += pos_off.row(offset_row(p)) + pos_end.row(from_end_row(p)) + pos_seg.row(segment_row(p));
    }
    (void)L;
    return x;
}

template <typename T>
int Transformer<T>::offset_row(const TokenPosition& p) const {
    return static_cast<int>(p.kind) * cfg_.max_seq_len + std::clamp(p.offset, 0, cfg_.max_seq_len - 1);
}

template <typename T>
int Transformer<T>::from_end_row(const TokenPosition& p) const {
    return p.offset_from_end < 0 ? 0 : std::min(p.offset_from_end, cfg_.max_seq_len - 1) + 1;
}

template <typename T>
int Transformer<T>::segment_row(const TokenPosition& p) const {
    return std::clamp(p.segment_from_last, 0, cfg_.max_segments);
}

template <typename T>
Mat<T> Transformer<T>::linear(const std::string& name, const Mat<T>& x, LinearCache* cache) const {
    const auto& w = params_.at(name + ".w");
    Mat<T> y = x * w.transpose();
    y.rowwise() += params_.at(name + ".b").row(0);
    const std::string a_name = name + ".lora_a";
    if (params_.contains(a_name)) {
        const T s = static_cast<T>(lora_->scaling());
        Mat<T> xa = x * params_.at(a_name).transpose();
        y.noalias() += s * (xa * params_.at(name + ".lora_b").transpose());
        if (cache) cache->xa = std::move(xa);
    }
    return y;
}

template <typename T>
Mat<T> Transformer<T>::linear_backward(const std::string& name, const Mat<T>& x, const Mat<T>& dy,
                                       const LinearCache& cache, Gradients<T>& grads) const {
    const auto& w = params_.at(name + ".w");
    Mat<T> dx = dy * w;
    if (auto* g = grad_slot(params_, grads, name + ".w")) g->noalias() += dy.transpose() * x;
    if (auto* g = grad_slot(params_, grads, name + ".b")) *g += dy.colwise().sum();
    const std::string a_name = name + ".lora_a";
    if (params_.contains(a_name)) {
        const T s = static_cast<T>(lora_->scaling());
        const auto& a = params_.at(a_name);
        const auto& b = params_.at(name + ".lora_b");
        const Mat<T> dyb = dy * b;
        dx.noalias() += s * (dyb * a);
        if (auto* g = grad_slot(params_, grads, name + ".lora_b")) g->noalias() += s * (dy.transpose() * cache.xa);
        if (auto* g = grad_slot(params_, grads, a_name)) g->noalias() += s * (dyb.transpose() * x);
    }
    return dx;
}

template <typename T>
Mat<T> Transformer<T>::block(int l, const Mat<T>& h, KvState* kv, LayerCache* cache) const {
    const auto name = [&](const char* p) { return layer_name(l, p); };
    LinearCache scratch;
    const auto lc = [&](LinearCache LayerCache::*m) { return cache ? &(cache->*m) : &scratch; };

    LnCache<T> ln1;
    Mat<T> a = layer_norm(h, params_.at(name("ln1.g")), params_.at(name("ln1.b")), cache ? &cache->ln1 : &ln1);
    Mat<T> q = linear(name("q"), a, lc(&LayerCache::qc));
    Mat<T> k = linear(name("k"), a, lc(&LayerCache::kc));
    Mat<T> v = linear(name("v"), a, lc(&LayerCache::vc));

    const Eigen::Index n = h.rows();
    Eigen::Index past = 0;
    if (kv) {
        auto& kk = kv->k[l];
        auto& vv = kv->v[l];
        past = kk.rows();
        kk.conservativeResize(past + n, Eigen::NoChange);
        vv.conservativeResize(past + n, Eigen::NoChange);
        kk.bottomRows(n) = k;
        vv.bottomRows(n) = v;
    }
    const Mat<T>& keys = kv ? kv->k[l] : k;
    const Mat<T>& vals = kv ? kv->v[l] : v;
    const Eigen::Index m = keys.rows();

    const int heads = cfg_.n_heads, dh = cfg_.d_model / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> ctx(n, cfg_.d_model);
    if (cache) cache->probs.assign(heads, Mat<T>());
    for (int hd = 0; hd < heads; ++hd) {
        Mat<T> s = (q.middleCols(hd * dh, dh) * keys.middleCols(hd * dh, dh).transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index visible = past + i + 1;
            auto row = s.row(i);
            const T mx = row.head(visible).maxCoeff();
            row.head(visible) = (row.head(visible).array() - mx).exp().matrix();
            row.head(visible) /= row.head(visible).sum();
            if (visible < m) row.tail(m - visible).setZero();
        }
        ctx.middleCols(hd * dh, dh).noalias() = s * vals.middleCols(hd * dh, dh);
        if (cache) cache->probs[hd] = std::move(s);
    }
    Mat<T> hm = h + linear(name("o"), ctx, lc(&LayerCache::oc));

    LnCache<T> ln2;
    Mat<T> b = layer_norm(hm, params_.at(name("ln2.g")), params_.at(name("ln2.b")), cache ? &cache->ln2 : &ln2);
    Mat<T> f1 = linear(name("ff1"), b, lc(&LayerCache::f1c));
    Mat<T> g = gelu(f1);
    Mat<T> out = hm + linear(name("ff2"), g, lc(&LayerCache::f2c));
    check_finite(out, l);

    if (cache) {
        cache->a = std::move(a);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->ctx = std::move(ctx);
        cache->b = std::move(b);
        cache->f1 = std::move(f1);
        cache->g = std::move(g);
    }
    return out;
}

template <typename T>
Mat<T> Transformer<T>::run_layers(const ModelInput& in, Cache* cache) const {
    check_input(in);
    Mat<T> h = embed(in, 0);
    check_finite(h, 0);
    if (cache) cache->layers.resize(cfg_.n_layers);
    for (int l = 0; l < cfg_.n_layers; ++l) h = block(l, h, nullptr, cache ? &cache->layers[l] : nullptr);
    LnCache<T> lnf;
    Mat<T> z = layer_norm(h, params_.at("final_ln.g"), params_.at("final_ln.b"), cache ? &cache->lnf : &lnf);
    return z;
}

template <typename T>
Mat<T> Transformer<T>::forward(const ModelInput& in) const {
    const Mat<T> z = run_layers(in, nullptr);
    Mat<T> logits = z * params_.at("out.w").transpose();
    logits.rowwise() += params_.at("out.b").row(0);
    check_finite(logits, cfg_.n_layers);
    return logits;
}

template <typename T>
T token_nll(const Mat<T>& logits, std::span<const int> tokens, std::size_t t) {
    if (t == 0 || t >= tokens.size()) throw ValidationError("token_nll position out of range");
    const auto row = logits.row(static_cast<Eigen::Index>(t - 1));
    return log_sum_exp<T>(row) - row(tokens[t]);
}

namespace {

std::vector<std::size_t> masked_positions(std::span<const int> tokens, std::span<const std::uint8_t> mask) {
    if (mask.size() != tokens.size()) throw ValidationError("loss mask length differs from token length");
    if (!mask.empty() && mask[0]) throw ValidationError("first position has no preceding context");
    std::vector<std::size_t> out;
    for (std::size_t t = 1; t < mask.size(); ++t)
        if (mask[t]) out.push_back(t);
    if (out.empty()) throw ValidationError("empty loss mask");
    return out;
}

std::span<const int> targets_of(std::span<const int> tokens, std::span<const int> labels) {
    if (labels.empty()) return tokens;
    if (labels.size() != tokens.size()) throw ValidationError("labels length differs from token length");
    return labels;
}

}  // namespace

template <typename T>
T sequence_loss(const Mat<T>& logits, std::span<const int> tokens, std::span<const std::uint8_t> mask) {
    const auto pos = masked_positions(tokens, mask);
    T sum = 0;
    for (const auto t : pos) sum += token_nll(logits, tokens, t);
    return sum / static_cast<T>(pos.size());
}

template <typename T>
T Transformer<T>::loss(const ModelInput& in, std::span<const std::uint8_t> mask, std::span<const int> labels) const {
    return sequence_loss(forward(in), targets_of(in.tokens, labels), mask);
}

template <typename T>
LossAndGrad<T> Transformer<T>::loss_and_grad(const ModelInput& in, std::span<const std::uint8_t> mask,
                                             std::span<const int> labels) const {
    const auto targets = targets_of(in.tokens, labels);
    const auto pos = masked_positions(in.tokens, mask);
    Cache cache;
    const Mat<T> z = run_layers(in, &cache);
    const auto n = static_cast<Eigen::Index>(pos.size());
    const int d = cfg_.d_model;

    Mat<T> zr(n, d);
    for (Eigen::Index i = 0; i < n; ++i) zr.row(i) = z.row(static_cast<Eigen::Index>(pos[i] - 1));
    const auto& out_w = params_.at("out.w");
    Mat<T> logits = zr * out_w.transpose();
    logits.rowwise() += params_.at("out.b").row(0);
    check_finite(logits, cfg_.n_layers);

    LossAndGrad<T> res;
    res.masked = pos.size();
    const T inv = T(1) / static_cast<T>(n);
    T sum = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        auto row = logits.row(i);
        const T lse = log_sum_exp<T>(row);
        const int target = targets[pos[i]];
        sum += lse - row(target);
        row = (row.array() - lse).exp().matrix() * inv;
        row(target) -= inv;
    }
    res.loss = sum / static_cast<T>(n);
    if (!std::isfinite(static_cast<double>(res.loss))) throw NumericError("non-finite loss");

    auto& grads = res.grads;
    const Mat<T>& dlogits = logits;
    if (auto* g = grad_slot(params_, grads, "out.w")) g->noalias() += dlogits.transpose() * zr;
    if (auto* g = grad_slot(params_, grads, "out.b")) *g += dlogits.colwise().sum();
    const Mat<T> dzr = dlogits * out_w;
    Mat<T> dz = Mat<T>::Zero(z.rows(), d);
    for (Eigen::Index i = 0; i < n; ++i) dz.row(static_cast<Eigen::Index>(pos[i] - 1)) += dzr.row(i);

    Mat<T> dh = layer_norm_backward(dz, params_.at("final_ln.g"), cache.lnf, grad_slot(params_, grads, "final_ln.g"),
                                    grad_slot(params_, grads, "final_ln.b"));

    const int heads = cfg_.n_heads, dhd = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dhd));
    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        const auto name = [&](const char* p) { return layer_name(l, p); };
        const auto& c = cache.layers[l];

        // feed-forward branch
        Mat<T> dg = linear_backward(name("ff2"), c.g, dh, c.f2c, grads);
        const Mat<T> df1 = (dg.array() * gelu_grad(c.f1).array()).matrix();
        const Mat<T> db = linear_backward(name("ff1"), c.b, df1, c.f1c, grads);
        Mat<T> dhm = dh + layer_norm_backward(db, params_.at(name("ln2.g")), c.ln2, grad_slot(params_, grads, name("ln2.g")),
                                              grad_slot(params_, grads, name("ln2.b")));

        // attention branch
        const Mat<T> dctx = linear_backward(name("o"), c.ctx, dhm, c.oc, grads);
        const auto T_ = c.q.rows();
        Mat<T> dq(T_, d), dk(T_, d), dv(T_, d);
        for (int hd = 0; hd < heads; ++hd) {
            const auto& p = c.probs[hd];
            const auto dctx_h = dctx.middleCols(hd * dhd, dhd);
            const Mat<T> dp = dctx_h * c.v.middleCols(hd * dhd, dhd).transpose();
            dv.middleCols(hd * dhd, dhd).noalias() = p.transpose() * dctx_h;
            const Vec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
            const Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
            dq.middleCols(hd * dhd, dhd).noalias() = ds * c.k.middleCols(hd * dhd, dhd);
            dk.middleCols(hd * dhd, dhd).noalias() = ds.transpose() * c.q.middleCols(hd * dhd, dhd);
        }
        Mat<T> da = linear_backward(name("q"), c.a, dq, c.qc, grads);
        da += linear_backward(name("k"), c.a, dk, c.kc, grads);
        da += linear_backward(name("v"), c.a, dv, c.vc, grads);
        dh = dhm + layer_norm_backward(da, params_.at(name("ln1.g")), c.ln1, grad_slot(params_, grads, name("ln1.g")),
                                       grad_slot(params_, grads, name("ln1.b")));
    }

    // embeddings
    auto* g_tok = grad_slot(params_, grads, "tok_emb");
    auto* g_fw = grad_slot(params_, grads, "frame_proj.w");
    auto* g_fb = grad_slot(params_, grads, "frame_proj.b");
    auto* g_off = grad_slot(params_, grads, "pos.offset");
    auto* g_end = grad_slot(params_, grads, "pos.from_end");
    auto* g_seg = grad_slot(params_, grads, "pos.segment");
    std::size_t fi = 0;
    for (Eigen::Index t = 0; t < dh.rows(); ++t) {
        const int id = in.tokens[t];
        if (id == tok::kFrame) {
            if (g_fw) g_fw->noalias() += dh.row(t).transpose() * in.frames->row(static_cast<Eigen::Index>(fi)).template cast<T>();
            if (g_fb) *g_fb += dh.row(t);
            ++fi;
        } else if (g_tok) {
            g_tok->row(id) += dh.row(t);
        }
        const auto& p = in.positions[t];
        if (g_off) g_off->row(offset_row(p)) += dh.row(t);
        if (g_end) g_end->row(from_end_row(p)) += dh.row(t);
        if (g_seg) g_seg->row(segment_row(p)) += dh.row(t);
    }

    for (const auto& [gname, g] : grads)
        if (!g.allFinite()) throw NumericError("non-finite gradient for " + gname);
    return res;
}

template <typename T>
GenerateResult Transformer<T>::generate(const ModelInput& prompt, std::size_t max_new) const {
    check_input(prompt);
    GenerateResult res;
    const auto budget = static_cast<std::size_t>(cfg_.max_seq_len);
    const auto& out_w = params_.at("out.w");
    const auto& out_b = params_.at("out.b");

    KvState kv;
    kv.k.assign(cfg_.n_layers, Mat<T>(0, cfg_.d_model));
    kv.v.assign(cfg_.n_layers, Mat<T>(0, cfg_.d_model));

    const auto step = [&](Mat<T> h) {
        for (int l = 0; l < cfg_.n_layers; ++l) h = block(l, h, &kv, nullptr);
        const Mat<T> last = h.bottomRows(1);
        const Mat<T> z = layer_norm<T>(last, params_.at("final_ln.g"), params_.at("final_ln.b"), nullptr);
        Mat<T> logits = z * out_w.transpose() + out_b;
        check_finite(logits, cfg_.n_layers);
        // Only bytes and the two terminators are emittable.
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < logits.cols(); ++j) {
            if (tok::is_special(static_cast<int>(j)) && j != tok::kEos && j != tok::kDemoSep) continue;
            if (logits(0, j) > logits(0, best)) best = j;
        }
        return static_cast<int>(best);
    };

    Mat<T> h = embed(prompt, 0);
    check_finite(h, 0);
    std::size_t length = prompt.tokens.size();
    int next = step(std::move(h));
    while (true) {
        if (next == tok::kEos || next == tok::kDemoSep) {
            res.stopped = true;
            break;
        }
        if (res.tokens.size() >= max_new) break;
        res.tokens.push_back(next);
        ++length;
        if (res.tokens.size() >= max_new || length >= budget) break;
        const int id = next;
        const TokenPosition pos{SpanKind::target, static_cast<int>(res.tokens.size() - 1), -1, 0};
        const ModelInput one{std::span<const int>(&id, 1), nullptr, std::span<const TokenPosition>(&pos, 1)};
        next = step(embed(one, 0));
    }
    res.budget_exhausted = !res.stopped;
    return res;
}

template <typename T>
Transformer<T> Transformer<T>::merged() const {
    Transformer out = *this;
    if (!lora_) return out;
    const T s = static_cast<T>(lora_->scaling());
    for (const auto& name : params_.names()) {
        const std::string suffix = ".lora_a";
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
        const std::string base = name.substr(0, name.size() - suffix.size());
        out.params_.at(base + ".w").noalias() += s * (params_.at(base + ".lora_b") * params_.at(name));
        out.params_.erase(name);
        out.params_.erase(base + ".lora_b");
    }
    out.lora_.reset();
    return out;
}

template class ParamSet<double>;
template class ParamSet<float>;
template class Transformer<double>;
template class Transformer<float>;
template double token_nll(const Mat<double>&, std::span<const int>, std::size_t);
template float token_nll(const Mat<float>&, std::span<const int>, std::size_t);
template double sequence_loss(const Mat<double>&, std::span<const int>, std::span<const std::uint8_t>);
template float sequence_loss(const Mat<float>&, std::span<const int>, std::span<const std::uint8_t>);

}  // namespace sicl
