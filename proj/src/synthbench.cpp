#include "sicl/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "sicl/common.hpp"

namespace sicl {

using nlohmann::json;

// ─── Domains ────────────────────────────────────────────────────────────────

namespace {

double cosine_f(const std::vector<float>& a, const std::vector<float>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    return dot / std::sqrt(na * nb);
}

std::vector<float> random_direction(Rng& rng, std::size_t dim, double norm) {
    std::vector<float> v(dim);
    double sq = 0;
    std::vector<double> raw(dim);
    for (auto& x : raw) {
        x = rng.normal();
        sq += x * x;
    }
    const double s = norm / std::sqrt(sq);
    for (std::size_t i = 0; i < dim; ++i) v[i] = static_cast<float>(raw[i] * s);
    return v;
}

}  // namespace

void DomainSpec::validate() const {
    if (noise < 0) throw ValidationError("domain '" + id + "': noise must be non-negative");
    if (frame_rate < 1) throw ValidationError("domain '" + id + "': frame_rate must be at least 1");
    if (prototypes.empty()) throw ValidationError("domain '" + id + "' has no prototypes");
    for (const auto& [c, p] : prototypes)
        if (p.size() != shift.size()) throw ValidationError("domain '" + id + "': prototype width differs from shift");
    for (auto a = prototypes.begin(); a != prototypes.end(); ++a)
        for (auto b = std::next(a); b != prototypes.end(); ++b)
            if (cosine_f(a->second, b->second) >= 0.8)
                throw ValidationError("domain '" + id + "': prototypes of '" + std::string(1, a->first) + "' and '" +
                                      std::string(1, b->first) + "' are too similar");
}

FeatureSeq DomainSpec::render(std::string_view text, Rng& rng) const {
    const auto d = static_cast<Eigen::Index>(dim());
    FeatureSeq f(static_cast<Eigen::Index>(text.size()) * frame_rate, d);
    Eigen::Index r = 0;
    for (const char c : text) {
        const auto it = prototypes.find(c);
        if (it == prototypes.end()) throw ValidationError("domain '" + id + "' has no prototype for '" + std::string(1, c) + "'");
        for (int k = 0; k < frame_rate; ++k, ++r) {
            for (Eigen::Index j = 0; j < d; ++j) {
                const double n = noise > 0 ? noise * rng.normal() : 0.0;
                f(r, j) = static_cast<float>(double(it->second[j]) + double(shift[j]) + n);
            }
        }
    }
    return f;
}

std::string oracle_decode(const DomainSpec& domain, const FeatureSeq& features) {
    std::string out;
    const auto d = static_cast<Eigen::Index>(domain.dim());
    for (Eigen::Index r = 0; r + domain.frame_rate <= features.rows(); r += domain.frame_rate) {
        std::vector<double> mean(d, 0.0);
        for (int k = 0; k < domain.frame_rate; ++k)
            for (Eigen::Index j = 0; j < d; ++j) mean[j] += features(r + k, j) - domain.shift[j];
        char best = '?';
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& [c, p] : domain.prototypes) {
            double dist = 0;
            for (Eigen::Index j = 0; j < d; ++j) {
                const double diff = mean[j] / domain.frame_rate - p[j];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        out.push_back(best);
    }
    return out;
}

std::vector<double> recover_shift(const DomainSpec& domain, const FeatureSeq& features, std::string_view transcript) {
    if (features.rows() != static_cast<Eigen::Index>(transcript.size()) * domain.frame_rate)
        throw ValidationError("transcript does not match the frame count");
    const auto d = static_cast<Eigen::Index>(domain.dim());
    std::vector<double> s(d, 0.0);
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
        const auto& p = domain.prototypes.at(transcript[r / domain.frame_rate]);
        for (Eigen::Index j = 0; j < d; ++j) s[j] += features(r, j) - p[j];
    }
    for (auto& x : s) x /= static_cast<double>(features.rows());
    return s;
}

// ─── Tasks ──────────────────────────────────────────────────────────────────

std::string SynthTaskSpec::make_target(std::string_view text) const {
    switch (kind) {
        case TaskKind::asr: return std::string(text);
        case TaskKind::st: {
            std::string out(text.rbegin(), text.rend());
            for (auto& c : out)
                if (const auto it = substitution.find(c); it != substitution.end()) c = it->second;
            return out;
        }
        case TaskKind::sqa: {
            const auto n = static_cast<std::size_t>(std::count(text.begin(), text.end(), marker));
            return choice_label(std::min<std::size_t>(n, 3));
        }
    }
    return {};
}

std::vector<std::string> SynthTaskSpec::choices() const {
    if (kind != TaskKind::sqa) return {};
    return {"0", "1", "2", "3+"};
}

TaskDataset gen_dataset(const TaskId& task, const SynthTaskSpec& spec, const DomainSpec& domain, std::size_t n,
                        std::uint64_t seed) {
    if (n < 2) throw ValidationError("gen_dataset needs at least 2 samples");
    if (spec.lexicon.empty()) throw ValidationError("empty lexicon");
    if (spec.min_words < 1 || spec.max_words < spec.min_words) throw ValidationError("bad word count range");
    domain.validate();

    TaskDataset ds;
    ds.task = task;
    ds.kind = spec.kind;
    ds.leave_one_out = spec.leave_one_out;
    std::vector<Sample> all;
    all.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        const std::size_t words = spec.min_words + rng.below(spec.max_words - spec.min_words + 1);
        std::string text;
        for (std::size_t w = 0; w < words; ++w) {
            if (w) text.push_back(' ');
            text += spec.lexicon[rng.below(spec.lexicon.size())];
        }
        Sample s;
        s.id = task.str() + "-" + std::to_string(i);
        s.task = task;
        s.input = domain.render(text, rng);
        s.target = spec.make_target(text);
        s.choices = spec.choices();
        s.tags["domain"] = domain.id;
        s.tags["words"] = std::to_string(words);
        if (spec.kind == TaskKind::sqa)
            s.tags["count"] = std::to_string(std::count(text.begin(), text.end(), spec.marker));
        all.push_back(std::move(s));
    }
    if (spec.leave_one_out) {
        ds.query_set = all;
        ds.demo_pool = std::move(all);
    } else {
        auto nq = static_cast<std::size_t>(std::llround(spec.query_fraction * static_cast<double>(n)));
        nq = std::clamp<std::size_t>(nq, 1, n - 1);
        ds.query_set.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nq));
        ds.demo_pool.assign(all.begin() + static_cast<std::ptrdiff_t>(nq), all.end());
    }
    ds.validate();
    return ds;
}

// ─── World ──────────────────────────────────────────────────────────────────

void WorldConfig::validate() const {
    if (feature_dim < 2) throw ValidationError("feature_dim must be at least 2");
    if (frame_rate < 1) throw ValidationError("frame_rate must be at least 1");
    if (alphabet.size() < 4) throw ValidationError("alphabet needs at least 4 characters");
    if (std::set<char>(alphabet.begin(), alphabet.end()).size() != alphabet.size() || alphabet.find(' ') != std::string::npos)
        throw ValidationError("alphabet characters must be distinct and exclude space");
    if (min_word_len < 1 || max_word_len < min_word_len) throw ValidationError("bad word length range");
    if (min_words < 1 || max_words < min_words) throw ValidationError("bad word count range");
    if (lexicon_size < 2) throw ValidationError("lexicon_size must be at least 2");
    if (noise < 0) throw ValidationError("noise must be non-negative");
    if (!(scale > 0)) throw ValidationError("scale must be positive");
    if (asr_groups == 0) throw ValidationError("asr_groups must be positive");
    if (st_sizes.empty()) throw ValidationError("at least one ST pair is required");
    if (2 * st_swaps > alphabet.size()) throw ValidationError("too many ST swaps for the alphabet");
    if (eval_size < 1 || eval_pool_size < 8 || sft_size < 2) throw ValidationError("eval sizes too small");
    if (sft_lexicon_size < 1 || sft_lexicon_size > lexicon_size)
        throw ValidationError("sft_lexicon_size must lie in [1, lexicon_size]");
}

void to_json(json& j, const WorldConfig& c) {
    j = {{"seed", c.seed},
         {"feature_dim", c.feature_dim},
         {"frame_rate", c.frame_rate},
         {"alphabet", c.alphabet},
         {"lexicon_size", c.lexicon_size},
         {"min_word_len", c.min_word_len},
         {"max_word_len", c.max_word_len},
         {"min_words", c.min_words},
         {"max_words", c.max_words},
         {"noise", c.noise},
         {"scale", c.scale},
         {"backbone_domains", c.backbone_domains},
         {"backbone_size", c.backbone_size},
         {"backbone_max_shift", c.backbone_max_shift},
         {"backbone_permuted_fraction", c.backbone_permuted_fraction},
         {"backbone_st_domains", c.backbone_st_domains},
         {"backbone_st_weight", c.backbone_st_weight},
         {"asr_groups", c.asr_groups},
         {"asr_size", c.asr_size},
         {"asr_min_shift", c.asr_min_shift},
         {"asr_max_shift", c.asr_max_shift},
         {"st_sizes", c.st_sizes},
         {"st_swaps", c.st_swaps},
         {"sqa_size", c.sqa_size},
         {"eval_size", c.eval_size},
         {"eval_pool_size", c.eval_pool_size},
         {"eval_shift", c.eval_shift},
         {"sft_size", c.sft_size},
         {"sft_lexicon_size", c.sft_lexicon_size}};
}

void from_json(const json& j, WorldConfig& c) {
    WorldConfig d;
#define SICL_GET(field) c.field = j.value(#field, d.field)
    SICL_GET(seed);
    SICL_GET(feature_dim);
    SICL_GET(frame_rate);
    SICL_GET(alphabet);
    SICL_GET(lexicon_size);
    SICL_GET(min_word_len);
    SICL_GET(max_word_len);
    SICL_GET(min_words);
    SICL_GET(max_words);
    SICL_GET(noise);
    SICL_GET(scale);
    SICL_GET(backbone_domains);
    SICL_GET(backbone_size);
    SICL_GET(backbone_max_shift);
    SICL_GET(backbone_permuted_fraction);
    SICL_GET(backbone_st_domains);
    SICL_GET(backbone_st_weight);
    SICL_GET(asr_groups);
    SICL_GET(asr_size);
    SICL_GET(asr_min_shift);
    SICL_GET(asr_max_shift);
    SICL_GET(st_sizes);
    SICL_GET(st_swaps);
    SICL_GET(sqa_size);
    SICL_GET(eval_size);
    SICL_GET(eval_pool_size);
    SICL_GET(eval_shift);
    SICL_GET(sft_size);
    SICL_GET(sft_lexicon_size);
#undef SICL_GET
}

std::vector<TaskId> World::tasks_with_prefix(std::string_view prefix) const {
    std::vector<TaskId> out;
    for (const auto& [id, _] : datasets)
        if (id.str().rfind(prefix, 0) == 0) out.push_back(id);
    return out;
}

namespace {

std::size_t scaled(std::size_t n, double scale) {
    return std::max<std::size_t>(8, static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale)));
}

std::map<char, std::vector<float>> make_prototypes(Rng& rng, const std::string& symbols, std::size_t dim) {
    std::map<char, std::vector<float>> protos;
    for (const char c : symbols) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) throw ValidationError("cannot place distinct prototypes; raise feature_dim");
            auto p = random_direction(rng, dim, std::sqrt(static_cast<double>(dim)));
            bool ok = true;
            for (const auto& [_, q] : protos) ok = ok && cosine_f(p, q) < 0.8;
            if (ok) {
                protos[c] = std::move(p);
                break;
            }
        }
    }
    return protos;
}

std::map<char, char> random_swaps(Rng& rng, const std::string& alphabet, std::size_t swaps) {
    std::vector<char> letters(alphabet.begin(), alphabet.end());
    rng.shuffle(letters);
    std::map<char, char> sub;
    for (std::size_t i = 0; i < swaps; ++i) {
        sub[letters[2 * i]] = letters[2 * i + 1];
        sub[letters[2 * i + 1]] = letters[2 * i];
    }
    return sub;
}

}  // namespace

World build_world(const WorldConfig& cfg) {
    cfg.validate();
    World w;
    w.config = cfg;
    Rng rng(derive_seed(cfg.seed, "world"));

    std::set<std::string> words;
    const std::size_t possible = [&] {
        std::size_t total = 0, p = 1;
        for (std::size_t len = 1; len <= cfg.max_word_len; ++len) {
            p *= cfg.alphabet.size();
            if (len >= cfg.min_word_len) total += p;
        }
        return total;
    }();
    if (possible < cfg.lexicon_size) throw ValidationError("lexicon_size exceeds the number of possible words");
    while (words.size() < cfg.lexicon_size) {
        const std::size_t len = cfg.min_word_len + rng.below(cfg.max_word_len - cfg.min_word_len + 1);
        std::string word;
        for (std::size_t i = 0; i < len; ++i) word.push_back(cfg.alphabet[rng.below(cfg.alphabet.size())]);
        words.insert(word);
    }
    w.lexicon.assign(words.begin(), words.end());

    const std::string symbols = cfg.alphabet + " ";
    const auto base_protos = make_prototypes(rng, symbols, cfg.feature_dim);

    auto domain = [&](const std::string& id, double shift_norm, bool permuted) {
        Rng drng(derive_seed(cfg.seed, "domain/" + id));
        DomainSpec d;
        d.id = id;
        d.prototypes = base_protos;
        if (permuted) {
            std::vector<char> letters(cfg.alphabet.begin(), cfg.alphabet.end());
            auto shuffled = letters;
            drng.shuffle(shuffled);
            for (std::size_t i = 0; i < letters.size(); ++i) d.prototypes[letters[i]] = base_protos.at(shuffled[i]);
            d.tier = 1;
        }
        d.shift = random_direction(drng, cfg.feature_dim, shift_norm);
        d.noise = cfg.noise;
        d.frame_rate = cfg.frame_rate;
        return d;
    };
    auto add = [&](const std::string& id, const SynthTaskSpec& spec, const DomainSpec& d, std::size_t n) {
        const TaskId task(id);
        w.domains[task] = d;
        w.datasets[task] = std::make_shared<const TaskDataset>(gen_dataset(task, spec, d, n, derive_seed(cfg.seed, "data/" + id)));
    };

    SynthTaskSpec asr;
    asr.kind = TaskKind::asr;
    asr.lexicon = w.lexicon;
    asr.min_words = cfg.min_words;
    asr.max_words = cfg.max_words;

    // Backbone corpus: many mildly shifted domains, some with permuted maps.
    for (std::size_t i = 0; i < cfg.backbone_domains; ++i) {
        const std::string id = "backbone.d" + std::to_string(i);
        Rng r(derive_seed(cfg.seed, "backbone/" + std::to_string(i)));
        const bool permuted = r.uniform() < cfg.backbone_permuted_fraction;
        add(id, asr, domain(id, r.uniform(0.0, cfg.backbone_max_shift), permuted), cfg.backbone_size);
    }

    // High-resource ASR, one task per speaker group.
    const std::size_t asr_total = scaled(cfg.asr_size, cfg.scale);
    for (std::size_t g = 0; g < cfg.asr_groups; ++g) {
        const std::string id = "asr_en.g" + std::to_string(g);
        Rng r(derive_seed(cfg.seed, "asr_group/" + std::to_string(g)));
        const std::size_t n = asr_total / cfg.asr_groups + (g < asr_total % cfg.asr_groups ? 1 : 0);
        add(id, asr, domain(id, r.uniform(cfg.asr_min_shift, cfg.asr_max_shift), false), std::max<std::size_t>(n, 2));
    }

    // Translation pairs: reversal plus a per-pair letter substitution.
    SynthTaskSpec st = asr;
    st.kind = TaskKind::st;
    for (std::size_t p = 0; p < cfg.st_sizes.size(); ++p) {
        const std::string id = "st.p" + std::to_string(p);
        Rng r(derive_seed(cfg.seed, "st_pair/" + std::to_string(p)));
        st.substitution = random_swaps(r, cfg.alphabet, cfg.st_swaps);
        add(id, st, domain(id, r.uniform(cfg.asr_min_shift, cfg.asr_max_shift), false), scaled(cfg.st_sizes[p], cfg.scale));
    }
    for (std::size_t i = 0; i < cfg.backbone_st_domains; ++i) {
        const std::string id = "backbone.st" + std::to_string(i);
        Rng r(derive_seed(cfg.seed, "backbone_st/" + std::to_string(i)));
        st.substitution = random_swaps(r, cfg.alphabet, cfg.st_swaps);
        add(id, st, domain(id, r.uniform(0.0, cfg.backbone_max_shift), false), cfg.backbone_size);
    }

    SynthTaskSpec sqa = asr;
    sqa.kind = TaskKind::sqa;
    sqa.marker = cfg.alphabet[0];
    sqa.leave_one_out = true;
    {
        Rng r(derive_seed(cfg.seed, "sqa"));
        add("sqa", sqa, domain("sqa", r.uniform(cfg.asr_min_shift, cfg.asr_max_shift), false), scaled(cfg.sqa_size, cfg.scale));
    }

    // Held-out evaluation suites. Each has its own pool; shift_a's pool is
    // also the direct fine-tuning set.
    const std::size_t eval_n = cfg.eval_size + cfg.eval_pool_size;
    auto eval_split = [&](SynthTaskSpec spec) {
        spec.query_fraction = static_cast<double>(cfg.eval_size) / static_cast<double>(eval_n);
        return spec;
    };
    Rng er(derive_seed(cfg.seed, "eval"));
    const auto dir_a = random_direction(er, cfg.feature_dim, 1.0);
    const auto jitter = random_direction(er, cfg.feature_dim, 0.5);
    DomainSpec shift_a = domain("eval.shift_a", 0.0, false);
    DomainSpec shift_b = domain("eval.shift_b", 0.0, false);
    std::vector<float> b_dir(cfg.feature_dim);
    double b_norm = 0;
    for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
        b_dir[j] = -dir_a[j] + jitter[j];
        b_norm += double(b_dir[j]) * b_dir[j];
    }
    for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
        shift_a.shift[j] = static_cast<float>(cfg.eval_shift * dir_a[j]);
        shift_b.shift[j] = static_cast<float>(cfg.eval_shift * b_dir[j] / std::sqrt(b_norm));
    }
    add("eval.shift_a", eval_split(asr), shift_a, eval_n);
    add("eval.shift_b", eval_split(asr), shift_b, eval_n);
    add("eval.perm", eval_split(asr), domain("eval.perm", 0.5 * cfg.eval_shift, true), eval_n);
    {
        auto spec = eval_split(st);
        Rng r(derive_seed(cfg.seed, "st_unseen"));
        spec.substitution = random_swaps(r, cfg.alphabet, cfg.st_swaps);
        add("eval.st_unseen", spec, domain("eval.st_unseen", 0.5 * cfg.eval_shift, false), eval_n);
    }
    add("eval.sqa", eval_split(sqa), domain("eval.sqa", 0.5 * cfg.eval_shift, false), eval_n);
    {
        // Override leave-one-out for the SQA eval: held-out queries, separate pool.
        auto ds = std::make_shared<TaskDataset>(*w.datasets.at(TaskId("eval.sqa")));
        if (ds->leave_one_out) {
            const auto nq = cfg.eval_size;
            std::vector<Sample> all = ds->query_set;
            ds->query_set.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nq));
            ds->demo_pool.assign(all.begin() + static_cast<std::ptrdiff_t>(nq), all.end());
            ds->leave_one_out = false;
        }
        w.datasets[TaskId("eval.sqa")] = ds;
    }

    // Direct fine-tuning data: shift_a recordings over a narrow slice of the lexicon.
    {
        auto spec = asr;
        spec.lexicon.assign(w.lexicon.begin(), w.lexicon.begin() + static_cast<std::ptrdiff_t>(cfg.sft_lexicon_size));
        spec.leave_one_out = true;
        add("sft.shift_a", spec, shift_a, cfg.sft_size);
    }
    return w;
}

// ─── Presets ────────────────────────────────────────────────────────────────

json to_json(const ExperimentBundle& b) {
    json suites = json::array();
    for (const auto& s : b.eval_suites) suites.push_back(s.str());
    json j{{"name", b.name},         {"mixture", b.mixture}, {"eval_suites", suites},
           {"episode", b.episode},   {"train", b.train},     {"full_parameters", b.full_parameters},
           {"lora", b.lora},         {"model", b.model}};
    j["init_from"] = b.init_from ? json(*b.init_from) : json(nullptr);
    return j;
}

ExperimentBundle bundle_from_json(const json& j) {
    ExperimentBundle b;
    b.name = j.at("name").get<std::string>();
    b.mixture = j.at("mixture").get<MixtureConfig>();
    for (const auto& s : j.at("eval_suites")) b.eval_suites.emplace_back(s.get<std::string>());
    b.episode = j.at("episode").get<EpisodeConfig>();
    b.train = j.at("train").get<TrainConfig>();
    b.full_parameters = j.value("full_parameters", false);
    if (j.contains("init_from") && !j.at("init_from").is_null()) b.init_from = j.at("init_from").get<std::string>();
    b.lora = j.at("lora").get<LoraConfig>();
    b.model = j.at("model").get<ModelConfig>();
    return b;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"base", "sicl_at1", "sicl_at2", "sicl_at3", "sft_baseline", "cv_transfer"};
    return names;
}

ExperimentBundle preset_experiment(const std::string& name, const WorldConfig& world) {
    if (std::find(preset_names().begin(), preset_names().end(), name) == preset_names().end())
        throw ValidationError("unknown preset '" + name + "'");
    world.validate();

    ExperimentBundle b;
    b.name = name;
    b.eval_suites = {TaskId("eval.shift_a"), TaskId("eval.shift_b"), TaskId("eval.perm"), TaskId("eval.st_unseen"),
                     TaskId("eval.sqa")};
    b.model.feature_dim = static_cast<int>(world.feature_dim);
    b.model.d_model = 64;
    b.model.n_layers = 2;
    b.model.n_heads = 4;
    b.model.d_ff = 128;
    b.model.max_seq_len = 256;
    b.model.max_segments = 8;
    b.model.seed = derive_seed(world.seed, "model");
    b.lora.seed = derive_seed(world.seed, "lora/" + name);
    b.episode.seed = derive_seed(world.seed, "episodes/" + name);
    b.episode.k = 4;
    b.episode.max_seq_len = static_cast<std::size_t>(b.model.max_seq_len);
    b.train.seed = b.episode.seed;
    b.train.learning_rate = 1e-3;
    b.train.warmup_steps = 100;
    b.train.episodes_per_step = 4;

    const auto asr_entries = [&] {
        std::vector<MixtureEntry> e;
        for (std::size_t g = 0; g < world.asr_groups; ++g) e.push_back({TaskId("asr_en.g" + std::to_string(g)), 0, 1.0});
        return e;
    };
    const auto st_entries = [&] {
        std::vector<MixtureEntry> e;
        for (std::size_t p = 0; p < world.st_sizes.size(); ++p) e.push_back({TaskId("st.p" + std::to_string(p)), 0, 1.0});
        return e;
    };

    if (name == "base") {
        b.mixture.name = "backbone";
        b.mixture.weighting = MixtureWeighting::explicit_weights;
        for (std::size_t i = 0; i < world.backbone_domains; ++i)
            b.mixture.entries.push_back({TaskId("backbone.d" + std::to_string(i)), 0, 1.0});
        for (std::size_t i = 0; i < world.backbone_st_domains; ++i)
            b.mixture.entries.push_back({TaskId("backbone.st" + std::to_string(i)), 0, world.backbone_st_weight});
        b.full_parameters = true;
        b.episode.randomize_k = true;
        b.episode.k_min = 0;
        b.train.total_steps = 15000;
        b.train.warmup_steps = 200;
        return b;
    }

    b.init_from = "base";
    b.train.total_steps = 1500;
    if (name == "sicl_at1" || name == "cv_transfer") {
        b.mixture.name = name == "sicl_at1" ? "SICL-AT1" : "CV";
        b.mixture.entries = asr_entries();
        if (name == "cv_transfer") b.train.mode = TrainMode::sft;
    } else if (name == "sicl_at2" || name == "sicl_at3") {
        MixtureConfig at1{"SICL-AT1", MixtureWeighting::uniform, asr_entries()};
        const auto st = st_entries();
        b.mixture = at1.plus("SICL-AT2", st);
        if (name == "sicl_at3") {
            const std::vector<MixtureEntry> sqa{{TaskId("sqa"), 0, 1.0}};
            b.mixture = b.mixture.plus("SICL-AT3", sqa);
        }
    } else if (name == "sft_baseline") {
        b.mixture.name = "SFT-shift_a";
        b.mixture.entries = {{TaskId("sft.shift_a"), 0, 1.0}};
        b.train.mode = TrainMode::sft;
        b.train.total_steps = 500;
    }
    return b;
}

}  // namespace sicl
