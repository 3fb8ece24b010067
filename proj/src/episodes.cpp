#include "sicl/episodes.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sicl {

using nlohmann::json;

std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
    return ids;
}

std::string decode_bytes(std::span<const int> ids) {
    std::string out;
    for (int id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
}

// ─── Templates ──────────────────────────────────────────────────────────────

PromptTemplate PromptTemplate::parse(std::string_view text) {
    PromptTemplate t;
    t.source_ = std::string(text);
    std::string literal;
    auto flush = [&] {
        if (!literal.empty()) t.parts_.push_back({Piece::literal, literal});
        literal.clear();
    };
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == '{') {
            const auto close = text.find('}', i);
            if (close == std::string_view::npos) throw ValidationError("unterminated slot in template");
            const auto name = text.substr(i + 1, close - i - 1);
            Piece p;
            if (name == "input") {
                p = Piece::input;
            } else if (name == "choices") {
                p = Piece::choices;
            } else if (name == "sep") {
                p = Piece::sep;
            } else if (name == "target") {
                p = Piece::target;
            } else if (name == "demo_sep") {
                p = Piece::demo_sep;
            } else {
                throw ValidationError("unknown template slot '{" + std::string(name) + "}'");
            }
            flush();
            t.parts_.push_back({p, {}});
            i = close + 1;
        } else {
            literal.push_back(text[i++]);
        }
    }
    flush();

    auto count = [&](Piece p) {
        return std::count_if(t.parts_.begin(), t.parts_.end(), [p](const Part& x) { return x.piece == p; });
    };
    auto pos = [&](Piece p) {
        return std::find_if(t.parts_.begin(), t.parts_.end(), [p](const Part& x) { return x.piece == p; }) -
               t.parts_.begin();
    };
    if (count(Piece::input) != 1 || count(Piece::sep) != 1 || count(Piece::target) != 1 ||
        count(Piece::demo_sep) != 1 || count(Piece::choices) > 1) {
        throw ValidationError("template needs exactly one each of {input} {sep} {target} {demo_sep}");
    }
    const auto n = static_cast<std::ptrdiff_t>(t.parts_.size());
    if (pos(Piece::target) != n - 2 || pos(Piece::demo_sep) != n - 1) {
        throw ValidationError("template must end with {target}{demo_sep}");
    }
    if (pos(Piece::input) > pos(Piece::sep)) throw ValidationError("{input} must precede {sep}");
    return t;
}

PromptTemplate PromptTemplate::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open template '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    return parse(text);
}

PromptTemplate PromptTemplate::default_for(TaskKind kind) {
    switch (kind) {
        case TaskKind::asr: return parse("{input}{sep}{target}{demo_sep}");
        case TaskKind::st: return parse("{input}{sep}>{target}{demo_sep}");
        case TaskKind::sqa: return parse("{input}{choices}{sep}{target}{demo_sep}");
    }
    return parse("{input}{sep}{target}{demo_sep}");
}

const PromptTemplate& TemplateSet::get(TaskKind kind) const {
    const auto it = by_kind.find(kind);
    if (it == by_kind.end()) throw ValidationError("no template for task kind " + to_string(kind));
    return it->second;
}

TemplateSet TemplateSet::defaults() {
    TemplateSet s;
    for (auto k : {TaskKind::asr, TaskKind::st, TaskKind::sqa}) s.by_kind.emplace(k, PromptTemplate::default_for(k));
    return s;
}

// ─── Assembly ───────────────────────────────────────────────────────────────

std::size_t EncodedSequence::mask_count() const {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

bool operator==(const EncodedSequence& a, const EncodedSequence& b) {
    return a.tokens == b.tokens && a.loss_mask == b.loss_mask && a.positions == b.positions &&
           a.prompt_length == b.prompt_length && a.frames.rows() == b.frames.rows() &&
           a.frames.cols() == b.frames.cols() &&
           std::memcmp(a.frames.data(), b.frames.data(), sizeof(float) * a.frames.size()) == 0;
}

namespace {

enum class Role { demo, query, query_prompt };

struct Builder {
    std::vector<int> tokens;
    std::vector<std::uint8_t> mask;
    std::vector<TokenPosition> positions;
    std::vector<float> frame_data;
    Eigen::Index frame_cols = 0;
    std::size_t prompt_length = 0;

    void push(int token, TokenPosition pos, bool supervised) {
        tokens.push_back(token);
        positions.push_back(pos);
        mask.push_back(supervised ? 1 : 0);
    }

    void push_text(std::string_view text, SpanKind kind, int segment, bool supervised) {
        const int n = static_cast<int>(text.size());
        for (int i = 0; i < n; ++i) {
            TokenPosition p{kind, i, kind == SpanKind::input ? n - 1 - i : -1, segment};
            push(static_cast<unsigned char>(text[i]), p, supervised);
        }
    }

    void render(const Sample& s, const PromptTemplate& tmpl, int segment, Role role, bool supervise_demos) {
        const bool supervised = role == Role::query || (role == Role::demo && supervise_demos);
        for (const auto& part : tmpl.parts()) {
            switch (part.piece) {
                case PromptTemplate::Piece::input:
                    if (s.has_features()) {
                        const auto& f = s.features();
                        if (frame_cols != 0 && f.cols() != frame_cols) throw ValidationError("inconsistent feature widths");
                        frame_cols = f.cols();
                        const int n = static_cast<int>(f.rows());
                        for (int i = 0; i < n; ++i) {
                            push(tok::kFrame, {SpanKind::input, i, n - 1 - i, segment}, false);
                        }
                        frame_data.insert(frame_data.end(), f.data(), f.data() + f.size());
                    } else {
                        push_text(s.text_input(), SpanKind::input, segment, false);
                    }
                    break;
                case PromptTemplate::Piece::choices: {
                    std::string text;
                    for (std::size_t c = 0; c < s.choices.size(); ++c) {
                        text += " " + choice_label(c) + ") " + s.choices[c];
                    }
                    push_text(text, SpanKind::control, segment, false);
                    break;
                }
                case PromptTemplate::Piece::sep:
                    push(tok::kSep, {SpanKind::control, 0, -1, segment}, false);
                    break;
                case PromptTemplate::Piece::literal:
                    push_text(part.text, SpanKind::control, segment, false);
                    break;
                case PromptTemplate::Piece::target:
                    if (role != Role::demo) prompt_length = tokens.size();
                    if (role == Role::query_prompt) return;
                    push_text(s.target, SpanKind::target, segment, supervised);
                    break;
                case PromptTemplate::Piece::demo_sep:
                    push(role == Role::demo ? tok::kDemoSep : tok::kEos,
                         {SpanKind::target, static_cast<int>(s.target.size()), -1, segment}, supervised);
                    break;
            }
        }
    }

    EncodedSequence finish() {
        EncodedSequence seq;
        seq.tokens = std::move(tokens);
        seq.loss_mask = std::move(mask);
        seq.positions = std::move(positions);
        seq.prompt_length = prompt_length;
        const Eigen::Index rows = frame_cols ? static_cast<Eigen::Index>(frame_data.size()) / frame_cols : 0;
        seq.frames = FeatureSeq(rows, frame_cols);
        if (rows) std::memcpy(seq.frames.data(), frame_data.data(), sizeof(float) * frame_data.size());
        return seq;
    }
};

EncodedSequence render_all(std::span<const Demo> demos, const Sample& query, const PromptTemplate& tmpl, bool prompt_only,
                           bool supervise_demos) {
    Builder b;
    const int nseg = static_cast<int>(demos.size());
    b.push(tok::kBos, {SpanKind::control, 0, -1, nseg + 1}, false);
    for (int i = 0; i < nseg; ++i) b.render(*demos[i].sample, tmpl, nseg - i, Role::demo, supervise_demos);
    b.render(query, tmpl, 0, prompt_only ? Role::query_prompt : Role::query, supervise_demos);
    return b.finish();
}

Assembled assemble_impl(std::span<const Demo> demos, const Sample& query, const PromptTemplate& tmpl,
                        const AssembleOptions& opt, bool prompt_only) {
    if (opt.reserve >= opt.max_seq_len) throw ValidationError("reserve exceeds the sequence budget");
    const std::size_t budget = opt.max_seq_len - opt.reserve;
    Assembled out;
    out.kept.assign(demos.begin(), demos.end());
    for (const auto& d : out.kept) {
        if (!d.sample) throw ValidationError("null demonstration");
    }
    for (;;) {
        out.seq = render_all(out.kept, query, tmpl, prompt_only, opt.supervise_demos);
        if (out.seq.size() <= budget) break;
        if (out.kept.empty()) {
            throw ValidationError("query '" + query.id + "' needs " + std::to_string(out.seq.size()) +
                                  " tokens; budget is " + std::to_string(budget));
        }
        // Lowest similarity goes first; among equals, the one farthest from the query.
        auto victim = std::min_element(out.kept.begin(), out.kept.end(),
                                       [](const Demo& a, const Demo& b) { return a.similarity < b.similarity; });
        out.kept.erase(victim);
        ++out.dropped;
    }
    return out;
}

}  // namespace

Assembled assemble_sequence(std::span<const Demo> demos, const Sample& query, const PromptTemplate& tmpl,
                            const AssembleOptions& opt) {
    return assemble_impl(demos, query, tmpl, opt, false);
}

Assembled make_eval_prompt(std::span<const Demo> demos, const Sample& query, const PromptTemplate& tmpl,
                           const AssembleOptions& opt) {
    return assemble_impl(demos, query, tmpl, opt, true);
}

std::vector<Demo> order_demos(std::vector<Demo> demos, DemoOrder order, Rng& rng) {
    const auto desc = [](const Demo& a, const Demo& b) { return a.similarity > b.similarity; };
    switch (order) {
        case DemoOrder::similar_first: std::stable_sort(demos.begin(), demos.end(), desc); break;
        case DemoOrder::similar_last:
            std::stable_sort(demos.begin(), demos.end(), desc);
            std::reverse(demos.begin(), demos.end());
            break;
        case DemoOrder::random: rng.shuffle(demos); break;
    }
    return demos;
}

// ─── Config serialisation ───────────────────────────────────────────────────

std::string to_string(DemoOrder order) {
    switch (order) {
        case DemoOrder::similar_last: return "similar-last";
        case DemoOrder::similar_first: return "similar-first";
        case DemoOrder::random: return "random";
    }
    return "similar-last";
}

DemoOrder demo_order_from_string(std::string_view name) {
    if (name == "similar-last") return DemoOrder::similar_last;
    if (name == "similar-first") return DemoOrder::similar_first;
    if (name == "random") return DemoOrder::random;
    throw ValidationError("unknown demo order '" + std::string(name) + "'");
}

void to_json(json& j, const EpisodeConfig& c) {
    j = json{{"k", c.k},
             {"randomize_k", c.randomize_k},
             {"k_min", c.k_min},
             {"max_seq_len", c.max_seq_len},
             {"demo_order", to_string(c.demo_order)},
             {"seed", c.seed},
             {"supervise_demos", c.supervise_demos},
             {"embed_dim", c.embed_dim}};
}

void from_json(const json& j, EpisodeConfig& c) {
    const EpisodeConfig d;
    c.k = j.value("k", d.k);
    c.randomize_k = j.value("randomize_k", d.randomize_k);
    c.k_min = j.value("k_min", d.k_min);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.demo_order = demo_order_from_string(j.value("demo_order", to_string(d.demo_order)));
    c.seed = j.value("seed", d.seed);
    c.supervise_demos = j.value("supervise_demos", d.supervise_demos);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
}

// ─── Episodes ───────────────────────────────────────────────────────────────

bool same_episode(const Episode& a, const Episode& b) {
    if (a.task != b.task || a.query->id != b.query->id || a.demos.size() != b.demos.size()) return false;
    for (std::size_t i = 0; i < a.demos.size(); ++i) {
        if (a.demos[i].sample->id != b.demos[i].sample->id || a.demos[i].similarity != b.demos[i].similarity) {
            return false;
        }
    }
    return a.seq == b.seq;
}

json EpisodeStreamState::to_json() const {
    return json{{"rng", rng.serialize()}, {"epoch", epoch}, {"cursor", cursor}};
}

EpisodeStreamState EpisodeStreamState::from_json(const json& j) {
    EpisodeStreamState s;
    s.rng = Rng::deserialize(j.at("rng").get<std::string>());
    s.epoch = j.at("epoch").get<std::vector<std::uint64_t>>();
    s.cursor = j.at("cursor").get<std::vector<std::uint64_t>>();
    return s;
}

std::vector<EmbeddingIndex> build_indexes(const Mixture& mixture, std::size_t dim) {
    std::vector<EmbeddingIndex> out;
    out.reserve(mixture.num_tasks());
    for (std::size_t i = 0; i < mixture.num_tasks(); ++i) out.push_back(build_pool_index(mixture.dataset(i), dim));
    return out;
}

std::vector<Demo> retrieve_demos(const TaskDataset& ds, const EmbeddingIndex& index, std::span<const double> key,
                                 std::size_t k, const std::string& query_id) {
    if (k == 0) return {};
    std::unordered_set<std::string> exclude;
    if (ds.leave_one_out) exclude.insert(query_id);
    const std::size_t effective = index.size() - (index.contains(query_id) && ds.leave_one_out ? 1 : 0);
    if (k > effective) {
        throw ValidationError("task '" + ds.task.str() + "': pool of " + std::to_string(effective) +
                              " after exclusion is smaller than k=" + std::to_string(k) +
                              "; reduce k or enlarge the pool");
    }
    const auto hits = index.knn(key, k, exclude);
    std::vector<Demo> demos;
    demos.reserve(hits.size());
    for (const auto& h : hits) {
        const Sample& s = ds.demo_pool.at(index.row(h.id));
        if (s.id != h.id) throw ValidationError("index does not match the pool of task '" + ds.task.str() + "'");
        demos.push_back({&s, h.score});
    }
    return demos;
}

EpisodeSampler::EpisodeSampler(const Mixture& mixture, std::span<const EmbeddingIndex> indexes, EpisodeConfig cfg,
                               TemplateSet templates)
    : mixture_(mixture), indexes_(indexes), cfg_(cfg), templates_(std::move(templates)) {
    if (indexes_.size() != mixture_.num_tasks()) throw ValidationError("one index per mixture task is required");
    if (cfg_.randomize_k && cfg_.k_min > cfg_.k) throw ValidationError("k_min exceeds k");
    state_.rng = Rng(derive_seed(cfg_.seed, "episodes"));
    state_.epoch.assign(mixture_.num_tasks(), 0);
    state_.cursor.assign(mixture_.num_tasks(), 0);
    perm_cache_.assign(mixture_.num_tasks(), {~std::uint64_t{0}, {}});
}

void EpisodeSampler::restore(const EpisodeStreamState& state) {
    if (state.epoch.size() != mixture_.num_tasks() || state.cursor.size() != mixture_.num_tasks()) {
        throw ValidationError("episode stream state does not match the mixture");
    }
    state_ = state;
}

const std::vector<std::uint32_t>& EpisodeSampler::permutation(std::size_t t) {
    auto& [epoch, perm] = perm_cache_[t];
    if (epoch != state_.epoch[t]) {
        const std::size_t n = mixture_.queries(t).size();
        perm.resize(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
        Rng r(derive_seed(derive_seed(cfg_.seed, "perm/" + mixture_.task(t).str()), state_.epoch[t]));
        r.shuffle(perm);
        epoch = state_.epoch[t];
    }
    return perm;
}

Episode EpisodeSampler::next() {
    auto& rng = state_.rng;
    std::size_t k = cfg_.k;
    if (cfg_.randomize_k) k = cfg_.k_min + static_cast<std::size_t>(rng.below(cfg_.k - cfg_.k_min + 1));
    const std::size_t t = mixture_.draw_task_index(rng);

    const auto queries = mixture_.queries(t);
    const auto& perm = permutation(t);
    const Sample& query = queries[perm[state_.cursor[t]]];
    if (++state_.cursor[t] == queries.size()) {
        state_.cursor[t] = 0;
        ++state_.epoch[t];
    }

    const TaskDataset& ds = mixture_.dataset(t);
    Episode ep;
    ep.task = mixture_.task(t);
    ep.query = &query;
    std::vector<Demo> demos;
    if (k > 0) {
        const auto key = retrieval_key(query, indexes_[t].dim());
        demos = order_demos(retrieve_demos(ds, indexes_[t], key, k, query.id), cfg_.demo_order, rng);
    }
    AssembleOptions opt;
    opt.max_seq_len = cfg_.max_seq_len;
    opt.supervise_demos = cfg_.supervise_demos;
    auto assembled = assemble_sequence(demos, query, templates_.get(ds.kind), opt);
    ep.demos = std::move(assembled.kept);
    ep.seq = std::move(assembled.seq);
    return ep;
}

Episode sample_episode(const Mixture& mixture, std::span<const EmbeddingIndex> indexes, const EpisodeConfig& cfg,
                       EpisodeStreamState& state) {
    EpisodeSampler sampler(mixture, indexes, cfg);
    if (!state.epoch.empty()) sampler.restore(state);
    Episode ep = sampler.next();
    state = sampler.state();
    return ep;
}

}  // namespace sicl
