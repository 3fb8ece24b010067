#include "sicl/corpus.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace sicl {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "sidecar I/O assumes a little-endian host");

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::asr: return "asr";
        case TaskKind::st: return "st";
        case TaskKind::sqa: return "sqa";
    }
    return "asr";
}

TaskKind task_kind_from_string(std::string_view name) {
    if (name == "asr") return TaskKind::asr;
    if (name == "st") return TaskKind::st;
    if (name == "sqa") return TaskKind::sqa;
    throw ValidationError("unknown task kind '" + std::string(name) + "'");
}

std::string choice_label(std::size_t index) {
    if (index >= 26) throw ValidationError("at most 26 choices are supported");
    return std::string(1, static_cast<char>('A' + index));
}

// ─── Sample / TaskDataset ───────────────────────────────────────────────────

void Sample::validate() const {
    if (id.empty()) throw ValidationError("sample with empty id");
    if (target.empty()) throw ValidationError("sample '" + id + "' has an empty target");
    if (has_features() && (features().rows() == 0 || features().cols() == 0)) {
        throw ValidationError("sample '" + id + "' has an empty feature matrix");
    }
    if (!choices.empty()) {
        std::size_t matches = 0;
        for (std::size_t i = 0; i < choices.size(); ++i) {
            if (choice_label(i) == target) ++matches;
        }
        if (matches != 1) {
            throw ValidationError("sample '" + id + "': target '" + target + "' is not a choice label");
        }
    }
}

bool operator==(const Sample& a, const Sample& b) {
    if (a.id != b.id || a.task != b.task || a.target != b.target || a.choices != b.choices || a.tags != b.tags) {
        return false;
    }
    if (a.has_features() != b.has_features()) return false;
    if (a.has_features()) {
        const auto& fa = a.features();
        const auto& fb = b.features();
        return fa.rows() == fb.rows() && fa.cols() == fb.cols() &&
               std::memcmp(fa.data(), fb.data(), sizeof(float) * fa.size()) == 0;
    }
    return a.text_input() == b.text_input();
}

std::size_t TaskDataset::size() const {
    std::set<std::string_view> ids;
    for (const auto& s : query_set) ids.insert(s.id);
    for (const auto& s : demo_pool) ids.insert(s.id);
    return ids.size();
}

void TaskDataset::validate() const {
    if (demo_pool.empty()) throw ValidationError("task '" + task.str() + "' has an empty demonstration pool");
    std::set<std::string_view> query_ids;
    for (const auto& s : query_set) {
        s.validate();
        if (s.task != task) throw ValidationError("sample '" + s.id + "' belongs to task '" + s.task.str() + "'");
        if (!query_ids.insert(s.id).second) throw ValidationError("duplicate id '" + s.id + "'");
    }
    std::set<std::string_view> pool_ids;
    for (const auto& s : demo_pool) {
        s.validate();
        if (s.task != task) throw ValidationError("sample '" + s.id + "' belongs to task '" + s.task.str() + "'");
        if (!pool_ids.insert(s.id).second) throw ValidationError("duplicate id '" + s.id + "'");
        if (!leave_one_out && query_ids.contains(s.id)) {
            throw ValidationError("sample '" + s.id + "' is in both query set and pool without leave-one-out");
        }
    }
}

const Sample* TaskDataset::find(std::string_view id) const {
    for (const auto* set : {&query_set, &demo_pool}) {
        for (const auto& s : *set) {
            if (s.id == id) return &s;
        }
    }
    return nullptr;
}

bool operator==(const TaskDataset& a, const TaskDataset& b) {
    return a.task == b.task && a.kind == b.kind && a.leave_one_out == b.leave_one_out && a.query_set == b.query_set &&
           a.demo_pool == b.demo_pool;
}

// ─── Sidecar matrices ───────────────────────────────────────────────────────

namespace {

constexpr std::array<char, 4> kMatrixMagic{'S', 'F', 'M', '1'};

}  // namespace

void write_matrix(const fs::path& path, const FeatureSeq& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    const std::uint64_t rows = static_cast<std::uint64_t>(m.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
    out.write(kMatrixMagic.data(), 4);
    out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
    out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(float) * m.size()));
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

FeatureSeq read_matrix(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing feature file '" + path.string() + "'");
    std::array<char, 4> magic{};
    std::uint64_t rows = 0;
    std::uint32_t cols = 0;
    in.read(magic.data(), 4);
    in.read(reinterpret_cast<char*>(&rows), sizeof rows);
    in.read(reinterpret_cast<char*>(&cols), sizeof cols);
    if (!in || magic != kMatrixMagic) throw ParseError("'" + path.string() + "' is not a feature matrix file");
    FeatureSeq m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(float) * m.size()));
    if (!in) throw ParseError("'" + path.string() + "' is truncated");
    return m;
}

std::unordered_map<std::string, std::vector<double>> load_embeddings(const fs::path& path) {
    const FeatureSeq m = read_matrix(path);
    std::ifstream ids(fs::path(path.string() + ".ids"));
    if (!ids) throw Error("missing id table for '" + path.string() + "'");
    std::unordered_map<std::string, std::vector<double>> out;
    std::string id;
    Eigen::Index row = 0;
    while (std::getline(ids, id)) {
        if (id.empty()) continue;
        if (row >= m.rows()) throw ParseError("id table longer than matrix", static_cast<std::size_t>(row) + 1);
        std::vector<double> v(m.cols());
        for (Eigen::Index c = 0; c < m.cols(); ++c) v[c] = m(row, c);
        if (!out.emplace(id, std::move(v)).second) throw ValidationError("duplicate embedding id '" + id + "'");
        ++row;
    }
    if (row != m.rows()) throw ParseError("id table shorter than matrix");
    return out;
}

void save_embeddings(const fs::path& path, const std::vector<std::string>& ids, const FeatureSeq& vectors) {
    if (static_cast<Eigen::Index>(ids.size()) != vectors.rows()) {
        throw ValidationError("embedding id count does not match matrix rows");
    }
    write_matrix(path, vectors);
    std::ofstream out(fs::path(path.string() + ".ids"));
    for (const auto& id : ids) out << id << '\n';
}

// ─── Manifests ──────────────────────────────────────────────────────────────

TaskDataset load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest '" + path.string() + "'");

    TaskDataset ds;
    std::map<std::string, FeatureSeq> sidecars;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    bool first = true;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("malformed manifest line in '" + path.string() + "': " + e.what(), line_no);
        }
        try {
            Sample s;
            s.id = rec.at("id").get<std::string>();
            s.task = TaskId(rec.at("task").get<std::string>());
            const TaskKind kind = task_kind_from_string(rec.value("kind", std::string("asr")));
            if (first) {
                ds.task = s.task;
                ds.kind = kind;
                first = false;
            } else if (s.task != ds.task || kind != ds.kind) {
                throw ParseError("manifest mixes tasks", line_no);
            }
            s.target = rec.at("target").get<std::string>();
            const auto& input = rec.at("input");
            if (input.contains("features")) {
                const auto& f = input.at("features");
                const auto file = f.at("file").get<std::string>();
                auto it = sidecars.find(file);
                if (it == sidecars.end()) {
                    it = sidecars.emplace(file, read_matrix(path.parent_path() / file)).first;
                }
                const auto row = f.at("row").get<std::int64_t>();
                const auto frames = f.at("frames").get<std::int64_t>();
                if (row < 0 || frames <= 0 || row + frames > it->second.rows()) {
                    throw ParseError("feature rows out of range for sample '" + s.id + "'", line_no);
                }
                s.input = FeatureSeq(it->second.middleRows(row, frames));
            } else {
                s.input = input.at("text").get<std::string>();
            }
            if (rec.contains("choices")) s.choices = rec.at("choices").get<std::vector<std::string>>();
            if (rec.contains("tags")) s.tags = rec.at("tags").get<std::map<std::string, std::string>>();

            if (!seen.insert(s.id).second) throw ValidationError("duplicate id '" + s.id + "' (line " + std::to_string(line_no) + ")");
            try {
                s.validate();
            } catch (const ValidationError& e) {
                throw ValidationError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
            }

            const auto split = rec.value("split", std::string("query"));
            if (split == "query") {
                ds.query_set.push_back(std::move(s));
            } else if (split == "pool") {
                ds.demo_pool.push_back(std::move(s));
            } else if (split == "both") {
                ds.leave_one_out = true;
                ds.query_set.push_back(s);
                ds.demo_pool.push_back(std::move(s));
            } else {
                throw ParseError("unknown split '" + split + "'", line_no);
            }
        } catch (const json::exception& e) {
            throw ParseError("malformed manifest record in '" + path.string() + "': " + e.what(), line_no);
        }
    }
    if (first) throw ParseError("empty manifest '" + path.string() + "'");
    ds.validate();
    return ds;
}

void save_manifest(const TaskDataset& dataset, const fs::path& path) {
    dataset.validate();
    const fs::path sidecar = fs::path(path).replace_extension(".f32");

    // Each sample is written once; samples present in both splits are tagged "both".
    std::set<std::string_view> pool_ids;
    for (const auto& s : dataset.demo_pool) pool_ids.insert(s.id);
    std::set<std::string_view> query_ids;
    for (const auto& s : dataset.query_set) query_ids.insert(s.id);

    std::vector<std::pair<const Sample*, std::string>> records;
    for (const auto& s : dataset.query_set) records.emplace_back(&s, pool_ids.contains(s.id) ? "both" : "query");
    for (const auto& s : dataset.demo_pool) {
        if (!query_ids.contains(s.id)) records.emplace_back(&s, "pool");
    }

    Eigen::Index total_rows = 0;
    Eigen::Index cols = 0;
    for (const auto& [s, split] : records) {
        if (s->has_features()) {
            if (cols != 0 && s->features().cols() != cols) throw ValidationError("inconsistent feature widths");
            cols = s->features().cols();
            total_rows += s->features().rows();
        }
    }

    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    FeatureSeq all(total_rows, cols);
    Eigen::Index row = 0;
    for (const auto& [s, split] : records) {
        json rec;
        rec["id"] = s->id;
        rec["task"] = s->task.str();
        rec["kind"] = to_string(dataset.kind);
        rec["split"] = split;
        rec["target"] = s->target;
        if (s->has_features()) {
            const auto& f = s->features();
            all.middleRows(row, f.rows()) = f;
            rec["input"] = {{"features", {{"file", sidecar.filename().string()}, {"row", row}, {"frames", f.rows()}}}};
            row += f.rows();
        } else {
            rec["input"] = {{"text", s->text_input()}};
        }
        if (!s->choices.empty()) rec["choices"] = s->choices;
        if (!s->tags.empty()) rec["tags"] = s->tags;
        out << rec.dump() << '\n';
    }
    if (total_rows > 0) write_matrix(sidecar, all);
}

std::map<TaskId, std::shared_ptr<const TaskDataset>> load_manifest_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::map<TaskId, std::shared_ptr<const TaskDataset>> out;
    for (const auto& f : files) {
        auto ds = std::make_shared<TaskDataset>(load_manifest(f));
        const TaskId task = ds->task;
        if (!out.emplace(task, std::move(ds)).second) {
            throw ValidationError("task '" + task.str() + "' defined by more than one manifest");
        }
    }
    return out;
}

// ─── Mixture ────────────────────────────────────────────────────────────────

MixtureConfig MixtureConfig::plus(std::string new_name, std::span<const MixtureEntry> extra) const {
    MixtureConfig out = *this;
    out.name = std::move(new_name);
    out.entries.insert(out.entries.end(), extra.begin(), extra.end());
    return out;
}

std::vector<double> MixtureConfig::effective_weights() const {
    std::vector<double> w;
    w.reserve(entries.size());
    for (const auto& e : entries) {
        switch (weighting) {
            case MixtureWeighting::uniform: w.push_back(1.0); break;
            case MixtureWeighting::proportional: w.push_back(static_cast<double>(e.sample_count)); break;
            case MixtureWeighting::explicit_weights: w.push_back(e.weight); break;
        }
    }
    return w;
}

void MixtureConfig::validate() const {
    if (entries.empty()) throw ValidationError("mixture '" + name + "' has no entries");
    double sum = 0.0;
    for (double w : effective_weights()) {
        if (!(w >= 0.0)) throw ValidationError("mixture '" + name + "' has a negative weight");
        sum += w;
    }
    if (!(sum > 0.0)) throw ValidationError("mixture '" + name + "' weights sum to zero");
}

namespace {

std::string weighting_name(MixtureWeighting w) {
    switch (w) {
        case MixtureWeighting::uniform: return "uniform";
        case MixtureWeighting::proportional: return "proportional";
        case MixtureWeighting::explicit_weights: return "explicit";
    }
    return "uniform";
}

}  // namespace

void to_json(json& j, const MixtureConfig& config) {
    j = json{{"name", config.name}, {"weighting", weighting_name(config.weighting)}, {"entries", json::array()}};
    for (const auto& e : config.entries) {
        j["entries"].push_back({{"task", e.task.str()}, {"sample_count", e.sample_count}, {"weight", e.weight}});
    }
}

void from_json(const json& j, MixtureConfig& config) {
    config.name = j.at("name").get<std::string>();
    const auto w = j.value("weighting", std::string("uniform"));
    if (w == "uniform") {
        config.weighting = MixtureWeighting::uniform;
    } else if (w == "proportional") {
        config.weighting = MixtureWeighting::proportional;
    } else if (w == "explicit") {
        config.weighting = MixtureWeighting::explicit_weights;
    } else {
        throw ValidationError("unknown mixture weighting '" + w + "'");
    }
    config.entries.clear();
    for (const auto& e : j.at("entries")) {
        config.entries.push_back(MixtureEntry{TaskId(e.at("task").get<std::string>()), e.value("sample_count", std::size_t{0}),
                                              e.value("weight", 1.0)});
    }
}

Mixture::Mixture(MixtureConfig config, std::vector<std::shared_ptr<const TaskDataset>> datasets)
    : config_(std::move(config)), datasets_(std::move(datasets)) {
    config_.validate();
    if (datasets_.size() != config_.entries.size()) throw ValidationError("mixture/dataset count mismatch");
    double acc = 0.0;
    for (double w : config_.effective_weights()) {
        acc += w;
        cumulative_.push_back(acc);
    }
    for (std::size_t i = 0; i < datasets_.size(); ++i) {
        if (queries(i).empty()) throw ValidationError("task '" + task(i).str() + "' has an empty query set");
    }
}

std::size_t Mixture::draw_task_index(Rng& rng) const {
    if (cumulative_.size() == 1) return 0;
    const double u = rng.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
}

const TaskDataset& Mixture::dataset(const TaskId& t) const { return *datasets_[index_of(t)]; }

std::size_t Mixture::index_of(const TaskId& t) const {
    for (std::size_t i = 0; i < config_.entries.size(); ++i) {
        if (config_.entries[i].task == t) return i;
    }
    throw ValidationError("task '" + t.str() + "' is not part of mixture '" + config_.name + "'");
}

std::span<const Sample> Mixture::queries(std::size_t index) const {
    const auto& q = datasets_[index]->query_set;
    const std::size_t cap = config_.entries[index].sample_count;
    const std::size_t n = (cap == 0) ? q.size() : std::min(cap, q.size());
    return {q.data(), n};
}

Mixture build_mixture(const MixtureConfig& config, const std::map<TaskId, std::shared_ptr<const TaskDataset>>& datasets) {
    config.validate();
    std::vector<std::shared_ptr<const TaskDataset>> resolved;
    for (const auto& e : config.entries) {
        auto it = datasets.find(e.task);
        if (it == datasets.end()) throw ValidationError("mixture '" + config.name + "': unresolved task '" + e.task.str() + "'");
        resolved.push_back(it->second);
    }
    return Mixture(config, std::move(resolved));
}

}  // namespace sicl
