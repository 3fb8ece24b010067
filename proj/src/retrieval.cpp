#include "sicl/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sicl {

EmbeddingIndex::EmbeddingIndex(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ValidationError("embedding dimension must be positive");
}

std::span<const double> EmbeddingIndex::vector(const std::string& id) const {
    const auto it = row_of_.find(id);
    if (it == row_of_.end()) throw ValidationError("id '" + id + "' is not in the index");
    return {data_.data() + it->second * dim_, dim_};
}

std::size_t EmbeddingIndex::row(const std::string& id) const {
    const auto it = row_of_.find(id);
    if (it == row_of_.end()) throw ValidationError("id '" + id + "' is not in the index");
    return it->second;
}

double EmbeddingIndex::norm(const std::string& id) const {
    const auto it = row_of_.find(id);
    if (it == row_of_.end()) throw ValidationError("id '" + id + "' is not in the index");
    return norms_[it->second];
}

void EmbeddingIndex::insert(std::string id, std::span<const double> v) {
    if (v.size() != dim_) {
        throw ValidationError("dimension mismatch: index has dim " + std::to_string(dim_) + ", vector for '" + id +
                              "' has " + std::to_string(v.size()));
    }
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double n = std::sqrt(sq);
    if (!(n > 0.0) || !std::isfinite(n)) throw ValidationError("zero or non-finite vector for '" + id + "'");
    if (row_of_.contains(id)) throw ValidationError("duplicate id '" + id + "' in index");
    row_of_.emplace(id, ids_.size());
    ids_.push_back(std::move(id));
    data_.insert(data_.end(), v.begin(), v.end());
    norms_.push_back(n);
}

RetrievalResult EmbeddingIndex::knn(std::span<const double> query, std::size_t k,
                                    const std::unordered_set<std::string>& exclude) const {
    if (query.size() != dim_) throw ValidationError("dimension mismatch in knn query");
    if (k == 0) throw ValidationError("knn requires k >= 1");
    std::size_t excluded = 0;
    for (const auto& id : exclude) excluded += row_of_.contains(id) ? 1 : 0;
    if (k > size() - excluded) {
        throw ValidationError("k=" + std::to_string(k) + " exceeds effective pool size " +
                              std::to_string(size() - excluded) + "; reduce k or enlarge the pool");
    }
    double qsq = 0.0;
    for (double x : query) qsq += x * x;
    const double qn = std::sqrt(qsq);
    if (!(qn > 0.0)) throw ValidationError("zero query vector");

    std::vector<Neighbor> scored;
    scored.reserve(size() - excluded);
    for (std::size_t r = 0; r < ids_.size(); ++r) {
        if (!exclude.empty() && exclude.contains(ids_[r])) continue;
        const double* row = data_.data() + r * dim_;
        double dot = 0.0;
        for (std::size_t c = 0; c < dim_; ++c) dot += row[c] * query[c];
        const double s = std::clamp(dot / (norms_[r] * qn), -1.0, 1.0);
        scored.push_back({ids_[r], s});
    }
    const auto better = [](const Neighbor& a, const Neighbor& b) {
        return a.score != b.score ? a.score > b.score : a.id < b.id;
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), better);
    scored.resize(k);
    return scored;
}

EmbeddingIndex build_index(const std::vector<std::pair<std::string, std::vector<double>>>& samples) {
    if (samples.empty()) throw ValidationError("cannot build an index from no vectors");
    EmbeddingIndex index(samples.front().second.size());
    for (const auto& [id, v] : samples) index.insert(id, v);
    return index;
}

RetrievalResult knn(const EmbeddingIndex& index, std::span<const double> query, std::size_t k,
                    const std::unordered_set<std::string>& exclude) {
    return index.knn(query, k, exclude);
}

std::vector<double> fallback_embed(std::string_view text, std::size_t dim) {
    if (dim < 8) throw ValidationError("fallback_embed requires dim >= 8");
    if (text.empty()) throw ValidationError("cannot embed empty text");
    std::string padded;
    padded.reserve(text.size() + 2);
    padded.push_back('\x02');
    padded.append(text);
    padded.push_back('\x03');

    std::vector<double> v(dim, 0.0);
    auto add = [&](std::string_view gram, double weight) {
        v[fnv1a64(gram) % dim] += weight;
    };
    for (std::size_t i = 0; i + 2 <= padded.size(); ++i) add(std::string_view(padded).substr(i, 2), 0.5);
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) add(std::string_view(padded).substr(i, 3), 1.0);

    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    for (double& x : v) x /= n;
    return v;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ValidationError("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine of a zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> retrieval_key(const Sample& s, std::size_t dim,
                                  const std::unordered_map<std::string, std::vector<double>>* precomputed) {
    if (precomputed) {
        if (auto it = precomputed->find(s.id); it != precomputed->end()) return it->second;
    }
    return fallback_embed(s.target, dim);
}

EmbeddingIndex build_pool_index(const TaskDataset& ds, std::size_t dim,
                                const std::unordered_map<std::string, std::vector<double>>* precomputed) {
    EmbeddingIndex index(dim);
    for (const auto& s : ds.demo_pool) index.insert(s.id, retrieval_key(s, dim, precomputed));
    return index;
}

}  // namespace sicl
