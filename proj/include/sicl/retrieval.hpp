#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sicl/corpus.hpp"

namespace sicl {

struct Neighbor {
    std::string id;
    double score = 0.0;  // cosine similarity

    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

using RetrievalResult = std::vector<Neighbor>;

/// Exhaustive-scan cosine index. Immutable after construction, so concurrent
/// queries are safe.
class EmbeddingIndex {
public:
    explicit EmbeddingIndex(std::size_t dim);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    bool contains(const std::string& id) const { return row_of_.contains(id); }
    const std::vector<std::string>& ids() const { return ids_; }
    /// Insertion order of `id`.
    std::size_t row(const std::string& id) const;
    std::span<const double> vector(const std::string& id) const;
    double norm(const std::string& id) const;

    /// Rejects wrong dimension, zero/non-finite vectors and duplicate ids.
    void insert(std::string id, std::span<const double> v);

    /// Top-k by cosine similarity, ties broken by ascending id.
    RetrievalResult knn(std::span<const double> query, std::size_t k,
                        const std::unordered_set<std::string>& exclude = {}) const;

private:
    std::size_t dim_;
    std::vector<std::string> ids_;
    std::vector<double> data_;  // row-major, one row per id
    std::vector<double> norms_;
    std::unordered_map<std::string, std::size_t> row_of_;
};

EmbeddingIndex build_index(const std::vector<std::pair<std::string, std::vector<double>>>& samples);

RetrievalResult knn(const EmbeddingIndex& index, std::span<const double> query, std::size_t k,
                    const std::unordered_set<std::string>& exclude = {});

/// Character 2- and 3-gram feature hashing, L2-normalised. Stands in for an
/// external text embedder when no precomputed vectors are supplied.
std::vector<double> fallback_embed(std::string_view text, std::size_t dim);

double cosine(std::span<const double> a, std::span<const double> b);

/// Retrieval key of a sample: its precomputed embedding when one is given,
/// else `fallback_embed(target)`.
std::vector<double> retrieval_key(const Sample& s, std::size_t dim,
                                  const std::unordered_map<std::string, std::vector<double>>* precomputed = nullptr);

/// Index over a task's demonstration pool.
EmbeddingIndex build_pool_index(const TaskDataset& ds, std::size_t dim,
                                const std::unordered_map<std::string, std::vector<double>>* precomputed = nullptr);

}  // namespace sicl
