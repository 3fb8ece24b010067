#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sicl {

// ─── Errors ─────────────────────────────────────────────────────────────────

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file; `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// A contract or invariant was violated (bad config, duplicate id, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Non-finite activation, loss or gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

// ─── TaskId ─────────────────────────────────────────────────────────────────

class TaskId {
public:
    TaskId() = default;
    explicit TaskId(std::string value) : value_(std::move(value)) {}

    const std::string& str() const { return value_; }
    bool empty() const { return value_.empty(); }

    friend auto operator<=>(const TaskId&, const TaskId&) = default;

private:
    std::string value_;
};

// ─── Rng ────────────────────────────────────────────────────────────────────

/// splitmix64-seeded xoshiro256**. All derived draws (uniform, normal,
/// integer ranges, shuffles) are implemented here rather than through
/// <random> distributions so that streams are identical across standard
/// libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::string serialize() const;
    static Rng deserialize(std::string_view text);

    friend bool operator==(const Rng&, const Rng&) = default;

private:
    std::uint64_t s_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Deterministic seed derivation: mixes a parent seed with a label.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace sicl

template <>
struct std::hash<sicl::TaskId> {
    std::size_t operator()(const sicl::TaskId& id) const noexcept {
        return std::hash<std::string>{}(id.str());
    }
};
