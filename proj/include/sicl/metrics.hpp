#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace sicl {

// ─── Edit distance ──────────────────────────────────────────────────────────

/// Levenshtein distance (unit-cost substitutions, insertions, deletions),
/// two-row dynamic program.
template <typename T>
std::size_t edit_distance(std::span<const T> a, std::span<const T> b) {
    if (a.size() < b.size()) std::swap(a, b);
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

template <typename T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
    return edit_distance(std::span<const T>(a), std::span<const T>(b));
}

// ─── Normalisation ──────────────────────────────────────────────────────────

struct Normalizer {
    bool lowercase = true;
    bool strip_punctuation = true;  // apostrophes are kept
    /// Character languages: drop whitespace entirely.
    bool remove_whitespace = false;

    std::string apply(std::string_view text) const;
};

std::vector<std::string> split_words(std::string_view text);
/// UTF-8 code points; invalid bytes are passed through one at a time.
std::vector<char32_t> utf8_chars(std::string_view text);

// ─── Error rates ────────────────────────────────────────────────────────────

/// min(1, ED(words(hyp), words(ref)) / |words(ref)|). nullopt when the
/// reference is empty after normalisation; such utterances are excluded.
std::optional<double> capped_utterance_wer(std::string_view hyp, std::string_view ref, const Normalizer& norm = {},
                                           bool cap = true);

/// Character-level analogue of capped_utterance_wer.
std::optional<double> cer(std::string_view hyp, std::string_view ref, const Normalizer& norm = {}, bool cap = true);

struct ErrorRateSummary {
    double mean = 0.0;  // mean of per-utterance (capped) rates
    std::size_t scored = 0;
    std::size_t excluded = 0;
};

/// Corpus score as the mean of per-utterance capped WER.
ErrorRateSummary corpus_wer(std::span<const std::pair<std::string, std::string>> hyp_ref, const Normalizer& norm = {},
                            bool cap = true);
/// Classical pooled WER: Σ edits / Σ reference words. Reported for contrast only.
double pooled_wer(std::span<const std::pair<std::string, std::string>> hyp_ref, const Normalizer& norm = {});

// ─── BLEU ───────────────────────────────────────────────────────────────────

struct BleuOptions {
    int max_n = 4;
    bool smoothing = false;  // replaces zero match counts by 1e-9
};

struct BleuStats {
    std::vector<double> matches;  // per order, clipped
    std::vector<double> totals;   // per order, hypothesis n-gram count
    double hyp_len = 0.0;
    double ref_len = 0.0;  // closest reference length, summed

    void add(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs, int max_n);
    double score(const BleuOptions& opt) const;
};

/// Corpus BLEU with pooled n-gram counts. Each element is (hyp, refs).
double corpus_bleu(std::span<const std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>> pairs,
                   const BleuOptions& opt = {});
double bleu(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs,
            const BleuOptions& opt = {});

/// Tokenisation for BLEU: whitespace words, or characters for character languages.
std::vector<std::string> bleu_tokens(std::string_view text, bool char_level);

// ─── QA ─────────────────────────────────────────────────────────────────────

/// First standalone choice label ("A".."D" for 4 choices) in a generation.
std::optional<std::string> extract_choice(std::string_view generation, std::size_t num_choices);

struct QaItem {
    std::string generation;
    std::string gold;
    std::size_t num_choices = 4;
};

double qa_accuracy(std::span<const QaItem> items);

// ─── Scored items & breakdowns ──────────────────────────────────────────────

struct ScoredItem {
    std::string id;
    std::string task;
    std::string hypothesis;
    std::string reference;
    double score = 0.0;
    std::map<std::string, std::string> tags;
};

struct BreakdownRow {
    std::string group;
    std::string item;
    std::size_t n = 0;
    double score = 0.0;  // mean over the row's items
    double sum = 0.0;    // Σ item scores
};

struct BreakdownTable {
    std::vector<BreakdownRow> rows;
    BreakdownRow overall;

    /// For every grouping that covers all items, Σ row sums equals the overall
    /// sum within `tol`. Returns the names of violating groups.
    std::vector<std::string> conservation_violations(double tol = 1e-9) const;
    std::string to_text(int precision = 2, bool percent = true) const;
    nlohmann::json to_json() const;
};

/// Rows per (group, label) for each requested tag key, in first-seen label
/// order, plus the overall row. Items lacking a tag go to label "(none)".
BreakdownTable breakdown(std::span<const ScoredItem> items, std::span<const std::string> groupings);

}  // namespace sicl
