#include "sicl/metrics.hpp"

#include <cctype>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "sicl/common.hpp"

namespace sicl {

// ─── Normalisation ──────────────────────────────────────────────────────────

std::string Normalizer::apply(std::string_view text) const {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (unsigned char c : text) {
        if (c < 0x80) {
            if (std::isspace(c)) {
                pending_space = true;
                continue;
            }
            if (strip_punctuation && std::ispunct(c) && c != '\'') {
                pending_space = true;
                continue;
            }
            if (lowercase) c = static_cast<unsigned char>(std::tolower(c));
        }
        if (pending_space && !out.empty() && !remove_whitespace) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(c));
    }
    return out;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        const std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

std::vector<char32_t> utf8_chars(std::string_view text) {
    std::vector<char32_t> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        char32_t cp = c;
        if (c >= 0xF0 && c < 0xF8) {
            len = 4;
            cp = c & 0x07;
        } else if (c >= 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if (c >= 0xC0) {
            len = 2;
            cp = c & 0x1F;
        }
        bool valid = len > 1 && i + len <= text.size();
        for (std::size_t k = 1; valid && k < len; ++k) {
            const auto cc = static_cast<unsigned char>(text[i + k]);
            if ((cc & 0xC0) != 0x80) valid = false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        if (!valid) {
            out.push_back(c);
            ++i;
        } else {
            out.push_back(cp);
            i += len;
        }
    }
    return out;
}

// ─── Error rates ────────────────────────────────────────────────────────────

std::optional<double> capped_utterance_wer(std::string_view hyp, std::string_view ref, const Normalizer& norm, bool cap) {
    const auto r = split_words(norm.apply(ref));
    if (r.empty()) return std::nullopt;
    const auto h = split_words(norm.apply(hyp));
    const double rate = static_cast<double>(edit_distance(h, r)) / static_cast<double>(r.size());
    return cap ? std::min(1.0, rate) : rate;
}

std::optional<double> cer(std::string_view hyp, std::string_view ref, const Normalizer& norm, bool cap) {
    const auto r = utf8_chars(norm.apply(ref));
    if (r.empty()) return std::nullopt;
    const auto h = utf8_chars(norm.apply(hyp));
    const double rate = static_cast<double>(edit_distance(h, r)) / static_cast<double>(r.size());
    return cap ? std::min(1.0, rate) : rate;
}

ErrorRateSummary corpus_wer(std::span<const std::pair<std::string, std::string>> hyp_ref, const Normalizer& norm,
                            bool cap) {
    ErrorRateSummary s;
    double sum = 0.0;
    for (const auto& [hyp, ref] : hyp_ref) {
        if (const auto w = capped_utterance_wer(hyp, ref, norm, cap)) {
            sum += *w;
            ++s.scored;
        } else {
            ++s.excluded;
        }
    }
    s.mean = s.scored ? sum / static_cast<double>(s.scored) : 0.0;
    return s;
}

double pooled_wer(std::span<const std::pair<std::string, std::string>> hyp_ref, const Normalizer& norm) {
    std::size_t edits = 0, words = 0;
    for (const auto& [hyp, ref] : hyp_ref) {
        const auto r = split_words(norm.apply(ref));
        edits += edit_distance(split_words(norm.apply(hyp)), r);
        words += r.size();
    }
    return words ? static_cast<double>(edits) / static_cast<double>(words) : 0.0;
}

// ─── BLEU ───────────────────────────────────────────────────────────────────

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& toks, int n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
    }
    return counts;
}

}  // namespace

void BleuStats::add(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs, int max_n) {
    if (refs.empty()) throw ValidationError("BLEU needs at least one reference");
    matches.resize(max_n, 0.0);
    totals.resize(max_n, 0.0);
    hyp_len += static_cast<double>(hyp.size());

    // Closest reference length; ties go to the shorter reference.
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
        const auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);

    for (int n = 1; n <= max_n; ++n) {
        const auto hyp_counts = ngram_counts(hyp, n);
        std::map<std::vector<std::string>, std::size_t> max_ref;
        for (const auto& r : refs) {
            for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
        }
        for (const auto& [g, c] : hyp_counts) {
            const auto it = max_ref.find(g);
            matches[n - 1] += static_cast<double>(std::min(c, it == max_ref.end() ? std::size_t{0} : it->second));
            totals[n - 1] += static_cast<double>(c);
        }
    }
}

double BleuStats::score(const BleuOptions& opt) const {
    if (hyp_len == 0.0) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < opt.max_n; ++n) {
        double m = n < static_cast<int>(matches.size()) ? matches[n] : 0.0;
        const double t = n < static_cast<int>(totals.size()) ? totals[n] : 0.0;
        if (opt.smoothing) {
            if (m == 0.0) m = 1e-9;
            if (t == 0.0) return 0.0;
        } else if (m == 0.0 || t == 0.0) {
            return 0.0;
        }
        log_sum += std::log(m / t);
    }
    const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
    return std::clamp(bp * std::exp(log_sum / opt.max_n), 0.0, 1.0);
}

double corpus_bleu(std::span<const std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>> pairs,
                   const BleuOptions& opt) {
    BleuStats stats;
    for (const auto& [hyp, refs] : pairs) stats.add(hyp, refs, opt.max_n);
    return stats.score(opt);
}

double bleu(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs,
            const BleuOptions& opt) {
    BleuStats stats;
    stats.add(hyp, refs, opt.max_n);
    return stats.score(opt);
}

std::vector<std::string> bleu_tokens(std::string_view text, bool char_level) {
    if (!char_level) return split_words(text);
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = c >= 0xF0 ? 4 : c >= 0xE0 ? 3 : c >= 0xC0 ? 2 : 1;
        len = std::min(len, text.size() - i);
        if (!std::isspace(c)) out.emplace_back(text.substr(i, len));
        i += len;
    }
    return out;
}

// ─── QA ─────────────────────────────────────────────────────────────────────

std::optional<std::string> extract_choice(std::string_view generation, std::size_t num_choices) {
    const auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    for (std::size_t i = 0; i < generation.size(); ++i) {
        const char c = generation[i];
        if (c < 'A' || c >= static_cast<char>('A' + num_choices)) continue;
        const bool left_ok = i == 0 || !is_word(generation[i - 1]);
        const bool right_ok = i + 1 == generation.size() || !is_word(generation[i + 1]);
        if (left_ok && right_ok) return std::string(1, c);
    }
    return std::nullopt;
}

double qa_accuracy(std::span<const QaItem> items) {
    if (items.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& it : items) {
        const auto got = extract_choice(it.generation, it.num_choices);
        if (got && *got == it.gold) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

// ─── Breakdown ──────────────────────────────────────────────────────────────

BreakdownTable breakdown(std::span<const ScoredItem> items, std::span<const std::string> groupings) {
    BreakdownTable table;
    table.overall.group = "Overall";
    table.overall.item = "Total";
    for (const auto& it : items) {
        table.overall.sum += it.score;
        ++table.overall.n;
    }
    table.overall.score = table.overall.n ? table.overall.sum / static_cast<double>(table.overall.n) : 0.0;

    for (const auto& group : groupings) {
        std::vector<BreakdownRow> rows;
        std::unordered_map<std::string, std::size_t> where;
        for (const auto& it : items) {
            const auto tag = it.tags.find(group);
            const std::string label = tag == it.tags.end() ? "(none)" : tag->second;
            auto [pos, inserted] = where.emplace(label, rows.size());
            if (inserted) rows.push_back(BreakdownRow{group, label, 0, 0.0, 0.0});
            auto& row = rows[pos->second];
            ++row.n;
            row.sum += it.score;
        }
        for (auto& row : rows) {
            row.score = row.sum / static_cast<double>(row.n);
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

std::vector<std::string> BreakdownTable::conservation_violations(double tol) const {
    std::map<std::string, std::pair<std::size_t, double>> per_group;
    for (const auto& r : rows) {
        auto& [n, sum] = per_group[r.group];
        n += r.n;
        sum += r.sum;
    }
    std::vector<std::string> bad;
    for (const auto& [group, ns] : per_group) {
        const auto& [n, sum] = ns;
        if (n != overall.n || std::abs(sum - overall.sum) > tol) bad.push_back(group);
    }
    return bad;
}

std::string BreakdownTable::to_text(int precision, bool percent) const {
    std::size_t gw = 5, iw = 4;
    for (const auto& r : rows) {
        gw = std::max(gw, r.group.size());
        iw = std::max(iw, r.item.size());
    }
    gw = std::max(gw, overall.group.size());
    iw = std::max(iw, overall.item.size());
    std::ostringstream os;
    auto line = [&](const std::string& g, const std::string& i, const std::string& n, const std::string& s) {
        os << std::left << std::setw(static_cast<int>(gw)) << g << "  " << std::setw(static_cast<int>(iw)) << i << "  "
           << std::right << std::setw(6) << n << "  " << std::setw(10) << s << '\n';
    };
    auto fmt = [&](double v) {
        std::ostringstream f;
        f << std::fixed << std::setprecision(precision) << (percent ? 100.0 * v : v) << (percent ? "%" : "");
        return f.str();
    };
    line("Group", "Item", "n", "score");
    std::string prev;
    for (const auto& r : rows) {
        if (r.group != prev && !prev.empty()) os << std::string(gw + iw + 22, '-') << '\n';
        prev = r.group;
        line(r.group, r.item, std::to_string(r.n), fmt(r.score));
    }
    os << std::string(gw + iw + 22, '-') << '\n';
    line(overall.group, overall.item, std::to_string(overall.n), fmt(overall.score));
    return os.str();
}

nlohmann::json BreakdownTable::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"group", r.group}, {"item", r.item}, {"n", r.n}, {"score", r.score}, {"sum", r.sum}});
    }
    j["overall"] = {{"n", overall.n}, {"score", overall.score}, {"sum", overall.sum}};
    return j;
}

}  // namespace sicl
