#include <gtest/gtest.h>

#include <cmath>

#include "sicl/common.hpp"
#include "sicl/metrics.hpp"

using namespace sicl;

namespace {

// Full (n+1)×(m+1) table, filled row by row.
std::size_t dp_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j) {
            std::size_t best = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            best = std::min(best, d[i - 1][j] + 1);
            best = std::min(best, d[i][j - 1] + 1);
            d[i][j] = best;
        }
    return d[a.size()][b.size()];
}

std::vector<std::string> random_words(Rng& rng, std::size_t max_len) {
    static const std::vector<std::string> vocab{"a", "b", "c", "d", "the", "cat"};
    std::vector<std::string> out(rng.below(max_len + 1));
    for (auto& w : out) w = vocab[rng.below(vocab.size())];
    return out;
}

std::vector<ScoredItem> grouped_qa_items() {
    // Sound 239/333, Music 218/334, Speech 212/333.
    std::vector<ScoredItem> items;
    const std::vector<std::tuple<std::string, int, int>> groups{{"sound", 333, 239}, {"music", 334, 218}, {"speech", 333, 212}};
    int id = 0;
    for (const auto& [g, n, correct] : groups) {
        for (int i = 0; i < n; ++i) {
            ScoredItem it;
            it.id = std::to_string(id++);
            it.score = i < correct ? 1.0 : 0.0;
            it.tags = {{"group", g}};
            items.push_back(it);
        }
    }
    return items;
}

}  // namespace

TEST(EditDistance, Basics) {
    const std::vector<std::string> x{"a", "b", "c"}, empty;
    EXPECT_EQ(edit_distance(x, x), 0u);
    EXPECT_EQ(edit_distance(x, empty), 3u);
    EXPECT_EQ(edit_distance(split_words("a b c"), split_words("")), 3u);
}

TEST(EditDistance, MatchesOracleOn500Pairs) {
    Rng rng(11);
    for (int t = 0; t < 500; ++t) {
        const auto a = random_words(rng, 12), b = random_words(rng, 12);
        ASSERT_EQ(edit_distance(a, b), dp_oracle(a, b));
    }
}

TEST(EditDistance, CharLevelMatchesOracle) {
    Rng rng(12);
    for (int t = 0; t < 200; ++t) {
        std::string a, b;
        for (auto n = rng.below(15); n > 0; --n) a.push_back(static_cast<char>('a' + rng.below(4)));
        for (auto n = rng.below(15); n > 0; --n) b.push_back(static_cast<char>('a' + rng.below(4)));
        std::vector<std::string> sa, sb;
        for (char c : a) sa.emplace_back(1, c);
        for (char c : b) sb.emplace_back(1, c);
        const auto ca = utf8_chars(a), cb = utf8_chars(b);
        ASSERT_EQ(edit_distance(ca, cb), dp_oracle(sa, sb));
    }
}

TEST(EditDistance, SymmetryAndTriangle) {
    Rng rng(13);
    for (int t = 0; t < 300; ++t) {
        const auto a = random_words(rng, 8), b = random_words(rng, 8), c = random_words(rng, 8);
        EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
        EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
    }
}

TEST(Wer, CappedUtterance) {
    EXPECT_EQ(capped_utterance_wer("a b", "a b"), 0.0);
    EXPECT_EQ(capped_utterance_wer("x y z", "a b"), 1.0);
    EXPECT_EQ(capped_utterance_wer("x y z", "a b", {}, false), 1.5);
    EXPECT_FALSE(capped_utterance_wer("x", "").has_value());
    EXPECT_FALSE(capped_utterance_wer("x", " ?! ").has_value());
}

TEST(Wer, MeanOfCappedDiffersFromPooled) {
    const std::vector<std::pair<std::string, std::string>> corpus{{"x y z", "a"}, {"a b c d", "a b c d"}};
    const auto mean = corpus_wer(corpus);
    EXPECT_DOUBLE_EQ(mean.mean, 0.5);
    EXPECT_EQ(mean.scored, 2u);
    EXPECT_DOUBLE_EQ(pooled_wer(corpus), 3.0 / 5.0);
}

TEST(Wer, EmptyReferenceExcluded) {
    const std::vector<std::pair<std::string, std::string>> corpus{{"a", "a"}, {"b", ""}};
    const auto s = corpus_wer(corpus);
    EXPECT_EQ(s.scored, 1u);
    EXPECT_EQ(s.excluded, 1u);
    EXPECT_EQ(s.mean, 0.0);
}

TEST(Wer, NormalizerRules) {
    Normalizer n;
    EXPECT_EQ(n.apply("Hello,  World! It's"), "hello world it's");
    EXPECT_EQ(capped_utterance_wer("HELLO world.", "hello, world"), 0.0);
    Normalizer chars;
    chars.remove_whitespace = true;
    EXPECT_EQ(chars.apply("a b  c"), "abc");
}

TEST(Wer, RangeProperty) {
    Rng rng(14);
    for (int t = 0; t < 300; ++t) {
        auto join = [](const std::vector<std::string>& w) {
            std::string s;
            for (const auto& x : w) s += x + " ";
            return s;
        };
        const auto h = join(random_words(rng, 6)), r = join(random_words(rng, 6));
        const auto w = capped_utterance_wer(h, r);
        if (!w) continue;
        EXPECT_GE(*w, 0.0);
        EXPECT_LE(*w, 1.0);
        EXPECT_EQ(*w == 0.0, Normalizer{}.apply(h) == Normalizer{}.apply(r));
    }
}

TEST(Cer, Examples) {
    EXPECT_EQ(cer("abcd", "abcd"), 0.0);
    EXPECT_DOUBLE_EQ(*cer("abed", "abcd"), 0.25);
    Normalizer chars;
    chars.remove_whitespace = true;
    EXPECT_EQ(cer("a b c d", "abcd", chars), 0.0);
    EXPECT_GT(*cer("a b c d", "abcd"), 0.0);
}

TEST(Bleu, IdenticalAndEmpty) {
    const auto ref = bleu_tokens("the cat sat down", false);
    EXPECT_EQ(bleu(ref, {ref}), 1.0);
    EXPECT_EQ(bleu({}, {ref}), 0.0);
}

TEST(Bleu, PooledHandComputed) {
    // Orders 1..4 pooled: 7/7, 5/5, 3/3, 1/1; hyp 7 tokens vs ref 8 ⇒ BP = exp(1 - 8/7).
    using Pair = std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>;
    const std::vector<Pair> pairs{{bleu_tokens("the cat sat", false), {bleu_tokens("the cat sat down", false)}},
                                  {bleu_tokens("a b c d", false), {bleu_tokens("a b c d", false)}}};
    EXPECT_NEAR(corpus_bleu(pairs), std::exp(1.0 - 8.0 / 7.0), 1e-9);
}

TEST(Bleu, ClippedCountsHandComputed) {
    // hyp "the the the the" vs ref "the cat": p1 = 1/4, higher orders 0.
    const auto h = bleu_tokens("the the the the", false);
    const auto r = bleu_tokens("the cat", false);
    EXPECT_EQ(bleu(h, {r}), 0.0);
    BleuStats s;
    s.add(h, {r}, 4);
    EXPECT_EQ(s.matches[0], 1.0);
    EXPECT_EQ(s.totals[0], 4.0);
    // Smoothing replaces the zero counts by 1e-9.
    const double smoothed = bleu(h, {r}, BleuOptions{4, true});
    const double expected = std::exp((std::log(0.25) + std::log(1e-9 / 3) + std::log(1e-9 / 2) + std::log(1e-9 / 1)) / 4);
    EXPECT_NEAR(smoothed, expected, 1e-15);
}

TEST(Bleu, PermutationInvariantAndBounded) {
    Rng rng(15);
    using Pair = std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>;
    std::vector<Pair> pairs;
    for (int i = 0; i < 40; ++i) {
        auto h = random_words(rng, 10);
        auto r = random_words(rng, 10);
        if (r.empty()) r = {"a"};
        pairs.push_back({h, {r}});
    }
    const double b = corpus_bleu(pairs);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
    for (int t = 0; t < 5; ++t) {
        rng.shuffle(pairs);
        EXPECT_EQ(corpus_bleu(pairs), b);
    }
}

TEST(Bleu, CharTokens) {
    EXPECT_EQ(bleu_tokens("ab c", true), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(bleu_tokens(" ab  c ", false), (std::vector<std::string>{"ab", "c"}));
}

TEST(Qa, Extraction) {
    EXPECT_EQ(extract_choice("The answer is B.", 4), "B");
    EXPECT_EQ(extract_choice("C", 4), "C");
    EXPECT_EQ(extract_choice("(D) because", 4), "D");
    EXPECT_FALSE(extract_choice("Eventually", 4).has_value());
    EXPECT_FALSE(extract_choice("E", 4).has_value());
    EXPECT_FALSE(extract_choice("", 4).has_value());
}

TEST(Qa, Accuracy) {
    const std::vector<QaItem> all{{"A", "A", 4}, {"the answer is B", "B", 4}};
    EXPECT_EQ(qa_accuracy(all), 1.0);
    const std::vector<QaItem> half{{"A", "A", 4}, {"C", "B", 4}};
    EXPECT_EQ(qa_accuracy(half), 0.5);
}

TEST(Breakdown, SingleGroupEqualsOverall) {
    std::vector<ScoredItem> items(10);
    for (int i = 0; i < 10; ++i) {
        items[i].id = std::to_string(i);
        items[i].score = i % 3 == 0;
        items[i].tags = {{"g", "all"}};
    }
    const std::vector<std::string> groups{"g"};
    const auto t = breakdown(items, groups);
    ASSERT_EQ(t.rows.size(), 1u);
    EXPECT_EQ(t.rows[0].n, t.overall.n);
    EXPECT_EQ(t.rows[0].score, t.overall.score);
}

TEST(Breakdown, ThreeGroupTotal) {
    const auto items = grouped_qa_items();
    const std::vector<std::string> groups{"group"};
    const auto t = breakdown(items, groups);
    EXPECT_EQ(t.overall.n, 1000u);
    EXPECT_EQ(t.overall.sum, 669.0);
    EXPECT_NEAR(100 * t.overall.score, 66.90, 1e-9);
    ASSERT_EQ(t.rows.size(), 3u);
    EXPECT_NEAR(100 * t.rows[0].score, 71.77, 0.005);
    EXPECT_NEAR(100 * t.rows[1].score, 65.27, 0.005);
    EXPECT_NEAR(100 * t.rows[2].score, 63.66, 0.005);
    EXPECT_TRUE(t.conservation_violations().empty());
}

TEST(Breakdown, RandomPartitionConservesCounts) {
    Rng rng(16);
    for (int t = 0; t < 50; ++t) {
        std::vector<ScoredItem> items(1 + rng.below(200));
        int correct = 0;
        for (std::size_t i = 0; i < items.size(); ++i) {
            items[i].id = std::to_string(i);
            items[i].score = rng.below(2) ? 1.0 : 0.0;
            correct += items[i].score > 0;
            items[i].tags = {{"p", std::to_string(rng.below(7))}, {"q", std::to_string(rng.below(3))}};
        }
        const std::vector<std::string> groups{"p", "q"};
        const auto table = breakdown(items, groups);
        EXPECT_TRUE(table.conservation_violations().empty());
        for (const std::string g : {"p", "q"}) {
            double sum = 0;
            std::size_t n = 0;
            for (const auto& r : table.rows)
                if (r.group == g) {
                    sum += r.sum;
                    n += r.n;
                }
            EXPECT_EQ(sum, static_cast<double>(correct));
            EXPECT_EQ(n, items.size());
        }
    }
}

TEST(Breakdown, MissingTagGoesToNone) {
    std::vector<ScoredItem> items(2);
    items[0].id = "a";
    items[0].tags = {{"g", "x"}};
    items[1].id = "b";
    const std::vector<std::string> groups{"g"};
    const auto t = breakdown(items, groups);
    ASSERT_EQ(t.rows.size(), 2u);
    EXPECT_EQ(t.rows[1].item, "(none)");
}
