#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "sicl/metrics.hpp"
#include "sicl/synthbench.hpp"

using namespace sicl;

namespace {

DomainSpec two_char_domain(double noise) {
    DomainSpec d;
    d.id = "toy";
    d.prototypes = {{'a', {1, 0, 0}}, {'b', {0, 1, 0}}, {' ', {0, 0, 1}}};
    d.shift = {0.5f, -0.25f, 2.0f};
    d.noise = noise;
    d.frame_rate = 2;
    return d;
}

WorldConfig small_world(std::uint64_t seed = 3) {
    WorldConfig c;
    c.seed = seed;
    c.scale = 0.01;
    c.backbone_domains = 6;
    c.backbone_size = 20;
    c.backbone_st_domains = 2;
    c.eval_size = 20;
    c.eval_pool_size = 40;
    c.sft_size = 30;
    return c;
}

bool same_dataset(const TaskDataset& a, const TaskDataset& b) {
    if (a.query_set.size() != b.query_set.size() || a.demo_pool.size() != b.demo_pool.size()) return false;
    auto same = [](const Sample& x, const Sample& y) {
        if (x.id != y.id || x.target != y.target || x.tags != y.tags) return false;
        const auto* fx = std::get_if<FeatureSeq>(&x.input);
        const auto* fy = std::get_if<FeatureSeq>(&y.input);
        return fx && fy && *fx == *fy;
    };
    for (std::size_t i = 0; i < a.query_set.size(); ++i)
        if (!same(a.query_set[i], b.query_set[i])) return false;
    for (std::size_t i = 0; i < a.demo_pool.size(); ++i)
        if (!same(a.demo_pool[i], b.demo_pool[i])) return false;
    return true;
}

}  // namespace

TEST(Domain, NoiseFreeRenderIsPrototypePlusShift) {
    const auto d = two_char_domain(0.0);
    Rng rng(1);
    const auto f = d.render("ab", rng);
    ASSERT_EQ(f.rows(), 4);
    ASSERT_EQ(f.cols(), 3);
    for (int r = 0; r < 4; ++r) {
        const auto& p = d.prototypes.at(r < 2 ? 'a' : 'b');
        for (int j = 0; j < 3; ++j) EXPECT_FLOAT_EQ(f(r, j), p[j] + d.shift[j]);
    }
}

TEST(Domain, ValidateRejectsSimilarPrototypesAndNegativeNoise) {
    auto d = two_char_domain(0.0);
    d.prototypes['c'] = {1, 0.1f, 0};
    EXPECT_THROW(d.validate(), ValidationError);
    auto n = two_char_domain(-1.0);
    EXPECT_THROW(n.validate(), ValidationError);
    Rng rng(1);
    EXPECT_THROW(two_char_domain(0).render("az", rng), ValidationError);
}

TEST(Domain, OracleDecodesNoiseFreeInputExactly) {
    const auto d = two_char_domain(0.0);
    Rng rng(4);
    for (const std::string text : {"a", "ab ba", "bbb a"}) EXPECT_EQ(oracle_decode(d, d.render(text, rng)), text);
}

TEST(Domain, ShiftRecoverableFromOnePair) {
    const auto d = two_char_domain(0.0);
    Rng rng(4);
    const auto s = recover_shift(d, d.render("ab a", rng), "ab a");
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s[j], d.shift[j], 1e-6);
    EXPECT_THROW(recover_shift(d, d.render("ab", rng), "abb"), ValidationError);
}

TEST(Task, TargetsArePureFunctionsOfText) {
    SynthTaskSpec st;
    st.kind = TaskKind::st;
    st.substitution = {{'a', 'b'}, {'b', 'a'}};
    EXPECT_EQ(st.make_target("abc d"), "d cab");
    EXPECT_EQ(st.make_target("abc d"), st.make_target("abc d"));

    SynthTaskSpec qa;
    qa.kind = TaskKind::sqa;
    qa.marker = 'a';
    EXPECT_EQ(qa.make_target("bcd"), "A");
    EXPECT_EQ(qa.make_target("ab a"), "C");
    EXPECT_EQ(qa.make_target("aaaa aa"), "D");
    EXPECT_EQ(qa.choices().size(), 4u);

    SynthTaskSpec asr;
    EXPECT_EQ(asr.make_target("ab ba"), "ab ba");
}

TEST(GenDataset, DeterministicAndSplit) {
    SynthTaskSpec spec;
    spec.lexicon = {"ab", "ba", "a"};
    const auto d = two_char_domain(0.3);
    const auto x = gen_dataset(TaskId("t"), spec, d, 10, 42);
    const auto y = gen_dataset(TaskId("t"), spec, d, 10, 42);
    EXPECT_TRUE(same_dataset(x, y));
    EXPECT_EQ(x.query_set.size(), 5u);
    EXPECT_EQ(x.demo_pool.size(), 5u);
    EXPECT_FALSE(same_dataset(x, gen_dataset(TaskId("t"), spec, d, 10, 43)));
    EXPECT_THROW(gen_dataset(TaskId("t"), spec, d, 1, 42), ValidationError);

    spec.leave_one_out = true;
    const auto loo = gen_dataset(TaskId("t"), spec, d, 6, 1);
    EXPECT_TRUE(loo.leave_one_out);
    EXPECT_EQ(loo.query_set.size(), 6u);
    EXPECT_EQ(loo.demo_pool.size(), 6u);
}

TEST(GenDataset, NoiseFreeOracleWerIsZero) {
    SynthTaskSpec spec;
    spec.lexicon = {"ab", "ba", "abb", "b"};
    spec.max_words = 3;
    const auto d = two_char_domain(0.0);
    const auto ds = gen_dataset(TaskId("t"), spec, d, 40, 7);
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& s : ds.query_set) {
        pairs.emplace_back(oracle_decode(d, std::get<FeatureSeq>(s.input)), s.target);
    }
    EXPECT_EQ(corpus_wer(pairs).mean, 0.0);
}

TEST(World, SameSeedSameData) {
    const auto a = build_world(small_world(3));
    const auto b = build_world(small_world(3));
    ASSERT_EQ(a.datasets.size(), b.datasets.size());
    for (const auto& [id, ds] : a.datasets) EXPECT_TRUE(same_dataset(*ds, *b.datasets.at(id))) << id.str();
    EXPECT_EQ(a.lexicon, b.lexicon);
    const auto c = build_world(small_world(4));
    EXPECT_FALSE(same_dataset(*a.datasets.at(TaskId("eval.shift_a")), *c.datasets.at(TaskId("eval.shift_a"))));
}

TEST(World, DomainsSatisfyInvariants) {
    const auto w = build_world(small_world());
    for (const auto& [id, d] : w.domains) {
        EXPECT_NO_THROW(d.validate()) << id.str();
        EXPECT_GE(d.noise, 0.0);
    }
    // Noise-free copies of every domain decode perfectly with the oracle.
    Rng rng(0);
    for (const auto& [id, d] : w.domains) {
        auto clean = d;
        clean.noise = 0;
        const std::string text = w.lexicon[0] + " " + w.lexicon[1];
        EXPECT_EQ(oracle_decode(clean, clean.render(text, rng)), text) << id.str();
    }
}

TEST(World, OracleDecodesNoisyAsrAlmostPerfectly) {
    const auto w = build_world(small_world());
    const TaskId task("eval.shift_a");
    const auto& d = w.domains.at(task);
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& s : w.datasets.at(task)->query_set) {
        pairs.emplace_back(oracle_decode(d, std::get<FeatureSeq>(s.input)), s.target);
    }
    EXPECT_LT(corpus_wer(pairs).mean, 0.05);
}

TEST(World, EvalShiftsHaveConfiguredNorm) {
    const auto w = build_world(small_world());
    for (const char* id : {"eval.shift_a", "eval.shift_b"}) {
        double n = 0;
        for (float x : w.domains.at(TaskId(id)).shift) n += double(x) * x;
        EXPECT_NEAR(std::sqrt(n), w.config.eval_shift, 1e-4) << id;
    }
    EXPECT_EQ(w.domains.at(TaskId("eval.perm")).tier, 1);
}

TEST(World, HighResourceAsrMatchesTableScale) {
    WorldConfig c;
    c.backbone_domains = 2;
    c.backbone_st_domains = 1;
    c.st_sizes = {8};
    c.sqa_size = 8;
    const auto w = build_world(c);
    std::size_t total = 0;
    for (const auto& id : w.tasks_with_prefix("asr_en.")) {
        const auto& ds = *w.datasets.at(id);
        total += ds.query_set.size() + ds.demo_pool.size();
    }
    EXPECT_EQ(total, 16368u);
    EXPECT_EQ(w.tasks_with_prefix("asr_en.").size(), c.asr_groups);
}

TEST(World, SftSetIsNarrowSampleOfOneShiftedDomain) {
    const auto w = build_world(small_world());
    const auto& sft = *w.datasets.at(TaskId("sft.shift_a"));
    EXPECT_EQ(sft.query_set.size(), w.config.sft_size);
    EXPECT_EQ(w.domains.at(TaskId("sft.shift_a")).shift, w.domains.at(TaskId("eval.shift_a")).shift);
    const std::set<std::string> allowed(w.lexicon.begin(), w.lexicon.begin() + w.config.sft_lexicon_size);
    for (const auto& s : sft.query_set) {
        EXPECT_EQ(s.tags.at("domain"), "eval.shift_a");
        std::istringstream words(s.target);
        for (std::string word; words >> word;) EXPECT_TRUE(allowed.contains(word)) << word;
    }
}

TEST(Preset, UnknownNameThrows) {
    EXPECT_THROW(preset_experiment("sicl_at9"), ValidationError);
    EXPECT_EQ(preset_names().size(), 6u);
}

TEST(Preset, At2IsAt1PlusTranslation) {
    const auto at1 = preset_experiment("sicl_at1");
    const auto at2 = preset_experiment("sicl_at2");
    ASSERT_GT(at2.mixture.entries.size(), at1.mixture.entries.size());
    for (std::size_t i = 0; i < at1.mixture.entries.size(); ++i)
        EXPECT_EQ(at2.mixture.entries[i].task, at1.mixture.entries[i].task);
    for (std::size_t i = at1.mixture.entries.size(); i < at2.mixture.entries.size(); ++i)
        EXPECT_EQ(at2.mixture.entries[i].task.str().rfind("st.", 0), 0u);
}

TEST(Preset, At3AddsLeaveOneOutQa) {
    const auto at3 = preset_experiment("sicl_at3");
    EXPECT_EQ(at3.mixture.entries.back().task, TaskId("sqa"));
    WorldConfig c = small_world();
    c.scale = 1.0;
    c.asr_size = 16;
    c.st_sizes = {8};
    const auto w = build_world(c);
    const auto& sqa = *w.datasets.at(TaskId("sqa"));
    EXPECT_TRUE(sqa.leave_one_out);
    EXPECT_EQ(sqa.query_set.size(), 5000u);
}

TEST(Preset, SftBaselineTrainsOnOneSmallShiftedSet) {
    const auto b = preset_experiment("sft_baseline");
    ASSERT_EQ(b.mixture.entries.size(), 1u);
    EXPECT_EQ(b.mixture.entries[0].task, TaskId("sft.shift_a"));
    EXPECT_EQ(b.train.mode, TrainMode::sft);
    EXPECT_LE(WorldConfig{}.sft_size, 500u);
    const auto cv = preset_experiment("cv_transfer");
    EXPECT_EQ(cv.train.mode, TrainMode::sft);
}

TEST(Preset, EvalSuitesAndModelSize) {
    for (const auto& name : preset_names()) {
        const auto b = preset_experiment(name);
        EXPECT_EQ(b.eval_suites.size(), 5u) << name;
        EXPECT_LE(b.model.parameter_count(), 2'000'000u) << name;
        if (name != "base") {
            EXPECT_EQ(b.init_from, std::optional<std::string>("base"));
            EXPECT_FALSE(b.full_parameters);
        }
    }
    EXPECT_TRUE(preset_experiment("base").full_parameters);
}

TEST(Preset, BundleJsonRoundTrip) {
    const auto b = preset_experiment("sicl_at2");
    const auto j = to_json(b);
    EXPECT_EQ(to_json(bundle_from_json(j)), j);
}

TEST(WorldConfig, JsonRoundTripAndValidation) {
    const auto c = small_world(9);
    nlohmann::json j = c;
    nlohmann::json back = j.get<WorldConfig>();
    EXPECT_EQ(back, j);
    auto bad = c;
    bad.alphabet = "aab c";
    EXPECT_THROW(bad.validate(), ValidationError);
    bad = c;
    bad.sft_lexicon_size = bad.lexicon_size + 1;
    EXPECT_THROW(bad.validate(), ValidationError);
}
