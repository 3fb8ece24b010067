#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "sicl/train.hpp"
#include "test_util.hpp"

using namespace sicl;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<TaskDataset> words(const std::string& task, std::size_t n, std::uint64_t seed) {
    auto ds = std::make_shared<TaskDataset>();
    ds->task = TaskId(task);
    ds->leave_one_out = true;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        std::string w;
        for (int c = 0; c < 3 + static_cast<int>(rng.below(3)); ++c) w.push_back(static_cast<char>('a' + rng.below(6)));
        Sample s;
        s.id = task + "-" + std::to_string(i);
        s.task = ds->task;
        s.input = w;
        s.target = w;
        ds->query_set.push_back(s);
        ds->demo_pool.push_back(s);
    }
    return ds;
}

struct World {
    std::map<TaskId, std::shared_ptr<const TaskDataset>> data;
    Mixture mixture;
    std::vector<EmbeddingIndex> indexes;

    explicit World(std::size_t n = 12)
        : data{{TaskId("a"), words("a", n, 1)}, {TaskId("b"), words("b", n, 2)}},
          mixture(build_mixture({"m", MixtureWeighting::uniform, {{TaskId("a"), 0, 1.0}, {TaskId("b"), 0, 1.0}}}, data)),
          indexes(build_indexes(mixture, 16)) {}
};

ModelConfig model_config() {
    auto c = sicl::testing::tiny_config(2, 11);
    c.max_seq_len = 96;
    return c;
}

EpisodeConfig episode_config(std::size_t k = 2) {
    EpisodeConfig e;
    e.k = k;
    e.max_seq_len = 96;
    e.embed_dim = 16;
    e.seed = 5;
    return e;
}

TrainConfig train_config(std::size_t steps) {
    TrainConfig t;
    t.total_steps = steps;
    t.learning_rate = 3e-3;
    t.warmup_steps = 2;
    t.episodes_per_step = 2;
    t.seed = 9;
    t.checkpoint_every = 0;
    return t;
}

Transformer<double> lora_model() {
    Transformer<double> m(model_config());
    LoraConfig l;
    l.rank = 2;
    l.alpha = 8;
    l.seed = 3;
    m.attach_lora(l);
    return m;
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("sicl_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void expect_same_params(const Transformer<double>& a, const Transformer<double>& b) {
    ASSERT_EQ(a.params().names(), b.params().names());
    for (const auto& [name, m] : a.params().tensors()) {
        const auto& o = b.params().at(name);
        ASSERT_EQ(m.size(), o.size()) << name;
        for (Eigen::Index i = 0; i < m.size(); ++i) ASSERT_EQ(m.data()[i], o.data()[i]) << name;
    }
}

}  // namespace

TEST(Adam, FirstStepsMatchClosedForm) {
    ParamSet<double> p;
    p.add("w", Mat<double>::Zero(1, 2), true);
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.warmup_steps = 0;
    cfg.grad_clip_norm = 0;
    AdamState<double> st;
    Gradients<double> g{{"w", Mat<double>::Ones(1, 2)}};

    // Constant gradient: bias-corrected moments are exactly g and g², so each
    // step moves by lr·1/(1+eps).
    double m = 0, v = 0, want = 0;
    for (std::size_t step = 1; step <= 3; ++step) {
        optimizer_step(p, g, st, cfg, step);
        m = 0.9 * m + 0.1;
        v = 0.999 * v + 0.001;
        const double mh = m / (1 - std::pow(0.9, step));
        const double vh = v / (1 - std::pow(0.999, step));
        want -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        EXPECT_NEAR(p.at("w")(0, 0), want, 1e-15);
        EXPECT_NEAR(p.at("w")(0, 1), want, 1e-15);
    }
    EXPECT_NEAR(want, -0.03, 1e-8);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    ParamSet<double> p;
    Mat<double> w(2, 2);
    w << 1, -2, 3, 0.5;
    p.add("w", w, true);
    TrainConfig cfg;
    AdamState<double> st;
    optimizer_step(p, Gradients<double>{{"w", Mat<double>::Zero(2, 2)}}, st, cfg, 1);
    EXPECT_EQ(p.at("w"), w);
}

TEST(Adam, RejectsFrozenGradientAndStepZero) {
    ParamSet<double> p;
    p.add("w", Mat<double>::Zero(1, 1), false);
    p.add("u", Mat<double>::Zero(1, 1), true);
    TrainConfig cfg;
    AdamState<double> st;
    EXPECT_THROW(optimizer_step(p, Gradients<double>{{"w", Mat<double>::Ones(1, 1)}}, st, cfg, 1), ValidationError);
    EXPECT_THROW(optimizer_step(p, Gradients<double>{{"u", Mat<double>::Ones(1, 1)}}, st, cfg, 0), ValidationError);
    EXPECT_THROW(optimizer_step(p, Gradients<double>{{"u", Mat<double>::Ones(2, 1)}}, st, cfg, 1), ValidationError);
}

TEST(Clip, ScalesToMaxNorm) {
    Mat<double> a(1, 2), b(1, 2);
    a << 6, 0;
    b << 0, 8;
    Gradients<double> g{{"a", a}, {"b", b}};
    EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 10.0);
    EXPECT_NEAR(g["a"](0, 0), 0.6, 1e-15);
    EXPECT_NEAR(g["b"](0, 1), 0.8, 1e-15);

    Gradients<double> small{{"a", a / 100.0}};
    EXPECT_NEAR(clip_gradients(small, 1.0), 0.06, 1e-15);
    EXPECT_EQ(small["a"], a / 100.0);
}

TEST(Schedule, LinearWarmupThenConstant) {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.warmup_steps = 4;
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 1), 2.5e-4);
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 4), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 100), 1e-3);
    cfg.warmup_steps = 0;
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 1), 1e-3);
}

TEST(TrainConfig, ValidatesAndRoundTrips) {
    auto c = train_config(7);
    c.mode = TrainMode::sft;
    nlohmann::json j = c;
    const auto back = j.get<TrainConfig>();
    EXPECT_EQ(back.total_steps, 7u);
    EXPECT_EQ(back.mode, TrainMode::sft);
    EXPECT_EQ(back.episodes_per_step, 2u);
    c.episodes_per_step = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_THROW(train_mode_from_string("rl"), ValidationError);
}

TEST(Train, OverfitsSingleEpisode) {
    std::map<TaskId, std::shared_ptr<const TaskDataset>> data{{TaskId("a"), words("a", 2, 4)}};
    const Mixture mix = build_mixture({"one", MixtureWeighting::uniform, {{TaskId("a"), 0, 1.0}}}, data);
    const auto idx = build_indexes(mix, 16);
    Transformer<double> m(model_config());
    m.set_full_training();
    auto cfg = train_config(200);
    cfg.learning_rate = 1e-2;
    cfg.episodes_per_step = 1;
    const auto res = train(mix, idx, std::move(m), episode_config(1), cfg);
    ASSERT_EQ(res.log.steps.size(), 200u);
    EXPECT_LT(res.log.steps.back().loss, 0.1 * res.log.steps.front().loss);
}

TEST(Train, DeterministicLogAndWeights) {
    const World w;
    const auto a = train(w.mixture, w.indexes, lora_model(), episode_config(), train_config(12));
    const auto b = train(w.mixture, w.indexes, lora_model(), episode_config(), train_config(12));
    EXPECT_EQ(a.log.steps, b.log.steps);
    expect_same_params(a.model, b.model);
}

TEST(Train, ThreadCountDoesNotChangeResult) {
    const World w;
    auto cfg = train_config(6);
    cfg.episodes_per_step = 4;
    const auto a = train(w.mixture, w.indexes, lora_model(), episode_config(), cfg);
    cfg.threads = 3;
    const auto b = train(w.mixture, w.indexes, lora_model(), episode_config(), cfg);
    EXPECT_EQ(a.log.steps, b.log.steps);
    expect_same_params(a.model, b.model);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
    const World w;
    const auto dir = scratch("resume");
    auto cfg = train_config(20);
    const auto full = train(w.mixture, w.indexes, lora_model(), episode_config(), cfg);

    auto half = cfg;
    half.total_steps = 10;
    TrainOptions opt;
    opt.out_dir = dir;
    const auto first = train(w.mixture, w.indexes, lora_model(), episode_config(), half, opt);
    ASSERT_EQ(first.log.checkpoints.size(), 1u);
    EXPECT_TRUE(fs::exists(dir / "ckpt-10.bin"));

    TrainOptions resume;
    resume.resume_from = dir / "ckpt-10.bin";
    const auto second = train(w.mixture, w.indexes, Transformer<double>(model_config()), episode_config(), cfg, resume);

    std::vector<TrainLogEntry> joined = first.log.steps;
    joined.insert(joined.end(), second.log.steps.begin(), second.log.steps.end());
    EXPECT_EQ(joined, full.log.steps);
    expect_same_params(second.model, full.model);
}

TEST(Train, LoraLeavesFrozenPartitionByteIdentical) {
    const World w;
    const auto before = lora_model();
    const auto res = train(w.mixture, w.indexes, before, episode_config(), train_config(8));
    for (const auto& name : before.params().frozen_names()) EXPECT_EQ(before.params().at(name), res.model.params().at(name)) << name;
    bool moved = false;
    for (const auto& name : before.params().trainable_names())
        moved = moved || before.params().at(name) != res.model.params().at(name);
    EXPECT_TRUE(moved);
}

TEST(Train, SftModeUsesNoDemonstrations) {
    const World w;
    auto cfg = train_config(10);
    cfg.mode = TrainMode::sft;
    auto ep = episode_config(4);
    ep.randomize_k = true;
    const auto res = train(w.mixture, w.indexes, lora_model(), ep, cfg);
    for (const auto& e : res.log.steps) EXPECT_EQ(e.k, 0u);
    const auto eff = effective_episode_config(ep, cfg);
    EXPECT_EQ(eff.k, 0u);
    EXPECT_FALSE(eff.randomize_k);
}

TEST(Train, ZeroDemoSiclEpisodesEqualSft) {
    const World w;
    auto sicl = train_config(5);
    auto sft = sicl;
    sft.mode = TrainMode::sft;
    const auto a = train(w.mixture, w.indexes, lora_model(), episode_config(0), sicl);
    const auto b = train(w.mixture, w.indexes, lora_model(), episode_config(3), sft);
    EXPECT_EQ(a.log.steps, b.log.steps);
    expect_same_params(a.model, b.model);
}

TEST(Train, ZeroStepsReturnsInitialModel) {
    const World w;
    const auto init = lora_model();
    const auto dir = scratch("zero");
    TrainOptions opt;
    opt.out_dir = dir;
    const auto res = train(w.mixture, w.indexes, init, episode_config(), train_config(0), opt);
    EXPECT_TRUE(res.log.steps.empty());
    expect_same_params(res.model, init);
}

TEST(Train, RejectsModelWithoutTrainableParameters) {
    const World w;
    EXPECT_THROW(train(w.mixture, w.indexes, Transformer<double>(model_config()), episode_config(), train_config(1)),
                 ValidationError);
}

TEST(Train, LossDecreasesOnAverage) {
    const World w(24);
    Transformer<double> m(model_config());
    m.set_full_training();
    auto cfg = train_config(150);
    cfg.learning_rate = 5e-3;
    const auto res = train(w.mixture, w.indexes, std::move(m), episode_config(), cfg);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        head += res.log.steps[i].loss;
        tail += res.log.steps[res.log.steps.size() - 1 - i].loss;
    }
    EXPECT_LT(tail, 0.7 * head);
}

TEST(TrainLog, JsonLinesRoundTrip) {
    const World w;
    const auto dir = scratch("log");
    auto cfg = train_config(6);
    cfg.checkpoint_every = 3;
    TrainOptions opt;
    opt.out_dir = dir;
    const auto res = train(w.mixture, w.indexes, lora_model(), episode_config(), cfg, opt);
    ASSERT_EQ(res.log.checkpoints.size(), 2u);
    res.log.write_jsonl(dir / "log.jsonl");
    const auto back = TrainLog::read_jsonl(dir / "log.jsonl");
    EXPECT_EQ(back.steps, res.log.steps);
    EXPECT_EQ(back.checkpoints, res.log.checkpoints);
}

TEST(Checkpoint, TrainCheckpointRestoresStreamAndMoments) {
    const World w;
    const auto dir = scratch("ckpt");
    auto cfg = train_config(4);
    TrainOptions opt;
    opt.out_dir = dir;
    const auto res = train(w.mixture, w.indexes, lora_model(), episode_config(), cfg, opt);
    const auto ck = load_train_checkpoint<double>(dir / "ckpt-4.bin");
    EXPECT_EQ(ck.step, 4u);
    expect_same_params(ck.model, res.model);
    EXPECT_EQ(ck.adam.m.size(), res.model.params().trainable_names().size());

    EpisodeSampler s(w.mixture, w.indexes, episode_config());
    for (int i = 0; i < 8; ++i) s.next();
    EXPECT_EQ(ck.stream, s.state());
}
