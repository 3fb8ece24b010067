#include "sicl/train.hpp"

#include <cmath>
#include <fstream>
#include <thread>
#include <utility>

#include "sicl/common.hpp"

namespace sicl {

using nlohmann::json;

std::string to_string(TrainMode mode) { return mode == TrainMode::sft ? "sft" : "sicl_at"; }

TrainMode train_mode_from_string(std::string_view name) {
    if (name == "sicl_at") return TrainMode::sicl_at;
    if (name == "sft") return TrainMode::sft;
    throw ValidationError("unknown train mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
    if (weight_decay < 0) throw ValidationError("weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValidationError("betas must lie in [0, 1)");
    if (!(eps > 0)) throw ValidationError("eps must be positive");
    if (episodes_per_step == 0) throw ValidationError("episodes_per_step must be at least 1");
    if (threads == 0) throw ValidationError("threads must be at least 1");
}

void to_json(json& j, const TrainConfig& c) {
    j = {{"total_steps", c.total_steps},
         {"learning_rate", c.learning_rate},
         {"warmup_steps", c.warmup_steps},
         {"weight_decay", c.weight_decay},
         {"grad_clip_norm", c.grad_clip_norm},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eps", c.eps},
         {"episodes_per_step", c.episodes_per_step},
         {"seed", c.seed},
         {"mode", to_string(c.mode)},
         {"checkpoint_every", c.checkpoint_every},
         {"threads", c.threads}};
}

void from_json(const json& j, TrainConfig& c) {
    TrainConfig d;
    c.total_steps = j.value("total_steps", d.total_steps);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.episodes_per_step = j.value("episodes_per_step", d.episodes_per_step);
    c.seed = j.value("seed", d.seed);
    c.mode = train_mode_from_string(j.value("mode", to_string(d.mode)));
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.threads = j.value("threads", d.threads);
}

EpisodeConfig effective_episode_config(EpisodeConfig ep, const TrainConfig& cfg) {
    if (cfg.mode == TrainMode::sft) {
        ep.k = 0;
        ep.randomize_k = false;
        ep.k_min = 0;
    }
    return ep;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps == 0) return cfg.learning_rate;
    return cfg.learning_rate * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
}

template <typename T>
double clip_gradients(Gradients<T>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, g] : grads) sq += g.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& [_, g] : grads) g *= scale;
    }
    return norm;
}

template <typename T>
double optimizer_step(ParamSet<T>& params, Gradients<T> grads, AdamState<T>& state, const TrainConfig& cfg,
                      std::size_t step) {
    if (step == 0) throw ValidationError("optimizer steps are 1-based");
    for (const auto& [name, g] : grads) {
        if (!params.trainable(name)) throw ValidationError("gradient for non-trainable parameter " + name);
        const auto& p = params.at(name);
        if (p.rows() != g.rows() || p.cols() != g.cols()) throw ValidationError("gradient shape mismatch for " + name);
    }
    const double norm = clip_gradients(grads, cfg.grad_clip_norm);
    const double lr = learning_rate_at(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    for (const auto& name : params.trainable_names()) {
        auto& p = params.at(name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() == 0) {
            m = Mat<T>::Zero(p.rows(), p.cols());
            v = Mat<T>::Zero(p.rows(), p.cols());
        }
        const auto it = grads.find(name);
        if (it != grads.end()) {
            m = b1 * m + (T(1) - b1) * it->second;
            v = b2 * v + (T(1) - b2) * it->second.cwiseProduct(it->second);
        } else {
            m *= b1;
            v *= b2;
        }
        const T step_size = static_cast<T>(lr / bc1);
        const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
        const T eps = static_cast<T>(cfg.eps);
        if (cfg.weight_decay > 0) p *= static_cast<T>(1.0 - lr * cfg.weight_decay);
        p.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + eps);
    }
    return norm;
}

// ─── Log ────────────────────────────────────────────────────────────────────

json TrainLogEntry::to_json() const {
    return {{"step", step}, {"task", task}, {"k", k}, {"loss", loss}, {"grad_norm", grad_norm}, {"lr", lr}};
}

TrainLogEntry TrainLogEntry::from_json(const json& j) {
    TrainLogEntry e;
    e.step = j.at("step").get<std::size_t>();
    e.task = j.at("task").get<std::string>();
    e.k = j.at("k").get<std::size_t>();
    e.loss = j.at("loss").get<double>();
    e.grad_norm = j.at("grad_norm").get<double>();
    e.lr = j.at("lr").get<double>();
    return e;
}

void TrainLog::write_jsonl(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    std::size_t c = 0;
    for (const auto& e : steps) {
        os << e.to_json().dump() << '\n';
        while (c < checkpoints.size() && checkpoints[c].first == e.step) {
            os << json{{"event", "checkpoint"}, {"step", checkpoints[c].first}, {"path", checkpoints[c].second}}.dump()
               << '\n';
            ++c;
        }
    }
    for (; c < checkpoints.size(); ++c)
        os << json{{"event", "checkpoint"}, {"step", checkpoints[c].first}, {"path", checkpoints[c].second}}.dump()
           << '\n';
}

TrainLog TrainLog::read_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path.string());
    TrainLog log;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error&) {
            throw ParseError("malformed train log record", n);
        }
        if (j.contains("event"))
            log.checkpoints.emplace_back(j.at("step").get<std::size_t>(), j.at("path").get<std::string>());
        else
            log.steps.push_back(TrainLogEntry::from_json(j));
    }
    return log;
}

// ─── Checkpoints ────────────────────────────────────────────────────────────

template <typename T>
void save_train_checkpoint(const std::filesystem::path& path, const Transformer<T>& model, const AdamState<T>& adam,
                           const EpisodeStreamState& stream, std::size_t step, const TrainConfig& cfg) {
    auto file = checkpoint_of(model);
    constexpr bool single = std::is_same_v<T, float>;
    for (const auto& [name, m] : adam.m) file.tensors.push_back({"opt.m/" + name, m.template cast<double>(), single});
    for (const auto& [name, v] : adam.v) file.tensors.push_back({"opt.v/" + name, v.template cast<double>(), single});
    file.header["train"] = {{"step", step}, {"stream", stream.to_json()}, {"config", cfg}};
    write_tensor_file(path, file);
}

template <typename T>
TrainCheckpoint<T> load_train_checkpoint(const std::filesystem::path& path) {
    const auto file = read_tensor_file(path);
    if (!file.header.contains("train")) throw ValidationError(path.string() + " is not a training checkpoint");
    TrainCheckpoint<T> ck{model_from_checkpoint<T>(file), {}, EpisodeStreamState{}, 0};
    const auto& tr = file.header.at("train");
    ck.step = tr.at("step").get<std::size_t>();
    ck.stream = EpisodeStreamState::from_json(tr.at("stream"));
    for (const auto& t : file.tensors) {
        if (t.name.rfind("opt.m/", 0) == 0) ck.adam.m[t.name.substr(6)] = t.value.template cast<T>();
        if (t.name.rfind("opt.v/", 0) == 0) ck.adam.v[t.name.substr(6)] = t.value.template cast<T>();
    }
    return ck;
}

// ─── Loop ───────────────────────────────────────────────────────────────────

template <typename T>
TrainResult<T> train(const Mixture& mixture, std::span<const EmbeddingIndex> indexes, Transformer<T> model,
                     const EpisodeConfig& ep_cfg, const TrainConfig& cfg, const TrainOptions& opt) {
    cfg.validate();
    EpisodeSampler sampler(mixture, indexes, effective_episode_config(ep_cfg, cfg));
    AdamState<T> adam;
    std::size_t start = 0;
    if (opt.resume_from) {
        auto ck = load_train_checkpoint<T>(*opt.resume_from);
        model = std::move(ck.model);
        adam = std::move(ck.adam);
        sampler.restore(ck.stream);
        start = ck.step;
    }
    if (cfg.total_steps > start && model.params().trainable_names().empty())
        throw ValidationError("model has no trainable parameters");

    TrainResult<T> res{std::move(model), {}};
    auto& m = res.model;
    const std::size_t n = cfg.episodes_per_step;
    const std::size_t threads = std::min(cfg.threads, n);
    std::vector<Episode> episodes(n);
    std::vector<LossAndGrad<T>> parts(n);
    std::vector<std::exception_ptr> errors(n);

    for (std::size_t step = start + 1; step <= cfg.total_steps; ++step) {
        for (auto& e : episodes) e = sampler.next();
        auto work = [&](std::size_t w) {
            for (std::size_t i = w; i < n; i += threads) {
                try {
                    parts[i] = m.loss_and_grad(input_of(episodes[i].seq), episodes[i].seq.loss_mask);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        };
        if (threads == 1) {
            work(0);
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
        }
        for (auto& e : errors) {
            if (!e) continue;
            try {
                std::rethrow_exception(std::exchange(e, nullptr));
            } catch (const NumericError& ex) {
                throw NumericError("step " + std::to_string(step) + ": " + ex.what());
            }
        }

        // Sum in draw order so the result does not depend on scheduling.
        Gradients<T> grads = std::move(parts[0].grads);
        double loss = static_cast<double>(parts[0].loss);
        for (std::size_t i = 1; i < n; ++i) {
            for (auto& [name, g] : parts[i].grads) {
                auto it = grads.find(name);
                if (it == grads.end())
                    grads.emplace(name, std::move(g));
                else
                    it->second += g;
            }
            loss += static_cast<double>(parts[i].loss);
        }
        if (n > 1) {
            const T inv = T(1) / static_cast<T>(n);
            for (auto& [_, g] : grads) g *= inv;
            loss /= static_cast<double>(n);
        }
        if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));

        TrainLogEntry entry;
        entry.step = step;
        for (std::size_t i = 0; i < n; ++i) entry.task += (i ? "," : "") + episodes[i].task.str();
        entry.k = episodes[0].demos.size();
        entry.loss = loss;
        entry.lr = learning_rate_at(cfg, step);
        entry.grad_norm = optimizer_step(m.params(), std::move(grads), adam, cfg, step);
        res.log.steps.push_back(entry);
        if (opt.on_step) opt.on_step(entry);

        const bool due = (cfg.checkpoint_every && step % cfg.checkpoint_every == 0) || step == cfg.total_steps;
        if (due && !opt.out_dir.empty()) {
            const auto path = opt.out_dir / ("ckpt-" + std::to_string(step) + ".bin");
            save_train_checkpoint(path, m, adam, sampler.state(), step, cfg);
            res.log.checkpoints.emplace_back(step, path.string());
        }
    }
    return res;
}

template double clip_gradients(Gradients<double>&, double);
template double clip_gradients(Gradients<float>&, double);
template double optimizer_step(ParamSet<double>&, Gradients<double>, AdamState<double>&, const TrainConfig&,
                               std::size_t);
template double optimizer_step(ParamSet<float>&, Gradients<float>, AdamState<float>&, const TrainConfig&, std::size_t);
template void save_train_checkpoint(const std::filesystem::path&, const Transformer<double>&, const AdamState<double>&,
                                    const EpisodeStreamState&, std::size_t, const TrainConfig&);
template void save_train_checkpoint(const std::filesystem::path&, const Transformer<float>&, const AdamState<float>&,
                                    const EpisodeStreamState&, std::size_t, const TrainConfig&);
template TrainCheckpoint<double> load_train_checkpoint(const std::filesystem::path&);
template TrainCheckpoint<float> load_train_checkpoint(const std::filesystem::path&);
template TrainResult<double> train(const Mixture&, std::span<const EmbeddingIndex>, Transformer<double>,
                                   const EpisodeConfig&, const TrainConfig&, const TrainOptions&);
template TrainResult<float> train(const Mixture&, std::span<const EmbeddingIndex>, Transformer<float>,
                                  const EpisodeConfig&, const TrainConfig&, const TrainOptions&);

}  // namespace sicl
