#pragma once

#include "dipcg/checkpoint.hpp"
#include "dipcg/dataset.hpp"
#include "dipcg/denoiser.hpp"
#include "dipcg/diffusion.hpp"
#include "dipcg/render.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace dipcg {

// ---- training configuration -------------------------------------------------

struct TrainConfig {
    int batch_size = 64;
    double lr = 1e-4;
    int warmup_steps = 100;
    bool cosine_decay = false;  ///< decay to 10% of lr over the run after warmup
    double grad_clip = 0.0;     ///< global-norm clip; 0 disables
    int steps = 1000;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;   ///< 0 writes only the final checkpoint
    bool train_on_all = false;  ///< use the validation split for training too
    // per-sample augmentation probabilities
    double p_flip = 0.5;
    double p_jitter = 0.5;
    double p_crop = 0.5;
    double p_mask = 0.15;
    double p_edge = 0.15;
    // model and noise schedule
    std::optional<DenoiserConfig> denoiser; ///< defaults to DenoiserConfig::desk(N)
    CondMode mode = CondMode::Patch;
    int schedule_T = 1000;
    double beta_min = 1e-4, beta_max = 0.02;

    void check() const {
        if (batch_size < 1) throw InvalidInput("batch_size must be >= 1");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidInput("lr must be positive");
        if (warmup_steps < 0 || steps < 0 || checkpoint_every < 0) throw InvalidInput("step counts must be >= 0");
        if (grad_clip < 0.0) throw InvalidInput("grad_clip must be >= 0");
        for (double p : {p_flip, p_jitter, p_crop, p_mask, p_edge})
            if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("augmentation probabilities must lie in [0, 1]");
        if (p_mask + p_edge > 1.0) throw InvalidInput("p_mask + p_edge must not exceed 1");
        build_schedule(schedule_T, beta_min, beta_max);
    }

    /// Turn off all image augmentation.
    TrainConfig& no_augment() {
        p_flip = p_jitter = p_crop = p_mask = p_edge = 0.0;
        return *this;
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j = {{"batch_size", c.batch_size},
                        {"lr", c.lr},
                        {"warmup_steps", c.warmup_steps},
                        {"cosine_decay", c.cosine_decay},
                        {"grad_clip", c.grad_clip},
                        {"steps", c.steps},
                        {"seed", c.seed},
                        {"checkpoint_every", c.checkpoint_every},
                        {"train_on_all", c.train_on_all},
                        {"p_flip", c.p_flip},
                        {"p_jitter", c.p_jitter},
                        {"p_crop", c.p_crop},
                        {"p_mask", c.p_mask},
                        {"p_edge", c.p_edge},
                        {"mode", c.mode == CondMode::Patch ? "patch" : "external"},
                        {"schedule", {{"T", c.schedule_T}, {"beta_min", c.beta_min}, {"beta_max", c.beta_max}}}};
    if (c.denoiser) j["denoiser"] = to_json(*c.denoiser);
    return j;
}

/// Unknown keys are rejected so that typos do not silently fall back to defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "batch_size", "lr",     "warmup_steps", "cosine_decay", "grad_clip", "steps",  "seed",  "checkpoint_every",
        "train_on_all", "p_flip", "p_jitter",   "p_crop",       "p_mask",    "p_edge", "mode",  "schedule",
        "denoiser"};
    if (!j.is_object()) throw InvalidInput("training config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw InvalidInput("unknown training config key '" + k + "'");
    TrainConfig c;
    try {
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.steps = j.value("steps", c.steps);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.train_on_all = j.value("train_on_all", c.train_on_all);
        c.p_flip = j.value("p_flip", c.p_flip);
        c.p_jitter = j.value("p_jitter", c.p_jitter);
        c.p_crop = j.value("p_crop", c.p_crop);
        c.p_mask = j.value("p_mask", c.p_mask);
        c.p_edge = j.value("p_edge", c.p_edge);
        const std::string mode = j.value("mode", std::string("patch"));
        if (mode != "patch" && mode != "external") throw InvalidInput("unknown condition mode '" + mode + "'");
        c.mode = mode == "external" ? CondMode::External : CondMode::Patch;
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            c.schedule_T = s.value("T", c.schedule_T);
            c.beta_min = s.value("beta_min", c.beta_min);
            c.beta_max = s.value("beta_max", c.beta_max);
        }
        if (j.contains("denoiser")) c.denoiser = denoiser_config_from_json(j.at("denoiser"));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed training config: ") + e.what());
    }
    c.check();
    return c;
}

/// Generators whose meshes are symmetric under x -> -x, for which a horizontal
/// image flip keeps the parameter label valid.
inline bool flip_is_label_safe(const std::string& generator_id) {
    return generator_id == "chair" || generator_id == "table" || generator_id == "vase";
}

// ---- optimizer ------------------------------------------------------------

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999).
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    nn::ParamSet<float> m, v;
    std::int64_t t = 0;

    void init(const nn::ParamSet<float>& w) {
        m = w.zeros_like();
        v = w.zeros_like();
        t = 0;
    }

    void step(nn::ParamSet<float>& w, const nn::ParamSet<float>& g, double lr) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
        const float step_size = static_cast<float>(lr / c1);
        const float inv_c2 = static_cast<float>(1.0 / std::sqrt(c2));
        const float e = static_cast<float>(eps);
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i].cwiseProduct(g[i]);
            w[i].array() -= step_size * m[i].array() / (v[i].array().sqrt() * inv_c2 + e);
        }
    }
};

/// Learning rate at 0-based `step`: linear warmup, then constant or cosine decay.
inline double learning_rate(const TrainConfig& c, int step) {
    if (c.warmup_steps > 0 && step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / c.warmup_steps;
    if (!c.cosine_decay || c.steps <= c.warmup_steps) return c.lr;
    const double frac = static_cast<double>(step - c.warmup_steps) / (c.steps - c.warmup_steps);
    return c.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * std::min(frac, 1.0))));
}

// ---- training ---------------------------------------------------------------

/// Thrown when training produces a non-finite loss or gradient. Carries the
/// state from just before the failing step.
struct LastGoodCheckpoint : Error {
    LastGoodCheckpoint(Checkpoint c, int failed_step)
        : Error("non-finite loss at step " + std::to_string(failed_step)), checkpoint(std::move(c)),
          step(failed_step) {}
    Checkpoint checkpoint;
    int step;
};

/// Maps a dataset item to externally produced condition tokens.
using TokenProvider = std::function<ConditionTokens(std::size_t item_index)>;

struct TrainHooks {
    std::ostream* loss_log = nullptr;   ///< receives CSV rows "step,loss,lr"
    bool write_log_header = true;
    std::string checkpoint_path;        ///< empty disables checkpoint files
    TokenProvider tokens;               ///< required in external mode
    std::function<void(int step, double loss)> on_step;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<double> losses;
};

inline DenoiserConfig resolve_denoiser_config(const TrainConfig& c, const std::string& generator_id, int image_size) {
    DenoiserConfig d = c.denoiser ? *c.denoiser : DenoiserConfig::desk(static_cast<int>(schema(generator_id).size()));
    d.mode = c.mode;
    d.image_size = image_size;
    if (d.n_param_tokens != static_cast<int>(schema(generator_id).size()))
        throw InvalidInput("denoiser n_param_tokens does not match generator '" + generator_id + "'");
    d.check();
    return d;
}

namespace detail {

/// Per-sample augmentation draw: flip, jitter and crop independently, then a
/// single uniform draw picks mask (p_mask), edges (next p_edge) or neither.
inline AugmentRecord draw_train_augment(const TrainConfig& c, Rng& rng) {
    AugmentRecord r;
    r.flip = rng.bernoulli(c.p_flip);
    if (rng.bernoulli(c.p_jitter)) {
        r.brightness = rng.uniform(-0.1, 0.1);
        r.contrast = rng.uniform(0.9, 1.1);
    }
    if (rng.bernoulli(c.p_crop)) {
        r.crop_scale = rng.uniform(0.85, 1.0);
        r.crop_x = rng.uniform();
        r.crop_y = rng.uniform();
    }
    const double u = rng.uniform();
    if (u < c.p_mask)
        r.replace = Replace::Mask;
    else if (u < c.p_mask + c.p_edge)
        r.replace = Replace::Edges;
    return r;
}

/// Item for global sample position g: walks a fresh shuffle of the pool every epoch.
class EpochSampler {
public:
    EpochSampler(std::vector<std::size_t> pool, std::uint64_t seed) : pool_(std::move(pool)), seed_(seed) {}

    std::size_t at(std::uint64_t g) {
        const std::uint64_t epoch = g / pool_.size();
        if (epoch != epoch_ || order_.empty()) {
            order_ = pool_;
            Rng rng(mix_seed(seed_, epoch));
            for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.index(i)]);
            epoch_ = epoch;
        }
        return order_[g % pool_.size()];
    }

private:
    std::vector<std::size_t> pool_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::uint64_t epoch_ = 0;
};

inline double global_norm(const nn::ParamSet<float>& g) {
    double acc = 0.0;
    for (const auto& t : g.tensors) acc += static_cast<double>(t.squaredNorm());
    return std::sqrt(acc);
}

} // namespace detail

/// Condition input rows for dataset items, with optional per-item augmentation.
inline nn::Mat<float> condition_rows(const Denoiser<float>& net, const Dataset& ds,
                                     const std::vector<std::size_t>& idx, const std::vector<AugmentRecord>* aug,
                                     const TokenProvider& tokens) {
    if (net.config().mode == CondMode::External) {
        if (!tokens) throw InvalidInput("external condition mode needs a token provider");
        std::vector<ConditionTokens> tok;
        tok.reserve(idx.size());
        for (auto i : idx) tok.push_back(tokens(i));
        std::vector<const ConditionTokens*> ptr;
        for (const auto& t : tok) ptr.push_back(&t);
        return net.cond_rows(ptr);
    }
    std::vector<Image> imgs;
    imgs.reserve(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Image& src = ds.items[idx[j]].image;
        imgs.push_back(aug ? apply_augment(src, (*aug)[j]) : src);
    }
    std::vector<const Image*> ptr;
    for (const auto& im : imgs) ptr.push_back(&im);
    return net.cond_rows(ptr);
}

/// Fit a denoiser to `ds`. When `resume` is given its weights, optimizer state,
/// step and random stream are restored and training continues to `config.steps`.
inline TrainResult train(const TrainConfig& config, const Dataset& ds, const TrainHooks& hooks = {},
                         const Checkpoint* resume = nullptr) {
    config.check();
    if (ds.items.empty()) throw InvalidInput("cannot train on an empty dataset");
    if (config.p_flip > 0.0 && !flip_is_label_safe(ds.generator_id))
        throw InvalidInput("horizontal flips are not label-safe for generator '" + ds.generator_id + "'");
    const DenoiserConfig dcfg = resolve_denoiser_config(config, ds.generator_id, ds.image_size());
    const Denoiser<float> net(dcfg);
    const DiffusionSchedule sched = build_schedule(config.schedule_T, config.beta_min, config.beta_max);

    std::vector<std::size_t> pool;
    if (config.train_on_all) {
        pool.resize(ds.items.size());
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    } else {
        pool = ds.indices(Split::Train);
    }
    if (pool.empty()) throw InvalidInput("dataset has no training items");

    Checkpoint ck;
    ck.generator_id = ds.generator_id;
    ck.config = dcfg;
    ck.schedule_T = config.schedule_T;
    ck.beta_min = config.beta_min;
    ck.beta_max = config.beta_max;
    ck.train_config = to_json(config);
    Adam opt;
    Rng stream(config.seed);
    if (resume) {
        if (resume->generator_id != ds.generator_id) throw InvalidInput("resume checkpoint is for another generator");
        if (to_json(resume->config) != to_json(dcfg)) throw InvalidInput("resume checkpoint has a different model shape");
        ck.weights = resume->weights;
        if (resume->adam_m.tensors.empty()) {
            opt.init(ck.weights);
        } else {
            opt.m = resume->adam_m;
            opt.v = resume->adam_v;
        }
        opt.t = resume->step;
        ck.step = resume->step;
        stream.restore(resume->rng_state);
    } else {
        ck.weights = net.init_weights(stream.fork());
        opt.init(ck.weights);
    }
    auto snapshot = [&](std::int64_t step) {
        ck.adam_m = opt.m;
        ck.adam_v = opt.v;
        ck.step = step;
        ck.rng_state = stream.state();
        return ck;
    };

    detail::EpochSampler sampler(pool, config.seed ^ 0xda7aULL);
    if (hooks.loss_log && hooks.write_log_header && ck.step == 0) *hooks.loss_log << "step,loss,lr\n";
    TrainResult result;
    const int B = config.batch_size;
    for (int step = static_cast<int>(ck.step); step < config.steps; ++step) {
        const std::string state_before = stream.state();
        const std::uint64_t step_seed = stream.fork();
        Rng aug_rng(detail::mix_seed(step_seed, 1));
        std::vector<std::size_t> idx(static_cast<std::size_t>(B));
        std::vector<AugmentRecord> aug(idx.size());
        for (int j = 0; j < B; ++j) {
            idx[static_cast<std::size_t>(j)] = sampler.at(static_cast<std::uint64_t>(step) * B + j);
            aug[static_cast<std::size_t>(j)] = detail::draw_train_augment(config, aug_rng);
        }
        Batch<float> batch;
        batch.x0.resize(B, dcfg.n_param_tokens);
        for (int j = 0; j < B; ++j)
            for (int k = 0; k < dcfg.n_param_tokens; ++k)
                batch.x0(j, k) = static_cast<float>(ds.items[idx[static_cast<std::size_t>(j)]].x.x[static_cast<std::size_t>(k)]);
        batch.cond_input = condition_rows(net, ds, idx, &aug, hooks.tokens);

        auto lg = net.loss_and_grad(ck.weights, batch, sched, detail::mix_seed(step_seed, 2));
        if (!std::isfinite(static_cast<double>(lg.loss)) || !lg.grad.all_finite()) {
            std::string after = stream.state();
            stream.restore(state_before);
            Checkpoint good = snapshot(step);
            stream.restore(after);
            if (!hooks.checkpoint_path.empty()) save_checkpoint(hooks.checkpoint_path, good);
            throw LastGoodCheckpoint(std::move(good), step);
        }
        const double lr = learning_rate(config, step);
        if (config.grad_clip > 0.0) {
            const double norm = detail::global_norm(lg.grad);
            if (norm > config.grad_clip)
                for (auto& t : lg.grad.tensors) t *= static_cast<float>(config.grad_clip / norm);
        }
        opt.step(ck.weights, lg.grad, lr);
        result.losses.push_back(lg.loss);
        if (hooks.loss_log) *hooks.loss_log << step << ',' << lg.loss << ',' << lr << '\n';
        if (hooks.on_step) hooks.on_step(step, lg.loss);
        if (!hooks.checkpoint_path.empty() && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
            step + 1 < config.steps)
            save_checkpoint(hooks.checkpoint_path, snapshot(step + 1));
    }
    result.checkpoint = snapshot(std::max<std::int64_t>(ck.step, config.steps));
    if (!hooks.checkpoint_path.empty()) save_checkpoint(hooks.checkpoint_path, result.checkpoint);
    return result;
}

/// Mean denoising loss of a checkpoint over dataset items (no augmentation).
inline double evaluation_loss(const Checkpoint& ck, const Dataset& ds, const std::vector<std::size_t>& idx,
                              std::uint64_t seed, const TokenProvider& tokens = {}) {
    if (idx.empty()) throw InvalidInput("evaluation needs at least one item");
    const Denoiser<float> net(ck.config);
    const auto sched = ck.schedule();
    Batch<float> batch;
    batch.x0.resize(static_cast<Eigen::Index>(idx.size()), ck.config.n_param_tokens);
    for (std::size_t j = 0; j < idx.size(); ++j)
        for (int k = 0; k < ck.config.n_param_tokens; ++k)
            batch.x0(static_cast<Eigen::Index>(j), k) = static_cast<float>(ds.items[idx[j]].x.x[static_cast<std::size_t>(k)]);
    batch.cond_input = condition_rows(net, ds, idx, nullptr, tokens);
    return net.loss_and_grad(ck.weights, batch, sched, seed).loss;
}

// ---- inversion --------------------------------------------------------------

struct InvertOptions {
    SamplerMode mode = SamplerMode::Deterministic;
    int steps = 50; ///< strided steps for the deterministic sampler
};

struct Candidate {
    ParamVector params;
    CanonVector x;
    double score = 0.0;
};

struct InversionResult {
    std::vector<Candidate> candidates; ///< ascending by score
    std::size_t generator_calls = 0;
};

namespace detail {

inline InversionResult invert_with(const Checkpoint& ck, const Denoiser<float>& net, const CondState<float>& cond,
                                   const nn::Mat<float>* patch_rows, std::size_t k, std::uint64_t seed,
                                   const InvertOptions& opt) {
    if (k < 1) throw InvalidInput("k_samples must be >= 1");
    const auto& s = schema(ck.generator_id);
    const auto sched = ck.schedule();
    nn::Mat<float> ref_tokens;
    if (patch_rows) ref_tokens = net.raw_tokens(ck.weights, *patch_rows);
    auto eps_fn = [&](const std::vector<double>& x, int t) { return net.predict(ck.weights, x, t, cond); };
    InversionResult res;
    for (std::size_t j = 0; j < k; ++j) {
        Candidate c;
        c.x = CanonVector{ck.generator_id, sample(eps_fn, s.size(), sched, opt.steps, opt.mode, mix_seed(seed, j))};
        c.params = decanonicalize(s, c.x);
        if (patch_rows) {
            const Image re = rasterize(generate(s, c.params), default_camera(ck.config.image_size), RenderMode::Shaded);
            ++res.generator_calls;
            const nn::Mat<float> tok = net.raw_tokens(ck.weights, net.cond_rows({&re}));
            c.score = static_cast<double>((tok - ref_tokens).squaredNorm()) / static_cast<double>(tok.size());
        }
        res.candidates.push_back(std::move(c));
    }
    std::stable_sort(res.candidates.begin(), res.candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score < b.score; });
    return res;
}

} // namespace detail

/// Sample `k` parameter vectors conditioned on `image`, each scored by the
/// mean squared distance between the condition tokens of the input and of a
/// re-render of the candidate under the default camera.
inline InversionResult invert(const Image& image, const Checkpoint& ck, std::size_t k, std::uint64_t seed,
                              const InvertOptions& opt = {}) {
    if (ck.config.mode != CondMode::Patch) throw InvalidInput("this checkpoint expects external tokens, not an image");
    if (image.width != ck.config.image_size || image.height != ck.config.image_size)
        throw InvalidInput("image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                           " but the checkpoint expects " + std::to_string(ck.config.image_size) + "x" +
                           std::to_string(ck.config.image_size));
    const Denoiser<float> net(ck.config);
    const nn::Mat<float> rows = net.cond_rows({&image});
    const auto cond = net.encode(ck.weights, rows);
    return detail::invert_with(ck, net, cond, &rows, k, seed, opt);
}

/// Inversion from externally produced tokens. No re-render features exist in
/// this mode, so every score is 0 and candidates keep their sampling order.
inline InversionResult invert(const ConditionTokens& tokens, const Checkpoint& ck, std::size_t k, std::uint64_t seed,
                              const InvertOptions& opt = {}) {
    if (ck.config.mode != CondMode::External) throw InvalidInput("this checkpoint expects an image, not tokens");
    const Denoiser<float> net(ck.config);
    const auto cond = net.encode(ck.weights, net.cond_rows({&tokens}));
    return detail::invert_with(ck, net, cond, nullptr, k, seed, opt);
}

} // namespace dipcg
