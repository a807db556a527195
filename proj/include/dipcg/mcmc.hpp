#pragma once

#include "dipcg/canon.hpp"
#include "dipcg/checkpoint.hpp"
#include "dipcg/denoiser.hpp"
#include "dipcg/generators.hpp"
#include "dipcg/render.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

namespace dipcg {

/// Maps an image to a fixed-width feature vector.
using FeatureFn = std::function<std::vector<double>(const Image&)>;

/// Binary mask of the image averaged over `pool` x `pool` blocks.
inline std::vector<double> mask_features(const Image& img, int pool = 4) {
    if (pool < 1 || img.width % pool != 0 || img.height % pool != 0)
        throw InvalidInput("image size must be divisible by the pooling factor");
    const Image m = mask_of(img);
    const int gw = img.width / pool, gh = img.height / pool;
    std::vector<double> f(static_cast<std::size_t>(gw) * gh, 0.0);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) f[static_cast<std::size_t>(y / pool) * gw + x / pool] += m.at(x, y);
    for (auto& v : f) v /= static_cast<double>(pool * pool);
    return f;
}

inline FeatureFn mask_feature_fn(int pool = 4) {
    return [pool](const Image& img) { return mask_features(img, pool); };
}

/// Patch-embedder features of a trained checkpoint, mean-pooled over tokens.
inline FeatureFn embedder_feature_fn(const Checkpoint& ck) {
    if (ck.config.mode != CondMode::Patch) throw InvalidInput("embedder features need a patch-mode checkpoint");
    auto net = std::make_shared<Denoiser<float>>(ck.config);
    auto weights = std::make_shared<nn::ParamSet<float>>(ck.weights);
    return [net, weights](const Image& img) {
        const nn::Mat<float> tok = net->raw_tokens(*weights, net->cond_rows({&img}));
        std::vector<double> f(static_cast<std::size_t>(tok.cols()));
        for (Eigen::Index c = 0; c < tok.cols(); ++c) f[static_cast<std::size_t>(c)] = tok.col(c).mean();
        return f;
    };
}

inline double feature_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw InvalidInput("feature vectors differ in width");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

/// Render `candidate` under the default camera at the condition image's size.
inline Image render_candidate(const GeneratorSchema& s, const ParamVector& candidate, int image_size) {
    return rasterize(generate(s, candidate), default_camera(image_size), RenderMode::Shaded);
}

/// Mean squared feature distance between the condition image and a default-view
/// render of the candidate.
inline double score(const Image& cond_img, const GeneratorSchema& s, const ParamVector& candidate,
                    const FeatureFn& features) {
    return feature_distance(features(cond_img), features(render_candidate(s, candidate, cond_img.width)));
}

struct ChainStep {
    std::size_t iter = 0;
    double score = 0.0; ///< chain state score after this iteration
    bool accepted = false;
    double best = 0.0;  ///< running minimum
};

struct McmcOptions {
    double step_sigma = 0.05;
    double temperature = 0.01;
    double p_discrete = 0.1;
    /// Entries allowed to move; empty means all. Fixed entries keep their
    /// value from `init`, free ones start from a random draw.
    std::vector<bool> free;
    std::optional<CanonVector> init; ///< default: a uniformly sampled parameter vector
};

struct McmcResult {
    CanonVector best_x;
    ParamVector best;
    double best_score = 0.0;
    std::vector<ChainStep> trace;
    std::size_t score_calls = 0;
};

namespace detail {

/// Reflect into [-1, 1]; keeps the Gaussian random-walk proposal symmetric.
inline double reflect_unit(double x) {
    while (x > 1.0 || x < -1.0) x = x > 1.0 ? 2.0 - x : -2.0 - x;
    return x;
}

} // namespace detail

/// Metropolis-Hastings over canonical vectors with an arbitrary score (lower
/// is better). Uses exactly one uniform draw per iteration for acceptance, so
/// shifting every score by a constant leaves the accept/reject sequence intact.
inline McmcResult mh_chain(const GeneratorSchema& s, const std::function<double(const CanonVector&)>& score_fn,
                           std::size_t iters, std::uint64_t seed, const McmcOptions& opt = {}) {
    if (iters < 1) throw InvalidInput("mcmc needs at least one iteration");
    if (!(opt.step_sigma > 0.0)) throw InvalidInput("step_sigma must be positive");
    if (!(opt.temperature > 0.0)) throw InvalidInput("temperature must be positive");
    if (!opt.free.empty() && opt.free.size() != s.size()) throw InvalidInput("free mask length does not match schema");
    if (!opt.free.empty() && !opt.init) throw InvalidInput("a free mask needs an initial vector for the fixed entries");
    Rng rng(seed);
    CanonVector x = opt.init ? *opt.init : canonicalize(s, sample_params(s, rng.fork()));
    if (x.x.size() != s.size()) throw InvalidInput("initial vector length does not match schema");
    if (opt.init && !opt.free.empty()) {
        const CanonVector r = canonicalize(s, sample_params(s, rng.fork()));
        for (std::size_t i = 0; i < s.size(); ++i)
            if (opt.free[i]) x.x[i] = r.x[i];
    }
    auto movable = [&](std::size_t i) { return opt.free.empty() || opt.free[i]; };

    McmcResult res;
    double cur = score_fn(x);
    ++res.score_calls;
    res.best_x = x;
    res.best_score = cur;
    for (std::size_t it = 1; it <= iters; ++it) {
        CanonVector prop = x;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!movable(i)) continue;
            const auto& spec = s.params[i];
            if (spec.is_discrete()) {
                if (rng.bernoulli(opt.p_discrete)) prop.x[i] = piece_center(rng.index(spec.n_choices()), spec.n_choices());
            } else {
                prop.x[i] = detail::reflect_unit(x.x[i] + opt.step_sigma * rng.normal());
            }
        }
        const double next = score_fn(prop);
        ++res.score_calls;
        const double u = rng.uniform();
        const bool accept = next <= cur || std::log(u) < (cur - next) / opt.temperature;
        if (accept) {
            x = std::move(prop);
            cur = next;
            if (cur < res.best_score) {
                res.best_score = cur;
                res.best_x = x;
            }
        }
        res.trace.push_back({it, cur, accept, res.best_score});
    }
    res.best = decanonicalize(s, res.best_x);
    return res;
}

/// Fit generator parameters to `cond_img` by scoring default-view renders.
inline McmcResult mh_run(const Image& cond_img, const std::string& generator_id, std::size_t iters,
                         std::uint64_t seed, const FeatureFn& features, McmcOptions opt = {}) {
    const auto& s = schema(generator_id);
    const std::vector<double> target = features(cond_img);
    auto fn = [&](const CanonVector& x) {
        return feature_distance(target, features(render_candidate(s, decanonicalize(s, x), cond_img.width)));
    };
    return mh_chain(s, fn, iters, seed, opt);
}

inline void write_trace_csv(std::ostream& os, const std::vector<ChainStep>& trace) {
    os << "iter,score,accepted\n";
    for (const auto& t : trace) os << t.iter << ',' << t.score << ',' << (t.accepted ? 1 : 0) << '\n';
}

} // namespace dipcg
