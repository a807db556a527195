#pragma once

#include "dipcg/error.hpp"
#include "dipcg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

namespace dipcg {

/// DDPM noise schedule. Timesteps are 1-based: t in [1, T].
struct DiffusionSchedule {
    int T = 0;
    double beta_min = 0.0, beta_max = 0.0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;

    double beta_at(int t) const { return beta[static_cast<std::size_t>(t - 1)]; }
    /// alpha_bar_0 = 1 by convention.
    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)]; }
    double sigma_at(int t) const { return sigma[static_cast<std::size_t>(t - 1)]; }
};

inline DiffusionSchedule build_schedule(int T, double beta_min, double beta_max) {
    if (T < 2) throw InvalidInput("schedule needs T >= 2");
    if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
        throw InvalidInput("schedule needs 0 < beta_min < beta_max < 1");
    DiffusionSchedule s;
    s.T = T;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double b = beta_min + (beta_max - beta_min) * static_cast<double>(i) / (T - 1);
        prod *= 1.0 - b;
        s.beta.push_back(b);
        s.alpha_bar.push_back(prod);
        s.sigma.push_back(std::sqrt(b));
    }
    return s;
}

inline DiffusionSchedule default_schedule() { return build_schedule(1000, 1e-4, 0.02); }

namespace detail {
inline void check_t(const DiffusionSchedule& s, int t) {
    if (t < 1 || t > s.T) throw InvalidInput("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}
inline void check_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw InvalidInput(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}
} // namespace detail

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline std::vector<double> noise(std::span<const double> x0, int t, std::span<const double> eps,
                                 const DiffusionSchedule& s) {
    detail::check_same(x0.size(), eps.size(), "noise");
    detail::check_t(s, t);
    const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
    std::vector<double> xt(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = a * x0[i] + b * eps[i];
    return xt;
}

inline double mse_loss(std::span<const double> pred, std::span<const double> target) {
    detail::check_same(pred.size(), target.size(), "mse_loss");
    if (pred.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
    return acc / static_cast<double>(pred.size());
}

/// Ancestral reverse step with Sigma = beta_t I. `z` is ignored at t = 1.
inline std::vector<double> ddpm_step(std::span<const double> xt, int t, std::span<const double> eps_pred,
                                     const DiffusionSchedule& s, std::span<const double> z) {
    detail::check_t(s, t);
    detail::check_same(xt.size(), eps_pred.size(), "ddpm_step");
    if (t > 1) detail::check_same(xt.size(), z.size(), "ddpm_step noise");
    const double beta = s.beta_at(t), alpha = 1.0 - beta;
    const double coef = beta / std::sqrt(1.0 - s.alpha_bar_at(t));
    const double inv = 1.0 / std::sqrt(alpha);
    std::vector<double> out(xt.size());
    for (std::size_t i = 0; i < xt.size(); ++i) {
        out[i] = inv * (xt[i] - coef * eps_pred[i]);
        if (t > 1) out[i] += s.sigma_at(t) * z[i];
    }
    return out;
}

/// Deterministic (eta = 0) update from t to t_prev < t; t_prev = 0 yields the
/// clean estimate.
inline std::vector<double> ddim_step(std::span<const double> xt, int t, int t_prev, std::span<const double> eps_pred,
                                     const DiffusionSchedule& s) {
    detail::check_t(s, t);
    detail::check_same(xt.size(), eps_pred.size(), "ddim_step");
    if (t_prev < 0 || t_prev >= t) throw InvalidInput("ddim_step needs 0 <= t_prev < t");
    const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t_prev);
    std::vector<double> out(xt.size());
    for (std::size_t i = 0; i < xt.size(); ++i) {
        const double x0 = (xt[i] - std::sqrt(1.0 - ab) * eps_pred[i]) / std::sqrt(ab);
        out[i] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_pred[i];
    }
    return out;
}

/// Descending, evenly strided timesteps from T down to 1.
inline std::vector<int> strided_timesteps(int T, int steps) {
    steps = std::clamp(steps, 1, T);
    std::vector<int> ts;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        ts.push_back(static_cast<int>(std::lround(T - frac * (T - 1))));
    }
    return ts;
}

enum class SamplerMode { Ancestral, Deterministic };

constexpr double kSampleClamp = 1.1;

/// Draw one clean vector of length n starting from x_T ~ N(0, I).
/// `eps_fn(x_t, t)` returns the predicted noise. Ancestral mode visits every
/// t = T..1; deterministic mode visits `steps` strided timesteps.
template <class EpsFn>
std::vector<double> sample(EpsFn&& eps_fn, std::size_t n, const DiffusionSchedule& s, int steps, SamplerMode mode,
                           std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.normal();
    if (mode == SamplerMode::Ancestral) {
        std::vector<double> z(n);
        for (int t = s.T; t >= 1; --t) {
            const std::vector<double> eps = eps_fn(std::as_const(x), t);
            for (auto& v : z) v = t > 1 ? rng.normal() : 0.0;
            x = ddpm_step(x, t, eps, s, z);
        }
    } else {
        const auto ts = strided_timesteps(s.T, steps);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const int t = ts[i];
            const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
            const std::vector<double> eps = eps_fn(std::as_const(x), t);
            x = ddim_step(x, t, t_prev, eps, s);
        }
    }
    for (auto& v : x) v = std::clamp(v, -kSampleClamp, kSampleClamp);
    return x;
}

} // namespace dipcg
