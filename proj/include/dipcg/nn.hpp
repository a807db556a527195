#pragma once

#include "dipcg/error.hpp"
#include "dipcg/rng.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace dipcg::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named, ordered tensors. Used for weights, gradients and optimizer moments.
template <class S>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Mat<S>> tensors;

    std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
        names.push_back(std::move(name));
        tensors.push_back(Mat<S>::Zero(rows, cols));
        return tensors.size() - 1;
    }

    std::size_t size() const { return tensors.size(); }
    Mat<S>& operator[](std::size_t i) { return tensors[i]; }
    const Mat<S>& operator[](std::size_t i) const { return tensors[i]; }

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        return std::nullopt;
    }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
        return n;
    }

    ParamSet zeros_like() const {
        ParamSet out;
        out.names = names;
        for (const auto& t : tensors) out.tensors.push_back(Mat<S>::Zero(t.rows(), t.cols()));
        return out;
    }

    void set_zero() {
        for (auto& t : tensors) t.setZero();
    }

    template <class T>
    ParamSet<T> cast() const {
        ParamSet<T> out;
        out.names = names;
        for (const auto& t : tensors) out.tensors.push_back(t.template cast<T>());
        return out;
    }

    bool all_finite() const {
        for (const auto& t : tensors)
            if (!t.allFinite()) return false;
        return true;
    }
};

/// Dense layer y = x W + b, with W stored as in x out and b as 1 x out.
struct LinearIdx {
    std::size_t w = 0, b = 0;
};

template <class S>
LinearIdx add_linear(ParamSet<S>& p, const std::string& name, Eigen::Index in, Eigen::Index out) {
    return {p.add(name + ".weight", in, out), p.add(name + ".bias", 1, out)};
}

template <class S>
Mat<S> linear(const ParamSet<S>& p, LinearIdx l, const Mat<S>& x) {
    Mat<S> y = x * p[l.w];
    y.rowwise() += p[l.b].row(0);
    return y;
}

/// Accumulates weight/bias gradients into `g`; returns dL/dx when requested.
template <class S>
Mat<S> linear_backward(const ParamSet<S>& p, LinearIdx l, const Mat<S>& x, const Mat<S>& dy, ParamSet<S>& g,
                       bool need_dx = true) {
    g[l.w].noalias() += x.transpose() * dy;
    g[l.b].row(0) += dy.colwise().sum();
    if (!need_dx) return {};
    return dy * p[l.w].transpose();
}

// ---- activations ------------------------------------------------------------

template <class S>
S gelu(S z) {
    return S(0.5) * z * (S(1) + std::erf(z * S(std::numbers::sqrt2 / 2)));
}

template <class S>
S gelu_grad(S z) {
    const S cdf = S(0.5) * (S(1) + std::erf(z * S(std::numbers::sqrt2 / 2)));
    const S pdf = std::exp(S(-0.5) * z * z) * S(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + z * pdf;
}

template <class S>
Mat<S> gelu(const Mat<S>& z) {
    return z.unaryExpr([](S v) { return gelu(v); });
}

template <class S>
Mat<S> gelu_backward(const Mat<S>& z, const Mat<S>& dy) {
    return dy.cwiseProduct(z.unaryExpr([](S v) { return gelu_grad(v); }));
}

template <class S>
Mat<S> silu(const Mat<S>& z) {
    return z.unaryExpr([](S v) { return v / (S(1) + std::exp(-v)); });
}

template <class S>
Mat<S> silu_backward(const Mat<S>& z, const Mat<S>& dy) {
    return dy.cwiseProduct(z.unaryExpr([](S v) {
        const S sg = S(1) / (S(1) + std::exp(-v));
        return sg * (S(1) + v * (S(1) - sg));
    }));
}

// ---- adaptive layer norm ------------------------------------------------------

template <class S>
struct NormCache {
    Mat<S> xhat;
    std::vector<S> rstd;
};

constexpr double kNormEps = 1e-6;

/// Non-affine layer norm over each row, then y = xhat * (1 + scale) + shift,
/// where item b (rows b*tokens .. b*tokens+tokens-1) uses row b of shift/scale.
template <class S, class ShiftExpr, class ScaleExpr>
Mat<S> modulated_norm(const Mat<S>& x, const ShiftExpr& shift, const ScaleExpr& scale, Eigen::Index tokens,
                      NormCache<S>& cache) {
    const Eigen::Index rows = x.rows(), d = x.cols();
    cache.xhat.resize(rows, d);
    cache.rstd.resize(static_cast<std::size_t>(rows));
    Mat<S> y(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const S mean = x.row(r).mean();
        const S var = (x.row(r).array() - mean).square().mean();
        const S rstd = S(1) / std::sqrt(var + S(kNormEps));
        cache.rstd[static_cast<std::size_t>(r)] = rstd;
        cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
        const Eigen::Index b = r / tokens;
        y.row(r) = cache.xhat.row(r).array() * (S(1) + scale.row(b).array()) + shift.row(b).array();
    }
    return y;
}

/// Returns dL/dx and accumulates the per-item shift/scale gradients.
template <class S, class ScaleExpr, class DShift, class DScale>
Mat<S> modulated_norm_backward(const NormCache<S>& cache, const ScaleExpr& scale, const Mat<S>& dy,
                               Eigen::Index tokens, DShift&& dshift, DScale&& dscale) {
    const Eigen::Index rows = dy.rows(), d = dy.cols();
    Mat<S> dx(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Index b = r / tokens;
        dshift.row(b) += dy.row(r);
        dscale.row(b) += dy.row(r).cwiseProduct(cache.xhat.row(r));
        const auto dxhat = (dy.row(r).array() * (S(1) + scale.row(b).array())).eval();
        const S m1 = dxhat.mean();
        const S m2 = (dxhat * cache.xhat.row(r).array()).mean();
        dx.row(r) = cache.rstd[static_cast<std::size_t>(r)] * (dxhat - m1 - cache.xhat.row(r).array() * m2);
    }
    return dx;
}

// ---- multi-head attention -----------------------------------------------------

struct AttentionIdx {
    LinearIdx q, k, v, o;
};

template <class S>
AttentionIdx add_attention(ParamSet<S>& p, const std::string& name, Eigen::Index d) {
    return {add_linear(p, name + ".q", d, d), add_linear(p, name + ".k", d, d), add_linear(p, name + ".v", d, d),
            add_linear(p, name + ".o", d, d)};
}

template <class S>
struct AttentionCache {
    Mat<S> q;                  ///< projected queries, (items*nq) x d
    Mat<S> o;                  ///< concatenated head outputs before the output projection
    std::vector<Mat<S>> probs; ///< per (item, head): nq x nk
};

/// Scaled dot-product attention of `q_in` rows against precomputed keys and
/// values; item b's queries attend only to item b's key/value rows.
template <class S>
Mat<S> attention(const ParamSet<S>& p, const AttentionIdx& a, const Mat<S>& q_in, const Mat<S>& keys,
                 const Mat<S>& values, Eigen::Index items, Eigen::Index nq, Eigen::Index nk, int heads,
                 AttentionCache<S>& cache) {
    const Eigen::Index d = q_in.cols(), dh = d / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    cache.q = linear(p, a.q, q_in);
    cache.o.resize(items * nq, d);
    cache.probs.resize(static_cast<std::size_t>(items * heads));
    for (Eigen::Index b = 0; b < items; ++b)
        for (int h = 0; h < heads; ++h) {
            auto qb = cache.q.block(b * nq, h * dh, nq, dh);
            auto kb = keys.block(b * nk, h * dh, nk, dh);
            auto vb = values.block(b * nk, h * dh, nk, dh);
            Mat<S> sc = (qb * kb.transpose()) * inv_sqrt;
            for (Eigen::Index r = 0; r < nq; ++r) {
                const S mx = sc.row(r).maxCoeff();
                sc.row(r) = (sc.row(r).array() - mx).exp();
                sc.row(r) /= sc.row(r).sum();
            }
            cache.o.block(b * nq, h * dh, nq, dh).noalias() = sc * vb;
            cache.probs[static_cast<std::size_t>(b * heads + h)] = std::move(sc);
        }
    return linear(p, a.o, cache.o);
}

/// Returns dL/dq_in; writes dL/dkeys and dL/dvalues (pre-projection key/value
/// gradients are left to the caller, who owns the key/value projections).
template <class S>
Mat<S> attention_backward(const ParamSet<S>& p, const AttentionIdx& a, const Mat<S>& q_in, const Mat<S>& keys,
                          const Mat<S>& values, Eigen::Index items, Eigen::Index nq, Eigen::Index nk, int heads,
                          const AttentionCache<S>& cache, const Mat<S>& dout, ParamSet<S>& g, Mat<S>& dkeys,
                          Mat<S>& dvalues) {
    const Eigen::Index d = q_in.cols(), dh = d / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> d_o = linear_backward(p, a.o, cache.o, dout, g);
    Mat<S> dq(items * nq, d);
    dkeys.setZero(items * nk, d);
    dvalues.setZero(items * nk, d);
    for (Eigen::Index b = 0; b < items; ++b)
        for (int h = 0; h < heads; ++h) {
            const Mat<S>& pr = cache.probs[static_cast<std::size_t>(b * heads + h)];
            auto dob = d_o.block(b * nq, h * dh, nq, dh);
            auto vb = values.block(b * nk, h * dh, nk, dh);
            auto kb = keys.block(b * nk, h * dh, nk, dh);
            auto qb = cache.q.block(b * nq, h * dh, nq, dh);
            dvalues.block(b * nk, h * dh, nk, dh).noalias() = pr.transpose() * dob;
            Mat<S> dp = dob * vb.transpose();
            for (Eigen::Index r = 0; r < nq; ++r) {
                const S dot = dp.row(r).dot(pr.row(r));
                dp.row(r) = pr.row(r).array() * (dp.row(r).array() - dot);
            }
            dp *= inv_sqrt;
            dq.block(b * nq, h * dh, nq, dh).noalias() = dp * kb;
            dkeys.block(b * nk, h * dh, nk, dh).noalias() = dp.transpose() * qb;
        }
    return linear_backward(p, a.q, q_in, dq, g);
}

// ---- fixed encodings --------------------------------------------------------

/// Sinusoidal embedding of integer timesteps: [cos(t w_k), sin(t w_k)].
template <class S>
Mat<S> timestep_embedding(const std::vector<int>& t, Eigen::Index width) {
    const Eigen::Index half = width / 2;
    Mat<S> e(static_cast<Eigen::Index>(t.size()), width);
    for (Eigen::Index b = 0; b < e.rows(); ++b)
        for (Eigen::Index k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            const double arg = t[static_cast<std::size_t>(b)] * freq;
            e(b, k) = static_cast<S>(std::cos(arg));
            e(b, half + k) = static_cast<S>(std::sin(arg));
        }
    return e;
}

/// Fixed 2D sinusoidal code for a grid x grid patch layout; the first half of
/// the channels encodes the row, the second half the column.
template <class S>
Mat<S> positional_code_2d(Eigen::Index grid, Eigen::Index width) {
    const Eigen::Index quarter = width / 4;
    Mat<S> e = Mat<S>::Zero(grid * grid, width);
    for (Eigen::Index r = 0; r < grid; ++r)
        for (Eigen::Index c = 0; c < grid; ++c)
            for (Eigen::Index k = 0; k < quarter; ++k) {
                const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(quarter));
                const Eigen::Index row = r * grid + c;
                e(row, k) = static_cast<S>(std::sin(r * freq));
                e(row, quarter + k) = static_cast<S>(std::cos(r * freq));
                e(row, 2 * quarter + k) = static_cast<S>(std::sin(c * freq));
                e(row, 3 * quarter + k) = static_cast<S>(std::cos(c * freq));
            }
    return e;
}

template <class S>
void fill_gaussian(Mat<S>& m, double stddev, Rng& rng) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(stddev * rng.normal());
}

} // namespace dipcg::nn
