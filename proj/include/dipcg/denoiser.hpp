#pragma once

#include "dipcg/condition.hpp"
#include "dipcg/diffusion.hpp"
#include "dipcg/error.hpp"
#include "dipcg/nn.hpp"
#include "dipcg/rng.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace dipcg {

enum class CondMode { Patch, External };

/// Shape of the denoising transformer. In patch mode the condition tokens come
/// from a jointly trained patch embedder over image_size^2 images; in external
/// mode they are supplied as cond_tokens x cond_width matrices.
struct DenoiserConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int n_param_tokens = 8;
    int cond_width = 192;
    int cond_tokens = 64;
    int proj_hidden = 0; ///< projector hidden width; 0 means d_model
    int time_freq = 64;  ///< width of the sinusoidal timestep code
    int mlp_ratio = 4;
    CondMode mode = CondMode::Patch;
    int patch = 8;
    int image_size = 64;

    int hidden() const { return proj_hidden > 0 ? proj_hidden : d_model; }

    /// Number of condition tokens per item.
    int tokens_per_item() const {
        if (mode == CondMode::Patch) {
            const int g = image_size / patch;
            return g * g;
        }
        return cond_tokens;
    }

    /// Width of one row of raw condition input (pixels per patch, or C).
    int cond_input_width() const { return mode == CondMode::Patch ? patch * patch : cond_width; }

    void check() const {
        if (n_layers < 1) throw InvalidInput("denoiser needs at least one layer");
        if (n_heads < 1 || d_model % n_heads != 0) throw InvalidInput("d_model must be divisible by n_heads");
        if (n_param_tokens < 1) throw InvalidInput("denoiser needs at least one parameter token");
        if (cond_width < 1 || time_freq < 2 || time_freq % 2 != 0 || mlp_ratio < 1)
            throw InvalidInput("invalid condition/time widths");
        if (mode == CondMode::Patch) {
            if (patch < 1 || image_size % patch != 0) throw InvalidInput("image_size must be divisible by patch");
            if (cond_width % 4 != 0) throw InvalidInput("patch mode needs cond_width divisible by 4");
        } else if (cond_tokens < 1) {
            throw InvalidInput("external mode needs cond_tokens >= 1");
        }
    }

    /// Laptop-scale default.
    static DenoiserConfig desk(int n_params) {
        DenoiserConfig c;
        c.n_param_tokens = n_params;
        return c;
    }

    /// Full-size layout: 12 layers, 6 heads, width 192, conditioned on 16x16
    /// external ViT-B/14 feature tokens of width 768.
    static DenoiserConfig full_scale(int n_params = 48) {
        DenoiserConfig c;
        c.n_layers = 12;
        c.n_heads = 6;
        c.d_model = 192;
        c.n_param_tokens = n_params;
        c.cond_width = 768;
        c.cond_tokens = 256;
        c.time_freq = 256;
        c.mode = CondMode::External;
        return c;
    }
};

inline nlohmann::json to_json(const DenoiserConfig& c) {
    return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
            {"d_model", c.d_model},       {"n_param_tokens", c.n_param_tokens},
            {"cond_width", c.cond_width}, {"cond_tokens", c.cond_tokens},
            {"proj_hidden", c.proj_hidden}, {"time_freq", c.time_freq},
            {"mlp_ratio", c.mlp_ratio},   {"mode", c.mode == CondMode::Patch ? "patch" : "external"},
            {"patch", c.patch},           {"image_size", c.image_size}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.n_param_tokens = j.value("n_param_tokens", c.n_param_tokens);
    c.cond_width = j.value("cond_width", c.cond_width);
    c.cond_tokens = j.value("cond_tokens", c.cond_tokens);
    c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
    c.time_freq = j.value("time_freq", c.time_freq);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    const std::string mode = j.value("mode", std::string("patch"));
    if (mode != "patch" && mode != "external") throw InvalidInput("unknown condition mode '" + mode + "'");
    c.mode = mode == "external" ? CondMode::External : CondMode::Patch;
    c.patch = j.value("patch", c.patch);
    c.image_size = j.value("image_size", c.image_size);
    return c;
}

/// Tensor indices of one transformer block.
struct BlockLayout {
    std::size_t mod_table = 0; ///< 1 x 6D per-block offset added to the shared modulation
    nn::AttentionIdx self, cross;
    nn::LinearIdx fc1, fc2;
};

struct DenoiserLayout {
    std::size_t embed_w = 0, embed_b = 0, embed_pos = 0;
    nn::LinearIdx time1, time2, modulation, final_modulation, head;
    bool has_patch = false;
    nn::LinearIdx patch;
    nn::LinearIdx proj1, proj2;
    std::vector<BlockLayout> blocks;
};

/// Register every tensor of `c` into `p` (zero-filled) and return their indices.
/// Accepts n_layers = 0 for shape arithmetic.
template <class S>
DenoiserLayout build_layout(const DenoiserConfig& c, nn::ParamSet<S>& p) {
    const Eigen::Index d = c.d_model, n = c.n_param_tokens;
    DenoiserLayout l;
    l.embed_w = p.add("embed.weight", n, d);
    l.embed_b = p.add("embed.bias", 1, d);
    l.embed_pos = p.add("embed.pos", n, d);
    l.time1 = nn::add_linear(p, "time.fc1", c.time_freq, d);
    l.time2 = nn::add_linear(p, "time.fc2", d, d);
    l.modulation = nn::add_linear(p, "modulation", d, 6 * d);
    if (c.mode == CondMode::Patch) {
        l.has_patch = true;
        l.patch = nn::add_linear(p, "cond.patch_embed", static_cast<Eigen::Index>(c.patch) * c.patch, c.cond_width);
    }
    l.proj1 = nn::add_linear(p, "cond.proj1", c.cond_width, c.hidden());
    l.proj2 = nn::add_linear(p, "cond.proj2", c.hidden(), d);
    for (int i = 0; i < c.n_layers; ++i) {
        const std::string pre = "blocks." + std::to_string(i);
        BlockLayout b;
        b.mod_table = p.add(pre + ".mod_table", 1, 6 * d);
        b.self = nn::add_attention(p, pre + ".self", d);
        b.cross = nn::add_attention(p, pre + ".cross", d);
        b.fc1 = nn::add_linear(p, pre + ".mlp.fc1", d, c.mlp_ratio * d);
        b.fc2 = nn::add_linear(p, pre + ".mlp.fc2", c.mlp_ratio * d, d);
        l.blocks.push_back(b);
    }
    l.final_modulation = nn::add_linear(p, "final.modulation", d, 2 * d);
    l.head = nn::add_linear(p, "head", d, 1);
    return l;
}

/// Exact number of trainable scalars for `c`.
inline std::size_t count_params(const DenoiserConfig& c) {
    nn::ParamSet<float> p;
    build_layout(c, p);
    return p.element_count();
}

/// Projected condition tokens plus per-layer cross-attention keys/values.
/// Constant across sampling steps, so it is computed once per condition.
template <class S>
struct CondState {
    Eigen::Index items = 0;
    nn::Mat<S> input;  ///< raw rows: flattened patches or external tokens
    nn::Mat<S> tokens; ///< c, (items*M) x C
    nn::Mat<S> z1, proj;
    std::vector<nn::Mat<S>> keys, values;
};

template <class S>
struct BlockTrace {
    nn::Mat<S> mod;
    nn::NormCache<S> n1, n2, n3;
    nn::Mat<S> a1, a2, a3;
    nn::Mat<S> self_k, self_v;
    nn::AttentionCache<S> self_attn, cross_attn;
    nn::Mat<S> z, g;
};

/// Activations retained by forward() for the reverse pass.
template <class S>
struct ForwardTrace {
    nn::Mat<S> x, tf, tz1, ts1, temb, tsilu, gmod, fmod, af;
    nn::NormCache<S> nf;
    std::vector<BlockTrace<S>> blocks;
};

template <class S>
struct LossAndGrad {
    S loss{};
    nn::ParamSet<S> grad;
};

/// Training batch: clean canonical vectors (items x N) and raw condition rows
/// ((items*M) x cond_input_width).
template <class S>
struct Batch {
    nn::Mat<S> x0;
    nn::Mat<S> cond_input;
};

/// Conditional noise-prediction transformer. Each parameter is one token; each
/// block applies modulated-norm self-attention, cross-attention to the
/// projected condition tokens, and a GELU MLP, all residual. The timestep
/// drives a shared scale/shift modulation offset by a learned per-block table.
template <class S>
class Denoiser {
public:
    using Mat = nn::Mat<S>;
    using Params = nn::ParamSet<S>;

    explicit Denoiser(DenoiserConfig c) : cfg_(c) {
        cfg_.check();
        Params scratch;
        layout_ = build_layout(cfg_, scratch);
    }

    const DenoiserConfig& config() const { return cfg_; }
    const DenoiserLayout& layout() const { return layout_; }

    /// Scaled-Gaussian linear weights, zero biases, zero modulation and a
    /// zero output head (so the initial prediction is identically zero).
    Params init_weights(std::uint64_t seed) const {
        Params p;
        build_layout(cfg_, p);
        Rng rng(seed);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const std::string& name = p.names[i];
            auto ends_with = [&](std::string_view suf) {
                return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
            };
            if (name == "embed.weight") {
                nn::fill_gaussian(p[i], 1.0, rng);
            } else if (name == "embed.pos") {
                nn::fill_gaussian(p[i], 0.02, rng);
            } else if (name == "head.weight" || name == "modulation.weight" || name == "final.modulation.weight") {
                // zero
            } else if (ends_with(".weight")) {
                nn::fill_gaussian(p[i], 1.0 / std::sqrt(static_cast<double>(p[i].rows())), rng);
            }
        }
        return p;
    }

    /// Stack raw condition rows for a batch of images (patch mode).
    Mat cond_rows(const std::vector<const Image*>& images) const {
        if (cfg_.mode != CondMode::Patch) throw InvalidInput("denoiser is configured for external tokens");
        const Eigen::Index m = cfg_.tokens_per_item();
        Mat out(static_cast<Eigen::Index>(images.size()) * m, cfg_.cond_input_width());
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (images[i]->width != cfg_.image_size || images[i]->height != cfg_.image_size)
                throw InvalidInput("expected " + std::to_string(cfg_.image_size) + "x" +
                                   std::to_string(cfg_.image_size) + " image, got " +
                                   std::to_string(images[i]->width) + "x" + std::to_string(images[i]->height));
            out.middleRows(static_cast<Eigen::Index>(i) * m, m) = extract_patches<S>(*images[i], cfg_.patch);
        }
        return out;
    }

    /// Stack raw condition rows for a batch of external token matrices.
    Mat cond_rows(const std::vector<const ConditionTokens*>& toks) const {
        if (cfg_.mode != CondMode::External) throw InvalidInput("denoiser is configured for patch embedding");
        const Eigen::Index m = cfg_.tokens_per_item();
        Mat out(static_cast<Eigen::Index>(toks.size()) * m, cfg_.cond_width);
        for (std::size_t i = 0; i < toks.size(); ++i) {
            if (toks[i]->count() != m || toks[i]->width() != cfg_.cond_width)
                throw InvalidInput("expected " + std::to_string(m) + "x" + std::to_string(cfg_.cond_width) +
                                   " condition tokens");
            out.middleRows(static_cast<Eigen::Index>(i) * m, m) = toks[i]->tokens.template cast<S>();
        }
        return out;
    }

    /// Condition tokens c before projection (patch-embedded or external).
    Mat raw_tokens(const Params& w, const Mat& input) const {
        if (!layout_.has_patch) return input;
        const Eigen::Index m = cfg_.tokens_per_item();
        Mat c = nn::linear(w, layout_.patch, input);
        const Mat pos = nn::positional_code_2d<S>(cfg_.image_size / cfg_.patch, cfg_.cond_width);
        for (Eigen::Index b = 0; b < input.rows() / m; ++b) c.middleRows(b * m, m) += pos;
        return c;
    }

    CondState<S> encode(const Params& w, Mat input) const {
        const Eigen::Index m = cfg_.tokens_per_item();
        if (input.cols() != cfg_.cond_input_width() || input.rows() % m != 0)
            throw InvalidInput("condition input has shape " + std::to_string(input.rows()) + "x" +
                               std::to_string(input.cols()) + ", expected multiples of " + std::to_string(m) + "x" +
                               std::to_string(cfg_.cond_input_width()));
        CondState<S> cs;
        cs.items = input.rows() / m;
        cs.input = std::move(input);
        cs.tokens = raw_tokens(w, cs.input);
        cs.z1 = nn::linear(w, layout_.proj1, cs.tokens);
        cs.proj = nn::linear(w, layout_.proj2, nn::gelu(cs.z1));
        for (const auto& b : layout_.blocks) {
            cs.keys.push_back(nn::linear(w, b.cross.k, cs.proj));
            cs.values.push_back(nn::linear(w, b.cross.v, cs.proj));
        }
        return cs;
    }

    /// Predicted noise, items x N.
    Mat forward(const Params& w, const Mat& x, const std::vector<int>& t, const CondState<S>& cond,
                ForwardTrace<S>* trace = nullptr) const {
        const Eigen::Index items = x.rows(), n = cfg_.n_param_tokens, d = cfg_.d_model;
        const Eigen::Index m = cfg_.tokens_per_item();
        if (x.cols() != n || static_cast<Eigen::Index>(t.size()) != items || cond.items != items)
            throw InvalidInput("denoiser input shape mismatch: x is " + std::to_string(x.rows()) + "x" +
                               std::to_string(x.cols()) + ", expected " + std::to_string(items) + "x" +
                               std::to_string(n) + " with matching timesteps and conditions");
        ForwardTrace<S> local;
        ForwardTrace<S>& tr = trace ? *trace : local;
        tr.x = x;

        tr.tf = nn::timestep_embedding<S>(t, cfg_.time_freq);
        tr.tz1 = nn::linear(w, layout_.time1, tr.tf);
        tr.ts1 = nn::silu(tr.tz1);
        tr.temb = nn::linear(w, layout_.time2, tr.ts1);
        tr.tsilu = nn::silu(tr.temb);
        tr.gmod = nn::linear(w, layout_.modulation, tr.tsilu);
        tr.fmod = nn::linear(w, layout_.final_modulation, tr.tsilu);

        Mat h(items * n, d);
        for (Eigen::Index b = 0; b < items; ++b)
            for (Eigen::Index i = 0; i < n; ++i)
                h.row(b * n + i) = x(b, i) * w[layout_.embed_w].row(i) + w[layout_.embed_b].row(0) +
                                   w[layout_.embed_pos].row(i);

        tr.blocks.resize(layout_.blocks.size());
        for (std::size_t l = 0; l < layout_.blocks.size(); ++l) {
            const auto& bl = layout_.blocks[l];
            auto& bt = tr.blocks[l];
            bt.mod = tr.gmod;
            bt.mod.rowwise() += w[bl.mod_table].row(0);

            bt.a1 = nn::modulated_norm(h, bt.mod.middleCols(0, d), bt.mod.middleCols(d, d), n, bt.n1);
            bt.self_k = nn::linear(w, bl.self.k, bt.a1);
            bt.self_v = nn::linear(w, bl.self.v, bt.a1);
            h += nn::attention(w, bl.self, bt.a1, bt.self_k, bt.self_v, items, n, n, cfg_.n_heads, bt.self_attn);

            bt.a2 = nn::modulated_norm(h, bt.mod.middleCols(2 * d, d), bt.mod.middleCols(3 * d, d), n, bt.n2);
            h += nn::attention(w, bl.cross, bt.a2, cond.keys[l], cond.values[l], items, n, m, cfg_.n_heads,
                               bt.cross_attn);

            bt.a3 = nn::modulated_norm(h, bt.mod.middleCols(4 * d, d), bt.mod.middleCols(5 * d, d), n, bt.n3);
            bt.z = nn::linear(w, bl.fc1, bt.a3);
            bt.g = nn::gelu(bt.z);
            h += nn::linear(w, bl.fc2, bt.g);
        }

        tr.af = nn::modulated_norm(h, tr.fmod.middleCols(0, d), tr.fmod.middleCols(d, d), n, tr.nf);
        const Mat out = nn::linear(w, layout_.head, tr.af);
        return Eigen::Map<const Mat>(out.data(), items, n);
    }

    /// Convenience single-item prediction.
    std::vector<double> predict(const Params& w, const std::vector<double>& x, int t, const CondState<S>& cond) const {
        Mat xm(1, static_cast<Eigen::Index>(x.size()));
        for (std::size_t i = 0; i < x.size(); ++i) xm(0, static_cast<Eigen::Index>(i)) = static_cast<S>(x[i]);
        const Mat e = forward(w, xm, {t}, cond);
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e(0, static_cast<Eigen::Index>(i)));
        return out;
    }

    /// Reverse pass. `d_eps` is dL/d(prediction), items x N.
    Params backward(const Params& w, const CondState<S>& cond, const ForwardTrace<S>& tr, const Mat& d_eps) const {
        const Eigen::Index items = tr.x.rows(), n = cfg_.n_param_tokens, d = cfg_.d_model;
        const Eigen::Index m = cfg_.tokens_per_item();
        Params g = w.zeros_like();

        const Mat d_out = Eigen::Map<const Mat>(d_eps.data(), items * n, 1);
        Mat d_af = nn::linear_backward(w, layout_.head, tr.af, d_out, g);
        Mat d_fmod = Mat::Zero(items, 2 * d);
        Mat dh = nn::modulated_norm_backward(tr.nf, tr.fmod.middleCols(d, d), d_af, n, d_fmod.middleCols(0, d),
                                             d_fmod.middleCols(d, d));

        Mat d_gmod = Mat::Zero(items, 6 * d);
        Mat d_proj = Mat::Zero(cond.proj.rows(), d);
        Mat dk, dv;
        for (std::size_t li = layout_.blocks.size(); li-- > 0;) {
            const auto& bl = layout_.blocks[li];
            const auto& bt = tr.blocks[li];
            Mat d_mod = Mat::Zero(items, 6 * d);

            // MLP
            Mat dg = nn::linear_backward(w, bl.fc2, bt.g, dh, g);
            Mat dz = nn::gelu_backward(bt.z, dg);
            Mat da3 = nn::linear_backward(w, bl.fc1, bt.a3, dz, g);
            dh += nn::modulated_norm_backward(bt.n3, bt.mod.middleCols(5 * d, d), da3, n, d_mod.middleCols(4 * d, d),
                                              d_mod.middleCols(5 * d, d));

            // cross-attention
            Mat da2 = nn::attention_backward(w, bl.cross, bt.a2, cond.keys[li], cond.values[li], items, n, m,
                                             cfg_.n_heads, bt.cross_attn, dh, g, dk, dv);
            d_proj += nn::linear_backward(w, bl.cross.k, cond.proj, dk, g);
            d_proj += nn::linear_backward(w, bl.cross.v, cond.proj, dv, g);
            dh += nn::modulated_norm_backward(bt.n2, bt.mod.middleCols(3 * d, d), da2, n, d_mod.middleCols(2 * d, d),
                                              d_mod.middleCols(3 * d, d));

            // self-attention
            Mat da1 = nn::attention_backward(w, bl.self, bt.a1, bt.self_k, bt.self_v, items, n, n, cfg_.n_heads,
                                             bt.self_attn, dh, g, dk, dv);
            da1 += nn::linear_backward(w, bl.self.k, bt.a1, dk, g);
            da1 += nn::linear_backward(w, bl.self.v, bt.a1, dv, g);
            dh += nn::modulated_norm_backward(bt.n1, bt.mod.middleCols(d, d), da1, n, d_mod.middleCols(0, d),
                                              d_mod.middleCols(d, d));

            d_gmod += d_mod;
            g[bl.mod_table].row(0) += d_mod.colwise().sum();
        }

        // parameter-token embedding
        for (Eigen::Index b = 0; b < items; ++b)
            for (Eigen::Index i = 0; i < n; ++i) {
                const auto row = dh.row(b * n + i);
                g[layout_.embed_w].row(i) += tr.x(b, i) * row;
                g[layout_.embed_b].row(0) += row;
                g[layout_.embed_pos].row(i) += row;
            }

        // timestep path
        Mat ds = nn::linear_backward(w, layout_.modulation, tr.tsilu, d_gmod, g);
        ds += nn::linear_backward(w, layout_.final_modulation, tr.tsilu, d_fmod, g);
        Mat dtemb = nn::silu_backward(tr.temb, ds);
        Mat dts1 = nn::linear_backward(w, layout_.time2, tr.ts1, dtemb, g);
        nn::linear_backward(w, layout_.time1, tr.tf, nn::silu_backward(tr.tz1, dts1), g, false);

        // condition path
        Mat dg1 = nn::linear_backward(w, layout_.proj2, nn::gelu(cond.z1), d_proj, g);
        Mat dtok = nn::linear_backward(w, layout_.proj1, cond.tokens, nn::gelu_backward(cond.z1, dg1), g,
                                       layout_.has_patch);
        if (layout_.has_patch) nn::linear_backward(w, layout_.patch, cond.input, dtok, g, false);
        return g;
    }

    /// Draw t ~ U{1..T} and eps ~ N(0, I) per item from `seed`, form x_t, and
    /// return the mean squared noise-prediction error with exact gradients.
    LossAndGrad<S> loss_and_grad(const Params& w, const Batch<S>& batch, const DiffusionSchedule& sched,
                                 std::uint64_t seed) const {
        const Eigen::Index items = batch.x0.rows(), n = cfg_.n_param_tokens;
        if (items == 0) throw InvalidInput("empty training batch");
        if (batch.x0.cols() != n) throw InvalidInput("batch vectors have the wrong length");
        Rng rng(seed);
        std::vector<int> t(static_cast<std::size_t>(items));
        Mat eps(items, n), xt(items, n);
        for (Eigen::Index b = 0; b < items; ++b) {
            t[static_cast<std::size_t>(b)] = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(sched.T)));
            const S a = static_cast<S>(std::sqrt(sched.alpha_bar_at(t[static_cast<std::size_t>(b)])));
            const S s = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar_at(t[static_cast<std::size_t>(b)])));
            for (Eigen::Index i = 0; i < n; ++i) {
                eps(b, i) = static_cast<S>(rng.normal());
                xt(b, i) = a * batch.x0(b, i) + s * eps(b, i);
            }
        }
        const CondState<S> cond = encode(w, batch.cond_input);
        ForwardTrace<S> tr;
        const Mat pred = forward(w, xt, t, cond, &tr);
        const Mat diff = pred - eps;
        const S count = static_cast<S>(diff.size());
        LossAndGrad<S> out;
        out.loss = diff.squaredNorm() / count;
        out.grad = backward(w, cond, tr, (S(2) / count) * diff);
        return out;
    }

private:
    DenoiserConfig cfg_;
    DenoiserLayout layout_;
};

} // namespace dipcg
