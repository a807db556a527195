#pragma once

#include "dipcg/generators.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace dipcg {

/// Normalized parameter vector in [-1, 1]^N; the diffusion state variable.
struct CanonVector {
    std::string generator_id;
    std::vector<double> x;

    bool operator==(const CanonVector&) const = default;
};

/// Center of piece k when [-1, 1] is cut into K equal pieces.
inline double piece_center(std::size_t k, std::size_t n_pieces) {
    return -1.0 + (2.0 * static_cast<double>(k) + 1.0) / static_cast<double>(n_pieces);
}

/// Piece containing x (x clamped to [-1, 1] first).
inline std::size_t piece_of(double x, std::size_t n_pieces) {
    x = std::clamp(x, -1.0, 1.0);
    const double k = std::floor((x + 1.0) * static_cast<double>(n_pieces) / 2.0);
    return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(n_pieces - 1)));
}

inline CanonVector canonicalize(const GeneratorSchema& s, const ParamVector& p) {
    validate(s, p);
    CanonVector c{s.generator_id, std::vector<double>(s.size())};
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto& spec = s.params[i];
        if (spec.is_discrete())
            c.x[i] = piece_center(static_cast<std::size_t>(p.values[i]), spec.n_choices());
        else
            c.x[i] = 2.0 * (p.values[i] - spec.min) / (spec.max - spec.min) - 1.0;
    }
    return c;
}

/// Inverse projection. Entries are clamped to [-1, 1] before decoding, so
/// sampler overshoot maps to the nearest boundary value or piece.
inline ParamVector decanonicalize(const GeneratorSchema& s, const CanonVector& c) {
    if (c.x.size() != s.size())
        throw InvalidParam("x", "canonical vector has " + std::to_string(c.x.size()) + " entries, schema '" +
                                    s.generator_id + "' has " + std::to_string(s.size()));
    ParamVector p{s.generator_id, std::vector<double>(s.size())};
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (std::isnan(c.x[i])) throw InvalidInput("canonical entry " + s.params[i].name + " is NaN");
        const auto& spec = s.params[i];
        const double x = std::clamp(c.x[i], -1.0, 1.0);
        if (spec.is_discrete()) {
            p.values[i] = static_cast<double>(piece_of(x, spec.n_choices()));
        } else {
            // Written as an interpolation so both endpoints are reproduced exactly.
            const double u = 0.5 * (x + 1.0);
            p.values[i] = std::clamp((1.0 - u) * spec.min + u * spec.max, spec.min, spec.max);
        }
    }
    return p;
}

/// Decode-then-encode: continuous entries are clamped, discrete entries snap to
/// their piece center.
inline CanonVector snap(const GeneratorSchema& s, const CanonVector& c) {
    return canonicalize(s, decanonicalize(s, c));
}

inline double canonical_l2(const CanonVector& a, const CanonVector& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.x.size(); ++i) acc += (a.x[i] - b.x[i]) * (a.x[i] - b.x[i]);
    return std::sqrt(acc);
}

} // namespace dipcg
