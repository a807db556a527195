#pragma once

#include "dipcg/error.hpp"
#include "dipcg/rng.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dipcg {

enum class ParamKind { Continuous, Discrete };

struct ParamSpec {
    std::string name;
    ParamKind kind = ParamKind::Continuous;
    double min = 0.0;
    double max = 1.0;
    std::vector<std::string> choices;

    static ParamSpec continuous(std::string n, double lo, double hi) {
        return {std::move(n), ParamKind::Continuous, lo, hi, {}};
    }
    static ParamSpec discrete(std::string n, std::vector<std::string> c) {
        return {std::move(n), ParamKind::Discrete, 0.0, 0.0, std::move(c)};
    }

    bool is_discrete() const { return kind == ParamKind::Discrete; }
    std::size_t n_choices() const { return choices.size(); }
};

/// Ordered parameter list of one generator. The order defines the token order of
/// the canonical vector and must not change within a schema version.
struct GeneratorSchema {
    std::string generator_id;
    int version = 1;
    std::vector<ParamSpec> params;

    std::size_t size() const { return params.size(); }

    std::optional<std::size_t> index_of(std::string_view name) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return i;
        return std::nullopt;
    }

    std::size_t n_discrete() const {
        return static_cast<std::size_t>(
            std::count_if(params.begin(), params.end(), [](const ParamSpec& p) { return p.is_discrete(); }));
    }
};

/// One value per schema entry: a real for continuous entries, a choice index
/// (stored as an integral double) for discrete ones.
struct ParamVector {
    std::string generator_id;
    std::vector<double> values;

    bool operator==(const ParamVector&) const = default;
};

using Vec3 = Eigen::Vector3d;
using Triangle = std::array<std::uint32_t, 3>;

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Triangle> triangles;

    bool empty() const { return triangles.empty(); }

    std::pair<Vec3, Vec3> bounds() const {
        Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
        Vec3 hi = -lo;
        for (const auto& v : vertices) {
            lo = lo.cwiseMin(v);
            hi = hi.cwiseMax(v);
        }
        return {lo, hi};
    }

    Vec3 extents() const {
        auto [lo, hi] = bounds();
        return hi - lo;
    }

    /// Append another mesh, re-indexing its triangles.
    void append(const TriangleMesh& other) {
        const auto base = static_cast<std::uint32_t>(vertices.size());
        vertices.insert(vertices.end(), other.vertices.begin(), other.vertices.end());
        for (auto t : other.triangles) triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
    }
};

namespace detail {

/// Eight corners indexed by bit pattern (x: bit 0, y: bit 1, z: bit 2).
using Corners = std::array<Vec3, 8>;

inline void add_hexahedron(TriangleMesh& m, const Corners& c) {
    static constexpr std::array<std::array<int, 4>, 6> kQuads{{
        {0, 4, 6, 2}, // -x
        {1, 3, 7, 5}, // +x
        {0, 1, 5, 4}, // -y
        {2, 6, 7, 3}, // +y
        {0, 2, 3, 1}, // -z
        {4, 5, 7, 6}, // +z
    }};
    const auto base = static_cast<std::uint32_t>(m.vertices.size());
    m.vertices.insert(m.vertices.end(), c.begin(), c.end());
    for (const auto& q : kQuads) {
        m.triangles.push_back({base + q[0], base + q[1], base + q[2]});
        m.triangles.push_back({base + q[0], base + q[2], base + q[3]});
    }
}

inline Corners box_corners(const Vec3& lo, const Vec3& hi) {
    Corners c;
    for (int i = 0; i < 8; ++i)
        c[i] = Vec3((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(), (i & 4) ? hi.z() : lo.z());
    return c;
}

inline void add_box(TriangleMesh& m, const Vec3& lo, const Vec3& hi) { add_hexahedron(m, box_corners(lo, hi)); }

/// Square prism whose bottom face is translated by `shear` relative to the top.
inline void add_sheared_prism(TriangleMesh& m, const Vec3& lo, const Vec3& hi, const Vec3& shear) {
    Corners c = box_corners(lo, hi);
    for (int i = 0; i < 8; ++i)
        if (!(i & 2)) c[i] += shear;
    add_hexahedron(m, c);
}

/// Box given in a local frame (x across, y up, z forward from the pivot), rotated
/// backwards by `tilt` radians about the x axis through `pivot`.
inline void add_tilted_box(TriangleMesh& m, const Vec3& lo, const Vec3& hi, const Vec3& pivot, double tilt) {
    Corners c = box_corners(lo, hi);
    const double ct = std::cos(tilt), st = std::sin(tilt);
    for (auto& p : c) {
        const double dy = p.y(), dz = p.z();
        p = Vec3(p.x(), pivot.y() + dz * st + dy * ct, pivot.z() + dz * ct - dy * st);
    }
    add_hexahedron(m, c);
}

inline std::vector<GeneratorSchema> build_registry() {
    using P = ParamSpec;
    GeneratorSchema chair{"chair", 1,
                          {
                              P::continuous("seat_width", 0.35, 0.8),
                              P::continuous("seat_depth", 0.35, 0.8),
                              P::continuous("seat_height", 0.3, 0.6),
                              P::continuous("seat_thickness", 0.02, 0.08),
                              P::continuous("leg_thickness", 0.02, 0.08),
                              P::continuous("leg_splay", 0.0, 0.15),
                              P::continuous("back_height", 0.2, 0.6),
                              P::continuous("back_tilt_deg", 0.0, 20.0),
                              P::continuous("arm_height", 0.15, 0.3),
                              P::discrete("leg_style", {"straight", "splayed"}),
                              P::discrete("back_style", {"solid", "slats"}),
                              P::discrete("n_slats", {"2", "3", "4", "5"}),
                              P::discrete("has_arms", {"no", "yes"}),
                          }};
    GeneratorSchema table{"table", 1,
                          {
                              P::continuous("top_width", 0.6, 1.6),
                              P::continuous("top_depth", 0.5, 1.2),
                              P::continuous("top_thickness", 0.02, 0.08),
                              P::continuous("height", 0.4, 0.9),
                              P::continuous("leg_thickness", 0.04, 0.12),
                              P::discrete("leg_style", {"four-legs", "pedestal"}),
                          }};
    GeneratorSchema vase{"vase", 1,
                         {
                             P::continuous("base_radius", 0.03, 0.2),
                             P::continuous("waist_radius", 0.03, 0.2),
                             P::continuous("belly_radius", 0.03, 0.2),
                             P::continuous("neck_radius", 0.03, 0.2),
                             P::continuous("lip_radius", 0.03, 0.2),
                             P::continuous("height", 0.15, 0.5),
                             P::continuous("belly_pos", 0.25, 0.6),
                             P::continuous("neck_pos", 0.7, 0.9),
                         }};
    return {std::move(chair), std::move(table), std::move(vase)};
}

inline const std::vector<GeneratorSchema>& registry() {
    static const std::vector<GeneratorSchema> r = build_registry();
    return r;
}

} // namespace detail

inline std::vector<std::string> list_generators() {
    std::vector<std::string> ids;
    for (const auto& s : detail::registry()) ids.push_back(s.generator_id);
    return ids;
}

inline const GeneratorSchema& schema(std::string_view generator_id) {
    for (const auto& s : detail::registry())
        if (s.generator_id == generator_id) return s;
    throw NotFound("unknown generator: " + std::string(generator_id));
}

/// Throws InvalidParam naming the first offending entry.
inline void validate(const GeneratorSchema& s, const ParamVector& p) {
    if (p.generator_id != s.generator_id)
        throw InvalidParam("generator_id", "parameter vector is for '" + p.generator_id + "', schema is '" +
                                               s.generator_id + "'");
    if (p.values.size() != s.size())
        throw InvalidParam("values", "expected " + std::to_string(s.size()) + " values, got " +
                                         std::to_string(p.values.size()));
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto& spec = s.params[i];
        const double v = p.values[i];
        if (!std::isfinite(v)) throw InvalidParam(spec.name, spec.name + " is not finite");
        if (spec.is_discrete()) {
            if (v != std::floor(v) || v < 0 || v >= static_cast<double>(spec.n_choices()))
                throw InvalidParam(spec.name, spec.name + " must be a choice index in [0," +
                                                  std::to_string(spec.n_choices()) + ")");
        } else if (v < spec.min || v > spec.max) {
            throw InvalidParam(spec.name, spec.name + " out of range [" + std::to_string(spec.min) + ", " +
                                              std::to_string(spec.max) + "]");
        }
    }
}

/// Midpoint of every continuous range, first choice of every discrete one.
inline ParamVector default_params(const GeneratorSchema& s) {
    ParamVector p{s.generator_id, {}};
    for (const auto& spec : s.params) p.values.push_back(spec.is_discrete() ? 0.0 : 0.5 * (spec.min + spec.max));
    return p;
}

inline ParamVector sample_params(const GeneratorSchema& s, std::uint64_t seed) {
    Rng rng(seed);
    ParamVector p{s.generator_id, {}};
    for (const auto& spec : s.params) {
        if (spec.is_discrete())
            p.values.push_back(static_cast<double>(rng.index(spec.n_choices())));
        else
            p.values.push_back(rng.uniform(spec.min, spec.max));
    }
    return p;
}

namespace detail {

struct ParamReader {
    const GeneratorSchema& s;
    const ParamVector& p;
    double operator[](std::string_view name) const { return p.values[*s.index_of(name)]; }
    int choice(std::string_view name) const { return static_cast<int>((*this)[name]); }
};

inline TriangleMesh generate_chair(const ParamReader& p) {
    const double w = p["seat_width"], d = p["seat_depth"], sh = p["seat_height"], st = p["seat_thickness"];
    const double lt = p["leg_thickness"], bh = p["back_height"];
    const double tilt = p["back_tilt_deg"] * std::numbers::pi / 180.0;
    const double splay = p.choice("leg_style") == 1 ? p["leg_splay"] : 0.0;
    const bool slats = p.choice("back_style") == 1;
    const int n_slats = p.choice("n_slats") + 2;
    const bool arms = p.choice("has_arms") == 1;

    TriangleMesh m;
    const double seat_lo = sh - 0.5 * st, seat_hi = sh + 0.5 * st;
    add_box(m, {-0.5 * w, seat_lo, -0.5 * d}, {0.5 * w, seat_hi, 0.5 * d});

    for (int sx : {-1, 1}) {
        for (int sz : {-1, 1}) {
            const double cx = sx * (0.5 * w - 0.5 * lt), cz = sz * (0.5 * d - 0.5 * lt);
            const Vec3 lo(cx - 0.5 * lt, 0.0, cz - 0.5 * lt), hi(cx + 0.5 * lt, seat_lo, cz + 0.5 * lt);
            if (p.choice("leg_style") == 1)
                add_sheared_prism(m, lo, hi, Vec3(sx * splay, 0.0, sz * splay));
            else
                add_box(m, lo, hi);
        }
    }

    // Back parts live in a frame pivoting on the rear top edge of the seat.
    const Vec3 pivot(0.0, seat_hi, -0.5 * d);
    if (!slats) {
        add_tilted_box(m, {-0.5 * w, 0.0, 0.0}, {0.5 * w, bh, st}, pivot, tilt);
    } else {
        for (int sx : {-1, 1}) {
            const double x0 = sx < 0 ? -0.5 * w : 0.5 * w - lt;
            add_tilted_box(m, {x0, 0.0, 0.0}, {x0 + lt, bh, st}, pivot, tilt);
        }
        const double slat_h = bh / (2.0 * (n_slats + 1));
        for (int i = 1; i <= n_slats; ++i) {
            const double yc = bh * i / (n_slats + 1.0);
            add_tilted_box(m, {-0.5 * w + lt, yc - 0.5 * slat_h, 0.0}, {0.5 * w - lt, yc + 0.5 * slat_h, st}, pivot,
                           tilt);
        }
    }

    if (arms) {
        const double rail_y = sh + p["arm_height"];
        for (int sx : {-1, 1}) {
            const double x0 = sx < 0 ? -0.5 * w : 0.5 * w - lt;
            add_box(m, {x0, rail_y - 0.5 * lt, -0.5 * d}, {x0 + lt, rail_y + 0.5 * lt, 0.5 * d});
            add_box(m, {x0, seat_hi, 0.5 * d - lt}, {x0 + lt, rail_y - 0.5 * lt, 0.5 * d});
        }
    }
    return m;
}

inline TriangleMesh generate_table(const ParamReader& p) {
    const double w = p["top_width"], d = p["top_depth"], tt = p["top_thickness"], h = p["height"];
    const double lt = p["leg_thickness"];
    TriangleMesh m;
    add_box(m, {-0.5 * w, h - tt, -0.5 * d}, {0.5 * w, h, 0.5 * d});
    if (p.choice("leg_style") == 0) {
        for (int sx : {-1, 1})
            for (int sz : {-1, 1}) {
                const double cx = sx * (0.5 * w - 0.5 * lt), cz = sz * (0.5 * d - 0.5 * lt);
                add_box(m, {cx - 0.5 * lt, 0.0, cz - 0.5 * lt}, {cx + 0.5 * lt, h - tt, cz + 0.5 * lt});
            }
    } else {
        const double bw = 0.3 * w, bd = 0.3 * d;
        add_box(m, {-bw, 0.0, -bd}, {bw, tt, bd});
        add_box(m, {-lt, tt, -lt}, {lt, h - tt, lt});
    }
    return m;
}

} // namespace detail

constexpr int kVaseSegments = 32;
constexpr int kVaseRings = 24;

/// Control points (height, radius) of the vase profile, bottom to top.
inline std::vector<std::pair<double, double>> vase_profile_knots(const GeneratorSchema& s, const ParamVector& pv) {
    const detail::ParamReader p{s, pv};
    const double h = p["height"];
    const double belly_pos = p["belly_pos"];
    const double neck_pos = std::max(p["neck_pos"], belly_pos + 0.05);
    return {{0.0, p["base_radius"]},
            {0.5 * belly_pos * h, p["waist_radius"]},
            {belly_pos * h, p["belly_radius"]},
            {neck_pos * h, p["neck_radius"]},
            {h, p["lip_radius"]}};
}

constexpr double kVaseMinRadius = 0.005;

/// Non-uniform Catmull-Rom interpolation of radius as a function of height.
inline double vase_radius_at(const std::vector<std::pair<double, double>>& k, double y) {
    const std::size_t n = k.size();
    std::size_t i = 0;
    while (i + 2 < n && y > k[i + 1].first) ++i;
    auto tangent = [&](std::size_t j) {
        const std::size_t a = j == 0 ? 0 : j - 1, b = j + 1 == n ? j : j + 1;
        return (k[b].second - k[a].second) / (k[b].first - k[a].first);
    };
    const double y0 = k[i].first, y1 = k[i + 1].first, hseg = y1 - y0;
    const double u = std::clamp((y - y0) / hseg, 0.0, 1.0);
    const double u2 = u * u, u3 = u2 * u;
    const double r = (2 * u3 - 3 * u2 + 1) * k[i].second + (u3 - 2 * u2 + u) * hseg * tangent(i) +
                     (-2 * u3 + 3 * u2) * k[i + 1].second + (u3 - u2) * hseg * tangent(i + 1);
    return std::max(r, kVaseMinRadius);
}

namespace detail {

inline TriangleMesh generate_vase(const GeneratorSchema& s, const ParamVector& pv) {
    const auto knots = vase_profile_knots(s, pv);
    const double h = knots.back().first;
    TriangleMesh m;
    for (int r = 0; r < kVaseRings; ++r) {
        const double y = r == kVaseRings - 1 ? h : h * r / (kVaseRings - 1);
        const double rad = vase_radius_at(knots, y);
        for (int k = 0; k < kVaseSegments; ++k) {
            const double a = 2.0 * std::numbers::pi * k / kVaseSegments;
            // Exact axis values at quarter turns keep the bounding box closed-form.
            double c = std::cos(a), sn = std::sin(a);
            switch (k) {
            case 0: c = 1.0, sn = 0.0; break;
            case kVaseSegments / 4: c = 0.0, sn = 1.0; break;
            case kVaseSegments / 2: c = -1.0, sn = 0.0; break;
            case 3 * kVaseSegments / 4: c = 0.0, sn = -1.0; break;
            default: break;
            }
            m.vertices.emplace_back(rad * c, y, rad * sn);
        }
    }
    auto idx = [](int ring, int seg) {
        return static_cast<std::uint32_t>(ring * kVaseSegments + (seg % kVaseSegments));
    };
    for (int r = 0; r + 1 < kVaseRings; ++r)
        for (int k = 0; k < kVaseSegments; ++k) {
            m.triangles.push_back({idx(r, k), idx(r, k + 1), idx(r + 1, k + 1)});
            m.triangles.push_back({idx(r, k), idx(r + 1, k + 1), idx(r + 1, k)});
        }
    const auto center = static_cast<std::uint32_t>(m.vertices.size());
    m.vertices.emplace_back(0.0, 0.0, 0.0);
    for (int k = 0; k < kVaseSegments; ++k) m.triangles.push_back({center, idx(0, k + 1), idx(0, k)});
    return m;
}

} // namespace detail

/// Build the mesh for `params`. Same input gives bit-identical output; the
/// triangle count depends on discrete entries only.
inline TriangleMesh generate(const GeneratorSchema& s, const ParamVector& params) {
    validate(s, params);
    const detail::ParamReader reader{s, params};
    if (s.generator_id == "chair") return detail::generate_chair(reader);
    if (s.generator_id == "table") return detail::generate_table(reader);
    if (s.generator_id == "vase") return detail::generate_vase(s, params);
    throw NotFound("no construction for generator: " + s.generator_id);
}

inline double triangle_area(const TriangleMesh& m, const Triangle& t) {
    const Vec3& a = m.vertices[t[0]];
    return 0.5 * (m.vertices[t[1]] - a).cross(m.vertices[t[2]] - a).norm();
}

/// Structural checks: finite coordinates, valid indices, no zero-area triangles.
inline bool is_valid_mesh(const TriangleMesh& m, double min_area = 1e-14) {
    for (const auto& v : m.vertices)
        if (!v.allFinite()) return false;
    for (const auto& t : m.triangles) {
        for (auto i : t)
            if (i >= m.vertices.size()) return false;
        if (!(triangle_area(m, t) > min_area)) return false;
    }
    return true;
}

// ---- serialization --------------------------------------------------------

inline nlohmann::json schema_to_json(const GeneratorSchema& s) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : s.params) {
        if (p.is_discrete())
            params.push_back({{"name", p.name}, {"kind", "discrete"}, {"choices", p.choices}});
        else
            params.push_back({{"name", p.name}, {"kind", "continuous"}, {"min", p.min}, {"max", p.max}});
    }
    return {{"generator_id", s.generator_id}, {"version", s.version}, {"params", params}};
}

/// Parameters as a name-keyed object; discrete entries are written as labels.
inline nlohmann::json params_to_json(const GeneratorSchema& s, const ParamVector& p) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto& spec = s.params[i];
        if (spec.is_discrete())
            j[spec.name] = spec.choices.at(static_cast<std::size_t>(p.values[i]));
        else
            j[spec.name] = p.values[i];
    }
    return j;
}

/// Parse a name-keyed object. Missing names take their defaults; discrete
/// entries accept a label or an integer index. Unknown names and out-of-range
/// values raise InvalidParam.
inline ParamVector params_from_json(const GeneratorSchema& s, const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidParam("params", "params must be a JSON object");
    ParamVector p = default_params(s);
    for (const auto& [name, value] : j.items()) {
        auto idx = s.index_of(name);
        if (!idx) throw InvalidParam(name, "unknown parameter: " + name);
        const auto& spec = s.params[*idx];
        if (spec.is_discrete()) {
            if (value.is_string()) {
                auto it = std::find(spec.choices.begin(), spec.choices.end(), value.get<std::string>());
                if (it == spec.choices.end())
                    throw InvalidParam(name, name + ": unknown choice '" + value.get<std::string>() + "'");
                p.values[*idx] = static_cast<double>(it - spec.choices.begin());
            } else if (value.is_number_integer() || value.is_number_unsigned()) {
                p.values[*idx] = value.get<double>();
            } else {
                throw InvalidParam(name, name + ": expected a choice label or index");
            }
        } else {
            if (!value.is_number()) throw InvalidParam(name, name + ": expected a number");
            p.values[*idx] = value.get<double>();
        }
    }
    validate(s, p);
    return p;
}

inline void write_obj(std::ostream& os, const TriangleMesh& m) {
    char buf[128];
    for (const auto& v : m.vertices) {
        std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
        os << buf;
    }
    for (const auto& t : m.triangles) os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

inline void save_obj(const std::string& path, const TriangleMesh& m) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path + " for writing");
    write_obj(os, m);
}

} // namespace dipcg
