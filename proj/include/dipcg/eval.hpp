#pragma once

#include "dipcg/error.hpp"
#include "dipcg/generators.hpp"
#include "dipcg/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace dipcg {

struct PointCloud {
    std::vector<Vec3> points;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

/// Maps a mesh into a unit frame: centered on its bounding-box center, scaled
/// so that the largest extent is 1.
struct Normalization {
    Vec3 center = Vec3::Zero();
    double scale = 1.0;

    Vec3 apply(const Vec3& p) const { return (p - center) * scale; }
};

inline Normalization normalization_of(const TriangleMesh& mesh) {
    if (mesh.vertices.empty()) throw InvalidInput("cannot normalize an empty mesh");
    auto [lo, hi] = mesh.bounds();
    const double extent = (hi - lo).maxCoeff();
    return {0.5 * (lo + hi), extent > 0.0 ? 1.0 / extent : 1.0};
}

/// Area-weighted triangle choice with uniform barycentric coordinates, mapped
/// through `norm`.
inline PointCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed,
                                 const Normalization& norm) {
    if (mesh.empty()) throw InvalidInput("cannot sample an empty mesh");
    std::vector<double> cdf(mesh.triangles.size());
    double total = 0.0;
    for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
        total += triangle_area(mesh, mesh.triangles[i]);
        cdf[i] = total;
    }
    if (!(total > 0.0)) throw InvalidInput("mesh has zero surface area");
    Rng rng(seed);
    PointCloud pc;
    pc.points.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double u = rng.uniform() * total;
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        const auto& t = mesh.triangles[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1)];
        const double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
        const Vec3 p = (1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] +
                       r1 * r2 * mesh.vertices[t[2]];
        pc.points.push_back(norm.apply(p));
    }
    return pc;
}

/// Sample normalized by the mesh's own bounding box.
inline PointCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
    return sample_surface(mesh, n, seed, normalization_of(mesh));
}

inline double point_distance(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

/// Uniform-grid nearest-neighbour index. Queries return exactly the minimum
/// distance an exhaustive scan would find.
class NearestIndex {
public:
    explicit NearestIndex(const PointCloud& cloud) : pts_(cloud.points) {
        if (pts_.empty()) throw InvalidInput("nearest-neighbour index over an empty cloud");
        lo_ = hi_ = pts_.front();
        for (const auto& p : pts_) {
            lo_ = lo_.cwiseMin(p);
            hi_ = hi_.cwiseMax(p);
        }
        const Vec3 ext = hi_ - lo_;
        const double volume_per_cell = std::max(ext.prod(), 1e-30) / std::max<double>(1.0, pts_.size() / 2.0);
        cell_ = std::max({std::cbrt(volume_per_cell), ext.maxCoeff() / 64.0, 1e-12});
        for (int a = 0; a < 3; ++a) dims_[a] = std::max(1, static_cast<int>(std::floor(ext[a] / cell_)) + 1);
        start_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2] + 1, 0);
        std::vector<std::size_t> cell_of(pts_.size());
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            cell_of[i] = flat(coord(pts_[i], 0), coord(pts_[i], 1), coord(pts_[i], 2));
            ++start_[cell_of[i] + 1];
        }
        for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
        order_.resize(pts_.size());
        std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
        for (std::size_t i = 0; i < pts_.size(); ++i) order_[fill[cell_of[i]]++] = i;
    }

    double nearest(const Vec3& q) const {
        // Start from the cell of q's projection onto the bounding box. Projection
        // onto a convex set never increases distances to points inside it, so the
        // ring bound below also holds for queries outside the box.
        const Vec3 proj = q.cwiseMax(lo_).cwiseMin(hi_);
        const int c[3] = {coord(proj, 0), coord(proj, 1), coord(proj, 2)};
        const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
        double best = std::numeric_limits<double>::infinity();
        for (int r = 0; r <= max_ring; ++r) {
            scan_ring(q, c, r, best);
            // Every unvisited cell is at least r+1 cells away, so at least r*cell_ in distance.
            if (best <= r * cell_) break;
        }
        return best;
    }

private:
    int coord(const Vec3& p, int a) const {
        return std::clamp(static_cast<int>(std::floor((p[a] - lo_[a]) / cell_)), 0, dims_[a] - 1);
    }
    std::size_t flat(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
    }

    void scan_ring(const Vec3& q, const int c[3], int r, double& best) const {
        const int x0 = std::max(0, c[0] - r), x1 = std::min(dims_[0] - 1, c[0] + r);
        const int y0 = std::max(0, c[1] - r), y1 = std::min(dims_[1] - 1, c[1] + r);
        const int z0 = std::max(0, c[2] - r), z1 = std::min(dims_[2] - 1, c[2] + r);
        for (int z = z0; z <= z1; ++z)
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
                    const std::size_t cell = flat(x, y, z);
                    for (std::size_t k = start_[cell]; k < start_[cell + 1]; ++k)
                        best = std::min(best, point_distance(q, pts_[order_[k]]));
                }
    }

    std::vector<Vec3> pts_;
    Vec3 lo_, hi_;
    double cell_ = 1.0;
    int dims_[3] = {1, 1, 1};
    std::vector<std::size_t> start_, order_;
};

/// Distance from each point of `a` to its nearest neighbour in `b`.
inline std::vector<double> nearest_distances(const PointCloud& a, const PointCloud& b) {
    const NearestIndex index(b);
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = index.nearest(a.points[i]);
    return d;
}

/// Mean in index order.
inline double ordered_mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Symmetric, non-squared Chamfer distance.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
    if (a.empty() || b.empty()) throw InvalidInput("chamfer distance of an empty cloud");
    return 0.5 * (ordered_mean(nearest_distances(a, b)) + ordered_mean(nearest_distances(b, a)));
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method with
/// potentials, O(n^3)). Returns, for each row, its assigned column.
inline std::vector<std::size_t> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
    const std::size_t n = cost.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> assign(n);
    for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
    return assign;
}

/// Earth mover's distance between equal-size clouds: mean matched distance of
/// the optimal bijection.
inline double emd(const PointCloud& a, const PointCloud& b) {
    if (a.size() != b.size()) throw InvalidInput("emd needs clouds of equal size");
    if (a.empty()) throw InvalidInput("emd of empty clouds");
    const std::size_t n = a.size();
    std::vector<std::vector<double>> cost(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) cost[i][j] = point_distance(a.points[i], b.points[j]);
    const auto assign = min_cost_assignment(cost);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost[i][assign[i]];
    return s / static_cast<double>(n);
}

/// Harmonic mean of precision (share of `a` within tau of `b`) and recall.
inline double fscore(const PointCloud& a, const PointCloud& b, double tau) {
    if (!(tau > 0.0)) throw InvalidInput("fscore needs tau > 0");
    if (a.empty() || b.empty()) throw InvalidInput("fscore of an empty cloud");
    auto share = [tau](const std::vector<double>& d) {
        std::size_t k = 0;
        for (double x : d) k += x <= tau;
        return static_cast<double>(k) / static_cast<double>(d.size());
    };
    const double p = share(nearest_distances(a, b)), r = share(nearest_distances(b, a));
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

// ---- evaluation harness -------------------------------------------------------

struct EvalOptions {
    std::size_t n_points = 2048;
    std::size_t emd_points = 512; ///< leading subset of each cloud used for EMD
    double tau = 0.05;
    std::uint64_t seed = 0;
};

struct ItemMetrics {
    std::size_t index = 0;
    double cd = 0.0, emd = 0.0, fscore = 0.0;
};

struct MetricSummary {
    double cd = 0.0, emd = 0.0, fscore = 0.0;
};

struct MetricsReport {
    std::string generator_id;
    EvalOptions options;
    std::vector<ItemMetrics> items;
    MetricSummary mean;
    std::vector<ItemMetrics> baseline_items;
    MetricSummary baseline;
    std::vector<std::pair<std::size_t, std::string>> failures;
};

/// Compare a predicted mesh against ground truth; both clouds use the ground
/// truth's normalization.
inline ItemMetrics compare_meshes(const TriangleMesh& predicted, const TriangleMesh& truth, const EvalOptions& opt,
                                  std::uint64_t seed) {
    const Normalization norm = normalization_of(truth);
    const PointCloud gt = sample_surface(truth, opt.n_points, seed, norm);
    const PointCloud pr = sample_surface(predicted, opt.n_points, seed ^ 0x9e3779b97f4a7c15ULL, norm);
    const std::size_t m = std::min({opt.emd_points, gt.size(), pr.size()});
    PointCloud gt_sub{{gt.points.begin(), gt.points.begin() + static_cast<std::ptrdiff_t>(m)}};
    PointCloud pr_sub{{pr.points.begin(), pr.points.begin() + static_cast<std::ptrdiff_t>(m)}};
    ItemMetrics r;
    r.cd = chamfer(pr, gt);
    r.emd = emd(pr_sub, gt_sub);
    r.fscore = fscore(pr, gt, opt.tau);
    return r;
}

inline MetricSummary summarize(const std::vector<ItemMetrics>& rows) {
    MetricSummary s;
    if (rows.empty()) return s;
    for (const auto& r : rows) s.cd += r.cd, s.emd += r.emd, s.fscore += r.fscore;
    const double n = static_cast<double>(rows.size());
    return {s.cd / n, s.emd / n, s.fscore / n};
}

/// Score `predict(i)` against `truth[i]` for every item, plus a baseline of
/// uniformly sampled parameters. Items whose prediction or generation fails are
/// skipped and listed in `failures`.
inline MetricsReport evaluate(const std::string& generator_id, const std::vector<ParamVector>& truth,
                              const std::function<ParamVector(std::size_t)>& predict, const EvalOptions& opt = {}) {
    const auto& s = schema(generator_id);
    MetricsReport rep;
    rep.generator_id = generator_id;
    rep.options = opt;
    Rng baseline_rng(opt.seed ^ 0xba5e11eULL);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const std::uint64_t item_seed = opt.seed * 1000003ULL + i;
        const std::uint64_t baseline_seed = baseline_rng.fork();
        try {
            const TriangleMesh gt = generate(s, truth[i]);
            ItemMetrics m = compare_meshes(generate(s, predict(i)), gt, opt, item_seed);
            m.index = i;
            ItemMetrics b = compare_meshes(generate(s, sample_params(s, baseline_seed)), gt, opt, item_seed);
            b.index = i;
            rep.items.push_back(m);
            rep.baseline_items.push_back(b);
        } catch (const Error& e) {
            rep.failures.emplace_back(i, e.what());
        }
    }
    rep.mean = summarize(rep.items);
    rep.baseline = summarize(rep.baseline_items);
    return rep;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    auto rows = [](const std::vector<ItemMetrics>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& m : v) a.push_back({{"index", m.index}, {"CD", m.cd}, {"EMD", m.emd}, {"F-Score", m.fscore}});
        return a;
    };
    auto agg = [](const MetricSummary& m) { return nlohmann::json{{"CD", m.cd}, {"EMD", m.emd}, {"F-Score", m.fscore}}; };
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& [i, msg] : r.failures) failures.push_back({{"index", i}, {"error", msg}});
    return {{"generator_id", r.generator_id},
            {"config",
             {{"n_points", r.options.n_points},
              {"emd_points", r.options.emd_points},
              {"tau", r.options.tau},
              {"seed", r.options.seed},
              {"chamfer", "mean nearest distance, non-squared, averaged over both directions"},
              {"normalization", "ground-truth bounding-box center, max extent 1"}}},
            {"item_count", r.items.size()},
            {"aggregate", agg(r.mean)},
            {"baseline", agg(r.baseline)},
            {"items", rows(r.items)},
            {"baseline_items", rows(r.baseline_items)},
            {"failures", failures}};
}

} // namespace dipcg
