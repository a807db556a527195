#pragma once

#include "dipcg/error.hpp"
#include "dipcg/generators.hpp"
#include "dipcg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace dipcg {

struct Camera {
    double azimuth_deg = 0.0;
    double elevation_deg = 30.0;
    double distance_factor = 1.8; ///< multiplies the mesh bounding-sphere radius
    double fov_deg = 40.0;
    int image_size = 64;

    void check() const {
        if (!(fov_deg > 0.0 && fov_deg < 120.0)) throw InvalidInput("camera fov must be in (0, 120) degrees");
        if (!(distance_factor > 1.0)) throw InvalidInput("camera distance_factor must exceed 1");
        if (image_size < 32) throw InvalidInput("camera image_size must be at least 32");
    }
};

/// Camera used whenever a single canonical view is needed (scoring, editing).
inline Camera default_camera(int image_size = 64) { return Camera{0.0, 30.0, 1.8, 40.0, image_size}; }

/// Grayscale image, row-major, values in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, float fill = 0.0f) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const Image&) const = default;
};

enum class RenderMode { Shaded, Mask };

constexpr float kBackground = 1.0f;

/// Azimuth {0,30,60} x elevation {30,60} x distance {1.8,2.0}, lexicographic.
inline std::vector<Camera> camera_grid(int image_size = 64) {
    std::vector<Camera> grid;
    for (double az : {0.0, 30.0, 60.0})
        for (double el : {30.0, 60.0})
            for (double dist : {1.8, 2.0}) grid.push_back(Camera{az, el, dist, 40.0, image_size});
    return grid;
}

namespace detail {

struct ViewTransform {
    Vec3 eye, right, up, forward;
    double focal;
    double half;

    /// Screen position (x right, y down, pixel units) and view depth.
    Eigen::Vector3d project(const Vec3& p) const {
        const Vec3 v = p - eye;
        const double z = v.dot(forward);
        return {half + focal * v.dot(right) / z, half - focal * v.dot(up) / z, z};
    }
};

inline ViewTransform make_view(const TriangleMesh& mesh, const Camera& cam) {
    auto [lo, hi] = mesh.bounds();
    const Vec3 center = 0.5 * (lo + hi);
    double radius = 0.0;
    for (const auto& v : mesh.vertices) radius = std::max(radius, (v - center).norm());
    const double az = cam.azimuth_deg * std::numbers::pi / 180.0;
    const double el = cam.elevation_deg * std::numbers::pi / 180.0;
    const Vec3 dir(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
    ViewTransform vt;
    vt.eye = center + cam.distance_factor * radius * dir;
    vt.forward = -dir;
    vt.right = vt.forward.cross(Vec3::UnitY()).normalized();
    vt.up = vt.right.cross(vt.forward);
    vt.half = 0.5 * cam.image_size;
    vt.focal = vt.half / std::tan(0.5 * cam.fov_deg * std::numbers::pi / 180.0);
    return vt;
}

} // namespace detail

/// Z-buffered perspective rasterization. A pixel is foreground when its center
/// lies inside a projected triangle. Shaded mode applies a two-sided Lambertian
/// headlight mapped to [0.1, 0.9] on a white background; mask mode writes 1 for
/// foreground and 0 elsewhere.
inline Image rasterize(const TriangleMesh& mesh, const Camera& cam, RenderMode mode) {
    if (mesh.empty()) throw InvalidInput("cannot render an empty mesh");
    cam.check();
    const int n = cam.image_size;
    const auto vt = detail::make_view(mesh, cam);

    std::vector<Eigen::Vector3d> proj(mesh.vertices.size());
    for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = vt.project(mesh.vertices[i]);

    std::vector<double> inv_depth(static_cast<std::size_t>(n) * n, 0.0);
    Image out(n, n, mode == RenderMode::Mask ? 0.0f : kBackground);

    for (const auto& tri : mesh.triangles) {
        const auto& a = proj[tri[0]];
        const auto& b = proj[tri[1]];
        const auto& c = proj[tri[2]];
        const double area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
        if (area == 0.0) continue;

        float shade = 1.0f;
        if (mode == RenderMode::Shaded) {
            const Vec3& p0 = mesh.vertices[tri[0]];
            const Vec3 nrm = (mesh.vertices[tri[1]] - p0).cross(mesh.vertices[tri[2]] - p0).normalized();
            shade = static_cast<float>(0.1 + 0.8 * std::abs(nrm.dot(vt.forward)));
        }

        const int x0 = std::max(0, static_cast<int>(std::floor(std::min({a.x(), b.x(), c.x()}))));
        const int x1 = std::min(n - 1, static_cast<int>(std::ceil(std::max({a.x(), b.x(), c.x()}))));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min({a.y(), b.y(), c.y()}))));
        const int y1 = std::min(n - 1, static_cast<int>(std::ceil(std::max({a.y(), b.y(), c.y()}))));
        for (int y = y0; y <= y1; ++y) {
            const double py = y + 0.5;
            for (int x = x0; x <= x1; ++x) {
                const double px = x + 0.5;
                double w0 = (c.x() - b.x()) * (py - b.y()) - (c.y() - b.y()) * (px - b.x());
                double w1 = (a.x() - c.x()) * (py - c.y()) - (a.y() - c.y()) * (px - c.x());
                double w2 = (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
                if (area < 0) w0 = -w0, w1 = -w1, w2 = -w2;
                if (w0 < 0 || w1 < 0 || w2 < 0) continue;
                const double sum = std::abs(area);
                const double iz = (w0 / a.z() + w1 / b.z() + w2 / c.z()) / sum;
                auto& depth = inv_depth[static_cast<std::size_t>(y) * n + x];
                if (iz <= depth) continue;
                depth = iz;
                out.at(x, y) = mode == RenderMode::Mask ? 1.0f : shade;
            }
        }
    }
    return out;
}

/// Sobel gradient magnitude with non-maximum suppression along the dominant
/// gradient axis, thresholded at 0.15 of the maximum magnitude. Output in {0,1}.
inline Image edge_map(const Image& img) {
    const int w = img.width, h = img.height;
    auto px = [&](int x, int y) {
        return static_cast<double>(img.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)));
    };
    std::vector<double> mag(img.data.size()), gx(img.data.size()), gy(img.data.size());
    double max_mag = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dx = (px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)) -
                              (px(x - 1, y - 1) + 2 * px(x - 1, y) + px(x - 1, y + 1));
            const double dy = (px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)) -
                              (px(x - 1, y - 1) + 2 * px(x, y - 1) + px(x + 1, y - 1));
            const auto i = static_cast<std::size_t>(y) * w + x;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = std::hypot(dx, dy);
            max_mag = std::max(max_mag, mag[i]);
        }
    Image out(w, h, 0.0f);
    if (max_mag == 0.0) return out;
    const double thresh = 0.15 * max_mag;
    auto m = [&](int x, int y) {
        if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
        return mag[static_cast<std::size_t>(y) * w + x];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto i = static_cast<std::size_t>(y) * w + x;
            if (mag[i] < thresh) continue;
            const bool horizontal = std::abs(gx[i]) >= std::abs(gy[i]);
            const double before = horizontal ? m(x - 1, y) : m(x, y - 1);
            const double after = horizontal ? m(x + 1, y) : m(x, y + 1);
            // Ties resolve toward the later pixel so an ideal step gives one column.
            if (mag[i] >= before && mag[i] > after) out.at(x, y) = 1.0f;
        }
    return out;
}

/// Foreground mask of a shaded render (anything darker than the background).
inline Image mask_of(const Image& shaded) {
    Image out(shaded.width, shaded.height, 0.0f);
    for (std::size_t i = 0; i < shaded.data.size(); ++i) out.data[i] = shaded.data[i] < kBackground ? 1.0f : 0.0f;
    return out;
}

// ---- augmentation ---------------------------------------------------------

/// Ranges and switches for image augmentation. Each enabled op draws its
/// amount uniformly from its range.
struct AugmentSpec {
    bool jitter = false;
    double brightness_min = -0.1, brightness_max = 0.1;
    double contrast_min = 0.9, contrast_max = 1.1;
    bool flip = false;
    bool crop = false;
    double crop_scale_min = 0.85, crop_scale_max = 1.0;
    bool to_mask = false;
    bool to_edges = false;
};

enum class Replace { None, Mask, Edges };

/// The concrete draw applied to one image.
struct AugmentRecord {
    double brightness = 0.0;
    double contrast = 1.0;
    bool flip = false;
    double crop_scale = 1.0;
    double crop_x = 0.0, crop_y = 0.0; ///< offset as a fraction of the free margin
    Replace replace = Replace::None;

    bool operator==(const AugmentRecord&) const = default;
};

inline AugmentRecord draw_augment(const AugmentSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    AugmentRecord r;
    if (spec.jitter) {
        r.brightness = rng.uniform(spec.brightness_min, spec.brightness_max);
        r.contrast = rng.uniform(spec.contrast_min, spec.contrast_max);
    }
    if (spec.flip) r.flip = true;
    if (spec.crop) {
        r.crop_scale = rng.uniform(spec.crop_scale_min, spec.crop_scale_max);
        r.crop_x = rng.uniform();
        r.crop_y = rng.uniform();
    }
    if (spec.to_mask)
        r.replace = Replace::Mask;
    else if (spec.to_edges)
        r.replace = Replace::Edges;
    return r;
}

namespace detail {

inline Image flip_horizontal(const Image& img) {
    Image out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
    return out;
}

/// Crop a square window of side scale*size and resample it bilinearly to full size.
inline Image crop_resize(const Image& img, double scale, double fx, double fy) {
    if (scale >= 1.0) return img;
    const double cw = scale * img.width, ch = scale * img.height;
    const double ox = fx * (img.width - cw), oy = fy * (img.height - ch);
    Image out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double sx = std::clamp(ox + (x + 0.5) * scale - 0.5, 0.0, img.width - 1.0);
            const double sy = std::clamp(oy + (y + 0.5) * scale - 0.5, 0.0, img.height - 1.0);
            const int ix = std::min(static_cast<int>(sx), img.width - 2);
            const int iy = std::min(static_cast<int>(sy), img.height - 2);
            const double tx = sx - ix, ty = sy - iy;
            const double v = (1 - tx) * (1 - ty) * img.at(ix, iy) + tx * (1 - ty) * img.at(ix + 1, iy) +
                             (1 - tx) * ty * img.at(ix, iy + 1) + tx * ty * img.at(ix + 1, iy + 1);
            out.at(x, y) = static_cast<float>(v);
        }
    return out;
}

} // namespace detail

/// Geometric ops (flip, crop) first; then either replacement by mask/edges of
/// the geometrically-augmented image, or brightness/contrast jitter.
inline Image apply_augment(const Image& img, const AugmentRecord& r) {
    Image out = r.flip ? detail::flip_horizontal(img) : img;
    out = detail::crop_resize(out, r.crop_scale, r.crop_x, r.crop_y);
    switch (r.replace) {
    case Replace::Mask: return mask_of(out);
    case Replace::Edges: return edge_map(out);
    case Replace::None: break;
    }
    if (r.brightness != 0.0 || r.contrast != 1.0)
        for (auto& v : out.data)
            v = static_cast<float>(std::clamp((static_cast<double>(v) - 0.5) * r.contrast + 0.5 + r.brightness, 0.0, 1.0));
    return out;
}

inline Image augment(const Image& img, const AugmentSpec& spec, std::uint64_t seed) {
    return apply_augment(img, draw_augment(spec, seed));
}

/// Intersection over union of two {0,1} masks.
inline double silhouette_iou(const Image& a, const Image& b) {
    if (a.data.size() != b.data.size()) throw InvalidInput("IoU of differently sized masks");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] > 0.5f, pb = b.data[i] > 0.5f;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- PGM (P5, 8-bit) -------------------------------------------------------

inline void write_pgm(std::ostream& os, const Image& img) {
    os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    for (float v : img.data) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
}

inline std::string pgm_bytes(const Image& img) {
    std::ostringstream os;
    write_pgm(os, img);
    return os.str();
}

inline Image read_pgm(std::istream& is) {
    auto token = [&]() {
        std::string t;
        while (is) {
            int c = is.peek();
            if (c == '#') {
                std::string skip;
                std::getline(is, skip);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
        is >> t;
        return t;
    };
    if (token() != "P5") throw FormatError("not a binary PGM (P5) image");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::exception&) {
        throw FormatError("malformed PGM header");
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw FormatError("unsupported PGM dimensions or depth");
    is.get();
    Image img(w, h);
    std::string buf(static_cast<std::size_t>(w) * h, '\0');
    if (!is.read(buf.data(), static_cast<std::streamsize>(buf.size()))) throw FormatError("truncated PGM data");
    for (std::size_t i = 0; i < buf.size(); ++i)
        img.data[i] = static_cast<float>(static_cast<unsigned char>(buf[i])) / static_cast<float>(maxval);
    return img;
}

inline Image load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    return read_pgm(is);
}

inline void save_pgm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    write_pgm(os, img);
}

} // namespace dipcg
