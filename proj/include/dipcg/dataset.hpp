#pragma once

#include "dipcg/canon.hpp"
#include "dipcg/condition.hpp"
#include "dipcg/generators.hpp"
#include "dipcg/hash.hpp"
#include "dipcg/render.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace dipcg {

enum class Split { Train, Val };

struct DatasetItem {
    CanonVector x;
    Image image;
    AugmentRecord augment; ///< identity at build time; augmentation happens per batch
    Camera camera;
};

/// Image/parameter pairs for one generator. Canonical vectors are stored, not
/// raw parameters.
struct Dataset {
    std::string generator_id;
    std::vector<DatasetItem> items;
    std::vector<Split> split;

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i] == s) out.push_back(i);
        return out;
    }

    int image_size() const { return items.empty() ? 0 : items.front().image.width; }
};

/// Optional restrictions on dataset synthesis.
struct DatasetOptions {
    std::vector<Camera> cameras; ///< empty means camera_grid()
    /// When set, only parameters flagged in `free_params` are sampled; the rest
    /// keep the values of `base`.
    std::optional<ParamVector> base;
    std::vector<bool> free_params;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace detail

/// 90/10 train/val assignment: items are shuffled with a seed derived from n,
/// and every tenth position of the shuffled order is held out.
inline std::vector<Split> default_split(std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(detail::mix_seed(0x5eedULL, n));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    std::vector<Split> split(n, Split::Train);
    for (std::size_t pos = 0; pos < n; ++pos)
        if (pos % 10 == 9) split[order[pos]] = Split::Val;
    return split;
}

/// Parameters for item `index` of a dataset built with `seed`.
inline ParamVector dataset_params(const GeneratorSchema& s, std::uint64_t seed, std::size_t index,
                                  const DatasetOptions& opt = {}) {
    ParamVector p = sample_params(s, detail::mix_seed(seed, 2 * index));
    if (opt.base) {
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i >= opt.free_params.size() || !opt.free_params[i]) p.values[i] = opt.base->values[i];
    }
    return p;
}

inline Dataset build_dataset(const std::string& generator_id, std::size_t n_items, std::uint64_t seed,
                             int image_size = 64, const DatasetOptions& opt = {}) {
    if (n_items < 10) throw InvalidInput("a dataset needs at least 10 items");
    const auto& s = schema(generator_id);
    const auto cameras = opt.cameras.empty() ? camera_grid(image_size) : opt.cameras;
    Dataset ds;
    ds.generator_id = generator_id;
    ds.items.resize(n_items);
    for (std::size_t i = 0; i < n_items; ++i) {
        try {
            const ParamVector p = dataset_params(s, seed, i, opt);
            Rng cam_rng(detail::mix_seed(seed, 2 * i + 1));
            Camera cam = cameras[cam_rng.index(cameras.size())];
            cam.image_size = image_size;
            auto& item = ds.items[i];
            item.x = canonicalize(s, p);
            item.image = rasterize(generate(s, p), cam, RenderMode::Shaded);
            item.camera = cam;
        } catch (const Error& e) {
            throw Error("dataset item " + std::to_string(i) + ": " + e.what());
        }
    }
    ds.split = default_split(n_items);
    return ds;
}

// ---- DIPD files -------------------------------------------------------------
// "DIPD" | version u32 | n u32 | N u32 | img_w u32 | img_h u32 |
// per item: N float32 canon values, img_w*img_h float32 pixels, 3 float32 camera
// (azimuth, elevation, distance factor). Little-endian.

constexpr std::uint32_t kDatasetVersion = 1;

/// The generator is identified by its parameter count, which is unique.
inline std::string generator_for_length(std::size_t n) {
    for (const auto& id : list_generators())
        if (schema(id).size() == n) return id;
    throw FormatError("no generator has " + std::to_string(n) + " parameters");
}

inline std::string encode_dataset(const Dataset& ds) {
    const std::size_t n_params = schema(ds.generator_id).size();
    const int w = ds.image_size(), h = ds.items.empty() ? 0 : ds.items.front().image.height;
    std::string out = "DIPD";
    out.reserve(24 + ds.items.size() * (n_params + static_cast<std::size_t>(w) * h + 3) * 4);
    detail::put_u32(out, kDatasetVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ds.items.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(n_params));
    detail::put_u32(out, static_cast<std::uint32_t>(w));
    detail::put_u32(out, static_cast<std::uint32_t>(h));
    for (const auto& item : ds.items) {
        if (item.image.width != w || item.image.height != h) throw InvalidInput("dataset images must share one size");
        for (double v : item.x.x) detail::put_f32(out, static_cast<float>(v));
        for (float v : item.image.data) detail::put_f32(out, v);
        detail::put_f32(out, static_cast<float>(item.camera.azimuth_deg));
        detail::put_f32(out, static_cast<float>(item.camera.elevation_deg));
        detail::put_f32(out, static_cast<float>(item.camera.distance_factor));
    }
    return out;
}

inline Dataset decode_dataset(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || r.take(4) != "DIPD") throw FormatError("bad dataset magic");
    if (r.u32() != kDatasetVersion) throw FormatError("unsupported dataset version");
    const std::uint32_t n = r.u32(), n_params = r.u32(), w = r.u32(), h = r.u32();
    if (w == 0 || h == 0) throw FormatError("dataset declares empty images");
    const std::size_t per_item = (static_cast<std::size_t>(n_params) + static_cast<std::size_t>(w) * h + 3) * 4;
    if (r.remaining() != per_item * n) throw FormatError("dataset payload size does not match its header");
    Dataset ds;
    ds.generator_id = generator_for_length(n_params);
    ds.items.resize(n);
    for (auto& item : ds.items) {
        item.x.generator_id = ds.generator_id;
        item.x.x.resize(n_params);
        for (auto& v : item.x.x) v = r.f32();
        item.image = Image(static_cast<int>(w), static_cast<int>(h));
        for (auto& v : item.image.data) v = r.f32();
        item.camera.azimuth_deg = r.f32();
        item.camera.elevation_deg = r.f32();
        item.camera.distance_factor = r.f32();
        item.camera.image_size = static_cast<int>(w);
    }
    ds.split = default_split(n);
    return ds;
}

inline std::uint64_t content_hash(const Dataset& ds) { return fnv1a(encode_dataset(ds)); }

inline void save_dataset(const std::string& path, const Dataset& ds) { detail::write_file(path, encode_dataset(ds)); }

inline Dataset load_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }

} // namespace dipcg
