#pragma once

#include "dipcg/condition.hpp"
#include "dipcg/denoiser.hpp"
#include "dipcg/diffusion.hpp"
#include "dipcg/hash.hpp"

#include <json.hpp>

#include <cstdio>
#include <string>

namespace dipcg {

/// Everything needed to resume training or run inference: loading requires no
/// outside configuration.
struct Checkpoint {
    std::string generator_id;
    DenoiserConfig config;
    int schedule_T = 1000;
    double beta_min = 1e-4, beta_max = 0.02;
    nn::ParamSet<float> weights;
    nn::ParamSet<float> adam_m, adam_v; ///< empty when no optimizer state was saved
    std::int64_t step = 0;
    std::string rng_state;
    nlohmann::json train_config = nlohmann::json::object();

    DiffusionSchedule schedule() const { return build_schedule(schedule_T, beta_min, beta_max); }
};

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(std::string& out, const std::string& name, const nn::Mat<float>& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 2);
    put_u32(out, static_cast<std::uint32_t>(t.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) put_f32(out, t.data()[i]);
}

inline void put_u64(std::string& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffULL));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline std::string checkpoint_body(const Checkpoint& c) {
    nlohmann::json meta = {{"generator_id", c.generator_id},
                           {"denoiser", to_json(c.config)},
                           {"schedule", {{"T", c.schedule_T}, {"beta_min", c.beta_min}, {"beta_max", c.beta_max}}},
                           {"step", c.step},
                           {"rng_state", c.rng_state},
                           {"train", c.train_config}};
    const std::string blob = meta.dump();
    std::string out = "DIPC";
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(blob.size()));
    out += blob;
    const bool has_opt = !c.adam_m.tensors.empty();
    put_u32(out, static_cast<std::uint32_t>(c.weights.size() * (has_opt ? 3 : 1)));
    for (std::size_t i = 0; i < c.weights.size(); ++i) put_tensor(out, c.weights.names[i], c.weights[i]);
    if (has_opt) {
        for (std::size_t i = 0; i < c.adam_m.size(); ++i) put_tensor(out, "adam.m/" + c.adam_m.names[i], c.adam_m[i]);
        for (std::size_t i = 0; i < c.adam_v.size(); ++i) put_tensor(out, "adam.v/" + c.adam_v.names[i], c.adam_v[i]);
    }
    return out;
}

} // namespace detail

/// FNV-1a over the serialized checkpoint (configuration blob and every tensor byte).
inline std::uint64_t checkpoint_hash(const Checkpoint& c) { return fnv1a(detail::checkpoint_body(c)); }

inline std::string encode_checkpoint(const Checkpoint& c) {
    std::string out = detail::checkpoint_body(c);
    detail::put_u64(out, fnv1a(out));
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 4) != "DIPC") throw FormatError("bad checkpoint magic");
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    detail::ByteReader tail(bytes.substr(bytes.size() - 8));
    if (tail.u64() != fnv1a(body)) throw FormatError("checkpoint hash mismatch (file is corrupt)");

    detail::ByteReader r(body);
    r.take(4);
    if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
    const std::uint32_t blob_len = r.u32();
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.take(blob_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    Checkpoint c;
    try {
        c.generator_id = meta.at("generator_id").get<std::string>();
        c.config = denoiser_config_from_json(meta.at("denoiser"));
        c.schedule_T = meta.at("schedule").at("T").get<int>();
        c.beta_min = meta.at("schedule").at("beta_min").get<double>();
        c.beta_max = meta.at("schedule").at("beta_max").get<double>();
        c.step = meta.at("step").get<std::int64_t>();
        c.rng_state = meta.at("rng_state").get<std::string>();
        c.train_config = meta.value("train", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is incomplete: ") + e.what());
    }

    const std::uint32_t count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name(r.take(r.u32()));
        if (r.u32() != 2) throw FormatError("checkpoint tensor " + name + " is not rank 2");
        const std::uint32_t rows = r.u32(), cols = r.u32();
        nn::Mat<float> t(rows, cols);
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = r.f32();
        nn::ParamSet<float>* target = &c.weights;
        std::string key = name;
        if (name.rfind("adam.m/", 0) == 0) {
            target = &c.adam_m;
            key = name.substr(7);
        } else if (name.rfind("adam.v/", 0) == 0) {
            target = &c.adam_v;
            key = name.substr(7);
        }
        target->names.push_back(key);
        target->tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint tensors");

    // The tensor table must match the layout implied by the configuration.
    try {
        c.config.check();
    } catch (const InvalidInput& e) {
        throw FormatError(std::string("checkpoint configuration is invalid: ") + e.what());
    }
    nn::ParamSet<float> expect;
    build_layout(c.config, expect);
    auto matches = [&](const nn::ParamSet<float>& p) {
        if (p.size() != expect.size()) return false;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p.names[i] != expect.names[i] || p[i].rows() != expect[i].rows() || p[i].cols() != expect[i].cols())
                return false;
        return true;
    };
    if (!matches(c.weights)) throw FormatError("checkpoint tensors do not match its configuration");
    if (!c.adam_m.tensors.empty() && (!matches(c.adam_m) || !matches(c.adam_v)))
        throw FormatError("checkpoint optimizer state does not match its configuration");
    return c;
}

/// Written through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    const std::string tmp = path + ".tmp";
    detail::write_file(tmp, encode_checkpoint(c));
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

} // namespace dipcg
