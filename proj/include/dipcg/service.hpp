#pragma once

#include "dipcg/checkpoint.hpp"
#include "dipcg/generators.hpp"
#include "dipcg/hash.hpp"
#include "dipcg/pipeline.hpp"
#include "dipcg/render.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <set>
#include <sstream>
#include <string>

namespace dipcg {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::map<std::string, std::string> checkpoints; ///< generator id -> checkpoint path
    int image_size = 64;
    std::size_t max_body_bytes = 4u << 20;
    int max_k = 64;
    int max_concurrent_inversions = 2;

    void check() const {
        if (port < 0 || port > 65535) throw InvalidInput("port must be in [0, 65535]");
        if (image_size < 32) throw InvalidInput("image_size must be at least 32");
        if (max_body_bytes == 0 || max_k < 1 || max_concurrent_inversions < 1)
            throw InvalidInput("request limits must be positive");
        for (const auto& [id, path] : checkpoints) {
            schema(id);
            if (path.empty()) throw InvalidInput("empty checkpoint path for '" + id + "'");
        }
    }
};

/// Accepts {"bind": "host:port"} or separate "host"/"port", and checkpoints as
/// a list of {"generator_id", "path"}; a generator may appear only once.
inline ServiceConfig service_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"bind", "host", "port", "checkpoints", "image_size", "limits"};
    if (!j.is_object()) throw InvalidInput("service config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw InvalidInput("unknown service config key '" + k + "'");
    ServiceConfig c;
    try {
        if (j.contains("bind")) {
            const std::string bind = j.at("bind").get<std::string>();
            const auto colon = bind.rfind(':');
            if (colon == std::string::npos) throw InvalidInput("bind must look like host:port");
            c.host = bind.substr(0, colon);
            c.port = std::stoi(bind.substr(colon + 1));
        }
        c.host = j.value("host", c.host);
        c.port = j.value("port", c.port);
        c.image_size = j.value("image_size", c.image_size);
        if (j.contains("limits")) {
            const auto& l = j.at("limits");
            c.max_body_bytes = l.value("max_body_bytes", c.max_body_bytes);
            c.max_k = l.value("max_k", c.max_k);
            c.max_concurrent_inversions = l.value("max_concurrent_inversions", c.max_concurrent_inversions);
        }
        for (const auto& e : j.value("checkpoints", nlohmann::json::array())) {
            const std::string id = e.at("generator_id").get<std::string>();
            if (c.checkpoints.count(id)) throw InvalidInput("more than one checkpoint for generator '" + id + "'");
            c.checkpoints[id] = e.at("path").get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed service config: ") + e.what());
    } catch (const std::logic_error&) {
        throw InvalidInput("bind port is not a number");
    }
    c.check();
    return c;
}

/// DIPCG_BIND=host:port overrides the configured bind address.
inline void apply_bind_override(ServiceConfig& c, const char* value) {
    if (!value || !*value) return;
    const std::string bind(value);
    const auto colon = bind.rfind(':');
    if (colon == std::string::npos) throw InvalidInput("DIPCG_BIND must look like host:port");
    c.host = bind.substr(0, colon);
    try {
        c.port = std::stoi(bind.substr(colon + 1));
    } catch (const std::logic_error&) {
        throw InvalidInput("DIPCG_BIND port is not a number");
    }
    c.check();
}

inline std::string base64_encode(const std::string& bytes) { return httplib::detail::base64_encode(bytes); }

inline std::string base64_decode(std::string_view text) {
    auto value = [](char ch) -> int {
        if (ch >= 'A' && ch <= 'Z') return ch - 'A';
        if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
        if (ch >= '0' && ch <= '9') return ch - '0' + 52;
        if (ch == '+') return 62;
        if (ch == '/') return 63;
        return -1;
    };
    std::string out;
    std::uint32_t acc = 0;
    int bits = 0;
    std::size_t i = 0;
    for (; i < text.size() && text[i] != '='; ++i) {
        const int v = value(text[i]);
        if (v < 0) throw InvalidInput("invalid base64 character");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<char>((acc >> bits) & 0xff));
        }
    }
    for (; i < text.size(); ++i)
        if (text[i] != '=') throw InvalidInput("invalid base64 padding");
    return out;
}

inline nlohmann::json mesh_to_json(const TriangleMesh& m) {
    nlohmann::json v = nlohmann::json::array(), t = nlohmann::json::array();
    for (const auto& p : m.vertices) v.push_back({p.x(), p.y(), p.z()});
    for (const auto& tri : m.triangles) t.push_back({tri[0], tri[1], tri[2]});
    return {{"vertices", v}, {"triangles", t}};
}

struct ServiceResponse {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";

    /// Deterministic digest of the body, sent as X-Content-Hash.
    std::string hash() const { return hex64(fnv1a(body)); }
};

/// Stateless request handler. Weights and schemas are loaded once and shared
/// read-only between concurrent requests.
class Service {
public:
    explicit Service(ServiceConfig config) : config_(std::move(config)), invert_slots_(config_.max_concurrent_inversions) {
        config_.check();
        for (const auto& [id, path] : config_.checkpoints) {
            auto ck = std::make_shared<const Checkpoint>(load_checkpoint(path));
            if (ck->generator_id != id)
                throw InvalidInput("checkpoint " + path + " is for '" + ck->generator_id + "', not '" + id + "'");
            models_[id] = std::move(ck);
        }
    }

    const ServiceConfig& config() const { return config_; }

    ServiceResponse handle(const std::string& method, const std::string& path, const std::string& body) {
        try {
            if (body.size() > config_.max_body_bytes) return error(413, "request body exceeds " + std::to_string(config_.max_body_bytes) + " bytes");
            if (method == "GET" && path == "/api/generators") return ok(nlohmann::json(list_generators()));
            const std::string prefix = "/api/generators/";
            if (path.rfind(prefix, 0) == 0) {
                const std::string rest = path.substr(prefix.size());
                const auto slash = rest.find('/');
                if (slash != std::string::npos) {
                    const std::string id = rest.substr(0, slash), action = rest.substr(slash + 1);
                    if (method == "GET" && action == "schema") return ok(schema_to_json(schema(id)));
                    if (method == "POST" && action == "mesh") return mesh(id, parse(body));
                }
            }
            if (method == "POST" && path == "/api/invert") return invert_request(parse(body));
            if (method == "POST" && path == "/api/render") return render_request(parse(body));
            return error(404, "no route for " + method + " " + path);
        } catch (const NotFound& e) {
            return error(404, e.what());
        } catch (const InvalidParam& e) {
            return error(422, e.what(), e.param());
        } catch (const LimitExceeded& e) {
            return error(413, e.what());
        } catch (const BadRequest& e) {
            return error(400, e.what());
        } catch (const Unavailable& e) {
            return error(503, e.what());
        } catch (const Error& e) {
            return error(422, e.what());
        } catch (const std::exception& e) {
            return error(500, e.what());
        }
    }

private:
    struct LimitExceeded : Error {
        using Error::Error;
    };
    struct BadRequest : Error {
        using Error::Error;
    };
    struct Unavailable : Error {
        using Error::Error;
    };

    static ServiceResponse ok(const nlohmann::json& j) { return {200, j.dump()}; }

    static ServiceResponse error(int status, const std::string& message, const std::string& field = {}) {
        nlohmann::json j = {{"error", message}};
        if (!field.empty()) j["field"] = field;
        return {status, j.dump()};
    }

    static nlohmann::json parse(const std::string& body) {
        auto j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded()) throw BadRequest("request body is not valid JSON");
        if (!j.is_object()) throw BadRequest("request body must be a JSON object");
        return j;
    }

    static std::string required_string(const nlohmann::json& j, const char* key) {
        if (!j.contains(key) || !j[key].is_string()) throw InvalidParam(key, std::string(key) + " must be a string");
        return j[key].get<std::string>();
    }

    ServiceResponse mesh(const std::string& id, const nlohmann::json& params) {
        const auto& s = schema(id);
        return ok(mesh_to_json(generate(s, params_from_json(s, params))));
    }

    ServiceResponse invert_request(const nlohmann::json& j) {
        const std::string id = required_string(j, "generator_id");
        const auto& s = schema(id);
        int k = 1;
        if (j.contains("k")) {
            if (!j["k"].is_number_integer() || j["k"].get<int>() < 1) throw InvalidParam("k", "k must be a positive integer");
            k = j["k"].get<int>();
        }
        if (k > config_.max_k) throw LimitExceeded("k exceeds the limit of " + std::to_string(config_.max_k));
        std::uint64_t seed = 0;
        if (j.contains("seed")) {
            if (!j["seed"].is_number_unsigned()) throw InvalidParam("seed", "seed must be a non-negative integer");
            seed = j["seed"].get<std::uint64_t>();
        }
        const auto model = models_.find(id);
        if (model == models_.end()) throw Unavailable("no checkpoint loaded for generator '" + id + "'");
        Image img;
        try {
            std::istringstream is(base64_decode(required_string(j, "image")));
            img = read_pgm(is);
        } catch (const InvalidParam&) {
            throw;
        } catch (const Error& e) {
            throw InvalidParam("image", std::string("image: ") + e.what());
        }
        InversionResult res;
        try {
            invert_slots_.acquire();
            struct Release {
                std::counting_semaphore<>& s;
                ~Release() { s.release(); }
            } release{invert_slots_};
            res = invert(img, *model->second, static_cast<std::size_t>(k), seed);
        } catch (const InvalidInput& e) {
            throw InvalidParam("image", std::string("image: ") + e.what());
        }
        nlohmann::json cands = nlohmann::json::array();
        for (std::size_t r = 0; r < res.candidates.size(); ++r)
            cands.push_back({{"rank", r + 1},
                             {"score", res.candidates[r].score},
                             {"params", params_to_json(s, res.candidates[r].params)}});
        return ok({{"generator_id", id}, {"candidates", cands}, {"generator_calls", res.generator_calls}});
    }

    ServiceResponse render_request(const nlohmann::json& j) {
        const std::string id = required_string(j, "generator_id");
        const auto& s = schema(id);
        const ParamVector p = params_from_json(s, j.value("params", nlohmann::json::object()));
        Camera cam = default_camera(config_.image_size);
        if (j.contains("camera")) {
            const auto& c = j["camera"];
            if (!c.is_object()) throw InvalidParam("camera", "camera must be an object");
            try {
                cam.azimuth_deg = c.value("azimuth", cam.azimuth_deg);
                cam.elevation_deg = c.value("elevation", cam.elevation_deg);
                cam.distance_factor = c.value("distance_factor", cam.distance_factor);
                cam.fov_deg = c.value("fov", cam.fov_deg);
                cam.image_size = c.value("image_size", cam.image_size);
            } catch (const nlohmann::json::exception&) {
                throw InvalidParam("camera", "camera fields must be numbers");
            }
        }
        if (cam.image_size > 1024) throw LimitExceeded("image_size exceeds the limit of 1024");
        const std::string mode = j.value("mode", std::string("shaded"));
        if (mode != "shaded" && mode != "mask") throw InvalidParam("mode", "mode must be 'shaded' or 'mask'");
        Image img;
        try {
            img = rasterize(generate(s, p), cam, mode == "mask" ? RenderMode::Mask : RenderMode::Shaded);
        } catch (const InvalidInput& e) {
            throw InvalidParam("camera", std::string("camera: ") + e.what());
        }
        return ok({{"generator_id", id}, {"width", img.width}, {"height", img.height}, {"image", base64_encode(pgm_bytes(img))}});
    }

    ServiceConfig config_;
    std::map<std::string, std::shared_ptr<const Checkpoint>> models_;
    std::counting_semaphore<> invert_slots_;
};

/// Attach the service's routes to an httplib server.
inline void mount(httplib::Server& server, Service& service) {
    auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
        const ServiceResponse r = service.handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_header("X-Content-Hash", r.hash());
        res.set_content(r.body, r.content_type);
    };
    server.Get(R"(/api/.*)", forward);
    server.Post(R"(/api/.*)", forward);
    server.set_payload_max_length(service.config().max_body_bytes);
}

/// Blocks until the server stops. `on_ready` receives the bound port.
inline void serve(ServiceConfig config, const std::function<void(int)>& on_ready = {}) {
    apply_bind_override(config, std::getenv("DIPCG_BIND"));
    Service service(config);
    httplib::Server server;
    mount(server, service);
    int port = config.port;
    if (port == 0) {
        port = server.bind_to_any_port(config.host);
        if (port < 0) throw Error("cannot bind " + config.host);
    } else if (!server.bind_to_port(config.host, port)) {
        throw Error("cannot bind " + config.host + ":" + std::to_string(port));
    }
    if (on_ready) on_ready(port);
    server.listen_after_bind();
}

} // namespace dipcg
