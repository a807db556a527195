#pragma once

#include "dipcg/eval.hpp"
#include "dipcg/mcmc.hpp"
#include "dipcg/pipeline.hpp"
#include "dipcg/service.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

namespace dipcg {

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path);
    auto j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw InvalidInput(path + " is not valid JSON");
    return j;
}

/// Inline JSON when the argument starts with '{', otherwise a file path.
inline nlohmann::json json_argument(const std::string& arg) {
    if (!arg.empty() && arg.front() == '{') {
        auto j = nlohmann::json::parse(arg, nullptr, false);
        if (j.is_discarded()) throw InvalidInput("--params is not valid JSON");
        return j;
    }
    return read_json_file(arg);
}

inline void print_candidates(std::ostream& out, const GeneratorSchema& s, const InversionResult& r) {
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
        out << "#" << i + 1 << " score " << r.candidates[i].score << "\n";
        out << "  " << params_to_json(s, r.candidates[i].params).dump() << "\n";
    }
}

inline nlohmann::json candidates_json(const GeneratorSchema& s, const InversionResult& r) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t i = 0; i < r.candidates.size(); ++i)
        a.push_back({{"rank", i + 1}, {"score", r.candidates[i].score}, {"params", params_to_json(s, r.candidates[i].params)}});
    return a;
}

} // namespace detail

/// Entry point of the `dipcg` tool. Returns 0 on success, 2 on usage errors
/// and 1 on runtime errors.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Inverse procedural content generation with a parameter-space diffusion model", "dipcg"};
    app.require_subcommand(1);
    app.fallthrough();
    bool as_json = false;
    app.add_flag("--json", as_json, "machine-readable JSON on stdout");

    std::string gen_id, params_arg, out_path, config_path, dataset_path, image_path, ckpt_path, tokens_path,
        trace_path, log_path, resume_path, testset_path;
    std::size_t n_items = 100, k = 1, iters = 1000, n_points = 2048, limit = 0;
    std::uint64_t seed = 0;
    int image_size = 64;

    auto* schema_cmd = app.add_subcommand("schema", "print a generator's parameter schema");
    schema_cmd->add_option("generator", gen_id, "generator id")->required();

    auto* gen_cmd = app.add_subcommand("gen", "generate a mesh and write it as OBJ");
    gen_cmd->add_option("generator", gen_id, "generator id")->required();
    gen_cmd->add_option("--params", params_arg, "parameter JSON (inline or file); defaults when omitted");
    gen_cmd->add_option("--out", out_path, "output OBJ path")->required();

    auto* dataset_cmd = app.add_subcommand("dataset", "synthesize an image/parameter dataset");
    dataset_cmd->add_option("generator", gen_id, "generator id")->required();
    dataset_cmd->add_option("--n", n_items, "number of items")->required();
    dataset_cmd->add_option("--seed", seed, "random seed");
    dataset_cmd->add_option("--image-size", image_size, "image side in pixels");
    dataset_cmd->add_option("--out", out_path, "output dataset path")->required();

    auto* train_cmd = app.add_subcommand("train", "train a denoiser on a dataset");
    train_cmd->add_option("--config", config_path, "training config JSON")->required();
    train_cmd->add_option("--dataset", dataset_path, "dataset file")->required();
    train_cmd->add_option("--out", out_path, "checkpoint path")->required();
    train_cmd->add_option("--log", log_path, "loss log CSV path");
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* invert_cmd = app.add_subcommand("invert", "infer parameters for an image");
    auto* image_opt = invert_cmd->add_option("--image", image_path, "condition image (PGM)");
    auto* tokens_opt = invert_cmd->add_option("--tokens", tokens_path, "external condition tokens (DIPT)");
    image_opt->excludes(tokens_opt);
    invert_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    invert_cmd->add_option("--k", k, "number of samples")->check(CLI::PositiveNumber);
    invert_cmd->add_option("--seed", seed, "sampling seed");
    invert_cmd->add_option("--out", out_path, "write the top-ranked mesh as OBJ");

    auto* mcmc_cmd = app.add_subcommand("mcmc", "fit parameters to an image by Metropolis-Hastings");
    mcmc_cmd->add_option("--image", image_path, "condition image (PGM)")->required();
    mcmc_cmd->add_option("generator", gen_id, "generator id")->required();
    mcmc_cmd->add_option("--iters", iters, "iterations")->check(CLI::PositiveNumber);
    mcmc_cmd->add_option("--seed", seed, "chain seed");
    mcmc_cmd->add_option("--trace", trace_path, "trace CSV path");

    auto* eval_cmd = app.add_subcommand("eval", "score inversions of a test set against ground truth");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    eval_cmd->add_option("--testset", testset_path, "dataset file")->required();
    eval_cmd->add_option("--k", k, "samples per item; the best-scored one is kept")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--seed", seed, "sampling and point-sampling seed");
    eval_cmd->add_option("--points", n_points, "surface samples per mesh")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--limit", limit, "evaluate only the first N items");
    eval_cmd->add_option("--out", out_path, "metrics report JSON path");

    auto* serve_cmd = app.add_subcommand("serve", "run the HTTP service");
    serve_cmd->add_option("--config", config_path, "service config JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (*schema_cmd) {
            const auto j = schema_to_json(schema(gen_id));
            if (as_json) {
                out << j.dump() << "\n";
            } else {
                out << gen_id << " (version " << j["version"].get<int>() << ")\n";
                for (const auto& p : schema(gen_id).params) {
                    out << "  " << std::left << std::setw(20) << p.name;
                    if (p.is_discrete()) {
                        out << "discrete {";
                        for (std::size_t i = 0; i < p.choices.size(); ++i) out << (i ? ", " : "") << p.choices[i];
                        out << "}\n";
                    } else {
                        out << "continuous [" << p.min << ", " << p.max << "]\n";
                    }
                }
            }
        } else if (*gen_cmd) {
            const auto& s = schema(gen_id);
            const ParamVector p = params_arg.empty() ? default_params(s) : params_from_json(s, detail::json_argument(params_arg));
            const TriangleMesh mesh = generate(s, p);
            save_obj(out_path, mesh);
            if (as_json)
                out << nlohmann::json{{"out", out_path},
                                      {"vertices", mesh.vertices.size()},
                                      {"triangles", mesh.triangles.size()},
                                      {"params", params_to_json(s, p)}}
                           .dump()
                    << "\n";
            else
                out << "wrote " << out_path << " (" << mesh.vertices.size() << " vertices, " << mesh.triangles.size()
                    << " triangles)\n";
        } else if (*dataset_cmd) {
            const Dataset ds = build_dataset(gen_id, n_items, seed, image_size);
            save_dataset(out_path, ds);
            const std::string hash = hex64(content_hash(ds));
            if (as_json)
                out << nlohmann::json{{"out", out_path},
                                      {"items", ds.items.size()},
                                      {"train", ds.indices(Split::Train).size()},
                                      {"val", ds.indices(Split::Val).size()},
                                      {"content_hash", hash}}
                           .dump()
                    << "\n";
            else
                out << "wrote " << out_path << " (" << ds.items.size() << " items, hash " << hash << ")\n";
        } else if (*train_cmd) {
            const TrainConfig config = train_config_from_json(detail::read_json_file(config_path));
            const Dataset ds = load_dataset(dataset_path);
            std::ofstream log;
            TrainHooks hooks;
            hooks.checkpoint_path = out_path;
            if (!log_path.empty()) {
                const bool resuming = !resume_path.empty();
                log.open(log_path, resuming ? std::ios::app : std::ios::trunc);
                if (!log) throw Error("cannot open " + log_path);
                hooks.loss_log = &log;
            }
            std::optional<Checkpoint> resume;
            if (!resume_path.empty()) resume = load_checkpoint(resume_path);
            try {
                const TrainResult r = train(config, ds, hooks, resume ? &*resume : nullptr);
                const std::string hash = hex64(checkpoint_hash(r.checkpoint));
                const double last = r.losses.empty() ? 0.0 : r.losses.back();
                if (as_json)
                    out << nlohmann::json{{"out", out_path}, {"steps", r.checkpoint.step}, {"final_loss", last}, {"checkpoint_hash", hash}}
                               .dump()
                        << "\n";
                else
                    out << "trained " << r.checkpoint.step << " steps, final loss " << last << ", wrote " << out_path << "\n";
            } catch (const LastGoodCheckpoint& e) {
                err << "error: " << e.what() << "; last good state saved to " << out_path << "\n";
                return 1;
            }
        } else if (*invert_cmd) {
            if (image_path.empty() == tokens_path.empty()) {
                err << "usage error: give exactly one of --image or --tokens\n";
                return 2;
            }
            const Checkpoint ck = load_checkpoint(ckpt_path);
            const auto& s = schema(ck.generator_id);
            const InversionResult r = image_path.empty() ? invert(load_tokens(tokens_path), ck, k, seed)
                                                         : invert(load_pgm(image_path), ck, k, seed);
            if (!out_path.empty()) save_obj(out_path, generate(s, r.candidates.front().params));
            if (as_json)
                out << nlohmann::json{{"generator_id", ck.generator_id}, {"candidates", detail::candidates_json(s, r)}}.dump()
                    << "\n";
            else
                detail::print_candidates(out, s, r);
        } else if (*mcmc_cmd) {
            const auto& s = schema(gen_id);
            const McmcResult r = mh_run(load_pgm(image_path), gen_id, iters, seed, mask_feature_fn());
            if (!trace_path.empty()) {
                std::ofstream t(trace_path);
                if (!t) throw Error("cannot open " + trace_path);
                write_trace_csv(t, r.trace);
            }
            if (as_json)
                out << nlohmann::json{{"generator_id", gen_id},
                                      {"best_score", r.best_score},
                                      {"score_calls", r.score_calls},
                                      {"params", params_to_json(s, r.best)}}
                           .dump()
                    << "\n";
            else
                out << "best score " << r.best_score << " after " << r.score_calls << " evaluations\n  "
                    << params_to_json(s, r.best).dump() << "\n";
        } else if (*eval_cmd) {
            const Checkpoint ck = load_checkpoint(ckpt_path);
            const Dataset ds = load_dataset(testset_path);
            if (ds.generator_id != ck.generator_id)
                throw InvalidInput("test set is for '" + ds.generator_id + "', checkpoint for '" + ck.generator_id + "'");
            const auto& s = schema(ck.generator_id);
            const std::size_t n = limit > 0 ? std::min(limit, ds.items.size()) : ds.items.size();
            std::vector<ParamVector> truth;
            for (std::size_t i = 0; i < n; ++i) truth.push_back(decanonicalize(s, ds.items[i].x));
            EvalOptions opt;
            opt.n_points = n_points;
            opt.seed = seed;
            const auto rep = evaluate(ck.generator_id, truth, [&](std::size_t i) {
                return invert(ds.items[i].image, ck, k, detail::mix_seed(seed, i)).candidates.front().params;
            }, opt);
            const auto j = to_json(rep);
            if (!out_path.empty()) {
                std::ofstream f(out_path);
                if (!f) throw Error("cannot open " + out_path);
                f << j.dump(2) << "\n";
            }
            if (as_json) {
                out << j.dump() << "\n";
            } else {
                out << "items " << rep.items.size() << " (failures " << rep.failures.size() << ")\n";
                out << "model     CD " << rep.mean.cd << "  EMD " << rep.mean.emd << "  F-Score " << rep.mean.fscore << "\n";
                out << "baseline  CD " << rep.baseline.cd << "  EMD " << rep.baseline.emd << "  F-Score " << rep.baseline.fscore
                    << "\n";
            }
        } else if (*serve_cmd) {
            serve(service_config_from_json(detail::read_json_file(config_path)), [&](int port) {
                err << "listening on port " << port << "\n";
            });
        }
    } catch (const std::exception& e) {
        if (as_json)
            out << nlohmann::json{{"error", e.what()}}.dump() << "\n";
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace dipcg
