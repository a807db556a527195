#include "dipcg/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>

using namespace dipcg;

namespace {

constexpr int kImage = 32;

DenoiserConfig tiny_model(const std::string& gen, CondMode mode = CondMode::Patch) {
    DenoiserConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.n_param_tokens = static_cast<int>(schema(gen).size());
    c.cond_width = 16;
    c.cond_tokens = 4;
    c.time_freq = 8;
    c.mode = mode;
    c.patch = 8;
    c.image_size = kImage;
    return c;
}

TrainConfig tiny_train(const std::string& gen, int steps) {
    TrainConfig c;
    c.denoiser = tiny_model(gen);
    c.steps = steps;
    c.batch_size = 8;
    c.lr = 1e-3;
    c.warmup_steps = 2;
    c.seed = 11;
    return c;
}

const Dataset& table_dataset() {
    static const Dataset ds = build_dataset("table", 20, 5, kImage);
    return ds;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("dipcg_test_" + name)).string();
}

} // namespace

TEST(Dataset, RebuildGivesIdenticalHash) {
    const auto a = build_dataset("vase", 12, 3, kImage);
    const auto b = build_dataset("vase", 12, 3, kImage);
    EXPECT_EQ(content_hash(a), content_hash(b));
    EXPECT_NE(content_hash(a), content_hash(build_dataset("vase", 12, 4, kImage)));
}

TEST(Dataset, ItemsAreCanonicalAndRendered) {
    const auto& ds = table_dataset();
    const auto& s = schema("table");
    ASSERT_EQ(ds.items.size(), 20u);
    const auto grid = camera_grid(kImage);
    for (const auto& item : ds.items) {
        ASSERT_EQ(item.x.x.size(), s.size());
        for (double v : item.x.x) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
        EXPECT_EQ(item.image.width, kImage);
        // The stored image is the render of the decoded parameters from the stored camera.
        EXPECT_EQ(item.image, rasterize(generate(s, decanonicalize(s, item.x)), item.camera, RenderMode::Shaded));
        bool on_grid = false;
        for (const auto& c : grid)
            on_grid = on_grid || (c.azimuth_deg == item.camera.azimuth_deg &&
                                  c.elevation_deg == item.camera.elevation_deg &&
                                  c.distance_factor == item.camera.distance_factor);
        EXPECT_TRUE(on_grid);
    }
    EXPECT_THROW(build_dataset("table", 9, 1, kImage), InvalidInput);
    EXPECT_THROW(build_dataset("sofa", 20, 1, kImage), NotFound);
}

TEST(Dataset, CameraChoiceIsUniformOverTheGrid) {
    const std::size_t n = 1200;
    const auto ds = build_dataset("table", n, 21, kImage);
    std::map<std::tuple<double, double, double>, int> counts;
    for (const auto& item : ds.items)
        ++counts[{item.camera.azimuth_deg, item.camera.elevation_deg, item.camera.distance_factor}];
    ASSERT_EQ(counts.size(), 12u);
    // 100 expected per camera, binomial sd about 9.6.
    for (const auto& [cam, c] : counts) {
        EXPECT_GT(c, 60);
        EXPECT_LT(c, 140);
    }
}

TEST(Dataset, SplitHoldsOutOneInTen) {
    for (std::size_t n : {10u, 100u, 2200u}) {
        const auto split = default_split(n);
        std::size_t val = 0;
        for (auto s : split) val += s == Split::Val;
        EXPECT_EQ(val, n / 10);
        EXPECT_EQ(split, default_split(n));
    }
}

TEST(Dataset, FixedParametersKeepBaseValues) {
    const auto& s = schema("table");
    DatasetOptions opt;
    opt.base = default_params(s);
    opt.free_params.assign(s.size(), false);
    opt.free_params[0] = true;
    const auto ds = build_dataset("table", 10, 2, kImage, opt);
    const auto base = canonicalize(s, *opt.base);
    bool moved = false;
    for (const auto& item : ds.items) {
        for (std::size_t i = 1; i < s.size(); ++i) EXPECT_NEAR(item.x.x[i], base.x[i], 1e-12);
        moved = moved || std::abs(item.x.x[0] - base.x[0]) > 1e-6;
    }
    EXPECT_TRUE(moved);
}

TEST(Dataset, FileRoundTrip) {
    const auto& ds = table_dataset();
    const auto path = temp_path("table.dipd");
    save_dataset(path, ds);
    const auto back = load_dataset(path);
    std::remove(path.c_str());
    EXPECT_EQ(back.generator_id, "table");
    EXPECT_EQ(content_hash(back), content_hash(ds));
    ASSERT_EQ(back.items.size(), ds.items.size());
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        EXPECT_EQ(back.items[i].image, ds.items[i].image);
        for (std::size_t k = 0; k < ds.items[i].x.x.size(); ++k)
            EXPECT_EQ(back.items[i].x.x[k], static_cast<float>(ds.items[i].x.x[k]));
    }
    EXPECT_EQ(back.split, ds.split);
}

TEST(Dataset, FileErrors) {
    const std::string bytes = encode_dataset(table_dataset());
    EXPECT_THROW(decode_dataset(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(decode_dataset("DIPX" + bytes.substr(4)), FormatError);
    EXPECT_THROW(decode_dataset(bytes.substr(0, 3)), FormatError);
    std::string v9 = bytes;
    v9[4] = 9;
    EXPECT_THROW(decode_dataset(v9), FormatError);
    std::string unknown_n = bytes;
    unknown_n[12] = 7; // no generator has 7 parameters
    EXPECT_THROW(decode_dataset(unknown_n), FormatError);
    EXPECT_THROW(load_dataset(temp_path("missing.dipd")), Error);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
    TrainConfig c = tiny_train("vase", 17);
    c.cosine_decay = true;
    c.grad_clip = 2.5;
    const auto back = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(back.steps, 17);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"stepz", 3}}), InvalidInput);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"mode", "clip"}}), InvalidInput);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"lr", -1.0}}), InvalidInput);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"batch_size", "many"}}), InvalidInput);
    EXPECT_THROW(train_config_from_json(nlohmann::json{{"p_mask", 0.7}, {"p_edge", 0.7}}), InvalidInput);
    EXPECT_THROW(train_config_from_json(nlohmann::json::array()), InvalidInput);
}

TEST(TrainConfig, LearningRateSchedule) {
    TrainConfig c;
    c.lr = 1.0;
    c.warmup_steps = 10;
    c.steps = 110;
    EXPECT_DOUBLE_EQ(learning_rate(c, 0), 0.1);
    EXPECT_DOUBLE_EQ(learning_rate(c, 9), 1.0);
    EXPECT_DOUBLE_EQ(learning_rate(c, 50), 1.0);
    c.cosine_decay = true;
    EXPECT_DOUBLE_EQ(learning_rate(c, 10), 1.0);
    EXPECT_NEAR(learning_rate(c, 60), 0.55, 1e-12);
    EXPECT_NEAR(learning_rate(c, 110), 0.1, 1e-12);
    for (int s = 11; s < 110; ++s) EXPECT_LE(learning_rate(c, s), learning_rate(c, s - 1));
}

TEST(TrainConfig, AugmentationDrawFrequencies) {
    TrainConfig c;
    Rng rng(4);
    const int n = 20000;
    int flip = 0, mask = 0, edges = 0, crop = 0;
    for (int i = 0; i < n; ++i) {
        const auto r = detail::draw_train_augment(c, rng);
        flip += r.flip;
        crop += r.crop_scale < 1.0;
        mask += r.replace == Replace::Mask;
        edges += r.replace == Replace::Edges;
        EXPECT_GE(r.brightness, -0.1);
        EXPECT_LE(r.brightness, 0.1);
        EXPECT_GE(r.crop_scale, 0.85);
    }
    EXPECT_NEAR(flip / double(n), 0.5, 0.015);
    EXPECT_NEAR(crop / double(n), 0.5, 0.015);
    EXPECT_NEAR(mask / double(n), 0.15, 0.01);
    EXPECT_NEAR(edges / double(n), 0.15, 0.01);
    c.no_augment();
    EXPECT_EQ(detail::draw_train_augment(c, rng), AugmentRecord{});
}

TEST(Train, FlipKeepsLabelsOfSymmetricGenerators) {
    // A flipped view from azimuth a matches the unflipped view from -a, so the
    // parameter label of a flipped training image stays correct.
    for (const auto& id : list_generators()) {
        ASSERT_TRUE(flip_is_label_safe(id));
        const auto& s = schema(id);
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto mesh = generate(s, sample_params(s, seed));
            AugmentRecord r;
            r.flip = true;
            const auto flipped = apply_augment(rasterize(mesh, Camera{30, 30, 1.8, 40, 64}, RenderMode::Mask), r);
            const auto mirror = rasterize(mesh, Camera{-30, 30, 1.8, 40, 64}, RenderMode::Mask);
            EXPECT_GT(silhouette_iou(flipped, mirror), 0.97) << id << " seed " << seed;
        }
    }
}

TEST(Train, InitialLossIsNearOne) {
    TrainConfig c = tiny_train("chair", 1);
    c.batch_size = 64;
    c.denoiser->image_size = kImage;
    const auto ds = build_dataset("chair", 64, 1, kImage);
    const auto r = train(c, ds);
    ASSERT_EQ(r.losses.size(), 1u);
    // The zero-initialized output head predicts 0, so the loss is the mean of
    // 64 * 13 squared standard normals.
    EXPECT_NEAR(r.losses[0], 1.0, 0.1);
}

TEST(Train, RerunGivesIdenticalCheckpoint) {
    const auto c = tiny_train("table", 6);
    const auto a = train(c, table_dataset());
    const auto b = train(c, table_dataset());
    EXPECT_EQ(checkpoint_hash(a.checkpoint), checkpoint_hash(b.checkpoint));
    EXPECT_EQ(a.losses, b.losses);
    TrainConfig other = c;
    other.seed = 12;
    EXPECT_NE(checkpoint_hash(train(other, table_dataset()).checkpoint), checkpoint_hash(a.checkpoint));
}

TEST(Train, LossDecreasesOnASmallSet) {
    TrainConfig c = tiny_train("table", 300);
    c.no_augment();
    c.lr = 3e-3;
    c.train_on_all = true;
    const auto r = train(c, table_dataset());
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 30; ++i) head += r.losses[static_cast<std::size_t>(i)], tail += r.losses[r.losses.size() - 1 - i];
    EXPECT_LT(tail, 0.7 * head);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
    const auto full = train(tiny_train("table", 8), table_dataset());
    const auto first = train(tiny_train("table", 4), table_dataset());
    EXPECT_EQ(first.checkpoint.step, 4);
    const auto rest = train(tiny_train("table", 8), table_dataset(), {}, &first.checkpoint);
    EXPECT_EQ(rest.losses.size(), 4u);
    EXPECT_EQ(checkpoint_hash(rest.checkpoint), checkpoint_hash(full.checkpoint));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rest.losses[i], full.losses[4 + i]);
}

TEST(Train, ResumeRejectsMismatchedCheckpoint) {
    const auto first = train(tiny_train("table", 1), table_dataset());
    TrainConfig wider = tiny_train("table", 2);
    wider.denoiser->d_model = 32;
    EXPECT_THROW(train(wider, table_dataset(), {}, &first.checkpoint), InvalidInput);
    const auto vase = build_dataset("vase", 10, 1, kImage);
    EXPECT_THROW(train(tiny_train("vase", 2), vase, {}, &first.checkpoint), InvalidInput);
}

TEST(Train, WritesLossLogAndCheckpoints) {
    TrainConfig c = tiny_train("table", 5);
    c.checkpoint_every = 2;
    std::ostringstream log;
    TrainHooks hooks;
    hooks.loss_log = &log;
    hooks.checkpoint_path = temp_path("log.ckpt");
    int calls = 0;
    hooks.on_step = [&](int, double) { ++calls; };
    const auto r = train(c, table_dataset(), hooks);
    EXPECT_EQ(calls, 5);
    std::istringstream in(log.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "step,loss,lr");
    int rows = 0;
    while (std::getline(in, line)) {
        EXPECT_EQ(line.substr(0, line.find(',')), std::to_string(rows));
        ++rows;
    }
    EXPECT_EQ(rows, 5);
    const auto saved = load_checkpoint(hooks.checkpoint_path);
    std::remove(hooks.checkpoint_path.c_str());
    EXPECT_EQ(checkpoint_hash(saved), checkpoint_hash(r.checkpoint));
}

TEST(Train, NonFiniteLossStopsWithLastGoodState) {
    Dataset ds = table_dataset();
    for (auto& item : ds.items) item.x.x[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig c = tiny_train("table", 5);
    TrainHooks hooks;
    hooks.checkpoint_path = temp_path("nan.ckpt");
    try {
        train(c, ds, hooks);
        FAIL() << "expected LastGoodCheckpoint";
    } catch (const LastGoodCheckpoint& e) {
        EXPECT_EQ(e.step, 0);
        EXPECT_EQ(e.checkpoint.step, 0);
        EXPECT_TRUE(e.checkpoint.weights.all_finite());
        const auto saved = load_checkpoint(hooks.checkpoint_path);
        EXPECT_EQ(checkpoint_hash(saved), checkpoint_hash(e.checkpoint));
        // Resuming from it repeats the failing step exactly.
        EXPECT_THROW(train(c, ds, {}, &e.checkpoint), LastGoodCheckpoint);
    }
    std::remove(hooks.checkpoint_path.c_str());
}

TEST(Train, ExternalModeUsesTokenProvider) {
    TrainConfig c = tiny_train("table", 3);
    c.mode = CondMode::External;
    c.denoiser = tiny_model("table", CondMode::External);
    EXPECT_THROW(train(c, table_dataset()), InvalidInput);
    TrainHooks hooks;
    hooks.tokens = [](std::size_t i) {
        ConditionTokens t;
        t.tokens = nn::Mat<float>::Constant(4, 16, static_cast<float>(i) / 20.0f);
        t.source = TokenSource::External;
        return t;
    };
    const auto r = train(c, table_dataset(), hooks);
    EXPECT_EQ(r.checkpoint.config.mode, CondMode::External);
    ConditionTokens t = hooks.tokens(3);
    const auto inv = invert(t, r.checkpoint, 3, 1);
    ASSERT_EQ(inv.candidates.size(), 3u);
    for (const auto& cand : inv.candidates) EXPECT_EQ(cand.score, 0.0);
    EXPECT_EQ(inv.generator_calls, 0u);
    EXPECT_THROW(invert(table_dataset().items[0].image, r.checkpoint, 1, 1), InvalidInput);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto r = train(tiny_train("table", 3), table_dataset());
    const std::string bytes = encode_checkpoint(r.checkpoint);
    const auto back = decode_checkpoint(bytes);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    EXPECT_EQ(back.generator_id, "table");
    EXPECT_EQ(back.step, 3);
    EXPECT_EQ(back.rng_state, r.checkpoint.rng_state);
    EXPECT_EQ(back.train_config, r.checkpoint.train_config);
    ASSERT_EQ(back.weights.size(), r.checkpoint.weights.size());
    for (std::size_t i = 0; i < back.weights.size(); ++i) EXPECT_EQ(back.weights[i], r.checkpoint.weights[i]);
}

TEST(Checkpoint, CorruptionIsDetected) {
    const auto r = train(tiny_train("table", 1), table_dataset());
    const std::string bytes = encode_checkpoint(r.checkpoint);
    for (std::size_t pos : {std::size_t{0}, std::size_t{5}, bytes.size() / 2, bytes.size() - 12, bytes.size() - 1}) {
        std::string bad = bytes;
        bad[pos] = static_cast<char>(bad[pos] ^ 0x40);
        EXPECT_THROW(decode_checkpoint(bad), FormatError) << "byte " << pos;
    }
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
    EXPECT_THROW(decode_checkpoint(""), FormatError);
    EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt")), Error);
}

TEST(Invert, CandidatesAreSortedAndDeterministic) {
    const auto r = train(tiny_train("table", 4), table_dataset());
    const auto& img = table_dataset().items[0].image;
    const auto a = invert(img, r.checkpoint, 8, 42);
    ASSERT_EQ(a.candidates.size(), 8u);
    EXPECT_EQ(a.generator_calls, 8u);
    for (std::size_t i = 1; i < 8; ++i) EXPECT_LE(a.candidates[i - 1].score, a.candidates[i].score);
    const auto& s = schema("table");
    for (const auto& c : a.candidates) {
        EXPECT_EQ(c.x.x.size(), s.size());
        EXPECT_NO_THROW(validate(s, c.params));
        for (double v : c.x.x) EXPECT_LE(std::abs(v), kSampleClamp);
    }
    const auto b = invert(img, r.checkpoint, 8, 42);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a.candidates[i].x.x, b.candidates[i].x.x);
    // The sample of seed j does not depend on k.
    const auto one = invert(img, r.checkpoint, 1, 42);
    bool found = false;
    for (const auto& c : a.candidates) found = found || c.x.x == one.candidates[0].x.x;
    EXPECT_TRUE(found);
}

TEST(Invert, RejectsWrongImageSize) {
    const auto r = train(tiny_train("table", 1), table_dataset());
    try {
        invert(Image(64, 64), r.checkpoint, 1, 0);
        FAIL() << "expected InvalidInput";
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("32x32"), std::string::npos);
    }
    EXPECT_THROW(invert(table_dataset().items[0].image, r.checkpoint, 0, 0), InvalidInput);
}
