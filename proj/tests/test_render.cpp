#include "dipcg/render.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace dipcg;

namespace {

TriangleMesh unit_cube() {
    TriangleMesh m;
    detail::add_box(m, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5});
    return m;
}

TriangleMesh random_mesh(Rng& rng) {
    TriangleMesh m;
    const int n = 1 + static_cast<int>(rng.index(12));
    for (int t = 0; t < n; ++t) {
        const auto base = static_cast<std::uint32_t>(m.vertices.size());
        for (int k = 0; k < 3; ++k) m.vertices.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        m.triangles.push_back({base, base + 1, base + 2});
    }
    return m;
}

double foreground(const Image& mask) {
    double a = 0.0;
    for (float v : mask.data) a += v;
    return a;
}

} // namespace

TEST(Render, CameraGrid) {
    const auto g = camera_grid();
    ASSERT_EQ(g.size(), 12u);
    EXPECT_EQ(g[0].azimuth_deg, 0.0);
    EXPECT_EQ(g[0].elevation_deg, 30.0);
    EXPECT_EQ(g[0].distance_factor, 1.8);
    EXPECT_EQ(g[1].distance_factor, 2.0);
    EXPECT_EQ(g[2].elevation_deg, 60.0);
    EXPECT_EQ(g[4].azimuth_deg, 30.0);
    for (const auto& c : g) EXPECT_EQ(c.fov_deg, 40.0);
}

TEST(Render, FaceOnCubeMatchesPinholeProjection) {
    const Camera cam{0.0, 0.0, 3.0, 40.0, 256};
    const Image mask = rasterize(unit_cube(), cam, RenderMode::Mask);
    // Camera distance from the center is 3 * sqrt(3)/2; the front face sits 0.5 closer.
    const double dist = 3.0 * std::sqrt(3.0) / 2.0 - 0.5;
    const double focal = 128.0 / std::tan(20.0 * std::numbers::pi / 180.0);
    const double side = focal / dist;
    EXPECT_NEAR(foreground(mask) / (side * side), 1.0, 0.02);
}

TEST(Render, MaskIsBinaryAndDeterministic) {
    const auto& s = schema("chair");
    const auto mesh = generate(s, sample_params(s, 1));
    const auto a = rasterize(mesh, default_camera(), RenderMode::Mask);
    for (float v : a.data) EXPECT_TRUE(v == 0.0f || v == 1.0f);
    EXPECT_EQ(a, rasterize(mesh, default_camera(), RenderMode::Mask));
    const auto sh = rasterize(mesh, default_camera(), RenderMode::Shaded);
    EXPECT_EQ(sh, rasterize(mesh, default_camera(), RenderMode::Shaded));
}

TEST(Render, ShadedRangeAndBackground) {
    const auto& s = schema("vase");
    const auto img = rasterize(generate(s, sample_params(s, 2)), default_camera(), RenderMode::Shaded);
    bool any_fg = false;
    for (float v : img.data) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        any_fg = any_fg || v < kBackground;
    }
    EXPECT_TRUE(any_fg);
    EXPECT_EQ(img.at(0, 0), kBackground);
}

TEST(Render, MaskAndShadedAgreeOnRandomMeshes) {
    Rng rng(12);
    for (int i = 0; i < 100; ++i) {
        const auto m = random_mesh(rng);
        Camera cam = camera_grid()[rng.index(12)];
        const auto mask = rasterize(m, cam, RenderMode::Mask);
        const auto shaded = rasterize(m, cam, RenderMode::Shaded);
        EXPECT_EQ(mask, mask_of(shaded)) << "mesh " << i;
    }
}

TEST(Render, MaskAreaShrinksWithDistance) {
    const auto& s = schema("table");
    const auto mesh = generate(s, sample_params(s, 4));
    double prev = 1e18;
    for (double df : {1.2, 1.5, 1.8, 2.0, 3.0, 5.0}) {
        const double a = foreground(rasterize(mesh, Camera{30, 30, df, 40, 64}, RenderMode::Mask));
        EXPECT_LE(a, prev);
        prev = a;
    }
}

TEST(Render, Errors) {
    EXPECT_THROW(rasterize(TriangleMesh{}, default_camera(), RenderMode::Mask), InvalidInput);
    EXPECT_THROW(rasterize(unit_cube(), Camera{0, 30, 1.0, 40, 64}, RenderMode::Mask), InvalidInput);
    EXPECT_THROW(rasterize(unit_cube(), Camera{0, 30, 1.8, 120, 64}, RenderMode::Mask), InvalidInput);
    EXPECT_THROW(rasterize(unit_cube(), Camera{0, 30, 1.8, 40, 16}, RenderMode::Mask), InvalidInput);
}

TEST(Render, EdgeMapOfConstantIsEmpty) {
    const auto e = edge_map(Image(32, 32, 0.4f));
    for (float v : e.data) EXPECT_EQ(v, 0.0f);
}

TEST(Render, EdgeMapOfStepIsOneColumn) {
    Image img(32, 32, 0.0f);
    for (int y = 0; y < 32; ++y)
        for (int x = 16; x < 32; ++x) img.at(x, y) = 1.0f;
    const auto e = edge_map(img);
    for (int y = 0; y < 32; ++y) {
        int count = 0, col = -1;
        for (int x = 0; x < 32; ++x)
            if (e.at(x, y) == 1.0f) ++count, col = x;
        EXPECT_EQ(count, 1) << "row " << y;
        EXPECT_TRUE(col == 15 || col == 16);
    }
}

TEST(Render, FlipIsAnInvolution) {
    Rng rng(3);
    Image img(40, 40);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    AugmentSpec spec;
    spec.flip = true;
    EXPECT_EQ(augment(augment(img, spec, 1), spec, 2), img);
    EXPECT_NE(augment(img, spec, 1), img);
}

TEST(Render, BrightnessJitter) {
    AugmentRecord r;
    r.brightness = 0.1;
    const auto out = apply_augment(Image(32, 32, 0.5f), r);
    for (float v : out.data) EXPECT_NEAR(v, 0.6f, 1e-6);
    r.brightness = 0.8;
    for (float v : apply_augment(Image(32, 32, 0.5f), r).data) EXPECT_EQ(v, 1.0f);
}

TEST(Render, UnitCropIsIdentity) {
    Rng rng(5);
    Image img(32, 32);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    AugmentRecord r;
    r.crop_scale = 1.0;
    r.crop_x = 0.7;
    EXPECT_EQ(apply_augment(img, r), img);
}

TEST(Render, AugmentIsDeterministicAndBounded) {
    const auto& s = schema("chair");
    const auto img = rasterize(generate(s, sample_params(s, 3)), default_camera(), RenderMode::Shaded);
    AugmentSpec spec;
    spec.jitter = spec.flip = spec.crop = true;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto a = augment(img, spec, seed);
        EXPECT_EQ(a, augment(img, spec, seed));
        EXPECT_EQ(a.width, img.width);
        EXPECT_EQ(a.height, img.height);
        for (float v : a.data) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    spec = AugmentSpec{};
    spec.to_mask = true;
    EXPECT_EQ(augment(img, spec, 0), mask_of(img));
    spec = AugmentSpec{};
    spec.to_edges = true;
    EXPECT_EQ(augment(img, spec, 0), edge_map(img));
}

TEST(Render, SilhouetteIou) {
    Image a(32, 32, 0.0f), b(32, 32, 0.0f);
    for (int x = 0; x < 16; ++x) a.at(x, 0) = 1.0f;
    for (int x = 8; x < 24; ++x) b.at(x, 0) = 1.0f;
    EXPECT_DOUBLE_EQ(silhouette_iou(a, b), 8.0 / 24.0);
    EXPECT_DOUBLE_EQ(silhouette_iou(a, a), 1.0);
    EXPECT_THROW(silhouette_iou(a, Image(16, 16)), InvalidInput);
}

TEST(Render, PgmRoundTrip) {
    Image img(33, 40);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i % 256) / 255.0f;
    std::istringstream is(pgm_bytes(img));
    const auto back = read_pgm(is);
    ASSERT_EQ(back.width, 33);
    ASSERT_EQ(back.height, 40);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6);
    std::istringstream bad("P2\n2 2\n255\n");
    EXPECT_THROW(read_pgm(bad), FormatError);
    std::istringstream trunc("P5\n4 4\n255\nab");
    EXPECT_THROW(read_pgm(trunc), FormatError);
    std::istringstream comment("P5\n# made by hand\n1 1\n255\n\x80");
    EXPECT_NEAR(read_pgm(comment).data[0], 128.0f / 255.0f, 1e-6);
}
