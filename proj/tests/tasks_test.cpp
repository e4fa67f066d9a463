#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "canon/tasks.hpp"

using namespace canon;

TEST_CASE("single free particle keeps its position") {
    Eigen::MatrixXd x0(1, 3), v0(1, 3);
    x0 << 0.3, -0.7, 1.1;
    v0.setZero();
    Eigen::VectorXd q(1);
    q << 1.0;
    const Eigen::MatrixXd xt = nbody_simulate(x0, v0, q, 1e-3, 500, 0.1);
    CHECK((xt - x0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("opposite charges stay mirror-symmetric with a fixed midpoint") {
    Eigen::MatrixXd x0(2, 3), v0(2, 3);
    x0 << 1, 0, 0, -1, 0, 0;
    v0.setZero();
    Eigen::VectorXd q(2);
    q << 1.0, -1.0;
    Eigen::MatrixXd v_final;
    const Eigen::MatrixXd xt = nbody_simulate(x0, v0, q, 1e-3, 800, 0.1, &v_final);
    CHECK((xt.row(0) + xt.row(1)).cwiseAbs().maxCoeff() < 1e-12);  // midpoint pinned
    CHECK(std::abs(xt(0, 0) + xt(1, 0)) < 1e-12);
    CHECK(xt(0, 0) < 1.0);  // attraction actually moved them
}

TEST_CASE("leapfrog nearly conserves the total energy") {
    NBodyGenConfig cfg;
    cfg.n_samples = 5;
    cfg.n_steps = 1000;
    NBodyDataset ds = gen_nbody(cfg, 2024);
    for (const auto& s : ds.samples) {
        const double e0 = nbody_total_energy(s.x0, s.v0, s.q, cfg.softening);
        Eigen::MatrixXd v_final;
        const Eigen::MatrixXd xt =
            nbody_simulate(s.x0, s.v0, s.q, cfg.dt, cfg.n_steps, cfg.softening, &v_final);
        const double e1 = nbody_total_energy(xt, v_final, s.q, cfg.softening);
        CHECK(std::abs(e1 - e0) / std::abs(e0) < 0.01);
    }
}

TEST_CASE("center of mass stays fixed after momentum removal") {
    NBodyGenConfig cfg;
    cfg.n_samples = 10;
    cfg.n_steps = 400;
    NBodyDataset ds = gen_nbody(cfg, 77);
    for (const auto& s : ds.samples) {
        const Eigen::RowVector3d before = s.x0.colwise().mean();
        const Eigen::RowVector3d after = s.xt.colwise().mean();
        CHECK((after - before).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("generators are deterministic under a fixed seed") {
    NBodyGenConfig cfg;
    cfg.n_samples = 3;
    cfg.n_steps = 50;
    const NBodyDataset a = gen_nbody(cfg, 99);
    const NBodyDataset b = gen_nbody(cfg, 99);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.samples[i].x0 == b.samples[i].x0);
        CHECK(a.samples[i].xt == b.samples[i].xt);
    }
    GlyphGenConfig gcfg;
    gcfg.n_samples = 6;
    const GlyphDataset ga = gen_glyphs(gcfg, 12);
    const GlyphDataset gb = gen_glyphs(gcfg, 12);
    for (std::size_t i = 0; i < 6; ++i) CHECK(ga.samples[i].image.data == gb.samples[i].image.data);
    ShapeGenConfig scfg;
    scfg.n_samples = 4;
    const ShapeDataset sa = gen_shapes(scfg, 5);
    const ShapeDataset sb = gen_shapes(scfg, 5);
    for (std::size_t i = 0; i < 4; ++i) CHECK(sa.samples[i].points == sb.samples[i].points);
}

TEST_CASE("charges balance with one extra positive for odd counts") {
    NBodyGenConfig cfg;
    cfg.n_samples = 20;
    cfg.n_steps = 1;
    const NBodyDataset ds = gen_nbody(cfg, 3);
    for (const auto& s : ds.samples) {
        int plus = 0;
        for (Eigen::Index i = 0; i < s.q.size(); ++i) plus += s.q(i) > 0 ? 1 : 0;
        CHECK(plus == 3);
    }
}

TEST_CASE("rotating a rendered glyph is an exact pixel permutation at 90 degrees") {
    Rng rng = Rng::seeded(41);
    const Image upright = render_glyph(3, 28, rng, true);
    const Image rotated = act_image(PlanarDiscrete{4, 1, false}, upright);
    // the multiset of pixel values is preserved exactly
    std::vector<double> a = upright.data, b = rotated.data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    // and the inverse rotation restores the image bit-exactly
    CHECK(act_image(PlanarDiscrete{4, 3, false}, rotated).data == upright.data);
}

TEST_CASE("glyph classes are pairwise distinct and asymmetric") {
    std::vector<Image> templates;
    for (std::size_t c = 0; c < 8; ++c) templates.push_back(render_glyph_clean(c, 28));

    SUBCASE("pairwise distance exceeds 1") {
        for (std::size_t a = 0; a < 8; ++a)
            for (std::size_t b = a + 1; b < 8; ++b) {
                double l2 = 0.0;
                for (std::size_t i = 0; i < templates[a].data.size(); ++i) {
                    const double d = templates[a].data[i] - templates[b].data[i];
                    l2 += d * d;
                }
                CHECK(std::sqrt(l2) > 1.0);
            }
    }
    SUBCASE("no class is fixed by a nonidentity c8 element") {
        for (std::size_t c = 0; c < 8; ++c) {
            const auto stab =
                stabilizer_elements(GroupSpec{GroupKind::Cn, 8}, Sample{templates[c]}, 0.05);
            CHECK(stab.size() == 1);
        }
    }
    SUBCASE("pixel range stays inside the unit interval") {
        GlyphGenConfig cfg;
        cfg.n_samples = 24;
        const GlyphDataset ds = gen_glyphs(cfg, 7);
        for (const auto& s : ds.samples)
            for (double v : s.image.data) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
    }
    SUBCASE("the optional extra class is fourfold symmetric") {
        const Image plus = render_glyph_clean(8, 28, true);
        const auto stab = stabilizer_elements(GroupSpec{GroupKind::Cn, 4}, Sample{plus}, 1e-9);
        CHECK(stab.size() == 4);
    }
}

TEST_CASE("ellipsoid samples satisfy the quadric before posing") {
    Rng rng = Rng::seeded(15);
    const Eigen::MatrixXd pts = sample_shape_surface(0, 200, rng);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        const double q = pts(i, 0) * pts(i, 0) / (1.0 * 1.0) +
                         pts(i, 1) * pts(i, 1) / (0.65 * 0.65) +
                         pts(i, 2) * pts(i, 2) / (0.4 * 0.4);
        CHECK(std::abs(q - 1.0) < 1e-10);
    }
}

TEST_CASE("pose-invariant descriptors separate the shape classes") {
    // oracle: sorted pairwise-distance profile, nearest class centroid
    auto descriptor = [](const Eigen::MatrixXd& pts) {
        std::vector<double> d;
        for (Eigen::Index i = 0; i < pts.rows(); ++i)
            for (Eigen::Index j = i + 1; j < pts.rows(); ++j)
                d.push_back((pts.row(i) - pts.row(j)).norm());
        std::sort(d.begin(), d.end());
        std::vector<double> profile(32);
        for (std::size_t k = 0; k < 32; ++k)
            profile[k] = d[(d.size() - 1) * k / 31];
        return profile;
    };
    ShapeGenConfig cfg;
    cfg.n_samples = 80;  // 20 per class
    const ShapeDataset train = gen_shapes(cfg, 21);
    cfg.n_samples = 60;
    const ShapeDataset test = gen_shapes(cfg, 22);

    std::vector<std::vector<double>> centroids(4, std::vector<double>(32, 0.0));
    std::vector<std::size_t> counts(4, 0);
    for (const auto& s : train.samples) {
        const auto d = descriptor(s.points);
        for (std::size_t k = 0; k < 32; ++k) centroids[s.label][k] += d[k];
        ++counts[s.label];
    }
    for (std::size_t c = 0; c < 4; ++c)
        for (double& v : centroids[c]) v /= static_cast<double>(counts[c]);

    std::size_t correct = 0;
    for (const auto& s : test.samples) {
        const auto d = descriptor(s.points);
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < 4; ++c) {
            double dist = 0.0;
            for (std::size_t k = 0; k < 32; ++k)
                dist += (d[k] - centroids[c][k]) * (d[k] - centroids[c][k]);
            if (dist < best_dist) {
                best_dist = dist;
                best = c;
            }
        }
        if (best == s.label) ++correct;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(test.samples.size()) > 0.95);
}

TEST_CASE("idx parsing") {
    const auto tmp = std::filesystem::temp_directory_path();
    SUBCASE("hand-built label file") {
        const std::string path = (tmp / "labels.idx").string();
        {
            std::ofstream os(path, std::ios::binary);
            const unsigned char bytes[] = {0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1};
            os.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
        }
        const auto labels = read_idx_labels(path);
        CHECK(labels == std::vector<std::uint8_t>{7, 2, 1});
        std::filesystem::remove(path);
    }
    SUBCASE("hand-built image file") {
        const std::string path = (tmp / "images.idx").string();
        {
            std::ofstream os(path, std::ios::binary);
            const unsigned char bytes[] = {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0,
                                           2, 0, 0, 0, 2, 0,  255, 128, 64};
            os.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
        }
        const auto images = read_idx_images(path);
        REQUIRE(images.size() == 1);
        CHECK(images[0].height == 2);
        CHECK(images[0].data[0] == 0.0);
        CHECK(images[0].data[1] == 1.0);
        CHECK(images[0].data[2] == doctest::Approx(128.0 / 255.0).epsilon(1e-12));
        CHECK(images[0].data[3] == doctest::Approx(64.0 / 255.0).epsilon(1e-12));
        std::filesystem::remove(path);
    }
    SUBCASE("wrong magic names expected and actual values") {
        const std::string path = (tmp / "badmagic.idx").string();
        {
            std::ofstream os(path, std::ios::binary);
            const unsigned char bytes[] = {0, 0, 9, 9, 0, 0, 0, 0};
            os.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
        }
        try {
            read_idx_labels(path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("0x00000801") != std::string::npos);
            CHECK(msg.find("00000909") != std::string::npos);
        }
        std::filesystem::remove(path);
    }
    SUBCASE("truncated payload reports the byte offset") {
        const std::string path = (tmp / "short.idx").string();
        {
            std::ofstream os(path, std::ios::binary);
            const unsigned char bytes[] = {0, 0, 8, 1, 0, 0, 0, 9, 1, 2};
            os.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
        }
        CHECK_THROWS_AS(read_idx_labels(path), IoError);
        std::filesystem::remove(path);
    }
}

TEST_CASE("dataset containers round-trip bit-exactly") {
    const auto tmp = std::filesystem::temp_directory_path();
    SUBCASE("nbody") {
        NBodyGenConfig cfg;
        cfg.n_samples = 4;
        cfg.n_steps = 20;
        const NBodyDataset ds = gen_nbody(cfg, 55);
        const std::string path = (tmp / "nbody_rt.canon1").string();
        save_nbody(path, ds, 55);
        const NBodyDataset loaded = load_nbody(path);
        REQUIRE(loaded.samples.size() == 4);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(loaded.samples[i].x0 == ds.samples[i].x0);
            CHECK(loaded.samples[i].v0 == ds.samples[i].v0);
            CHECK(loaded.samples[i].xt == ds.samples[i].xt);
            CHECK(loaded.samples[i].q == ds.samples[i].q);
        }
        CHECK(std::filesystem::exists(path + ".meta"));
        std::filesystem::remove(path);
        std::filesystem::remove(path + ".meta");
    }
    SUBCASE("glyphs") {
        GlyphGenConfig cfg;
        cfg.n_samples = 5;
        const GlyphDataset ds = gen_glyphs(cfg, 66);
        const std::string path = (tmp / "glyphs_rt.canon1").string();
        save_glyphs(path, ds, 66);
        const GlyphDataset loaded = load_glyphs(path);
        REQUIRE(loaded.samples.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(loaded.samples[i].image.data == ds.samples[i].image.data);
            CHECK(loaded.samples[i].label == ds.samples[i].label);
            CHECK(loaded.samples[i].applied_g.k == ds.samples[i].applied_g.k);
        }
        std::filesystem::remove(path);
        std::filesystem::remove(path + ".meta");
    }
    SUBCASE("shapes") {
        ShapeGenConfig cfg;
        cfg.n_samples = 6;
        const ShapeDataset ds = gen_shapes(cfg, 77);
        const std::string path = (tmp / "shapes_rt.canon1").string();
        save_shapes(path, ds, 77);
        const ShapeDataset loaded = load_shapes(path);
        REQUIRE(loaded.samples.size() == 6);
        for (std::size_t i = 0; i < 6; ++i) CHECK(loaded.samples[i].points == ds.samples[i].points);
        std::filesystem::remove(path);
        std::filesystem::remove(path + ".meta");
    }
}
